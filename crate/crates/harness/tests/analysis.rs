mod common;

use free_harness::analysis::{analyze, run_analysis, CALIBRATION_FRACTIONS};
use free_harness::runner::Runner;
use free_harness::HarnessError;

#[test]
fn full_report_on_small_corpus() {
    let mut cfg = common::small_config();
    cfg.analysis_thresholds = vec![0.8, 0.4];
    let report = run_analysis(&cfg).unwrap();

    let oracle = report.oracle.unwrap();
    let tokens: usize = oracle.result.traces.iter().map(|t| t.tokens.len()).sum();
    assert_eq!(oracle.exit_histogram.iter().sum::<usize>(), tokens);
    assert!(oracle.mean_cosine <= 1.0 + 1e-6);
    if oracle.exited_fraction > 0.0 {
        assert!(oracle.mean_cosine < 1.0);
    }
    assert_eq!(oracle.full_rouge_l, 1.0);

    let stat = report.static_depth.unwrap();
    assert_eq!(stat.iter().map(|r| r.depth).collect::<Vec<_>>(), (1..=8).collect::<Vec<_>>());
    let deepest = stat.last().unwrap();
    assert_eq!(deepest.result.quality.rouge_l, 1.0);
    assert!(!deepest.degenerate);
    assert_eq!(deepest.result.cost.normalized_cost, 1.0);

    let cost = report.cost.unwrap();
    assert_eq!(cost.len(), 3);
    assert_eq!(cost[0].result.cost.normalized_cost, 1.0);
    for row in &cost {
        let s = &row.shares;
        assert!((s.sa + s.ca + s.ffn + s.lm_head + s.kv_copy - 1.0).abs() < 1e-9);
    }

    for row in report.spd_vs_sc.unwrap() {
        assert_eq!(row.spd.state_copied, 0);
        if row.sc.exit_rate > 0.0 {
            assert!(row.sc.state_copied > 0, "lambda {}", row.lambda);
        }
        assert!(row.spd.traces.iter().all(|t| t.state_copied_entries == 0));
    }

    let depths = report.shallow_depth.unwrap();
    assert_eq!(depths.iter().map(|r| r.shallow_depth).collect::<Vec<_>>(), (1..8).collect::<Vec<_>>());

    let sizes = report.calibration_size.unwrap();
    assert_eq!(sizes.len(), CALIBRATION_FRACTIONS.len());
    assert!(sizes.windows(2).all(|w| w[0].warmup_sentences <= w[1].warmup_sentences));
    assert_eq!(sizes.last().unwrap().warmup_sentences, 12);
}

#[test]
fn selected_analyses_only() {
    let mut cfg = common::small_config();
    cfg.analyses = vec!["spd_vs_sc".into()];
    cfg.analysis_thresholds = vec![0.5];
    let report = run_analysis(&cfg).unwrap();
    assert!(report.oracle.is_none() && report.static_depth.is_none());
    assert_eq!(report.spd_vs_sc.unwrap().len(), 1);
}

#[test]
fn unknown_analysis_is_a_config_error() {
    let cfg = common::small_config();
    let w = cfg.build_weights().unwrap();
    let corpus = cfg.build_corpus(&w).unwrap();
    let mut runner = Runner::new(&w, &corpus, cfg.max_new, 1).unwrap();
    let err = analyze(&mut runner, &cfg, &["tables".into()]).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)));
    assert!(err.to_string().contains("tables"));
}
