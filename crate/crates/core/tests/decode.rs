//! End-to-end decoding through the public API.

use std::io::Cursor;

use free_core::calibration::{EstimatorSettings, ThresholdEstimator};
use free_core::engine::{
    decode, decode_full, decode_with_estimator, emit_trace, read_traces, DecodeOptions, DeepKvFill,
    ExitPolicy,
};
use free_core::model::{init_weights, read_weights, write_weights, ModelConfig};

fn policies() -> Vec<ExitPolicy> {
    vec![
        ExitPolicy::Full,
        ExitPolicy::Static { depth: 3 },
        ExitPolicy::Conventional { threshold: 0.4 },
        ExitPolicy::Oracle,
        ExitPolicy::shallow_deep(0.4),
        ExitPolicy::ShallowDeep { threshold: 0.4, fill: DeepKvFill::StateCopy },
    ]
}

#[test]
fn saved_weights_decode_identically() {
    let w = init_weights(&ModelConfig::toy(21)).unwrap();
    let mut buf = Vec::new();
    write_weights(&w, &mut buf).unwrap();
    let loaded = read_weights(Cursor::new(buf)).unwrap();
    assert_eq!(loaded.checksum(), w.checksum());
    let prompt = [3u32, 9, 27, 14];
    for policy in policies() {
        let a = decode(&w, &prompt, &policy, DecodeOptions::new(16)).unwrap();
        let b = decode(&loaded, &prompt, &policy, DecodeOptions::new(16)).unwrap();
        assert_eq!(a.tokens, b.tokens, "{}", policy.label());
    }
}

#[test]
fn cross_attention_model_runs_every_policy() {
    let mut cfg = ModelConfig::toy(22);
    cfg.use_cross_attention = true;
    let w = init_weights(&cfg).unwrap();
    let prompt = [5u32, 6, 7, 8, 9];
    let full = decode_full(&w, &prompt, 12).unwrap();
    for policy in policies() {
        let out = decode(&w, &prompt, &policy, DecodeOptions::new(12)).unwrap();
        let ops = out.trace.total_ops();
        assert_eq!(ops.ca, ops.sa, "{}", policy.label());
        assert!(!out.tokens.is_empty() && out.tokens.len() <= 12);
    }
    let never = decode(&w, &prompt, &ExitPolicy::shallow_deep(1.1), DecodeOptions::new(12)).unwrap();
    assert_eq!(never.tokens, full.tokens);
}

#[test]
fn traces_survive_json_lines() {
    let w = init_weights(&ModelConfig::toy(23)).unwrap();
    let traces: Vec<_> = policies()
        .iter()
        .map(|p| decode(&w, &[1, 2, 3], p, DecodeOptions::new(10)).unwrap().trace)
        .collect();
    let mut buf = Vec::new();
    for t in &traces {
        emit_trace(t, &mut buf).unwrap();
    }
    assert_eq!(read_traces(Cursor::new(buf)).unwrap(), traces);
}

#[test]
fn estimator_freezes_after_warmup() {
    let w = init_weights(&ModelConfig::toy(24)).unwrap();
    let mut est = ThresholdEstimator::new(EstimatorSettings {
        initial_threshold: 0.9,
        zeta: 0.4,
        warmup_sentences: 3,
    });
    let mut seen = 0;
    for i in 0..6u32 {
        let before = est.threshold();
        let out = decode_with_estimator(&w, &[i + 2, i + 3, i + 4], &mut est, 16).unwrap();
        if i < 3 {
            seen += out.tokens.len();
            assert_eq!(est.samples().len(), seen);
        } else {
            assert_eq!(est.threshold(), before);
            assert!(!out.trace.final_flush);
        }
    }
    assert!(est.is_frozen());
    assert_eq!(est.sentences_seen(), 3);
}
