//! Dynamic layer mapping between a shallow and a deep stack of hidden states.
//!
//! Each shallow layer `i` is assigned a deep layer `m(i)` minimising the
//! summed per-layer MSE, subject to `m(1) <= m(2) <= ... <= m(L_S)`. The
//! minimisation is a monotone alignment over the `L_S x L` cost grid.

use crate::tensor::Matrix;

use super::{ModelError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KdMapping {
    /// `map[i]` is the 1-based deep layer assigned to shallow layer `i + 1`.
    pub map: Vec<usize>,
    /// Mean of the selected per-layer MSEs.
    pub loss: f64,
}

/// Mean squared error between two equally shaped hidden-state matrices.
pub fn layerwise_mse(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(ModelError::Dimension(format!(
            "cannot compare {}x{} with {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

pub fn kd_dyna_map(shallow: &[Matrix], deep: &[Matrix]) -> Result<KdMapping> {
    if shallow.is_empty() || deep.is_empty() {
        return Err(ModelError::Dimension("empty hidden-state stack".into()));
    }
    let cost = shallow
        .iter()
        .map(|s| deep.iter().map(|d| layerwise_mse(s, d)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(monotone_assignment(&cost))
}

/// Minimum-cost non-decreasing assignment of rows to columns of `cost`.
pub(crate) fn monotone_assignment(cost: &[Vec<f64>]) -> KdMapping {
    let rows = cost.len();
    let cols = cost[0].len();
    // best[i][j]: min cost of rows 0..=i with row i assigned to column j.
    let mut best = vec![vec![0.0f64; cols]; rows];
    let mut from = vec![vec![0usize; cols]; rows];
    best[0].clone_from(&cost[0]);
    for i in 1..rows {
        let mut run_min = f64::INFINITY;
        let mut run_arg = 0;
        for j in 0..cols {
            if best[i - 1][j] < run_min {
                run_min = best[i - 1][j];
                run_arg = j;
            }
            best[i][j] = cost[i][j] + run_min;
            from[i][j] = run_arg;
        }
    }
    let mut j = 0;
    for c in 1..cols {
        if best[rows - 1][c] < best[rows - 1][j] {
            j = c;
        }
    }
    let total = best[rows - 1][j];
    let mut map = vec![0; rows];
    for i in (0..rows).rev() {
        map[i] = j + 1;
        j = from[i][j];
    }
    KdMapping {
        map,
        loss: total / rows as f64,
    }
}
