//! Approximating one matrix by the masked product of two random matrices.
//!
//! Column convention: `W` is `d2 x d1`, `W1` is `n x d1`, `W2` is `d2 x n`, and
//! the approximation is `(W2 . M2)(W1 . M1)`. `M1` keeps hidden units
//! `[k n', (k + 1) n')` attached to input coordinate `k` only, so entry `(i, j)`
//! of the product is a subset sum of `W2[i, h] W1[h, j]` over block `j`.

use serde::{Serialize, Serializer};

use super::solver::{solve_subset_sum_with, SearchMode, SolveStatus, SubsetSumInstance, MAX_ITEMS};
use crate::error::{invalid, Result};
use crate::linalg::{max_norm, Matrix};

/// Per-coordinate block-size constant, calibrated with `calibrate-c`
/// (eps = 0.1, d1 = d2 = 2, 200 seeds, success rate >= 0.9): the smallest
/// passing block is 15, so this is `15 / ln 40`.
pub const DEFAULT_C_HAT: f64 = 4.066275460227252;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FactorizeOptions {
    pub mode: SearchMode,
    /// Largest sub-solve; blocks above this are split into balanced chunks.
    pub max_chunk: usize,
}

impl Default for FactorizeOptions {
    fn default() -> Self {
        Self { mode: SearchMode::FirstWithinTolerance, max_chunk: MAX_ITEMS }
    }
}

impl FactorizeOptions {
    pub fn optimal() -> Self {
        Self { mode: SearchMode::Optimal, ..Self::default() }
    }
}

fn serialize_mask<S: Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<u8>> = (0..m.rows()).map(|i| m.row(i).iter().map(|&v| u8::from(v != 0.0)).collect()).collect();
    rows.serialize(s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FactorizedMaskPair {
    #[serde(rename = "M1", serialize_with = "serialize_mask")]
    pub m1: Matrix,
    #[serde(rename = "M2", serialize_with = "serialize_mask")]
    pub m2: Matrix,
    pub block_size: usize,
    pub tolerance: f64,
    pub achieved_max_err: f64,
    pub per_entry_errors: Matrix,
    pub status: Vec<Vec<SolveStatus>>,
    /// Entries that lacked hidden units of a required sign (ReLU variant only).
    pub sign_deficits: usize,
}

impl FactorizedMaskPair {
    pub fn all_hit(&self) -> bool {
        self.status.iter().flatten().all(|&s| s == SolveStatus::Hit)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `(W2 . M2)(W1 . M1)`.
pub fn reconstruct(w1: &Matrix, w2: &Matrix, m1: &Matrix, m2: &Matrix) -> Result<Matrix> {
    w2.hadamard(m2)?.matmul(&w1.hadamard(m1)?)
}

pub fn block_diagonal_mask(n: usize, d1: usize) -> Matrix {
    let nb = n / d1;
    Matrix::from_fn(n, d1, |h, k| if h / nb == k && h < nb * d1 { 1.0 } else { 0.0 })
}

/// Whether `m1` is exactly the all-ones-within-blocks pattern.
pub fn is_block_diagonal(m1: &Matrix) -> bool {
    *m1 == block_diagonal_mask(m1.rows(), m1.cols())
}

/// `ceil(C_hat ln(d1 d2 / eps))`, the number of hidden units per input coordinate.
pub fn required_block_size(d1: usize, d2: usize, eps: f64, c_hat: f64) -> Result<usize> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(invalid(format!("eps must lie in (0, 1), got {eps}")));
    }
    if !(c_hat > 0.0 && c_hat.is_finite()) || d1 == 0 || d2 == 0 {
        return Err(invalid("C_hat and dimensions must be positive"));
    }
    Ok(ceil_tight(c_hat * ((d1 * d2) as f64 / eps).ln()))
}

/// Ceiling that ignores last-bit rounding noise of a logarithm.
pub fn ceil_tight(x: f64) -> usize {
    let r = x.round();
    let v = if (x - r).abs() <= 1e-9 * r.abs().max(1.0) { r } else { x.ceil() };
    v.max(0.0) as usize
}

fn check_shapes(w: &Matrix, w1: &Matrix, w2: &Matrix, eps_entry: f64, min_units: usize) -> Result<(usize, usize, usize)> {
    let (d2, d1) = w.shape();
    let n = w1.rows();
    if w1.cols() != d1 || w2.shape() != (d2, n) {
        return Err(invalid(format!(
            "factorization shapes: W {:?}, W1 {:?}, W2 {:?}",
            w.shape(),
            w1.shape(),
            w2.shape()
        )));
    }
    if n < min_units * d1 {
        return Err(invalid(format!("hidden width {n} is below {min_units} unit(s) per input coordinate ({d1})")));
    }
    if !(eps_entry > 0.0) {
        return Err(invalid("entry tolerance must be positive"));
    }
    if max_norm(w) > 1.0 + 1e-12 {
        return Err(invalid(format!("target entries must lie in [-1, 1], max is {}", max_norm(w))));
    }
    Ok((d1, d2, n))
}

/// Sum of `items[i]` over `chosen[i]`, in ascending index order.
fn chosen_sum(items: &[f64], chosen: &[bool]) -> f64 {
    items.iter().zip(chosen).filter(|(_, &c)| c).fold(0.0, |s, (&v, _)| s + v)
}

/// Subset-sum over `items` in consecutive balanced chunks, each solving for the
/// residual left by the previous ones. Returns the chosen flags and error.
fn chunked_solve(items: &[f64], target: f64, tol: f64, opts: &FactorizeOptions) -> Result<(Vec<bool>, f64)> {
    let mut chosen = vec![false; items.len()];
    if items.is_empty() {
        return Ok((chosen, target.abs()));
    }
    let cap = opts.max_chunk.clamp(1, MAX_ITEMS);
    let parts = items.len().div_ceil(cap);
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        let residual = target - chosen_sum(items, &chosen);
        if opts.mode == SearchMode::FirstWithinTolerance && residual.abs() <= tol {
            break;
        }
        let inst = SubsetSumInstance::new(items[start..start + len].to_vec(), residual, tol)?;
        let r = solve_subset_sum_with(&inst, opts.mode)?;
        for i in r.indices() {
            chosen[start + i] = true;
        }
        start += len;
    }
    let err = (target - chosen_sum(items, &chosen)).abs();
    Ok((chosen, err))
}

fn status_of(err: f64, tol: f64) -> SolveStatus {
    if err <= tol {
        SolveStatus::Hit
    } else {
        SolveStatus::BestEffort
    }
}

/// Binary masks with `(W2 . M2)(W1 . M1) ~ W` entrywise within `eps_entry`.
pub fn approx_matrix_product(
    w: &Matrix,
    w1: &Matrix,
    w2: &Matrix,
    eps_entry: f64,
    opts: &FactorizeOptions,
) -> Result<FactorizedMaskPair> {
    let (d1, d2, n) = check_shapes(w, w1, w2, eps_entry, 1)?;
    let nb = n / d1;
    let m1 = block_diagonal_mask(n, d1);
    let mut m2 = Matrix::zeros(d2, n);
    let mut errors = Matrix::zeros(d2, d1);
    let mut status = vec![vec![SolveStatus::Hit; d1]; d2];
    for i in 0..d2 {
        for j in 0..d1 {
            let units = j * nb..(j + 1) * nb;
            let items: Vec<f64> = units.clone().map(|h| w2.get(i, h) * w1.get(h, j)).collect();
            let (chosen, err) = chunked_solve(&items, w.get(i, j), eps_entry, opts)?;
            for (h, c) in units.zip(chosen) {
                if c {
                    m2.set(i, h, 1.0);
                }
            }
            errors.set(i, j, err);
            status[i][j] = status_of(err, eps_entry);
        }
    }
    let achieved_max_err = max_norm(&w.sub(&reconstruct(w1, w2, &m1, &m2)?)?);
    Ok(FactorizedMaskPair {
        m1,
        m2,
        block_size: nb,
        tolerance: eps_entry,
        achieved_max_err,
        per_entry_errors: errors,
        status,
        sign_deficits: 0,
    })
}

/// Induced linear maps of the masked ReLU network on positive and negative
/// inputs: for `x_j > 0` column `j` of the output is `A+[:, j] x_j`, for
/// `x_j < 0` it is `A-[:, j] x_j`.
pub fn relu_induced_maps(w1: &Matrix, w2: &Matrix, m1: &Matrix, m2: &Matrix) -> Result<(Matrix, Matrix)> {
    let first = w1.hadamard(m1)?;
    let pos = first.map(|v| if v > 0.0 { v } else { 0.0 });
    let neg = first.map(|v| if v < 0.0 { v } else { 0.0 });
    let second = w2.hadamard(m2)?;
    Ok((second.matmul(&pos)?, second.matmul(&neg)?))
}

/// `(W2 . M2) relu((W1 . M1) x)` for a column input `x`.
pub fn relu_net_apply(w1: &Matrix, w2: &Matrix, m1: &Matrix, m2: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
    let col = Matrix::new(x.len(), 1, x.to_vec())?;
    let hidden = w1.hadamard(m1)?.matmul(&col)?.map(|v| v.max(0.0));
    Ok(w2.hadamard(m2)?.matmul(&hidden)?.as_slice().to_vec())
}

/// ReLU two-layer variant: within each block, units with positive first-layer
/// weight serve positive inputs and units with negative weight serve negative
/// inputs, each group solving its own subset sum for `W[i, j]`.
pub fn approx_linear_with_relu(
    w: &Matrix,
    w1: &Matrix,
    w2: &Matrix,
    eps_entry: f64,
    opts: &FactorizeOptions,
) -> Result<FactorizedMaskPair> {
    let (d1, d2, n) = check_shapes(w, w1, w2, eps_entry, 2)?;
    let nb = n / d1;
    let m1 = block_diagonal_mask(n, d1);
    let mut m2 = Matrix::zeros(d2, n);
    let mut errors = Matrix::zeros(d2, d1);
    let mut status = vec![vec![SolveStatus::Hit; d1]; d2];
    let mut deficits = 0;
    for j in 0..d1 {
        let units = j * nb..(j + 1) * nb;
        let pos: Vec<usize> = units.clone().filter(|&h| w1.get(h, j) > 0.0).collect();
        let neg: Vec<usize> = units.filter(|&h| w1.get(h, j) < 0.0).collect();
        for i in 0..d2 {
            let target = w.get(i, j);
            let mut worst: f64 = 0.0;
            for group in [&pos, &neg] {
                if group.is_empty() && target != 0.0 {
                    deficits += 1;
                }
                let items: Vec<f64> = group.iter().map(|&h| w2.get(i, h) * w1.get(h, j)).collect();
                let (chosen, err) = chunked_solve(&items, target, eps_entry, opts)?;
                for (&h, c) in group.iter().zip(chosen) {
                    if c {
                        m2.set(i, h, 1.0);
                    }
                }
                worst = worst.max(err);
            }
            errors.set(i, j, worst);
            status[i][j] = status_of(worst, eps_entry);
        }
    }
    let (a_pos, a_neg) = relu_induced_maps(w1, w2, &m1, &m2)?;
    let achieved_max_err = max_norm(&w.sub(&a_pos)?).max(max_norm(&w.sub(&a_neg)?));
    Ok(FactorizedMaskPair {
        m1,
        m2,
        block_size: nb,
        tolerance: eps_entry,
        achieved_max_err,
        per_entry_errors: errors,
        status,
        sign_deficits: deficits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sample_uniform_matrix;
    use crate::rng::RngStream;
    use crate::subset_sum::solver::solve_subset_sum;

    fn sources(n: usize, d1: usize, d2: usize, seed: u64) -> (Matrix, Matrix) {
        let mut rng = RngStream::new(seed);
        (sample_uniform_matrix(n, d1, 1.0, &mut rng).unwrap(), sample_uniform_matrix(d2, n, 1.0, &mut rng).unwrap())
    }

    #[test]
    fn scalar_case_reduces_to_subset_sum() {
        let (w1, w2) = sources(10, 1, 1, 3);
        let w = Matrix::from_rows(&[vec![0.42]]).unwrap();
        let pair = approx_matrix_product(&w, &w1, &w2, 1e-3, &FactorizeOptions::default()).unwrap();
        let items: Vec<f64> = (0..10).map(|h| w2.get(0, h) * w1.get(h, 0)).collect();
        let direct = solve_subset_sum(&SubsetSumInstance::new(items, 0.42, 1e-3).unwrap()).unwrap();
        let chosen: Vec<usize> = (0..10).filter(|&h| pair.m2.get(0, h) == 1.0).collect();
        assert_eq!(chosen, direct.indices());
        assert_eq!(pair.achieved_max_err, direct.achieved_error);
    }

    #[test]
    fn zero_target_zero_masks() {
        let (w1, w2) = sources(8, 2, 2, 4);
        let pair = approx_matrix_product(&Matrix::zeros(2, 2), &w1, &w2, 0.01, &FactorizeOptions::default()).unwrap();
        assert!(pair.m2.is_zero());
        assert_eq!(pair.achieved_max_err, 0.0);
        let relu = approx_linear_with_relu(&Matrix::zeros(2, 2), &w1, &w2, 0.01, &FactorizeOptions::default()).unwrap();
        assert!(relu.m2.is_zero());
        assert_eq!(relu.achieved_max_err, 0.0);
    }

    #[test]
    fn structure_and_reconstruction() {
        let (w1, w2) = sources(33, 2, 3, 5);
        let w = sample_uniform_matrix(3, 2, 1.0, &mut RngStream::new(6)).unwrap();
        let pair = approx_matrix_product(&w, &w1, &w2, 1e-4, &FactorizeOptions::optimal()).unwrap();
        assert!(is_block_diagonal(&pair.m1));
        assert_eq!(pair.m1.get(32, 1), 0.0);
        assert_eq!(pair.achieved_max_err, max_norm(&pair.per_entry_errors));
        assert!(pair.m2.is_binary());
    }

    #[test]
    fn wide_blocks_are_split() {
        let (w1, w2) = sources(120, 2, 1, 7);
        let w = Matrix::from_rows(&[vec![0.3, -0.8]]).unwrap();
        let pair = approx_matrix_product(&w, &w1, &w2, 1e-6, &FactorizeOptions::default()).unwrap();
        assert_eq!(pair.block_size, 60);
        assert!(pair.all_hit());
        let recon = reconstruct(&w1, &w2, &pair.m1, &pair.m2).unwrap();
        assert_eq!(max_norm(&w.sub(&recon).unwrap()), pair.achieved_max_err);
    }

    #[test]
    fn preconditions() {
        let (w1, w2) = sources(1, 2, 1, 8);
        assert!(approx_matrix_product(&Matrix::zeros(1, 2), &w1, &w2, 0.1, &FactorizeOptions::default()).is_err());
        let (w1, w2) = sources(4, 1, 1, 8);
        let big = Matrix::from_rows(&[vec![1.5]]).unwrap();
        assert!(approx_matrix_product(&big, &w1, &w2, 0.1, &FactorizeOptions::default()).is_err());
        let (w1, w2) = sources(3, 2, 1, 8);
        assert!(approx_linear_with_relu(&Matrix::zeros(1, 2), &w1, &w2, 0.1, &FactorizeOptions::default()).is_err());
    }

    #[test]
    fn relu_two_point_probe() {
        let (w1, w2) = sources(40, 1, 1, 9);
        let w = Matrix::from_rows(&[vec![0.6]]).unwrap();
        let eps = 0.01;
        let pair = approx_linear_with_relu(&w, &w1, &w2, eps, &FactorizeOptions::default()).unwrap();
        assert!(pair.all_hit(), "{:?}", pair.per_entry_errors);
        for x in [1.0, -1.0] {
            let y = relu_net_apply(&w1, &w2, &pair.m1, &pair.m2, &[x]).unwrap();
            assert!((y[0] - 0.6 * x).abs() <= eps, "x={x} y={y:?}");
        }
    }

    #[test]
    fn relu_missing_sign_is_reported() {
        let w1 = Matrix::from_rows(&[vec![0.5], vec![0.7], vec![0.2]]).unwrap();
        let w2 = Matrix::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let w = Matrix::from_rows(&[vec![0.7]]).unwrap();
        let pair = approx_linear_with_relu(&w, &w1, &w2, 0.01, &FactorizeOptions::default()).unwrap();
        assert_eq!(pair.sign_deficits, 1);
        assert!(!pair.all_hit());
        assert_eq!(pair.achieved_max_err, 0.7);
    }

    #[test]
    fn block_size_formula() {
        assert_eq!(required_block_size(1, 1, (-10f64).exp(), 1.0).unwrap(), 10);
        assert!(required_block_size(2, 2, 1.0, 1.0).is_err());
        assert!(required_block_size(2, 2, 0.0, 1.0).is_err());
        let a = required_block_size(2, 2, 0.01, 3.0).unwrap();
        let b = required_block_size(2, 2, 0.1, 3.0).unwrap();
        assert!(a >= b);
    }

    #[test]
    fn json_masks_are_integers() {
        let (w1, w2) = sources(4, 2, 1, 10);
        let w = Matrix::from_rows(&[vec![0.1, 0.2]]).unwrap();
        let pair = approx_matrix_product(&w, &w1, &w2, 0.5, &FactorizeOptions::default()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&pair.to_json().unwrap()).unwrap();
        assert_eq!(v["M1"][0], serde_json::json!([1, 0]));
    }
}
