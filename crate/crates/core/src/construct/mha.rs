//! Pruning a random source MHA so that it approximates a given target MHA.

use serde::{Deserialize, Serialize, Serializer};

use crate::attention::{max_row_distance, merge_qk, merge_vo, mha_forward, HeadWeights, MhaWeights, SequenceBatch};
use crate::error::{invalid, Result};
use crate::linalg::{max_norm, sample_uniform_matrix, spectral_norm_default, Matrix};
use crate::rng::RngStream;
use crate::subset_sum::{approx_matrix_product, ceil_tight, FactorizeOptions, FactorizedMaskPair};

/// Which dimension sets the query/key sampling bound `dim^{1/4}`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QkBoundRule {
    /// `n_K^{1/4}` of the source.
    #[default]
    SourceHidden,
    /// `d_K^{1/4}` of the target.
    TargetKey,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceMhaConfig {
    pub n_k: usize,
    pub n_v: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub d1: usize,
    pub d2: usize,
    #[serde(default)]
    pub qk_rule: QkBoundRule,
    /// Only read under [`QkBoundRule::TargetKey`].
    #[serde(default = "default_target_d_k")]
    pub target_d_k: usize,
}

fn default_target_d_k() -> usize {
    8
}

impl SourceMhaConfig {
    pub fn new(n_k: usize, n_v: usize, h: usize, d1: usize, d2: usize) -> Result<Self> {
        let cfg = Self { n_k, n_v, h, d1, d2, qk_rule: QkBoundRule::SourceHidden, target_d_k: default_target_d_k() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.h == 0 || self.d1 == 0 || self.d2 == 0 || self.target_d_k == 0 {
            return Err(invalid("H, d1, d2 and d_K must be positive"));
        }
        if self.n_k < self.d1 || self.n_v < self.d1 {
            return Err(invalid(format!(
                "source widths n_K={} n_V={} must be at least d1={}",
                self.n_k, self.n_v, self.d1
            )));
        }
        Ok(())
    }

    /// Half-width of the query/key sampling interval.
    pub fn qk_bound(&self) -> f64 {
        match self.qk_rule {
            QkBoundRule::SourceHidden => (self.n_k as f64).powf(0.25),
            QkBoundRule::TargetKey => (self.target_d_k as f64).powf(0.25),
        }
    }

    pub fn vo_bound(&self) -> f64 {
        1.0
    }

    /// Divisor that folds the `1/sqrt(n_K)` logit scale into the query and key.
    pub fn qk_rescale(&self) -> f64 {
        (self.n_k as f64).powf(0.25)
    }
}

/// Query/key from `U[-b, b]`, value/output from `U[-1, 1]`, one sub-stream per
/// head and matrix.
pub fn sample_source_mha(cfg: &SourceMhaConfig, rng: &RngStream) -> Result<MhaWeights> {
    cfg.validate()?;
    let qk = cfg.qk_bound();
    let heads = (0..cfg.h)
        .map(|j| {
            let hr = rng.derive_index("head", j as u64);
            Ok(HeadWeights {
                w_q: sample_uniform_matrix(cfg.d1, cfg.n_k, qk, &mut hr.derive("W_Q"))?,
                w_k: sample_uniform_matrix(cfg.d1, cfg.n_k, qk, &mut hr.derive("W_K"))?,
                w_v: sample_uniform_matrix(cfg.d1, cfg.n_v, cfg.vo_bound(), &mut hr.derive("W_V"))?,
                w_o: sample_uniform_matrix(cfg.n_v, cfg.d2, cfg.vo_bound(), &mut hr.derive("W_O"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MhaWeights::new(heads)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBudget {
    pub eps: f64,
    pub alpha: f64,
    #[serde(rename = "H")]
    pub h: usize,
    pub d1: usize,
    pub d2: usize,
    pub qk_entry_tol: f64,
    pub vo_entry_tol: f64,
}

impl ErrorBudget {
    pub fn new(eps: f64, h: usize, d1: usize, d2: usize, alpha: f64) -> Result<Self> {
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(invalid(format!("eps must be positive, got {eps}")));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid(format!("alpha must be positive, got {alpha}")));
        }
        let (hf, d1f, d2f) = (h as f64, d1 as f64, d2 as f64);
        Ok(Self {
            eps,
            alpha,
            h,
            d1,
            d2,
            qk_entry_tol: eps / (8.0 * hf * alpha.powi(3) * d1f.powf(1.5)),
            vo_entry_tol: eps / (2.0 * hf * alpha * d1f * d2f.sqrt()),
        })
    }
}

fn check_eps_alpha(eps: f64, d1: usize, d2: usize, alpha: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 1.0) {
        return Err(invalid(format!("eps must lie in (0, 1), got {eps}")));
    }
    let floor = (d1 as f64).sqrt().max((d2 as f64).sqrt());
    if !(alpha >= floor * (1.0 - 1e-12)) || !alpha.is_finite() {
        return Err(invalid(format!("alpha {alpha} must be at least max(sqrt(d1), sqrt(d2)) = {floor}")));
    }
    Ok(())
}

/// Real-valued width bounds before the ceiling.
pub fn required_dims_mha_real(eps: f64, h: usize, d1: usize, d2: usize, alpha: f64, c_hat: f64) -> Result<(f64, f64)> {
    check_eps_alpha(eps, d1, d2, alpha)?;
    if !(c_hat > 0.0 && c_hat.is_finite()) {
        return Err(invalid("C_hat must be positive"));
    }
    let (hf, d1f, d2f) = (h as f64, d1 as f64, d2 as f64);
    let n_k = d1f * c_hat * (8.0 * hf * alpha.powi(3) * d1f.powf(1.5) / eps).ln();
    let n_v = d1f * c_hat * (2.0 * hf * alpha * d1f * d2f.sqrt() / eps).ln();
    Ok((n_k, n_v))
}

/// Smallest `(n_K, n_V)` meeting the width conditions for an `eps`-approximation.
pub fn required_dims_mha(eps: f64, h: usize, d1: usize, d2: usize, alpha: f64, c_hat: f64) -> Result<(usize, usize)> {
    let (a, b) = required_dims_mha_real(eps, h, d1, d2, alpha, c_hat)?;
    Ok((ceil_tight(a).max(d1), ceil_tight(b).max(d1)))
}

fn serialize_mask<S: Serializer>(m: &Matrix, s: S) -> std::result::Result<S::Ok, S::Error> {
    let rows: Vec<Vec<u8>> = (0..m.rows()).map(|i| m.row(i).iter().map(|&v| u8::from(v != 0.0)).collect()).collect();
    rows.serialize(s)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadMasks {
    #[serde(rename = "M_Q", serialize_with = "serialize_mask")]
    pub m_q: Matrix,
    #[serde(rename = "M_K", serialize_with = "serialize_mask")]
    pub m_k: Matrix,
    #[serde(rename = "M_V", serialize_with = "serialize_mask")]
    pub m_v: Matrix,
    #[serde(rename = "M_O", serialize_with = "serialize_mask")]
    pub m_o: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PruningMaskSet {
    pub heads: Vec<HeadMasks>,
}

impl PruningMaskSet {
    pub fn apply(&self, w: &MhaWeights) -> Result<MhaWeights> {
        if self.heads.len() != w.h() {
            return Err(invalid("mask set and weights have different head counts"));
        }
        w.map_matrices(|j, m, mat| {
            let hm = &self.heads[j];
            mat.hadamard([&hm.m_q, &hm.m_k, &hm.m_v, &hm.m_o][m])
        })
    }

    pub fn kept(&self) -> usize {
        self.heads.iter().map(|h| [&h.m_q, &h.m_k, &h.m_v, &h.m_o].iter().map(|m| m.count_nonzero()).sum::<usize>()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadDiagnostics {
    pub qk_max_err: f64,
    pub vo_max_err: f64,
    pub qk_hit: bool,
    pub vo_hit: bool,
    pub qk_entry_errors: Matrix,
    pub vo_entry_errors: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskedMha {
    pub config: SourceMhaConfig,
    pub budget: ErrorBudget,
    pub source: MhaWeights,
    pub masks: PruningMaskSet,
    pub diagnostics: Vec<HeadDiagnostics>,
}

impl MaskedMha {
    pub fn pruned(&self) -> Result<MhaWeights> {
        self.masks.apply(&self.source)
    }

    pub fn all_hit(&self) -> bool {
        self.diagnostics.iter().all(|d| d.qk_hit && d.vo_hit)
    }

    pub fn max_qk_err(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.qk_max_err).fold(0.0, f64::max)
    }

    pub fn max_vo_err(&self) -> f64 {
        self.diagnostics.iter().map(|d| d.vo_max_err).fold(0.0, f64::max)
    }

    /// Per-head `(W'_Q . M_Q)(W'_K . M_K)^T` and `(W_V . M_V)(W_O . M_O)`.
    pub fn effective_merged(&self) -> Result<Vec<(Matrix, Matrix)>> {
        let r = self.config.qk_rescale();
        self.source
            .heads()
            .iter()
            .zip(&self.masks.heads)
            .map(|(hw, hm)| {
                let q = hw.w_q.map(|v| v / r).hadamard(&hm.m_q)?;
                let k = hw.w_k.map(|v| v / r).hadamard(&hm.m_k)?;
                let vo = hw.w_v.hadamard(&hm.m_v)?.matmul(&hw.w_o.hadamard(&hm.m_o)?)?;
                Ok((q.matmul_t(&k)?, vo))
            })
            .collect()
    }

    /// Max-entry stage errors recomputed from masks and weights.
    pub fn recompute_stage_errors(&self, target: &MhaWeights) -> Result<Vec<(f64, f64)>> {
        self.effective_merged()?
            .into_iter()
            .zip(target.heads())
            .map(|((qk, vo), hw)| {
                let t_qk = merge_qk(&hw.w_q, &hw.w_k, target.d_k())?;
                let t_vo = merge_vo(&hw.w_v, &hw.w_o)?;
                Ok((max_norm(&t_qk.sub(&qk)?), max_norm(&t_vo.sub(&vo)?)))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn rejection(target: &MhaWeights) -> Result<Option<String>> {
    for (j, hw) in target.heads().iter().enumerate() {
        for (name, m) in ["W_Q", "W_K", "W_V", "W_O"].iter().zip(hw.matrices()) {
            let s = spectral_norm_default(m)?;
            if s > 1.0 + 1e-10 {
                return Ok(Some(format!("head {j} {name} has spectral norm {s} > 1; project the target first")));
            }
        }
    }
    Ok(None)
}

/// Samples a source with `cfg` and picks masks so that the pruned source
/// approximates `target` within `eps` on inputs bounded by `alpha`.
pub fn construct_slt_mha(
    target: &MhaWeights,
    cfg: &SourceMhaConfig,
    eps: f64,
    alpha: f64,
    rng: &RngStream,
    opts: &FactorizeOptions,
) -> Result<MaskedMha> {
    cfg.validate()?;
    if (cfg.h, cfg.d1, cfg.d2) != (target.h(), target.d1(), target.d2()) {
        return Err(invalid(format!(
            "source config (H={}, d1={}, d2={}) does not match target (H={}, d1={}, d2={})",
            cfg.h,
            cfg.d1,
            cfg.d2,
            target.h(),
            target.d1(),
            target.d2()
        )));
    }
    check_eps_alpha(eps, cfg.d1, cfg.d2, alpha)?;
    if let Some(reason) = rejection(target)? {
        return Err(invalid(reason));
    }
    let budget = ErrorBudget::new(eps, cfg.h, cfg.d1, cfg.d2, alpha)?;
    let source = sample_source_mha(cfg, rng)?;
    let r = cfg.qk_rescale();

    let mut masks = Vec::with_capacity(cfg.h);
    let mut diagnostics = Vec::with_capacity(cfg.h);
    for (hw, sw) in target.heads().iter().zip(source.heads()) {
        let w_qk = merge_qk(&hw.w_q, &hw.w_k, target.d_k())?;
        let w_vo = merge_vo(&hw.w_v, &hw.w_o)?;
        // Spectral norm <= 1/sqrt(d_K) and <= 1 bound every entry by 1.
        debug_assert!(max_norm(&w_qk) <= 1.0 + 1e-9 && max_norm(&w_vo) <= 1.0 + 1e-9);

        let q = sw.w_q.map(|v| v / r);
        let k = sw.w_k.map(|v| v / r);
        let qk: FactorizedMaskPair = approx_matrix_product(&w_qk, &k.transpose(), &q, budget.qk_entry_tol, opts)?;
        let vo = approx_matrix_product(
            &w_vo.transpose(),
            &sw.w_v.transpose(),
            &sw.w_o.transpose(),
            budget.vo_entry_tol,
            opts,
        )?;
        masks.push(HeadMasks { m_q: qk.m2.clone(), m_k: qk.m1.transpose(), m_v: vo.m1.transpose(), m_o: vo.m2.transpose() });
        diagnostics.push(HeadDiagnostics {
            qk_max_err: qk.achieved_max_err,
            vo_max_err: vo.achieved_max_err,
            qk_hit: qk.all_hit(),
            vo_hit: vo.all_hit(),
            qk_entry_errors: qk.per_entry_errors,
            vo_entry_errors: vo.per_entry_errors.transpose(),
        });
    }
    Ok(MaskedMha { config: cfg.clone(), budget, source, masks: PruningMaskSet { heads: masks }, diagnostics })
}

/// Max over batches and rows of `|attn_source(x_i) - attn_target(x_i)|`.
pub fn measure_mha_error(target: &MhaWeights, masked: &MaskedMha, batches: &[SequenceBatch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(invalid("no batches to measure on"));
    }
    let pruned = masked.pruned()?;
    batches.iter().try_fold(0.0_f64, |acc, b| {
        Ok(acc.max(max_row_distance(&mha_forward(b, target)?, &mha_forward(b, &pruned)?)?))
    })
}

/// Largest deviation between target and pruned-source attention logits.
pub fn max_logit_perturbation(target: &MhaWeights, masked: &MaskedMha, batch: &SequenceBatch) -> Result<f64> {
    let x = &batch.x;
    let mut worst: f64 = 0.0;
    for ((qk, _), hw) in masked.effective_merged()?.iter().zip(target.heads()) {
        let t = x.matmul(&merge_qk(&hw.w_q, &hw.w_k, target.d_k())?)?.matmul_t(x)?;
        let s = x.matmul(qk)?.matmul_t(x)?;
        worst = worst.max(max_norm(&t.sub(&s)?));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMaskSet;

    fn small_target(seed: u64) -> MhaWeights {
        let mut rng = RngStream::new(seed);
        let head = HeadWeights {
            w_q: sample_uniform_matrix(2, 8, 0.3, &mut rng).unwrap(),
            w_k: sample_uniform_matrix(2, 8, 0.3, &mut rng).unwrap(),
            w_v: sample_uniform_matrix(2, 8, 0.3, &mut rng).unwrap(),
            w_o: sample_uniform_matrix(8, 1, 0.3, &mut rng).unwrap(),
        };
        MhaWeights::new(vec![head]).unwrap()
    }

    fn circle_batch(t: usize, phase: f64) -> SequenceBatch {
        let x = Matrix::from_fn(t, 2, |i, j| {
            let a = phase + i as f64 * 0.7;
            if j == 0 {
                a.cos()
            } else {
                a.sin()
            }
        });
        SequenceBatch::theory_compliant(x, AttentionMaskSet::full(t), 1).unwrap()
    }

    #[test]
    fn qk_bound_examples() {
        assert_eq!(SourceMhaConfig::new(16, 16, 1, 2, 1).unwrap().qk_bound(), 2.0);
        let b = SourceMhaConfig::new(64, 64, 1, 2, 1).unwrap().qk_bound();
        assert!((b - 2.828).abs() < 1e-3);
    }

    #[test]
    fn sampling_ranges_and_determinism() {
        let cfg = SourceMhaConfig::new(64, 32, 2, 2, 1).unwrap();
        let a = sample_source_mha(&cfg, &RngStream::new(3)).unwrap();
        let b = sample_source_mha(&cfg, &RngStream::new(3)).unwrap();
        assert_eq!(a, b);
        for hw in a.heads() {
            assert!(max_norm(&hw.w_q) <= cfg.qk_bound() && max_norm(&hw.w_q) > 1.0);
            assert!(max_norm(&hw.w_v) <= 1.0);
        }
    }

    #[test]
    fn budget_formulas() {
        let b = ErrorBudget::new(0.5, 2, 2, 1, 2.0).unwrap();
        assert!((b.qk_entry_tol - 0.5 / (8.0 * 2.0 * 8.0 * 2f64.powf(1.5))).abs() < 1e-18);
        assert!((b.vo_entry_tol - 0.5 / (2.0 * 2.0 * 2.0 * 2.0)).abs() < 1e-18);
    }

    #[test]
    fn dims_formula_and_head_doubling() {
        let alpha = 2f64.sqrt();
        let (a1, b1) = required_dims_mha_real(0.1, 1, 2, 1, alpha, 1.5).unwrap();
        let (a2, b2) = required_dims_mha_real(0.1, 2, 2, 1, alpha, 1.5).unwrap();
        let step = 2.0 * 1.5 * 2f64.ln();
        assert!((a2 - a1 - step).abs() < 1e-12 && (b2 - b1 - step).abs() < 1e-12);
        assert!(a1 >= b1);
        assert!(required_dims_mha(0.1, 1, 2, 1, 1.0, 1.5).is_err());
        assert!(required_dims_mha(1.0, 1, 2, 1, alpha, 1.5).is_err());
    }

    #[test]
    fn zero_target_zero_error() {
        let target = MhaWeights::zeros(1, 2, 1, 8, 8);
        let cfg = SourceMhaConfig::new(16, 16, 1, 2, 1).unwrap();
        let m = construct_slt_mha(&target, &cfg, 0.5, 2f64.sqrt(), &RngStream::new(1), &FactorizeOptions::default())
            .unwrap();
        assert!(m.all_hit());
        let err = measure_mha_error(&target, &m, &[circle_batch(4, 0.1)]).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn diagnostics_match_recomputation() {
        let target = small_target(2);
        let cfg = SourceMhaConfig::new(48, 40, 1, 2, 1).unwrap();
        let m = construct_slt_mha(&target, &cfg, 0.5, 2f64.sqrt(), &RngStream::new(4), &FactorizeOptions::optimal())
            .unwrap();
        let re = m.recompute_stage_errors(&target).unwrap();
        assert_eq!(re[0], (m.diagnostics[0].qk_max_err, m.diagnostics[0].vo_max_err));
        let batch = circle_batch(6, 0.3);
        let logit = max_logit_perturbation(&target, &m, &batch).unwrap();
        assert!(logit <= crate::construct::logit_perturbation_bound(m.max_qk_err(), 2, batch.alpha) * (1.0 + 1e-9) + 1e-15);
        if m.all_hit() {
            assert!(measure_mha_error(&target, &m, &[batch]).unwrap() <= 0.5);
        }
    }

    #[test]
    fn rejects_noncompliant_target() {
        let mut target = small_target(3);
        target.for_each_matrix_mut(|_, m, mat| {
            if m == 0 {
                *mat = mat.scale(100.0);
            }
        });
        let cfg = SourceMhaConfig::new(16, 16, 1, 2, 1).unwrap();
        let r = construct_slt_mha(&target, &cfg, 0.5, 2f64.sqrt(), &RngStream::new(1), &FactorizeOptions::default());
        assert!(r.is_err());
    }

    #[test]
    fn measure_rejects_empty_batches() {
        let target = MhaWeights::zeros(1, 2, 1, 8, 8);
        let cfg = SourceMhaConfig::new(16, 16, 1, 2, 1).unwrap();
        let m = construct_slt_mha(&target, &cfg, 0.5, 2f64.sqrt(), &RngStream::new(1), &FactorizeOptions::default())
            .unwrap();
        assert!(measure_mha_error(&target, &m, &[]).is_err());
    }
}
