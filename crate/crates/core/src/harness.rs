//! Experiment drivers: hidden-dimension, sequence-length and block-count
//! sweeps, C_hat calibration, exponential fits, CSV records and manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionMaskSet, BlockWeights, FeedForward, HeadWeights, MhaWeights, SequenceBatch};
use crate::construct::{
    construct_slt_mha, construct_slt_transformer, logit_perturbation_bound, max_logit_perturbation, measure_mha_error,
    measure_transformer, QkBoundRule, SourceMhaConfig,
};
use crate::error::{invalid, Result, SltError};
use crate::linalg::{sample_uniform_matrix, spectral_norm_default, Matrix};
use crate::rng::RngStream;
use crate::subset_sum::{approx_matrix_product, required_block_size, FactorizeOptions, DEFAULT_C_HAT};
use crate::train::{
    dataset_loss, gen_dataset, project_to_unit_spectral, train_target, AngularSample, Regressor, ScaleReport,
    TrainConfig, DEFAULT_T_CHOICES,
};

pub const VERSION: &str = env!("SLT_FORGE_VERSION");

/// One CSV row: one trial at one sweep point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub experiment: String,
    pub seed: u64,
    pub param: String,
    pub value: f64,
    pub measured: f64,
    pub extra: BTreeMap<String, f64>,
}

/// Header is `experiment,seed,param,value,measured` followed by the extra keys
/// of the first record in key order; every record must carry the same keys.
pub fn write_records_csv(path: &Path, records: &[ExperimentRecord]) -> Result<()> {
    let keys: Vec<String> = records.first().map(|r| r.extra.keys().cloned().collect()).unwrap_or_default();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["experiment".to_string(), "seed".into(), "param".into(), "value".into(), "measured".into()];
    header.extend(keys.iter().cloned());
    w.write_record(&header)?;
    for r in records {
        if r.extra.len() != keys.len() || !keys.iter().all(|k| r.extra.contains_key(k)) {
            return Err(invalid("records of one experiment must share extra columns"));
        }
        let mut row = vec![r.experiment.clone(), r.seed.to_string(), r.param.clone(), r.value.to_string(), r.measured.to_string()];
        row.extend(keys.iter().map(|k| r.extra[k].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `epsilon = gamma exp(-delta n)`, fitted by least squares on `ln epsilon`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpFit {
    pub gamma: f64,
    pub delta: f64,
    /// Coefficient of determination on the log scale.
    pub r2: f64,
    /// The same line scored against every positive trial instead of the means.
    pub trial_r2: f64,
    pub points: usize,
}

impl ExpFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.gamma * (-self.delta * n).exp()
    }
}

fn log_points(points: &[(f64, f64)]) -> Result<Vec<(f64, f64)>> {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(_, e)| *e > 0.0 && e.is_finite()).map(|&(n, e)| (n, e.ln())).collect();
    let mut xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    if xs.len() < 2 {
        return Err(SltError::FitUnavailable(format!("{} distinct positive-error sweep values, need 2", xs.len())));
    }
    Ok(pts)
}

fn r_squared(pts: &[(f64, f64)], ln_gamma: f64, delta: f64) -> f64 {
    let mean = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let ss_tot: f64 = pts.iter().map(|p| (p.1 - mean).powi(2)).sum();
    let ss_res: f64 = pts.iter().map(|p| (p.1 - (ln_gamma - delta * p.0)).powi(2)).sum();
    if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    }
}

/// Fit over all `(n, error)` pairs with `error > 0`.
pub fn fit_exp(points: &[(f64, f64)]) -> Result<ExpFit> {
    let pts = log_points(points)?;
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let ln_gamma = my - slope * mx;
    let delta = -slope;
    let r2 = r_squared(&pts, ln_gamma, delta);
    Ok(ExpFit { gamma: ln_gamma.exp(), delta, r2, trial_r2: r2, points: pts.len() })
}

/// Fit of `gamma` alone with `delta` held fixed.
pub fn fit_exp_fixed_delta(points: &[(f64, f64)], delta: f64) -> Result<ExpFit> {
    if !delta.is_finite() {
        return Err(invalid("fixed delta must be finite"));
    }
    let pts = log_points(points)?;
    let ln_gamma = pts.iter().map(|p| p.1 + delta * p.0).sum::<f64>() / pts.len() as f64;
    let r2 = r_squared(&pts, ln_gamma, delta);
    Ok(ExpFit { gamma: ln_gamma.exp(), delta, r2, trial_r2: r2, points: pts.len() })
}

/// Per sweep value, the mean over trials with positive error, in first-seen order.
pub fn mean_curve(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64, usize)> = Vec::new();
    for &(n, e) in points.iter().filter(|(_, e)| *e > 0.0 && e.is_finite()) {
        match out.iter_mut().find(|p| p.0 == n) {
            Some(p) => {
                p.1 += e;
                p.2 += 1;
            }
            None => out.push((n, e, 1)),
        }
    }
    out.into_iter().map(|(n, s, c)| (n, s / c as f64)).collect()
}

fn with_trial_r2(mut fit: ExpFit, points: &[(f64, f64)]) -> Result<ExpFit> {
    fit.trial_r2 = r_squared(&log_points(points)?, fit.gamma.ln(), fit.delta);
    Ok(fit)
}

/// Fit to the curve of per-value mean errors.
pub fn fit_mean_curve(points: &[(f64, f64)]) -> Result<ExpFit> {
    with_trial_r2(fit_exp(&mean_curve(points))?, points)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|&(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return Err(SltError::FitUnavailable("need two positive points".into()));
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(SltError::FitUnavailable("all x values equal".into()));
    }
    Ok(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn trial_seeds(seed: u64, trials: usize) -> Vec<u64> {
    (0..trials as u64).map(|t| seed.wrapping_add(t)).collect()
}

/// Trained angular-velocity regressor, projected to unit spectral norms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainedTargetConfig {
    pub train: TrainConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub t_choices: Vec<usize>,
}

impl Default for TrainedTargetConfig {
    fn default() -> Self {
        TrainedTargetConfig {
            train: TrainConfig::default(),
            n_train: crate::train::DEFAULT_SAMPLES,
            n_val: crate::train::DEFAULT_SAMPLES,
            t_choices: DEFAULT_T_CHOICES.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TargetReport {
    pub val_loss_before_projection: f64,
    pub val_loss_after_projection: f64,
    pub scales: ScaleReport,
    pub reg_token: Vec<f64>,
    pub initial_train_loss: f64,
    pub final_train_loss: f64,
}

pub struct MhaTarget {
    pub weights: MhaWeights,
    pub reg_token: Vec<f64>,
    pub report: TargetReport,
}

pub fn build_trained_target(cfg: &TrainedTargetConfig, rng: &RngStream) -> Result<MhaTarget> {
    let train = gen_dataset(cfg.n_train, &cfg.t_choices, &mut rng.derive("train"))?;
    let val = gen_dataset(cfg.n_val, &cfg.t_choices, &mut rng.derive("val"))?;
    let trained = train_target(&train, &val, &cfg.train, &rng.derive("fit"))?;
    let (projected, scales) = project_to_unit_spectral(&trained.regressor.mha)?;
    let reg_token = trained.regressor.reg_token.clone();
    let after = Regressor::new(projected.clone(), reg_token.clone())?;
    let first = trained.curve.first().expect("curve has epoch 0");
    let last = trained.curve.last().expect("curve has epoch 0");
    Ok(MhaTarget {
        report: TargetReport {
            val_loss_before_projection: last.val_loss,
            val_loss_after_projection: dataset_loss(&val, &after)?,
            scales,
            reg_token: reg_token.clone(),
            initial_train_loss: first.train_loss,
            final_train_loss: last.train_loss,
        },
        weights: projected,
        reg_token,
    })
}

/// Angular samples with the regression token in row 0, full attention.
pub fn angular_batches(samples: &[AngularSample], reg_token: &[f64], d2: usize) -> Result<Vec<SequenceBatch>> {
    samples
        .iter()
        .map(|s| {
            let mut x = s.tokens.clone();
            x.set(0, 0, reg_token[0]);
            x.set(0, 1, reg_token[1]);
            SequenceBatch::theory_compliant(x, AttentionMaskSet::full(s.t + 1), d2)
        })
        .collect()
}

fn batch_alpha(batches: &[SequenceBatch]) -> f64 {
    batches.iter().map(|b| b.alpha).fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimSweepConfig {
    pub dims: Vec<usize>,
    pub eps: f64,
    pub target: TrainedTargetConfig,
    pub n_eval: usize,
    pub eval_t_choices: Vec<usize>,
    pub search: FactorizeOptions,
    pub qk_rule: QkBoundRule,
}

impl Default for DimSweepConfig {
    fn default() -> Self {
        DimSweepConfig {
            dims: (16..=128).step_by(8).collect(),
            eps: 0.5,
            target: TrainedTargetConfig::default(),
            n_eval: 64,
            eval_t_choices: vec![4, 8, 16],
            search: FactorizeOptions::optimal(),
            qk_rule: QkBoundRule::SourceHidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimSummaryRow {
    pub n: usize,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
    pub positive: usize,
    pub fit_gamma: f64,
    pub fit_delta: f64,
    pub fit_r2: f64,
    pub fit_pred: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetAudit {
    /// Trials in which every stage solve met its entry tolerance.
    pub hit_trials: usize,
    /// Hit trials whose measured error still exceeded eps.
    pub violations: usize,
    /// Hit trials whose logit deviation exceeded `alpha^2 d1 qk_tol`.
    pub logit_violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DimSweep {
    pub records: Vec<ExperimentRecord>,
    pub summary: Vec<DimSummaryRow>,
    pub fit: Option<ExpFit>,
    pub audit: BudgetAudit,
    pub target: TargetReport,
}

fn mha_trial(
    target: &MhaWeights,
    n: usize,
    eps: f64,
    batches: &[SequenceBatch],
    qk_rule: QkBoundRule,
    rng: &RngStream,
    opts: &FactorizeOptions,
) -> Result<BTreeMap<String, f64>> {
    let mut cfg = SourceMhaConfig::new(n, n, target.h(), target.d1(), target.d2())?;
    cfg.qk_rule = qk_rule;
    cfg.target_d_k = target.d_k();
    let alpha = batch_alpha(batches);
    let masked = construct_slt_mha(target, &cfg, eps, alpha, rng, opts)?;
    let err = measure_mha_error(target, &masked, batches)?;
    let logit = batches.iter().try_fold(0.0_f64, |a, b| Ok::<_, SltError>(a.max(max_logit_perturbation(target, &masked, b)?)))?;
    let hit = masked.all_hit();
    let logit_bound = logit_perturbation_bound(masked.budget.qk_entry_tol, target.d1(), alpha);
    Ok(BTreeMap::from([
        ("measured".to_string(), err),
        ("hit".to_string(), f64::from(u8::from(hit))),
        ("qk_max_err".to_string(), masked.max_qk_err()),
        ("vo_max_err".to_string(), masked.max_vo_err()),
        ("logit_pert".to_string(), logit),
        ("logit_bound".to_string(), logit_bound),
        ("budget_ok".to_string(), f64::from(u8::from(!hit || err <= eps))),
    ]))
}

fn split_measured(experiment: &str, seed: u64, param: &str, value: f64, mut extra: BTreeMap<String, f64>) -> ExperimentRecord {
    let measured = extra.remove("measured").expect("trial reports measured");
    ExperimentRecord { experiment: experiment.into(), seed, param: param.into(), value, measured, extra }
}

fn audit_of(records: &[ExperimentRecord]) -> BudgetAudit {
    let mut a = BudgetAudit::default();
    for r in records {
        if r.extra.get("hit") == Some(&1.0) {
            a.hit_trials += 1;
            if r.extra.get("budget_ok") != Some(&1.0) {
                a.violations += 1;
            }
            if let (Some(p), Some(b)) = (r.extra.get("logit_pert"), r.extra.get("logit_bound")) {
                if *p > b * (1.0 + 1e-9) + 1e-12 {
                    a.logit_violations += 1;
                }
            }
        }
    }
    a
}

/// Source hidden width sweep against one trained target; the fit is to the
/// mean error over trials with positive error.
pub fn sweep_hidden_dim(cfg: &DimSweepConfig, seed: u64, trials: usize) -> Result<DimSweep> {
    if trials == 0 || cfg.dims.is_empty() {
        return Err(invalid("need at least one trial and one dimension"));
    }
    let root = RngStream::new(seed);
    let target = build_trained_target(&cfg.target, &root.derive("target"))?;
    let eval = gen_dataset(cfg.n_eval, &cfg.eval_t_choices, &mut root.derive("eval"))?;
    let batches = angular_batches(&eval, &target.reg_token, target.weights.d2())?;
    let seeds = trial_seeds(seed, trials);
    let jobs: Vec<(usize, u64)> = cfg.dims.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    let results = jobs
        .par_iter()
        .map(|&(n, s)| {
            let rng = RngStream::new(s).derive_index("source", n as u64);
            mha_trial(&target.weights, n, cfg.eps, &batches, cfg.qk_rule, &rng, &cfg.search)
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<ExperimentRecord> = jobs
        .iter()
        .zip(results)
        .map(|(&(n, s), extra)| split_measured("sweep-dim", s, "n", n as f64, extra))
        .collect();
    let points: Vec<(f64, f64)> = records.iter().map(|r| (r.value, r.measured)).collect();
    let fit = if cfg.dims.len() >= 2 { fit_mean_curve(&points).ok() } else { None };
    let summary = cfg
        .dims
        .iter()
        .map(|&n| {
            let vals: Vec<f64> = records.iter().filter(|r| r.value == n as f64).map(|r| r.measured).collect();
            let (mean, std) = mean_std(&vals);
            let (g, d, r2, pred) = fit.map_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN), |f| (f.gamma, f.delta, f.r2, f.predict(n as f64)));
            DimSummaryRow {
                n,
                trials: vals.len(),
                mean,
                std,
                positive: vals.iter().filter(|v| **v > 0.0).count(),
                fit_gamma: g,
                fit_delta: d,
                fit_r2: r2,
                fit_pred: pred,
            }
        })
        .collect();
    let audit = audit_of(&records);
    Ok(DimSweep { records, summary, fit, audit, target: target.report })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqSweepConfig {
    pub t_values: Vec<usize>,
    pub dims: Vec<usize>,
    pub eps: f64,
    pub target: TrainedTargetConfig,
    pub n_eval: usize,
    pub search: FactorizeOptions,
}

impl Default for SeqSweepConfig {
    fn default() -> Self {
        SeqSweepConfig {
            t_values: DEFAULT_T_CHOICES.to_vec(),
            dims: vec![32, 48],
            eps: 0.5,
            target: TrainedTargetConfig::default(),
            n_eval: 4,
            search: FactorizeOptions::optimal(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeqSummaryRow {
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeqSweep {
    pub records: Vec<ExperimentRecord>,
    pub summary: Vec<SeqSummaryRow>,
    /// Slope of log mean error against log T, per dim.
    pub slopes: Vec<(usize, f64)>,
    pub target: TargetReport,
}

/// Each trial builds one SLT per dim and evaluates it at every T.
pub fn sweep_seq_len(cfg: &SeqSweepConfig, seed: u64, trials: usize) -> Result<SeqSweep> {
    if trials == 0 || cfg.dims.is_empty() || cfg.t_values.is_empty() || cfg.t_values.contains(&0) {
        return Err(invalid("need trials, dims and positive sequence lengths"));
    }
    let root = RngStream::new(seed);
    let target = build_trained_target(&cfg.target, &root.derive("target"))?;
    let eval: Vec<Vec<SequenceBatch>> = cfg
        .t_values
        .iter()
        .map(|&t| {
            let data = gen_dataset(cfg.n_eval, &[t], &mut root.derive_index("eval", t as u64))?;
            angular_batches(&data, &target.reg_token, target.weights.d2())
        })
        .collect::<Result<_>>()?;
    let alpha = eval.iter().map(|b| batch_alpha(b)).fold(0.0, f64::max);
    let seeds = trial_seeds(seed, trials);
    let jobs: Vec<(usize, u64)> = cfg.dims.iter().flat_map(|&n| seeds.iter().map(move |&s| (n, s))).collect();
    let per_job = jobs
        .par_iter()
        .map(|&(n, s)| {
            let w = &target.weights;
            let src = SourceMhaConfig::new(n, n, w.h(), w.d1(), w.d2())?;
            let rng = RngStream::new(s).derive_index("source", n as u64);
            let masked = construct_slt_mha(w, &src, cfg.eps, alpha, &rng, &cfg.search)?;
            eval.iter().map(|b| measure_mha_error(w, &masked, b)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    for (&t_idx, &t) in (0..cfg.t_values.len()).collect::<Vec<_>>().iter().zip(&cfg.t_values) {
        for (&(n, s), errs) in jobs.iter().zip(&per_job) {
            records.push(ExperimentRecord {
                experiment: "sweep-seq".into(),
                seed: s,
                param: "T".into(),
                value: t as f64,
                measured: errs[t_idx],
                extra: BTreeMap::from([("n".to_string(), n as f64)]),
            });
        }
    }
    records.sort_by(|a, b| a.extra["n"].total_cmp(&b.extra["n"]).then(a.value.total_cmp(&b.value)).then(a.seed.cmp(&b.seed)));
    let mut summary = Vec::new();
    let mut slopes = Vec::new();
    for &n in &cfg.dims {
        let mut pts = Vec::new();
        for &t in &cfg.t_values {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.extra["n"] == n as f64 && r.value == t as f64)
                .map(|r| r.measured)
                .collect();
            let (mean, std) = mean_std(&vals);
            pts.push((t as f64, mean));
            summary.push(SeqSummaryRow { n, t, trials: vals.len(), mean, std });
        }
        slopes.push((n, log_log_slope(&pts).unwrap_or(f64::NAN)));
    }
    Ok(SeqSweep { records, summary, slopes, target: target.report })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockSweepConfig {
    pub b_values: Vec<usize>,
    pub dims: Vec<usize>,
    pub eps: f64,
    #[serde(rename = "H")]
    pub h: usize,
    pub d1: usize,
    #[serde(rename = "d_K")]
    pub d_k: usize,
    #[serde(rename = "d_V")]
    pub d_v: usize,
    pub n_eval: usize,
    pub eval_t: usize,
    pub c_hat: f64,
    pub search: FactorizeOptions,
}

impl Default for BlockSweepConfig {
    fn default() -> Self {
        BlockSweepConfig {
            b_values: vec![1, 2, 3],
            dims: (16..=64).step_by(8).collect(),
            eps: 1.0,
            h: 1,
            d1: 2,
            d_k: 8,
            d_v: 8,
            n_eval: 16,
            eval_t: 8,
            c_hat: DEFAULT_C_HAT,
            search: FactorizeOptions::optimal(),
        }
    }
}

/// Entries from `U[-1, 1]`, divided by the spectral norm when it exceeds one.
pub fn random_unit_matrix(rows: usize, cols: usize, rng: &mut RngStream) -> Result<Matrix> {
    let m = sample_uniform_matrix(rows, cols, 1.0, rng)?;
    let s = spectral_norm_default(&m)?;
    Ok(if s > 1.0 { m.scale(1.0 / s) } else { m })
}

/// Untrained block with unit-spectral-norm projections and a linear feed-forward.
pub fn random_block(h: usize, d1: usize, d_k: usize, d_v: usize, rng: &RngStream) -> Result<BlockWeights> {
    let heads = (0..h)
        .map(|j| {
            let r = rng.derive_index("head", j as u64);
            Ok(HeadWeights {
                w_q: random_unit_matrix(d1, d_k, &mut r.derive("W_Q"))?,
                w_k: random_unit_matrix(d1, d_k, &mut r.derive("W_K"))?,
                w_v: random_unit_matrix(d1, d_v, &mut r.derive("W_V"))?,
                w_o: random_unit_matrix(d_v, d1, &mut r.derive("W_O"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    BlockWeights::new(MhaWeights::new(heads)?, FeedForward::Linear { fc: random_unit_matrix(d1, d1, &mut rng.derive("FC"))? })
}

/// Unit-circle tokens (padded with zeros beyond two features).
pub fn circle_batches(n: usize, t: usize, d1: usize, rng: &mut RngStream) -> Result<Vec<SequenceBatch>> {
    (0..n)
        .map(|_| {
            let omega = rng.uniform(-std::f64::consts::PI, std::f64::consts::PI);
            let theta0 = rng.uniform(0.0, std::f64::consts::PI);
            let x = Matrix::from_fn(t, d1, |i, j| {
                let phase = omega * (i + 1) as f64 + theta0;
                match j {
                    0 => phase.cos(),
                    1 => phase.sin(),
                    _ => 0.0,
                }
            });
            SequenceBatch::theory_compliant(x, AttentionMaskSet::full(t), d1)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummaryRow {
    #[serde(rename = "B")]
    pub blocks: usize,
    pub n: usize,
    pub trials: usize,
    pub mean: f64,
    pub std: f64,
    pub fit_gamma: f64,
    pub fit_delta: f64,
    pub fit_r2: f64,
    pub fit_pred: f64,
    pub log_resid: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockSweep {
    pub records: Vec<ExperimentRecord>,
    pub summary: Vec<BlockSummaryRow>,
    /// `(B, fit)`; the first entry fixes delta for the others.
    pub fits: Vec<(usize, ExpFit)>,
    /// Trials where every stage hit but some block exceeded its deviation budget.
    pub schedule_violations: usize,
    pub hit_trials: usize,
}

/// Mean-curve fits; `delta` comes from the first curve, the others fit only `gamma`.
pub fn fit_shared_delta(curves: &[(usize, Vec<(f64, f64)>)]) -> Result<Vec<(usize, ExpFit)>> {
    let (b0, first) = curves.first().ok_or_else(|| invalid("no curves"))?;
    let base = fit_mean_curve(first)?;
    let mut out = vec![(*b0, base)];
    for (b, pts) in &curves[1..] {
        out.push((*b, with_trial_r2(fit_exp_fixed_delta(&mean_curve(pts), base.delta)?, pts)?));
    }
    Ok(out)
}

pub fn sweep_blocks(cfg: &BlockSweepConfig, seed: u64, trials: usize) -> Result<BlockSweep> {
    if trials == 0 || cfg.dims.is_empty() || cfg.b_values.is_empty() || cfg.b_values.contains(&0) {
        return Err(invalid("need trials, dims and positive block counts"));
    }
    let root = RngStream::new(seed);
    let max_b = *cfg.b_values.iter().max().expect("nonempty");
    let targets: Vec<BlockWeights> = (0..max_b)
        .map(|b| random_block(cfg.h, cfg.d1, cfg.d_k, cfg.d_v, &root.derive_index("target_block", b as u64)))
        .collect::<Result<_>>()?;
    let batches = circle_batches(cfg.n_eval, cfg.eval_t, cfg.d1, &mut root.derive("eval"))?;
    let alpha = batch_alpha(&batches);
    let seeds = trial_seeds(seed, trials);
    let mut jobs = Vec::new();
    for &b in &cfg.b_values {
        for &n in &cfg.dims {
            for &s in &seeds {
                jobs.push((b, n, s));
            }
        }
    }
    let results = jobs
        .par_iter()
        .map(|&(b, n, s)| {
            let rng = RngStream::new(s).derive_index("blocks", b as u64).derive_index("n", n as u64);
            let t = &targets[..b];
            let masked = construct_slt_transformer(t, cfg.eps, alpha, cfg.c_hat, Some((n, n)), &rng, &cfg.search)?;
            let meas = measure_transformer(t, &masked.pruned()?, &batches)?;
            let hit = masked.all_hit();
            let within = meas.deviations.iter().zip(&masked.budgets).all(|(d, bb)| *d <= bb.deviation_budget);
            Ok(BTreeMap::from([
                ("measured".to_string(), meas.final_err),
                ("n".to_string(), n as f64),
                ("hit".to_string(), f64::from(u8::from(hit))),
                ("schedule_ok".to_string(), f64::from(u8::from(!hit || within))),
            ]))
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<ExperimentRecord> = jobs
        .iter()
        .zip(results)
        .map(|(&(b, _, s), extra)| split_measured("sweep-blocks", s, "B", b as f64, extra))
        .collect();
    let curves: Vec<(usize, Vec<(f64, f64)>)> = cfg
        .b_values
        .iter()
        .map(|&b| (b, records.iter().filter(|r| r.value == b as f64).map(|r| (r.extra["n"], r.measured)).collect()))
        .collect();
    let fits = if cfg.dims.len() >= 2 { fit_shared_delta(&curves).unwrap_or_default() } else { Vec::new() };
    let mut summary = Vec::new();
    for &b in &cfg.b_values {
        let fit = fits.iter().find(|(fb, _)| *fb == b).map(|p| p.1);
        for &n in &cfg.dims {
            let vals: Vec<f64> = records
                .iter()
                .filter(|r| r.value == b as f64 && r.extra["n"] == n as f64)
                .map(|r| r.measured)
                .collect();
            let (mean, std) = mean_std(&vals);
            let (g, d, r2, pred) = fit.map_or((f64::NAN, f64::NAN, f64::NAN, f64::NAN), |f| (f.gamma, f.delta, f.r2, f.predict(n as f64)));
            summary.push(BlockSummaryRow {
                blocks: b,
                n,
                trials: vals.len(),
                mean,
                std,
                fit_gamma: g,
                fit_delta: d,
                fit_r2: r2,
                fit_pred: pred,
                log_resid: mean.ln() - pred.ln(),
            });
        }
    }
    let hit_trials = records.iter().filter(|r| r.extra["hit"] == 1.0).count();
    let schedule_violations = records.iter().filter(|r| r.extra["schedule_ok"] != 1.0).count();
    Ok(BlockSweep { records, summary, fits, schedule_violations, hit_trials })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub eps: f64,
    pub d1: usize,
    pub d2: usize,
    pub seeds: usize,
    pub success_rate: f64,
    pub max_block: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig { eps: 0.1, d1: 2, d2: 2, seeds: 200, success_rate: 0.9, max_block: 64 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRow {
    pub block_size: usize,
    pub seeds: usize,
    pub successes: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub rows: Vec<CalibrationRow>,
    pub block_size: usize,
    /// `block_size / ln(d1 d2 / eps)`.
    pub c_hat: f64,
}

/// Whether a random `d2 x d1` target is matched entrywise within
/// `eps / (d1 d2)` using `block` units per input coordinate.
pub fn lemma_trial(d1: usize, d2: usize, eps: f64, block: usize, rng: &RngStream) -> Result<bool> {
    let n = block * d1;
    let w = sample_uniform_matrix(d2, d1, 1.0, &mut rng.derive("W"))?;
    let w1 = sample_uniform_matrix(n, d1, 1.0, &mut rng.derive("W1"))?;
    let w2 = sample_uniform_matrix(d2, n, 1.0, &mut rng.derive("W2"))?;
    let pair = approx_matrix_product(&w, &w1, &w2, eps / (d1 * d2) as f64, &FactorizeOptions::default())?;
    Ok(pair.all_hit())
}

/// Smallest block size reaching `success_rate` over `seeds` seeds, then
/// `C_hat = block / ln(d1 d2 / eps)` so that `required_block_size` returns it.
pub fn calibrate_c(cfg: &CalibrationConfig, seed: u64) -> Result<Calibration> {
    if !(cfg.eps > 0.0 && cfg.eps < 1.0) || cfg.seeds == 0 || cfg.d1 == 0 || cfg.d2 == 0 {
        return Err(invalid("calibration needs eps in (0, 1), seeds and dims positive"));
    }
    let seeds = trial_seeds(seed, cfg.seeds);
    let mut rows = Vec::new();
    for block in 1..=cfg.max_block {
        let hits = seeds
            .par_iter()
            .map(|&s| lemma_trial(cfg.d1, cfg.d2, cfg.eps, block, &RngStream::new(s).derive("calibrate")))
            .collect::<Result<Vec<bool>>>()?;
        let successes = hits.iter().filter(|h| **h).count();
        let rate = successes as f64 / cfg.seeds as f64;
        rows.push(CalibrationRow { block_size: block, seeds: cfg.seeds, successes, rate });
        if rate >= cfg.success_rate {
            let c_hat = block as f64 / ((cfg.d1 * cfg.d2) as f64 / cfg.eps).ln();
            debug_assert_eq!(required_block_size(cfg.d1, cfg.d2, cfg.eps, c_hat)?, block);
            return Ok(Calibration { rows, block_size: block, c_hat });
        }
    }
    Err(invalid(format!("no block size up to {} reached success rate {}", cfg.max_block, cfg.success_rate)))
}

/// Manifest written beside every CSV: enough to rerun the experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    pub version: String,
    pub seed: u64,
    pub trials: usize,
    pub trial_seeds: Vec<u64>,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    pub results: serde_json::Value,
    pub notes: Vec<String>,
}

impl Manifest {
    pub fn new<C: Serialize>(experiment: &str, seed: u64, trials: usize, config: &C) -> Result<Self> {
        Ok(Manifest {
            experiment: experiment.into(),
            version: VERSION.into(),
            seed,
            trials,
            trial_seeds: trial_seeds(seed, trials),
            config: serde_json::to_value(config)?,
            outputs: Vec::new(),
            results: serde_json::Value::Null,
            notes: Vec::new(),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("{}.manifest.json", self.experiment));
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}
