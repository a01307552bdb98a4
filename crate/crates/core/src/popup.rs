//! Edge-popup: frozen random weights, learned scores, per-matrix top-k masks and
//! straight-through score gradients on the angular-velocity regressor.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{HeadWeights, MhaWeights};
use crate::construct::{HeadMasks, PruningMaskSet};
use crate::error::{invalid, Result, SltError};
use crate::linalg::{sample_uniform_matrix, Matrix};
use crate::rng::RngStream;
use crate::subset_sum::ceil_tight;
use crate::train::{gen_dataset, regressor_gradients, regressor_loss, AngularSample, Regressor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredWeights {
    pub weights: Regressor,
    pub scores: MhaWeights,
    pub k_percent: f64,
    pub steps: usize,
}

fn check_k(k_percent: f64) -> Result<()> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(invalid(format!("k_percent must lie in (0, 100], got {k_percent}")));
    }
    Ok(())
}

pub fn topk_count(len: usize, k_percent: f64) -> usize {
    ceil_tight(k_percent / 100.0 * len as f64).clamp(1, len)
}

/// Keeps the `topk_count` highest scores; equal scores go to the lower flat index.
pub fn topk_mask(scores: &Matrix, k_percent: f64) -> Result<Matrix> {
    check_k(k_percent)?;
    let s = scores.as_slice();
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    let mut data = vec![0.0; s.len()];
    for &i in &order[..topk_count(s.len(), k_percent)] {
        data[i] = 1.0;
    }
    Matrix::new(scores.rows(), scores.cols(), data)
}

pub fn popup_mask(scores: &MhaWeights, k_percent: f64) -> Result<PruningMaskSet> {
    let heads = scores
        .heads()
        .iter()
        .map(|hw| {
            Ok(HeadMasks {
                m_q: topk_mask(&hw.w_q, k_percent)?,
                m_k: topk_mask(&hw.w_k, k_percent)?,
                m_v: topk_mask(&hw.w_v, k_percent)?,
                m_o: topk_mask(&hw.w_o, k_percent)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PruningMaskSet { heads })
}

fn same_shapes(a: &MhaWeights, b: &MhaWeights) -> bool {
    a.h() == b.h()
        && a.heads().iter().zip(b.heads()).all(|(x, y)| {
            x.matrices().iter().zip(y.matrices()).all(|(p, q)| p.shape() == q.shape())
        })
}

impl ScoredWeights {
    pub fn new(weights: Regressor, scores: MhaWeights, k_percent: f64) -> Result<Self> {
        check_k(k_percent)?;
        if !same_shapes(&weights.mha, &scores) {
            return Err(invalid("scores and weights differ in shape"));
        }
        Ok(ScoredWeights { weights, scores, k_percent, steps: 0 })
    }

    pub fn mask(&self) -> Result<PruningMaskSet> {
        popup_mask(&self.scores, self.k_percent)
    }

    /// Frozen weights with the current mask applied.
    pub fn effective(&self) -> Result<Regressor> {
        Regressor::new(self.mask()?.apply(&self.weights.mha)?, self.weights.reg_token.clone())
    }
}

/// Loss of the masked network and the straight-through score gradient
/// `dL/dW_eff * W`.
pub fn score_gradients(sw: &ScoredWeights, batch: &[&AngularSample]) -> Result<(f64, MhaWeights)> {
    let (loss, grad) = regressor_gradients(batch, &sw.effective()?)?;
    let g = grad.mha.map_matrices(|j, k, gm| gm.hadamard(sw.weights.mha.heads()[j].matrices()[k]))?;
    Ok((loss, g))
}

/// One SGD step on the scores; returns the batch loss before the step.
pub fn popup_step(sw: &mut ScoredWeights, batch: &[&AngularSample], lr: f64) -> Result<f64> {
    let (loss, g) = score_gradients(sw, batch)?;
    if !loss.is_finite() {
        return Err(SltError::SearchFailure { step: sw.steps, reason: format!("batch loss is {loss}") });
    }
    let updated = sw.scores.map_matrices(|j, k, s| s.sub(&g.heads()[j].matrices()[k].scale(lr)))?;
    sw.scores = updated;
    sw.steps += 1;
    Ok(loss)
}

/// Loss of `W * (M + S - S_ref)` with the mask `M` held fixed. Its gradient in
/// `S` at `S = S_ref` is the straight-through score gradient.
pub fn surrogate_loss(
    weights: &Regressor,
    mask: &PruningMaskSet,
    ref_scores: &MhaWeights,
    scores: &MhaWeights,
    batch: &[&AngularSample],
) -> Result<f64> {
    let mha = weights.mha.map_matrices(|j, k, w| {
        let m = [&mask.heads[j].m_q, &mask.heads[j].m_k, &mask.heads[j].m_v, &mask.heads[j].m_o][k];
        let shift = scores.heads()[j].matrices()[k].sub(ref_scores.heads()[j].matrices()[k])?;
        w.hadamard(&m.add(&shift)?)
    })?;
    regressor_loss(batch, &Regressor::new(mha, weights.reg_token.clone())?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopupConfig {
    #[serde(rename = "n_K")]
    pub n_k: usize,
    #[serde(rename = "n_V")]
    pub n_v: usize,
    pub k_percent: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub t_choices: Vec<usize>,
}

impl Default for PopupConfig {
    fn default() -> Self {
        PopupConfig {
            n_k: 64,
            n_v: 64,
            k_percent: 30.0,
            epochs: 15,
            batch_size: 64,
            lr: 0.5,
            n_train: 1024,
            n_val: 512,
            t_choices: vec![4, 8, 16, 32, 64],
        }
    }
}

impl PopupConfig {
    pub fn validate(&self) -> Result<()> {
        check_k(self.k_percent)?;
        if self.n_k == 0 || self.n_v == 0 || self.epochs == 0 || self.batch_size == 0 || self.n_train == 0 || self.n_val == 0 {
            return Err(invalid("popup sizes must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid("popup lr must be finite and non-negative"));
        }
        if self.t_choices.is_empty() || self.t_choices.contains(&0) {
            return Err(invalid("popup sequence lengths must be positive"));
        }
        Ok(())
    }

    /// `n_K^(1/4)`, the query/key scale the theory prescribes.
    pub fn theory_scale(&self) -> f64 {
        (self.n_k as f64).powf(0.25)
    }

    /// `n_K^(1/4) 2^(i/2)` for `i = -3..=2`.
    pub fn default_scales(&self) -> Vec<f64> {
        (-3i32..=2).map(|i| if i == 0 { self.theory_scale() } else { self.theory_scale() * 2f64.powf(i as f64 / 2.0) }).collect()
    }
}

/// Query/key from `U[-scale, scale]`, value/output and the frozen regression
/// token from `U[-1, 1]`, scores from `U[0, 1]`. Draws depend on `rng` only,
/// so query/key weights at different scales are proportional.
pub fn init_scored(scale: f64, cfg: &PopupConfig, rng: &RngStream) -> Result<ScoredWeights> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid(format!("scale must be positive, got {scale}")));
    }
    let w = rng.derive("weights");
    let head = HeadWeights {
        w_q: sample_uniform_matrix(2, cfg.n_k, 1.0, &mut w.derive("W_Q"))?.scale(scale),
        w_k: sample_uniform_matrix(2, cfg.n_k, 1.0, &mut w.derive("W_K"))?.scale(scale),
        w_v: sample_uniform_matrix(2, cfg.n_v, 1.0, &mut w.derive("W_V"))?,
        w_o: sample_uniform_matrix(cfg.n_v, 1, 1.0, &mut w.derive("W_O"))?,
    };
    let mut tok = w.derive("token");
    let reg_token = vec![tok.symmetric(1.0), tok.symmetric(1.0)];
    let weights = Regressor::new(MhaWeights::new(vec![head])?, reg_token)?;
    let mut s = rng.derive("scores");
    let scores = weights.mha.map_matrices(|_, _, m| Ok(Matrix::from_fn(m.rows(), m.cols(), |_, _| s.next_f64())))?;
    ScoredWeights::new(weights, scores, cfg.k_percent)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopupCurveRow {
    pub scale: f64,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSweepRow {
    pub scale: f64,
    pub seed: u64,
    /// Best validation loss over epochs.
    pub final_val_loss: f64,
}

fn loss_on(data: &[AngularSample], reg: &Regressor) -> Result<f64> {
    regressor_loss(&data.iter().collect::<Vec<_>>(), reg)
}

/// Runs the search for one `(scale, seed)`; epoch 0 is the initial mask.
pub fn run_popup(
    scale: f64,
    seed: u64,
    cfg: &PopupConfig,
    train: &[AngularSample],
    val: &[AngularSample],
) -> Result<Vec<PopupCurveRow>> {
    cfg.validate()?;
    let rng = RngStream::new(seed).derive("popup");
    let mut sw = init_scored(scale, cfg, &rng)?;
    let frozen = sw.weights.clone();
    let mut order_rng = rng.derive("shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let row = |epoch, sw: &ScoredWeights| -> Result<PopupCurveRow> {
        let eff = sw.effective()?;
        Ok(PopupCurveRow { scale, seed, epoch, train_loss: loss_on(train, &eff)?, val_loss: loss_on(val, &eff)? })
    };
    let mut curve = vec![row(0, &sw)?];
    for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&AngularSample> = chunk.iter().map(|&i| &train[i]).collect();
            popup_step(&mut sw, &batch, cfg.lr)?;
        }
        curve.push(row(epoch, &sw)?);
    }
    debug_assert_eq!(frozen, sw.weights);
    Ok(curve)
}

/// Train/validation sets shared by every row of a sweep.
pub fn popup_datasets(cfg: &PopupConfig, rng: &RngStream) -> Result<(Vec<AngularSample>, Vec<AngularSample>)> {
    Ok((
        gen_dataset(cfg.n_train, &cfg.t_choices, &mut rng.derive("train"))?,
        gen_dataset(cfg.n_val, &cfg.t_choices, &mut rng.derive("val"))?,
    ))
}

/// Every `(scale, seed)` pair, ordered by scale then seed.
pub fn scale_sweep(
    scales: &[f64],
    seeds: &[u64],
    cfg: &PopupConfig,
    data_rng: &RngStream,
) -> Result<(Vec<ScaleSweepRow>, Vec<PopupCurveRow>)> {
    if scales.is_empty() || seeds.is_empty() {
        return Err(invalid("scale sweep needs at least one scale and one seed"));
    }
    if scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(invalid("scales must be positive"));
    }
    let (train, val) = popup_datasets(cfg, data_rng)?;
    let jobs: Vec<(f64, u64)> = scales.iter().flat_map(|&s| seeds.iter().map(move |&seed| (s, seed))).collect();
    let curves = jobs
        .par_iter()
        .map(|&(s, seed)| run_popup(s, seed, cfg, &train, &val))
        .collect::<Result<Vec<_>>>()?;
    let rows = curves
        .iter()
        .zip(&jobs)
        .map(|(c, &(scale, seed))| ScaleSweepRow {
            scale,
            seed,
            final_val_loss: c.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min),
        })
        .collect();
    Ok((rows, curves.into_iter().flatten().collect()))
}

pub fn mean_loss_at(rows: &[ScaleSweepRow], scale: f64) -> Option<f64> {
    let v: Vec<f64> = rows.iter().filter(|r| r.scale == scale).map(|r| r.final_val_loss).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn write_popup_csv(path: &Path, curve: &[PopupCurveRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in curve {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
