//! Angular-velocity toy task: dataset, attention regressor with hand-derived
//! gradients, AdamW training and spectral-norm projection of trained weights.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{HeadWeights, MhaWeights};
use crate::error::{invalid, Result, SltError};
use crate::linalg::{sample_uniform_matrix, spectral_norm_default, Matrix};
use crate::rng::RngStream;

pub const DEFAULT_T_CHOICES: [usize; 7] = [4, 8, 16, 32, 64, 128, 256];
pub const DEFAULT_SAMPLES: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AngularSample {
    pub omega: f64,
    pub theta0: f64,
    #[serde(rename = "T")]
    pub t: usize,
    /// `(T + 1) x 2`; row 0 is the zero regression slot, row `t` is
    /// `(cos(omega t + theta0), sin(omega t + theta0))`.
    pub tokens: Matrix,
}

impl AngularSample {
    pub fn new(omega: f64, theta0: f64, t: usize) -> Self {
        let tokens = Matrix::from_fn(t + 1, 2, |i, j| {
            if i == 0 {
                return 0.0;
            }
            let phase = omega * i as f64 + theta0;
            if j == 0 {
                phase.cos()
            } else {
                phase.sin()
            }
        });
        AngularSample { omega, theta0, t, tokens }
    }
}

pub fn gen_dataset(n: usize, t_choices: &[usize], rng: &mut RngStream) -> Result<Vec<AngularSample>> {
    if n == 0 || t_choices.is_empty() {
        return Err(invalid("dataset needs n >= 1 and at least one sequence length"));
    }
    if t_choices.contains(&0) {
        return Err(invalid("sequence lengths must be positive"));
    }
    Ok((0..n)
        .map(|_| {
            let omega = rng.uniform(-PI, PI);
            let theta0 = rng.uniform(0.0, PI);
            let t = t_choices[rng.below(t_choices.len())];
            AngularSample::new(omega, theta0, t)
        })
        .collect())
}

#[derive(Serialize)]
struct DatasetRow {
    sample_id: usize,
    omega: f64,
    theta0: f64,
    #[serde(rename = "T")]
    t: usize,
}

pub fn write_dataset_csv(path: &Path, data: &[AngularSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for (sample_id, s) in data.iter().enumerate() {
        w.serialize(DatasetRow { sample_id, omega: s.omega, theta0: s.theta0, t: s.t })?;
    }
    w.flush()?;
    Ok(())
}

/// Attention weights plus the learned regression-token embedding that is
/// added to row 0 of every sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub mha: MhaWeights,
    pub reg_token: Vec<f64>,
}

impl Regressor {
    pub fn new(mha: MhaWeights, reg_token: Vec<f64>) -> Result<Self> {
        if mha.d1() != 2 || mha.d2() != 1 {
            return Err(invalid(format!("regressor needs d1 = 2 and d2 = 1, got {} and {}", mha.d1(), mha.d2())));
        }
        if reg_token.len() != 2 || reg_token.iter().any(|v| !v.is_finite()) {
            return Err(invalid("regression token must be two finite values"));
        }
        Ok(Regressor { mha, reg_token })
    }

    pub fn zero_token(mha: MhaWeights) -> Result<Self> {
        Self::new(mha, vec![0.0; 2])
    }

    pub fn param_count(&self) -> usize {
        self.mha.param_count() + self.reg_token.len()
    }

    /// Per head `W_Q, W_K, W_V, W_O` row-major, then the regression token.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for hw in self.mha.heads() {
            for m in hw.matrices() {
                out.extend_from_slice(m.as_slice());
            }
        }
        out.extend_from_slice(&self.reg_token);
        out
    }

    /// Same shapes as `self`, values from `flat`.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.param_count() {
            return Err(invalid(format!("expected {} parameters, got {}", self.param_count(), flat.len())));
        }
        let mut pos = 0;
        let mha = self.mha.map_matrices(|_, _, m| {
            let len = m.rows() * m.cols();
            let out = Matrix::new(m.rows(), m.cols(), flat[pos..pos + len].to_vec());
            pos += len;
            out
        })?;
        Regressor::new(mha, flat[pos..].to_vec())
    }

    pub fn input(&self, sample: &AngularSample) -> Matrix {
        let mut x = sample.tokens.clone();
        x.set(0, 0, x.get(0, 0) + self.reg_token[0]);
        x.set(0, 1, x.get(0, 1) + self.reg_token[1]);
        x
    }

    pub fn predict(&self, sample: &AngularSample) -> f64 {
        let x = self.input(sample);
        let mut y = 0.0;
        for hw in self.mha.heads() {
            y += HeadPass::new(&x, hw, self.mha.d_k()).y;
        }
        y
    }
}

fn vec_mat(v: &[f64], m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (i, &vi) in v.iter().enumerate() {
        for (o, &mij) in out.iter_mut().zip(m.row(i)) {
            *o += vi * mij;
        }
    }
    out
}

fn mat_vec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Forward quantities of one head at the regression-token row.
struct HeadPass {
    q0: Vec<f64>,
    k: Matrix,
    v: Matrix,
    p: Vec<f64>,
    z: Vec<f64>,
    y: f64,
    scale: f64,
}

impl HeadPass {
    fn new(x: &Matrix, hw: &HeadWeights, d_k: usize) -> Self {
        let scale = 1.0 / (d_k as f64).sqrt();
        let q0 = vec_mat(x.row(0), &hw.w_q);
        let k = x.matmul(&hw.w_k).expect("shapes checked by MhaWeights");
        let v = x.matmul(&hw.w_v).expect("shapes checked by MhaWeights");
        let logits: Vec<f64> = (0..x.rows()).map(|j| scale * crate::linalg::dot(&q0, k.row(j))).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let zsum: f64 = p.iter().sum();
        p.iter_mut().for_each(|pj| *pj /= zsum);
        let mut z = vec![0.0; v.cols()];
        for (j, &pj) in p.iter().enumerate() {
            for (za, &va) in z.iter_mut().zip(v.row(j)) {
                *za += pj * va;
            }
        }
        let y = vec_mat(&z, &hw.w_o)[0];
        HeadPass { q0, k, v, p, z, y, scale }
    }
}

/// Prediction at the regression-token row with full attention and a zero
/// regression token.
pub fn regressor_forward(sample: &AngularSample, w: &MhaWeights) -> Result<f64> {
    Ok(Regressor::zero_token(w.clone())?.predict(sample))
}

pub fn regressor_loss(batch: &[&AngularSample], reg: &Regressor) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let sum: f64 = batch.iter().map(|s| (reg.predict(s) - s.omega).powi(2)).sum();
    Ok(sum / batch.len() as f64)
}

/// Mean squared error on `batch` and its gradient, shaped like `reg`.
pub fn regressor_gradients(batch: &[&AngularSample], reg: &Regressor) -> Result<(f64, Regressor)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let heads = reg.mha.heads();
    let mut grads: Vec<[Matrix; 4]> = heads
        .iter()
        .map(|hw| hw.matrices().map(|m| Matrix::zeros(m.rows(), m.cols())))
        .collect();
    let mut g_tok = vec![0.0; 2];
    let mut loss = 0.0;
    for s in batch {
        let x = reg.input(s);
        let passes: Vec<HeadPass> = heads.iter().map(|hw| HeadPass::new(&x, hw, reg.mha.d_k())).collect();
        let e = passes.iter().map(|p| p.y).sum::<f64>() - s.omega;
        loss += e * e;
        for ((hw, pass), g) in heads.iter().zip(&passes).zip(grads.iter_mut()) {
            let [gq, gk, gv, go] = g;
            let gz: Vec<f64> = mat_vec(&hw.w_o, &[e]);
            for (a, &za) in pass.z.iter().enumerate() {
                go.set(a, 0, go.get(a, 0) + za * e);
            }
            let dp: Vec<f64> = (0..x.rows()).map(|j| crate::linalg::dot(&gz, pass.v.row(j))).collect();
            let avg: f64 = pass.p.iter().zip(&dp).map(|(p, d)| p * d).sum();
            let dl: Vec<f64> = pass.p.iter().zip(&dp).map(|(p, d)| p * (d - avg)).collect();
            let mut dq0 = vec![0.0; pass.q0.len()];
            for (j, &dlj) in dl.iter().enumerate() {
                for (dq, &kja) in dq0.iter_mut().zip(pass.k.row(j)) {
                    *dq += pass.scale * dlj * kja;
                }
            }
            let x0 = x.row(0);
            for (i, &xi) in x0.iter().enumerate() {
                for (a, &dqa) in dq0.iter().enumerate() {
                    gq.set(i, a, gq.get(i, a) + xi * dqa);
                }
            }
            let mut dk0 = vec![0.0; pass.q0.len()];
            let mut dv0 = vec![0.0; gz.len()];
            for j in 0..x.rows() {
                let xj = x.row(j);
                for (a, &qa) in pass.q0.iter().enumerate() {
                    let dk = pass.scale * dl[j] * qa;
                    if j == 0 {
                        dk0[a] = dk;
                    }
                    for (i, &xi) in xj.iter().enumerate() {
                        gk.set(i, a, gk.get(i, a) + xi * dk);
                    }
                }
                for (a, &gza) in gz.iter().enumerate() {
                    let dv = pass.p[j] * gza;
                    if j == 0 {
                        dv0[a] = dv;
                    }
                    for (i, &xi) in xj.iter().enumerate() {
                        gv.set(i, a, gv.get(i, a) + xi * dv);
                    }
                }
            }
            for (parts, m) in [(&dq0, &hw.w_q), (&dk0, &hw.w_k), (&dv0, &hw.w_v)] {
                for (gt, d) in g_tok.iter_mut().zip(mat_vec(m, parts)) {
                    *gt += d;
                }
            }
        }
    }
    let n = batch.len() as f64;
    let factor = 2.0 / n;
    let new_heads = grads
        .into_iter()
        .map(|[q, k, v, o]| HeadWeights {
            w_q: q.scale(factor),
            w_k: k.scale(factor),
            w_v: v.scale(factor),
            w_o: o.scale(factor),
        })
        .collect();
    let grad = Regressor::new(MhaWeights::new(new_heads)?, g_tok.iter().map(|g| g * factor).collect())?;
    Ok((loss / n, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "d_K")]
    pub d_k: usize,
    #[serde(rename = "d_V")]
    pub d_v: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 1024,
            lr: 0.1,
            epochs: 25,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            h: 1,
            d_k: 8,
            d_v: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.weight_decay, self.eps_adam].iter().all(|v| v.is_finite() && *v >= 0.0);
        let betas = [self.beta1, self.beta2].iter().all(|b| (0.0..1.0).contains(b));
        if self.batch_size == 0 || self.epochs == 0 || self.h == 0 || self.d_k == 0 || self.d_v == 0 {
            return Err(invalid("batch size, epochs and model dims must be positive"));
        }
        if !positive || !betas || self.weight_decay >= 1.0 {
            return Err(invalid("lr, weight decay and eps_adam must be non-negative, betas and weight decay in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn write_curve_csv(path: &Path, curve: &[EpochLoss]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in curve {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Query/key entries from `U[-d_K^(1/4), d_K^(1/4)]`, value/output entries from
/// `U[-1, 1]`, zero regression token.
pub fn init_regressor(cfg: &TrainConfig, rng: &RngStream) -> Result<Regressor> {
    let qk = (cfg.d_k as f64).powf(0.25);
    let heads = (0..cfg.h)
        .map(|j| {
            let r = rng.derive_index("head", j as u64);
            Ok(HeadWeights {
                w_q: sample_uniform_matrix(2, cfg.d_k, qk, &mut r.derive("W_Q"))?,
                w_k: sample_uniform_matrix(2, cfg.d_k, qk, &mut r.derive("W_K"))?,
                w_v: sample_uniform_matrix(2, cfg.d_v, 1.0, &mut r.derive("W_V"))?,
                w_o: sample_uniform_matrix(cfg.d_v, 1, 1.0, &mut r.derive("W_O"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Regressor::zero_token(MhaWeights::new(heads)?)
}

pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
}

impl AdamW {
    pub fn new(n: usize) -> Self {
        AdamW { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }

    /// `w -= lr m_hat / (sqrt(v_hat) + eps) + wd w`.
    pub fn step(&mut self, w: &mut [f64], g: &[f64], cfg: &TrainConfig) {
        self.step += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.step);
        let c2 = 1.0 - cfg.beta2.powi(self.step);
        for i in 0..w.len() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g[i];
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let update = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps_adam);
            w[i] -= cfg.lr * update + cfg.weight_decay * w[i];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainedTarget {
    pub regressor: Regressor,
    /// Epoch 0 is the untrained model.
    pub curve: Vec<EpochLoss>,
}

pub fn dataset_loss(data: &[AngularSample], reg: &Regressor) -> Result<f64> {
    regressor_loss(&data.iter().collect::<Vec<_>>(), reg)
}

pub fn train_target(
    train: &[AngularSample],
    val: &[AngularSample],
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<TrainedTarget> {
    cfg.validate()?;
    let reg = init_regressor(cfg, &rng.derive("init"))?;
    train_from(reg, train, val, cfg, rng)
}

/// AdamW from a given starting point; minibatches reshuffled every epoch.
pub fn train_from(
    mut reg: Regressor,
    train: &[AngularSample],
    val: &[AngularSample],
    cfg: &TrainConfig,
    rng: &RngStream,
) -> Result<TrainedTarget> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(invalid("training and validation sets must be nonempty"));
    }
    let mut curve = vec![EpochLoss { epoch: 0, train_loss: dataset_loss(train, &reg)?, val_loss: dataset_loss(val, &reg)? }];
    let mut opt = AdamW::new(reg.param_count());
    let mut order_rng = rng.derive("shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order_rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&AngularSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grad) = regressor_gradients(&batch, &reg)?;
            let mut w = reg.to_flat();
            let g = grad.to_flat();
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                return Err(SltError::TrainingFailure { epoch, curve });
            }
            opt.step(&mut w, &g, cfg);
            reg = reg.with_flat(&w).map_err(|_| SltError::TrainingFailure { epoch, curve: curve.clone() })?;
        }
        let train_loss = dataset_loss(train, &reg)?;
        let val_loss = dataset_loss(val, &reg)?;
        curve.push(EpochLoss { epoch, train_loss, val_loss });
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(SltError::TrainingFailure { epoch, curve });
        }
    }
    Ok(TrainedTarget { regressor: reg, curve })
}

/// Divisors applied to `W_Q, W_K, W_V, W_O` of each head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub scales: Vec<[f64; 4]>,
}

impl ScaleReport {
    /// Factor by which head `j`'s logits shrink.
    pub fn logit_factor(&self, j: usize) -> f64 {
        self.scales[j][0] * self.scales[j][1]
    }

    /// Factor by which head `j`'s value path shrinks.
    pub fn value_factor(&self, j: usize) -> f64 {
        self.scales[j][2] * self.scales[j][3]
    }
}

pub fn project_to_unit_spectral(w: &MhaWeights) -> Result<(MhaWeights, ScaleReport)> {
    let mut scales = vec![[1.0; 4]; w.h()];
    let out = w.map_matrices(|j, k, m| {
        let s = spectral_norm_default(m)?.max(1.0);
        scales[j][k] = s;
        Ok(if s > 1.0 { m.scale(1.0 / s) } else { m.clone() })
    })?;
    Ok((out, ScaleReport { scales }))
}
