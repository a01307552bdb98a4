//! Blocks and stacks of blocks: attention, residual, ReLU feed-forward, residual.

use serde::{Deserialize, Serialize};

use super::mha::{construct_slt_mha, MaskedMha, SourceMhaConfig};
use crate::attention::{
    block_forward_x, max_row_distance, mha_forward_x, AttentionMaskSet, BlockWeights, FeedForward, SequenceBatch,
};
use crate::error::{invalid, Result};
use crate::linalg::{sample_uniform_matrix, spectral_norm_default, Matrix};
use crate::rng::RngStream;
use crate::subset_sum::{approx_linear_with_relu, ceil_tight, FactorizeOptions};

pub const MIN_EPS_SHARE: f64 = 1e-300;

/// Entry tolerance for the feed-forward factorization: entry errors at most
/// `tol` move a `d1`-wide output by at most `d1 tol |a|`, and the input norm is
/// at most `3 alpha H sqrt(d1)`, so the stage stays within `eps / 2`.
pub fn fc_entry_tolerance(eps: f64, h: usize, d1: usize, alpha: f64) -> f64 {
    let d1f = d1 as f64;
    eps / (2.0 * d1f * 3.0 * alpha * h as f64 * d1f.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskedBlock {
    pub eps: f64,
    pub alpha: f64,
    pub mha: MaskedMha,
    pub fc_first: Matrix,
    pub fc_second: Matrix,
    pub fc_mask_first: Matrix,
    pub fc_mask_second: Matrix,
    pub fc_entry_tol: f64,
    pub fc_max_err: f64,
    pub fc_hit: bool,
    pub fc_sign_deficits: usize,
}

impl MaskedBlock {
    pub fn pruned(&self) -> Result<BlockWeights> {
        BlockWeights::new(
            self.mha.pruned()?,
            FeedForward::Relu {
                first: self.fc_first.hadamard(&self.fc_mask_first)?,
                second: self.fc_second.hadamard(&self.fc_mask_second)?,
            },
        )
    }

    pub fn all_hit(&self) -> bool {
        self.mha.all_hit() && self.fc_hit
    }
}

fn linear_fc(target: &BlockWeights) -> Result<&Matrix> {
    match &target.ffn {
        FeedForward::Linear { fc } => Ok(fc),
        FeedForward::Relu { .. } => Err(invalid("target blocks use a single linear feed-forward layer")),
    }
}

pub fn construct_slt_block(
    target: &BlockWeights,
    n_mha: usize,
    n_fc: usize,
    eps: f64,
    alpha: f64,
    rng: &RngStream,
    opts: &FactorizeOptions,
) -> Result<MaskedBlock> {
    if !(eps > 0.0 && eps < 4.0) {
        return Err(invalid(format!("block eps must lie in (0, 4), got {eps}")));
    }
    let fc = linear_fc(target)?;
    let s = spectral_norm_default(fc)?;
    if s > 1.0 + 1e-10 {
        return Err(invalid(format!("target feed-forward has spectral norm {s} > 1")));
    }
    let d1 = target.d1();
    let h = target.mha.h();
    let cfg = SourceMhaConfig::new(n_mha, n_mha, h, d1, d1)?;
    let mha = construct_slt_mha(&target.mha, &cfg, eps / 4.0, alpha, &rng.derive("mha"), opts)?;

    let fc_first = sample_uniform_matrix(d1, n_fc, 1.0, &mut rng.derive("fc_first"))?;
    let fc_second = sample_uniform_matrix(n_fc, d1, 1.0, &mut rng.derive("fc_second"))?;
    let tol = fc_entry_tolerance(eps, h, d1, alpha);
    let pair = approx_linear_with_relu(&fc.transpose(), &fc_first.transpose(), &fc_second.transpose(), tol, opts)?;
    Ok(MaskedBlock {
        eps,
        alpha,
        mha,
        fc_mask_first: pair.m1.transpose(),
        fc_mask_second: pair.m2.transpose(),
        fc_first,
        fc_second,
        fc_entry_tol: tol,
        fc_max_err: pair.achieved_max_err,
        fc_hit: pair.all_hit(),
        fc_sign_deficits: pair.sign_deficits,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockMeasurement {
    /// `max_i |attn_source(x_i) - attn_target(x_i)|`.
    pub mha_stage_err: f64,
    /// `max_i |F_source(a'_i) - F_target(a'_i)|` on the source's residual stream.
    pub fc_stage_err: f64,
    pub block_err: f64,
}

fn measure_block_x(x: &Matrix, mask: &AttentionMaskSet, target: &BlockWeights, pruned: &BlockWeights) -> Result<BlockMeasurement> {
    let t_attn = mha_forward_x(x, mask, &target.mha)?;
    let s_attn = mha_forward_x(x, mask, &pruned.mha)?;
    let a_src = s_attn.add(x)?;
    Ok(BlockMeasurement {
        mha_stage_err: max_row_distance(&t_attn, &s_attn)?,
        fc_stage_err: max_row_distance(&target.ffn.apply(&a_src)?, &pruned.ffn.apply(&a_src)?)?,
        block_err: max_row_distance(&block_forward_x(x, mask, target)?, &block_forward_x(x, mask, pruned)?)?,
    })
}

/// Stage and block errors, each maximized over batches.
pub fn measure_block(target: &BlockWeights, masked: &MaskedBlock, batches: &[SequenceBatch]) -> Result<BlockMeasurement> {
    if batches.is_empty() {
        return Err(invalid("no batches to measure on"));
    }
    let pruned = masked.pruned()?;
    let mut out = BlockMeasurement::default();
    for b in batches {
        let m = measure_block_x(&b.x, &b.mask, target, &pruned)?;
        out.mha_stage_err = out.mha_stage_err.max(m.mha_stage_err);
        out.fc_stage_err = out.fc_stage_err.max(m.fc_stage_err);
        out.block_err = out.block_err.max(m.block_err);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockBudget {
    pub b: usize,
    #[serde(rename = "B")]
    pub total: usize,
    /// `alpha (4 H sqrt(d1))^(b-1)`, the target input norm bound.
    pub beta_b: f64,
    /// Input bound the block is constructed for: `alpha` for the first block,
    /// `2 beta_b` afterwards.
    pub input_bound: f64,
    /// Allowed deviation of this block's output from the target's.
    pub deviation_budget: f64,
    /// Error allotted to this block's own approximation.
    pub eps_share: f64,
    pub n_mha: usize,
    pub n_fc: usize,
}

/// Per-block schedule: with `P_b = prod_{j > b} 16 H sqrt(d1) beta_j^2`, block
/// `b` may deviate by `D_b = eps / (2^(B-b) P_b)`. The first block spends all of
/// `D_1` on its own approximation; later blocks spend half and leave the other
/// half to the propagated upstream deviation.
pub fn transformer_budgets(
    blocks: usize,
    eps: f64,
    alpha: f64,
    h: usize,
    d1: usize,
    c_hat: f64,
) -> Result<Vec<BlockBudget>> {
    if blocks == 0 {
        return Err(invalid("at least one block is required"));
    }
    if !(eps > 0.0 && eps.is_finite() && alpha > 0.0 && c_hat > 0.0) {
        return Err(invalid("eps, alpha and C_hat must be positive"));
    }
    let (hf, d1f) = (h as f64, d1 as f64);
    let growth = 4.0 * hf * d1f.sqrt();
    let beta: Vec<f64> = (1..=blocks).map(|b| alpha * growth.powi(b as i32 - 1)).collect();
    let mut out = Vec::with_capacity(blocks);
    for b in 1..=blocks {
        let tail: f64 = (b + 1..=blocks).map(|j| 16.0 * hf * d1f.sqrt() * beta[j - 1] * beta[j - 1]).product();
        let deviation = eps / (2f64.powi((blocks - b) as i32) * tail);
        let share = if b == 1 { deviation } else { deviation / 2.0 };
        if !(share >= MIN_EPS_SHARE) || !share.is_finite() {
            return Err(invalid(format!(
                "eps share of block {b} underflows ({share:e}); use fewer blocks or a larger eps"
            )));
        }
        let a_b = if b == 1 { alpha } else { 2.0 * beta[b - 1] };
        let n_mha = d1f * c_hat * (32.0 * a_b.powi(3) * hf * d1f.powf(1.5) / share).ln();
        let n_fc = d1f * c_hat * (24.0 * a_b * hf * d1f.powf(2.5) / share).ln();
        out.push(BlockBudget {
            b,
            total: blocks,
            beta_b: beta[b - 1],
            input_bound: a_b,
            deviation_budget: deviation,
            eps_share: share,
            n_mha: ceil_tight(n_mha).max(d1),
            n_fc: ceil_tight(n_fc).max(2 * d1),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskedTransformer {
    pub eps: f64,
    pub budgets: Vec<BlockBudget>,
    pub blocks: Vec<MaskedBlock>,
}

impl MaskedTransformer {
    pub fn pruned(&self) -> Result<Vec<BlockWeights>> {
        self.blocks.iter().map(MaskedBlock::pruned).collect()
    }

    pub fn all_hit(&self) -> bool {
        self.blocks.iter().all(MaskedBlock::all_hit)
    }
}

/// Builds every block against its scheduled share. `dims` overrides the
/// scheduled `(n_MHA, n_FC)` with one pair used for all blocks.
pub fn construct_slt_transformer(
    targets: &[BlockWeights],
    eps: f64,
    alpha: f64,
    c_hat: f64,
    dims: Option<(usize, usize)>,
    rng: &RngStream,
    opts: &FactorizeOptions,
) -> Result<MaskedTransformer> {
    let first = targets.first().ok_or_else(|| invalid("at least one block is required"))?;
    let (h, d1) = (first.mha.h(), first.d1());
    if targets.iter().any(|t| t.d1() != d1) {
        return Err(invalid("all blocks must share d1"));
    }
    let mut budgets = transformer_budgets(targets.len(), eps, alpha, h, d1, c_hat)?;
    if let Some((n_mha, n_fc)) = dims {
        for bb in &mut budgets {
            bb.n_mha = n_mha;
            bb.n_fc = n_fc;
        }
    }
    let blocks = targets
        .iter()
        .zip(&budgets)
        .map(|(t, bb)| {
            construct_slt_block(
                t,
                bb.n_mha,
                bb.n_fc,
                bb.eps_share,
                bb.input_bound,
                &rng.derive_index("block", bb.b as u64),
                opts,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MaskedTransformer { eps, budgets, blocks })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransformerMeasurement {
    /// `max_i |x_i^(b+1) - x_i'^(b+1)|` after each block.
    pub deviations: Vec<f64>,
    pub final_err: f64,
}

/// Deviations after every prefix of blocks; `prefix` limits how many blocks run.
pub fn measure_transformer(
    targets: &[BlockWeights],
    pruned: &[BlockWeights],
    batches: &[SequenceBatch],
) -> Result<TransformerMeasurement> {
    if batches.is_empty() {
        return Err(invalid("no batches to measure on"));
    }
    if targets.len() != pruned.len() || targets.is_empty() {
        return Err(invalid("target and pruned stacks differ in length"));
    }
    let mut deviations = vec![0.0_f64; targets.len()];
    for batch in batches {
        let mut xt = batch.x.clone();
        let mut xs = batch.x.clone();
        for (b, (t, s)) in targets.iter().zip(pruned).enumerate() {
            xt = block_forward_x(&xt, &batch.mask, t)?;
            xs = block_forward_x(&xs, &batch.mask, s)?;
            deviations[b] = deviations[b].max(max_row_distance(&xt, &xs)?);
        }
    }
    let final_err = *deviations.last().expect("nonempty");
    Ok(TransformerMeasurement { deviations, final_err })
}
