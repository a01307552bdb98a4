//! Masked-softmax multi-head attention and normalization-free transformer blocks.
//!
//! Tokens are rows: `X` is `T x d1`, a query is `x W_Q`, and a feed-forward layer
//! maps a row `a` to `a F` (or `relu(a A) B` for the two-layer form).

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{max_norm, norm2, spectral_norm_default, Matrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    #[serde(rename = "W_Q")]
    pub w_q: Matrix,
    #[serde(rename = "W_K")]
    pub w_k: Matrix,
    #[serde(rename = "W_V")]
    pub w_v: Matrix,
    #[serde(rename = "W_O")]
    pub w_o: Matrix,
}

impl HeadWeights {
    pub fn matrices(&self) -> [&Matrix; 4] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MhaWeights {
    #[serde(rename = "H")]
    h: usize,
    d1: usize,
    d2: usize,
    #[serde(rename = "d_K")]
    d_k: usize,
    #[serde(rename = "d_V")]
    d_v: usize,
    heads: Vec<HeadWeights>,
}

#[derive(Deserialize)]
struct RawMha {
    #[serde(rename = "H")]
    h: usize,
    d1: usize,
    d2: usize,
    #[serde(rename = "d_K")]
    d_k: usize,
    #[serde(rename = "d_V")]
    d_v: usize,
    heads: Vec<HeadWeights>,
}

impl<'de> Deserialize<'de> for MhaWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = RawMha::deserialize(d)?;
        let w = MhaWeights::new(raw.heads).map_err(serde::de::Error::custom)?;
        if (w.h, w.d1, w.d2, w.d_k, w.d_v) != (raw.h, raw.d1, raw.d2, raw.d_k, raw.d_v) {
            return Err(serde::de::Error::custom("declared dimensions disagree with head shapes"));
        }
        Ok(w)
    }
}

impl MhaWeights {
    pub fn new(heads: Vec<HeadWeights>) -> Result<Self> {
        let first = heads.first().ok_or_else(|| invalid("at least one head is required"))?;
        let d1 = first.w_q.rows();
        let d_k = first.w_q.cols();
        let d_v = first.w_v.cols();
        let d2 = first.w_o.cols();
        for (j, hw) in heads.iter().enumerate() {
            let ok = hw.w_q.shape() == (d1, d_k)
                && hw.w_k.shape() == (d1, d_k)
                && hw.w_v.shape() == (d1, d_v)
                && hw.w_o.shape() == (d_v, d2);
            if !ok {
                return Err(invalid(format!(
                    "head {j} shapes {:?} {:?} {:?} {:?} inconsistent with d1={d1} d_K={d_k} d_V={d_v} d2={d2}",
                    hw.w_q.shape(),
                    hw.w_k.shape(),
                    hw.w_v.shape(),
                    hw.w_o.shape()
                )));
            }
        }
        Ok(Self { h: heads.len(), d1, d2, d_k, d_v, heads })
    }

    pub fn zeros(h: usize, d1: usize, d2: usize, d_k: usize, d_v: usize) -> Self {
        let head = HeadWeights {
            w_q: Matrix::zeros(d1, d_k),
            w_k: Matrix::zeros(d1, d_k),
            w_v: Matrix::zeros(d1, d_v),
            w_o: Matrix::zeros(d_v, d2),
        };
        Self { h, d1, d2, d_k, d_v, heads: vec![head; h] }
    }

    pub fn h(&self) -> usize {
        self.h
    }
    pub fn d1(&self) -> usize {
        self.d1
    }
    pub fn d2(&self) -> usize {
        self.d2
    }
    pub fn d_k(&self) -> usize {
        self.d_k
    }
    pub fn d_v(&self) -> usize {
        self.d_v
    }

    pub fn heads(&self) -> &[HeadWeights] {
        &self.heads
    }

    /// Mutable access that cannot change shapes.
    pub fn for_each_matrix_mut(&mut self, mut f: impl FnMut(usize, usize, &mut Matrix)) {
        for (j, head) in self.heads.iter_mut().enumerate() {
            for (m, mat) in head.matrices_mut().into_iter().enumerate() {
                let shape = mat.shape();
                f(j, m, mat);
                assert_eq!(mat.shape(), shape, "matrix shape changed in place");
            }
        }
    }

    pub fn map_matrices(&self, mut f: impl FnMut(usize, usize, &Matrix) -> Result<Matrix>) -> Result<Self> {
        let heads = self
            .heads
            .iter()
            .enumerate()
            .map(|(j, hw)| {
                let [q, k, v, o] = hw.matrices();
                Ok(HeadWeights { w_q: f(j, 0, q)?, w_k: f(j, 1, k)?, w_v: f(j, 2, v)?, w_o: f(j, 3, o)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(heads)
    }

    /// Every projection has spectral norm at most `1 + 1e-10`.
    pub fn is_theory_compliant(&self) -> Result<bool> {
        for hw in &self.heads {
            for m in hw.matrices() {
                if spectral_norm_default(m)? > 1.0 + 1e-10 {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }

    pub fn param_count(&self) -> usize {
        self.h * (2 * self.d1 * self.d_k + self.d1 * self.d_v + self.d_v * self.d2)
    }
}

/// One attention pattern row per query position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionMaskSet {
    rows: Vec<Vec<bool>>,
}

impl AttentionMaskSet {
    pub fn new(rows: Vec<Vec<bool>>) -> Result<Self> {
        let t = rows.len();
        if t == 0 {
            return Err(invalid("attention mask needs at least one row"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != t {
                return Err(invalid(format!("mask row {i} has length {}, expected {t}", r.len())));
            }
            if !r.iter().any(|&b| b) {
                return Err(invalid(format!("mask row {i} attends to nothing")));
            }
        }
        Ok(Self { rows })
    }

    pub fn full(t: usize) -> Self {
        Self { rows: vec![vec![true; t]; t] }
    }

    pub fn causal(t: usize) -> Self {
        Self { rows: (0..t).map(|i| (0..t).map(|j| j <= i).collect()).collect() }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.rows[i]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceBatch {
    pub x: Matrix,
    pub mask: AttentionMaskSet,
    pub alpha: f64,
}

/// `max(max_i |x_i|, max_entry |x|)`.
pub fn input_bound(x: &Matrix) -> f64 {
    x.max_row_norm().max(max_norm(x))
}

impl SequenceBatch {
    /// `alpha` is set to the tightest value covering both row norms and entries.
    pub fn new(x: Matrix, mask: AttentionMaskSet) -> Result<Self> {
        if x.rows() != mask.len() {
            return Err(invalid(format!("X has {} rows but mask covers {}", x.rows(), mask.len())));
        }
        let alpha = input_bound(&x);
        Ok(Self { x, mask, alpha })
    }

    /// Additionally raises `alpha` to `max(sqrt(d1), sqrt(d2))`.
    pub fn theory_compliant(x: Matrix, mask: AttentionMaskSet, d2: usize) -> Result<Self> {
        let mut b = Self::new(x, mask)?;
        b.alpha = b.alpha.max((b.x.cols() as f64).sqrt()).max((d2 as f64).sqrt());
        Ok(b)
    }

    pub fn with_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(alpha >= input_bound(&self.x)) {
            return Err(invalid(format!("alpha {alpha} is below the input bound {}", input_bound(&self.x))));
        }
        self.alpha = alpha;
        Ok(self)
    }

    pub fn t(&self) -> usize {
        self.x.rows()
    }
}

pub fn masked_softmax(logits: &[f64], mask_row: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != mask_row.len() {
        return Err(invalid("logits and mask lengths differ"));
    }
    let max = logits
        .iter()
        .zip(mask_row)
        .filter(|(_, &m)| m)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(invalid("mask row attends to nothing"));
    }
    if !max.is_finite() {
        return Err(invalid("non-finite attention logit"));
    }
    let mut out: Vec<f64> =
        logits.iter().zip(mask_row).map(|(&l, &m)| if m { (l - max).exp() } else { 0.0 }).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    Ok(out)
}

/// Row-wise masked softmax of a `T x T` logit matrix.
pub fn attention_probs(logits: &Matrix, mask: &AttentionMaskSet) -> Result<Matrix> {
    let t = logits.rows();
    if logits.cols() != t || mask.len() != t {
        return Err(invalid("attention logits must be T x T and match the mask"));
    }
    let mut p = Matrix::zeros(t, t);
    for i in 0..t {
        for (j, v) in masked_softmax(logits.row(i), mask.row(i))?.into_iter().enumerate() {
            p.set(i, j, v);
        }
    }
    Ok(p)
}

fn check_input(x: &Matrix, mask: &AttentionMaskSet, d1: usize) -> Result<()> {
    if x.cols() != d1 {
        return Err(invalid(format!("input has {} features, weights expect {d1}", x.cols())));
    }
    if x.rows() != mask.len() {
        return Err(invalid("input rows and mask length differ"));
    }
    Ok(())
}

/// Attention output of head `j`, before the output projection (`T x d_V`).
pub fn head_values(x: &Matrix, mask: &AttentionMaskSet, hw: &HeadWeights, d_k: usize) -> Result<Matrix> {
    let q = x.matmul(&hw.w_q)?;
    let k = x.matmul(&hw.w_k)?;
    let v = x.matmul(&hw.w_v)?;
    let logits = q.matmul_t(&k)?.scale(1.0 / (d_k as f64).sqrt());
    attention_probs(&logits, mask)?.matmul(&v)
}

pub fn mha_forward_x(x: &Matrix, mask: &AttentionMaskSet, w: &MhaWeights) -> Result<Matrix> {
    check_input(x, mask, w.d1)?;
    let mut out = Matrix::zeros(x.rows(), w.d2);
    for hw in &w.heads {
        out = out.add(&head_values(x, mask, hw, w.d_k)?.matmul(&hw.w_o)?)?;
    }
    Ok(out)
}

/// Sum over heads of `softmax(x W_Q (X W_K)^T / sqrt(d_K)) X W_V W_O`.
pub fn mha_forward(batch: &SequenceBatch, w: &MhaWeights) -> Result<Matrix> {
    mha_forward_x(&batch.x, &batch.mask, w)
}

pub fn merge_qk(w_q: &Matrix, w_k: &Matrix, d_k: usize) -> Result<Matrix> {
    if w_q.shape() != w_k.shape() || w_q.cols() != d_k {
        return Err(invalid(format!("merge_qk shapes {:?} and {:?} with d_K={d_k}", w_q.shape(), w_k.shape())));
    }
    Ok(w_q.matmul_t(w_k)?.scale(1.0 / (d_k as f64).sqrt()))
}

pub fn merge_vo(w_v: &Matrix, w_o: &Matrix) -> Result<Matrix> {
    w_v.matmul(w_o)
}

/// Per-head `(W_QK, W_VO)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergedHead {
    #[serde(rename = "W_QK")]
    pub w_qk: Matrix,
    #[serde(rename = "W_VO")]
    pub w_vo: Matrix,
}

pub fn merge_heads(w: &MhaWeights) -> Result<Vec<MergedHead>> {
    w.heads
        .iter()
        .map(|hw| Ok(MergedHead { w_qk: merge_qk(&hw.w_q, &hw.w_k, w.d_k)?, w_vo: merge_vo(&hw.w_v, &hw.w_o)? }))
        .collect()
}

/// Attention through merged weights: `softmax(x W_QK X^T) X W_VO`.
pub fn mha_forward_merged(x: &Matrix, mask: &AttentionMaskSet, merged: &[MergedHead]) -> Result<Matrix> {
    let first = merged.first().ok_or_else(|| invalid("no heads"))?;
    check_input(x, mask, first.w_qk.rows())?;
    let mut out = Matrix::zeros(x.rows(), first.w_vo.cols());
    for m in merged {
        let logits = x.matmul(&m.w_qk)?.matmul_t(x)?;
        let p = attention_probs(&logits, mask)?;
        out = out.add(&p.matmul(&x.matmul(&m.w_vo)?)?)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeedForward {
    /// `a -> a F`, `F` is `d1 x d1`.
    Linear { fc: Matrix },
    /// `a -> relu(a A) B`, `A` is `d1 x n`, `B` is `n x d1`.
    Relu { first: Matrix, second: Matrix },
}

impl FeedForward {
    pub fn apply(&self, a: &Matrix) -> Result<Matrix> {
        match self {
            FeedForward::Linear { fc } => a.matmul(fc),
            FeedForward::Relu { first, second } => a.matmul(first)?.map(|v| v.max(0.0)).matmul(second),
        }
    }

    fn dims(&self) -> (usize, usize) {
        match self {
            FeedForward::Linear { fc } => (fc.rows(), fc.cols()),
            FeedForward::Relu { first, second } => (first.rows(), second.cols()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub mha: MhaWeights,
    pub ffn: FeedForward,
}

impl BlockWeights {
    pub fn new(mha: MhaWeights, ffn: FeedForward) -> Result<Self> {
        let d1 = mha.d1();
        if mha.d2() != d1 {
            return Err(invalid(format!("block attention maps {d1} -> {}, residual needs d2 = d1", mha.d2())));
        }
        if ffn.dims() != (d1, d1) {
            return Err(invalid(format!("feed-forward dims {:?} do not match d1={d1}", ffn.dims())));
        }
        if let FeedForward::Relu { first, second } = &ffn {
            if first.cols() != second.rows() {
                return Err(invalid("feed-forward hidden widths differ"));
            }
        }
        Ok(Self { mha, ffn })
    }

    pub fn d1(&self) -> usize {
        self.mha.d1()
    }
}

pub fn block_forward_x(x: &Matrix, mask: &AttentionMaskSet, bw: &BlockWeights) -> Result<Matrix> {
    let a = mha_forward_x(x, mask, &bw.mha)?.add(x)?;
    bw.ffn.apply(&a)?.add(&a)
}

/// `F(attn(x) + x) + attn(x) + x`.
pub fn block_forward(batch: &SequenceBatch, bw: &BlockWeights) -> Result<Matrix> {
    block_forward_x(&batch.x, &batch.mask, bw)
}

/// Outputs after every block; the last entry is the transformer output.
pub fn transformer_trace(batch: &SequenceBatch, blocks: &[BlockWeights]) -> Result<Vec<Matrix>> {
    if blocks.is_empty() {
        return Err(invalid("transformer needs at least one block"));
    }
    let mut trace = Vec::with_capacity(blocks.len());
    let mut x = batch.x.clone();
    for bw in blocks {
        x = block_forward_x(&x, &batch.mask, bw)?;
        trace.push(x.clone());
    }
    Ok(trace)
}

pub fn transformer_forward(batch: &SequenceBatch, blocks: &[BlockWeights]) -> Result<Matrix> {
    Ok(transformer_trace(batch, blocks)?.pop().expect("nonempty trace"))
}

/// Largest row-wise Euclidean distance between two equally shaped outputs.
pub fn max_row_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    let d = a.sub(b)?;
    Ok((0..d.rows()).map(|i| norm2(d.row(i))).fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sample_uniform_matrix;
    use crate::rng::RngStream;

    fn random_mha(h: usize, d1: usize, d2: usize, d_k: usize, d_v: usize, seed: u64) -> MhaWeights {
        let mut rng = RngStream::new(seed);
        let heads = (0..h)
            .map(|_| HeadWeights {
                w_q: sample_uniform_matrix(d1, d_k, 1.0, &mut rng).unwrap(),
                w_k: sample_uniform_matrix(d1, d_k, 1.0, &mut rng).unwrap(),
                w_v: sample_uniform_matrix(d1, d_v, 1.0, &mut rng).unwrap(),
                w_o: sample_uniform_matrix(d_v, d2, 1.0, &mut rng).unwrap(),
            })
            .collect();
        MhaWeights::new(heads).unwrap()
    }

    #[test]
    fn softmax_uniform_and_one_hot() {
        assert_eq!(masked_softmax(&[0.3; 4], &[true; 4]).unwrap(), vec![0.25; 4]);
        let p = masked_softmax(&[5.0, -1.0, 2.0, 9.0], &[false, false, true, false]).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_partial_mask_formula() {
        let p = masked_softmax(&[1.0, 2.0, 3.0], &[true, true, false]).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - 1.0 / (1.0 + e)).abs() < 1e-15);
        assert!((p[1] - e / (1.0 + e)).abs() < 1e-15);
        assert_eq!(p[2], 0.0);
    }

    #[test]
    fn softmax_rejects_empty_mask() {
        assert!(masked_softmax(&[1.0, 2.0], &[false, false]).is_err());
        assert!(AttentionMaskSet::new(vec![vec![false]]).is_err());
    }

    #[test]
    fn zero_values_zero_output() {
        let mut w = random_mha(2, 3, 2, 4, 4, 1);
        w.for_each_matrix_mut(|_, m, mat| {
            if m == 2 {
                *mat = Matrix::zeros(mat.rows(), mat.cols());
            }
        });
        let x = sample_uniform_matrix(5, 3, 1.0, &mut RngStream::new(2)).unwrap();
        let b = SequenceBatch::new(x, AttentionMaskSet::full(5)).unwrap();
        assert!(mha_forward(&b, &w).unwrap().is_zero());
    }

    #[test]
    fn single_token_is_value_path() {
        let w = random_mha(1, 3, 2, 4, 5, 3);
        let x = sample_uniform_matrix(1, 3, 1.0, &mut RngStream::new(4)).unwrap();
        let b = SequenceBatch::new(x.clone(), AttentionMaskSet::full(1)).unwrap();
        let hw = &w.heads()[0];
        let want = x.matmul(&hw.w_v).unwrap().matmul(&hw.w_o).unwrap();
        assert_eq!(mha_forward(&b, &w).unwrap(), want);
    }

    #[test]
    fn sum_of_heads_equals_concat_then_project() {
        let w = random_mha(2, 2, 2, 3, 3, 5);
        let x = sample_uniform_matrix(3, 2, 1.0, &mut RngStream::new(6)).unwrap();
        let mask = AttentionMaskSet::full(3);
        let heads: Vec<Matrix> =
            w.heads().iter().map(|hw| head_values(&x, &mask, hw, w.d_k()).unwrap()).collect();
        let concat = Matrix::from_fn(3, 6, |i, j| heads[j / 3].get(i, j % 3));
        let w_o = w.heads()[0].w_o.vstack(&w.heads()[1].w_o).unwrap();
        let want = concat.matmul(&w_o).unwrap();
        let got = mha_forward_x(&x, &mask, &w).unwrap();
        assert!(max_norm(&got.sub(&want).unwrap()) < 1e-12);
    }

    #[test]
    fn merge_examples() {
        let i3 = Matrix::identity(3);
        let m = merge_qk(&i3, &i3, 3).unwrap();
        assert!(max_norm(&m.sub(&i3.scale(1.0 / 3f64.sqrt())).unwrap()) < 1e-15);
        assert!(merge_qk(&i3, &Matrix::zeros(3, 3), 3).unwrap().is_zero());
        assert_eq!(merge_vo(&i3, &i3).unwrap(), i3);
        assert!(merge_vo(&i3, &Matrix::zeros(3, 2)).unwrap().is_zero());
        assert!(merge_qk(&i3, &Matrix::zeros(3, 2), 3).is_err());
    }

    #[test]
    fn merged_path_matches_four_matrix_path() {
        let w = random_mha(2, 3, 2, 4, 5, 8);
        let x = sample_uniform_matrix(6, 3, 1.0, &mut RngStream::new(9)).unwrap();
        let mask = AttentionMaskSet::causal(6);
        let a = mha_forward_x(&x, &mask, &w).unwrap();
        let b = mha_forward_merged(&x, &mask, &merge_heads(&w).unwrap()).unwrap();
        assert!(max_norm(&a.sub(&b).unwrap()) < 1e-10);
    }

    #[test]
    fn block_residuals() {
        let x = sample_uniform_matrix(4, 2, 1.0, &mut RngStream::new(10)).unwrap();
        let mask = AttentionMaskSet::full(4);
        let zero = BlockWeights::new(MhaWeights::zeros(1, 2, 2, 3, 3), FeedForward::Linear { fc: Matrix::zeros(2, 2) })
            .unwrap();
        assert_eq!(block_forward_x(&x, &mask, &zero).unwrap(), x);

        let mha = random_mha(1, 2, 2, 3, 3, 11);
        let bw = BlockWeights::new(mha.clone(), FeedForward::Linear { fc: Matrix::zeros(2, 2) }).unwrap();
        let want = mha_forward_x(&x, &mask, &mha).unwrap().add(&x).unwrap();
        assert_eq!(block_forward_x(&x, &mask, &bw).unwrap(), want);
    }

    #[test]
    fn transformer_edge_cases() {
        let x = sample_uniform_matrix(3, 2, 1.0, &mut RngStream::new(12)).unwrap();
        let batch = SequenceBatch::new(x.clone(), AttentionMaskSet::full(3)).unwrap();
        assert!(transformer_forward(&batch, &[]).is_err());
        let zero = BlockWeights::new(MhaWeights::zeros(2, 2, 2, 3, 3), FeedForward::Linear { fc: Matrix::zeros(2, 2) })
            .unwrap();
        assert_eq!(transformer_forward(&batch, &vec![zero; 3]).unwrap(), x);
    }

    #[test]
    fn relu_block_requires_matching_widths() {
        let mha = MhaWeights::zeros(1, 2, 2, 2, 2);
        let ffn = FeedForward::Relu { first: Matrix::zeros(2, 4), second: Matrix::zeros(3, 2) };
        assert!(BlockWeights::new(mha, ffn).is_err());
    }

    #[test]
    fn json_roundtrip_uses_symbol_keys() {
        let w = random_mha(2, 2, 1, 3, 2, 13);
        let s = serde_json::to_string(&w).unwrap();
        assert!(s.contains("\"H\":2") && s.contains("\"d_K\":3") && s.contains("\"W_Q\""));
        let back: MhaWeights = serde_json::from_str(&s).unwrap();
        assert_eq!(back, w);
        let bad = s.replace("\"d_K\":3", "\"d_K\":4");
        assert!(serde_json::from_str::<MhaWeights>(&bad).is_err());
    }

    #[test]
    fn alpha_covers_rows_and_entries() {
        let x = Matrix::from_rows(&[vec![3.0, 4.0], vec![-6.0, 0.0]]).unwrap();
        let b = SequenceBatch::new(x.clone(), AttentionMaskSet::full(2)).unwrap();
        assert_eq!(b.alpha, 6.0);
        let small = Matrix::from_rows(&[vec![0.1, 0.0]]).unwrap();
        let c = SequenceBatch::theory_compliant(small, AttentionMaskSet::full(1), 3).unwrap();
        assert_eq!(c.alpha, 3f64.sqrt());
        assert!(b.with_alpha(1.0).is_err());
    }
}
