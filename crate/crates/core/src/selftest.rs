//! Quick invariant checks behind the `selftest` subcommand.

use crate::attention::{masked_softmax, AttentionMaskSet};
use crate::construct::softmax_perturbation_bound;
use crate::error::Result;
use crate::linalg::{max_norm, sample_uniform_matrix, Matrix};
use crate::popup::{init_scored, popup_datasets, popup_step, topk_count, PopupConfig};
use crate::rng::RngStream;
use crate::subset_sum::{
    approx_matrix_product, is_block_diagonal, reconstruct, solve_subset_sum_with, subset_error, SearchMode,
    FactorizeOptions, SubsetSumInstance,
};
use crate::train::{gen_dataset, init_regressor, regressor_gradients, regressor_loss, AngularSample, TrainConfig};

pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn brute_min(items: &[f64], target: f64) -> f64 {
    (0u64..1 << items.len()).map(|m| subset_error(items, m, target)).fold(f64::INFINITY, f64::min)
}

fn solver_oracle() -> Result<Check> {
    let mut rng = RngStream::new(101);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let n = 1 + rng.below(12);
        let items: Vec<f64> = (0..n).map(|_| rng.symmetric(1.0)).collect();
        let target = rng.symmetric(2.0);
        let r = solve_subset_sum_with(&SubsetSumInstance::new(items.clone(), target, 0.0)?, SearchMode::Optimal)?;
        worst = worst.max((r.achieved_error - brute_min(&items, target)).abs());
    }
    Ok(Check { name: "subset-sum optimum equals enumeration", passed: worst == 0.0, detail: format!("max gap {worst:e}") })
}

fn reconstruction() -> Result<Check> {
    let mut ok = true;
    for s in 0..20 {
        let mut r = RngStream::new(s);
        let w = sample_uniform_matrix(2, 2, 1.0, &mut r)?;
        let w1 = sample_uniform_matrix(24, 2, 1.0, &mut r)?;
        let w2 = sample_uniform_matrix(2, 24, 1.0, &mut r)?;
        let p = approx_matrix_product(&w, &w1, &w2, 0.01, &FactorizeOptions::default())?;
        let again = max_norm(&w.sub(&reconstruct(&w1, &w2, &p.m1, &p.m2)?)?);
        ok &= again == p.achieved_max_err && is_block_diagonal(&p.m1);
    }
    Ok(Check { name: "mask reconstruction and block structure", passed: ok, detail: "20 seeds".into() })
}

fn softmax_audit() -> Result<Check> {
    let mut rng = RngStream::new(202);
    let mut violations = 0;
    for _ in 0..200 {
        let t = 2 + rng.below(6);
        let d1 = 1 + rng.below(3);
        let x = sample_uniform_matrix(t, d1, 1.0, &mut rng)?;
        let alpha = max_norm(&x).max(1e-12);
        let eps = rng.uniform(0.0, 0.5);
        let l = sample_uniform_matrix(1, t, 3.0, &mut rng)?;
        let lp = Matrix::from_fn(1, t, |_, j| l.get(0, j) + rng.symmetric(eps));
        let mask = AttentionMaskSet::full(t);
        let p = masked_softmax(l.row(0), mask.row(0))?;
        let q = masked_softmax(lp.row(0), mask.row(0))?;
        let diff: Vec<f64> = (0..d1).map(|c| (0..t).map(|j| (p[j] - q[j]) * x.get(j, c)).sum()).collect();
        if crate::linalg::norm2(&diff) > softmax_perturbation_bound(eps, d1, alpha) + 1e-9 {
            violations += 1;
        }
    }
    Ok(Check { name: "softmax perturbation bound", passed: violations == 0, detail: format!("{violations} violations") })
}

fn gradient_check() -> Result<Check> {
    let cfg = TrainConfig { h: 2, d_k: 3, d_v: 2, ..TrainConfig::default() };
    let mut worst = 0.0_f64;
    for s in 0..5 {
        let reg = init_regressor(&cfg, &RngStream::new(s))?;
        let reg = reg.with_flat(&reg.to_flat().iter().map(|v| v * 0.5 + 0.05).collect::<Vec<_>>())?;
        let data = gen_dataset(3, &[3, 5], &mut RngStream::new(100 + s))?;
        let batch: Vec<&AngularSample> = data.iter().collect();
        let (_, g) = regressor_gradients(&batch, &reg)?;
        let base = reg.to_flat();
        for (i, gi) in g.to_flat().into_iter().enumerate() {
            let mut up = base.clone();
            let mut down = base.clone();
            up[i] += 1e-5;
            down[i] -= 1e-5;
            let fd = (regressor_loss(&batch, &reg.with_flat(&up)?)? - regressor_loss(&batch, &reg.with_flat(&down)?)?) / 2e-5;
            worst = worst.max((fd - gi).abs() / fd.abs().max(gi.abs()).max(1e-6));
        }
    }
    Ok(Check { name: "regressor gradients vs finite differences", passed: worst < 1e-4, detail: format!("max rel err {worst:e}") })
}

fn popup_invariants() -> Result<Check> {
    let cfg = PopupConfig { n_k: 8, n_v: 6, n_train: 16, n_val: 4, t_choices: vec![3], ..PopupConfig::default() };
    let mut sw = init_scored(1.5, &cfg, &RngStream::new(3))?;
    let frozen = sw.weights.clone();
    let (train, _) = popup_datasets(&cfg, &RngStream::new(4))?;
    let batch: Vec<&AngularSample> = train.iter().collect();
    let mut ok = true;
    for _ in 0..5 {
        popup_step(&mut sw, &batch, 0.3)?;
        for (hm, hw) in sw.mask()?.heads.iter().zip(sw.scores.heads()) {
            for (m, s) in [&hm.m_q, &hm.m_k, &hm.m_v, &hm.m_o].into_iter().zip(hw.matrices()) {
                ok &= m.count_nonzero() == topk_count(s.rows() * s.cols(), cfg.k_percent);
            }
        }
    }
    ok &= sw.weights == frozen;
    Ok(Check { name: "edge-popup frozen weights and exact sparsity", passed: ok, detail: "5 steps".into() })
}

pub fn run_selftest() -> Result<Vec<Check>> {
    Ok(vec![solver_oracle()?, reconstruction()?, softmax_audit()?, gradient_check()?, popup_invariants()?])
}
