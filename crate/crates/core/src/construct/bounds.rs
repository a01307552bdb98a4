//! Closed-form perturbation bounds used by the error budgets.

/// `sqrt(d1) alpha (exp(2 eps_max) - 1)`: how far `softmax(l) X` can move when
/// every logit moves by at most `eps_max` and `|x_kj| <= alpha`.
pub fn softmax_perturbation_bound(eps_max: f64, d1: usize, alpha: f64) -> f64 {
    (d1 as f64).sqrt() * alpha * (2.0 * eps_max).exp_m1()
}

/// Linearized form `4 sqrt(d1) alpha eps_max`, valid for `eps_max <= 1/2`.
pub fn softmax_perturbation_bound_linear(eps_max: f64, d1: usize, alpha: f64) -> f64 {
    4.0 * (d1 as f64).sqrt() * alpha * eps_max
}

/// Logit deviation implied by a max-entry error `qk_err` on `W_QK`.
pub fn logit_perturbation_bound(qk_err: f64, d1: usize, alpha: f64) -> f64 {
    alpha * alpha * d1 as f64 * qk_err
}

/// `H sqrt(d1) (alpha (exp(4 alpha eps_max) - 1) + eps_max)`: output change of a
/// compliant attention layer when each input row moves by at most `eps_max`.
pub fn propagation_bound_attn(eps_max: f64, h: usize, d1: usize, alpha: f64) -> f64 {
    h as f64 * (d1 as f64).sqrt() * (alpha * (4.0 * alpha * eps_max).exp_m1() + eps_max)
}

/// Block version as derived step by step:
/// `2 H sqrt(d1) (alpha (exp(4 alpha eps_max) - 1) + 2 eps_max)`.
pub fn propagation_bound_block(eps_max: f64, h: usize, d1: usize, alpha: f64) -> f64 {
    2.0 * h as f64 * (d1 as f64).sqrt() * (alpha * (4.0 * alpha * eps_max).exp_m1() + 2.0 * eps_max)
}

/// Block version without the leading factor 2, as it is usually quoted.
pub fn propagation_bound_block_short(eps_max: f64, h: usize, d1: usize, alpha: f64) -> f64 {
    h as f64 * (d1 as f64).sqrt() * (alpha * (4.0 * alpha * eps_max).exp_m1() + 2.0 * eps_max)
}
