//! Exact subset-sum approximation by meet-in-the-middle.
//!
//! Items are split into a low half and a high half. Each half's subset sums are
//! generated already sorted (Horowitz-Sahni merging), then a two-pointer sweep
//! pairs every low sum with its nearest high sums.
//!
//! Half sums carry rounding from a different summation order than the canonical
//! one (ascending item index). Every pair within a small slack of the best
//! approximate error is kept and the winner is decided on the canonical error, so
//! the result matches exhaustive enumeration exactly.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const MAX_ITEMS: usize = 44;
const CANDIDATE_SOFT_CAP: usize = 512;
const CANDIDATE_KEEP: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    /// Stop at the first subset (in search order) within tolerance when tolerance > 0.
    #[default]
    FirstWithinTolerance,
    /// Always return the minimum-error subset.
    Optimal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetSumInstance {
    pub items: Vec<f64>,
    pub target: f64,
    pub tolerance: f64,
}

impl SubsetSumInstance {
    pub fn new(items: Vec<f64>, target: f64, tolerance: f64) -> Result<Self> {
        let inst = Self { items, target, tolerance };
        inst.validate()?;
        Ok(inst)
    }

    fn validate(&self) -> Result<()> {
        if self.items.is_empty() {
            return Err(invalid("subset-sum instance has no items"));
        }
        if self.items.len() > MAX_ITEMS {
            return Err(invalid(format!(
                "{} items exceed the meet-in-the-middle cap of {MAX_ITEMS}; split the instance",
                self.items.len()
            )));
        }
        if !(self.tolerance >= 0.0) {
            return Err(invalid("tolerance must be non-negative"));
        }
        if !self.target.is_finite() || self.items.iter().any(|v| !v.is_finite()) {
            return Err(invalid("subset-sum values must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Hit,
    BestEffort,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetSumResult {
    /// Bit `i` set iff item `i` is chosen.
    pub chosen: u64,
    pub achieved_error: f64,
    pub status: SolveStatus,
}

impl SubsetSumResult {
    pub fn indices(&self) -> Vec<usize> {
        mask_indices(self.chosen)
    }

    pub fn is_hit(&self) -> bool {
        self.status == SolveStatus::Hit
    }
}

pub fn mask_indices(mask: u64) -> Vec<usize> {
    (0..64).filter(|i| mask >> i & 1 == 1).collect()
}

/// Sum of the chosen items, accumulated in ascending index order from `0.0`.
pub fn subset_sum_value(items: &[f64], mask: u64) -> f64 {
    items.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).fold(0.0, |s, (_, &v)| s + v)
}

pub fn subset_error(items: &[f64], mask: u64, target: f64) -> f64 {
    (target - subset_sum_value(items, mask)).abs()
}

struct HalfSums {
    sums: Vec<f64>,
    masks: Vec<u32>,
}

fn better_tie(a: u32, b: u32) -> bool {
    (a.count_ones(), a) < (b.count_ones(), b)
}

// Sorted, deduplicated subset sums of `items`; equal sums keep the
// (cardinality, mask)-smallest subset.
fn half_sums(items: &[f64]) -> HalfSums {
    let mut sums = vec![0.0];
    let mut masks = vec![0u32];
    for (i, &x) in items.iter().enumerate() {
        let bit = 1u32 << i;
        let n = sums.len();
        let mut out_s = Vec::with_capacity(2 * n);
        let mut out_m = Vec::with_capacity(2 * n);
        let (mut a, mut b) = (0, 0);
        let push = |s: f64, m: u32, out_s: &mut Vec<f64>, out_m: &mut Vec<u32>| {
            if let Some(&last) = out_s.last() {
                if last == s {
                    let lm = out_m.last_mut().expect("paired");
                    if better_tie(m, *lm) {
                        *lm = m;
                    }
                    return;
                }
            }
            out_s.push(s);
            out_m.push(m);
        };
        while a < n || b < n {
            let take_a = b == n || (a < n && sums[a] <= sums[b] + x);
            if take_a {
                push(sums[a], masks[a], &mut out_s, &mut out_m);
                a += 1;
            } else {
                push(sums[b] + x, masks[b] | bit, &mut out_s, &mut out_m);
                b += 1;
            }
        }
        sums = out_s;
        masks = out_m;
    }
    HalfSums { sums, masks }
}

struct Search<'a> {
    items: &'a [f64],
    target: f64,
    slack: f64,
    best_approx: f64,
    candidates: Vec<(f64, u64)>,
    early: Option<f64>,
}

impl Search<'_> {
    // Returns a mask when early exit is triggered.
    fn consider(&mut self, approx: f64, mask: u64) -> Option<u64> {
        if let Some(tol) = self.early {
            if approx <= tol + self.slack && subset_error(self.items, mask, self.target) <= tol {
                return Some(mask);
            }
        }
        if approx > self.best_approx + self.slack {
            return None;
        }
        if approx < self.best_approx {
            self.best_approx = approx;
        }
        self.candidates.push((approx, mask));
        if self.candidates.len() > CANDIDATE_SOFT_CAP {
            let cut = self.best_approx + self.slack;
            self.candidates.retain(|c| c.0 <= cut);
            if self.candidates.len() > CANDIDATE_SOFT_CAP {
                self.candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                self.candidates.truncate(CANDIDATE_KEEP);
            }
        }
        None
    }

    fn within(&self, approx: f64) -> bool {
        approx <= self.best_approx + self.slack || self.early.is_some_and(|t| approx <= t + self.slack)
    }
}

/// Minimum-error subset with early exit on the first subset within tolerance
/// when `tolerance > 0`.
pub fn solve_subset_sum(inst: &SubsetSumInstance) -> Result<SubsetSumResult> {
    solve_subset_sum_with(inst, SearchMode::FirstWithinTolerance)
}

/// Ties on the canonical error are broken by fewest items, then by the smallest
/// bitmask value.
pub fn solve_subset_sum_with(inst: &SubsetSumInstance, mode: SearchMode) -> Result<SubsetSumResult> {
    inst.validate()?;
    let items = &inst.items;
    let n = items.len();
    let k = n / 2;
    let lo = half_sums(&items[..k]);
    let hi = half_sums(&items[k..]);
    let scale = items.iter().map(|v| v.abs()).sum::<f64>() + inst.target.abs();
    let early = (mode == SearchMode::FirstWithinTolerance && inst.tolerance > 0.0).then_some(inst.tolerance);
    let mut s = Search {
        items,
        target: inst.target,
        slack: 4.0 * (n as f64 + 2.0) * f64::EPSILON * scale,
        best_approx: f64::INFINITY,
        candidates: Vec::new(),
        early,
    };

    let m = hi.sums.len();
    // j is the number of high sums <= need; need decreases as i increases.
    let mut j = m;
    for i in 0..lo.sums.len() {
        let need = inst.target - lo.sums[i];
        while j > 0 && hi.sums[j - 1] > need {
            j -= 1;
        }
        let base = u64::from(lo.masks[i]);
        let mut d = j;
        while d > 0 {
            d -= 1;
            let approx = need - hi.sums[d];
            if !s.within(approx) {
                break;
            }
            if let Some(mask) = s.consider(approx, base | u64::from(hi.masks[d]) << k) {
                return Ok(finish(inst, mask));
            }
        }
        for u in j..m {
            let approx = hi.sums[u] - need;
            if !s.within(approx) {
                break;
            }
            if let Some(mask) = s.consider(approx, base | u64::from(hi.masks[u]) << k) {
                return Ok(finish(inst, mask));
            }
        }
    }

    let cut = s.best_approx + s.slack;
    let best = s
        .candidates
        .iter()
        .filter(|c| c.0 <= cut)
        .map(|&(_, mask)| (subset_error(items, mask, inst.target), mask.count_ones(), mask))
        .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
        .expect("the empty subset is always a candidate");
    Ok(finish(inst, best.2))
}

fn finish(inst: &SubsetSumInstance, mask: u64) -> SubsetSumResult {
    let achieved_error = subset_error(&inst.items, mask, inst.target);
    let status = if achieved_error <= inst.tolerance { SolveStatus::Hit } else { SolveStatus::BestEffort };
    SubsetSumResult { chosen: mask, achieved_error, status }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn brute(items: &[f64], target: f64) -> (f64, u32, u64) {
        (0u64..1 << items.len())
            .map(|m| (subset_error(items, m, target), m.count_ones(), m))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
            .unwrap()
    }

    #[test]
    fn two_items_exact() {
        let inst = SubsetSumInstance::new(vec![0.5, -0.25], 0.25, 0.0).unwrap();
        let r = solve_subset_sum(&inst).unwrap();
        assert_eq!(r.indices(), vec![0, 1]);
        assert_eq!(r.achieved_error, 0.0);
        assert!(r.is_hit());
    }

    #[test]
    fn zero_target_gives_empty_subset() {
        let inst = SubsetSumInstance::new(vec![0.3, -0.3, 0.7], 0.0, 0.0).unwrap();
        let r = solve_subset_sum(&inst).unwrap();
        assert_eq!(r.chosen, 0);
        assert_eq!(r.achieved_error, 0.0);
    }

    #[test]
    fn twelve_items_match_enumeration() {
        let mut rng = RngStream::new(11);
        let items: Vec<f64> = (0..12).map(|_| rng.symmetric(1.0)).collect();
        let inst = SubsetSumInstance::new(items.clone(), 0.37, 0.0).unwrap();
        let r = solve_subset_sum(&inst).unwrap();
        let (err, _, mask) = brute(&items, 0.37);
        assert_eq!(r.achieved_error, err);
        assert_eq!(r.chosen, mask);
    }

    #[test]
    fn ties_prefer_fewer_items_then_smaller_mask() {
        // {0} and {1, 2} both sum to 1; {1, 3} also sums to 1.
        let inst = SubsetSumInstance::new(vec![1.0, 0.5, 0.5, 0.5], 1.0, 0.0).unwrap();
        assert_eq!(solve_subset_sum(&inst).unwrap().chosen, 0b0001);
        let inst = SubsetSumInstance::new(vec![0.5, 0.5, 0.5], 1.0, 0.0).unwrap();
        assert_eq!(solve_subset_sum(&inst).unwrap().chosen, 0b011);
    }

    #[test]
    fn early_exit_respects_tolerance() {
        let mut rng = RngStream::new(2);
        let items: Vec<f64> = (0..20).map(|_| rng.symmetric(1.0)).collect();
        let inst = SubsetSumInstance::new(items.clone(), 0.3, 0.05).unwrap();
        let r = solve_subset_sum(&inst).unwrap();
        assert!(r.is_hit());
        assert_eq!(r.achieved_error, subset_error(&items, r.chosen, 0.3));
        let opt = solve_subset_sum_with(&inst, SearchMode::Optimal).unwrap();
        assert!(opt.achieved_error <= r.achieved_error);
    }

    #[test]
    fn unreachable_target_is_best_effort() {
        let inst = SubsetSumInstance::new(vec![0.1, 0.2], 5.0, 0.01).unwrap();
        let r = solve_subset_sum(&inst).unwrap();
        assert_eq!(r.status, SolveStatus::BestEffort);
        assert_eq!(r.chosen, 0b11);
    }

    #[test]
    fn rejects_bad_instances() {
        assert!(SubsetSumInstance::new(vec![], 0.0, 0.0).is_err());
        assert!(SubsetSumInstance::new(vec![0.0; 45], 0.0, 0.0).is_err());
        assert!(SubsetSumInstance::new(vec![1.0], 0.0, -1.0).is_err());
    }

    #[test]
    fn large_instance_is_accurate() {
        let mut rng = RngStream::new(4);
        let items: Vec<f64> = (0..40).map(|_| rng.symmetric(1.0)).collect();
        let inst = SubsetSumInstance::new(items, 0.123, 0.0).unwrap();
        let r = solve_subset_sum(&inst).unwrap();
        assert!(r.achieved_error < 1e-8, "{}", r.achieved_error);
    }
}
