//! Subset-sum solver and the two-matrix mask constructions built on it.

mod factorize;
mod solver;

pub use factorize::{
    approx_linear_with_relu, approx_matrix_product, block_diagonal_mask, is_block_diagonal, reconstruct,
    relu_induced_maps, relu_net_apply, required_block_size, ceil_tight, FactorizeOptions, FactorizedMaskPair, DEFAULT_C_HAT,
};
pub use solver::{
    mask_indices, solve_subset_sum, solve_subset_sum_with, subset_error, subset_sum_value, SearchMode, SolveStatus,
    SubsetSumInstance, SubsetSumResult, MAX_ITEMS,
};
