mod block;
mod bounds;
mod mha;

pub use block::*;
pub use bounds::*;
pub use mha::*;
