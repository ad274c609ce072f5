//! Measurement tools: analytical FLOPs, adjacent-step feature similarity,
//! and the ablation harnesses.

mod ablation;
mod flops;
mod similarity;

pub use ablation::*;
pub use flops::*;
pub use similarity::*;
