//! Dense 2-D tensors, a computation-graph builder, forward and reverse
//! passes, the Adam optimizer and the checkpoint archive.
//!
//! Values are generic over [`Real`]: `f64` for oracle and test runs, `f32` for
//! fast training.

mod adam;
mod backward;
mod checkpoint;
mod forward;
pub mod gradcheck;
mod graph;
pub mod ops;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use backward::{backward, Gradients};
pub use checkpoint::{Archive, ArchiveEntry, EntryData, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use forward::{forward, BnBatchStats, Feeds, Values};
pub use graph::{
    Axis, BatchNormAttrs, BnMode, ComputationGraph, GraphNode, NodeId, Op, Param, ParamId, ParamStore, ReduceKind,
    RowRef,
};
pub use tensor::{DType, Real, Tensor};

/// Batch-norm running-statistics momentum: `running = m·running + (1 − m)·batch`.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

/// Folds batch statistics from a train-mode pass into the running statistics.
pub fn update_running_stats<T: Real>(params: &mut ParamStore<T>, stats: &[BnBatchStats<T>], momentum: f64) {
    let m = T::of(momentum);
    let one = T::one();
    for s in stats {
        for (pid, batch) in [(s.attrs.running_mean, &s.mean), (s.attrs.running_var, &s.var)] {
            for (r, &b) in params.get_mut(pid).data_mut().iter_mut().zip(batch) {
                *r = m * *r + (one - m) * b;
            }
        }
    }
}

/// Glorot-uniform initial weights: uniform in ±√(6 / (fan_in + fan_out)).
pub fn glorot_uniform<T: Real, R: rand::Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| T::of(rng.random_range(-limit..=limit))).collect();
    Tensor::from_vec(fan_in, fan_out, data)
}
