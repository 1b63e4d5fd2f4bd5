//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};

use super::backward::backward;
use super::forward::{forward, Feeds};
use super::graph::{Axis, BatchNormAttrs, BnMode, ComputationGraph, NodeId, ParamStore, ReduceKind, RowRef};
use super::tensor::Tensor;
use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Magnitude below which relative error is measured against this floor.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// A scalar-loss graph with everything needed to evaluate it.
pub struct Trial {
    pub graph: ComputationGraph,
    pub params: ParamStore<f64>,
    pub feeds: Feeds<f64>,
    pub loss: NodeId,
    /// Input nodes whose adjoints are checked along with every trainable parameter.
    pub wrt_inputs: Vec<NodeId>,
}

impl Trial {
    fn loss_at(&self, params: &ParamStore<f64>, feeds: Feeds<f64>) -> Result<f64> {
        Ok(forward(&self.graph, params, feeds)?.get(self.loss).item())
    }

    /// Compares analytic gradients of all trainable parameters and the chosen
    /// inputs against central differences with step [`FD_STEP`].
    pub fn check(&self) -> Result<GradCheck> {
        let values = forward(&self.graph, &self.params, self.feeds.clone())?;
        let grads = backward(&self.graph, &self.params, &values, self.loss)?;
        let mut report = GradCheck::default();
        let mut record = |a: f64, n: f64| {
            report.max_rel_error = report.max_rel_error.max(rel_error(a, n));
            report.checked += 1;
        };
        for id in 0..self.params.len() {
            if !self.params.entry(id).trainable {
                continue;
            }
            for i in 0..self.params.get(id).data().len() {
                let mut plus = self.params.clone();
                plus.get_mut(id).data_mut()[i] += FD_STEP;
                let mut minus = self.params.clone();
                minus.get_mut(id).data_mut()[i] -= FD_STEP;
                let n = (self.loss_at(&plus, self.feeds.clone())? - self.loss_at(&minus, self.feeds.clone())?)
                    / (2.0 * FD_STEP);
                record(grads.params[id].data()[i], n);
            }
        }
        for &input in &self.wrt_inputs {
            let analytic = grads.nodes[input].clone().unwrap_or_else(|| {
                let s = self.graph.shape(input);
                Tensor::zeros(s[0], s[1])
            });
            for i in 0..analytic.data().len() {
                let mut plus = self.feeds.clone();
                plus.get_mut(&input).unwrap().data_mut()[i] += FD_STEP;
                let mut minus = self.feeds.clone();
                minus.get_mut(&input).unwrap().data_mut()[i] -= FD_STEP;
                let n = (self.loss_at(&self.params, plus)? - self.loss_at(&self.params, minus)?) / (2.0 * FD_STEP);
                record(analytic.data()[i], n);
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    AddBias,
    ConcatRows,
    ConcatCols,
    LeakyRelu,
    SegmentMax,
    SegmentSum,
    SegmentAvg,
    BatchNormTrain,
    BatchNormGroup,
    BatchNormInfer,
    Gather,
    Scatter,
    Mse,
    RootMse,
}

impl Primitive {
    pub const ALL: [Primitive; 15] = [
        Primitive::MatMul,
        Primitive::AddBias,
        Primitive::ConcatRows,
        Primitive::ConcatCols,
        Primitive::LeakyRelu,
        Primitive::SegmentMax,
        Primitive::SegmentSum,
        Primitive::SegmentAvg,
        Primitive::BatchNormTrain,
        Primitive::BatchNormGroup,
        Primitive::BatchNormInfer,
        Primitive::Gather,
        Primitive::Scatter,
        Primitive::Mse,
        Primitive::RootMse,
    ];
}

fn normal_tensor<R: RngCore>(rng: &mut R, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
}

/// Values kept at least `gap` away from zero so a kink is never straddled.
fn away_from_zero<R: RngCore>(rng: &mut R, rows: usize, cols: usize, gap: f64) -> Tensor<f64> {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v.signum() * (v.abs() + gap)
        })
        .collect();
    Tensor::from_vec(rows, cols, data)
}

/// Rows whose per-segment, per-column maxima are separated from the runner-up.
fn distinct_segments<R: RngCore>(rng: &mut R, lengths: &[usize], cols: usize, gap: f64) -> Tensor<f64> {
    let rows: usize = lengths.iter().sum();
    let mut t = normal_tensor(rng, rows, cols);
    let mut start = 0;
    for &len in lengths {
        for c in 0..cols {
            // spread values on a shuffled ladder with spacing `gap`
            let base: f64 = StandardNormal.sample(rng);
            let mut order: Vec<usize> = (0..len).collect();
            for i in (1..len).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            for (k, &r) in order.iter().enumerate() {
                let jitter: f64 = rng.random_range(0.0..gap * 0.25);
                t.set(start + r, c, base + k as f64 * gap + jitter);
            }
        }
        start += len;
    }
    t
}

fn bn_params<R: RngCore>(rng: &mut R, p: &mut ParamStore<f64>, cols: usize) -> [usize; 4] {
    let gamma = p.add("gamma", normal_tensor(rng, 1, cols), true);
    let beta = p.add("beta", normal_tensor(rng, 1, cols), true);
    let mean = p.add("mean", normal_tensor(rng, 1, cols), false);
    let var_data = (0..cols).map(|_| rng.random_range(0.5..2.0)).collect();
    let var = p.add("var", Tensor::from_vec(1, cols, var_data), false);
    [gamma, beta, mean, var]
}

/// Builds `mse(prim(..), target)` over random small shapes.
pub fn primitive_trial<R: RngCore>(prim: Primitive, rng: &mut R) -> Trial {
    let mut params = ParamStore::new();
    let rows = rng.random_range(2..5);
    let cols = rng.random_range(1..4);
    let mut feeds = Feeds::new();
    let mut graph;
    let mut wrt = Vec::new();
    let out = match prim {
        Primitive::MatMul => {
            let out_cols = rng.random_range(1..4);
            let w = params.add("w", normal_tensor(rng, cols, out_cols), true);
            graph = ComputationGraph::for_params(&params);
            let x = graph.input(rows, cols);
            feeds.insert(x, normal_tensor(rng, rows, cols));
            wrt.push(x);
            graph.matmul(x, w).unwrap()
        }
        Primitive::AddBias => {
            let b = params.add("b", normal_tensor(rng, 1, cols), true);
            graph = ComputationGraph::for_params(&params);
            let x = graph.input(rows, cols);
            feeds.insert(x, normal_tensor(rng, rows, cols));
            wrt.push(x);
            graph.add_bias(x, b).unwrap()
        }
        Primitive::ConcatRows | Primitive::ConcatCols => {
            graph = ComputationGraph::for_params(&params);
            let (axis, a_shape, b_shape) = if prim == Primitive::ConcatRows {
                (Axis::Rows, [rows, cols], [rng.random_range(1..4), cols])
            } else {
                (Axis::Cols, [rows, cols], [rows, rng.random_range(1..4)])
            };
            let a = graph.input(a_shape[0], a_shape[1]);
            let b = graph.input(b_shape[0], b_shape[1]);
            feeds.insert(a, normal_tensor(rng, a_shape[0], a_shape[1]));
            feeds.insert(b, normal_tensor(rng, b_shape[0], b_shape[1]));
            wrt.extend([a, b]);
            graph.concat(axis, &[a, b, a]).unwrap()
        }
        Primitive::LeakyRelu => {
            graph = ComputationGraph::for_params(&params);
            let x = graph.input(rows, cols);
            feeds.insert(x, away_from_zero(rng, rows, cols, 1e-3));
            wrt.push(x);
            graph.leaky_relu(x, 0.01).unwrap()
        }
        Primitive::SegmentMax | Primitive::SegmentSum | Primitive::SegmentAvg => {
            let kind = match prim {
                Primitive::SegmentMax => ReduceKind::Max,
                Primitive::SegmentSum => ReduceKind::Sum,
                _ => ReduceKind::Avg,
            };
            let mut lengths: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0..4)).collect();
            lengths[0] = lengths[0].max(1);
            let total: usize = lengths.iter().sum();
            graph = ComputationGraph::for_params(&params);
            let x = graph.input(total, cols);
            feeds.insert(x, distinct_segments(rng, &lengths, cols, 1e-2));
            wrt.push(x);
            graph.segment_reduce(kind, x, lengths).unwrap()
        }
        Primitive::BatchNormTrain | Primitive::BatchNormInfer => {
            let [gamma, beta, running_mean, running_var] = bn_params(rng, &mut params, cols);
            let mode = if prim == Primitive::BatchNormTrain { BnMode::Train } else { BnMode::Infer };
            graph = ComputationGraph::for_params(&params);
            let x = graph.input(rows + 1, cols);
            feeds.insert(x, normal_tensor(rng, rows + 1, cols));
            wrt.push(x);
            let attrs = BatchNormAttrs { gamma, beta, running_mean, running_var, mode, eps: 1e-5, group: None };
            graph.batch_norm(x, attrs).unwrap()
        }
        Primitive::BatchNormGroup => {
            let [gamma, beta, running_mean, running_var] = bn_params(rng, &mut params, cols);
            graph = ComputationGraph::for_params(&params);
            let attrs =
                BatchNormAttrs { gamma, beta, running_mean, running_var, mode: BnMode::Train, eps: 1e-5, group: Some(0) };
            let members: Vec<NodeId> = (0..3)
                .map(|_| {
                    let r = rng.random_range(1..3);
                    let x = graph.input(r, cols);
                    feeds.insert(x, normal_tensor(rng, r, cols));
                    wrt.push(x);
                    x
                })
                .collect();
            let outs: Vec<NodeId> = members.iter().map(|&x| graph.batch_norm(x, attrs).unwrap()).collect();
            graph.concat(Axis::Rows, &outs).unwrap()
        }
        Primitive::Gather => {
            graph = ComputationGraph::for_params(&params);
            let a = graph.input(rows, cols);
            let b = graph.input(2, cols);
            feeds.insert(a, normal_tensor(rng, rows, cols));
            feeds.insert(b, normal_tensor(rng, 2, cols));
            wrt.extend([a, b]);
            // repeats allowed: adjoints accumulate
            let map = (0..rng.random_range(1..6))
                .map(|_| {
                    let input = rng.random_range(0..2);
                    let row = rng.random_range(0..if input == 0 { rows } else { 2 });
                    RowRef { input, row }
                })
                .collect();
            graph.gather(&[a, b], map).unwrap()
        }
        Primitive::Scatter => {
            graph = ComputationGraph::for_params(&params);
            let x = graph.input(rows, cols);
            feeds.insert(x, normal_tensor(rng, rows, cols));
            wrt.push(x);
            let extent = rows + rng.random_range(0..3);
            let mut slots: Vec<usize> = (0..extent).collect();
            for i in (1..extent).rev() {
                slots.swap(i, rng.random_range(0..=i));
            }
            slots.truncate(rows);
            graph.scatter(x, slots, extent).unwrap()
        }
        Primitive::Mse | Primitive::RootMse => {
            graph = ComputationGraph::for_params(&params);
            let p = graph.input(rows, cols);
            let t = graph.input(rows, cols);
            let m = graph.input(rows, cols);
            feeds.insert(p, normal_tensor(rng, rows, cols));
            feeds.insert(t, normal_tensor(rng, rows, cols));
            let mut mask: Vec<f64> = (0..rows * cols).map(|_| f64::from(rng.random_bool(0.7) as u8)).collect();
            mask[0] = 1.0;
            feeds.insert(m, Tensor::from_vec(rows, cols, mask));
            wrt.extend([p, t]);
            let weights = (0..cols).map(|_| rng.random_range(0.5..2.0)).collect();
            let loss = graph.mse(p, t, m, weights, prim == Primitive::RootMse).unwrap();
            return Trial { graph, params, feeds, loss, wrt_inputs: wrt };
        }
    };
    let shape = graph.shape(out);
    let target = graph.input(shape[0], shape[1]);
    let mask = graph.input(shape[0], shape[1]);
    feeds.insert(target, normal_tensor(rng, shape[0], shape[1]));
    feeds.insert(mask, Tensor::from_vec(shape[0], shape[1], vec![1.0; shape[0] * shape[1]]));
    let loss = graph.mse(out, target, mask, vec![1.0; shape[1]], false).unwrap();
    Trial { graph, params, feeds, loss, wrt_inputs: wrt }
}
