use std::collections::HashMap;

use super::graph::{Axis, BatchNormAttrs, BnMode, ComputationGraph, NodeId, Op, ParamStore};
use super::ops;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Batch statistics of one train-mode batch-norm computation (a single node
/// or a whole group), used to update running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats<T> {
    pub node: NodeId,
    pub attrs: BatchNormAttrs,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub rows: usize,
}

/// Result of a forward pass.
#[derive(Debug, Clone)]
pub struct Values<T> {
    tensors: Vec<Option<Tensor<T>>>,
    /// Primitive evaluations performed (one per node).
    pub invocations: usize,
    pub bn_stats: Vec<BnBatchStats<T>>,
    /// Empty segments met by `max` reductions (zero-filled rather than an error).
    pub empty_max_segments: usize,
    /// First node whose value contains NaN or infinity.
    pub first_non_finite: Option<NodeId>,
}

impl<T: Real> Values<T> {
    pub fn get(&self, id: NodeId) -> &Tensor<T> {
        self.tensors[id].as_ref().expect("node value computed")
    }

    pub fn try_get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.tensors.get(id).and_then(Option::as_ref)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub(crate) fn bn_stats_for(&self, node: NodeId) -> Option<&BnBatchStats<T>> {
        self.bn_stats.iter().find(|s| s.node == node)
    }
}

pub type Feeds<T> = HashMap<NodeId, Tensor<T>>;

/// Evaluates every node in topological order. Train-mode batch-norm groups
/// are evaluated jointly at their first member; every member input must
/// precede that member.
pub fn forward<T: Real>(graph: &ComputationGraph, params: &ParamStore<T>, mut feeds: Feeds<T>) -> Result<Values<T>> {
    let n = graph.len();
    let mut values = Values {
        tensors: vec![None; n],
        invocations: 0,
        bn_stats: Vec::new(),
        empty_max_segments: 0,
        first_non_finite: None,
    };
    for id in 0..n {
        if values.tensors[id].is_some() {
            continue;
        }
        let node = graph.node(id);
        let arg = |i: usize| values.tensors[node.inputs[i]].as_ref().expect("topological order");
        let out = match &node.op {
            Op::Input => {
                let t = feeds.remove(&id).ok_or(Error::MissingInput(id))?;
                if t.shape() != node.shape {
                    return Err(Error::shape("input", &node.shape, &t.shape()));
                }
                t
            }
            Op::MatMul { weight } => ops::matmul(arg(0), params.get(*weight)),
            Op::AddBias { bias } => ops::add_bias(arg(0), params.get(*bias)),
            Op::Concat { axis } => {
                let parts: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| values.tensors[i].as_ref().unwrap()).collect();
                match axis {
                    Axis::Rows => ops::concat_rows(&parts),
                    Axis::Cols => ops::concat_cols(&parts),
                }
            }
            Op::LeakyRelu { alpha } => ops::leaky_relu(arg(0), *alpha),
            Op::SegmentReduce { kind, lengths } => {
                let (t, empty) = ops::segment_reduce(*kind, arg(0), lengths);
                values.empty_max_segments += empty;
                t
            }
            Op::BatchNorm(bn) => {
                let (gamma, beta) = (params.get(bn.gamma), params.get(bn.beta));
                match (bn.mode, bn.group) {
                    (BnMode::Infer, _) => ops::normalize(
                        arg(0),
                        params.get(bn.running_mean).row(0),
                        params.get(bn.running_var).row(0),
                        bn.eps,
                        gamma,
                        beta,
                    ),
                    (BnMode::Train, None) => {
                        let (mean, var, rows) = ops::batch_moments(&[arg(0)]);
                        let t = ops::normalize(arg(0), &mean, &var, bn.eps, gamma, beta);
                        values.bn_stats.push(BnBatchStats { node: id, attrs: *bn, mean, var, rows });
                        t
                    }
                    (BnMode::Train, Some(g)) => {
                        let members = graph.group_members(g);
                        let mut parts = Vec::with_capacity(members.len());
                        for &m in members {
                            let input = graph.node(m).inputs[0];
                            if input >= id {
                                return Err(Error::InvalidGraph(format!(
                                    "batch-norm group {g}: input of member {m} follows the first member {id}"
                                )));
                            }
                            parts.push(values.tensors[input].as_ref().unwrap());
                        }
                        let (mean, var, rows) = ops::batch_moments(&parts);
                        let outs: Vec<Tensor<T>> =
                            parts.iter().map(|x| ops::normalize(x, &mean, &var, bn.eps, gamma, beta)).collect();
                        values.bn_stats.push(BnBatchStats { node: id, attrs: *bn, mean, var, rows });
                        for (&m, t) in members.iter().zip(outs) {
                            values.invocations += 1;
                            if values.first_non_finite.is_none() && !t.is_finite() {
                                values.first_non_finite = Some(m);
                            }
                            values.tensors[m] = Some(t);
                        }
                        continue;
                    }
                }
            }
            Op::Gather { map } => {
                let parts: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| values.tensors[i].as_ref().unwrap()).collect();
                ops::gather(&parts, map)
            }
            Op::Scatter { map, extent } => ops::scatter(arg(0), map, *extent),
            Op::Mse { weights, root } => Tensor::scalar(ops::mse_loss(arg(0), arg(1), arg(2), weights, *root)),
        };
        debug_assert_eq!(out.shape(), node.shape, "node {id} ({}) shape", node.op.name());
        values.invocations += 1;
        if values.first_non_finite.is_none() && !out.is_finite() {
            values.first_non_finite = Some(id);
        }
        values.tensors[id] = Some(out);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::graph::ReduceKind;

    #[test]
    fn single_matmul_identity() {
        let mut p = ParamStore::<f64>::new();
        let w = p.add("w", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]), true);
        let mut g = ComputationGraph::for_params(&p);
        let x = g.input(2, 2);
        let y = g.matmul(x, w).unwrap();
        let v = forward(&g, &p, Feeds::from([(x, Tensor::identity(2))])).unwrap();
        assert_eq!(v.get(y).data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(v.invocations, 2);
    }

    #[test]
    fn empty_graph_gives_empty_values() {
        let p = ParamStore::<f64>::new();
        let v = forward(&ComputationGraph::for_params(&p), &p, Feeds::new()).unwrap();
        assert!(v.is_empty());
    }

    #[test]
    fn missing_input_names_node() {
        let p = ParamStore::<f64>::new();
        let mut g = ComputationGraph::for_params(&p);
        g.input(1, 1);
        let x = g.input(1, 1);
        let err = forward(&g, &p, Feeds::from([(0, Tensor::zeros(1, 1))])).unwrap_err();
        assert!(matches!(err, Error::MissingInput(id) if id == x));
    }

    #[test]
    fn independent_chains_do_not_depend_on_interleaving() {
        let mut p = ParamStore::<f64>::new();
        let w = p.add("w", Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]), true);
        let xa = Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]);
        let xb = Tensor::from_rows(&[vec![-1.0, 4.0]]);
        let chain = |g: &mut ComputationGraph, x| {
            let y = g.matmul(x, w).unwrap();
            let y = g.leaky_relu(y, 0.01).unwrap();
            g.segment_reduce(ReduceKind::Max, y, vec![g.shape(y)[0]]).unwrap()
        };
        // sequential: a then b
        let mut g1 = ComputationGraph::for_params(&p);
        let (a1, b1) = (g1.input(2, 2), g1.input(1, 2));
        let ra1 = chain(&mut g1, a1);
        let rb1 = chain(&mut g1, b1);
        // interleaved node by node
        let mut g2 = ComputationGraph::for_params(&p);
        let (b2, a2) = (g2.input(1, 2), g2.input(2, 2));
        let mb = g2.matmul(b2, w).unwrap();
        let ma = g2.matmul(a2, w).unwrap();
        let la = g2.leaky_relu(ma, 0.01).unwrap();
        let lb = g2.leaky_relu(mb, 0.01).unwrap();
        let rb2 = g2.segment_reduce(ReduceKind::Max, lb, vec![1]).unwrap();
        let ra2 = g2.segment_reduce(ReduceKind::Max, la, vec![2]).unwrap();
        let v1 = forward(&g1, &p, Feeds::from([(a1, xa.clone()), (b1, xb.clone())])).unwrap();
        let v2 = forward(&g2, &p, Feeds::from([(a2, xa), (b2, xb)])).unwrap();
        assert_eq!(v1.get(ra1), v2.get(ra2));
        assert_eq!(v1.get(rb1), v2.get(rb2));
    }

    #[test]
    fn non_finite_values_are_flagged() {
        let mut p = ParamStore::<f64>::new();
        let w = p.add("w", Tensor::from_rows(&[vec![f64::INFINITY]]), true);
        let mut g = ComputationGraph::for_params(&p);
        let x = g.input(1, 1);
        let y = g.matmul(x, w).unwrap();
        let v = forward(&g, &p, Feeds::from([(x, Tensor::scalar(1.0))])).unwrap();
        assert_eq!(v.first_non_finite, Some(y));
    }
}
