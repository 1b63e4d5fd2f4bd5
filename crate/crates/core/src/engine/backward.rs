use super::forward::Values;
use super::graph::{Axis, BnMode, ComputationGraph, NodeId, Op, ParamStore};
use super::ops;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    /// One entry per parameter; zero where the loss does not reach.
    pub params: Vec<Tensor<T>>,
    /// Adjoint of every node reached from the loss.
    pub nodes: Vec<Option<Tensor<T>>>,
}

fn accumulate<T: Real>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Reverse-mode sweep from a scalar `loss` node.
pub fn backward<T: Real>(
    graph: &ComputationGraph,
    params: &ParamStore<T>,
    values: &Values<T>,
    loss: NodeId,
) -> Result<Gradients<T>> {
    let shape = graph.shape(loss);
    if shape != [1, 1] {
        return Err(Error::NonScalarLoss { node: loss, shape: shape.to_vec() });
    }
    check_group_order(graph)?;
    let mut pgrads = params.zeros_like();
    let mut adj: Vec<Option<Tensor<T>>> = vec![None; graph.len()];
    adj[loss] = Some(Tensor::scalar(T::one()));

    for id in (0..=loss).rev() {
        let node = graph.node(id);
        let grouped = match &node.op {
            Op::BatchNorm(bn) if bn.mode == BnMode::Train => bn.group,
            _ => None,
        };
        if let Some(g) = grouped {
            let members = graph.group_members(g);
            // the whole group is differentiated once, at its last member
            if members.last() != Some(&id) || members.iter().all(|&m| adj[m].is_none()) {
                continue;
            }
            let Op::BatchNorm(bn) = &node.op else { unreachable!() };
            let first = members[0];
            let stats = values
                .bn_stats_for(first)
                .ok_or_else(|| Error::InvalidGraph(format!("no batch statistics for group {g}")))?;
            let xs: Vec<&Tensor<T>> = members.iter().map(|&m| values.get(graph.node(m).inputs[0])).collect();
            let dys: Vec<Tensor<T>> = members
                .iter()
                .zip(&xs)
                .map(|(&m, x)| adj[m].clone().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols())))
                .collect();
            let (dxs, dgamma, dbeta) =
                ops::batch_norm_train_grad(&xs, &dys, &stats.mean, &stats.var, bn.eps, params.get(bn.gamma));
            pgrads[bn.gamma].add_assign(&dgamma);
            pgrads[bn.beta].add_assign(&dbeta);
            for (&m, dx) in members.iter().zip(dxs) {
                accumulate(&mut adj[graph.node(m).inputs[0]], dx);
            }
            continue;
        }
        let Some(dy) = adj[id].take() else { continue };
        let x = |i: usize| values.get(node.inputs[i]);
        match &node.op {
            Op::Input => {
                adj[id] = Some(dy);
            }
            Op::MatMul { weight } => {
                pgrads[*weight].add_assign(&ops::matmul_at(x(0), &dy));
                accumulate(&mut adj[node.inputs[0]], ops::matmul_bt(&dy, params.get(*weight)));
                adj[id] = Some(dy);
            }
            Op::AddBias { bias } => {
                pgrads[*bias].add_assign(&ops::column_sum(&dy));
                accumulate(&mut adj[node.inputs[0]], dy.clone());
                adj[id] = Some(dy);
            }
            Op::Concat { axis } => {
                let parts = match axis {
                    Axis::Rows => {
                        let sizes: Vec<usize> = node.inputs.iter().map(|&i| graph.shape(i)[0]).collect();
                        ops::split_rows(&dy, &sizes)
                    }
                    Axis::Cols => {
                        let widths: Vec<usize> = node.inputs.iter().map(|&i| graph.shape(i)[1]).collect();
                        ops::split_cols(&dy, &widths)
                    }
                };
                for (&i, part) in node.inputs.iter().zip(parts) {
                    accumulate(&mut adj[i], part);
                }
                adj[id] = Some(dy);
            }
            Op::LeakyRelu { alpha } => {
                accumulate(&mut adj[node.inputs[0]], ops::leaky_relu_grad(x(0), &dy, *alpha));
                adj[id] = Some(dy);
            }
            Op::SegmentReduce { kind, lengths } => {
                accumulate(&mut adj[node.inputs[0]], ops::segment_reduce_grad(*kind, x(0), lengths, &dy));
                adj[id] = Some(dy);
            }
            Op::BatchNorm(bn) => {
                let gamma = params.get(bn.gamma);
                let (mean, var) = match bn.mode {
                    BnMode::Infer => {
                        (params.get(bn.running_mean).row(0).to_vec(), params.get(bn.running_var).row(0).to_vec())
                    }
                    BnMode::Train => {
                        let s = values.bn_stats_for(id).expect("train batch-norm statistics");
                        (s.mean.clone(), s.var.clone())
                    }
                };
                match bn.mode {
                    BnMode::Train => {
                        let (mut dxs, dgamma, dbeta) =
                            ops::batch_norm_train_grad(&[x(0)], std::slice::from_ref(&dy), &mean, &var, bn.eps, gamma);
                        pgrads[bn.gamma].add_assign(&dgamma);
                        pgrads[bn.beta].add_assign(&dbeta);
                        accumulate(&mut adj[node.inputs[0]], dxs.pop().unwrap());
                    }
                    BnMode::Infer => {
                        let e = T::of(bn.eps);
                        let xin = x(0);
                        let mut dx = Tensor::zeros(xin.rows(), xin.cols());
                        let mut dgamma = Tensor::zeros(1, xin.cols());
                        for r in 0..xin.rows() {
                            for c in 0..xin.cols() {
                                let inv = T::one() / (var[c] + e).sqrt();
                                let g = dy.get(r, c);
                                dx.set(r, c, g * gamma.get(0, c) * inv);
                                dgamma.set(0, c, dgamma.get(0, c) + g * (xin.get(r, c) - mean[c]) * inv);
                            }
                        }
                        pgrads[bn.gamma].add_assign(&dgamma);
                        pgrads[bn.beta].add_assign(&ops::column_sum(&dy));
                        accumulate(&mut adj[node.inputs[0]], dx);
                    }
                }
                adj[id] = Some(dy);
            }
            Op::Gather { map } => {
                let mut parts: Vec<Tensor<T>> =
                    node.inputs.iter().map(|&i| Tensor::zeros(graph.shape(i)[0], graph.shape(i)[1])).collect();
                for (k, r) in map.iter().enumerate() {
                    let row = parts[r.input].row_mut(r.row);
                    for (a, &b) in row.iter_mut().zip(dy.row(k)) {
                        *a = *a + b;
                    }
                }
                for (&i, part) in node.inputs.iter().zip(parts) {
                    accumulate(&mut adj[i], part);
                }
                adj[id] = Some(dy);
            }
            Op::Scatter { map, .. } => {
                let rows: Vec<Vec<T>> = map.iter().map(|&m| dy.row(m).to_vec()).collect();
                let cols = dy.cols();
                let data = rows.into_iter().flatten().collect();
                accumulate(&mut adj[node.inputs[0]], Tensor::from_vec(map.len(), cols, data));
                adj[id] = Some(dy);
            }
            Op::Mse { weights, root } => {
                let scale = dy.item();
                let mut d = ops::mse_grad(x(0), x(1), x(2), weights, *root);
                d.data_mut().iter_mut().for_each(|v| *v = *v * scale);
                let mut neg = d.clone();
                neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                accumulate(&mut adj[node.inputs[0]], d);
                accumulate(&mut adj[node.inputs[1]], neg);
                adj[id] = Some(dy);
            }
        }
    }
    Ok(Gradients { params: pgrads, nodes: adj })
}

/// Every consumer of a train-mode group member must follow the group's last member.
fn check_group_order(graph: &ComputationGraph) -> Result<()> {
    if graph.groups().is_empty() {
        return Ok(());
    }
    let mut last_of = vec![None; graph.len()];
    for members in graph.groups().values() {
        let last = *members.last().unwrap();
        for &m in members {
            last_of[m] = Some(last);
        }
    }
    for (id, node) in graph.nodes().iter().enumerate() {
        for &i in &node.inputs {
            if let Some(last) = last_of[i] {
                if id <= last {
                    return Err(Error::InvalidGraph(format!(
                        "node {id} consumes batch-norm group member {i} before the group ends at {last}"
                    )));
                }
            }
        }
    }
    Ok(())
}
