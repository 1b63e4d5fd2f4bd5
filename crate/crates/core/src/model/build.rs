use crate::engine::{
    Axis, BatchNormAttrs, BnMode, ComputationGraph, Feeds, NodeId, Real, RowRef, Tensor, BN_EPS,
};
use crate::error::{Error, Result};
use crate::featurize::{MolGraph, ATOM_WIDTH, PAIR_WIDTH};

use super::{ConvParams, Model};

/// Per-molecule graphs of one batch, joined by the batch-norm groups and the
/// loss.
#[derive(Debug, Clone)]
pub struct BatchGraph<T> {
    pub graph: ComputationGraph,
    pub feeds: Feeds<T>,
    /// `atom_states[m][k]` is molecule `m`'s atom matrix before layer `k`;
    /// the last entry is the final embedding.
    pub atom_states: Vec<Vec<NodeId>>,
    pub embeddings: Vec<NodeId>,
    /// One `[1, tasks]` node per molecule.
    pub predictions: Vec<NodeId>,
    pub loss: Option<NodeId>,
}

/// Neighbor row map and per-atom neighbor counts of a molecule.
fn neighbor_layout(mol: &MolGraph) -> (Vec<RowRef>, Vec<usize>) {
    let map = mol.neighbors.iter().flatten().map(|nb| RowRef { input: 0, row: nb.index }).collect();
    let lengths = mol.neighbors.iter().map(Vec::len).collect();
    (map, lengths)
}

/// Neighbor transform and reduction of one layer: for every atom, the
/// concatenated max, sum and average of `f(W·[A_b, P_ab] + B)` over its
/// neighbors `b`.
pub fn conv_reduce(
    g: &mut ComputationGraph,
    atoms: NodeId,
    pairs: NodeId,
    neighbors: &(Vec<RowRef>, Vec<usize>),
    layer: &ConvParams,
    alpha: f64,
) -> Result<NodeId> {
    let gathered = g.gather(&[atoms], neighbors.0.clone())?;
    let x = g.concat(Axis::Cols, &[gathered, pairs])?;
    let t = g.matmul(x, layer.weight)?;
    let t = g.add_bias(t, layer.bias)?;
    let t = g.leaky_relu(t, alpha)?;
    let reduced: Vec<NodeId> = crate::engine::ReduceKind::ALL
        .iter()
        .map(|&kind| g.segment_reduce(kind, t, neighbors.1.clone()))
        .collect::<Result<_>>()?;
    g.concat(Axis::Cols, &reduced)
}

/// Batch norm of a layer's reduction. Train-mode nodes of one layer form a
/// group and are normalized jointly over the whole batch.
pub fn normalize_reduction(
    g: &mut ComputationGraph,
    reduced: NodeId,
    layer: &ConvParams,
    mode: BnMode,
    group: usize,
) -> Result<NodeId> {
    let attrs = BatchNormAttrs {
        gamma: layer.gamma,
        beta: layer.beta,
        running_mean: layer.running_mean,
        running_var: layer.running_var,
        mode,
        eps: BN_EPS,
        group: (mode == BnMode::Train).then_some(group),
    };
    g.batch_norm(reduced, attrs)
}

/// Order-independent pooling of an atom matrix with `atoms` rows.
pub fn pool(g: &mut ComputationGraph, x: NodeId, atoms: usize, kinds: &[crate::engine::ReduceKind]) -> Result<NodeId> {
    if atoms == 0 {
        return Err(Error::EmptyInput("cannot pool a molecule without atoms".into()));
    }
    let parts: Vec<NodeId> = kinds.iter().map(|&k| g.segment_reduce(k, x, vec![atoms])).collect::<Result<_>>()?;
    if parts.len() == 1 {
        Ok(parts[0])
    } else {
        g.concat(Axis::Cols, &parts)
    }
}

fn atom_matrix<T: Real>(mol: &MolGraph) -> Tensor<T> {
    let data = mol.atom_features.iter().flat_map(|a| a.0.iter().map(|&v| T::of(v))).collect();
    Tensor::from_vec(mol.atom_count(), ATOM_WIDTH, data)
}

fn pair_matrix<T: Real>(mol: &MolGraph) -> Tensor<T> {
    let data = mol.neighbors.iter().flatten().flat_map(|nb| nb.pair.0.iter().map(|&v| T::of(v))).collect();
    Tensor::from_vec(mol.pair_entries(), PAIR_WIDTH, data)
}

/// Builds one disjoint sub-graph per molecule sharing the model's parameter
/// ids. Nodes are created layer by layer across the batch so that every
/// batch-norm group member's input precedes the group. With `targets`
/// (normalized, `[molecule][task]`), a weighted masked RMSE loss over all
/// molecules is appended.
pub fn build_instance_graphs<T: Real>(
    model: &Model<T>,
    mols: &[&MolGraph],
    mode: BnMode,
    targets: Option<&[Vec<Option<f64>>]>,
) -> Result<BatchGraph<T>> {
    if mols.is_empty() {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    let cfg = &model.config;
    let mut g = ComputationGraph::for_params(&model.params);
    let mut feeds = Feeds::new();
    let mut states = Vec::with_capacity(mols.len());
    let mut pairs = Vec::with_capacity(mols.len());
    let layouts: Vec<_> = mols.iter().map(|m| neighbor_layout(m)).collect();
    for (i, mol) in mols.iter().enumerate() {
        if mol.atom_count() == 0 {
            return Err(Error::EmptyInput(format!("molecule '{}' has no atoms", mol.id)));
        }
        g.set_instance(Some(i));
        let a0 = g.input(mol.atom_count(), ATOM_WIDTH);
        feeds.insert(a0, atom_matrix(mol));
        let p = g.input(mol.pair_entries(), PAIR_WIDTH);
        feeds.insert(p, pair_matrix(mol));
        states.push(vec![a0]);
        pairs.push(p);
    }
    for (k, layer) in model.layout.conv.iter().enumerate() {
        let mut reduced = Vec::with_capacity(mols.len());
        for i in 0..mols.len() {
            g.set_instance(Some(i));
            let a = *states[i].last().unwrap();
            reduced.push(conv_reduce(&mut g, a, pairs[i], &layouts[i], layer, cfg.alpha)?);
        }
        let mut normalized = Vec::with_capacity(mols.len());
        for (i, &r) in reduced.iter().enumerate() {
            g.set_instance(Some(i));
            normalized.push(normalize_reduction(&mut g, r, layer, mode, k)?);
        }
        // residual concat after the whole group so its adjoints are complete
        for (i, &n) in normalized.iter().enumerate() {
            g.set_instance(Some(i));
            let a = *states[i].last().unwrap();
            let next = g.concat(Axis::Cols, &[a, n])?;
            states[i].push(next);
        }
    }
    let mut embeddings = Vec::with_capacity(mols.len());
    let mut predictions = Vec::with_capacity(mols.len());
    for (i, mol) in mols.iter().enumerate() {
        g.set_instance(Some(i));
        let emb = pool(&mut g, *states[i].last().unwrap(), mol.atom_count(), cfg.pooling.kinds())?;
        embeddings.push(emb);
        let mut h = emb;
        if cfg.explicit_width > 0 {
            let found = mol.explicit.as_ref().map_or(0, Vec::len);
            if found != cfg.explicit_width {
                return Err(Error::WidthMismatch { expected: cfg.explicit_width, found });
            }
            let e = g.input(1, cfg.explicit_width);
            feeds.insert(e, Tensor::from_f64(1, cfg.explicit_width, mol.explicit.as_ref().unwrap()));
            h = g.concat(Axis::Cols, &[h, e])?;
        }
        for &(w, b) in &model.layout.head {
            h = g.matmul(h, w)?;
            h = g.add_bias(h, b)?;
            h = g.leaky_relu(h, cfg.alpha)?;
        }
        let out = g.matmul(h, model.layout.output.0)?;
        predictions.push(g.add_bias(out, model.layout.output.1)?);
    }
    g.set_instance(None);
    let loss = match targets {
        None => None,
        Some(targets) => Some(append_loss(&mut g, &mut feeds, &predictions, targets, cfg.task_weights())?),
    };
    Ok(BatchGraph { graph: g, feeds, atom_states: states, embeddings, predictions, loss })
}

/// Appends `Σ_t w_t · RMSE_t` over the labeled entries of `targets`.
pub(crate) fn append_loss<T: Real>(
    g: &mut ComputationGraph,
    feeds: &mut Feeds<T>,
    predictions: &[NodeId],
    targets: &[Vec<Option<f64>>],
    weights: Vec<f64>,
) -> Result<NodeId> {
    let tasks = weights.len();
    if targets.len() != predictions.len() || targets.iter().any(|t| t.len() != tasks) {
        return Err(Error::InvalidGraph("targets do not match the batch".into()));
    }
    if targets.iter().flatten().all(Option::is_none) {
        return Err(Error::NoSupervision);
    }
    let pred = if predictions.len() == 1 { predictions[0] } else { g.concat(Axis::Rows, predictions)? };
    let rows = predictions.len();
    let values: Vec<f64> = targets.iter().flatten().map(|v| v.unwrap_or(0.0)).collect();
    let mask: Vec<f64> = targets.iter().flatten().map(|v| if v.is_some() { 1.0 } else { 0.0 }).collect();
    let target = g.input(rows, tasks);
    feeds.insert(target, Tensor::from_f64(rows, tasks, &values));
    let mask_node = g.input(rows, tasks);
    feeds.insert(mask_node, Tensor::from_f64(rows, tasks, &mask));
    g.mse(pred, target, mask_node, weights, true)
}
