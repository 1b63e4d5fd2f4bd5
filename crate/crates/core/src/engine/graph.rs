use std::collections::BTreeMap;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};
use crate::hash::Fnv1a;

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Rows,
    Cols,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReduceKind {
    Max,
    Sum,
    Avg,
}

impl ReduceKind {
    pub const ALL: [ReduceKind; 3] = [ReduceKind::Max, ReduceKind::Sum, ReduceKind::Avg];

    pub fn name(self) -> &'static str {
        match self {
            ReduceKind::Max => "max",
            ReduceKind::Sum => "sum",
            ReduceKind::Avg => "avg",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BnMode {
    Train,
    Infer,
}

/// Row `row` of input slot `input`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RowRef {
    pub input: usize,
    pub row: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchNormAttrs {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mode: BnMode,
    pub eps: f64,
    /// Train-mode nodes sharing a group are normalized jointly over all their rows.
    pub group: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Input,
    MatMul { weight: ParamId },
    AddBias { bias: ParamId },
    Concat { axis: Axis },
    LeakyRelu { alpha: f64 },
    /// Reduces consecutive row segments of the given lengths to one row each.
    SegmentReduce { kind: ReduceKind, lengths: Vec<usize> },
    BatchNorm(BatchNormAttrs),
    /// `out[i] = inputs[map[i].input][map[i].row]`.
    Gather { map: Vec<RowRef> },
    /// `out[map[i]] = x[i]`; rows not covered are zero.
    Scatter { map: Vec<usize>, extent: usize },
    /// Inputs `(pred, target, mask)`; per-column masked mean squared error,
    /// square-rooted when `root`, weighted and summed over columns.
    Mse { weights: Vec<f64>, root: bool },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::MatMul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Concat { .. } => "concat",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::SegmentReduce { .. } => "segment_reduce",
            Op::BatchNorm(_) => "batch_norm",
            Op::Gather { .. } => "gather",
            Op::Scatter { .. } => "scatter",
            Op::Mse { .. } => "mse",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Op::Input => 0,
            Op::MatMul { .. } => 1,
            Op::AddBias { .. } => 2,
            Op::Concat { .. } => 3,
            Op::LeakyRelu { .. } => 4,
            Op::SegmentReduce { .. } => 5,
            Op::BatchNorm(_) => 6,
            Op::Gather { .. } => 7,
            Op::Scatter { .. } => 8,
            Op::Mse { .. } => 9,
        }
    }

    /// Ops whose parameters make them weight-bearing.
    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Op::MatMul { weight } => vec![*weight],
            Op::AddBias { bias } => vec![*bias],
            Op::BatchNorm(bn) => vec![bn.gamma, bn.beta, bn.running_mean, bn.running_var],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: [usize; 2],
    /// Source molecule for per-instance nodes; `None` for batch-level nodes.
    pub instance: Option<usize>,
}

/// A DAG of tensor operations in topological insertion order.
#[derive(Debug, Clone, Default)]
pub struct ComputationGraph {
    nodes: Vec<GraphNode>,
    param_shapes: Vec<[usize; 2]>,
    instance: Option<usize>,
    groups: BTreeMap<usize, Vec<NodeId>>,
}

impl ComputationGraph {
    pub fn new(param_shapes: Vec<[usize; 2]>) -> Self {
        ComputationGraph { param_shapes, ..Default::default() }
    }

    pub fn for_params<T: Real>(params: &ParamStore<T>) -> Self {
        Self::new(params.shapes())
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &GraphNode {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param_shapes(&self) -> &[[usize; 2]] {
        &self.param_shapes
    }

    /// Members of each batch-norm group, in node order.
    pub fn groups(&self) -> &BTreeMap<usize, Vec<NodeId>> {
        &self.groups
    }

    pub fn group_members(&self, group: usize) -> &[NodeId] {
        self.groups.get(&group).map_or(&[], Vec::as_slice)
    }

    /// Tags subsequently added nodes with a source instance.
    pub fn set_instance(&mut self, instance: Option<usize>) {
        self.instance = instance;
    }

    pub fn shape(&self, id: NodeId) -> [usize; 2] {
        self.nodes[id].shape
    }

    fn param_shape(&self, op: &'static str, id: ParamId) -> Result<[usize; 2]> {
        self.param_shapes
            .get(id)
            .copied()
            .ok_or_else(|| Error::InvalidGraph(format!("{op}: unknown parameter {id}")))
    }

    fn check_input(&self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::InvalidGraph(format!("input {id} is not an earlier node")));
        }
        Ok(())
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: [usize; 2]) -> NodeId {
        let id = self.nodes.len();
        if let Op::BatchNorm(BatchNormAttrs { group: Some(g), mode: BnMode::Train, .. }) = &op {
            self.groups.entry(*g).or_default().push(id);
        }
        self.nodes.push(GraphNode { op, inputs, shape, instance: self.instance });
        id
    }

    pub fn input(&mut self, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Input, Vec::new(), [rows, cols])
    }

    pub fn matmul(&mut self, x: NodeId, weight: ParamId) -> Result<NodeId> {
        self.check_input(x)?;
        let w = self.param_shape("matmul", weight)?;
        let xs = self.shape(x);
        if xs[1] != w[0] {
            return Err(Error::shape("matmul", &xs, &w));
        }
        Ok(self.push(Op::MatMul { weight }, vec![x], [xs[0], w[1]]))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: ParamId) -> Result<NodeId> {
        self.check_input(x)?;
        let b = self.param_shape("add_bias", bias)?;
        let xs = self.shape(x);
        if b[0] != 1 || b[1] != xs[1] {
            return Err(Error::shape("add_bias", &xs, &b));
        }
        Ok(self.push(Op::AddBias { bias }, vec![x], xs))
    }

    pub fn concat(&mut self, axis: Axis, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidGraph("concat of zero inputs".into()));
        }
        for &p in parts {
            self.check_input(p)?;
        }
        let first = self.shape(parts[0]);
        let mut shape = first;
        for &p in &parts[1..] {
            let s = self.shape(p);
            match axis {
                Axis::Rows if s[1] == first[1] => shape[0] += s[0],
                Axis::Cols if s[0] == first[0] => shape[1] += s[1],
                _ => return Err(Error::shape("concat", &first, &s)),
            }
        }
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), shape))
    }

    pub fn leaky_relu(&mut self, x: NodeId, alpha: f64) -> Result<NodeId> {
        self.check_input(x)?;
        let s = self.shape(x);
        Ok(self.push(Op::LeakyRelu { alpha }, vec![x], s))
    }

    pub fn segment_reduce(&mut self, kind: ReduceKind, x: NodeId, lengths: Vec<usize>) -> Result<NodeId> {
        self.check_input(x)?;
        let s = self.shape(x);
        let total: usize = lengths.iter().sum();
        if total != s[0] {
            return Err(Error::shape("segment_reduce", &s, &[total]));
        }
        let out = [lengths.len(), s[1]];
        Ok(self.push(Op::SegmentReduce { kind, lengths }, vec![x], out))
    }

    pub fn batch_norm(&mut self, x: NodeId, attrs: BatchNormAttrs) -> Result<NodeId> {
        self.check_input(x)?;
        let s = self.shape(x);
        for p in [attrs.gamma, attrs.beta, attrs.running_mean, attrs.running_var] {
            let ps = self.param_shape("batch_norm", p)?;
            if ps != [1, s[1]] {
                return Err(Error::shape("batch_norm", &s, &ps));
            }
        }
        Ok(self.push(Op::BatchNorm(attrs), vec![x], s))
    }

    pub fn gather(&mut self, sources: &[NodeId], map: Vec<RowRef>) -> Result<NodeId> {
        if sources.is_empty() {
            return Err(Error::InvalidGraph("gather without sources".into()));
        }
        for &p in sources {
            self.check_input(p)?;
        }
        let cols = self.shape(sources[0])[1];
        for &p in sources {
            let s = self.shape(p);
            if s[1] != cols {
                return Err(Error::shape("gather", &[0, cols], &s));
            }
        }
        for r in &map {
            let src = sources.get(r.input).ok_or_else(|| Error::InvalidGraph("gather slot out of range".into()))?;
            if r.row >= self.shape(*src)[0] {
                return Err(Error::InvalidGraph(format!("gather row {} out of range", r.row)));
            }
        }
        let rows = map.len();
        Ok(self.push(Op::Gather { map }, sources.to_vec(), [rows, cols]))
    }

    pub fn scatter(&mut self, x: NodeId, map: Vec<usize>, extent: usize) -> Result<NodeId> {
        self.check_input(x)?;
        let s = self.shape(x);
        if map.len() != s[0] {
            return Err(Error::shape("scatter", &s, &[map.len()]));
        }
        let mut hit = vec![false; extent];
        for &m in &map {
            if m >= extent || std::mem::replace(&mut hit[m], true) {
                return Err(Error::InvalidGraph(format!("scatter target {m} out of range or repeated")));
            }
        }
        Ok(self.push(Op::Scatter { map, extent }, vec![x], [extent, s[1]]))
    }

    pub fn mse(&mut self, pred: NodeId, target: NodeId, mask: NodeId, weights: Vec<f64>, root: bool) -> Result<NodeId> {
        for id in [pred, target, mask] {
            self.check_input(id)?;
        }
        let p = self.shape(pred);
        for id in [target, mask] {
            if self.shape(id) != p {
                return Err(Error::shape("mse", &p, &self.shape(id)));
            }
        }
        if weights.len() != p[1] {
            return Err(Error::shape("mse", &p, &[weights.len()]));
        }
        Ok(self.push(Op::Mse { weights, root }, vec![pred, target, mask], [1, 1]))
    }

    /// Ids of nodes that consume `id`.
    pub fn consumers(&self) -> Vec<Vec<NodeId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for (id, n) in self.nodes.iter().enumerate() {
            for &i in &n.inputs {
                out[i].push(id);
            }
        }
        out
    }

    /// Merge-compatibility hash: op kind, parameter ids, static attributes and
    /// per-row input widths. Row-structure attributes (segment lengths, index
    /// maps, concat arity along rows) are excluded since batching concatenates
    /// them; `mse` is never merged.
    pub fn signature(&self, id: NodeId) -> u64 {
        let node = &self.nodes[id];
        let mut h = Fnv1a::new();
        h.write(&[node.op.tag()]);
        for p in node.op.params() {
            h.write_u64(p as u64);
        }
        match &node.op {
            Op::Concat { axis: Axis::Rows } => {
                h.write(&[0]);
                h.write_u64(node.shape[1] as u64);
                return h.finish();
            }
            Op::Concat { axis: Axis::Cols } => {
                h.write(&[1]);
            }
            Op::LeakyRelu { alpha } => {
                h.write_f64(*alpha);
            }
            Op::SegmentReduce { kind, .. } => {
                h.write(kind.name().as_bytes());
            }
            Op::BatchNorm(bn) => {
                h.write(&[bn.mode as u8]);
                h.write_f64(bn.eps);
                h.write_i64(bn.group.map_or(-1, |g| g as i64));
            }
            Op::Mse { .. } => {
                h.write_u64(id as u64);
            }
            Op::Gather { .. } => {
                h.write_u64(node.shape[1] as u64);
                return h.finish();
            }
            _ => {}
        }
        if node.inputs.is_empty() {
            h.write_u64(node.shape[1] as u64);
        }
        for &i in &node.inputs {
            h.write_u64(self.nodes[i].shape[1] as u64);
        }
        h.finish()
    }
}

/// A named parameter. Non-trainable entries (batch-norm running statistics)
/// receive no optimizer updates.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.entries.push(Param { name: name.into(), value, trainable });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id].value
    }

    pub fn entry(&self, id: ParamId) -> &Param<T> {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[Param<T>] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|p| p.name == name)
    }

    pub fn shapes(&self) -> Vec<[usize; 2]> {
        self.entries.iter().map(|p| p.value.shape()).collect()
    }

    pub fn zeros_like(&self) -> Vec<Tensor<T>> {
        self.entries.iter().map(|p| Tensor::zeros(p.value.rows(), p.value.cols())).collect()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|p| Param { name: p.name.clone(), value: p.value.cast(), trainable: p.trainable })
                .collect(),
        }
    }
}
