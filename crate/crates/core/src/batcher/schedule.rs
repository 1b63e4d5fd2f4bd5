use std::collections::BTreeMap;

use super::analyze::BatchBucket;
use crate::engine::{Axis, BatchNormAttrs, BnMode, ComputationGraph, NodeId, Op, RowRef};
use crate::error::{Error, Result};

pub type StepId = usize;

#[derive(Debug, Clone, PartialEq)]
pub enum StepRole {
    /// Concatenation of the given input nodes' fed tensors.
    Feed { members: Vec<NodeId> },
    Gather,
    /// The wide primitive of bucket `bucket`.
    Wide { bucket: usize },
    Scatter,
}

/// One primitive of the lowered program. Steps reference earlier steps only.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub op: Op,
    pub inputs: Vec<StepId>,
    pub shape: [usize; 2],
    pub round: usize,
    pub role: StepRole,
}

/// Rows of a step holding an original node's value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rows {
    Range { start: usize, len: usize },
    List(Vec<usize>),
}

impl Rows {
    pub fn len(&self) -> usize {
        match self {
            Rows::Range { len, .. } => *len,
            Rows::List(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> usize {
        match self {
            Rows::Range { start, .. } => start + i,
            Rows::List(v) => v[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub(crate) fn mapped(&self, f: impl Fn(usize) -> usize) -> Rows {
        let list: Vec<usize> = self.iter().map(f).collect();
        Rows::compact(list)
    }

    fn compact(list: Vec<usize>) -> Rows {
        match list.first() {
            Some(&start) if list.iter().enumerate().all(|(i, &r)| r == start + i) => {
                Rows::Range { start, len: list.len() }
            }
            None => Rows::Range { start: 0, len: 0 },
            _ => Rows::List(list),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Location {
    pub step: StepId,
    pub rows: Rows,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Elimination {
    /// A scatter whose consumers were all gathers; their maps were composed
    /// through it.
    Composed { scatter: StepId, gathers: Vec<StepId> },
    /// A single-source gather with an identity, full-coverage map.
    Dropped { gather: StepId },
}

/// Lowered batch program. Step ids in the elimination log refer to the
/// schedule before elimination.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSchedule {
    pub steps: Vec<Step>,
    pub buckets: Vec<BatchBucket>,
    /// Where each original node's value lives.
    pub locations: Vec<Location>,
    pub log: Vec<Elimination>,
    pub(crate) param_shapes: Vec<[usize; 2]>,
}

impl BatchSchedule {
    pub fn wide_steps(&self) -> impl Iterator<Item = (StepId, &Step)> {
        self.steps.iter().enumerate().filter(|(_, s)| matches!(s.role, StepRole::Wide { .. }))
    }

    /// Step whose entire output is exactly the value of `node`.
    pub fn step_of(&self, node: NodeId) -> Option<StepId> {
        let loc = &self.locations[node];
        let rows = self.steps[loc.step].shape[0];
        (loc.rows == Rows::Range { start: 0, len: rows }).then_some(loc.step)
    }

    /// Builds the engine graph that executes the steps in order.
    pub fn compile(&self) -> Result<ComputationGraph> {
        let mut g = ComputationGraph::new(self.param_shapes.clone());
        for (id, step) in self.steps.iter().enumerate() {
            let ins = &step.inputs;
            let node = match &step.op {
                Op::Input => g.input(step.shape[0], step.shape[1]),
                Op::MatMul { weight } => g.matmul(ins[0], *weight)?,
                Op::AddBias { bias } => g.add_bias(ins[0], *bias)?,
                Op::Concat { axis } => g.concat(*axis, ins)?,
                Op::LeakyRelu { alpha } => g.leaky_relu(ins[0], *alpha)?,
                Op::SegmentReduce { kind, lengths } => g.segment_reduce(*kind, ins[0], lengths.clone())?,
                Op::BatchNorm(bn) => g.batch_norm(ins[0], *bn)?,
                Op::Gather { map } => g.gather(ins, map.clone())?,
                Op::Scatter { map, extent } => g.scatter(ins[0], map.clone(), *extent)?,
                Op::Mse { weights, root } => g.mse(ins[0], ins[1], ins[2], weights.clone(), *root)?,
            };
            debug_assert_eq!(node, id);
        }
        Ok(g)
    }
}

struct Lowering<'a> {
    graph: &'a ComputationGraph,
    steps: Vec<Step>,
    locations: Vec<Option<Location>>,
}

impl Lowering<'_> {
    fn push(&mut self, op: Op, inputs: Vec<StepId>, shape: [usize; 2], round: usize, role: StepRole) -> StepId {
        self.steps.push(Step { op, inputs, shape, round, role });
        self.steps.len() - 1
    }

    fn location(&self, node: NodeId) -> Result<&Location> {
        self.locations[node]
            .as_ref()
            .ok_or_else(|| Error::InvalidGraph(format!("node {node} used before it is scheduled")))
    }

    /// A gather collecting, in order, the given row lists of original nodes.
    fn gather(&mut self, parts: &[(NodeId, Option<Vec<usize>>)], cols: usize, round: usize) -> Result<StepId> {
        let mut sources: Vec<StepId> = Vec::new();
        let mut slot_of: BTreeMap<StepId, usize> = BTreeMap::new();
        let mut map = Vec::new();
        for (node, rows) in parts {
            let loc = self.location(*node)?.clone();
            let slot = *slot_of.entry(loc.step).or_insert_with(|| {
                sources.push(loc.step);
                sources.len() - 1
            });
            match rows {
                None => map.extend(loc.rows.iter().map(|row| RowRef { input: slot, row })),
                Some(sel) => map.extend(sel.iter().map(|&r| RowRef { input: slot, row: loc.rows.get(r) })),
            }
        }
        if sources.is_empty() {
            return Err(Error::InvalidGraph("gather without sources".into()));
        }
        let rows = map.len();
        Ok(self.push(Op::Gather { map }, sources, [rows, cols], round, StepRole::Gather))
    }
}

/// Lowers buckets into gather → wide primitive → scatter triples. Input buckets
/// become a single feed step.
pub fn generate_schedule(graph: &ComputationGraph, buckets: &[BatchBucket]) -> Result<BatchSchedule> {
    let mut lw = Lowering { graph, steps: Vec::new(), locations: vec![None; graph.len()] };
    for (b, bucket) in buckets.iter().enumerate() {
        let members = &bucket.members;
        let first = lw.graph.node(members[0]);
        let round = bucket.round;
        let cols_of = |id: NodeId| lw.graph.shape(id)[1];
        if matches!(first.op, Op::Input) {
            let cols = first.shape[1];
            let rows: usize = members.iter().map(|&m| lw.graph.shape(m)[0]).sum();
            let step = lw.push(Op::Input, Vec::new(), [rows, cols], round, StepRole::Feed { members: members.clone() });
            let mut offset = 0;
            for &m in members {
                let len = lw.graph.shape(m)[0];
                lw.locations[m] = Some(Location { step, rows: Rows::Range { start: offset, len } });
                offset += len;
            }
            continue;
        }
        // wide op plus the per-member row count of its output
        let wide = match &first.op {
            Op::Input => unreachable!(),
            Op::MatMul { .. } | Op::AddBias { .. } | Op::LeakyRelu { .. } | Op::BatchNorm(_) => {
                let parts: Vec<_> = members.iter().map(|&m| (lw.graph.node(m).inputs[0], None)).collect();
                let g = lw.gather(&parts, cols_of(first.inputs[0]), round)?;
                let op = match &first.op {
                    Op::BatchNorm(bn) => {
                        if let Some(group) = bn.group.filter(|_| bn.mode == BnMode::Train) {
                            if lw.graph.group_members(group) != members.as_slice() {
                                return Err(Error::InvalidGraph(format!("batch-norm group {group} split across buckets")));
                            }
                        }
                        Op::BatchNorm(BatchNormAttrs { group: None, ..*bn })
                    }
                    other => other.clone(),
                };
                let rows: usize = members.iter().map(|&m| lw.graph.shape(m)[0]).sum();
                let cols = first.shape[1];
                lw.push(op, vec![g], [rows, cols], round, StepRole::Wide { bucket: b })
            }
            Op::Concat { axis: Axis::Cols } => {
                let arity = first.inputs.len();
                let mut slots = Vec::with_capacity(arity);
                for j in 0..arity {
                    let parts: Vec<_> = members.iter().map(|&m| (lw.graph.node(m).inputs[j], None)).collect();
                    slots.push(lw.gather(&parts, cols_of(first.inputs[j]), round)?);
                }
                let rows: usize = members.iter().map(|&m| lw.graph.shape(m)[0]).sum();
                lw.push(Op::Concat { axis: Axis::Cols }, slots, [rows, first.shape[1]], round, StepRole::Wide { bucket: b })
            }
            Op::Concat { axis: Axis::Rows } | Op::Gather { .. } => {
                let mut parts = Vec::new();
                for &m in members {
                    let node = lw.graph.node(m);
                    match &node.op {
                        Op::Gather { map } => {
                            // registers the source even when no rows are read
                            if map.is_empty() {
                                parts.push((node.inputs[0], Some(Vec::new())));
                            }
                            parts.extend(map.iter().map(|r| (node.inputs[r.input], Some(vec![r.row]))));
                        }
                        _ => parts.extend(node.inputs.iter().map(|&i| (i, None))),
                    }
                }
                let g = lw.gather(&parts, first.shape[1], round)?;
                lw.steps[g].role = StepRole::Wide { bucket: b };
                g
            }
            Op::SegmentReduce { kind, .. } => {
                let parts: Vec<_> = members.iter().map(|&m| (lw.graph.node(m).inputs[0], None)).collect();
                let g = lw.gather(&parts, cols_of(first.inputs[0]), round)?;
                let mut lengths = Vec::new();
                for &m in members {
                    if let Op::SegmentReduce { lengths: l, .. } = &lw.graph.node(m).op {
                        lengths.extend_from_slice(l);
                    }
                }
                let shape = [lengths.len(), first.shape[1]];
                lw.push(Op::SegmentReduce { kind: *kind, lengths }, vec![g], shape, round, StepRole::Wide { bucket: b })
            }
            Op::Scatter { .. } => {
                let parts: Vec<_> = members.iter().map(|&m| (lw.graph.node(m).inputs[0], None)).collect();
                let g = lw.gather(&parts, cols_of(first.inputs[0]), round)?;
                let (mut map, mut extent) = (Vec::new(), 0);
                for &m in members {
                    if let Op::Scatter { map: sm, extent: e } = &lw.graph.node(m).op {
                        map.extend(sm.iter().map(|&r| r + extent));
                        extent += e;
                    }
                }
                let shape = [extent, first.shape[1]];
                lw.push(Op::Scatter { map, extent }, vec![g], shape, round, StepRole::Wide { bucket: b })
            }
            Op::Mse { .. } => {
                if members.len() != 1 {
                    return Err(Error::InvalidGraph("mse nodes cannot be merged".into()));
                }
                let mut slots = Vec::new();
                for &i in &first.inputs {
                    slots.push(lw.gather(&[(i, None)], cols_of(i), round)?);
                }
                lw.push(first.op.clone(), slots, [1, 1], round, StepRole::Wide { bucket: b })
            }
        };
        let [rows, cols] = lw.steps[wide].shape;
        let scatter = lw.push(
            Op::Scatter { map: (0..rows).collect(), extent: rows },
            vec![wide],
            [rows, cols],
            round,
            StepRole::Scatter,
        );
        let mut offset = 0;
        for &m in members {
            let len = lw.graph.shape(m)[0];
            lw.locations[m] = Some(Location { step: scatter, rows: Rows::Range { start: offset, len } });
            offset += len;
        }
    }
    let locations = lw
        .locations
        .into_iter()
        .enumerate()
        .map(|(id, l)| l.ok_or_else(|| Error::InvalidGraph(format!("node {id} missing from the buckets"))))
        .collect::<Result<_>>()?;
    Ok(BatchSchedule {
        steps: lw.steps,
        buckets: buckets.to_vec(),
        locations,
        log: Vec::new(),
        param_shapes: graph.param_shapes().to_vec(),
    })
}
