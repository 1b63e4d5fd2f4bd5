use std::collections::BTreeMap;

use crate::engine::{BnMode, ComputationGraph, NodeId, Op};
use crate::error::{Error, Result};

/// Nodes merged into one wide primitive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchBucket {
    pub round: usize,
    pub signature: u64,
    /// Member node ids in ascending order.
    pub members: Vec<NodeId>,
}

/// Signature used for bucketing. A train-mode batch norm outside a group
/// normalizes over its own rows only, so it never merges with another node.
pub(crate) fn bucket_signature(graph: &ComputationGraph, id: NodeId) -> u64 {
    let sig = graph.signature(id);
    match &graph.node(id).op {
        Op::BatchNorm(bn) if bn.mode == BnMode::Train && bn.group.is_none() => {
            sig ^ (id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        }
        _ => sig,
    }
}

/// Frontier scheduling: each round takes every node whose inputs were
/// scheduled in earlier rounds and emits one bucket per signature, ordered by
/// signature. Members of a train-mode batch-norm group are held back until the
/// whole group is ready, so a group always lands in a single bucket.
pub fn analyze_batching(graph: &ComputationGraph) -> Result<Vec<BatchBucket>> {
    let n = graph.len();
    let mut pending = vec![0usize; n];
    let mut consumers: Vec<Vec<NodeId>> = vec![Vec::new(); n];
    for (id, node) in graph.nodes().iter().enumerate() {
        let mut inputs = node.inputs.clone();
        inputs.sort_unstable();
        inputs.dedup();
        for i in inputs {
            if i >= n {
                return Err(Error::InvalidGraph(format!("node {id} reads unknown node {i}")));
            }
            pending[id] += 1;
            consumers[i].push(id);
        }
    }
    let group_of = |id: NodeId| match &graph.node(id).op {
        Op::BatchNorm(bn) if bn.mode == BnMode::Train => bn.group,
        _ => None,
    };
    let mut held: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    let mut frontier: Vec<NodeId> = Vec::new();
    let admit = |id: NodeId, frontier: &mut Vec<NodeId>, held: &mut BTreeMap<usize, Vec<NodeId>>| match group_of(id)
    {
        Some(g) => {
            let waiting = held.entry(g).or_default();
            waiting.push(id);
            if waiting.len() == graph.group_members(g).len() {
                frontier.append(waiting);
                held.remove(&g);
            }
        }
        None => frontier.push(id),
    };
    for id in 0..n {
        if pending[id] == 0 {
            admit(id, &mut frontier, &mut held);
        }
    }

    let mut buckets = Vec::new();
    let mut scheduled = 0;
    let mut round = 0;
    while scheduled < n {
        if frontier.is_empty() {
            return Err(Error::Cycle(format!("{} node(s) can never become ready", n - scheduled)));
        }
        let mut by_sig: BTreeMap<u64, Vec<NodeId>> = BTreeMap::new();
        for &id in &frontier {
            by_sig.entry(bucket_signature(graph, id)).or_default().push(id);
        }
        let mut next = Vec::new();
        for (signature, mut members) in by_sig {
            members.sort_unstable();
            for &id in &members {
                for &c in &consumers[id] {
                    pending[c] -= 1;
                    if pending[c] == 0 {
                        admit(c, &mut next, &mut held);
                    }
                }
            }
            scheduled += members.len();
            buckets.push(BatchBucket { round, signature, members });
        }
        frontier = next;
        round += 1;
    }
    Ok(buckets)
}
