use crate::engine::{forward, ops, ComputationGraph, Feeds, NodeId, ParamStore, Real, Tensor, Values};
use crate::error::{Error, Result};

use super::schedule::{BatchSchedule, StepRole};

/// Values of an executed schedule, addressable by original node id.
#[derive(Debug)]
pub struct ScheduleValues<T> {
    pub graph: ComputationGraph,
    pub values: Values<T>,
}

impl<T: Real> ScheduleValues<T> {
    /// Copies the rows holding `node`'s value out of the step buffers.
    pub fn value(&self, schedule: &BatchSchedule, node: NodeId) -> Tensor<T> {
        let loc = &schedule.locations[node];
        let buf = self.values.get(loc.step);
        let mut data = Vec::with_capacity(loc.rows.len() * buf.cols());
        for r in loc.rows.iter() {
            data.extend_from_slice(buf.row(r));
        }
        Tensor::from_vec(loc.rows.len(), buf.cols(), data)
    }
}

/// Runs a schedule. `feeds` are keyed by original input node; they are
/// concatenated into the feed steps.
pub fn execute_schedule<T: Real>(
    schedule: &BatchSchedule,
    params: &ParamStore<T>,
    mut feeds: Feeds<T>,
) -> Result<ScheduleValues<T>> {
    let graph = schedule.compile()?;
    let mut step_feeds = Feeds::new();
    for (id, step) in schedule.steps.iter().enumerate() {
        if let StepRole::Feed { members } = &step.role {
            let parts: Vec<Tensor<T>> =
                members.iter().map(|m| feeds.remove(m).ok_or(Error::MissingInput(*m))).collect::<Result<_>>()?;
            let refs: Vec<&Tensor<T>> = parts.iter().collect();
            let joined = if refs.len() == 1 { parts[0].clone() } else { ops::concat_rows(&refs) };
            step_feeds.insert(id, joined);
        }
    }
    let values = forward(&graph, params, step_feeds)?;
    Ok(ScheduleValues { graph, values })
}

/// The semantics oracle: evaluates the unmerged graph one node at a time.
pub fn reference_execute<T: Real>(graph: &ComputationGraph, params: &ParamStore<T>, feeds: Feeds<T>) -> Result<Values<T>> {
    forward(graph, params, feeds)
}
