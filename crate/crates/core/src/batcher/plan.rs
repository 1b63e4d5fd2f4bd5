use std::fmt::Write;

use super::schedule::{BatchSchedule, Elimination, StepRole};
use crate::engine::Op;

/// One line per wide op: round, signature, member count, rows gathered into
/// the op and rows scattered out of it, then an elimination summary.
pub fn render_plan(schedule: &BatchSchedule) -> String {
    let mut out = String::new();
    let wide: Vec<_> = schedule.wide_steps().collect();
    let feeds = schedule.steps.iter().filter(|s| matches!(s.role, StepRole::Feed { .. })).count();
    let gathers = schedule.steps.iter().filter(|s| s.role == StepRole::Gather).count();
    let scatters = schedule.steps.iter().filter(|s| s.role == StepRole::Scatter).count();
    writeln!(
        out,
        "# buckets {} steps {} feeds {} wide {} gathers {} scatters {}",
        schedule.buckets.len(),
        schedule.steps.len(),
        feeds,
        wide.len(),
        gathers,
        scatters
    )
    .unwrap();
    let mut consumers = vec![Vec::new(); schedule.steps.len()];
    for (id, s) in schedule.steps.iter().enumerate() {
        for &i in &s.inputs {
            consumers[i].push(id);
        }
    }
    for (id, step) in &wide {
        let StepRole::Wide { bucket } = step.role else { unreachable!() };
        let b = &schedule.buckets[bucket];
        let gathered: usize = match &step.op {
            Op::Gather { map } => map.len(),
            _ => step
                .inputs
                .iter()
                .filter(|&&i| schedule.steps[i].role == StepRole::Gather)
                .map(|&i| schedule.steps[i].shape[0])
                .sum(),
        };
        let scattered: usize = consumers[*id]
            .iter()
            .filter(|&&c| schedule.steps[c].role == StepRole::Scatter)
            .map(|&c| schedule.steps[c].shape[0])
            .sum();
        writeln!(
            out,
            "round {:>4} sig {:016x} op {:<14} members {:>6} gather {:>7} scatter {:>7}",
            b.round,
            b.signature,
            step.op.name(),
            b.members.len(),
            gathered,
            scattered
        )
        .unwrap();
    }
    let composed = schedule.log.iter().filter(|e| matches!(e, Elimination::Composed { .. })).count();
    let dropped = schedule.log.len() - composed;
    writeln!(out, "# eliminated composed {composed} dropped {dropped}").unwrap();
    out
}
