use std::collections::BTreeMap;

use super::schedule::{BatchSchedule, Elimination, Location, Step, StepId};
use crate::engine::{Op, RowRef};

/// Rewrites a gather so that rows read from `old` are read from `new` at
/// `row_fn(row)`. Sources are re-slotted in order of first use.
fn redirect_gather(step: &mut Step, old: StepId, new: StepId, row_fn: &dyn Fn(usize) -> usize) {
    let Op::Gather { map } = &step.op else { return };
    let refs: Vec<(StepId, usize)> = map
        .iter()
        .map(|r| {
            let src = step.inputs[r.input];
            if src == old {
                (new, row_fn(r.row))
            } else {
                (src, r.row)
            }
        })
        .collect();
    let mut sources = Vec::new();
    let mut slot_of = BTreeMap::new();
    let mut new_map = Vec::with_capacity(refs.len());
    for (src, row) in refs {
        let slot = *slot_of.entry(src).or_insert_with(|| {
            sources.push(src);
            sources.len() - 1
        });
        new_map.push(RowRef { input: slot, row });
    }
    // keep sources that contribute no rows so the gather stays well formed
    if sources.is_empty() {
        sources.push(new);
    }
    step.inputs = sources;
    step.op = Op::Gather { map: new_map };
}

/// Removes scatters consumed only by gathers by composing their index maps
/// into the gathers, then drops gathers that copy a single source unchanged.
/// Only index maps change, so every observable value is bit-identical.
pub fn eliminate_scatter_gather(schedule: &BatchSchedule) -> BatchSchedule {
    let mut steps: Vec<Option<Step>> = schedule.steps.iter().cloned().map(Some).collect();
    let mut locations = schedule.locations.clone();
    let mut log = schedule.log.clone();
    let n = steps.len();
    let consumers_of = |steps: &[Option<Step>]| {
        let mut c: Vec<Vec<StepId>> = vec![Vec::new(); steps.len()];
        for (id, s) in steps.iter().enumerate() {
            if let Some(s) = s {
                let mut ins = s.inputs.clone();
                ins.dedup();
                for i in ins {
                    if !c[i].contains(&id) {
                        c[i].push(id);
                    }
                }
            }
        }
        c
    };

    let mut located: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (node, loc) in locations.iter().enumerate() {
        located[loc.step].push(node);
    }

    // scatter elimination
    let consumers = consumers_of(&steps);
    for s in 0..n {
        let Some(Step { op: Op::Scatter { map, extent }, inputs, .. }) = steps[s].clone() else { continue };
        let mut inverse = vec![None; extent];
        for (i, &m) in map.iter().enumerate() {
            inverse[m] = Some(i);
        }
        let all_gathers = consumers[s]
            .iter()
            .all(|&c| matches!(steps[c].as_ref().map(|st| &st.op), Some(Op::Gather { .. })));
        // every row read downstream must come from the scatter's input
        let covered = consumers[s].iter().all(|&c| {
            let st = steps[c].as_ref().unwrap();
            let Op::Gather { map } = &st.op else { return false };
            map.iter().all(|r| st.inputs[r.input] != s || inverse[r.row].is_some())
        }) && located[s].iter().all(|&node| locations[node].rows.iter().all(|r| inverse[r].is_some()));
        if !all_gathers || !covered {
            continue;
        }
        let source = inputs[0];
        let row_fn = |r: usize| inverse[r].unwrap();
        for &c in &consumers[s] {
            redirect_gather(steps[c].as_mut().unwrap(), s, source, &row_fn);
        }
        for node in std::mem::take(&mut located[s]) {
            let loc = &mut locations[node];
            *loc = Location { step: source, rows: loc.rows.mapped(row_fn) };
            located[source].push(node);
        }
        steps[s] = None;
        log.push(Elimination::Composed { scatter: s, gathers: consumers[s].clone() });
    }

    // identity gathers
    let mut consumers = consumers_of(&steps);
    for g in 0..n {
        let Some(Step { op: Op::Gather { map }, inputs, .. }) = steps[g].clone() else { continue };
        if inputs.len() != 1 {
            continue;
        }
        let src = inputs[0];
        let src_rows = steps[src].as_ref().map_or(usize::MAX, |s| s.shape[0]);
        let identity = map.len() == src_rows && map.iter().enumerate().all(|(i, r)| r.row == i);
        if !identity {
            continue;
        }
        for c in consumers[g].clone() {
            let st = steps[c].as_mut().unwrap();
            for i in st.inputs.iter_mut().filter(|i| **i == g) {
                *i = src;
            }
            if let Op::Gather { .. } = st.op {
                redirect_gather(st, src, src, &|r| r);
            }
            if !consumers[src].contains(&c) {
                consumers[src].push(c);
            }
        }
        for node in std::mem::take(&mut located[g]) {
            locations[node].step = src;
            located[src].push(node);
        }
        steps[g] = None;
        log.push(Elimination::Dropped { gather: g });
    }

    // compact step ids
    let mut remap = vec![usize::MAX; n];
    let mut kept = Vec::new();
    for (old, s) in steps.into_iter().enumerate() {
        if let Some(mut s) = s {
            s.inputs.iter_mut().for_each(|i| *i = remap[*i]);
            remap[old] = kept.len();
            kept.push(s);
        }
    }
    for loc in &mut locations {
        loc.step = remap[loc.step];
    }
    BatchSchedule {
        steps: kept,
        buckets: schedule.buckets.clone(),
        locations,
        log,
        param_shapes: schedule.param_shapes.clone(),
    }
}
