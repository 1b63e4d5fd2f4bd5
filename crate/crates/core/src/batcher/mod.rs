//! Dynamic batching: per-molecule graphs are merged into wide primitives.
//!
//! Frontier analysis buckets dependency-free nodes with equal signatures,
//! lowering turns each bucket into gather → wide op → scatter, and a
//! cleanup pass composes away scatter–gather pairs. A node-at-a-time
//! reference interpreter defines the semantics.

mod analyze;
mod eliminate;
mod exec;
mod plan;
mod schedule;

pub use analyze::{analyze_batching, BatchBucket};
pub use eliminate::eliminate_scatter_gather;
pub use exec::{execute_schedule, reference_execute, ScheduleValues};
pub use plan::render_plan;
pub use schedule::{generate_schedule, BatchSchedule, Elimination, Location, Rows, Step, StepId, StepRole};

use crate::engine::ComputationGraph;
use crate::error::Result;

/// Analysis, lowering and scatter–gather elimination in one call.
pub fn compile_batch(graph: &ComputationGraph) -> Result<BatchSchedule> {
    let buckets = analyze_batching(graph)?;
    let schedule = generate_schedule(graph, &buckets)?;
    Ok(eliminate_scatter_gather(&schedule))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Axis, Feeds, ParamStore, RowRef, Tensor};

    fn params() -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.add("w", Tensor::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0]), true);
        p.add("b", Tensor::from_f64(1, 2, &[0.5, -0.5]), true);
        p
    }

    fn check_all(graph: &ComputationGraph, p: &ParamStore<f64>, feeds: Feeds<f64>, schedule: &BatchSchedule) {
        let reference = reference_execute(graph, p, feeds.clone()).unwrap();
        let run = execute_schedule(schedule, p, feeds).unwrap();
        for id in 0..graph.len() {
            assert_eq!(&run.value(schedule, id), reference.get(id), "node {id}");
        }
    }

    #[test]
    fn single_member_bucket_degenerates() {
        let p = params();
        let mut g = ComputationGraph::for_params(&p);
        let x = g.input(3, 2);
        g.matmul(x, 0).unwrap();
        let raw = generate_schedule(&g, &analyze_batching(&g).unwrap()).unwrap();
        let roles: Vec<_> = raw.steps.iter().map(|s| s.role.clone()).collect();
        assert_eq!(
            roles,
            vec![StepRole::Feed { members: vec![0] }, StepRole::Gather, StepRole::Wide { bucket: 1 }, StepRole::Scatter]
        );
        let opt = eliminate_scatter_gather(&raw);
        assert_eq!(opt.steps.len(), 2);
        let feeds = Feeds::from([(x, Tensor::from_f64(3, 2, &[1.0, 0.0, 0.0, 1.0, 2.0, 2.0]))]);
        check_all(&g, &p, feeds, &opt);
    }

    #[test]
    fn two_row_vectors_share_one_wide_op() {
        let p = params();
        let mut g = ComputationGraph::for_params(&p);
        let a = g.input(1, 2);
        let b = g.input(1, 2);
        let ma = g.matmul(a, 0).unwrap();
        let mb = g.matmul(b, 0).unwrap();
        let schedule = generate_schedule(&g, &analyze_batching(&g).unwrap()).unwrap();
        let wide: Vec<_> = schedule.wide_steps().collect();
        assert_eq!(wide.len(), 1);
        assert_eq!(wide[0].1.shape, [2, 2]);
        assert_eq!(schedule.locations[ma].rows, Rows::Range { start: 0, len: 1 });
        assert_eq!(schedule.locations[mb].rows, Rows::Range { start: 1, len: 1 });
        let feeds = Feeds::from([(a, Tensor::from_f64(1, 2, &[1.0, 0.0])), (b, Tensor::from_f64(1, 2, &[0.0, 1.0]))]);
        check_all(&g, &p, feeds, &schedule);
    }

    #[test]
    fn inverse_permutations_compose_away() {
        let p = params();
        let mut g = ComputationGraph::for_params(&p);
        let x = g.input(3, 2);
        let s = g.scatter(x, vec![2, 0, 1], 3).unwrap();
        let back = g.gather(&[s], vec![2, 0, 1].into_iter().map(|row| RowRef { input: 0, row }).collect()).unwrap();
        let y = g.leaky_relu(back, 0.01).unwrap();
        let raw = generate_schedule(&g, &analyze_batching(&g).unwrap()).unwrap();
        let opt = eliminate_scatter_gather(&raw);
        assert!(opt.log.iter().any(|e| matches!(e, Elimination::Composed { .. })));
        assert!(opt.steps.len() < raw.steps.len());
        let feeds = Feeds::from([(x, Tensor::from_f64(3, 2, &[1.0, -2.0, 3.0, -4.0, 5.0, -6.0]))]);
        let r0 = execute_schedule(&raw, &p, feeds.clone()).unwrap();
        let r1 = execute_schedule(&opt, &p, feeds.clone()).unwrap();
        for id in 0..g.len() {
            assert_eq!(r0.value(&raw, id), r1.value(&opt, id));
        }
        assert_eq!(r1.value(&opt, y), crate::engine::ops::leaky_relu(&r1.value(&opt, x), 0.01));
        check_all(&g, &p, feeds, &opt);
    }

    #[test]
    fn schedule_is_deterministic_and_plan_stable() {
        let p = params();
        let build = || {
            let mut g = ComputationGraph::for_params(&p);
            let a = g.input(2, 2);
            let b = g.input(1, 2);
            let ma = g.matmul(a, 0).unwrap();
            let mb = g.matmul(b, 0).unwrap();
            let c = g.concat(Axis::Rows, &[ma, mb]).unwrap();
            g.add_bias(c, 1).unwrap();
            g
        };
        let s1 = compile_batch(&build()).unwrap();
        let s2 = compile_batch(&build()).unwrap();
        assert_eq!(s1, s2);
        let text = render_plan(&s1);
        assert_eq!(text, render_plan(&s2));
        assert!(text.lines().last().unwrap().starts_with("# eliminated"));
    }
}
