use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::engine::gradcheck::Trial;
use crate::engine::{forward, BnMode, ComputationGraph, Feeds, RowRef};
use crate::featurize::{featurize_record, FeaturizeOptions, MolGraph};
use crate::fixtures;
use crate::synth::random_molecule;

fn config(tasks: &[&str]) -> ModelConfig {
    ModelConfig { tasks: tasks.iter().map(|t| t.to_string()).collect(), ..Default::default() }
}

fn small(seed: u64) -> ModelConfig {
    ModelConfig { layers: 2, widths: vec![4], head: vec![6], seed, ..config(&["a", "b"]) }
}

fn graphs(seed: u64, count: usize, atoms: std::ops::RangeInclusive<usize>) -> Vec<MolGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let n = rng.random_range(atoms.clone());
            let mut m = random_molecule(&mut rng, format!("m{i}"), n, 0.3);
            m.labels.insert("a".into(), rng.random_range(-1.0..1.0));
            if rng.random_bool(0.5) {
                m.labels.insert("b".into(), rng.random_range(-1.0..1.0));
            }
            featurize_record(&m, &FeaturizeOptions::default())
        })
        .collect()
}

fn refs(g: &[MolGraph]) -> Vec<&MolGraph> {
    g.iter().collect()
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (b.abs() + 1e-12)
}

/// Running statistics that differ from the identity, as after training.
fn perturb_running_stats(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for c in model.layout.conv.clone() {
        for v in model.params.get_mut(c.running_mean).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        for v in model.params.get_mut(c.running_var).data_mut() {
            *v = rng.random_range(0.5..2.0);
        }
    }
}

#[test]
fn width_law_on_graph_shapes() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mols = graphs(1, 3, 3..=9);
    for _ in 0..20 {
        let layers = rng.random_range(1..=4);
        let widths: Vec<usize> = (0..layers).map(|_| rng.random_range(1..=12)).collect();
        let cfg = ModelConfig { layers, widths: widths.clone(), head: vec![3], ..config(&["a"]) };
        let model = Model::<f64>::init(cfg.clone()).unwrap();
        let b = build_instance_graphs(&model, &refs(&mols), BnMode::Infer, None).unwrap();
        for states in &b.atom_states {
            for k in 0..layers {
                let (w0, w1) = (b.graph.shape(states[k])[1], b.graph.shape(states[k + 1])[1]);
                assert_eq!(w1, w0 + 3 * widths[k]);
            }
        }
        for (states, &e) in b.atom_states.iter().zip(&b.embeddings) {
            assert_eq!(b.graph.shape(e), [1, 3 * b.graph.shape(*states.last().unwrap())[1]]);
            assert_eq!(b.graph.shape(e)[1], cfg.embedding_width());
        }
    }
}

#[test]
fn embedding_width_is_independent_of_atom_count() {
    let model = Model::<f64>::init(small(0)).unwrap();
    let five = graphs(2, 1, 5..=5);
    let fifty = graphs(3, 1, 50..=50);
    let r5 = predict(&model, &refs(&five), 8).unwrap();
    let r50 = predict(&model, &refs(&fifty), 8).unwrap();
    assert_eq!(r5[0].embedding.len(), r50[0].embedding.len());
}

#[test]
fn single_neighbor_reduction_repeats_the_transform() {
    let model = Model::<f64>::init(small(1)).unwrap();
    let mol = featurize_record(&fixtures::methane(), &FeaturizeOptions::default());
    let mut g = ComputationGraph::for_params(&model.params);
    let a = g.input(5, 33);
    let p = g.input(8, 5);
    let map: Vec<RowRef> = mol.neighbors.iter().flatten().map(|n| RowRef { input: 0, row: n.index }).collect();
    let lengths: Vec<usize> = mol.neighbors.iter().map(Vec::len).collect();
    let r = conv_reduce(&mut g, a, p, &(map, lengths), &model.layout.conv[0], 0.01).unwrap();
    let atoms: Vec<f64> = mol.atom_features.iter().flat_map(|f| f.0).collect();
    let pairs: Vec<f64> = mol.neighbors.iter().flatten().flat_map(|n| n.pair.0).collect();
    let feeds = Feeds::from([(a, Tensor::from_f64(5, 33, &atoms)), (p, Tensor::from_f64(8, 5, &pairs))]);
    let v = forward(&g, &model.params, feeds).unwrap();
    let out = v.get(r);
    // hydrogens (rows 1..5) each have the carbon as their only neighbor
    for h in 1..5 {
        let row = out.row(h);
        assert_eq!(&row[0..4], &row[4..8]);
        assert_eq!(&row[0..4], &row[8..12]);
    }
}

/// Hand-scripted forward of one layer on a two-atom molecule.
#[test]
fn two_atom_layer_matches_scalar_oracle() {
    let cfg = ModelConfig { layers: 1, widths: vec![2], head: vec![2], ..config(&["a"]) };
    let mut model = Model::<f64>::init(cfg).unwrap();
    let c = model.layout.conv[0];
    // small fixed weights: w[i][j] = 0.01·(i+1)·(−1)^j, bias (0.1, −0.2)
    let w: Vec<f64> = (0..38).flat_map(|i| [0.01 * (i + 1) as f64, -0.01 * (i + 1) as f64]).collect();
    *model.params.get_mut(c.weight) = Tensor::from_f64(38, 2, &w);
    *model.params.get_mut(c.bias) = Tensor::from_f64(1, 2, &[0.1, -0.2]);
    let mol = featurize_record(&fixtures::ethanol(), &FeaturizeOptions::default());
    // keep the first two atoms (C-C) only
    let two = MolGraph {
        atom_features: mol.atom_features[..2].to_vec(),
        neighbors: vec![vec![mol.neighbors[0][0]], vec![mol.neighbors[1][0]]],
        ..mol.clone()
    };
    assert_eq!(two.neighbors[0][0].index, 1);
    let b = build_instance_graphs(&model, &[&two], BnMode::Infer, None).unwrap();
    let v = forward(&b.graph, &model.params, b.feeds.clone()).unwrap();
    let out = v.get(b.atom_states[0][1]);
    let leaky = |x: f64| if x > 0.0 { x } else { 0.01 * x };
    for a in 0..2 {
        let nb = two.neighbors[a][0];
        let input: Vec<f64> = two.atom_features[nb.index].0.iter().chain(nb.pair.0.iter()).copied().collect();
        let t: Vec<f64> = (0..2)
            .map(|j| leaky(input.iter().enumerate().map(|(i, x)| x * w[i * 2 + j]).sum::<f64>() + [0.1, -0.2][j]))
            .collect();
        // singleton reduction, then inference batch norm with identity statistics
        let scale = 1.0 / (1.0 + crate::engine::BN_EPS).sqrt();
        let expect: Vec<f64> = two.atom_features[a]
            .0
            .iter()
            .copied()
            .chain([t[0], t[1], t[0], t[1], t[0], t[1]].iter().map(|x| x * scale))
            .collect();
        for (got, want) in out.row(a).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}

#[test]
fn zeroed_convolutions_preserve_input_features() {
    let cfg = ModelConfig { layers: 3, widths: vec![5], ..small(4) };
    let mut model = Model::<f64>::init(cfg).unwrap();
    for c in model.layout.conv.clone() {
        for p in [c.weight, c.bias] {
            model.params.get_mut(p).data_mut().fill(0.0);
        }
    }
    let mols = graphs(6, 4, 3..=12);
    for mode in [BnMode::Train, BnMode::Infer] {
        let b = build_instance_graphs(&model, &refs(&mols), mode, None).unwrap();
        let v = forward(&b.graph, &model.params, b.feeds.clone()).unwrap();
        for (m, states) in mols.iter().zip(&b.atom_states) {
            let last = v.get(*states.last().unwrap());
            for (r, f) in m.atom_features.iter().enumerate() {
                assert_eq!(&last.row(r)[..33], &f.0[..]);
            }
        }
    }
}

#[test]
fn predictions_are_invariant_under_relabeling() {
    let mut model = Model::<f64>::init(small(7)).unwrap();
    perturb_running_stats(&mut model, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..10 {
        let n = rng.random_range(5..=25);
        let mol = random_molecule(&mut rng, format!("p{i}"), n, 0.3);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng);
        let g0 = featurize_record(&mol, &FeaturizeOptions::default());
        let g1 = featurize_record(&mol.permuted(&perm), &FeaturizeOptions::default());
        for (k, &pk) in perm.iter().enumerate() {
            assert_eq!(g0.atom_features[k], g1.atom_features[pk], "atom {k} of {i}");
        }
        let p = predict(&model, &[&g0, &g1], 4).unwrap();
        for (a, b) in p[0].values.iter().zip(&p[1].values) {
            assert!(rel(*b, *a) < 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn inference_is_independent_of_batch_composition() {
    let mut model = Model::<f64>::init(small(9)).unwrap();
    perturb_running_stats(&mut model, 2);
    let mols = graphs(10, 64, 2..=20);
    let together = predict(&model, &refs(&mols), 64).unwrap();
    for (i, m) in mols.iter().enumerate().step_by(7) {
        let alone = predict(&model, &[m], 1).unwrap();
        for (a, b) in alone[0].values.iter().zip(&together[i].values) {
            assert!(rel(*b, *a) < 1e-6);
        }
    }
}

#[test]
fn batched_and_reference_training_passes_agree() {
    let model = Model::<f64>::init(small(11)).unwrap();
    let mols = graphs(12, 6, 1..=15);
    let r = refs(&mols);
    let targets = model.targets(&r);
    let run = |exec| {
        let b = build_instance_graphs(&model, &r, BnMode::Train, Some(&targets)).unwrap();
        run_batch(&model, b, exec, true).unwrap()
    };
    let (a, b) = (run(Execution::Batched), run(Execution::Reference));
    assert!(rel(a.loss.unwrap(), b.loss.unwrap()) < 1e-12);
    for (ga, gb) in a.grads.unwrap().iter().zip(b.grads.as_ref().unwrap()) {
        for (x, y) in ga.data().iter().zip(gb.data()) {
            assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()), "{x} vs {y}");
        }
    }
    assert!(a.invocations < b.invocations);
    assert_eq!(a.bn_stats.len(), 2);
    assert_eq!(b.bn_stats.len(), 2);
}

#[test]
fn graph_loss_matches_multi_task_loss() {
    let model = Model::<f64>::init(small(13)).unwrap();
    let mols = graphs(14, 5, 3..=10);
    let r = refs(&mols);
    let targets = model.targets(&r);
    let b = build_instance_graphs(&model, &r, BnMode::Train, Some(&targets)).unwrap();
    let run = run_batch(&model, b, Execution::Reference, false).unwrap();
    let expect = multi_task_loss(&run.predictions, &targets, &model.config.task_weights()).unwrap();
    assert!(rel(run.loss.unwrap(), expect) < 1e-12);
}

#[test]
fn multi_task_loss_examples() {
    assert_eq!(multi_task_loss(&[vec![1.0], vec![3.0]], &[vec![Some(1.0)], vec![Some(3.0)]], &[1.0]).unwrap(), 0.0);
    let l = multi_task_loss(&[vec![1.0], vec![3.0]], &[vec![Some(1.0)], vec![Some(1.0)]], &[1.0]).unwrap();
    assert!((l - 2f64.sqrt()).abs() < 1e-15);
    let preds = [vec![1.0, 0.0], vec![2.0, 1.0]];
    let labels = [vec![Some(0.0), Some(1.0)], vec![Some(2.0), None]];
    let (r1, r2) = ((0.5f64).sqrt(), 1.0);
    let l = multi_task_loss(&preds, &labels, &[1.0, 2.0]).unwrap();
    assert!((l - (r1 + 2.0 * r2)).abs() < 1e-15);
    // unlabeled task contributes nothing
    let l = multi_task_loss(&preds, &[vec![Some(0.0), None], vec![Some(2.0), None]], &[1.0, 5.0]).unwrap();
    assert!((l - (0.5f64).sqrt()).abs() < 1e-15);
    assert!(matches!(
        multi_task_loss(&preds, &[vec![None, None], vec![None, None]], &[1.0, 1.0]),
        Err(Error::NoSupervision)
    ));
}

#[test]
fn unsupervised_batch_is_rejected() {
    let model = Model::<f64>::init(small(15)).unwrap();
    let mols = graphs(16, 2, 3..=5);
    let targets = vec![vec![None, None]; 2];
    let err = build_instance_graphs(&model, &refs(&mols), BnMode::Train, Some(&targets)).unwrap_err();
    assert!(matches!(err, Error::NoSupervision));
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let cfg = ModelConfig { layers: 2, widths: vec![3], head: vec![4], ..config(&["a", "b"]) };
    for seed in 0..3 {
        let mut model = Model::<f64>::init(ModelConfig { seed, ..cfg.clone() }).unwrap();
        for id in 0..model.params.len() {
            if model.params.entry(id).trainable {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + id as u64);
                for v in model.params.get_mut(id).data_mut() {
                    *v += rng.random_range(-0.1..0.1);
                }
            }
        }
        let mols = graphs(100 + seed, 2, 3..=7);
        let r = refs(&mols);
        let targets = model.targets(&r);
        let b = build_instance_graphs(&model, &r, BnMode::Train, Some(&targets)).unwrap();
        let trial =
            Trial { graph: b.graph, params: model.params.clone(), feeds: b.feeds, loss: b.loss.unwrap(), wrt_inputs: vec![] };
        let report = trial.check().unwrap();
        assert!(report.max_rel_error < 1e-4, "seed {seed}: {report:?}");
    }
}

#[test]
fn node_count_is_linear_in_copies() {
    let model = Model::<f64>::init(small(17)).unwrap();
    let mol = featurize_record(&fixtures::methane(), &FeaturizeOptions::default());
    let count = |k: usize| {
        let mols = vec![&mol; k];
        build_instance_graphs(&model, &mols, BnMode::Infer, None).unwrap().graph.len()
    };
    let (c1, c2, c4) = (count(1), count(2), count(4));
    assert_eq!(c2 - c1, c1);
    assert_eq!(c4 - c2, 2 * c1);
}

#[test]
fn archive_round_trip() {
    let mut model = Model::<f32>::init(small(18)).unwrap();
    model.label_norm[0] = LabelNorm { mean: 2.0, std: 0.5 };
    let mut buf = Vec::new();
    model.to_archive().write(&mut buf).unwrap();
    let back = Model::<f32>::from_archive(&crate::engine::Archive::read(&buf[..]).unwrap()).unwrap();
    assert_eq!(back, model);
}

#[test]
fn label_norm_round_trip() {
    let n = LabelNorm::fit(&[1.0, 3.0]);
    assert_eq!((n.mean, n.std), (2.0, 1.0));
    assert_eq!(n.invert(n.apply(7.5)), 7.5);
    assert_eq!(LabelNorm::fit(&[4.0, 4.0]).std, 1.0);
}
