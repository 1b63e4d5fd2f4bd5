use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use chemigraph::evalkit::{fingerprint, similarity_report, tanimoto, Fingerprint, DEFAULT_RADIUS, DEFAULT_WIDTH};
use chemigraph::featurize::{featurize_record, FeaturizeOptions};
use chemigraph::finetune::{select_models, Candidate, CandidatePool};
use chemigraph::model::LabelNorm;
use chemigraph::molio::tail_count;
use chemigraph::synth::random_molecule;

fn bit_set(width: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..width, 0..24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn featurization_commutes_with_relabeling(seed in any::<u64>(), n in 1usize..30, ring_rate in 0.0f64..0.6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mol = random_molecule(&mut rng, "p", n, ring_rate);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let g0 = featurize_record(&mol, &FeaturizeOptions::default());
        let g1 = featurize_record(&mol.permuted(&perm), &FeaturizeOptions::default());
        for k in 0..n {
            prop_assert_eq!(g0.atom_features[k], g1.atom_features[perm[k]]);
            let mut moved: Vec<_> = g0.neighbors[k].iter().map(|nb| (perm[nb.index], nb.pair.0.map(f64::to_bits))).collect();
            let mut there: Vec<_> = g1.neighbors[perm[k]].iter().map(|nb| (nb.index, nb.pair.0.map(f64::to_bits))).collect();
            moved.sort();
            there.sort();
            prop_assert_eq!(moved, there);
        }
    }

    #[test]
    fn fingerprints_ignore_relabeling(seed in any::<u64>(), n in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mol = random_molecule(&mut rng, "p", n, 0.3);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let a = fingerprint(&mol, DEFAULT_RADIUS, DEFAULT_WIDTH).unwrap();
        let b = fingerprint(&mol.permuted(&perm), DEFAULT_RADIUS, DEFAULT_WIDTH).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn tanimoto_is_symmetric_and_bounded(x in bit_set(64), y in bit_set(64)) {
        let (a, b) = (Fingerprint::from_bits(64, &x).unwrap(), Fingerprint::from_bits(64, &y).unwrap());
        let ab = tanimoto(&a, &b).unwrap();
        prop_assert_eq!(ab, tanimoto(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        if a.count() > 0 {
            prop_assert_eq!(tanimoto(&a, &a).unwrap(), 1.0);
        }
    }

    #[test]
    fn similarity_bins_conserve_counts(
        train in prop::collection::vec(bit_set(32), 1..8),
        test in prop::collection::vec((bit_set(32), prop::option::of(-5.0f64..5.0)), 0..12),
        cuts in prop::collection::btree_set(1u32..100, 0..5),
    ) {
        let fp = |bits: &Vec<usize>| Fingerprint::from_bits(32, bits).unwrap();
        let train: Vec<Fingerprint> = train.iter().map(fp).collect();
        let test_fps: Vec<Fingerprint> = test.iter().map(|t| fp(&t.0)).collect();
        let labels: Vec<Option<f64>> = test.iter().map(|t| t.1).collect();
        let predictions = vec![0.0; test.len()];
        let mut edges = vec![0.0];
        edges.extend(cuts.iter().map(|&c| c as f64 / 100.0));
        edges.push(1.0);
        let report = similarity_report(&train, &test_fps, &predictions, &labels, &edges).unwrap();
        prop_assert_eq!(report.bins.len(), edges.len() - 1);
        prop_assert_eq!(report.bins.iter().map(|b| b.n).sum::<usize>(), test.len());
        prop_assert_eq!(report.bins.iter().map(|b| b.labeled).sum::<usize>(), labels.iter().flatten().count());
    }

    #[test]
    fn selection_is_sorted_and_sized(
        entries in prop::collection::vec((0u8..3, 0usize..6, 0.0f64..2.0), 1..20),
        k in 1usize..10,
    ) {
        let candidates = entries
            .iter()
            .map(|&(c, epoch, val_rmse)| Candidate { checkpoint: format!("{c}-{epoch}").into(), config_id: format!("c{c}"), epoch, val_rmse })
            .collect();
        let pool = CandidatePool::new(candidates).unwrap();
        let unique: std::collections::BTreeSet<_> = entries.iter().map(|e| (e.0, e.1)).collect();
        let picked = select_models(&pool, k).unwrap();
        prop_assert_eq!(picked.len(), k.min(unique.len()));
        prop_assert!(picked.candidates.windows(2).all(|w| w[0].val_rmse <= w[1].val_rmse));
    }

    #[test]
    fn label_scaling_round_trips(values in prop::collection::vec(-1e3f64..1e3, 1..50), y in -1e3f64..1e3) {
        let norm = LabelNorm::fit(&values);
        prop_assert!((norm.apply(norm.invert(y)) - y).abs() <= 1e-9 * (1.0 + y.abs()));
    }

    #[test]
    fn tail_count_stays_in_range(n in 0usize..1000, fraction in 0.0f64..=1.0) {
        let t = tail_count(n, fraction);
        prop_assert!(t <= n);
        prop_assert!(t as f64 >= n as f64 * fraction - 1e-9);
        prop_assert!((t as f64) < n as f64 * fraction + 1.0);
    }
}
