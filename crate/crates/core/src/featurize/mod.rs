//! Quantized model input: 33-wide atom rows, 5-wide pair rows and neighbor lists.
//!
//! Atom row layout: `[element one-hot (23) | vdW radius, covalent radius |
//! ring counts for sizes 3..8 (6) | aromatic | formal charge]`.
//! Pair row layout: `[single, double, none | distance | same ring]`.

mod cache;
mod radii;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cache::{read_cache, read_cache_file, write_cache, write_cache_file, CacheHeader, CACHE_MAGIC, CACHE_VERSION};
pub use radii::{radii_for_slot, Radii, RADII_TABLE_VERSION};

use crate::molio::{perceive_rings, BondOrder, MoleculeRecord, RingInfo, ELEMENTS};

pub const ATOM_WIDTH: usize = 33;
pub const PAIR_WIDTH: usize = 5;

const RADII_OFFSET: usize = ELEMENTS.len();
const RING_OFFSET: usize = RADII_OFFSET + 2;
const AROMATIC_OFFSET: usize = RING_OFFSET + 6;
const CHARGE_OFFSET: usize = AROMATIC_OFFSET + 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtomFeatureVector(pub [f64; ATOM_WIDTH]);

impl AtomFeatureVector {
    pub fn element_one_hot(&self) -> &[f64] {
        &self.0[..RADII_OFFSET]
    }

    pub fn radii(&self) -> (f64, f64) {
        (self.0[RADII_OFFSET], self.0[RADII_OFFSET + 1])
    }

    pub fn ring_counts(&self) -> &[f64] {
        &self.0[RING_OFFSET..AROMATIC_OFFSET]
    }

    pub fn aromatic(&self) -> f64 {
        self.0[AROMATIC_OFFSET]
    }

    pub fn charge(&self) -> f64 {
        self.0[CHARGE_OFFSET]
    }
}

/// Bond categories of the pair one-hot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairBond {
    Single,
    Double,
    None,
}

impl PairBond {
    /// Single stays single; double, triple and aromatic collapse onto double.
    pub fn from_order(order: Option<BondOrder>) -> Self {
        match order {
            Some(BondOrder::Single) => PairBond::Single,
            Some(_) => PairBond::Double,
            None => PairBond::None,
        }
    }

    fn slot(self) -> usize {
        match self {
            PairBond::Single => 0,
            PairBond::Double => 1,
            PairBond::None => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairFeatureVector(pub [f64; PAIR_WIDTH]);

impl PairFeatureVector {
    pub fn bond(&self) -> PairBond {
        match self.0[..3].iter().position(|&v| v == 1.0) {
            Some(0) => PairBond::Single,
            Some(1) => PairBond::Double,
            _ => PairBond::None,
        }
    }

    pub fn distance(&self) -> f64 {
        self.0[3]
    }

    pub fn same_ring(&self) -> bool {
        self.0[4] == 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub pair: PairFeatureVector,
}

/// Per-molecule model input.
#[derive(Debug, Clone, PartialEq)]
pub struct MolGraph {
    pub id: String,
    pub atom_features: Vec<AtomFeatureVector>,
    pub neighbors: Vec<Vec<Neighbor>>,
    pub labels: BTreeMap<String, f64>,
    pub explicit: Option<Vec<f64>>,
}

impl MolGraph {
    pub fn atom_count(&self) -> usize {
        self.atom_features.len()
    }

    /// Number of directed neighbor entries (each unordered pair counted twice).
    pub fn pair_entries(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    pub fn isolated_atoms(&self) -> usize {
        if self.atom_count() < 2 {
            return 0;
        }
        self.neighbors.iter().filter(|n| n.is_empty()).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturizeOptions {
    /// When set, unbonded pairs within this distance (Å) also become neighbors.
    #[serde(default)]
    pub spatial_cutoff: Option<f64>,
}

pub fn atom_features(molecule: &MoleculeRecord, rings: &RingInfo, atom_index: usize) -> AtomFeatureVector {
    let atom = &molecule.atoms[atom_index];
    let mut v = [0.0; ATOM_WIDTH];
    let slot = atom.element_slot();
    v[slot] = 1.0;
    let r = radii_for_slot(slot);
    v[RADII_OFFSET] = r.vdw;
    v[RADII_OFFSET + 1] = r.covalent;
    for (k, &count) in rings.ring_counts(atom_index).iter().enumerate() {
        v[RING_OFFSET + k] = f64::from(count);
    }
    v[AROMATIC_OFFSET] = if atom.aromatic { 1.0 } else { 0.0 };
    v[CHARGE_OFFSET] = f64::from(atom.formal_charge);
    AtomFeatureVector(v)
}

pub fn pair_features(molecule: &MoleculeRecord, rings: &RingInfo, a: usize, b: usize) -> PairFeatureVector {
    debug_assert_ne!(a, b);
    let mut v = [0.0; PAIR_WIDTH];
    let bond = PairBond::from_order(molecule.bond_between(a, b).map(|bd| bd.order));
    v[bond.slot()] = 1.0;
    v[3] = molecule.distance(a, b);
    v[4] = if rings.same_ring(a, b) { 1.0 } else { 0.0 };
    PairFeatureVector(v)
}

/// Builds the model input. Neighbors are the bonded pairs plus, with a cutoff,
/// every unbonded pair within it; each list is sorted by neighbor index.
pub fn build_graph(molecule: &MoleculeRecord, rings: &RingInfo, spatial_cutoff: Option<f64>) -> MolGraph {
    let n = molecule.atoms.len();
    let atom_features = (0..n).map(|a| atom_features(molecule, rings, a)).collect();
    let mut linked = vec![Vec::new(); n];
    for bond in &molecule.bonds {
        linked[bond.a].push(bond.b);
        linked[bond.b].push(bond.a);
    }
    if let Some(cutoff) = spatial_cutoff {
        for a in 0..n {
            for b in a + 1..n {
                if molecule.bond_between(a, b).is_none() && molecule.distance(a, b) <= cutoff {
                    linked[a].push(b);
                    linked[b].push(a);
                }
            }
        }
    }
    let neighbors: Vec<Vec<Neighbor>> = linked
        .iter_mut()
        .enumerate()
        .map(|(a, list)| {
            list.sort_unstable();
            list.iter().map(|&b| Neighbor { index: b, pair: pair_features(molecule, rings, a, b) }).collect()
        })
        .collect();
    let graph = MolGraph {
        id: molecule.id.clone(),
        atom_features,
        neighbors,
        labels: molecule.labels.clone(),
        explicit: molecule.features.clone(),
    };
    if graph.isolated_atoms() > 0 {
        log::warn!("molecule '{}': {} atom(s) without neighbors", graph.id, graph.isolated_atoms());
    }
    graph
}

/// Ring perception plus graph construction for one record.
pub fn featurize_record(molecule: &MoleculeRecord, options: &FeaturizeOptions) -> MolGraph {
    let rings = perceive_rings(molecule);
    build_graph(molecule, &rings, options.spatial_cutoff)
}

/// Featurizes many records; order preserved. Work is spread over the current
/// rayon pool, results do not depend on the thread count.
pub fn featurize_all(records: &[MoleculeRecord], options: &FeaturizeOptions) -> Vec<MolGraph> {
    records.par_iter().map(|r| featurize_record(r, options)).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FeaturizeSummary {
    pub molecules: usize,
    pub atoms: usize,
    pub pair_entries: usize,
    pub isolated_atoms: usize,
    pub unknown_elements: usize,
}

impl FeaturizeSummary {
    pub fn of(graphs: &[MolGraph], unknown_elements: usize) -> Self {
        FeaturizeSummary {
            molecules: graphs.len(),
            atoms: graphs.iter().map(MolGraph::atom_count).sum(),
            pair_entries: graphs.iter().map(MolGraph::pair_entries).sum(),
            isolated_atoms: graphs.iter().map(MolGraph::isolated_atoms).sum(),
            unknown_elements,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molio::{Atom, Bond};
    use crate::fixtures::{benzene, cyclohexane, methane};

    #[test]
    fn atom_rows_are_33_wide_with_one_hot() {
        for mol in [methane(), benzene(), cyclohexane()] {
            let rings = perceive_rings(&mol);
            for a in 0..mol.atoms.len() {
                let f = atom_features(&mol, &rings, a);
                assert_eq!(f.0.len(), 33);
                assert_eq!(f.element_one_hot().iter().sum::<f64>(), 1.0);
                assert!(f.0.iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn cyclohexane_carbon() {
        let mol = cyclohexane();
        let rings = perceive_rings(&mol);
        let f = atom_features(&mol, &rings, 0);
        assert_eq!(f.ring_counts(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(f.aromatic(), 0.0);
    }

    #[test]
    fn benzene_carbon() {
        let mol = benzene();
        let rings = perceive_rings(&mol);
        let f = atom_features(&mol, &rings, 0);
        assert_eq!(f.aromatic(), 1.0);
        assert_eq!(f.element_one_hot()[1], 1.0);
        assert_eq!(f.radii(), (1.70, 0.76));
        assert_eq!(f.charge(), 0.0);
    }

    #[test]
    fn unbonded_pair_345() {
        let mol = MoleculeRecord::new("pair", vec![Atom::new("C", [0.0; 3]), Atom::new("O", [3.0, 4.0, 0.0])], vec![]);
        let rings = perceive_rings(&mol);
        let p = pair_features(&mol, &rings, 0, 1);
        assert_eq!(p.0, [0.0, 0.0, 1.0, 5.0, 0.0]);
    }

    #[test]
    fn aromatic_bond_maps_to_double() {
        let mol = benzene();
        let rings = perceive_rings(&mol);
        let p = pair_features(&mol, &rings, 0, 1);
        assert_eq!(&p.0[..3], &[0.0, 1.0, 0.0]);
        let expected = mol.distance(0, 1);
        assert!((p.distance() - expected).abs() < 1e-12);
        assert!((p.distance() - 1.39).abs() < 0.01);
        assert!(p.same_ring());
        assert_eq!(PairBond::from_order(Some(BondOrder::Triple)), PairBond::Double);
    }

    #[test]
    fn methane_bonded_neighbors() {
        let g = featurize_record(&methane(), &FeaturizeOptions::default());
        assert_eq!(g.neighbors[0].len(), 4);
        for h in 1..5 {
            assert_eq!(g.neighbors[h].len(), 1);
            assert_eq!(g.neighbors[h][0].index, 0);
        }
    }

    #[test]
    fn cutoff_adds_none_neighbors() {
        let mol = MoleculeRecord::new("two", vec![Atom::new("C", [0.0; 3]), Atom::new("C", [3.0, 0.0, 0.0])], vec![]);
        let bonded_only = featurize_record(&mol, &FeaturizeOptions::default());
        assert!(bonded_only.neighbors.iter().all(Vec::is_empty));
        assert_eq!(bonded_only.isolated_atoms(), 2);
        let g = featurize_record(&mol, &FeaturizeOptions { spatial_cutoff: Some(4.0) });
        for a in 0..2 {
            assert_eq!(g.neighbors[a].len(), 1);
            assert_eq!(g.neighbors[a][0].pair.bond(), PairBond::None);
        }
        let far = featurize_record(&mol, &FeaturizeOptions { spatial_cutoff: Some(2.0) });
        assert!(far.neighbors.iter().all(Vec::is_empty));
    }

    #[test]
    fn benzene_neighbor_relation_is_symmetric() {
        let mol = benzene();
        let g = featurize_record(&mol, &FeaturizeOptions::default());
        for a in 0..mol.atoms.len() {
            for b in 0..mol.atoms.len() {
                let ab = g.neighbors[a].iter().find(|n| n.index == b);
                let ba = g.neighbors[b].iter().find(|n| n.index == a);
                match (ab, ba) {
                    (Some(x), Some(y)) => assert_eq!(x.pair, y.pair),
                    (None, None) => assert!(mol.bond_between(a, b).is_none()),
                    _ => panic!("asymmetric neighbor relation at {a},{b}"),
                }
            }
            let bonded: Vec<usize> = mol.adjacency()[a].clone();
            let listed: Vec<usize> = g.neighbors[a].iter().map(|n| n.index).collect();
            assert_eq!(bonded, listed);
        }
        assert!(mol.bonds.iter().all(|b: &Bond| b.order == BondOrder::Aromatic));
    }
}
