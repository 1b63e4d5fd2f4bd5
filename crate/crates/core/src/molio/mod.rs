//! Molecule object model, the JSON Lines dataset format, ring perception and
//! the chronological train/test split.

mod dataset;
mod rings;
mod split;

use std::collections::BTreeMap;

pub use dataset::{parse_dataset, read_dataset_file, write_dataset, DatasetFormat, ParsedDataset, DATASET_HEADER};
pub use rings::{perceive_rings, RingInfo, MAX_RING, MIN_RING};
pub use split::{chronological_order, chronological_split, tail_count};

use crate::error::{Error, Result};

/// Supported element symbols, in one-hot order. The final slot is the catch-all.
pub const ELEMENTS: [&str; 23] = [
    "H", "C", "N", "O", "F", "Na", "Mg", "Si", "P", "S", "Cl", "K", "Ca", "Mn", "Fe", "Cu", "Zn", "Se",
    "Br", "I", "B", "Li", "Other",
];

pub const OTHER_ELEMENT: usize = ELEMENTS.len() - 1;

/// Index of `symbol` in [`ELEMENTS`], or `None` when it falls into "Other".
pub fn element_index(symbol: &str) -> Option<usize> {
    ELEMENTS[..OTHER_ELEMENT].iter().position(|&e| e == symbol)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub element: String,
    pub position: [f64; 3],
    pub formal_charge: i32,
    pub aromatic: bool,
}

impl Atom {
    pub fn new(element: &str, position: [f64; 3]) -> Self {
        Atom { element: element.to_string(), position, formal_charge: 0, aromatic: false }
    }

    /// One-hot slot of this atom's element; unsupported symbols map to "Other".
    pub fn element_slot(&self) -> usize {
        element_index(&self.element).unwrap_or(OTHER_ELEMENT)
    }

    pub fn is_hydrogen(&self) -> bool {
        self.element == "H"
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub fn code(self) -> &'static str {
        match self {
            BondOrder::Single => "1",
            BondOrder::Double => "2",
            BondOrder::Triple => "3",
            BondOrder::Aromatic => "ar",
        }
    }

    pub fn from_code(code: &str) -> Option<Self> {
        match code {
            "1" => Some(BondOrder::Single),
            "2" => Some(BondOrder::Double),
            "3" => Some(BondOrder::Triple),
            "ar" => Some(BondOrder::Aromatic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub a: usize,
    pub b: usize,
    pub order: BondOrder,
}

impl Bond {
    pub fn new(a: usize, b: usize, order: BondOrder) -> Self {
        Bond { a, b, order }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MoleculeRecord {
    pub id: String,
    pub atoms: Vec<Atom>,
    pub bonds: Vec<Bond>,
    pub labels: BTreeMap<String, f64>,
    pub registration_date: Option<String>,
    /// Optional engineered descriptor vector carried alongside the structure.
    pub features: Option<Vec<f64>>,
}

impl MoleculeRecord {
    pub fn new(id: impl Into<String>, atoms: Vec<Atom>, bonds: Vec<Bond>) -> Self {
        MoleculeRecord { id: id.into(), atoms, bonds, ..Default::default() }
    }

    /// Checks graph well-formedness: at least one atom, finite coordinates,
    /// bond endpoints distinct and in range, no duplicate unordered pairs.
    pub fn validate(&self) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(Error::InvalidRecord { record: self.id.clone(), msg: "molecule has no atoms".into() });
        }
        for (i, atom) in self.atoms.iter().enumerate() {
            if atom.position.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidRecord {
                    record: self.id.clone(),
                    msg: format!("atom {i} has a non-finite coordinate"),
                });
            }
        }
        let n = self.atoms.len();
        let mut seen = std::collections::BTreeSet::new();
        for bond in &self.bonds {
            for idx in [bond.a, bond.b] {
                if idx >= n {
                    return Err(Error::BondIndex { record: self.id.clone(), index: idx, atoms: n });
                }
            }
            if bond.a == bond.b {
                return Err(Error::InvalidRecord {
                    record: self.id.clone(),
                    msg: format!("bond joins atom {} to itself", bond.a),
                });
            }
            if !seen.insert((bond.a.min(bond.b), bond.a.max(bond.b))) {
                return Err(Error::InvalidRecord {
                    record: self.id.clone(),
                    msg: format!("duplicate bond {}-{}", bond.a, bond.b),
                });
            }
        }
        Ok(())
    }

    /// Sorted adjacency lists of the bond graph.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.atoms.len()];
        for bond in &self.bonds {
            adj[bond.a].push(bond.b);
            adj[bond.b].push(bond.a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn bond_between(&self, a: usize, b: usize) -> Option<&Bond> {
        self.bonds.iter().find(|bd| (bd.a == a && bd.b == b) || (bd.a == b && bd.b == a))
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        let (p, q) = (self.atoms[a].position, self.atoms[b].position);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    }

    /// Relabels atoms so that old atom `i` becomes atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MoleculeRecord {
        assert_eq!(perm.len(), self.atoms.len());
        let mut atoms = self.atoms.clone();
        for (old, atom) in self.atoms.iter().enumerate() {
            atoms[perm[old]] = atom.clone();
        }
        let bonds = self.bonds.iter().map(|b| Bond::new(perm[b.a], perm[b.b], b.order)).collect();
        MoleculeRecord { atoms, bonds, ..self.clone() }
    }

    /// Number of connected components of the bond graph.
    pub fn component_count(&self) -> usize {
        let adj = self.adjacency();
        let mut seen = vec![false; adj.len()];
        let mut count = 0;
        for start in 0..adj.len() {
            if seen[start] {
                continue;
            }
            count += 1;
            seen[start] = true;
            let mut stack = vec![start];
            while let Some(v) = stack.pop() {
                for &w in &adj[v] {
                    if !seen[w] {
                        seen[w] = true;
                        stack.push(w);
                    }
                }
            }
        }
        count
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn element_table_has_23_slots() {
        assert_eq!(ELEMENTS.len(), 23);
        assert_eq!(element_index("C"), Some(1));
        assert_eq!(element_index("Xe"), None);
        assert_eq!(element_index("Other"), None);
        assert_eq!(Atom::new("U", [0.0; 3]).element_slot(), OTHER_ELEMENT);
    }

    #[test]
    fn validate_rejects_bad_graphs() {
        let atoms = vec![Atom::new("C", [0.0; 3]), Atom::new("C", [1.5, 0.0, 0.0])];
        let dup = MoleculeRecord::new(
            "dup",
            atoms.clone(),
            vec![Bond::new(0, 1, BondOrder::Single), Bond::new(1, 0, BondOrder::Double)],
        );
        assert!(matches!(dup.validate(), Err(Error::InvalidRecord { .. })));
        let self_loop = MoleculeRecord::new("loop", atoms.clone(), vec![Bond::new(1, 1, BondOrder::Single)]);
        assert!(self_loop.validate().is_err());
        let empty = MoleculeRecord::new("empty", vec![], vec![]);
        assert!(empty.validate().is_err());
        let oob = MoleculeRecord::new("oob", atoms, vec![Bond::new(0, 9, BondOrder::Single)]);
        assert!(matches!(oob.validate(), Err(Error::BondIndex { index: 9, .. })));
    }
}
