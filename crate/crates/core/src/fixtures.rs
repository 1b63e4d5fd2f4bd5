//! Small reference molecules with idealized geometry.

use crate::molio::{Atom, Bond, BondOrder, MoleculeRecord};

fn ring_positions(n: usize, radius: f64) -> Vec<[f64; 3]> {
    (0..n)
        .map(|i| {
            let t = std::f64::consts::TAU * i as f64 / n as f64;
            [radius * t.cos(), radius * t.sin(), 0.0]
        })
        .collect()
}

/// CH4 with C-H = 1.09 Å, hydrogens explicit.
pub fn methane() -> MoleculeRecord {
    let d = 1.09 / 3f64.sqrt();
    let mut atoms = vec![Atom::new("C", [0.0; 3])];
    for p in [[d, d, d], [d, -d, -d], [-d, d, -d], [-d, -d, d]] {
        atoms.push(Atom::new("H", p));
    }
    let bonds = (1..5).map(|h| Bond::new(0, h, BondOrder::Single)).collect();
    MoleculeRecord::new("methane", atoms, bonds)
}

/// Heavy-atom benzene, aromatic bonds of 1.39 Å.
pub fn benzene() -> MoleculeRecord {
    let atoms = ring_positions(6, 1.39)
        .into_iter()
        .map(|p| {
            let mut a = Atom::new("C", p);
            a.aromatic = true;
            a
        })
        .collect();
    let bonds = (0..6).map(|i| Bond::new(i, (i + 1) % 6, BondOrder::Aromatic)).collect();
    MoleculeRecord::new("benzene", atoms, bonds)
}

/// Heavy-atom cyclohexane drawn as a flat hexagon of 1.54 Å bonds.
pub fn cyclohexane() -> MoleculeRecord {
    let atoms = ring_positions(6, 1.54).into_iter().map(|p| Atom::new("C", p)).collect();
    let bonds = (0..6).map(|i| Bond::new(i, (i + 1) % 6, BondOrder::Single)).collect();
    MoleculeRecord::new("cyclohexane", atoms, bonds)
}

/// Ethanol heavy atoms: C-C-O.
pub fn ethanol() -> MoleculeRecord {
    let atoms = vec![Atom::new("C", [0.0; 3]), Atom::new("C", [1.52, 0.0, 0.0]), Atom::new("O", [2.0, 1.35, 0.0])];
    let bonds = vec![Bond::new(0, 1, BondOrder::Single), Bond::new(1, 2, BondOrder::Single)];
    MoleculeRecord::new("ethanol", atoms, bonds)
}
