use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::molio::MoleculeRecord;

pub const DEFAULT_WIDTH: usize = 2048;
pub const DEFAULT_RADIUS: usize = 2;

/// Fixed-width bit set of hashed circular atom environments.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fingerprint {
    pub width: usize,
    pub radius: usize,
    words: Vec<u64>,
}

impl Fingerprint {
    pub fn empty(width: usize, radius: usize) -> Result<Self> {
        if !width.is_power_of_two() {
            return Err(Error::Config(format!("fingerprint width {width} is not a power of two")));
        }
        Ok(Fingerprint { width, radius, words: vec![0; width.div_ceil(64)] })
    }

    pub fn from_bits(width: usize, bits: &[usize]) -> Result<Self> {
        let mut fp = Fingerprint::empty(width, 0)?;
        for &b in bits {
            fp.set(b % width);
        }
        Ok(fp)
    }

    fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn bits(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.width).filter(|&b| self.get(b))
    }
}

/// Iterative neighborhood hashing over heavy atoms. Round 0 hashes element,
/// heavy-atom degree, formal charge and aromatic flag; round `r` hashes the
/// atom's previous code with its sorted `(bond order, neighbor code)` pairs.
/// Every code of every round sets bit `code mod width`.
pub fn fingerprint(mol: &MoleculeRecord, radius: usize, width: usize) -> Result<Fingerprint> {
    let mut fp = Fingerprint::empty(width, radius)?;
    let heavy: Vec<usize> = (0..mol.atoms.len()).filter(|&i| !mol.atoms[i].is_hydrogen()).collect();
    let mut slot = vec![usize::MAX; mol.atoms.len()];
    for (k, &i) in heavy.iter().enumerate() {
        slot[i] = k;
    }
    let mut adj: Vec<Vec<(usize, &str)>> = vec![Vec::new(); heavy.len()];
    for b in &mol.bonds {
        let (x, y) = (slot[b.a], slot[b.b]);
        if x != usize::MAX && y != usize::MAX {
            adj[x].push((y, b.order.code()));
            adj[y].push((x, b.order.code()));
        }
    }
    let mut codes: Vec<u64> = heavy
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let a = &mol.atoms[i];
            let mut h = Fnv1a::new();
            h.write(a.element.as_bytes())
                .write(&[0xff])
                .write_u64(adj[k].len() as u64)
                .write_i64(i64::from(a.formal_charge))
                .write(&[u8::from(a.aromatic)]);
            h.finish()
        })
        .collect();
    let mut emit = |codes: &[u64]| {
        for &c in codes {
            fp.set((c % width as u64) as usize);
        }
    };
    emit(&codes);
    for round in 1..=radius {
        let next: Vec<u64> = (0..heavy.len())
            .map(|k| {
                let mut env: Vec<(&str, u64)> = adj[k].iter().map(|&(j, order)| (order, codes[j])).collect();
                env.sort_unstable();
                let mut h = Fnv1a::new();
                h.write_u64(round as u64).write_u64(codes[k]);
                for (order, code) in env {
                    h.write(order.as_bytes()).write(&[0xff]).write_u64(code);
                }
                h.finish()
            })
            .collect();
        codes = next;
        emit(&codes);
    }
    Ok(fp)
}

/// `|a ∧ b| / |a ∨ b|`, with 1.0 for two empty sets.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64> {
    if a.width != b.width {
        return Err(Error::FingerprintWidth(a.width, b.width));
    }
    let (mut and, mut or) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        and += (x & y).count_ones();
        or += (x | y).count_ones();
    }
    Ok(if or == 0 { 1.0 } else { f64::from(and) / f64::from(or) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::molio::{Atom, Bond, BondOrder};

    fn ethane() -> MoleculeRecord {
        let atoms = vec![Atom::new("C", [0.0; 3]), Atom::new("C", [1.54, 0.0, 0.0])];
        MoleculeRecord::new("ethane", atoms, vec![Bond::new(0, 1, BondOrder::Single)])
    }

    #[test]
    fn tanimoto_identities() {
        let a = Fingerprint::from_bits(64, &[1, 2, 3]).unwrap();
        let b = Fingerprint::from_bits(64, &[2, 3, 4]).unwrap();
        let c = Fingerprint::from_bits(64, &[10, 11]).unwrap();
        assert_eq!(tanimoto(&a, &a).unwrap(), 1.0);
        assert_eq!(tanimoto(&a, &c).unwrap(), 0.0);
        assert_eq!(tanimoto(&a, &b).unwrap(), 0.5);
        assert_eq!(tanimoto(&b, &a).unwrap(), 0.5);
        let e = Fingerprint::empty(64, 0).unwrap();
        assert_eq!(tanimoto(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn width_checks() {
        assert!(Fingerprint::empty(1000, 2).is_err());
        let a = Fingerprint::empty(64, 0).unwrap();
        let b = Fingerprint::empty(128, 0).unwrap();
        assert!(matches!(tanimoto(&a, &b), Err(Error::FingerprintWidth(64, 128))));
    }

    #[test]
    fn deterministic_and_discriminating() {
        let m = fixtures::methane();
        let f1 = fingerprint(&m, 2, 2048).unwrap();
        assert_eq!(f1, fingerprint(&m, 2, 2048).unwrap());
        assert!(f1.count() > 0);
        assert_ne!(f1, fingerprint(&ethane(), 2, 2048).unwrap());
    }

    #[test]
    fn hydrogens_are_ignored() {
        // methane with explicit hydrogens equals a lone carbon
        let lone = MoleculeRecord::new("c", vec![Atom::new("C", [0.0; 3])], vec![]);
        assert_eq!(fingerprint(&fixtures::methane(), 2, 1024).unwrap(), fingerprint(&lone, 2, 1024).unwrap());
    }

    #[test]
    fn relabeling_leaves_bits_unchanged() {
        let m = fixtures::ethanol();
        let p = m.permuted(&[2, 0, 1]);
        assert_eq!(fingerprint(&m, 3, 512).unwrap(), fingerprint(&p, 3, 512).unwrap());
    }
}
