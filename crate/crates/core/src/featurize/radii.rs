use std::sync::OnceLock;

use crate::molio::{ELEMENTS, OTHER_ELEMENT};

const TABLE: &str = include_str!("../../data/radii.tsv");

/// Version tag of the bundled radii table; recorded in feature caches.
pub const RADII_TABLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Radii {
    pub vdw: f64,
    pub covalent: f64,
}

fn table() -> &'static [Radii; 23] {
    static PARSED: OnceLock<[Radii; 23]> = OnceLock::new();
    PARSED.get_or_init(|| {
        let mut out = [Radii { vdw: 0.0, covalent: 0.0 }; 23];
        let mut filled = [false; 23];
        for line in TABLE.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let cols: Vec<&str> = line.split('\t').collect();
            assert_eq!(cols.len(), 3, "bad radii row: {line}");
            let slot = ELEMENTS.iter().position(|&e| e == cols[0]).expect("radii row for unknown element");
            out[slot] = Radii { vdw: cols[1].parse().unwrap(), covalent: cols[2].parse().unwrap() };
            filled[slot] = true;
        }
        assert!(filled.iter().all(|&f| f), "radii table incomplete");
        out
    })
}

/// Radii for an element slot (see [`ELEMENTS`]).
pub fn radii_for_slot(slot: usize) -> Radii {
    table()[slot.min(OTHER_ELEMENT)]
}
