use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Atom, Bond, BondOrder, MoleculeRecord, OTHER_ELEMENT};
use crate::error::{Error, Result};

/// Key of the mandatory first line, `{"chemigraph_dataset":1}`.
pub const DATASET_HEADER: &str = "chemigraph_dataset";
const DATASET_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DatasetFormat {
    #[default]
    JsonLines,
}

#[derive(Debug, Clone, Default)]
pub struct ParsedDataset {
    pub records: Vec<MoleculeRecord>,
    /// Atoms whose element symbol fell into the "Other" slot.
    pub unknown_elements: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAtom {
    el: String,
    x: f64,
    y: f64,
    z: f64,
    #[serde(default)]
    q: i32,
    #[serde(default)]
    ar: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBond {
    a: usize,
    b: usize,
    order: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    date: Option<String>,
    atoms: Vec<RawAtom>,
    #[serde(default)]
    bonds: Vec<RawBond>,
    #[serde(default)]
    labels: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
}

fn loose_id(line: &str) -> String {
    serde_json::from_str::<serde_json::Value>(line)
        .ok()
        .and_then(|v| v.get("id").and_then(|id| id.as_str()).map(str::to_string))
        .unwrap_or_else(|| "?".to_string())
}

fn convert(raw: RawRecord, line: usize) -> Result<MoleculeRecord> {
    let atoms = raw
        .atoms
        .into_iter()
        .map(|a| Atom { element: a.el, position: [a.x, a.y, a.z], formal_charge: a.q, aromatic: a.ar })
        .collect();
    let mut bonds = Vec::with_capacity(raw.bonds.len());
    for b in raw.bonds {
        let order = BondOrder::from_code(&b.order).ok_or_else(|| Error::Parse {
            line,
            id: raw.id.clone(),
            msg: format!("unknown bond order '{}'", b.order),
        })?;
        bonds.push(Bond::new(b.a, b.b, order));
    }
    let record = MoleculeRecord {
        id: raw.id,
        atoms,
        bonds,
        labels: raw.labels,
        registration_date: raw.date,
        features: raw.features,
    };
    match record.validate() {
        Ok(()) => Ok(record),
        Err(err @ Error::BondIndex { .. }) => Err(err),
        Err(Error::InvalidRecord { record, msg }) => Err(Error::Parse { line, id: record, msg }),
        Err(other) => Err(other),
    }
}

/// Parses a dataset stream. Records come back in input order.
pub fn parse_dataset<R: BufRead>(stream: R, format: DatasetFormat) -> Result<ParsedDataset> {
    let DatasetFormat::JsonLines = format;
    let mut out = ParsedDataset::default();
    let mut seen_header = false;
    for (idx, line) in stream.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if !seen_header {
            let header: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
                line: line_no,
                id: "?".into(),
                msg: format!("bad header: {e}"),
            })?;
            match header.get(DATASET_HEADER).and_then(|v| v.as_u64()) {
                Some(DATASET_VERSION) => {
                    seen_header = true;
                    continue;
                }
                Some(v) => {
                    return Err(Error::Parse {
                        line: line_no,
                        id: "?".into(),
                        msg: format!("unsupported dataset version {v}"),
                    })
                }
                None => {
                    return Err(Error::Parse {
                        line: line_no,
                        id: loose_id(trimmed),
                        msg: format!("missing {{\"{DATASET_HEADER}\":1}} header line"),
                    })
                }
            }
        }
        let raw: RawRecord = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            line: line_no,
            id: loose_id(trimmed),
            msg: e.to_string(),
        })?;
        let record = convert(raw, line_no)?;
        let unknown = record.atoms.iter().filter(|a| a.element_slot() == OTHER_ELEMENT).count();
        if unknown > 0 {
            log::warn!("record '{}': {unknown} atom(s) mapped to element 'Other'", record.id);
        }
        out.unknown_elements += unknown;
        out.records.push(record);
    }
    Ok(out)
}

pub fn read_dataset_file(path: &Path) -> Result<ParsedDataset> {
    let file = crate::error::open_file(path)?;
    parse_dataset(BufReader::new(file), DatasetFormat::JsonLines)
}

/// Writes records in the JSON Lines dataset format, header first.
pub fn write_dataset<W: Write>(records: &[MoleculeRecord], mut out: W) -> Result<()> {
    writeln!(out, "{{\"{DATASET_HEADER}\":{DATASET_VERSION}}}")?;
    for r in records {
        let raw = RawRecord {
            id: r.id.clone(),
            date: r.registration_date.clone(),
            atoms: r
                .atoms
                .iter()
                .map(|a| RawAtom {
                    el: a.element.clone(),
                    x: a.position[0],
                    y: a.position[1],
                    z: a.position[2],
                    q: a.formal_charge,
                    ar: a.aromatic,
                })
                .collect(),
            bonds: r.bonds.iter().map(|b| RawBond { a: b.a, b: b.b, order: b.order.code().into() }).collect(),
            labels: r.labels.clone(),
            features: r.features.clone(),
        };
        serde_json::to_writer(&mut out, &raw)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
