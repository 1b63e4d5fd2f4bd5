//! Binary feature cache.
//!
//! Layout (little endian): magic `CHGFEAT\0`, `u32` version, `u64` header length
//! plus a JSON [`CacheHeader`], `u64` molecule count, then one block per molecule:
//! `u64` block length followed by the block body (id, atom rows, neighbor
//! lists, labels, explicit features).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AtomFeatureVector, FeaturizeOptions, MolGraph, Neighbor, PairFeatureVector, ATOM_WIDTH, PAIR_WIDTH};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"CHGFEAT\0";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub options: FeaturizeOptions,
    pub radii_table: u32,
    pub seed: u64,
    /// Resolved run configuration that produced the cache.
    pub config: serde_json::Value,
}

struct Block(Vec<u8>);

impl Block {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("feature cache block truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 in cache".into()))
    }
}

fn encode(g: &MolGraph) -> Vec<u8> {
    let mut b = Block(Vec::new());
    b.str(&g.id);
    b.u64(g.atom_features.len() as u64);
    for row in &g.atom_features {
        row.0.iter().for_each(|&v| b.f64(v));
    }
    for list in &g.neighbors {
        b.u64(list.len() as u64);
        for nb in list {
            b.u64(nb.index as u64);
            nb.pair.0.iter().for_each(|&v| b.f64(v));
        }
    }
    b.u64(g.labels.len() as u64);
    for (k, &v) in &g.labels {
        b.str(k);
        b.f64(v);
    }
    match &g.explicit {
        None => b.u64(u64::MAX),
        Some(x) => {
            b.u64(x.len() as u64);
            x.iter().for_each(|&v| b.f64(v));
        }
    }
    b.0
}

fn decode(buf: &[u8]) -> Result<MolGraph> {
    let mut c = Cursor { buf, pos: 0 };
    let id = c.str()?;
    let n = c.len()?;
    let mut atom_features = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = [0.0; ATOM_WIDTH];
        for v in row.iter_mut() {
            *v = c.f64()?;
        }
        atom_features.push(AtomFeatureVector(row));
    }
    let mut neighbors = Vec::with_capacity(n);
    for _ in 0..n {
        let deg = c.len()?;
        let mut list = Vec::with_capacity(deg);
        for _ in 0..deg {
            let index = c.len()?;
            let mut pair = [0.0; PAIR_WIDTH];
            for v in pair.iter_mut() {
                *v = c.f64()?;
            }
            list.push(Neighbor { index, pair: PairFeatureVector(pair) });
        }
        neighbors.push(list);
    }
    let mut labels = BTreeMap::new();
    for _ in 0..c.len()? {
        let k = c.str()?;
        labels.insert(k, c.f64()?);
    }
    let explicit = match c.u64()? {
        u64::MAX => None,
        len => Some((0..len).map(|_| c.f64()).collect::<Result<Vec<_>>>()?),
    };
    if c.pos != buf.len() {
        return Err(Error::Checkpoint(format!("trailing bytes in cache block for '{id}'")));
    }
    Ok(MolGraph { id, atom_features, neighbors, labels, explicit })
}

pub fn write_cache<W: Write>(header: &CacheHeader, graphs: &[MolGraph], mut out: W) -> Result<()> {
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&CACHE_VERSION.to_le_bytes())?;
    let header = serde_json::to_vec(header)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&(graphs.len() as u64).to_le_bytes())?;
    for g in graphs {
        let block = encode(g);
        out.write_all(&(block.len() as u64).to_le_bytes())?;
        out.write_all(&block)?;
    }
    Ok(())
}

pub fn read_cache<R: Read>(mut input: R) -> Result<(CacheHeader, Vec<MolGraph>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::Checkpoint("not a feature cache (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    input.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != CACHE_VERSION {
        return Err(Error::Checkpoint(format!("unsupported feature cache version {version}")));
    }
    let read_u64 = |input: &mut R| -> Result<u64> {
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    };
    let header_len = read_u64(&mut input)? as usize;
    let mut header = vec![0u8; header_len];
    input.read_exact(&mut header)?;
    let header: CacheHeader = serde_json::from_slice(&header)?;
    let count = read_u64(&mut input)?;
    let mut graphs = Vec::new();
    for _ in 0..count {
        let len = read_u64(&mut input)? as usize;
        let mut block = vec![0u8; len];
        input.read_exact(&mut block)?;
        graphs.push(decode(&block)?);
    }
    Ok((header, graphs))
}

pub fn write_cache_file(path: &Path, header: &CacheHeader, graphs: &[MolGraph]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_cache(header, graphs, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn read_cache_file(path: &Path) -> Result<(CacheHeader, Vec<MolGraph>)> {
    read_cache(BufReader::new(crate::error::open_file(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::featurize_record;
    use crate::fixtures::{benzene, methane};

    #[test]
    fn cache_round_trips_bit_exact() {
        let mut m = methane();
        m.features = Some(vec![0.5, -1.25]);
        let graphs: Vec<MolGraph> =
            [m, benzene()].iter().map(|r| featurize_record(r, &FeaturizeOptions::default())).collect();
        let header = CacheHeader {
            options: FeaturizeOptions { spatial_cutoff: Some(4.5) },
            radii_table: super::super::RADII_TABLE_VERSION,
            seed: 7,
            config: serde_json::json!({"k": 1}),
        };
        let mut buf = Vec::new();
        write_cache(&header, &graphs, &mut buf).unwrap();
        let (h2, g2) = read_cache(buf.as_slice()).unwrap();
        assert_eq!(h2, header);
        assert_eq!(g2, graphs);
        let mut again = Vec::new();
        write_cache(&h2, &g2, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(read_cache(&b"NOTACACHE\0\0\0\0\0"[..]).is_err());
    }
}
