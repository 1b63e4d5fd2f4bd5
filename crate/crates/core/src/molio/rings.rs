//! Ring perception over the bond graph.
//!
//! The minimum cycle basis is found from Horton candidates: for every root `v`
//! and edge `(x, y)`, the cycle formed by the BFS-tree paths `v..x`, `v..y` and
//! the edge, kept when the two paths meet only at `v`. Candidates are sorted by
//! length, ties broken by the sorted atom-index tuple, and accepted greedily
//! while linearly independent over GF(2) in edge space.
//!
//! A minimum basis is not unique in bridged systems, and index tie-breaking
//! would make ring features depend on atom order. The retained rings are
//! therefore the relevant cycles of size 3..=8: every cycle that is not a sum
//! of strictly shorter cycles. This is the union of all minimum bases and
//! equals the basis whenever the basis is unique.

use std::collections::{BTreeMap, HashSet, VecDeque};

use super::MoleculeRecord;

pub const MIN_RING: usize = 3;
pub const MAX_RING: usize = 8;
const SIZES: usize = MAX_RING - MIN_RING + 1;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RingInfo {
    /// Retained rings (sizes 3..=8), each listed in cycle order.
    pub rings: Vec<Vec<usize>>,
    /// Per atom, the number of retained rings of size 3..=8 containing it.
    pub counts: Vec<[u32; SIZES]>,
    /// Size of the full minimum cycle basis, including discarded large rings.
    pub basis_len: usize,
    membership: Vec<Vec<usize>>,
}

impl RingInfo {
    pub fn ring_counts(&self, atom: usize) -> [u32; SIZES] {
        self.counts[atom]
    }

    pub fn same_ring(&self, a: usize, b: usize) -> bool {
        let (ra, rb) = (&self.membership[a], &self.membership[b]);
        ra.iter().any(|r| rb.contains(r))
    }

    pub fn ring_count(&self) -> usize {
        self.rings.len()
    }

    pub fn in_ring(&self, atom: usize) -> bool {
        !self.membership[atom].is_empty()
    }
}

#[derive(Clone)]
struct EdgeSet(Vec<u64>);

impl EdgeSet {
    fn new(edges: usize) -> Self {
        EdgeSet(vec![0; edges.div_ceil(64).max(1)])
    }

    fn set(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn get(&self, i: usize) -> bool {
        self.0[i / 64] >> (i % 64) & 1 == 1
    }

    fn xor(&mut self, other: &EdgeSet) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a ^= b;
        }
    }

    fn lowest(&self) -> Option<usize> {
        self.0.iter().enumerate().find(|(_, w)| **w != 0).map(|(i, w)| i * 64 + w.trailing_zeros() as usize)
    }
}

struct Candidate {
    cycle: Vec<usize>,
    key: Vec<usize>,
    edges: EdgeSet,
}

fn bfs(adj: &[Vec<usize>], root: usize) -> (Vec<usize>, Vec<usize>) {
    let mut dist = vec![usize::MAX; adj.len()];
    let mut parent = vec![usize::MAX; adj.len()];
    dist[root] = 0;
    let mut queue = VecDeque::from([root]);
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                parent[w] = v;
                queue.push_back(w);
            }
        }
    }
    (dist, parent)
}

fn path_to_root(parent: &[usize], root: usize, mut v: usize) -> Vec<usize> {
    let mut path = vec![v];
    while v != root {
        v = parent[v];
        path.push(v);
    }
    path
}

/// Computes the SSSR of the molecule's bond graph.
pub fn perceive_rings(molecule: &MoleculeRecord) -> RingInfo {
    let n = molecule.atoms.len();
    let adj = molecule.adjacency();
    let mut edge_index = BTreeMap::new();
    for bond in &molecule.bonds {
        let key = (bond.a.min(bond.b), bond.a.max(bond.b));
        let next = edge_index.len();
        edge_index.entry(key).or_insert(next);
    }
    let m = edge_index.len();
    let components = molecule.component_count();
    let target = (m + components).saturating_sub(n);

    let mut info = RingInfo {
        rings: Vec::new(),
        counts: vec![[0; SIZES]; n],
        basis_len: 0,
        membership: vec![Vec::new(); n],
    };
    if target == 0 {
        return info;
    }

    let mut candidates = Vec::new();
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for root in 0..n {
        let (dist, parent) = bfs(&adj, root);
        for &(x, y) in edge_index.keys() {
            // tree edges close no cycle
            if dist[x] == usize::MAX || dist[y] == usize::MAX || parent[x] == y || parent[y] == x {
                continue;
            }
            let px = path_to_root(&parent, root, x);
            let py = path_to_root(&parent, root, y);
            // the two paths may share only the root
            let shared = px.iter().filter(|v| py.contains(v)).count();
            if shared != 1 {
                continue;
            }
            // cycle: root .. x, y .. (back to root)
            let mut cycle: Vec<usize> = px.iter().rev().copied().collect();
            cycle.extend(py.iter().take(py.len() - 1));
            let mut edges = EdgeSet::new(m);
            for i in 0..cycle.len() {
                let (a, b) = (cycle[i], cycle[(i + 1) % cycle.len()]);
                edges.set(edge_index[&(a.min(b), a.max(b))]);
            }
            if !seen.insert(edges.0.clone()) {
                continue;
            }
            let mut key = cycle.clone();
            key.sort_unstable();
            candidates.push(Candidate { cycle, key, edges });
        }
    }
    candidates.sort_by(|a, b| {
        (a.cycle.len(), &a.key).cmp(&(b.cycle.len(), &b.key)).then_with(|| a.edges.0.cmp(&b.edges.0))
    });

    // Gaussian elimination over GF(2): rows keyed by pivot edge.
    let mut reduced: BTreeMap<usize, EdgeSet> = BTreeMap::new();
    let mut basis_len = 0;
    for cand in candidates {
        let mut v = cand.edges.clone();
        while let Some(p) = v.lowest() {
            match reduced.get(&p) {
                Some(row) => v.xor(row),
                None => break,
            }
        }
        if let Some(p) = v.lowest() {
            debug_assert!(v.get(p));
            reduced.insert(p, v);
            basis_len += 1;
            if basis_len == target {
                break;
            }
        }
    }

    info.basis_len = basis_len;
    for ring in relevant_cycles(&adj, &edge_index, m) {
        let idx = info.rings.len();
        for &atom in &ring {
            info.counts[atom][ring.len() - MIN_RING] += 1;
            info.membership[atom].push(idx);
        }
        info.rings.push(ring);
    }
    info
}

/// Every simple cycle with at most `max_len` atoms, each listed once, starting
/// at its smallest atom.
pub(crate) fn simple_cycles(adj: &[Vec<usize>], max_len: usize) -> Vec<Vec<usize>> {
    fn dfs(adj: &[Vec<usize>], start: usize, path: &mut Vec<usize>, max_len: usize, out: &mut Vec<Vec<usize>>) {
        let v = *path.last().unwrap();
        for &w in &adj[v] {
            if w == start && path.len() >= 3 && path[1] < v {
                out.push(path.clone());
            } else if w > start && !path.contains(&w) && path.len() < max_len {
                path.push(w);
                dfs(adj, start, path, max_len, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    for s in 0..adj.len() {
        dfs(adj, s, &mut vec![s], max_len, &mut out);
    }
    out
}

/// Relevant cycles of size `MIN_RING..=MAX_RING`, ordered by size then sorted
/// atom tuple. All shorter cycles are enumerated, so the test against their
/// span is exact.
fn relevant_cycles(adj: &[Vec<usize>], edge_index: &BTreeMap<(usize, usize), usize>, m: usize) -> Vec<Vec<usize>> {
    let mut cycles: Vec<(Vec<usize>, Vec<usize>, EdgeSet)> = simple_cycles(adj, MAX_RING)
        .into_iter()
        .map(|c| {
            let mut edges = EdgeSet::new(m);
            for i in 0..c.len() {
                let (a, b) = (c[i], c[(i + 1) % c.len()]);
                edges.set(edge_index[&(a.min(b), a.max(b))]);
            }
            let mut key = c.clone();
            key.sort_unstable();
            (c, key, edges)
        })
        .collect();
    cycles.sort_by(|a, b| (a.0.len(), &a.1).cmp(&(b.0.len(), &b.1)));
    let reduce = |reduced: &BTreeMap<usize, EdgeSet>, mut v: EdgeSet| {
        while let Some(p) = v.lowest() {
            match reduced.get(&p) {
                Some(row) => v.xor(row),
                None => break,
            }
        }
        v
    };
    let mut reduced: BTreeMap<usize, EdgeSet> = BTreeMap::new();
    let mut out = Vec::new();
    let mut i = 0;
    while i < cycles.len() {
        let len = cycles[i].0.len();
        let group_end = cycles[i..].iter().position(|c| c.0.len() != len).map_or(cycles.len(), |p| i + p);
        let group = &cycles[i..group_end];
        // relevance is judged against strictly shorter cycles only
        for (cycle, _, edges) in group {
            if reduce(&reduced, edges.clone()).lowest().is_some() {
                out.push(cycle.clone());
            }
        }
        for (_, _, edges) in group {
            let v = reduce(&reduced, edges.clone());
            if let Some(p) = v.lowest() {
                reduced.insert(p, v);
            }
        }
        i = group_end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molio::{Atom, Bond, BondOrder};

    fn graph(n: usize, edges: &[(usize, usize)]) -> MoleculeRecord {
        let atoms = (0..n).map(|i| Atom::new("C", [i as f64, 0.0, 0.0])).collect();
        let bonds = edges.iter().map(|&(a, b)| Bond::new(a, b, BondOrder::Single)).collect();
        MoleculeRecord::new("g", atoms, bonds)
    }

    fn ring_edges(n: usize, offset: usize) -> Vec<(usize, usize)> {
        (0..n).map(|i| (offset + i, offset + (i + 1) % n)).collect()
    }

    fn all_simple_cycles(mol: &MoleculeRecord, max_len: usize) -> Vec<Vec<usize>> {
        simple_cycles(&mol.adjacency(), max_len)
    }

    fn gf2_rank(mut rows: Vec<Vec<bool>>) -> usize {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut rank = 0;
        for c in 0..cols {
            let Some(pivot) = (rank..rows.len()).find(|&r| rows[r][c]) else { continue };
            rows.swap(rank, pivot);
            let pivot_row = rows[rank].clone();
            for (r, row) in rows.iter_mut().enumerate() {
                if r != rank && row[c] {
                    for (a, b) in row.iter_mut().zip(&pivot_row) {
                        *a ^= *b;
                    }
                }
            }
            rank += 1;
        }
        rank
    }

    /// Minimum cycle basis from brute-force enumeration: greedy by length, keeping
    /// a cycle whenever it raises the GF(2) rank of the accepted set.
    fn brute_force_counts(mol: &MoleculeRecord) -> Vec<[u32; SIZES]> {
        let mut cycles = all_simple_cycles(mol, mol.atoms.len());
        cycles.sort_by_key(|c| c.len());
        let edge_key = |a: usize, b: usize| (a.min(b), a.max(b));
        let edge_list: Vec<(usize, usize)> = mol.bonds.iter().map(|b| edge_key(b.a, b.b)).collect();
        let to_vec = |c: &Vec<usize>| -> Vec<bool> {
            let set: Vec<(usize, usize)> = (0..c.len()).map(|i| edge_key(c[i], c[(i + 1) % c.len()])).collect();
            edge_list.iter().map(|e| set.contains(e)).collect()
        };
        let mut accepted: Vec<Vec<bool>> = Vec::new();
        let mut basis: Vec<Vec<usize>> = Vec::new();
        for c in &cycles {
            let mut trial = accepted.clone();
            trial.push(to_vec(c));
            if gf2_rank(trial.clone()) > accepted.len() {
                accepted = trial;
                basis.push(c.clone());
            }
        }
        let mut counts = vec![[0u32; SIZES]; mol.atoms.len()];
        for ring in basis.iter().filter(|r| r.len() <= MAX_RING) {
            for &a in ring {
                counts[a][ring.len() - MIN_RING] += 1;
            }
        }
        counts
    }

    #[test]
    fn cyclohexane_single_ring() {
        let mol = graph(6, &ring_edges(6, 0));
        let info = perceive_rings(&mol);
        assert_eq!(info.rings.len(), 1);
        for a in 0..6 {
            assert_eq!(info.ring_counts(a), [0, 0, 0, 1, 0, 0]);
        }
        assert!(info.same_ring(0, 3));
    }

    #[test]
    fn propane_is_acyclic() {
        let mol = graph(3, &[(0, 1), (1, 2)]);
        let info = perceive_rings(&mol);
        assert!(info.rings.is_empty());
        for a in 0..3 {
            assert_eq!(info.ring_counts(a), [0; 6]);
            for b in 0..3 {
                assert!(!info.same_ring(a, b));
            }
        }
    }

    fn naphthalene_graph() -> MoleculeRecord {
        // fusion atoms 0 and 5
        let mut edges = ring_edges(6, 0);
        edges.extend([(5, 6), (6, 7), (7, 8), (8, 9), (9, 0)]);
        graph(10, &edges)
    }

    #[test]
    fn naphthalene_matches_brute_force_basis() {
        let mol = naphthalene_graph();
        let info = perceive_rings(&mol);
        let expected = brute_force_counts(&mol);
        assert_eq!(info.counts, expected);
        assert_eq!(info.ring_counts(0), [0, 0, 0, 2, 0, 0]);
        assert_eq!(info.ring_counts(5), [0, 0, 0, 2, 0, 0]);
        for a in [1, 2, 3, 4, 6, 7, 8, 9] {
            assert_eq!(info.ring_counts(a), [0, 0, 0, 1, 0, 0]);
        }
        assert!(info.same_ring(0, 7));
        assert!(!info.same_ring(2, 7));
    }

    #[test]
    fn basis_size_is_cyclomatic_number() {
        let fixtures = vec![
            naphthalene_graph(),
            graph(6, &ring_edges(6, 0)),
            // spiro[4.4]nonane: two 5-rings sharing atom 0
            graph(9, &[(0, 1), (1, 2), (2, 3), (3, 0), (0, 4), (4, 5), (5, 6), (6, 7), (7, 0)]),
            // cubane
            graph(
                8,
                &[(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)],
            ),
            // two disconnected triangles
            graph(6, &[(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3)]),
        ];
        for (i, mol) in fixtures.iter().enumerate() {
            let info = perceive_rings(mol);
            let expected = mol.bonds.len() + mol.component_count() - mol.atoms.len();
            assert_eq!(info.basis_len, expected);
            // cubane (index 3) has no unique minimum basis; all six faces are relevant
            if i == 3 {
                assert_eq!(info.rings.len(), 6);
                assert!(info.counts.iter().all(|c| *c == [0, 3, 0, 0, 0, 0]));
            } else {
                assert_eq!(info.counts, brute_force_counts(mol));
            }
        }
    }

    #[test]
    fn large_rings_are_discarded() {
        let mol = graph(10, &ring_edges(10, 0));
        let info = perceive_rings(&mol);
        assert_eq!(info.basis_len, 1);
        assert!(info.rings.is_empty());
        assert!(!info.same_ring(0, 1));
    }

    #[test]
    fn rings_are_simple_cycles_of_the_bond_graph() {
        let mol = naphthalene_graph();
        let info = perceive_rings(&mol);
        for ring in &info.rings {
            let mut sorted = ring.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), ring.len());
            for i in 0..ring.len() {
                assert!(mol.bond_between(ring[i], ring[(i + 1) % ring.len()]).is_some());
            }
        }
    }

    #[test]
    fn relabeling_transports_counts() {
        let mol = naphthalene_graph();
        let perm = [3, 7, 1, 9, 0, 5, 2, 8, 6, 4];
        let base = perceive_rings(&mol);
        let relabeled = perceive_rings(&mol.permuted(&perm));
        for a in 0..10 {
            assert_eq!(base.ring_counts(a), relabeled.ring_counts(perm[a]));
            for b in 0..10 {
                assert_eq!(base.same_ring(a, b), relabeled.same_ring(perm[a], perm[b]));
            }
        }
    }

    #[test]
    fn bridged_system_counts_follow_relabeling() {
        // bicyclo[2.2.2]octane: bridgeheads 0 and 1 joined by three 2-atom bridges
        let mol = graph(8, &[(0, 2), (2, 3), (3, 1), (0, 4), (4, 5), (5, 1), (0, 6), (6, 7), (7, 1)]);
        let base = perceive_rings(&mol);
        assert_eq!(base.basis_len, 2);
        assert_eq!(base.rings.len(), 3);
        assert_eq!(base.ring_counts(0), [0, 0, 0, 3, 0, 0]);
        assert_eq!(base.ring_counts(2), [0, 0, 0, 2, 0, 0]);
        let perm = [5, 2, 7, 0, 3, 6, 1, 4];
        let relabeled = perceive_rings(&mol.permuted(&perm));
        for a in 0..8 {
            assert_eq!(base.ring_counts(a), relabeled.ring_counts(perm[a]));
        }
    }
}
