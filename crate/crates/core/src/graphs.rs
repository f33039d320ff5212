//! Sparsity patterns of symmetric matrix sets, their component structure,
//! cliques, and the partition preorder on block-size profiles.
//!
//! A pattern records which entries of a (mean-absolute, thresholded) matrix
//! family are considered nonzero: unordered off-diagonal pairs plus a
//! diagonal support set. Components of the induced graph determine the block
//! structure a joint conjugation can achieve; profiles of block sizes are
//! compared in the "can be merged into" partition preorder.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::SymmetricMatrixSet;

/// Maximum dimension for clique enumeration (exponential worst case).
pub const MAX_CLIQUE_DIM: usize = 25;

/// Support pattern of a symmetric matrix family: unordered off-diagonal
/// pairs and diagonal indices. Indices are 0-based internally; the JSON
/// form is 1-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityPattern {
    d: usize,
    /// Pairs (i, j) with i < j.
    off_diag: BTreeSet<(usize, usize)>,
    diag: BTreeSet<usize>,
}

impl SparsityPattern {
    /// Create a pattern, normalizing pair order and validating ranges.
    pub fn new(
        d: usize,
        off_diag: impl IntoIterator<Item = (usize, usize)>,
        diag: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidArgument("pattern dimension must be >= 1".into()));
        }
        let mut pairs = BTreeSet::new();
        for (i, j) in off_diag {
            if i == j {
                return Err(Error::InvalidArgument(format!(
                    "off-diagonal pair ({i},{i}) has equal indices"
                )));
            }
            let (a, b) = if i < j { (i, j) } else { (j, i) };
            if b >= d {
                return Err(Error::InvalidArgument(format!(
                    "pair index {b} out of range for dimension {d}"
                )));
            }
            pairs.insert((a, b));
        }
        let mut diag_set = BTreeSet::new();
        for i in diag {
            if i >= d {
                return Err(Error::InvalidArgument(format!(
                    "diagonal index {i} out of range for dimension {d}"
                )));
            }
            diag_set.insert(i);
        }
        Ok(Self {
            d,
            off_diag: pairs,
            diag: diag_set,
        })
    }

    pub fn empty(d: usize) -> Self {
        Self {
            d,
            off_diag: BTreeSet::new(),
            diag: BTreeSet::new(),
        }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn off_diag(&self) -> &BTreeSet<(usize, usize)> {
        &self.off_diag
    }

    pub fn diag(&self) -> &BTreeSet<usize> {
        &self.diag
    }

    pub fn contains_pair(&self, i: usize, j: usize) -> bool {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.off_diag.contains(&(a, b))
    }

    /// Number of nonzero entries counted as matrix entries:
    /// 2·|off_diag| + |diag| (each unordered pair occupies two slots).
    pub fn ordered_count(&self) -> usize {
        2 * self.off_diag.len() + self.diag.len()
    }

    /// Unordered support size: |off_diag| + |diag|.
    pub fn unordered_count(&self) -> usize {
        self.off_diag.len() + self.diag.len()
    }

    /// The pattern obtained by relabeling index i as perm[i].
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.d {
            return Err(Error::DimensionMismatch {
                context: "permutation for pattern".into(),
                expected: self.d,
                got: perm.len(),
            });
        }
        Self::new(
            self.d,
            self.off_diag.iter().map(|&(i, j)| (perm[i], perm[j])),
            self.diag.iter().map(|&i| perm[i]),
        )
    }

    /// Restrict to the vertices in `keep` (reindexed by position in `keep`).
    pub fn restricted(&self, keep: &[usize]) -> Result<Self> {
        let pos: std::collections::BTreeMap<usize, usize> =
            keep.iter().enumerate().map(|(p, &v)| (v, p)).collect();
        let mut off = Vec::new();
        for &(i, j) in &self.off_diag {
            if let (Some(&a), Some(&b)) = (pos.get(&i), pos.get(&j)) {
                off.push((a, b));
            }
        }
        let diag = self.diag.iter().filter_map(|i| pos.get(i).copied());
        Self::new(keep.len().max(1), off, diag)
    }
}

/// 1-based JSON form of [`SparsityPattern`].
#[derive(Serialize, Deserialize)]
struct PatternJson {
    d: usize,
    off_diag: Vec<[usize; 2]>,
    diag: Vec<usize>,
}

impl Serialize for SparsityPattern {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PatternJson {
            d: self.d,
            off_diag: self.off_diag.iter().map(|&(i, j)| [i + 1, j + 1]).collect(),
            diag: self.diag.iter().map(|&i| i + 1).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SparsityPattern {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = PatternJson::deserialize(d)?;
        for &[i, j] in &raw.off_diag {
            if i == 0 || j == 0 {
                return Err(serde::de::Error::custom("pattern indices are 1-based"));
            }
        }
        if raw.diag.iter().any(|&i| i == 0) {
            return Err(serde::de::Error::custom("pattern indices are 1-based"));
        }
        SparsityPattern::new(
            raw.d,
            raw.off_diag.iter().map(|&[i, j]| (i - 1, j - 1)),
            raw.diag.iter().map(|&i| i - 1),
        )
        .map_err(serde::de::Error::custom)
    }
}

/// A partition of [d] into ordered groups with its size profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockStructure {
    d: usize,
    /// Disjoint index groups covering [d]; each group sorted ascending;
    /// groups ordered by descending size, ties by smallest contained index.
    groups: Vec<Vec<usize>>,
}

impl BlockStructure {
    pub fn new(d: usize, mut groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; d];
        for g in &mut groups {
            g.sort_unstable();
            for &i in g.iter() {
                if i >= d {
                    return Err(Error::InvalidArgument(format!(
                        "group index {i} out of range for dimension {d}"
                    )));
                }
                if seen[i] {
                    return Err(Error::InvalidArgument(format!(
                        "index {i} appears in two groups"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::InvalidArgument(
                "groups do not cover every index".into(),
            ));
        }
        groups.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        Ok(Self { d, groups })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Group sizes, descending.
    pub fn profile(&self) -> Vec<usize> {
        self.groups.iter().map(Vec::len).collect()
    }
}

/// Relation of profile `a` to profile `b` in the partition preorder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProfileOrder {
    /// a's entries can be grouped so the group sums give b (a refines b).
    Finer,
    Coarser,
    Equal,
    Incomparable,
}

/// Threshold the entrywise mean of absolute values: pair {i,j} is in the
/// pattern iff mean|H_n[i,j]| > eta, index i iff mean|H_n[i,i]| > eta.
pub fn pattern_from_matrix_set(mats: &SymmetricMatrixSet, eta: f64) -> Result<SparsityPattern> {
    if eta < 0.0 || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "threshold eta must be finite and >= 0, got {eta}"
        )));
    }
    let d = mats.dim();
    let mean = mats.mean_abs();
    let mut off = Vec::new();
    let mut diag = Vec::new();
    for i in 0..d {
        if mean[(i, i)] > eta {
            diag.push(i);
        }
        for j in (i + 1)..d {
            // Mean-abs of a symmetric set is symmetric; use the max of the
            // two slots to be safe against roundoff asymmetry.
            if mean[(i, j)].max(mean[(j, i)]) > eta {
                off.push((i, j));
            }
        }
    }
    SparsityPattern::new(d, off, diag)
}

/// Connected components of the graph ([d], off_diag); isolated vertices
/// become singleton groups.
pub fn connected_components(p: &SparsityPattern) -> BlockStructure {
    let d = p.d();
    let mut adj = vec![Vec::new(); d];
    for &(i, j) in p.off_diag() {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut comp = vec![usize::MAX; d];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for start in 0..d {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = groups.len();
        let mut queue = std::collections::VecDeque::from([start]);
        comp[start] = id;
        let mut members = vec![start];
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if comp[w] == usize::MAX {
                    comp[w] = id;
                    members.push(w);
                    queue.push_back(w);
                }
            }
        }
        groups.push(members);
    }
    BlockStructure::new(d, groups).expect("BFS produces a partition")
}

/// Decide whether profile `a` refines profile `b`: is there a partition of
/// a's entries whose group sums reproduce b? Exact backtracking search;
/// profiles in this artifact have at most ~20 entries.
fn refines(a: &[usize], b: &[usize]) -> bool {
    if a.iter().sum::<usize>() != b.iter().sum::<usize>() {
        return false;
    }
    if a.len() < b.len() {
        return false;
    }
    // Assign each entry of a (largest first) to one of b's buckets without
    // exceeding its capacity; all buckets must be filled exactly.
    let mut a_desc: Vec<usize> = a.to_vec();
    a_desc.sort_unstable_by(|x, y| y.cmp(x));
    let mut remaining: Vec<usize> = b.to_vec();
    remaining.sort_unstable_by(|x, y| y.cmp(x));
    fn assign(items: &[usize], remaining: &mut Vec<usize>) -> bool {
        let Some(&item) = items.first() else {
            return remaining.iter().all(|&r| r == 0);
        };
        let mut tried = BTreeSet::new();
        for k in 0..remaining.len() {
            let cap = remaining[k];
            if cap >= item && tried.insert(cap) {
                remaining[k] -= item;
                if assign(&items[1..], remaining) {
                    remaining[k] += item;
                    return true;
                }
                remaining[k] += item;
            }
        }
        false
    }
    assign(&a_desc, &mut remaining)
}

/// Compare two block-size profiles in the partition preorder.
pub fn profile_preceq(a: &[usize], b: &[usize]) -> Result<ProfileOrder> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("profile comparison with empty profile".into()));
    }
    if a.iter().any(|&x| x == 0) || b.iter().any(|&x| x == 0) {
        return Err(Error::InvalidArgument("profiles must have positive entries".into()));
    }
    let (sa, sb) = (a.iter().sum::<usize>(), b.iter().sum::<usize>());
    if sa != sb {
        return Err(Error::InvalidArgument(format!(
            "profiles sum to different totals: {sa} vs {sb}"
        )));
    }
    let fwd = refines(a, b);
    let bwd = refines(b, a);
    Ok(match (fwd, bwd) {
        (true, true) => ProfileOrder::Equal,
        (true, false) => ProfileOrder::Finer,
        (false, true) => ProfileOrder::Coarser,
        (false, false) => ProfileOrder::Incomparable,
    })
}

/// All maximal cliques of the graph restricted to vertices with support
/// (diagonal indices and edge endpoints). Bron–Kerbosch with pivoting.
/// Supported vertices with no incident edge yield singleton cliques.
pub fn maximal_cliques(p: &SparsityPattern) -> Result<Vec<Vec<usize>>> {
    let d = p.d();
    if d > MAX_CLIQUE_DIM {
        return Err(Error::TooLarge {
            context: "clique enumeration dimension".into(),
            got: d,
            limit: MAX_CLIQUE_DIM,
        });
    }
    let mut supported: BTreeSet<usize> = p.diag().clone();
    for &(i, j) in p.off_diag() {
        supported.insert(i);
        supported.insert(j);
    }
    let vertices: Vec<usize> = supported.into_iter().collect();
    let adj: Vec<BTreeSet<usize>> = {
        let mut adj = vec![BTreeSet::new(); d];
        for &(i, j) in p.off_diag() {
            adj[i].insert(j);
            adj[j].insert(i);
        }
        adj
    };

    fn bron_kerbosch(
        r: &mut Vec<usize>,
        mut p_set: BTreeSet<usize>,
        mut x_set: BTreeSet<usize>,
        adj: &[BTreeSet<usize>],
        out: &mut Vec<Vec<usize>>,
    ) {
        if p_set.is_empty() && x_set.is_empty() {
            out.push(r.clone());
            return;
        }
        // Pivot: vertex of P ∪ X with the most neighbors in P.
        let pivot = p_set
            .iter()
            .chain(x_set.iter())
            .copied()
            .max_by_key(|&u| adj[u].intersection(&p_set).count())
            .expect("P ∪ X nonempty");
        let candidates: Vec<usize> = p_set.difference(&adj[pivot]).copied().collect();
        for v in candidates {
            r.push(v);
            let p_next = p_set.intersection(&adj[v]).copied().collect();
            let x_next = x_set.intersection(&adj[v]).copied().collect();
            bron_kerbosch(r, p_next, x_next, adj, out);
            r.pop();
            p_set.remove(&v);
            x_set.insert(v);
        }
    }

    let mut out = Vec::new();
    bron_kerbosch(
        &mut Vec::new(),
        vertices.into_iter().collect(),
        BTreeSet::new(),
        &adj,
        &mut out,
    );
    for c in &mut out {
        c.sort_unstable();
    }
    out.sort();
    Ok(out)
}
