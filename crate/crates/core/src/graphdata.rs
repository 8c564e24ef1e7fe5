//! Categorical molecular graphs, vocabularies, datasets and empirical marginals.
//!
//! A [`CategoricalGraph`] stores the argmax indices of its one-hot node matrix
//! and edge tensor; the dense one-hot views are materialized on demand. Storing
//! indices makes the one-hot invariants hold by construction, and the
//! constructors enforce edge symmetry and the no-bond diagonal.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::smiles;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unknown label `{0}`")]
    UnknownLabel(String),
    #[error("duplicate bond between atoms {0} and {1}")]
    DuplicateBond(usize, usize),
    #[error("self loop on atom {0}")]
    SelfLoop(usize),
    #[error("bond ({0}, {1}) references an atom outside 0..{2}")]
    BondOutOfRange(usize, usize, usize),
    #[error("edge tensor is not symmetric at ({0}, {1})")]
    Asymmetric(usize, usize),
    #[error("diagonal entry {0} is not the no-bond type")]
    BondOnDiagonal(usize),
    #[error("type index {index} out of range for vocabulary of size {size}")]
    TypeOutOfRange { index: usize, size: usize },
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("dataset has no training graphs")]
    EmptyDataset,
    #[error("guide has non-finite entries")]
    NonFiniteGuide,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read dataset `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset contains no records")]
    Empty,
    #[error("line {line}: expected {expected} properties, found {found}")]
    PropertyCount {
        line: usize,
        expected: usize,
        found: usize,
    },
}

/// Atom types with their bond-order capacity and mass in daltons.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomVocab {
    symbols: Vec<String>,
    max_valence: Vec<u32>,
    atomic_mass: Vec<f64>,
}

impl AtomVocab {
    pub fn new(entries: &[(&str, u32, f64)]) -> Result<Self, GraphError> {
        if entries.is_empty() {
            return Err(GraphError::InvalidVocab("atom vocabulary is empty".into()));
        }
        let mut symbols = Vec::with_capacity(entries.len());
        let mut max_valence = Vec::with_capacity(entries.len());
        let mut atomic_mass = Vec::with_capacity(entries.len());
        for &(sym, val, mass) in entries {
            if symbols.iter().any(|s| s == sym) {
                return Err(GraphError::InvalidVocab(format!("duplicate symbol `{sym}`")));
            }
            if val < 1 {
                return Err(GraphError::InvalidVocab(format!("`{sym}` has zero valence")));
            }
            if !(mass > 0.0) {
                return Err(GraphError::InvalidVocab(format!("`{sym}` has non-positive mass")));
            }
            symbols.push(sym.to_string());
            max_valence.push(val);
            atomic_mass.push(mass);
        }
        Ok(Self {
            symbols,
            max_valence,
            atomic_mass,
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, idx: usize) -> &str {
        &self.symbols[idx]
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn max_valence(&self, idx: usize) -> u32 {
        self.max_valence[idx]
    }

    pub fn atomic_mass(&self, idx: usize) -> f64 {
        self.atomic_mass[idx]
    }
}

/// Bond types; index 0 is always the explicit "no bond" type.
#[derive(Debug, Clone, PartialEq)]
pub struct BondVocab {
    labels: Vec<String>,
    bond_order: Vec<u32>,
}

impl BondVocab {
    pub fn new(entries: &[(&str, u32)]) -> Result<Self, GraphError> {
        if entries.len() < 2 {
            return Err(GraphError::InvalidVocab(
                "bond vocabulary needs no-bond plus at least one bond".into(),
            ));
        }
        if entries[0].1 != 0 {
            return Err(GraphError::InvalidVocab("index 0 must have bond order 0".into()));
        }
        Ok(Self {
            labels: entries.iter().map(|e| e.0.to_string()).collect(),
            bond_order: entries.iter().map(|e| e.1).collect(),
        })
    }

    /// none, single, double, triple.
    pub fn standard() -> Self {
        Self::new(&[("none", 0), ("single", 1), ("double", 2), ("triple", 3)])
            .expect("standard bond vocabulary")
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|s| s == label)
    }

    pub fn bond_order(&self, idx: usize) -> u32 {
        self.bond_order[idx]
    }

    /// First bond type with the given order.
    pub fn index_of_order(&self, order: u32) -> Option<usize> {
        self.bond_order.iter().position(|&o| o == order)
    }
}

pub const HYDROGEN_MASS: f64 = 1.008;

/// Atom and bond vocabularies used together.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    pub atoms: AtomVocab,
    pub bonds: BondVocab,
}

impl Vocab {
    /// C, N, O, F heavy atoms.
    pub fn qm9() -> Self {
        Self {
            atoms: AtomVocab::new(&[
                ("C", 4, 12.011),
                ("N", 3, 14.007),
                ("O", 2, 15.999),
                ("F", 1, 18.998),
            ])
            .expect("qm9 vocabulary"),
            bonds: BondVocab::standard(),
        }
    }

    /// Drug-like vocabulary; charged nitrogen and oxygen are their own types.
    pub fn zinc() -> Self {
        Self {
            atoms: AtomVocab::new(&[
                ("C", 4, 12.011),
                ("N", 3, 14.007),
                ("O", 2, 15.999),
                ("F", 1, 18.998),
                ("P", 5, 30.974),
                ("S", 6, 32.06),
                ("Cl", 1, 35.45),
                ("Br", 1, 79.904),
                ("I", 1, 126.904),
                ("N+", 4, 14.007),
                ("O-", 1, 15.999),
            ])
            .expect("zinc vocabulary"),
            bonds: BondVocab::standard(),
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "qm9" => Some(Self::qm9()),
            "zinc" => Some(Self::zinc()),
            _ => None,
        }
    }

    /// Stable numeric code used in checkpoints.
    pub fn code(name: &str) -> Option<u32> {
        match name {
            "qm9" => Some(0),
            "zinc" => Some(1),
            _ => None,
        }
    }

    pub fn name_of_code(code: u32) -> Option<&'static str> {
        match code {
            0 => Some("qm9"),
            1 => Some("zinc"),
            _ => None,
        }
    }
}

/// Graph over categorical node and edge types.
///
/// `edges` is the row-major `n × n` matrix of edge-type indices; the dense
/// `n × a` node matrix and `n × n × b` edge tensor are the one-hot expansions.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CategoricalGraph {
    num_atom_types: usize,
    num_bond_types: usize,
    nodes: Vec<usize>,
    edges: Vec<usize>,
}

impl CategoricalGraph {
    pub fn from_types(
        nodes: Vec<usize>,
        edges: Vec<usize>,
        num_atom_types: usize,
        num_bond_types: usize,
    ) -> Result<Self, GraphError> {
        let n = nodes.len();
        assert_eq!(edges.len(), n * n, "edge matrix must be n×n");
        if let Some(&bad) = nodes.iter().find(|&&x| x >= num_atom_types) {
            return Err(GraphError::TypeOutOfRange {
                index: bad,
                size: num_atom_types,
            });
        }
        if let Some(&bad) = edges.iter().find(|&&e| e >= num_bond_types) {
            return Err(GraphError::TypeOutOfRange {
                index: bad,
                size: num_bond_types,
            });
        }
        for i in 0..n {
            if edges[i * n + i] != 0 {
                return Err(GraphError::BondOnDiagonal(i));
            }
            for j in (i + 1)..n {
                if edges[i * n + j] != edges[j * n + i] {
                    return Err(GraphError::Asymmetric(i, j));
                }
            }
        }
        Ok(Self {
            num_atom_types,
            num_bond_types,
            nodes,
            edges,
        })
    }

    /// Builds a graph from node types and the upper-triangle pair types in
    /// `(0,1), (0,2), …, (n-2,n-1)` order.
    pub fn from_upper(
        nodes: Vec<usize>,
        upper: &[usize],
        num_atom_types: usize,
        num_bond_types: usize,
    ) -> Result<Self, GraphError> {
        let n = nodes.len();
        assert_eq!(upper.len(), n * n.saturating_sub(1) / 2);
        let mut edges = vec![0; n * n];
        let mut k = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                edges[i * n + j] = upper[k];
                edges[j * n + i] = upper[k];
                k += 1;
            }
        }
        Self::from_types(nodes, edges, num_atom_types, num_bond_types)
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_atom_types(&self) -> usize {
        self.num_atom_types
    }

    pub fn num_bond_types(&self) -> usize {
        self.num_bond_types
    }

    pub fn node_type(&self, i: usize) -> usize {
        self.nodes[i]
    }

    pub fn node_types(&self) -> &[usize] {
        &self.nodes
    }

    pub fn edge_type(&self, i: usize, j: usize) -> usize {
        self.edges[i * self.n() + j]
    }

    pub fn edge_types(&self) -> &[usize] {
        &self.edges
    }

    /// Dense `n × a` one-hot node matrix, row-major.
    pub fn node_onehot(&self) -> Vec<f64> {
        let a = self.num_atom_types;
        let mut x = vec![0.0; self.n() * a];
        for (i, &t) in self.nodes.iter().enumerate() {
            x[i * a + t] = 1.0;
        }
        x
    }

    /// Dense `n × n × b` one-hot edge tensor, row-major.
    pub fn edge_onehot(&self) -> Vec<f64> {
        let b = self.num_bond_types;
        let mut e = vec![0.0; self.edges.len() * b];
        for (p, &t) in self.edges.iter().enumerate() {
            e[p * b + t] = 1.0;
        }
        e
    }

    /// Bonded neighbours of `i` as `(neighbour, edge type)` in index order.
    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n();
        (0..n).filter_map(move |j| {
            let e = self.edges[i * n + j];
            (j != i && e != 0).then_some((j, e))
        })
    }

    /// Bonds as `(i, j, type)` with `i < j`, lexicographic.
    pub fn bonds(&self) -> Vec<(usize, usize, usize)> {
        let n = self.n();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                let e = self.edges[i * n + j];
                if e != 0 {
                    out.push((i, j, e));
                }
            }
        }
        out
    }

    /// Relabels nodes so that new node `k` is old node `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.n();
        assert_eq!(perm.len(), n);
        let nodes = perm.iter().map(|&p| self.nodes[p]).collect();
        let mut edges = vec![0; n * n];
        for i in 0..n {
            for j in 0..n {
                edges[i * n + j] = self.edges[perm[i] * n + perm[j]];
            }
        }
        Self {
            num_atom_types: self.num_atom_types,
            num_bond_types: self.num_bond_types,
            nodes,
            edges,
        }
    }
}

/// Builds a graph from atom labels and `(i, j, bond label)` triples.
pub fn encode_graph(
    atoms: &[&str],
    bonds: &[(usize, usize, &str)],
    vocab: &Vocab,
) -> Result<CategoricalGraph, GraphError> {
    let nodes = atoms
        .iter()
        .map(|s| {
            vocab
                .atoms
                .index_of(s)
                .ok_or_else(|| GraphError::UnknownLabel(s.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let typed = bonds
        .iter()
        .map(|&(i, j, lbl)| {
            vocab
                .bonds
                .index_of(lbl)
                .filter(|&k| k != 0)
                .map(|k| (i, j, k))
                .ok_or_else(|| GraphError::UnknownLabel(lbl.to_string()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    encode_typed(nodes, &typed, vocab.atoms.len(), vocab.bonds.len())
}

/// Same as [`encode_graph`] but with pre-resolved type indices.
pub fn encode_typed(
    nodes: Vec<usize>,
    bonds: &[(usize, usize, usize)],
    num_atom_types: usize,
    num_bond_types: usize,
) -> Result<CategoricalGraph, GraphError> {
    let n = nodes.len();
    let mut edges = vec![0; n * n];
    for &(i, j, k) in bonds {
        if i == j {
            return Err(GraphError::SelfLoop(i));
        }
        if i >= n || j >= n {
            return Err(GraphError::BondOutOfRange(i, j, n));
        }
        if k == 0 || k >= num_bond_types {
            return Err(GraphError::TypeOutOfRange {
                index: k,
                size: num_bond_types,
            });
        }
        if edges[i * n + j] != 0 {
            return Err(GraphError::DuplicateBond(i.min(j), i.max(j)));
        }
        edges[i * n + j] = k;
        edges[j * n + i] = k;
    }
    CategoricalGraph::from_types(nodes, edges, num_atom_types, num_bond_types)
}

/// Inverse of [`encode_graph`]: atom labels and bond triples with `i < j`.
pub fn decode_graph(g: &CategoricalGraph, vocab: &Vocab) -> (Vec<String>, Vec<(usize, usize, String)>) {
    let atoms = g
        .node_types()
        .iter()
        .map(|&t| vocab.atoms.symbol(t).to_string())
        .collect();
    let bonds = g
        .bonds()
        .into_iter()
        .map(|(i, j, k)| (i, j, vocab.bonds.label(k).to_string()))
        .collect();
    (atoms, bonds)
}

/// Standardized conditioning vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Guide {
    values: Vec<f64>,
}

impl Guide {
    pub fn new(values: Vec<f64>) -> Result<Self, GraphError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(GraphError::NonFiniteGuide);
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// Per-dimension z-score statistics of raw properties.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    /// Population statistics; zero spread falls back to unit scale.
    pub fn fit(rows: &[&[f64]]) -> Self {
        let d = rows.first().map_or(0, |r| r.len());
        let count = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        let mut var = vec![0.0; d];
        for r in rows {
            for k in 0..d {
                var[k] += (r[k] - mean[k]).powi(2);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let s = (v / count).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, raw: &[f64]) -> Guide {
        Guide {
            values: raw
                .iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| (v - m) / s)
                .collect(),
        }
    }

    pub fn invert(&self, guide: &Guide) -> Vec<f64> {
        guide
            .values
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }
}

/// Fractions of records assigned to the train and validation splits; the
/// remainder is the test split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            validation: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphDataset {
    pub graphs: Vec<CategoricalGraph>,
    /// Raw (unstandardized) property vectors.
    pub properties: Vec<Vec<f64>>,
    pub guides: Vec<Guide>,
    pub split: Vec<Split>,
    pub standardization: Standardization,
}

impl GraphDataset {
    /// Assigns splits by a seeded shuffle and standardizes on the train split.
    pub fn new(
        graphs: Vec<CategoricalGraph>,
        properties: Vec<Vec<f64>>,
        spec: SplitSpec,
    ) -> Result<Self, DatasetError> {
        assert_eq!(graphs.len(), properties.len());
        if graphs.is_empty() {
            return Err(DatasetError::Empty);
        }
        let total = graphs.len();
        let mut order: Vec<usize> = (0..total).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
        let n_train = ((total as f64 * spec.train).round() as usize).clamp(1, total);
        let n_val = ((total as f64 * spec.validation).round() as usize).min(total - n_train);
        let mut split = vec![Split::Test; total];
        for (rank, &idx) in order.iter().enumerate() {
            split[idx] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Validation
            } else {
                Split::Test
            };
        }
        let train_rows: Vec<&[f64]> = properties
            .iter()
            .zip(&split)
            .filter(|(_, s)| **s == Split::Train)
            .map(|(p, _)| p.as_slice())
            .collect();
        let standardization = Standardization::fit(&train_rows);
        let guides = properties.iter().map(|p| standardization.apply(p)).collect();
        Ok(Self {
            graphs,
            properties,
            guides,
            split,
            standardization,
        })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == which).collect()
    }

    pub fn guide_dim(&self) -> usize {
        self.properties.first().map_or(0, |p| p.len())
    }

    pub fn max_nodes(&self) -> usize {
        self.graphs.iter().map(|g| g.n()).max().unwrap_or(0)
    }
}

/// Parses `SMILES<TAB>p1,p2,...` records; `#` lines and blank lines are skipped.
pub fn parse_dataset_text(
    text: &str,
    vocab: &Vocab,
) -> Result<(Vec<CategoricalGraph>, Vec<Vec<f64>>), DatasetError> {
    let mut graphs = Vec::new();
    let mut props = Vec::new();
    let mut dim = None;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        let line_no = lineno + 1;
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (smi, rest) = line.split_once('\t').ok_or_else(|| DatasetError::Parse {
            line: line_no,
            message: "expected SMILES<TAB>properties".into(),
        })?;
        let spec = smiles::parse_smiles(smi.trim(), vocab).map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let g = spec.to_graph(vocab).map_err(|e| DatasetError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let values = rest
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DatasetError::Parse {
                line: line_no,
                message: format!("bad property value: {e}"),
            })?;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("non-finite property {v}"),
            });
        }
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(DatasetError::PropertyCount {
                    line: line_no,
                    expected: d,
                    found: values.len(),
                })
            }
            _ => {}
        }
        graphs.push(g);
        props.push(values);
    }
    if graphs.is_empty() {
        return Err(DatasetError::Empty);
    }
    Ok((graphs, props))
}

pub fn load_dataset(path: &Path, vocab: &Vocab, spec: SplitSpec) -> Result<GraphDataset, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let (graphs, props) = parse_dataset_text(&text, vocab)?;
    GraphDataset::new(graphs, props, spec)
}

/// Empirical node-type, edge-type and size distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMarginals {
    pub node: Vec<f64>,
    pub edge: Vec<f64>,
    /// `size[k]` is the probability of `k + 1` nodes.
    pub size: Vec<f64>,
}

impl DatasetMarginals {
    pub fn n_max(&self) -> usize {
        self.size.len()
    }
}

/// Marginals over the given graphs; edges count ordered off-diagonal pairs.
pub fn compute_marginals<'a, I>(graphs: I) -> Result<DatasetMarginals, GraphError>
where
    I: IntoIterator<Item = &'a CategoricalGraph>,
{
    let mut iter = graphs.into_iter().peekable();
    let first = iter.peek().ok_or(GraphError::EmptyDataset)?;
    let (a, b) = (first.num_atom_types(), first.num_bond_types());
    let mut node = vec![0u64; a];
    let mut edge = vec![0u64; b];
    let mut sizes: HashMap<usize, u64> = HashMap::new();
    let mut count = 0u64;
    for g in iter {
        count += 1;
        *sizes.entry(g.n()).or_default() += 1;
        for &t in g.node_types() {
            node[t] += 1;
        }
        let n = g.n();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    edge[g.edge_type(i, j)] += 1;
                }
            }
        }
    }
    let n_max = sizes.keys().copied().max().unwrap_or(1).max(1);
    let mut size = vec![0.0; n_max];
    for (&n, &c) in &sizes {
        if n >= 1 {
            size[n - 1] = c as f64 / count as f64;
        }
    }
    Ok(DatasetMarginals {
        node: normalize_counts(&node),
        edge: normalize_counts(&edge),
        size,
    })
}

/// Counts to frequencies; an all-zero count vector maps to a point mass on
/// index 0 (for edges: no-bond, the only type single-atom graphs carry).
fn normalize_counts(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        let mut out = vec![0.0; counts.len()];
        out[0] = 1.0;
        return out;
    }
    counts.iter().map(|&c| c as f64 / total as f64).collect()
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn combine(seed: u64, value: u64) -> u64 {
    mix64(seed ^ value.wrapping_mul(0x2545_f491_4f6c_dd1d).rotate_left(17))
}

/// Weisfeiler–Lehman colour-refinement digest, invariant under node relabeling.
pub fn wl_hash(g: &CategoricalGraph, rounds: usize) -> u64 {
    let n = g.n();
    let mut colors: Vec<u64> = g
        .node_types()
        .iter()
        .map(|&t| mix64(t as u64 + 1))
        .collect();
    let summarize = |colors: &[u64]| {
        let mut sorted = colors.to_vec();
        sorted.sort_unstable();
        sorted.into_iter().fold(0x51_7cc1_b727_220a, combine)
    };
    let mut digest = combine(n as u64, summarize(&colors));
    for _ in 0..rounds {
        let next: Vec<u64> = (0..n)
            .map(|i| {
                let mut nb: Vec<u64> = g
                    .neighbors(i)
                    .map(|(j, e)| combine(mix64(e as u64), colors[j]))
                    .collect();
                nb.sort_unstable();
                nb.into_iter().fold(colors[i], combine)
            })
            .collect();
        colors = next;
        digest = combine(digest, summarize(&colors));
    }
    digest
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn qm9() -> Vocab {
        Vocab::qm9()
    }

    #[test]
    fn encode_two_carbons_single_bond() {
        let v = qm9();
        let g = encode_graph(&["C", "C"], &[(0, 1, "single")], &v).unwrap();
        let x = g.node_onehot();
        assert_eq!(x, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let e = g.edge_onehot();
        let b = v.bonds.len();
        assert_eq!(&e[b..2 * b], &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(&e[2 * b..3 * b], &[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(&e[0..b], &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_singleton() {
        let g = encode_graph(&["C"], &[], &qm9()).unwrap();
        assert_eq!(g.n(), 1);
        assert_eq!(g.edge_onehot(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn encode_errors() {
        let v = qm9();
        assert_eq!(
            encode_graph(&["C", "O"], &[(0, 1, "single"), (0, 1, "double")], &v),
            Err(GraphError::DuplicateBond(0, 1))
        );
        assert_eq!(
            encode_graph(&["C", "Xe"], &[], &v),
            Err(GraphError::UnknownLabel("Xe".into()))
        );
        assert_eq!(
            encode_graph(&["C", "O"], &[(1, 1, "single")], &v),
            Err(GraphError::SelfLoop(1))
        );
        assert_eq!(
            encode_graph(&["C", "O"], &[(0, 1, "quadruple")], &v),
            Err(GraphError::UnknownLabel("quadruple".into()))
        );
    }

    #[test]
    fn constructor_rejects_broken_invariants() {
        assert_eq!(
            CategoricalGraph::from_types(vec![0, 0], vec![0, 1, 2, 0], 4, 4),
            Err(GraphError::Asymmetric(0, 1))
        );
        assert_eq!(
            CategoricalGraph::from_types(vec![0], vec![1], 4, 4),
            Err(GraphError::BondOnDiagonal(0))
        );
    }

    #[test]
    fn marginals_hand_count() {
        let v = qm9();
        let g1 = encode_graph(&["C"], &[], &v).unwrap();
        let g2 = encode_graph(&["C", "O"], &[(0, 1, "single")], &v).unwrap();
        let m = compute_marginals([&g1, &g2]).unwrap();
        assert_eq!(m.node, vec![2.0 / 3.0, 0.0, 1.0 / 3.0, 0.0]);
        assert_eq!(m.edge, vec![0.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.size, vec![0.5, 0.5]);
    }

    #[test]
    fn marginals_degenerate_dataset() {
        let v = qm9();
        let gs: Vec<_> = (0..5).map(|_| encode_graph(&["C"], &[], &v).unwrap()).collect();
        let m = compute_marginals(&gs).unwrap();
        assert_eq!(m.node, vec![1.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.size, vec![1.0]);
    }

    #[test]
    fn marginals_empty() {
        let none: Vec<CategoricalGraph> = Vec::new();
        assert_eq!(compute_marginals(&none), Err(GraphError::EmptyDataset));
    }

    #[test]
    fn wl_path_reversal() {
        let v = qm9();
        let a = encode_graph(&["C", "C", "O"], &[(0, 1, "single"), (1, 2, "single")], &v).unwrap();
        let b = encode_graph(&["O", "C", "C"], &[(0, 1, "single"), (1, 2, "single")], &v).unwrap();
        assert_eq!(wl_hash(&a, 3), wl_hash(&b, 3));
    }

    #[test]
    fn wl_distinguishes_bond_orders() {
        let v = qm9();
        let a = encode_graph(&["C", "C"], &[(0, 1, "single")], &v).unwrap();
        let b = encode_graph(&["C", "C"], &[(0, 1, "double")], &v).unwrap();
        assert_ne!(wl_hash(&a, 3), wl_hash(&b, 3));
    }

    #[test]
    fn wl_cyclopropane_encodings() {
        let v = qm9();
        let a = encode_graph(
            &["C", "C", "C"],
            &[(0, 1, "single"), (1, 2, "single"), (0, 2, "single")],
            &v,
        )
        .unwrap();
        let b = encode_graph(
            &["C", "C", "C"],
            &[(0, 2, "single"), (1, 2, "single"), (0, 1, "single")],
            &v,
        )
        .unwrap();
        assert_eq!(wl_hash(&a, 3), wl_hash(&b, 3));
        let propane = encode_graph(&["C", "C", "C"], &[(0, 1, "single"), (1, 2, "single")], &v).unwrap();
        assert_ne!(wl_hash(&a, 3), wl_hash(&propane, 3));
    }

    #[test]
    fn dataset_text_parsing() {
        let v = qm9();
        let text = "# comment\nCCO\t46.0,3\n\nC=O\t30.0,2\n";
        let (gs, ps) = parse_dataset_text(text, &v).unwrap();
        assert_eq!(gs.len(), 2);
        assert_eq!(ps[1], vec![30.0, 2.0]);
        let bad = "CCO\t1,2\nCC\t1\n";
        assert!(matches!(
            parse_dataset_text(bad, &v),
            Err(DatasetError::PropertyCount { line: 2, .. })
        ));
        assert!(matches!(
            parse_dataset_text("CCO 1,2\n", &v),
            Err(DatasetError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn standardization_uses_train_split_only() {
        let v = qm9();
        let g = encode_graph(&["C"], &[], &v).unwrap();
        let props: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        let ds = GraphDataset::new(vec![g; 20], props.clone(), SplitSpec::default()).unwrap();
        let train: Vec<&[f64]> = ds
            .indices(Split::Train)
            .into_iter()
            .map(|i| props[i].as_slice())
            .collect();
        assert_eq!(ds.standardization, Standardization::fit(&train));
        assert_eq!(ds.indices(Split::Train).len(), 16);
        assert_eq!(ds.indices(Split::Validation).len(), 2);
        assert_eq!(ds.indices(Split::Test).len(), 2);
        let back = ds.standardization.invert(&ds.guides[3]);
        assert!((back[0] - 3.0).abs() < 1e-12);
    }

    fn random_graph(rng: &mut impl Rng, n: usize) -> CategoricalGraph {
        let nodes = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let upper: Vec<usize> = (0..n * n.saturating_sub(1) / 2)
            .map(|_| if rng.gen_bool(0.4) { rng.gen_range(1..4) } else { 0 })
            .collect();
        CategoricalGraph::from_upper(nodes, &upper, 4, 4).unwrap()
    }

    #[test]
    fn wl_invariant_under_random_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=8);
            let g = random_graph(&mut rng, n);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            assert_eq!(wl_hash(&g, 3), wl_hash(&g.permuted(&perm), 3));
        }
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(seed in any::<u64>(), n in 1usize..9) {
            let v = qm9();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, n);
            let (atoms, bonds) = decode_graph(&g, &v);
            let atom_refs: Vec<&str> = atoms.iter().map(String::as_str).collect();
            let bond_refs: Vec<(usize, usize, &str)> =
                bonds.iter().map(|(i, j, l)| (*i, *j, l.as_str())).collect();
            let back = encode_graph(&atom_refs, &bond_refs, &v).unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn marginals_are_distributions(seed in any::<u64>(), count in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gs: Vec<_> = (0..count).map(|_| {
                let n = rng.gen_range(1..=6);
                random_graph(&mut rng, n)
            }).collect();
            let m = compute_marginals(&gs).unwrap();
            for dist in [&m.node, &m.edge, &m.size] {
                prop_assert!(dist.iter().all(|&p| p >= 0.0));
                prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
