//! A Kekulé SMILES subset: organic-subset and bracket atoms, `-` `=` `#`
//! bonds, branches, ring closures (`1`–`9`, `%nn`) and `.` separators.
//! Hydrogens are implicit and never become nodes.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use thiserror::Error;

use crate::graphdata::{encode_typed, CategoricalGraph, GraphError, Vocab, HYDROGEN_MASS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SmilesError {
    #[error("empty SMILES")]
    EmptyInput,
    #[error("unbalanced parenthesis at offset {0}")]
    UnbalancedParenthesis(usize),
    #[error("ring closure {0} is never closed")]
    UnclosedRing(u32),
    #[error("unknown atom `{0}`")]
    UnknownAtom(String),
    #[error("ring closure {0} has conflicting bond symbols")]
    BondConflict(u32),
    #[error("unexpected `{0}` at offset {1}")]
    UnexpectedChar(char, usize),
    #[error("bond symbol at offset {0} is not followed by an atom or ring closure")]
    DanglingBond(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Parsed molecule as labels, before resolution into a [`CategoricalGraph`].
#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeSpec {
    pub atoms: Vec<String>,
    /// `(i, j, bond label)` with `i < j`.
    pub bonds: Vec<(usize, usize, String)>,
    pub source_text: String,
}

impl MoleculeSpec {
    pub fn to_graph(&self, vocab: &Vocab) -> Result<CategoricalGraph, GraphError> {
        let nodes = self
            .atoms
            .iter()
            .map(|s| vocab.atoms.index_of(s).ok_or_else(|| GraphError::UnknownLabel(s.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let bonds = self
            .bonds
            .iter()
            .map(|(i, j, l)| {
                vocab
                    .bonds
                    .index_of(l)
                    .map(|k| (*i, *j, k))
                    .ok_or_else(|| GraphError::UnknownLabel(l.clone()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        encode_typed(nodes, &bonds, vocab.atoms.len(), vocab.bonds.len())
    }

    pub fn from_graph(g: &CategoricalGraph, vocab: &Vocab) -> Self {
        Self {
            atoms: g
                .node_types()
                .iter()
                .map(|&t| vocab.atoms.symbol(t).to_string())
                .collect(),
            bonds: g
                .bonds()
                .into_iter()
                .map(|(i, j, k)| (i, j, vocab.bonds.label(k).to_string()))
                .collect(),
            source_text: String::new(),
        }
    }
}

const ORGANIC_SUBSET: &[&str] = &["B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"];

fn bond_label(symbol: char) -> &'static str {
    match symbol {
        '=' => "double",
        '#' => "triple",
        _ => "single",
    }
}

fn bond_symbol(label: &str) -> &'static str {
    match label {
        "double" => "=",
        "triple" => "#",
        _ => "",
    }
}

struct Parser<'a> {
    text: &'a str,
    bytes: &'a [u8],
    pos: usize,
    vocab: &'a Vocab,
    atoms: Vec<String>,
    bonds: Vec<(usize, usize, String)>,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn push_atom(&mut self, label: String) -> Result<usize, SmilesError> {
        if self.vocab.atoms.index_of(&label).is_none() {
            return Err(SmilesError::UnknownAtom(label));
        }
        self.atoms.push(label);
        Ok(self.atoms.len() - 1)
    }

    fn organic_atom(&mut self) -> Result<usize, SmilesError> {
        let rest = &self.text[self.pos..];
        for sym in ["Cl", "Br"] {
            if rest.starts_with(sym) {
                self.pos += 2;
                return self.push_atom(sym.to_string());
            }
        }
        let c = rest.chars().next().expect("caller checked non-empty");
        self.pos += c.len_utf8();
        let sym = c.to_string();
        if !ORGANIC_SUBSET.contains(&sym.as_str()) {
            // lowercase aromatic atoms land here too
            return Err(SmilesError::UnknownAtom(sym));
        }
        self.push_atom(sym)
    }

    /// `[Sym Hn? charge?]`; the label is the symbol with its charge suffix.
    fn bracket_atom(&mut self) -> Result<usize, SmilesError> {
        let start = self.pos;
        let close = self.text[start..]
            .find(']')
            .map(|off| start + off)
            .ok_or(SmilesError::UnexpectedChar('[', start))?;
        let inner = &self.text[start + 1..close];
        self.pos = close + 1;
        let mut chars = inner.char_indices().peekable();
        let mut symbol = String::new();
        match chars.next() {
            Some((_, c)) if c.is_ascii_uppercase() => symbol.push(c),
            _ => return Err(SmilesError::UnknownAtom(format!("[{inner}]"))),
        }
        if let Some(&(_, c)) = chars.peek() {
            if c.is_ascii_lowercase() {
                symbol.push(c);
                chars.next();
            }
        }
        if let Some(&(_, 'H')) = chars.peek() {
            chars.next();
            while let Some(&(_, c)) = chars.peek() {
                if c.is_ascii_digit() {
                    chars.next();
                } else {
                    break;
                }
            }
        }
        let charge: String = chars.map(|(_, c)| c).collect();
        if !charge.is_empty() && !charge.starts_with(['+', '-']) {
            return Err(SmilesError::UnknownAtom(format!("[{inner}]")));
        }
        self.push_atom(format!("{symbol}{charge}"))
    }

    fn ring_number(&mut self) -> Result<u32, SmilesError> {
        let c = self.peek().expect("caller checked");
        if c == b'%' {
            let digits = self.text.get(self.pos + 1..self.pos + 3);
            match digits {
                Some(d) if d.bytes().all(|b| b.is_ascii_digit()) => {
                    self.pos += 3;
                    Ok(d.parse().expect("two digits"))
                }
                _ => Err(SmilesError::UnexpectedChar('%', self.pos)),
            }
        } else {
            self.pos += 1;
            Ok((c - b'0') as u32)
        }
    }

    fn add_bond(&mut self, a: usize, b: usize, label: &str) -> Result<(), SmilesError> {
        if a == b {
            return Err(GraphError::SelfLoop(a).into());
        }
        let (i, j) = (a.min(b), a.max(b));
        if self.bonds.iter().any(|(x, y, _)| (*x, *y) == (i, j)) {
            return Err(GraphError::DuplicateBond(i, j).into());
        }
        self.bonds.push((i, j, label.to_string()));
        Ok(())
    }

    fn run(mut self) -> Result<MoleculeSpec, SmilesError> {
        let mut prev: Option<usize> = None;
        let mut pending: Option<(char, usize)> = None;
        let mut branches: Vec<(usize, usize)> = Vec::new();
        let mut rings: HashMap<u32, (usize, Option<char>)> = HashMap::new();
        let mut ring_order: Vec<u32> = Vec::new();

        while let Some(c) = self.peek() {
            let at = self.pos;
            match c {
                b'(' => {
                    let p = prev.ok_or(SmilesError::UnexpectedChar('(', at))?;
                    if pending.is_some() {
                        return Err(SmilesError::UnexpectedChar('(', at));
                    }
                    branches.push((p, at));
                    self.pos += 1;
                }
                b')' => {
                    if let Some((_, bpos)) = pending {
                        return Err(SmilesError::DanglingBond(bpos));
                    }
                    let (p, _) = branches.pop().ok_or(SmilesError::UnbalancedParenthesis(at))?;
                    prev = Some(p);
                    self.pos += 1;
                }
                b'-' | b'=' | b'#' => {
                    if prev.is_none() || pending.is_some() {
                        return Err(SmilesError::UnexpectedChar(c as char, at));
                    }
                    pending = Some((c as char, at));
                    self.pos += 1;
                }
                b'.' => {
                    if let Some((_, bpos)) = pending {
                        return Err(SmilesError::DanglingBond(bpos));
                    }
                    if prev.is_none() || !branches.is_empty() {
                        return Err(SmilesError::UnexpectedChar('.', at));
                    }
                    prev = None;
                    self.pos += 1;
                }
                b'0'..=b'9' | b'%' => {
                    let atom = prev.ok_or(SmilesError::UnexpectedChar(c as char, at))?;
                    let num = self.ring_number()?;
                    let here = pending.take().map(|(s, _)| s);
                    match rings.remove(&num) {
                        Some((other, there)) => {
                            let symbol = match (there, here) {
                                (Some(a), Some(b)) if a != b => {
                                    return Err(SmilesError::BondConflict(num))
                                }
                                (a, b) => a.or(b).unwrap_or('-'),
                            };
                            ring_order.retain(|&r| r != num);
                            self.add_bond(other, atom, bond_label(symbol))?;
                        }
                        None => {
                            rings.insert(num, (atom, here));
                            ring_order.push(num);
                        }
                    }
                }
                b'[' => {
                    let idx = self.bracket_atom()?;
                    self.link(&mut prev, &mut pending, idx)?;
                }
                b'A'..=b'Z' | b'a'..=b'z' => {
                    let idx = self.organic_atom()?;
                    self.link(&mut prev, &mut pending, idx)?;
                }
                _ => {
                    let ch = self.text[at..].chars().next().unwrap_or('?');
                    return Err(SmilesError::UnexpectedChar(ch, at));
                }
            }
        }
        if let Some((_, bpos)) = pending {
            return Err(SmilesError::DanglingBond(bpos));
        }
        if let Some(&(_, at)) = branches.last() {
            return Err(SmilesError::UnbalancedParenthesis(at));
        }
        if let Some(&num) = ring_order.first() {
            return Err(SmilesError::UnclosedRing(num));
        }
        Ok(MoleculeSpec {
            atoms: self.atoms,
            bonds: self.bonds,
            source_text: self.text.to_string(),
        })
    }

    fn link(
        &mut self,
        prev: &mut Option<usize>,
        pending: &mut Option<(char, usize)>,
        idx: usize,
    ) -> Result<(), SmilesError> {
        if let Some(p) = *prev {
            let symbol = pending.take().map_or('-', |(s, _)| s);
            self.add_bond(p, idx, bond_label(symbol))?;
        }
        *prev = Some(idx);
        Ok(())
    }
}

pub fn parse_smiles(text: &str, vocab: &Vocab) -> Result<MoleculeSpec, SmilesError> {
    if text.trim().is_empty() {
        return Err(SmilesError::EmptyInput);
    }
    Parser {
        text,
        bytes: text.as_bytes(),
        pos: 0,
        vocab,
        atoms: Vec::new(),
        bonds: Vec::new(),
    }
    .run()
}

/// Parses straight into a graph.
pub fn smiles_to_graph(text: &str, vocab: &Vocab) -> Result<CategoricalGraph, SmilesError> {
    Ok(parse_smiles(text, vocab)?.to_graph(vocab)?)
}

fn atom_token(label: &str) -> String {
    if ORGANIC_SUBSET.contains(&label) {
        label.to_string()
    } else {
        format!("[{label}]")
    }
}

fn ring_token(num: u32) -> String {
    if num < 10 {
        num.to_string()
    } else {
        format!("%{num:02}")
    }
}

/// Depth-first SMILES: components in order of their lowest atom index,
/// neighbours visited in index order, ring bond symbols on the opening digit.
pub fn write_smiles(spec: &MoleculeSpec) -> String {
    let n = spec.atoms.len();
    let mut adj: Vec<Vec<(usize, &str)>> = vec![Vec::new(); n];
    for (i, j, l) in &spec.bonds {
        adj[*i].push((*j, l));
        adj[*j].push((*i, l));
    }
    adj.iter_mut().for_each(|a| a.sort_by_key(|e| e.0));

    let mut visited = vec![false; n];
    let mut children: Vec<Vec<(usize, &str)>> = vec![Vec::new(); n];
    // ring bonds per atom: (other end, label, whether this end opens)
    let mut ring_ends: Vec<Vec<(usize, &str, bool)>> = vec![Vec::new(); n];
    let mut roots = Vec::new();

    fn explore<'s>(
        u: usize,
        parent: Option<usize>,
        adj: &[Vec<(usize, &'s str)>],
        visited: &mut [bool],
        children: &mut [Vec<(usize, &'s str)>],
        ring_ends: &mut [Vec<(usize, &'s str, bool)>],
    ) {
        visited[u] = true;
        for &(v, l) in &adj[u] {
            if Some(v) == parent {
                continue;
            }
            if !visited[v] {
                children[u].push((v, l));
                explore(v, Some(u), adj, visited, children, ring_ends);
            } else if !ring_ends[u].iter().any(|r| r.0 == v) {
                ring_ends[v].push((u, l, true));
                ring_ends[u].push((v, l, false));
            }
        }
    }

    for r in 0..n {
        if !visited[r] {
            roots.push(r);
            explore(r, None, &adj, &mut visited, &mut children, &mut ring_ends);
        }
    }

    struct Emitter<'s> {
        atoms: &'s [String],
        children: Vec<Vec<(usize, &'s str)>>,
        ring_ends: Vec<Vec<(usize, &'s str, bool)>>,
        open: HashMap<(usize, usize), u32>,
        in_use: Vec<bool>,
        out: String,
    }

    impl Emitter<'_> {
        fn emit(&mut self, u: usize) {
            self.out.push_str(&atom_token(&self.atoms[u]));
            let mut released = Vec::new();
            let mut ends = self.ring_ends[u].clone();
            // closings first, in the order their rings were opened
            ends.sort_by_key(|&(v, _, opens)| (opens, if opens { 0 } else { self.open[&(v, u)] }, v));
            for (v, l, opens) in ends {
                if opens {
                    let num = (1..)
                        .find(|&d| self.in_use.get(d as usize).map_or(true, |b| !b))
                        .expect("free ring number");
                    if self.in_use.len() <= num as usize {
                        self.in_use.resize(num as usize + 1, false);
                    }
                    self.in_use[num as usize] = true;
                    self.open.insert((u, v), num);
                    let _ = write!(self.out, "{}{}", bond_symbol(l), ring_token(num));
                } else {
                    let num = self.open.remove(&(v, u)).expect("ring opened earlier");
                    self.out.push_str(&ring_token(num));
                    released.push(num);
                }
            }
            for num in released {
                self.in_use[num as usize] = false;
            }
            let kids = self.children[u].clone();
            for (k, &(v, l)) in kids.iter().enumerate() {
                let last = k + 1 == kids.len();
                if !last {
                    self.out.push('(');
                }
                self.out.push_str(bond_symbol(l));
                self.emit(v);
                if !last {
                    self.out.push(')');
                }
            }
        }
    }

    let mut em = Emitter {
        atoms: &spec.atoms,
        children,
        ring_ends,
        open: HashMap::new(),
        in_use: vec![true],
        out: String::new(),
    };
    for (k, &r) in roots.iter().enumerate() {
        if k > 0 {
            em.out.push('.');
        }
        em.emit(r);
    }
    em.out
}

pub fn graph_to_smiles(g: &CategoricalGraph, vocab: &Vocab) -> String {
    write_smiles(&MoleculeSpec::from_graph(g, vocab))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValenceViolation {
    pub atom: usize,
    pub used: u32,
    pub max: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityReport {
    pub valid: bool,
    pub violations: Vec<ValenceViolation>,
    pub connected: bool,
}

fn used_valence(g: &CategoricalGraph, vocab: &Vocab, i: usize) -> u32 {
    g.neighbors(i).map(|(_, e)| vocab.bonds.bond_order(e)).sum()
}

pub fn is_connected(g: &CategoricalGraph) -> bool {
    let n = g.n();
    if n <= 1 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut stack = vec![0];
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = stack.pop() {
        for (v, _) in g.neighbors(u) {
            if !seen[v] {
                seen[v] = true;
                count += 1;
                stack.push(v);
            }
        }
    }
    count == n
}

/// Valence capacity per atom plus single-component connectivity.
pub fn check_valence(g: &CategoricalGraph, vocab: &Vocab) -> ValidityReport {
    let violations: Vec<_> = (0..g.n())
        .filter_map(|i| {
            let used = used_valence(g, vocab, i);
            let max = vocab.atoms.max_valence(g.node_type(i));
            (used > max).then_some(ValenceViolation { atom: i, used, max })
        })
        .collect();
    let connected = is_connected(g);
    ValidityReport {
        valid: violations.is_empty() && connected,
        violations,
        connected,
    }
}

/// Heavy-atom masses plus implicit hydrogens filling unused valence.
pub fn molecular_weight(g: &CategoricalGraph, vocab: &Vocab) -> f64 {
    (0..g.n())
        .map(|i| {
            let t = g.node_type(i);
            let free = vocab.atoms.max_valence(t).saturating_sub(used_valence(g, vocab, i));
            vocab.atoms.atomic_mass(t) + HYDROGEN_MASS * free as f64
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PropertyId {
    MolecularWeight,
    HeavyAtomCount,
    BondCount,
    HeteroFraction,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("unknown property `{0}`")]
pub struct UnknownProperty(pub String);

impl PropertyId {
    pub const ALL: [PropertyId; 4] = [
        PropertyId::MolecularWeight,
        PropertyId::HeavyAtomCount,
        PropertyId::BondCount,
        PropertyId::HeteroFraction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PropertyId::MolecularWeight => "mw",
            PropertyId::HeavyAtomCount => "heavy_atom_count",
            PropertyId::BondCount => "bond_count",
            PropertyId::HeteroFraction => "hetero_fraction",
        }
    }

    pub fn code(self) -> u32 {
        self as u32
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl FromStr for PropertyId {
    type Err = UnknownProperty;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| UnknownProperty(s.to_string()))
    }
}

pub fn graph_property(g: &CategoricalGraph, vocab: &Vocab, which: PropertyId) -> f64 {
    match which {
        PropertyId::MolecularWeight => molecular_weight(g, vocab),
        PropertyId::HeavyAtomCount => g.n() as f64,
        PropertyId::BondCount => g.bonds().len() as f64,
        PropertyId::HeteroFraction => {
            if g.n() == 0 {
                return 0.0;
            }
            let hetero = g
                .node_types()
                .iter()
                .filter(|&&t| vocab.atoms.symbol(t) != "C")
                .count();
            hetero as f64 / g.n() as f64
        }
    }
}

pub fn property_vector(g: &CategoricalGraph, vocab: &Vocab, which: &[PropertyId]) -> Vec<f64> {
    which.iter().map(|&p| graph_property(g, vocab, p)).collect()
}
