/// Per-node and per-pair categorical predictions of the clean graph.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOutput {
    pub n: usize,
    pub num_atom_types: usize,
    pub num_bond_types: usize,
    /// `n × a`, rows sum to 1.
    pub node_probs: Vec<f64>,
    /// `n × n × b`, each pair sums to 1 and `(i, j)` equals `(j, i)`.
    pub edge_probs: Vec<f64>,
}

impl DenoiserOutput {
    pub fn node(&self, i: usize) -> &[f64] {
        let a = self.num_atom_types;
        &self.node_probs[i * a..(i + 1) * a]
    }

    pub fn edge(&self, i: usize, j: usize) -> &[f64] {
        let b = self.num_bond_types;
        let p = i * self.n + j;
        &self.edge_probs[p * b..(p + 1) * b]
    }

    /// Uniform predictions for every node and pair.
    pub fn uniform(n: usize, a: usize, b: usize) -> Self {
        Self {
            n,
            num_atom_types: a,
            num_bond_types: b,
            node_probs: vec![1.0 / a as f64; n * a],
            edge_probs: vec![1.0 / b as f64; n * n * b],
        }
    }
}
