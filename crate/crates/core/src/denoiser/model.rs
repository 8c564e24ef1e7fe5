use rand::Rng;
use thiserror::Error;

use super::tape::{softmax, Mat, Pool, Tape, Var};
use super::DenoiserOutput;
use crate::diffusion::{Conditioning, Denoise};
use crate::graphdata::CategoricalGraph;
use crate::rng::substream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenoiserError {
    #[error("invalid denoiser config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("training set is empty")]
    EmptyDataset,
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub layers: usize,
    pub d_node: usize,
    pub d_edge: usize,
    pub d_global: usize,
    pub heads: usize,
    pub d_guide: usize,
    /// Probability of swapping the guide for the placeholder during training.
    pub rho: f64,
    /// Weight of the edge term in the loss.
    pub gamma: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            d_node: 32,
            d_edge: 16,
            d_global: 16,
            heads: 4,
            d_guide: 16,
            rho: 0.1,
            gamma: 2.0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), DenoiserError> {
        let bad = |m: &str| Err(DenoiserError::InvalidConfig(m.to_string()));
        if self.layers == 0 {
            return bad("layers must be at least 1");
        }
        if self.d_node == 0 || self.d_edge == 0 || self.d_global == 0 || self.d_guide == 0 {
            return bad("all widths must be at least 1");
        }
        if self.heads == 0 || self.d_node % self.heads != 0 {
            return bad("d_node must be a positive multiple of heads");
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho must lie in [0, 1]");
        }
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return bad("gamma must be finite and non-negative");
        }
        Ok(())
    }
}

/// Sizes fixed by the data rather than by the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelShape {
    pub guide_dim: usize,
    pub atom_types: usize,
    pub bond_types: usize,
    /// Diffusion horizon `T`, used to scale the time feature.
    pub steps: usize,
    /// Largest training graph, used to scale the size feature.
    pub n_max: usize,
}

pub const PLACEHOLDER: &str = "placeholder";
pub const PLACEHOLDER_INIT: f64 = -3.0;

#[derive(Debug, Clone, Copy)]
enum Init {
    Glorot,
    Zero,
    Const(f64),
}

struct LayerIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    e_mul: usize,
    e_mul_b: usize,
    e_add: usize,
    e_add_b: usize,
    y_to_e: usize,
    u_e_mul: usize,
    u_e_add: usize,
    u_x_mul: usize,
    u_x_add: usize,
    x_out: usize,
    x_out_b: usize,
    e_out: usize,
    e_out_b: usize,
    x_ff1: usize,
    x_ff1_b: usize,
    x_ff2: usize,
    x_ff2_b: usize,
    e_ff1: usize,
    e_ff1_b: usize,
    e_ff2: usize,
    e_ff2_b: usize,
    u_self: usize,
    u_from_x: usize,
    u_from_e: usize,
    u_b: usize,
    u_ff1: usize,
    u_ff1_b: usize,
    u_ff2: usize,
    u_ff2_b: usize,
}

struct Layout {
    placeholder: usize,
    y_emb: usize,
    y_emb_b: usize,
    x_in: usize,
    x_in_b: usize,
    e_in: usize,
    e_in_b: usize,
    u_in: usize,
    u_in_b: usize,
    layers: Vec<LayerIdx>,
    x_head: usize,
    x_head_b: usize,
    e_head: usize,
    e_head_b: usize,
}

struct Spec {
    names: Vec<String>,
    dims: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Spec {
    fn add(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.dims.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }
}

fn layout(c: &DenoiserConfig, s: &ModelShape) -> (Spec, Layout) {
    let mut sp = Spec {
        names: Vec::new(),
        dims: Vec::new(),
        inits: Vec::new(),
    };
    let (dx, de, du) = (c.d_node, c.d_edge, c.d_global);
    let placeholder = sp.add(PLACEHOLDER.into(), 1, s.guide_dim, Init::Const(PLACEHOLDER_INIT));
    let y_emb = sp.add("guide.w".into(), s.guide_dim, c.d_guide, Init::Glorot);
    let y_emb_b = sp.add("guide.b".into(), 1, c.d_guide, Init::Zero);
    let x_in = sp.add("in.x.w".into(), s.atom_types, dx, Init::Glorot);
    let x_in_b = sp.add("in.x.b".into(), 1, dx, Init::Zero);
    let e_in = sp.add("in.e.w".into(), s.bond_types, de, Init::Glorot);
    let e_in_b = sp.add("in.e.b".into(), 1, de, Init::Zero);
    let u_in = sp.add("in.u.w".into(), 2 + c.d_guide, du, Init::Glorot);
    let u_in_b = sp.add("in.u.b".into(), 1, du, Init::Zero);
    let mut layers = Vec::with_capacity(c.layers);
    for l in 0..c.layers {
        let mut w = |name: &str, r: usize, k: usize| sp.add(format!("layer{l}.{name}"), r, k, Init::Glorot);
        let (wq, wk, wv) = (w("q", dx, dx), w("k", dx, dx), w("v", dx, dx));
        let e_mul = w("film.e_mul.w", de, dx);
        let e_add = w("film.e_add.w", de, dx);
        let y_to_e = w("edge_from_scores", dx, de);
        let u_e_mul = w("film.u_e_mul", du, de);
        let u_e_add = w("film.u_e_add", du, de);
        let u_x_mul = w("film.u_x_mul", du, dx);
        let u_x_add = w("film.u_x_add", du, dx);
        let x_out = w("out.x.w", dx, dx);
        let e_out = w("out.e.w", de, de);
        let x_ff1 = w("ff.x1.w", dx, 2 * dx);
        let x_ff2 = w("ff.x2.w", 2 * dx, dx);
        let e_ff1 = w("ff.e1.w", de, 2 * de);
        let e_ff2 = w("ff.e2.w", 2 * de, de);
        let u_self = w("global.self", du, du);
        let u_from_x = w("global.from_x", 4 * dx, du);
        let u_from_e = w("global.from_e", 4 * de, du);
        let u_ff1 = w("ff.u1.w", du, 2 * du);
        let u_ff2 = w("ff.u2.w", 2 * du, du);
        let mut b = |name: &str, k: usize| sp.add(format!("layer{l}.{name}"), 1, k, Init::Zero);
        layers.push(LayerIdx {
            wq,
            wk,
            wv,
            e_mul,
            e_mul_b: b("film.e_mul.b", dx),
            e_add,
            e_add_b: b("film.e_add.b", dx),
            y_to_e,
            u_e_mul,
            u_e_add,
            u_x_mul,
            u_x_add,
            x_out,
            x_out_b: b("out.x.b", dx),
            e_out,
            e_out_b: b("out.e.b", de),
            x_ff1,
            x_ff1_b: b("ff.x1.b", 2 * dx),
            x_ff2,
            x_ff2_b: b("ff.x2.b", dx),
            e_ff1,
            e_ff1_b: b("ff.e1.b", 2 * de),
            e_ff2,
            e_ff2_b: b("ff.e2.b", de),
            u_self,
            u_from_x,
            u_from_e,
            u_b: b("global.b", du),
            u_ff1,
            u_ff1_b: b("ff.u1.b", 2 * du),
            u_ff2,
            u_ff2_b: b("ff.u2.b", du),
        });
    }
    let x_head = sp.add("head.x.w".into(), dx, s.atom_types, Init::Glorot);
    let x_head_b = sp.add("head.x.b".into(), 1, s.atom_types, Init::Zero);
    let e_head = sp.add("head.e.w".into(), de, s.bond_types, Init::Glorot);
    let e_head_b = sp.add("head.e.b".into(), 1, s.bond_types, Init::Zero);
    let lay = Layout {
        placeholder,
        y_emb,
        y_emb_b,
        x_in,
        x_in_b,
        e_in,
        e_in_b,
        u_in,
        u_in_b,
        layers,
        x_head,
        x_head_b,
        e_head,
        e_head_b,
    };
    (sp, lay)
}

/// All trainable tensors of the denoiser, in a fixed named order.
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub shape: ModelShape,
    names: Vec<String>,
    pub tensors: Vec<Mat>,
    layout: Layout,
}

impl Clone for DenoiserParams {
    fn clone(&self) -> Self {
        let mut p = Self::zeros(self.config.clone(), self.shape).expect("validated on construction");
        p.tensors = self.tensors.clone();
        p
    }
}

impl std::fmt::Debug for DenoiserParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenoiserParams")
            .field("config", &self.config)
            .field("shape", &self.shape)
            .field("tensors", &self.tensors.len())
            .finish()
    }
}

impl PartialEq for DenoiserParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.shape == other.shape && self.tensors == other.tensors
    }
}

fn check_shape(s: &ModelShape) -> Result<(), DenoiserError> {
    if s.guide_dim == 0 || s.atom_types == 0 || s.bond_types < 2 || s.steps == 0 || s.n_max == 0 {
        return Err(DenoiserError::InvalidConfig(format!("degenerate model shape {s:?}")));
    }
    Ok(())
}

impl DenoiserParams {
    /// Every tensor set to zero (the placeholder included).
    pub fn zeros(config: DenoiserConfig, shape: ModelShape) -> Result<Self, DenoiserError> {
        config.validate()?;
        check_shape(&shape)?;
        let (spec, layout) = layout(&config, &shape);
        let tensors = spec.dims.iter().map(|&(r, c)| Mat::zeros(r, c)).collect();
        Ok(Self {
            config,
            shape,
            names: spec.names,
            tensors,
            layout,
        })
    }

    /// Glorot-uniform weights, zero biases, placeholder at a constant well
    /// away from standardized guides.
    pub fn init(config: DenoiserConfig, shape: ModelShape, seed: u64) -> Result<Self, DenoiserError> {
        let mut p = Self::zeros(config, shape)?;
        let (spec, _) = layout(&p.config, &p.shape);
        let mut rng = substream(seed, "denoiser.init");
        for (t, init) in p.tensors.iter_mut().zip(&spec.inits) {
            match init {
                Init::Zero => {}
                Init::Const(v) => t.data.iter_mut().for_each(|x| *x = *v),
                Init::Glorot => {
                    let a = (6.0 / (t.rows + t.cols) as f64).sqrt();
                    t.data.iter_mut().for_each(|x| *x = rng.gen_range(-a..a));
                }
            }
        }
        Ok(p)
    }

    /// Rebuild from named tensors, as read from a checkpoint.
    pub fn from_named(
        config: DenoiserConfig,
        shape: ModelShape,
        named: &[(String, Mat)],
    ) -> Result<Self, DenoiserError> {
        let mut p = Self::zeros(config, shape)?;
        for (i, name) in p.names.iter().enumerate() {
            let Some((_, m)) = named.iter().find(|(n, _)| n == name) else {
                return Err(DenoiserError::ShapeMismatch(format!("missing tensor {name}")));
            };
            if (m.rows, m.cols) != (p.tensors[i].rows, p.tensors[i].cols) {
                return Err(DenoiserError::ShapeMismatch(format!(
                    "tensor {name} is {}×{}, expected {}×{}",
                    m.rows, m.cols, p.tensors[i].rows, p.tensors[i].cols
                )));
            }
            p.tensors[i] = m.clone();
        }
        Ok(p)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn placeholder(&self) -> &[f64] {
        &self.tensors[self.layout.placeholder].data
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Mat::len).sum()
    }

    /// Zero the final node and edge projections.
    pub fn zero_output_heads(&mut self) {
        let l = &self.layout;
        for i in [l.x_head, l.x_head_b, l.e_head, l.e_head_b] {
            self.tensors[i].data.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    fn check_graph(&self, g: &CategoricalGraph) -> Result<(), DenoiserError> {
        if g.num_atom_types() != self.shape.atom_types || g.num_bond_types() != self.shape.bond_types {
            return Err(DenoiserError::ShapeMismatch(format!(
                "graph has {} atom / {} bond types, model expects {} / {}",
                g.num_atom_types(),
                g.num_bond_types(),
                self.shape.atom_types,
                self.shape.bond_types
            )));
        }
        if g.n() == 0 {
            return Err(DenoiserError::ShapeMismatch("graph has no nodes".into()));
        }
        Ok(())
    }

    fn check_cond(&self, cond: Conditioning<'_>) -> Result<(), DenoiserError> {
        if let Conditioning::Guide(y) = cond {
            if y.dim() != self.shape.guide_dim {
                return Err(DenoiserError::ShapeMismatch(format!(
                    "guide has dimension {}, model expects {}",
                    y.dim(),
                    self.shape.guide_dim
                )));
            }
        }
        Ok(())
    }

    /// Records the network on `tape`, returning node logits (`n × a`) and
    /// symmetrized edge logits (`n² × b`).
    pub(crate) fn record(
        &self,
        tape: &mut Tape<'_>,
        g: &CategoricalGraph,
        t: usize,
        cond: Conditioning<'_>,
    ) -> (Var, Var) {
        let (c, s, lay) = (&self.config, &self.shape, &self.layout);
        let n = g.n();
        let p = |tape: &mut Tape<'_>, i: usize| tape.param(i);

        let y = match cond {
            Conditioning::Guide(y) => tape.constant(Mat::from_vec(1, y.dim(), y.values().to_vec())),
            Conditioning::Placeholder => p(tape, lay.placeholder),
        };
        let (wy, by) = (p(tape, lay.y_emb), p(tape, lay.y_emb_b));
        let ye = tape.matmul(y, wy);
        let ye = tape.add_row(ye, by);
        let ye = tape.relu(ye);
        let feats = tape.constant(Mat::from_vec(
            1,
            2,
            vec![t as f64 / s.steps as f64, n as f64 / s.n_max as f64],
        ));
        let u0 = tape.concat_cols(&[feats, ye]);
        let mut u = self.linear(tape, u0, lay.u_in, lay.u_in_b);

        let x0 = tape.constant(Mat::from_vec(n, s.atom_types, g.node_onehot()));
        let mut h = self.linear(tape, x0, lay.x_in, lay.x_in_b);
        let e0 = tape.constant(Mat::from_vec(n * n, s.bond_types, g.edge_onehot()));
        let mut e = self.linear(tape, e0, lay.e_in, lay.e_in_b);

        let scale = 1.0 / ((c.d_node / c.heads) as f64).sqrt();
        for li in &lay.layers {
            let q = tape.param(li.wq);
            let q = tape.matmul(h, q);
            let k = tape.param(li.wk);
            let k = tape.matmul(h, k);
            let v = tape.param(li.wv);
            let v = tape.matmul(h, v);

            // edge features FiLM the raw pairwise scores
            let scores = tape.pair_product(q, k, scale);
            let e_mul = self.linear(tape, e, li.e_mul, li.e_mul_b);
            let e_mul = tape.add_const(e_mul, 1.0);
            let e_add = self.linear(tape, e, li.e_add, li.e_add_b);
            let scores = tape.mul(scores, e_mul);
            let scores = tape.add(scores, e_add);

            let w = tape.param(li.y_to_e);
            let e_new = tape.matmul(scores, w);
            let e_new = self.film(tape, e_new, u, li.u_e_mul, li.u_e_add);

            let attn = tape.neighbor_softmax(scores, n);
            let x_new = tape.weighted_sum(attn, v, n);
            let x_new = self.film(tape, x_new, u, li.u_x_mul, li.u_x_add);

            let x_proj = self.linear(tape, x_new, li.x_out, li.x_out_b);
            let hs = tape.add(h, x_proj);
            let hn = tape.layer_norm(hs);
            let ff = self.feed_forward(tape, hn, li.x_ff1, li.x_ff1_b, li.x_ff2, li.x_ff2_b);
            let hs = tape.add(hn, ff);
            let h_next = tape.layer_norm(hs);

            let e_proj = self.linear(tape, e_new, li.e_out, li.e_out_b);
            let es = tape.add(e, e_proj);
            let en = tape.layer_norm(es);
            let ff = self.feed_forward(tape, en, li.e_ff1, li.e_ff1_b, li.e_ff2, li.e_ff2_b);
            let es = tape.add(en, ff);
            let e_next = tape.layer_norm(es);

            // global update from pooled node and edge states
            let xp = [Pool::Mean, Pool::Max, Pool::Min, Pool::Std].map(|k| tape.pool(h_next, k));
            let xp = tape.concat_cols(&xp);
            let ep = [Pool::Mean, Pool::Max, Pool::Min, Pool::Std].map(|k| tape.pool(e_next, k));
            let ep = tape.concat_cols(&ep);
            let w_self = tape.param(li.u_self);
            let us = tape.matmul(u, w_self);
            let w_x = tape.param(li.u_from_x);
            let ux = tape.matmul(xp, w_x);
            let w_e = tape.param(li.u_from_e);
            let ue = tape.matmul(ep, w_e);
            let u_new = tape.add(us, ux);
            let u_new = tape.add(u_new, ue);
            let ub = tape.param(li.u_b);
            let u_new = tape.add_row(u_new, ub);
            let u_sum = tape.add(u, u_new);
            let un = tape.layer_norm(u_sum);
            let ff = self.feed_forward(tape, un, li.u_ff1, li.u_ff1_b, li.u_ff2, li.u_ff2_b);
            let u_sum = tape.add(un, ff);
            u = tape.layer_norm(u_sum);

            h = h_next;
            e = e_next;
        }

        let node_logits = self.linear(tape, h, lay.x_head, lay.x_head_b);
        let edge_logits = self.linear(tape, e, lay.e_head, lay.e_head_b);
        let edge_logits = tape.symmetrize(edge_logits, n);
        (node_logits, edge_logits)
    }

    fn linear(&self, tape: &mut Tape<'_>, x: Var, w: usize, b: usize) -> Var {
        let w = tape.param(w);
        let b = tape.param(b);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    /// `x ⊙ (1 + u·W_mul) + u·W_add`, the global state broadcast over rows.
    fn film(&self, tape: &mut Tape<'_>, x: Var, u: Var, w_mul: usize, w_add: usize) -> Var {
        let wm = tape.param(w_mul);
        let gain = tape.matmul(u, wm);
        let gain = tape.add_const(gain, 1.0);
        let wa = tape.param(w_add);
        let shift = tape.matmul(u, wa);
        let y = tape.mul_row(x, gain);
        tape.add_row(y, shift)
    }

    fn feed_forward(&self, tape: &mut Tape<'_>, x: Var, w1: usize, b1: usize, w2: usize, b2: usize) -> Var {
        let hidden = self.linear(tape, x, w1, b1);
        let hidden = tape.relu(hidden);
        self.linear(tape, hidden, w2, b2)
    }

    /// Clean-graph predictions for `g` at step `t`.
    pub fn forward(
        &self,
        g: &CategoricalGraph,
        t: usize,
        cond: Conditioning<'_>,
    ) -> Result<DenoiserOutput, DenoiserError> {
        self.check_graph(g)?;
        self.check_cond(cond)?;
        if t == 0 || t > self.shape.steps {
            return Err(DenoiserError::ShapeMismatch(format!(
                "step {t} outside 1..={}",
                self.shape.steps
            )));
        }
        let mut tape = Tape::new(&self.tensors);
        let (xl, el) = self.record(&mut tape, g, t, cond);
        let softmax_rows = |m: &Mat| -> Vec<f64> { (0..m.rows).flat_map(|r| softmax(m.row(r))).collect() };
        Ok(DenoiserOutput {
            n: g.n(),
            num_atom_types: self.shape.atom_types,
            num_bond_types: self.shape.bond_types,
            node_probs: softmax_rows(tape.value(xl)),
            edge_probs: softmax_rows(tape.value(el)),
        })
    }

    pub(crate) fn validate_inputs(&self, g: &CategoricalGraph, cond: Conditioning<'_>) -> Result<(), DenoiserError> {
        self.check_graph(g)?;
        self.check_cond(cond)
    }
}

impl Denoise for DenoiserParams {
    fn predict(&self, g_t: &CategoricalGraph, t: usize, cond: Conditioning<'_>) -> DenoiserOutput {
        self.forward(g_t, t, cond).expect("sampler passes matching shapes")
    }
}
