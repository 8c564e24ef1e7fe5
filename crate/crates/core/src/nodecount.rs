//! Guide-conditioned graph-size distribution.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::denoiser::tape::{softmax, Mat, Tape};
use crate::denoiser::AmsGrad;
use crate::diffusion::CategoricalDistribution;
use crate::graphdata::Guide;
use crate::rng::substream;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NodeCountError {
    #[error("guide has dimension {found}, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("node-count training diverged at epoch {0}")]
    Diverged(usize),
    #[error("node-count training set is empty")]
    EmptyDataset,
    #[error("size {n} outside 1..={n_max}")]
    SizeOutOfRange { n: usize, n_max: usize },
    #[error("invalid node-count setting: {0}")]
    InvalidConfig(String),
}

pub const TENSOR_PREFIX: &str = "nodecount.";
const NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

/// Two ReLU hidden layers and a softmax over sizes `1..=n_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeCountModel {
    pub guide_dim: usize,
    pub hidden: usize,
    pub n_max: usize,
    pub tensors: Vec<Mat>,
}

impl NodeCountModel {
    pub fn init(guide_dim: usize, hidden: usize, n_max: usize, seed: u64) -> Result<Self, NodeCountError> {
        if guide_dim == 0 || hidden == 0 || n_max == 0 {
            return Err(NodeCountError::InvalidConfig("dimensions must be at least 1".into()));
        }
        let mut rng = substream(seed, "nodecount.init");
        let mut glorot = |r: usize, c: usize| {
            let a = (6.0 / (r + c) as f64).sqrt();
            Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-a..a)).collect())
        };
        let tensors = vec![
            glorot(guide_dim, hidden),
            Mat::zeros(1, hidden),
            glorot(hidden, hidden),
            Mat::zeros(1, hidden),
            glorot(hidden, n_max),
            Mat::zeros(1, n_max),
        ];
        Ok(Self {
            guide_dim,
            hidden,
            n_max,
            tensors,
        })
    }

    fn record(&self, tape: &mut Tape<'_>, inputs: Mat) -> crate::denoiser::tape::Var {
        let mut x = tape.constant(inputs);
        for layer in 0..3 {
            let w = tape.param(2 * layer);
            let b = tape.param(2 * layer + 1);
            let y = tape.matmul(x, w);
            x = tape.add_row(y, b);
            if layer < 2 {
                x = tape.relu(x);
            }
        }
        x
    }

    fn check_dim(&self, y: &Guide) -> Result<(), NodeCountError> {
        if y.dim() != self.guide_dim {
            return Err(NodeCountError::DimensionMismatch {
                expected: self.guide_dim,
                found: y.dim(),
            });
        }
        Ok(())
    }

    /// `P(n = k + 1 | y)` at index `k`.
    pub fn probs(&self, y: &Guide) -> Result<Vec<f64>, NodeCountError> {
        self.check_dim(y)?;
        let mut tape = Tape::new(&self.tensors);
        let out = self.record(&mut tape, Mat::from_vec(1, self.guide_dim, y.values().to_vec()));
        Ok(softmax(tape.value(out).row(0)))
    }

    /// Most probable size.
    pub fn mode(&self, y: &Guide) -> Result<usize, NodeCountError> {
        let p = self.probs(y)?;
        Ok(CategoricalDistribution::new(p).map(|d| d.argmax()).unwrap_or(0) + 1)
    }

    pub fn to_named(&self) -> Vec<(String, Mat)> {
        NAMES
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (format!("{TENSOR_PREFIX}{n}"), t.clone()))
            .collect()
    }

    pub fn from_named(named: &[(String, Mat)]) -> Option<Self> {
        let tensors: Vec<Mat> = NAMES
            .iter()
            .map(|n| {
                let key = format!("{TENSOR_PREFIX}{n}");
                named.iter().find(|(k, _)| *k == key).map(|(_, m)| m.clone())
            })
            .collect::<Option<_>>()?;
        let (d, h, n_max) = (tensors[0].rows, tensors[0].cols, tensors[4].cols);
        let shapes = [(d, h), (1, h), (h, h), (1, h), (h, n_max), (1, n_max)];
        if tensors.iter().zip(shapes).any(|(t, s)| (t.rows, t.cols) != s) {
            return None;
        }
        Some(Self {
            guide_dim: d,
            hidden: h,
            n_max,
            tensors,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeCountOptions {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for NodeCountOptions {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 200,
            batch_size: 64,
            lr: 3e-3,
            seed: 0,
        }
    }
}

/// Cross-entropy training of size classification on `(guide, n)` pairs.
pub fn train_nodecount(
    data: &[(Guide, usize)],
    n_max: usize,
    opts: &NodeCountOptions,
) -> Result<NodeCountModel, NodeCountError> {
    let Some(first) = data.first() else {
        return Err(NodeCountError::EmptyDataset);
    };
    if opts.batch_size == 0 {
        return Err(NodeCountError::InvalidConfig("batch size must be at least 1".into()));
    }
    let mut model = NodeCountModel::init(first.0.dim(), opts.hidden, n_max, opts.seed)?;
    for (y, n) in data {
        model.check_dim(y)?;
        if *n == 0 || *n > n_max {
            return Err(NodeCountError::SizeOutOfRange { n: *n, n_max });
        }
    }
    let d = model.guide_dim;
    let mut rng = substream(opts.seed, "nodecount.train");
    let mut opt = AmsGrad::new(&model.tensors, opts.lr, 0.0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let inputs: Vec<f64> = chunk.iter().flat_map(|&i| data[i].0.values().iter().copied()).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| data[i].1 - 1).collect();
            let weights = vec![1.0 / chunk.len() as f64; chunk.len()];
            let grads = {
                let mut tape = Tape::new(&model.tensors);
                let logits = model.record(&mut tape, Mat::from_vec(chunk.len(), d, inputs));
                let l = tape.cross_entropy(logits, &targets, &weights);
                if !tape.value(l).data[0].is_finite() {
                    return Err(NodeCountError::Diverged(epoch));
                }
                tape.backward(l)
            };
            opt.update(&mut model.tensors, &grads);
        }
        if model.tensors.iter().any(|t| t.data.iter().any(|x| !x.is_finite())) {
            return Err(NodeCountError::Diverged(epoch));
        }
    }
    Ok(model)
}

pub fn sample_node_count<R: Rng + ?Sized>(
    model: &NodeCountModel,
    y: &Guide,
    rng: &mut R,
) -> Result<usize, NodeCountError> {
    let p = model.probs(y)?;
    let d = CategoricalDistribution::new(p).expect("softmax output is a distribution");
    Ok(d.sample(rng) + 1)
}

/// Where generated graph sizes come from.
#[derive(Debug, Clone, Copy)]
pub enum SizeSource<'a> {
    /// Training-set size marginal, `m[k] = P(n = k + 1)`.
    Marginal(&'a [f64]),
    Inferred(&'a NodeCountModel),
}

impl SizeSource<'_> {
    pub fn sample<R: Rng + ?Sized>(&self, y: &Guide, rng: &mut R) -> Result<usize, NodeCountError> {
        match self {
            SizeSource::Marginal(m) => {
                let d = CategoricalDistribution::new(m.to_vec())
                    .map_err(|_| NodeCountError::InvalidConfig("size marginal is not a distribution".into()))?;
                Ok(d.sample(rng) + 1)
            }
            SizeSource::Inferred(model) => sample_node_count(model, y, rng),
        }
    }
}
