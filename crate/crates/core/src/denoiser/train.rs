use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::{DenoiserConfig, DenoiserError, DenoiserParams, ModelShape};
use super::tape::{Mat, Tape};
use super::DenoiserOutput;
use crate::diffusion::{forward_sample, Conditioning};
use crate::graphdata::{CategoricalGraph, DatasetMarginals, Guide};
use crate::rng::substream;
use crate::schedule::NoiseSchedule;

/// Floor applied to probabilities before taking logs in [`loss`].
pub const LOG_CLAMP: f64 = 1e-12;

fn ce(p: &[f64], target: usize) -> f64 {
    -p[target].max(LOG_CLAMP).ln()
}

/// Node cross-entropy plus `gamma` times the edge cross-entropy counted
/// over both orientations of every unordered pair; the diagonal is ignored.
pub fn loss(out: &DenoiserOutput, g0: &CategoricalGraph, gamma: f64) -> f64 {
    assert_eq!(out.n, g0.n(), "prediction and target sizes differ");
    let n = out.n;
    let nodes: f64 = (0..n).map(|i| ce(out.node(i), g0.node_type(i))).sum();
    let mut edges = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            edges += 2.0 * ce(out.edge(i, j), g0.edge_type(i, j));
        }
    }
    nodes + gamma * edges
}

/// Loss of one prediction and its gradients with respect to every tensor.
pub fn loss_and_grad(
    params: &DenoiserParams,
    g_t: &CategoricalGraph,
    t: usize,
    cond: Conditioning<'_>,
    g0: &CategoricalGraph,
) -> Result<(f64, Vec<Mat>), DenoiserError> {
    params.validate_inputs(g_t, cond)?;
    let n = g0.n();
    if g_t.n() != n {
        return Err(DenoiserError::ShapeMismatch("noisy and clean graphs differ in size".into()));
    }
    let gamma = params.config.gamma;
    let mut tape = Tape::new(&params.tensors);
    let (xl, el) = params.record(&mut tape, g_t, t, cond);
    let node_loss = tape.cross_entropy(xl, g0.node_types(), &vec![1.0; n]);
    let weights: Vec<f64> = (0..n * n)
        .map(|p| if p / n == p % n { 0.0 } else { gamma })
        .collect();
    let edge_loss = tape.cross_entropy(el, g0.edge_types(), &weights);
    let total = tape.add(node_loss, edge_loss);
    let value = tape.value(total).data[0];
    Ok((value, tape.backward(total)))
}

/// Mean loss and mean gradients over a batch. Each example draws its own
/// step, noise, and dropout from a seed taken off `rng`, so the result does
/// not depend on how the batch is scheduled across threads.
pub fn grad<R: Rng + ?Sized>(
    params: &DenoiserParams,
    batch: &[(&CategoricalGraph, &Guide)],
    schedule: &NoiseSchedule,
    marginals: &DatasetMarginals,
    rng: &mut R,
) -> Result<(f64, Vec<Mat>), DenoiserError> {
    if batch.is_empty() {
        return Err(DenoiserError::EmptyDataset);
    }
    let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
    let rho = params.config.rho;
    let per_example: Vec<Result<(f64, Vec<Mat>), DenoiserError>> = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(&(g0, y), &seed)| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let t = r.gen_range(1..=schedule.steps());
            let g_t = forward_sample(g0, t, schedule, marginals, &mut r)?;
            let cond = if r.gen::<f64>() < rho {
                Conditioning::Placeholder
            } else {
                Conditioning::Guide(y)
            };
            loss_and_grad(params, &g_t, t, cond, g0)
        })
        .collect();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut acc: Vec<Mat> = params.tensors.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
    for item in per_example {
        let (l, g) = item?;
        total += l * scale;
        for (a, gi) in acc.iter_mut().zip(&g) {
            for (x, y) in a.data.iter_mut().zip(&gi.data) {
                *x += y * scale;
            }
        }
    }
    Ok((total, acc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr: 2e-3,
            weight_decay: 1e-12,
            seed: 0,
        }
    }
}

/// AMSGrad with decoupled weight decay.
pub struct AmsGrad {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    v_max: Vec<Vec<f64>>,
}

impl AmsGrad {
    pub fn new(params: &[Mat], lr: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect::<Vec<_>>();
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
            v_max: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut [Mat], grads: &[Mat]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for (idx, (w, &gw)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[k][idx];
                let v = &mut self.v[k][idx];
                let vm = &mut self.v_max[k][idx];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gw;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gw * gw;
                *vm = vm.max(*v);
                *w -= self.lr * self.weight_decay * *w;
                *w -= self.lr * (*m / bc1) / ((*vm / bc2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: DenoiserParams,
    /// Mean training loss per epoch.
    pub history: Vec<f64>,
}

/// Fresh parameters from `opts.seed`, then [`fit`].
pub fn train(
    config: DenoiserConfig,
    shape: ModelShape,
    examples: &[(CategoricalGraph, Guide)],
    schedule: &NoiseSchedule,
    marginals: &DatasetMarginals,
    opts: &TrainOptions,
) -> Result<TrainResult, DenoiserError> {
    let mut params = DenoiserParams::init(config, shape, opts.seed)?;
    let history = fit(&mut params, examples, schedule, marginals, opts, |_, _| {})?;
    Ok(TrainResult { params, history })
}

/// Runs `opts.epochs` passes over shuffled mini-batches, calling
/// `on_epoch(epoch, mean_loss)` after each.
pub fn fit(
    params: &mut DenoiserParams,
    examples: &[(CategoricalGraph, Guide)],
    schedule: &NoiseSchedule,
    marginals: &DatasetMarginals,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>, DenoiserError> {
    if examples.is_empty() {
        return Err(DenoiserError::EmptyDataset);
    }
    if opts.batch_size == 0 {
        return Err(DenoiserError::InvalidConfig("batch size must be at least 1".into()));
    }
    if schedule.steps() != params.shape.steps {
        return Err(DenoiserError::ShapeMismatch(format!(
            "schedule has {} steps, model expects {}",
            schedule.steps(),
            params.shape.steps
        )));
    }
    let mut rng = substream(opts.seed, "denoiser.train");
    let mut opt = AmsGrad::new(&params.tensors, opts.lr, opts.weight_decay);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.batch_size) {
            let batch: Vec<(&CategoricalGraph, &Guide)> =
                chunk.iter().map(|&i| (&examples[i].0, &examples[i].1)).collect();
            let (l, g) = grad(params, &batch, schedule, marginals, &mut rng)?;
            if !l.is_finite() || g.iter().any(|m| m.data.iter().any(|x| !x.is_finite())) {
                return Err(DenoiserError::Diverged { epoch, loss: l });
            }
            opt.update(&mut params.tensors, &g);
            sum += l;
            batches += 1;
        }
        let mean = sum / batches as f64;
        if !params.is_finite() {
            return Err(DenoiserError::Diverged { epoch, loss: mean });
        }
        history.push(mean);
        on_epoch(epoch, mean);
    }
    Ok(history)
}
