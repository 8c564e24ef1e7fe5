//! Forward noising, categorical posteriors, classifier-free guidance and the
//! reverse sampling loop.
//!
//! Node and edge chains are handled identically: each position carries a
//! category that is corrupted by its own transition matrices (built from the
//! node or edge marginal). Edges are drawn once per unordered pair and mirrored.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use thiserror::Error;

use crate::denoiser::DenoiserOutput;
use crate::graphdata::{CategoricalGraph, DatasetMarginals, Guide};
use crate::schedule::{
    check_marginal, cumulative_transition, step_transition, NoiseSchedule, ScheduleError,
    TransitionMatrix,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("guided mixture has no positive mass; guidance weight too large for these inputs")]
    ZeroMass,
    #[error("state {x_t} is unreachable from clean state {x0} at step {t}")]
    Unreachable { x_t: usize, x0: usize, t: usize },
    #[error("not a probability distribution")]
    NotDistribution,
    #[error("guidance weight must be finite and non-negative, got {0}")]
    BadGuidance(f64),
}

/// Probability vector over `k` categories.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDistribution(Vec<f64>);

impl CategoricalDistribution {
    pub fn new(p: Vec<f64>) -> Result<Self, DiffusionError> {
        let sum: f64 = p.iter().sum();
        if p.is_empty() || p.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(DiffusionError::NotDistribution);
        }
        Ok(Self(p))
    }

    pub fn point_mass(k: usize, at: usize) -> Self {
        let mut p = vec![0.0; k];
        p[at] = 1.0;
        Self(p)
    }

    fn normalized(mut p: Vec<f64>) -> Self {
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= sum);
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_index(&self.0, rng)
    }
}

fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

fn sample_index<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    WeightedIndex::new(p)
        .expect("sampling weights form a distribution")
        .sample(rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidanceMode {
    /// `p_u + s (p_c - p_u)` on probabilities.
    Linear,
    /// `log p_u + s (log p_c - log p_u)`, renormalized.
    Log,
}

impl std::str::FromStr for GuidanceMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(GuidanceMode::Linear),
            "log" => Ok(GuidanceMode::Log),
            other => Err(format!("unknown guidance mode `{other}` (expected linear or log)")),
        }
    }
}

impl std::fmt::Display for GuidanceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GuidanceMode::Linear => "linear",
            GuidanceMode::Log => "log",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub s: f64,
    pub mode: GuidanceMode,
    /// Conditional dropout rate the model was trained with; informational.
    pub rho_trained: f64,
}

impl GuidanceConfig {
    pub fn new(s: f64, mode: GuidanceMode) -> Result<Self, DiffusionError> {
        if !s.is_finite() || s < 0.0 {
            return Err(DiffusionError::BadGuidance(s));
        }
        Ok(Self {
            s,
            mode,
            rho_trained: 0.0,
        })
    }
}

pub const MIX_EPS: f64 = 1e-12;

/// Classifier-free combination of conditional and unconditional predictions.
///
/// `s = 1` returns `p_cond` and `s = 0` returns `p_uncond` unchanged.
pub fn guided_mixture(
    p_cond: &CategoricalDistribution,
    p_uncond: &CategoricalDistribution,
    cfg: &GuidanceConfig,
) -> Result<CategoricalDistribution, DiffusionError> {
    guided_mixture_slices(p_cond.probs(), p_uncond.probs(), cfg)
}

fn guided_mixture_slices(
    p_cond: &[f64],
    p_uncond: &[f64],
    cfg: &GuidanceConfig,
) -> Result<CategoricalDistribution, DiffusionError> {
    assert_eq!(p_cond.len(), p_uncond.len());
    let s = cfg.s;
    if s == 1.0 {
        return Ok(CategoricalDistribution(p_cond.to_vec()));
    }
    if s == 0.0 {
        return Ok(CategoricalDistribution(p_uncond.to_vec()));
    }
    match cfg.mode {
        GuidanceMode::Linear => {
            let mut v: Vec<f64> = p_uncond
                .iter()
                .zip(p_cond)
                .map(|(&u, &c)| u + s * (c - u))
                .collect();
            if v.iter().all(|&x| !(x > MIX_EPS)) {
                return Err(DiffusionError::ZeroMass);
            }
            v.iter_mut().for_each(|x| *x = x.max(MIX_EPS));
            Ok(CategoricalDistribution::normalized(v))
        }
        GuidanceMode::Log => {
            let w: Vec<f64> = p_uncond
                .iter()
                .zip(p_cond)
                .map(|(&u, &c)| {
                    let lu = u.max(MIX_EPS).ln();
                    lu + s * (c.max(MIX_EPS).ln() - lu)
                })
                .collect();
            let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(CategoricalDistribution::normalized(
                w.into_iter().map(|x| (x - max).exp()).collect(),
            ))
        }
    }
}

/// `q(x^{t-1} | x^t, x^0)` for all `x^t, x^0` at one step.
///
/// `None` marks pairs where `x^t` cannot be reached from `x^0`.
#[derive(Debug, Clone)]
pub struct PosteriorTable {
    k: usize,
    table: Vec<Option<Vec<f64>>>,
}

impl PosteriorTable {
    pub fn new(schedule: &NoiseSchedule, m: &[f64], t: usize) -> Result<Self, DiffusionError> {
        check_marginal(m)?;
        schedule.check_step(t)?;
        if t < 2 {
            return Err(ScheduleError::StepOutOfRange {
                step: t,
                horizon: schedule.steps(),
            }
            .into());
        }
        let k = m.len();
        let q_step = step_transition(schedule, m, t)?;
        let q_prev = cumulative_transition(schedule, m, t - 1)?;
        let mut table = Vec::with_capacity(k * k);
        for x_t in 0..k {
            for x0 in 0..k {
                table.push(Self::entry(&q_step, &q_prev, x_t, x0));
            }
        }
        Ok(Self { k, table })
    }

    fn entry(q_step: &TransitionMatrix, q_prev: &TransitionMatrix, x_t: usize, x0: usize) -> Option<Vec<f64>> {
        let k = q_step.dim();
        let unnorm: Vec<f64> = (0..k).map(|z| q_step.get(z, x_t) * q_prev.get(x0, z)).collect();
        let total: f64 = unnorm.iter().sum();
        (total > 0.0).then(|| unnorm.into_iter().map(|p| p / total).collect())
    }

    pub fn get(&self, x_t: usize, x0: usize) -> Option<&[f64]> {
        self.table[x_t * self.k + x0].as_deref()
    }

    /// `Σ_x pred[x] q(· | x_t, x)`; unreachable clean states drop out and the
    /// remainder is renormalized.
    pub fn mix(&self, pred: &[f64], x_t: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for (x0, &w) in pred.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            if let Some(post) = self.get(x_t, x0) {
                for (o, p) in out.iter_mut().zip(post) {
                    *o += w * p;
                }
            }
        }
        let total: f64 = out.iter().sum();
        if total > 0.0 {
            out.iter_mut().for_each(|x| *x /= total);
        } else {
            out = vec![0.0; self.k];
            out[x_t] = 1.0;
        }
        out
    }
}

/// `p(x^{t-1} = z) ∝ Q^t[z, x^t] · Q̄^{t-1}[x^0, z]`, valid for `2 ≤ t ≤ T`.
pub fn posterior_distribution(
    x_t: usize,
    x0: usize,
    t: usize,
    schedule: &NoiseSchedule,
    m: &[f64],
) -> Result<CategoricalDistribution, DiffusionError> {
    let table = PosteriorTable::new(schedule, m, t)?;
    table
        .get(x_t, x0)
        .map(|p| CategoricalDistribution(p.to_vec()))
        .ok_or(DiffusionError::Unreachable { x_t, x0, t })
}

/// Reverse-step marginal given the network's clean-state prediction.
pub fn denoising_distribution(
    pred: &CategoricalDistribution,
    x_t: usize,
    t: usize,
    schedule: &NoiseSchedule,
    m: &[f64],
) -> Result<CategoricalDistribution, DiffusionError> {
    schedule.check_step(t)?;
    if t == 1 {
        return Ok(pred.clone());
    }
    let table = PosteriorTable::new(schedule, m, t)?;
    Ok(CategoricalDistribution(table.mix(pred.probs(), x_t)))
}

/// Corrupts `g0` to step `t` in one shot with the cumulative transitions.
pub fn forward_sample<R: Rng + ?Sized>(
    g0: &CategoricalGraph,
    t: usize,
    schedule: &NoiseSchedule,
    marginals: &DatasetMarginals,
    rng: &mut R,
) -> Result<CategoricalGraph, DiffusionError> {
    let qx = cumulative_transition(schedule, &marginals.node, t)?;
    let qe = cumulative_transition(schedule, &marginals.edge, t)?;
    let n = g0.n();
    let nodes: Vec<usize> = (0..n)
        .map(|i| sample_index(qx.row(g0.node_type(i)), rng))
        .collect();
    let mut upper = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            upper.push(sample_index(qe.row(g0.edge_type(i, j)), rng));
        }
    }
    Ok(CategoricalGraph::from_upper(
        nodes,
        &upper,
        g0.num_atom_types(),
        g0.num_bond_types(),
    )
    .expect("sampled graph keeps invariants"))
}

/// What the denoiser is conditioned on for one evaluation.
#[derive(Debug, Clone, Copy)]
pub enum Conditioning<'a> {
    Guide(&'a Guide),
    Placeholder,
}

/// Anything that predicts clean node and edge types from a noisy graph.
pub trait Denoise {
    fn predict(&self, g_t: &CategoricalGraph, t: usize, cond: Conditioning<'_>) -> DenoiserOutput;
}

/// Samples a graph from per-node and per-pair distributions.
fn sample_graph<R: Rng + ?Sized>(
    g_t: &CategoricalGraph,
    node_dist: impl Fn(usize) -> Result<Vec<f64>, DiffusionError>,
    edge_dist: impl Fn(usize, usize) -> Result<Vec<f64>, DiffusionError>,
    rng: &mut R,
) -> Result<CategoricalGraph, DiffusionError> {
    let n = g_t.n();
    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        nodes.push(sample_index(&node_dist(i)?, rng));
    }
    let mut upper = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            upper.push(sample_index(&edge_dist(i, j)?, rng));
        }
    }
    Ok(CategoricalGraph::from_upper(
        nodes,
        &upper,
        g_t.num_atom_types(),
        g_t.num_bond_types(),
    )
    .expect("sampled graph keeps invariants"))
}

/// One guided reverse step `G^t → G^{t-1}`.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<D: Denoise + ?Sized, R: Rng + ?Sized>(
    g_t: &CategoricalGraph,
    t: usize,
    guide: &Guide,
    denoiser: &D,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    marginals: &DatasetMarginals,
    rng: &mut R,
) -> Result<CategoricalGraph, DiffusionError> {
    schedule.check_step(t)?;
    // s = 0 and s = 1 each need only one branch; the mixture would discard the other.
    let cond = (cfg.s != 0.0).then(|| denoiser.predict(g_t, t, Conditioning::Guide(guide)));
    let uncond = (cfg.s != 1.0).then(|| denoiser.predict(g_t, t, Conditioning::Placeholder));
    let pick = |c: Option<&[f64]>, u: Option<&[f64]>| -> Result<Vec<f64>, DiffusionError> {
        match (c, u) {
            (Some(c), Some(u)) => Ok(guided_mixture_slices(c, u, cfg)?.into_inner()),
            (Some(c), None) => Ok(c.to_vec()),
            (None, Some(u)) => Ok(u.to_vec()),
            (None, None) => unreachable!("at least one branch is evaluated"),
        }
    };
    let node_pred = |i: usize| pick(cond.as_ref().map(|o| o.node(i)), uncond.as_ref().map(|o| o.node(i)));
    let edge_pred =
        |i: usize, j: usize| pick(cond.as_ref().map(|o| o.edge(i, j)), uncond.as_ref().map(|o| o.edge(i, j)));
    denoise_from_predictions(g_t, t, schedule, marginals, node_pred, edge_pred, rng)
}

fn denoise_from_predictions<R: Rng + ?Sized>(
    g_t: &CategoricalGraph,
    t: usize,
    schedule: &NoiseSchedule,
    marginals: &DatasetMarginals,
    node_pred: impl Fn(usize) -> Result<Vec<f64>, DiffusionError>,
    edge_pred: impl Fn(usize, usize) -> Result<Vec<f64>, DiffusionError>,
    rng: &mut R,
) -> Result<CategoricalGraph, DiffusionError> {
    if t == 1 {
        return sample_graph(g_t, node_pred, edge_pred, rng);
    }
    let node_table = PosteriorTable::new(schedule, &marginals.node, t)?;
    let edge_table = PosteriorTable::new(schedule, &marginals.edge, t)?;
    sample_graph(
        g_t,
        |i| Ok(node_table.mix(&node_pred(i)?, g_t.node_type(i))),
        |i, j| Ok(edge_table.mix(&edge_pred(i, j)?, g_t.edge_type(i, j))),
        rng,
    )
}

/// One reverse step using only the placeholder branch.
pub fn reverse_step_unconditional<D: Denoise + ?Sized, R: Rng + ?Sized>(
    g_t: &CategoricalGraph,
    t: usize,
    denoiser: &D,
    schedule: &NoiseSchedule,
    marginals: &DatasetMarginals,
    rng: &mut R,
) -> Result<CategoricalGraph, DiffusionError> {
    schedule.check_step(t)?;
    let out = denoiser.predict(g_t, t, Conditioning::Placeholder);
    denoise_from_predictions(
        g_t,
        t,
        schedule,
        marginals,
        |i| Ok(out.node(i).to_vec()),
        |i, j| Ok(out.edge(i, j).to_vec()),
        rng,
    )
}

/// `G^T`: nodes and unordered pairs drawn i.i.d. from the marginals.
pub fn prior_sample<R: Rng + ?Sized>(
    n: usize,
    marginals: &DatasetMarginals,
    rng: &mut R,
) -> CategoricalGraph {
    let nodes: Vec<usize> = (0..n).map(|_| sample_index(&marginals.node, rng)).collect();
    let upper: Vec<usize> = (0..n * n.saturating_sub(1) / 2)
        .map(|_| sample_index(&marginals.edge, rng))
        .collect();
    CategoricalGraph::from_upper(nodes, &upper, marginals.node.len(), marginals.edge.len())
        .expect("prior graph keeps invariants")
}

/// Full guided trajectory from `G^T` to `G^0`; `observe` sees every
/// intermediate graph together with its step.
#[allow(clippy::too_many_arguments)]
pub fn sample_traced<D: Denoise + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    guide: Option<&Guide>,
    n: usize,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    marginals: &DatasetMarginals,
    rng: &mut R,
    mut observe: impl FnMut(usize, &CategoricalGraph),
) -> Result<CategoricalGraph, DiffusionError> {
    assert!(n >= 1, "graphs need at least one node");
    let mut g = prior_sample(n, marginals, rng);
    let horizon = schedule.steps();
    observe(horizon, &g);
    for t in (1..=horizon).rev() {
        g = match guide {
            Some(y) => reverse_step(&g, t, y, denoiser, cfg, schedule, marginals, rng)?,
            None => reverse_step_unconditional(&g, t, denoiser, schedule, marginals, rng)?,
        };
        observe(t - 1, &g);
    }
    Ok(g)
}

/// Guided sample of an `n`-node graph.
pub fn sample<D: Denoise + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    guide: &Guide,
    n: usize,
    cfg: &GuidanceConfig,
    schedule: &NoiseSchedule,
    marginals: &DatasetMarginals,
    rng: &mut R,
) -> Result<CategoricalGraph, DiffusionError> {
    sample_traced(denoiser, Some(guide), n, cfg, schedule, marginals, rng, |_, _| {})
}

/// Sample that only ever evaluates the placeholder branch.
pub fn sample_unconditional<D: Denoise + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    n: usize,
    schedule: &NoiseSchedule,
    marginals: &DatasetMarginals,
    rng: &mut R,
) -> Result<CategoricalGraph, DiffusionError> {
    let cfg = GuidanceConfig::new(0.0, GuidanceMode::Linear)?;
    sample_traced(denoiser, None, n, &cfg, schedule, marginals, rng, |_, _| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::cosine_schedule;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dist(rng: &mut impl Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    }

    /// Bayes over the explicit two-step chain: `q(z | x0)` from multiplying
    /// per-step matrices, `q(x_t | z)` from the step matrix.
    fn brute_posterior(x_t: usize, x0: usize, t: usize, s: &NoiseSchedule, m: &[f64]) -> Vec<f64> {
        let k = m.len();
        let mut reach = vec![0.0; k];
        reach[x0] = 1.0;
        for tau in 1..t {
            let q = step_transition(s, m, tau).unwrap();
            reach = q.left_apply(&reach);
        }
        let q_t = step_transition(s, m, t).unwrap();
        let joint: Vec<f64> = (0..k).map(|z| reach[z] * q_t.get(z, x_t)).collect();
        let total: f64 = joint.iter().sum();
        joint.into_iter().map(|p| p / total).collect()
    }

    fn random_schedule(rng: &mut impl Rng, steps: usize) -> NoiseSchedule {
        NoiseSchedule::from_alphas((0..steps).map(|_| rng.gen_range(0.05..=1.0)).collect()).unwrap()
    }

    #[test]
    fn posterior_identity_step_is_point_mass() {
        let s = NoiseSchedule::from_alphas(vec![0.5, 1.0, 0.7]).unwrap();
        let m = [0.2, 0.3, 0.5];
        for x_t in 0..3 {
            for x0 in 0..3 {
                let p = posterior_distribution(x_t, x0, 2, &s, &m).unwrap();
                assert_eq!(p, CategoricalDistribution::point_mass(3, x_t));
            }
        }
    }

    #[test]
    fn posterior_matches_brute_force_k3() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_dist(&mut rng, 3);
        let s = cosine_schedule(20).unwrap();
        for x_t in 0..3 {
            for x0 in 0..3 {
                let p = posterior_distribution(x_t, x0, 5, &s, &m).unwrap();
                let b = brute_posterior(x_t, x0, 5, &s, &m);
                for (a, b) in p.probs().iter().zip(&b) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn posterior_limit_forgets_clean_state() {
        // ᾱ^{t-1} ≈ 0, α^t ≈ 1: prior over z is m, likelihood is Q^t[z, x_t] ≈ δ(z, x_t)
        // plus the small jump mass (1-α) m[x_t]
        let m = [0.2, 0.3, 0.5];
        let s = NoiseSchedule::from_alphas(vec![1e-9, 1.0 - 1e-6]).unwrap();
        let x_t = 1;
        let p = posterior_distribution(x_t, 0, 2, &s, &m).unwrap();
        let beta = s.beta(2);
        let expected: Vec<f64> = (0..3)
            .map(|z| m[z] * (beta * m[x_t] + if z == x_t { s.alpha(2) } else { 0.0 }))
            .collect();
        let tot: f64 = expected.iter().sum();
        for (a, e) in p.probs().iter().zip(&expected) {
            assert!((a - e / tot).abs() < 1e-9);
        }
        assert!((p.probs()[x_t] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn posterior_rejects_step_one() {
        let s = cosine_schedule(5).unwrap();
        assert!(matches!(
            posterior_distribution(0, 0, 1, &s, &[0.5, 0.5]),
            Err(DiffusionError::Schedule(ScheduleError::StepOutOfRange { .. }))
        ));
        assert!(posterior_distribution(0, 0, 6, &s, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn posterior_unreachable_state() {
        let s = cosine_schedule(5).unwrap();
        let m = [1.0, 0.0];
        assert_eq!(
            posterior_distribution(1, 0, 3, &s, &m),
            Err(DiffusionError::Unreachable { x_t: 1, x0: 0, t: 3 })
        );
    }

    #[test]
    fn denoising_point_mass_equals_posterior() {
        let s = cosine_schedule(10).unwrap();
        let m = [0.1, 0.6, 0.3];
        let pred = CategoricalDistribution::point_mass(3, 2);
        let d = denoising_distribution(&pred, 1, 4, &s, &m).unwrap();
        assert_eq!(d, posterior_distribution(1, 2, 4, &s, &m).unwrap());
    }

    #[test]
    fn denoising_uniform_is_average_of_posteriors() {
        let s = cosine_schedule(10).unwrap();
        let m = [0.1, 0.6, 0.3];
        let pred = CategoricalDistribution::new(vec![1.0 / 3.0; 3]).unwrap();
        let d = denoising_distribution(&pred, 0, 7, &s, &m).unwrap();
        let mut direct = [0.0; 3];
        for x0 in 0..3 {
            let b = brute_posterior(0, x0, 7, &s, &m);
            for z in 0..3 {
                direct[z] += b[z] / 3.0;
            }
        }
        for (a, b) in d.probs().iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn denoising_at_step_one_returns_prediction() {
        let s = cosine_schedule(10).unwrap();
        let pred = CategoricalDistribution::new(vec![0.2, 0.8]).unwrap();
        assert_eq!(denoising_distribution(&pred, 0, 1, &s, &[0.5, 0.5]).unwrap(), pred);
    }

    #[test]
    fn mixture_examples() {
        let c = CategoricalDistribution::new(vec![0.7, 0.3]).unwrap();
        let u = CategoricalDistribution::new(vec![0.5, 0.5]).unwrap();
        for mode in [GuidanceMode::Linear, GuidanceMode::Log] {
            let one = GuidanceConfig::new(1.0, mode).unwrap();
            let zero = GuidanceConfig::new(0.0, mode).unwrap();
            assert_eq!(guided_mixture(&c, &u, &one).unwrap(), c);
            assert_eq!(guided_mixture(&c, &u, &zero).unwrap(), u);
        }
        let cfg = GuidanceConfig::new(3.0, GuidanceMode::Linear).unwrap();
        let v = guided_mixture(&c, &u, &cfg).unwrap();
        assert!((v.probs()[0] - 1.0).abs() < 1e-11);
        assert!(v.probs()[1] < 1e-11 && v.probs()[1] > 0.0);
    }

    #[test]
    fn linear_mixture_zero_mass() {
        let c = CategoricalDistribution::new(vec![0.0, 1.0]).unwrap();
        let u = CategoricalDistribution::new(vec![1.0, 0.0]).unwrap();
        // s = 0.5 lands on [0.5, 0.5]; with a one-category vocabulary shift everything negative
        let cfg = GuidanceConfig::new(0.5, GuidanceMode::Linear).unwrap();
        assert!(guided_mixture(&c, &u, &cfg).is_ok());
        let c1 = CategoricalDistribution::new(vec![1.0]).unwrap();
        let u1 = CategoricalDistribution::new(vec![1.0]).unwrap();
        assert!(guided_mixture(&c1, &u1, &GuidanceConfig::new(4.0, GuidanceMode::Linear).unwrap()).is_ok());
        let bad = guided_mixture_slices(&[0.0, 0.0], &[0.5, 0.5], &GuidanceConfig::new(2.0, GuidanceMode::Linear).unwrap());
        assert_eq!(bad, Err(DiffusionError::ZeroMass));
    }

    #[test]
    fn negative_guidance_rejected() {
        assert!(GuidanceConfig::new(-1.0, GuidanceMode::Linear).is_err());
        assert!(GuidanceConfig::new(f64::NAN, GuidanceMode::Log).is_err());
    }

    #[test]
    fn linear_argmax_can_flip_for_large_s() {
        // shared argmax is not preserved in general once s > 1
        let c = CategoricalDistribution::new(vec![0.55, 0.45]).unwrap();
        let u = CategoricalDistribution::new(vec![0.9, 0.1]).unwrap();
        let v = guided_mixture(&c, &u, &GuidanceConfig::new(3.0, GuidanceMode::Linear).unwrap()).unwrap();
        assert_eq!(c.argmax(), u.argmax());
        assert_eq!(v.argmax(), 1);
    }

    proptest! {
        #[test]
        fn posterior_matches_brute_force(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(1..=6);
            let steps = rng.gen_range(2..=20);
            let t = rng.gen_range(2..=steps);
            let s = random_schedule(&mut rng, steps);
            let m = random_dist(&mut rng, k);
            let (x_t, x0) = (rng.gen_range(0..k), rng.gen_range(0..k));
            let p = posterior_distribution(x_t, x0, t, &s, &m).unwrap();
            let b = brute_posterior(x_t, x0, t, &s, &m);
            for (a, b) in p.probs().iter().zip(&b) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn mixtures_are_distributions(seed in any::<u64>(), s in 0.0f64..6.0, log in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(1..=6);
            let c = CategoricalDistribution::new(random_dist(&mut rng, k)).unwrap();
            let u = CategoricalDistribution::new(random_dist(&mut rng, k)).unwrap();
            let mode = if log { GuidanceMode::Log } else { GuidanceMode::Linear };
            let v = guided_mixture(&c, &u, &GuidanceConfig::new(s, mode).unwrap()).unwrap();
            prop_assert!(CategoricalDistribution::new(v.into_inner()).is_ok());
        }

        #[test]
        fn log_mixture_fixed_point(seed in any::<u64>(), s in 0.0f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(1..=6);
            let p = CategoricalDistribution::new(random_dist(&mut rng, k)).unwrap();
            let v = guided_mixture(&p, &p, &GuidanceConfig::new(s, GuidanceMode::Log).unwrap()).unwrap();
            for (a, b) in v.probs().iter().zip(p.probs()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn linear_argmax_kept_when_conditional_margin_dominates(seed in any::<u64>(), s in 1.0f64..8.0) {
            // for s ≥ 1 a shared argmax survives whenever every competitor trails
            // the leader by at least as much under p_cond as under p_uncond
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.gen_range(2..=6);
            let u = random_dist(&mut rng, k);
            let top = argmax(&u);
            let mut c: Vec<f64> = u.iter().enumerate()
                .map(|(i, &x)| if i == top { x } else { x * rng.gen_range(0.0..1.0) })
                .collect();
            let rest: f64 = c.iter().enumerate().filter(|(i, _)| *i != top).map(|(_, x)| x).sum();
            c[top] = 1.0 - rest;
            let cd = CategoricalDistribution::new(c).unwrap();
            let ud = CategoricalDistribution::new(u).unwrap();
            let v = guided_mixture(&cd, &ud, &GuidanceConfig::new(s, GuidanceMode::Linear).unwrap()).unwrap();
            prop_assert_eq!(v.argmax(), top);
        }
    }

    fn toy_marginals() -> DatasetMarginals {
        DatasetMarginals {
            node: vec![0.5, 0.5],
            edge: vec![0.6, 0.4],
            size: vec![0.0, 0.0, 1.0],
        }
    }

    #[test]
    fn forward_identity_transition_keeps_graph() {
        let s = NoiseSchedule::from_alphas(vec![1.0, 1.0]).unwrap();
        let g = CategoricalGraph::from_upper(vec![0, 1, 1], &[1, 0, 1], 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in 1..=2 {
            assert_eq!(forward_sample(&g, t, &s, &toy_marginals(), &mut rng).unwrap(), g);
        }
        assert!(forward_sample(&g, 3, &s, &toy_marginals(), &mut rng).is_err());
    }

    #[test]
    fn forward_output_is_symmetric() {
        let s = cosine_schedule(10).unwrap();
        let g = CategoricalGraph::from_upper(vec![0, 1, 1, 0], &[1, 0, 1, 0, 0, 1], 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in 1..=10 {
            let h = forward_sample(&g, t, &s, &toy_marginals(), &mut rng).unwrap();
            for i in 0..4 {
                assert_eq!(h.edge_type(i, i), 0);
                for j in 0..4 {
                    assert_eq!(h.edge_type(i, j), h.edge_type(j, i));
                }
            }
        }
    }

    /// Emits fixed point masses regardless of input.
    struct PointMass {
        node: usize,
        edge: usize,
    }

    impl Denoise for PointMass {
        fn predict(&self, g: &CategoricalGraph, _t: usize, _c: Conditioning<'_>) -> DenoiserOutput {
            let (n, a, b) = (g.n(), g.num_atom_types(), g.num_bond_types());
            let mut out = DenoiserOutput::uniform(n, a, b);
            out.node_probs.iter_mut().enumerate().for_each(|(k, p)| *p = f64::from(u8::from(k % a == self.node)));
            out.edge_probs.iter_mut().enumerate().for_each(|(k, p)| *p = f64::from(u8::from(k % b == self.edge)));
            out
        }
    }

    #[test]
    fn point_mass_chain_by_hand() {
        // α = 1 at steps 2..4 keeps the prior draw; step 1 jumps to the prediction
        let s = NoiseSchedule::from_alphas(vec![0.5, 1.0, 1.0, 1.0]).unwrap();
        let den = PointMass { node: 1, edge: 1 };
        let cfg = GuidanceConfig::new(2.0, GuidanceMode::Linear).unwrap();
        let y = Guide::new(vec![0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut trace = Vec::new();
        let g0 = sample_traced(&den, Some(&y), 3, &cfg, &s, &toy_marginals(), &mut rng, |t, g| {
            trace.push((t, g.clone()))
        })
        .unwrap();
        assert_eq!(trace.len(), 5);
        assert_eq!(trace[0].1, trace[1].1);
        assert_eq!(trace[1].1, trace[2].1);
        assert_eq!(trace[2].1, trace[3].1);
        assert_eq!(g0.node_types(), &[1, 1, 1]);
        assert_eq!(g0.bonds().len(), 3);
    }

    #[test]
    fn single_node_graph_samples() {
        let s = cosine_schedule(5).unwrap();
        let den = PointMass { node: 0, edge: 0 };
        let cfg = GuidanceConfig::new(1.5, GuidanceMode::Log).unwrap();
        let y = Guide::new(vec![0.3]).unwrap();
        let g = sample(&den, &y, 1, &cfg, &s, &toy_marginals(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(g.n(), 1);
        assert_eq!(g.node_types(), &[0]);
    }

    /// Returns different predictions with and without a guide.
    struct Split;

    impl Denoise for Split {
        fn predict(&self, g: &CategoricalGraph, t: usize, c: Conditioning<'_>) -> DenoiserOutput {
            let (n, a, b) = (g.n(), g.num_atom_types(), g.num_bond_types());
            let mut out = DenoiserOutput::uniform(n, a, b);
            let bias = match c {
                Conditioning::Guide(y) => 0.3 + 0.1 * y.values()[0].tanh(),
                Conditioning::Placeholder => -0.2,
            } * (t as f64).sin();
            for i in 0..n {
                let w = [0.5 + bias * 0.5, 0.5 - bias * 0.5];
                out.node_probs[i * a..i * a + 2].copy_from_slice(&w);
            }
            out
        }
    }

    #[test]
    fn zero_guidance_equals_unconditional_sampling() {
        let s = cosine_schedule(12).unwrap();
        let cfg = GuidanceConfig::new(0.0, GuidanceMode::Linear).unwrap();
        let y = Guide::new(vec![1.0]).unwrap();
        for seed in 0..20 {
            let a = sample(&Split, &y, 4, &cfg, &s, &toy_marginals(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = sample_unconditional(&Split, 4, &s, &toy_marginals(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_keeps_invariants() {
        let s = cosine_schedule(12).unwrap();
        let cfg = GuidanceConfig::new(2.5, GuidanceMode::Linear).unwrap();
        let y = Guide::new(vec![-0.4]).unwrap();
        let run = |seed| {
            let mut checked = 0;
            let g = sample_traced(&Split, Some(&y), 5, &cfg, &s, &toy_marginals(), &mut ChaCha8Rng::seed_from_u64(seed), |_, g| {
                for i in 0..g.n() {
                    assert_eq!(g.edge_type(i, i), 0);
                    for j in 0..g.n() {
                        assert_eq!(g.edge_type(i, j), g.edge_type(j, i));
                    }
                }
                checked += 1;
            })
            .unwrap();
            assert_eq!(checked, 13);
            g
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn uniform_denoiser_matches_iterated_chain() {
        // single node: the reverse chain's law is the marginal pushed through
        // the per-step kernels built from the brute-force posterior
        let s = cosine_schedule(8).unwrap();
        let m = DatasetMarginals {
            node: vec![0.2, 0.5, 0.3],
            edge: vec![1.0, 0.0],
            size: vec![1.0],
        };
        let k = 3;
        let mut law = m.node.clone();
        for t in (2..=8).rev() {
            let mut next = vec![0.0; k];
            for x_t in 0..k {
                for x0 in 0..k {
                    let b = brute_posterior(x_t, x0, t, &s, &m.node);
                    for z in 0..k {
                        next[z] += law[x_t] * b[z] / k as f64;
                    }
                }
            }
            law = next;
        }
        let mut at_one = vec![0usize; k];
        let mut at_zero = vec![0usize; k];
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let cfg = GuidanceConfig::new(0.0, GuidanceMode::Linear).unwrap();
        for _ in 0..5000 {
            let g = sample_traced(&UniformDen, None, 1, &cfg, &s, &m, &mut rng, |t, g| {
                if t == 1 {
                    at_one[g.node_type(0)] += 1;
                }
            })
            .unwrap();
            at_zero[g.node_type(0)] += 1;
        }
        let tv = |counts: &[usize], want: &[f64]| {
            counts
                .iter()
                .zip(want)
                .map(|(&c, e)| (c as f64 / 5000.0 - e).abs())
                .sum::<f64>()
                / 2.0
        };
        assert!(tv(&at_one, &law) < 0.05, "G^1 tv {}", tv(&at_one, &law));
        // the last step returns the (uniform) clean-state prediction itself
        assert!(tv(&at_zero, &[1.0 / 3.0; 3]) < 0.05);
    }

    struct UniformDen;

    impl Denoise for UniformDen {
        fn predict(&self, g: &CategoricalGraph, _t: usize, _c: Conditioning<'_>) -> DenoiserOutput {
            DenoiserOutput::uniform(g.n(), g.num_atom_types(), g.num_bond_types())
        }
    }
}
