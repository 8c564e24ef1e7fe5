//! Noise schedules and marginal-preserving transition matrices.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("number of diffusion steps must be at least 1, got {0}")]
    InvalidT(usize),
    #[error("alpha values must lie in (0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("marginal is not a distribution")]
    BadMarginal,
    #[error("step {step} outside 1..={horizon}")]
    StepOutOfRange { step: usize, horizon: usize },
}

pub const COSINE_OFFSET: f64 = 0.008;
pub const ALPHA_BAR_FLOOR: f64 = 1e-5;

/// Per-step keep probabilities and their running products.
///
/// Steps are 1-based in the accessors; `alpha_bar(0)` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Schedule from explicit per-step keep probabilities.
    pub fn from_alphas(alpha: Vec<f64>) -> Result<Self, ScheduleError> {
        if alpha.is_empty() {
            return Err(ScheduleError::InvalidT(0));
        }
        if let Some(&bad) = alpha.iter().find(|&&a| !(a > 0.0 && a <= 1.0)) {
            return Err(ScheduleError::InvalidAlpha(bad));
        }
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn beta(&self, t: usize) -> f64 {
        1.0 - self.alpha(t)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta_bar(&self, t: usize) -> f64 {
        1.0 - self.alpha_bar(t)
    }

    pub fn check_step(&self, t: usize) -> Result<(), ScheduleError> {
        if t == 0 || t > self.steps() {
            Err(ScheduleError::StepOutOfRange {
                step: t,
                horizon: self.steps(),
            })
        } else {
            Ok(())
        }
    }
}

/// Cosine schedule with the default offset.
pub fn cosine_schedule(steps: usize) -> Result<NoiseSchedule, ScheduleError> {
    cosine_schedule_with_offset(steps, COSINE_OFFSET)
}

/// `ᾱ(t) = f(t)/f(0)` with `f(t) = cos²(π/2 · (t/T + s)/(1 + s))`, clipped to
/// `[1e-5, 1]`. Per-step alphas are ratios of consecutive values and the
/// stored cumulative products are recomputed from them, so
/// `alpha_bar(t) == alpha_bar(t-1) * alpha(t)` holds exactly.
pub fn cosine_schedule_with_offset(steps: usize, offset: f64) -> Result<NoiseSchedule, ScheduleError> {
    if steps < 1 {
        return Err(ScheduleError::InvalidT(steps));
    }
    let f = |t: usize| {
        let x = (t as f64 / steps as f64 + offset) / (1.0 + offset);
        (std::f64::consts::FRAC_PI_2 * x).cos().powi(2)
    };
    let f0 = f(0);
    let bars: Vec<f64> = (0..=steps)
        .map(|t| (f(t) / f0).clamp(ALPHA_BAR_FLOOR, 1.0))
        .collect();
    let alpha = bars.windows(2).map(|w| (w[1] / w[0]).min(1.0)).collect();
    NoiseSchedule::from_alphas(alpha)
}

/// Row-stochastic `k × k` matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    k: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(k: usize) -> Self {
        let mut data = vec![0.0; k * k];
        for i in 0..k {
            data[i * k + i] = 1.0;
        }
        Self { k, data }
    }

    pub fn dim(&self) -> usize {
        self.k
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.data[from * self.k + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.data[from * self.k..(from + 1) * self.k]
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let k = self.k;
        assert_eq!(k, other.k);
        let mut data = vec![0.0; k * k];
        for i in 0..k {
            for l in 0..k {
                let a = self.data[i * k + l];
                for j in 0..k {
                    data[i * k + j] += a * other.data[l * k + j];
                }
            }
        }
        Self { k, data }
    }

    /// `pᵀQ` for a row vector `p`.
    pub fn left_apply(&self, p: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for (i, &pi) in p.iter().enumerate() {
            for (o, q) in out.iter_mut().zip(self.row(i)) {
                *o += pi * q;
            }
        }
        out
    }
}

pub fn check_marginal(m: &[f64]) -> Result<(), ScheduleError> {
    let sum: f64 = m.iter().sum();
    if m.is_empty() || m.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(ScheduleError::BadMarginal);
    }
    Ok(())
}

/// `Q = αI + (1-α)·1·mᵀ`: keep the category with probability α, otherwise
/// jump to a draw from the marginal.
pub fn transition_matrix(alpha: f64, m: &[f64]) -> Result<TransitionMatrix, ScheduleError> {
    check_marginal(m)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ScheduleError::InvalidAlpha(alpha));
    }
    let k = m.len();
    let beta = 1.0 - alpha;
    let mut data = vec![0.0; k * k];
    for i in 0..k {
        for j in 0..k {
            data[i * k + j] = beta * m[j] + if i == j { alpha } else { 0.0 };
        }
    }
    Ok(TransitionMatrix { k, data })
}

pub fn step_transition(
    schedule: &NoiseSchedule,
    m: &[f64],
    t: usize,
) -> Result<TransitionMatrix, ScheduleError> {
    schedule.check_step(t)?;
    transition_matrix(schedule.alpha(t), m)
}

/// Closed form of `Q^1 Q^2 ⋯ Q^t`.
pub fn cumulative_transition(
    schedule: &NoiseSchedule,
    m: &[f64],
    t: usize,
) -> Result<TransitionMatrix, ScheduleError> {
    schedule.check_step(t)?;
    transition_matrix(schedule.alpha_bar(t), m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_marginal(rng: &mut impl Rng, k: usize) -> Vec<f64> {
        let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 1e-3).collect();
        let s: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / s).collect()
    }

    #[test]
    fn single_step_horizon() {
        let s = cosine_schedule(1).unwrap();
        assert_eq!(s.steps(), 1);
        assert!(s.alpha_bar(1) < 0.05);
    }

    #[test]
    fn invalid_t() {
        assert_eq!(cosine_schedule(0), Err(ScheduleError::InvalidT(0)));
    }

    #[test]
    fn telescoping_is_exact() {
        for t_max in [1, 2, 7, 50, 500] {
            let s = cosine_schedule(t_max).unwrap();
            for t in 1..=t_max {
                assert_eq!(s.alpha_bar(t), s.alpha_bar(t - 1) * s.alpha(t));
                assert!(s.alpha(t) > 0.0 && s.alpha(t) <= 1.0);
                assert_eq!(s.beta(t), 1.0 - s.alpha(t));
                assert_eq!(s.beta_bar(t), 1.0 - s.alpha_bar(t));
            }
        }
    }

    #[test]
    fn cosine_500_is_monotone_to_near_zero() {
        let s = cosine_schedule(500).unwrap();
        assert!(s.alpha_bar(1) > 0.99);
        for t in 1..=500 {
            assert!(s.alpha_bar(t) <= s.alpha_bar(t - 1));
        }
        assert!(s.alpha_bar(500) < 0.01);
        // direct evaluation of the unclipped formula at the midpoint
        let off = COSINE_OFFSET;
        let f = |x: f64| (std::f64::consts::FRAC_PI_2 * (x + off) / (1.0 + off)).cos().powi(2);
        let expected = f(0.5) / f(0.0);
        assert!((s.alpha_bar(250) - expected).abs() < 1e-12);
    }

    #[test]
    fn transition_examples() {
        let q = transition_matrix(1.0, &[0.3, 0.7]).unwrap();
        assert_eq!(q, TransitionMatrix::identity(2));
        let q = transition_matrix(0.0, &[0.5, 0.5]).unwrap();
        assert_eq!(q.row(0), &[0.5, 0.5]);
        assert_eq!(q.row(1), &[0.5, 0.5]);
        let q = transition_matrix(0.6, &[0.5, 0.5]).unwrap();
        for (got, want) in q.data.iter().zip([0.8, 0.2, 0.2, 0.8]) {
            assert!((got - want).abs() < 1e-15);
        }
        assert_eq!(transition_matrix(0.5, &[0.6, 0.6]), Err(ScheduleError::BadMarginal));
        assert_eq!(transition_matrix(0.5, &[1.2, -0.2]), Err(ScheduleError::BadMarginal));
    }

    #[test]
    fn cumulative_matches_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_marginal(&mut rng, 4);
        let s = cosine_schedule(10).unwrap();
        assert_eq!(
            cumulative_transition(&s, &m, 1).unwrap(),
            transition_matrix(s.alpha(1), &m).unwrap()
        );
        let mut prod = TransitionMatrix::identity(4);
        for t in 1..=10 {
            prod = prod.matmul(&step_transition(&s, &m, t).unwrap());
        }
        let closed = cumulative_transition(&s, &m, 10).unwrap();
        for (a, b) in prod.data.iter().zip(&closed.data) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn horizon_rows_near_marginal() {
        let m = [0.1, 0.2, 0.3, 0.4];
        let s = cosine_schedule(50).unwrap();
        let q = cumulative_transition(&s, &m, 50).unwrap();
        for i in 0..4 {
            let tv: f64 = q.row(i).iter().zip(&m).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            assert!(tv < 0.05);
        }
    }

    #[test]
    fn step_range_checked() {
        let s = cosine_schedule(5).unwrap();
        assert!(cumulative_transition(&s, &[1.0], 0).is_err());
        assert_eq!(
            cumulative_transition(&s, &[1.0], 6),
            Err(ScheduleError::StepOutOfRange { step: 6, horizon: 5 })
        );
    }

    #[test]
    fn marginal_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let k = rng.gen_range(1..=8);
            let m = random_marginal(&mut rng, k);
            let alpha = rng.gen::<f64>();
            let q = transition_matrix(alpha, &m).unwrap();
            for (a, b) in q.left_apply(&m).iter().zip(&m) {
                assert!((a - b).abs() < 1e-12);
            }
            for i in 0..k {
                assert!((q.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(q.row(i).iter().all(|&x| x >= 0.0));
            }
        }
    }
}
