//! Noise schedules, the closed-form forward process, single reverse steps,
//! the full reverse sampler and the differentiable clean-signal estimate.
//!
//! Step indices are 1-based throughout: `t` ranges over `[1, T]`, and the
//! cumulative product `alpha_bar(0)` is defined as 1 (empty product), which
//! makes the final reverse step noiseless.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::signal::EegEpoch;

/// Per-step variances and their cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from explicit per-step variances.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::diffusion("schedule needs at least one step"));
        }
        if !betas.iter().all(|&b| b > 0.0 && b < 1.0) {
            return Err(Error::diffusion("betas must lie in (0, 1)"));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for &b in &betas {
            prod *= 1.0 - b;
            alpha_bars.push(prod);
        }
        Ok(Self { betas, alpha_bars })
    }

    pub fn len(&self) -> usize {
        self.betas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `beta_t` for `t` in `[1, T]`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative product of `(1 - beta_i)` up to `t`; `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.len() {
            return Err(Error::diffusion(format!(
                "step {t} outside [1, {}]",
                self.len()
            )));
        }
        Ok(())
    }

    /// Serializes the betas as a JSON array for reproducibility manifests.
    pub fn betas_json(&self) -> String {
        serde_json::to_string(&self.betas).expect("betas serialize")
    }
}

/// Linear beta schedule, inclusive of both endpoints.
pub fn make_linear_schedule(
    t_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<NoiseSchedule> {
    if t_steps < 1 {
        return Err(Error::diffusion("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::diffusion(format!(
            "invalid beta range [{beta_start}, {beta_end}]"
        )));
    }
    let betas = if t_steps == 1 {
        vec![beta_start]
    } else {
        (0..t_steps)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t_steps - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas)
}

/// Closed-form forward corruption:
/// `x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps`.
pub fn forward_diffuse(
    x0: &[f64],
    t: usize,
    eps: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if x0.len() != eps.len() {
        return Err(Error::diffusion("x0 and eps shapes disagree"));
    }
    let abar = schedule.alpha_bar(t);
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    Ok(x0.iter().zip(eps).map(|(&x, &e)| a * x + b * e).collect())
}

/// One reverse step:
/// `y_{t-1} = (y_t - beta_t/sqrt(1-abar_t) * eps_pred) / sqrt(1-beta_t)
///            + sqrt((1-abar_{t-1})/(1-abar_t) * beta_t) * z`.
///
/// Pass `z = 0` to obtain the posterior mean; at `t = 1` the noise
/// coefficient vanishes by the `alpha_bar(0) = 1` convention.
pub fn reverse_step(
    y_t: &[f64],
    t: usize,
    eps_pred: &[f64],
    z: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if y_t.len() != eps_pred.len() || y_t.len() != z.len() {
        return Err(Error::diffusion("reverse step shapes disagree"));
    }
    let beta = schedule.beta(t);
    let abar_t = schedule.alpha_bar(t);
    let abar_prev = schedule.alpha_bar(t - 1);
    let mean_scale = 1.0 / (1.0 - beta).sqrt();
    let eps_coef = beta / (1.0 - abar_t).sqrt();
    let noise_coef = ((1.0 - abar_prev) / (1.0 - abar_t) * beta).sqrt();
    Ok(y_t
        .iter()
        .zip(eps_pred)
        .zip(z)
        .map(|((&y, &e), &n)| mean_scale * (y - eps_coef * e) + noise_coef * n)
        .collect())
}

/// Algebraic inverse of the forward process:
/// `x0_hat = (x_t - sqrt(1-abar_t) * eps_pred) / sqrt(abar_t)`.
pub fn x0_estimate(
    x_t: &[f64],
    t: usize,
    eps_pred: &[f64],
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if x_t.len() != eps_pred.len() {
        return Err(Error::diffusion("x0 estimate shapes disagree"));
    }
    let abar = schedule.alpha_bar(t);
    let (a, b) = (abar.sqrt(), (1.0 - abar).sqrt());
    Ok(x_t
        .iter()
        .zip(eps_pred)
        .map(|(&x, &e)| (x - b * e) / a)
        .collect())
}

/// Draws `n` standard normal values from `rng`.
pub fn draw_normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Runs the full reverse chain for a batch of epochs.
///
/// The predictor receives the flat batch `[batch * channels * samples]`, the
/// current step and the per-item labels, and must return a same-shaped noise
/// estimate. All randomness comes from `rng`; the final step adds no noise.
pub fn sample_batch<F>(
    mut predictor: F,
    labels: &[usize],
    schedule: &NoiseSchedule,
    channels: usize,
    samples: usize,
    fs_hz: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EegEpoch>>
where
    F: FnMut(&[f64], usize, &[usize]) -> Result<Vec<f64>>,
{
    let batch = labels.len();
    if batch == 0 {
        return Err(Error::diffusion("cannot sample an empty batch"));
    }
    let n = batch * channels * samples;
    let mut y = draw_normal(rng, n);
    for t in (1..=schedule.len()).rev() {
        let eps_pred = predictor(&y, t, labels)?;
        if eps_pred.len() != n {
            return Err(Error::diffusion(format!(
                "predictor returned {} values for a batch of {n}",
                eps_pred.len()
            )));
        }
        let z = if t > 1 {
            draw_normal(rng, n)
        } else {
            vec![0.0; n]
        };
        y = reverse_step(&y, t, &eps_pred, &z, schedule)?;
    }

    let names = EegEpoch::default_channel_names(channels);
    labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let item = y[i * channels * samples..(i + 1) * channels * samples].to_vec();
            EegEpoch::new(item, channels, samples, fs_hz, label, names.clone())
        })
        .collect()
}

/// Single-epoch sampler, deterministic in `seed`.
pub fn sample<F>(
    mut predictor: F,
    label: usize,
    schedule: &NoiseSchedule,
    channels: usize,
    samples: usize,
    fs_hz: f64,
    seed: u64,
) -> Result<EegEpoch>
where
    F: FnMut(&[f64], usize, usize) -> Result<Vec<f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let epochs = sample_batch(
        |y, t, labels| predictor(y, t, labels[0]),
        &[label],
        schedule,
        channels,
        samples,
        fs_hz,
        &mut rng,
    )?;
    Ok(epochs.into_iter().next().expect("one epoch"))
}
