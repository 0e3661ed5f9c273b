//! Networks: the EEG U-Net noise predictor, the wavelet and classification
//! feature networks, the actor/critic MLPs, parameter storage and
//! finite-difference gradient verification.

mod feature;
mod mlp;
mod store;
mod unet;

pub use feature::{epochs_to_tensor, ClassNet, WaveletNet};
pub use mlp::Mlp;
pub use store::{ParameterStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use unet::{sinusoidal_embedding, EegUnet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Epsilon inside every normalization layer.
pub const NORM_EPS: f64 = 1e-5;

/// Momentum for running-average statistics during tracked training.
pub const NORM_MOMENTUM: f64 = 0.1;

/// Shared architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub channels: usize,
    pub samples: usize,
    pub base_width: usize,
    pub depth: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            samples: 256,
            base_width: 16,
            depth: 3,
            embed_dim: 32,
            num_classes: 2,
            feature_dim: 16,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.channels,
            self.samples,
            self.base_width,
            self.depth,
            self.embed_dim,
            self.num_classes,
            self.feature_dim,
        ];
        if fields.iter().any(|&v| v == 0) {
            return Err(Error::net("all NetConfig fields must be positive"));
        }
        if self.samples % (1 << self.depth) != 0 {
            return Err(Error::net(format!(
                "samples {} not divisible by 2^depth = {}",
                self.samples,
                1 << self.depth
            )));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::net("embed_dim must be even for sinusoidal encoding"));
        }
        Ok(())
    }
}

/// How a network binds its parameters on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Trainable: parameters receive gradients, normalization uses batch
    /// statistics.
    Train,
    /// Trainable and additionally records batch statistics for running
    /// averages (apply them via `ParameterStore::apply_norm_updates`).
    TrainTracking,
    /// Frozen: parameters enter as constants and normalization uses the
    /// stored running statistics.
    Frozen,
}

impl ForwardMode {
    pub fn trainable(self) -> bool {
        !matches!(self, ForwardMode::Frozen)
    }

    pub fn tracking(self) -> bool {
        matches!(self, ForwardMode::TrainTracking)
    }
}

/// Elementwise Swish activation `x * sigmoid(x)`.
pub fn swish(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

// ---------------------------------------------------------------------------
// Initialization helpers
// ---------------------------------------------------------------------------

pub(crate) fn uniform_init(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = (1.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

pub(crate) fn add_conv1d(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
) -> Result<()> {
    let fan_in = ci * k;
    store.add(
        &format!("{name}.w"),
        vec![co, ci, k],
        uniform_init(rng, co * ci * k, fan_in),
    )?;
    store.add(&format!("{name}.b"), vec![co], uniform_init(rng, co, fan_in))
}

pub(crate) fn add_conv_transpose1d(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    ci: usize,
    co: usize,
    k: usize,
) -> Result<()> {
    let fan_in = ci * k;
    store.add(
        &format!("{name}.w"),
        vec![ci, co, k],
        uniform_init(rng, ci * co * k, fan_in),
    )?;
    store.add(&format!("{name}.b"), vec![co], uniform_init(rng, co, fan_in))
}

pub(crate) fn add_conv2d(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    co: usize,
    ci: usize,
    kh: usize,
    kw: usize,
) -> Result<()> {
    let fan_in = ci * kh * kw;
    store.add(
        &format!("{name}.w"),
        vec![co, ci, kh, kw],
        uniform_init(rng, co * ci * kh * kw, fan_in),
    )?;
    store.add(&format!("{name}.b"), vec![co], uniform_init(rng, co, fan_in))
}

pub(crate) fn add_linear(
    store: &mut ParameterStore,
    rng: &mut ChaCha8Rng,
    name: &str,
    i: usize,
    o: usize,
) -> Result<()> {
    store.add(&format!("{name}.w"), vec![i, o], uniform_init(rng, i * o, i))?;
    store.add(&format!("{name}.b"), vec![o], uniform_init(rng, o, i))
}

/// Adds gamma/beta plus running mean/var entries for one norm layer.
pub(crate) fn add_norm(store: &mut ParameterStore, name: &str, channels: usize) -> Result<()> {
    store.add(&format!("{name}.gamma"), vec![channels], vec![1.0; channels])?;
    store.add(&format!("{name}.beta"), vec![channels], vec![0.0; channels])?;
    store.add(&format!("{name}.rm"), vec![channels], vec![0.0; channels])?;
    store.add(&format!("{name}.rv"), vec![channels], vec![1.0; channels])
}

/// Tape node for a parameter: bound (gradient-receiving) in trainable modes,
/// constant leaf when frozen.
pub(crate) fn bind(
    tape: &mut Tape,
    store: &ParameterStore,
    name: &str,
    mode: ForwardMode,
) -> Result<Var> {
    if mode.trainable() {
        tape.param(store, name)
    } else {
        let (shape, values) = store.get(name)?;
        Ok(tape.leaf(crate::tensor::Tensor::new(shape.to_vec(), values.to_vec())?))
    }
}

/// Normalization layer respecting the forward mode: batch statistics while
/// training (optionally tracked), folded running statistics when frozen.
pub(crate) fn norm_layer(
    tape: &mut Tape,
    store: &ParameterStore,
    name: &str,
    x: Var,
    mode: ForwardMode,
) -> Result<Var> {
    match mode {
        ForwardMode::Train | ForwardMode::TrainTracking => {
            let gamma = bind(tape, store, &format!("{name}.gamma"), mode)?;
            let beta = bind(tape, store, &format!("{name}.beta"), mode)?;
            let track_names = (format!("{name}.rm"), format!("{name}.rv"));
            let track = if mode.tracking() {
                Some((track_names.0.as_str(), track_names.1.as_str()))
            } else {
                None
            };
            tape.batch_norm(x, gamma, beta, NORM_EPS, track)
        }
        ForwardMode::Frozen => {
            let gamma = store.get(&format!("{name}.gamma"))?.1;
            let beta = store.get(&format!("{name}.beta"))?.1;
            let rm = store.get(&format!("{name}.rm"))?.1;
            let rv = store.get(&format!("{name}.rv"))?.1;
            let scale: Vec<f64> = gamma
                .iter()
                .zip(rv)
                .map(|(g, v)| g / (v + NORM_EPS).sqrt())
                .collect();
            let shift: Vec<f64> = beta
                .iter()
                .zip(rm.iter().zip(&scale))
                .map(|(b, (m, s))| b - m * s)
                .collect();
            tape.channel_affine(x, &scale, &shift)
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

/// Outcome of one finite-difference verification.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked_coords: usize,
    pub loss: f64,
}

/// Analytic gradients of a tape-built scalar loss, as (name, grads) pairs.
pub fn analytic_grads<F>(
    mut build: F,
    store: &mut ParameterStore,
) -> Result<(f64, Vec<(String, Vec<f64>)>)>
where
    F: FnMut(&mut Tape, &ParameterStore) -> Result<Var>,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let loss = build(&mut tape, store)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("loss in gradient check".into()));
    }
    tape.backward(loss, store)?;
    let grads = store
        .names()
        .map(|n| (n.to_string(), store.grad(n).unwrap().to_vec()))
        .collect();
    Ok((value, grads))
}

/// Central-difference comparison of `grads` against the loss landscape, over
/// a seeded ~5% coordinate subsample (at least one per entry). The step for
/// coordinate `k` is `step_scale * (1 + |theta_k|)`.
pub fn fd_compare<F>(
    mut build: F,
    store: &mut ParameterStore,
    grads: &[(String, Vec<f64>)],
    step_scale: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut eval = |store: &mut ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store)?;
        let v = tape.value(loss).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("loss in gradient check".into()));
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked_coords: 0,
        loss: 0.0,
    };
    for (name, analytic) in grads {
        let n = analytic.len();
        // coordinate 0 is always checked so every entry gets deterministic
        // coverage; the rest is a ~5% random subsample
        let mut coords: Vec<usize> = vec![0];
        coords.extend((1..n).filter(|_| rng.gen::<f64>() < 0.05));
        for i in coords {
            let orig = store.get(name)?.1[i];
            let h = step_scale * (1.0 + orig.abs());
            store.values_mut(name)?[i] = orig + h;
            let fp = eval(store)?;
            store.values_mut(name)?[i] = orig - h;
            let fm = eval(store)?;
            store.values_mut(name)?[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.checked_coords += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

/// Full finite-difference gradient verification of a tape-built loss.
pub fn grad_check<F>(
    mut build: F,
    store: &mut ParameterStore,
    step_scale: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let (value, grads) = analytic_grads(&mut build, store)?;
    let mut report = fd_compare(&mut build, store, &grads, step_scale, seed)?;
    report.loss = value;
    Ok(report)
}
