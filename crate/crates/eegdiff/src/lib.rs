//! Actor-critic guided diffusion for multichannel EEG motor-imagery synthesis.
//!
//! The crate is organized around the stages of the generation system:
//!
//! - [`signal`] — the epoch data model, CSV/JSON ingestion, preprocessing
//!   (Butterworth bandpass, common-average re-referencing, z-scoring) and a
//!   deterministic synthetic motor-imagery generator.
//! - [`dsp`] — the reward feature stack: temporal statistics, entropies,
//!   Hjorth parameters, histogram JS divergence, Welch PSD, band-power
//!   proportions and Morlet scalograms.
//! - [`diffusion`] — noise schedules, the closed-form forward process, the
//!   reverse sampler and the differentiable clean-signal estimate.
//! - [`tensor`] / [`autodiff`] — a small dense f64 tensor and a tape-based
//!   reverse-mode differentiation engine used by every network.
//! - [`nets`] — parameter storage, checkpoints, the EEG U-Net noise
//!   predictor, the wavelet and classification feature networks, and the
//!   actor/critic MLPs.
//! - [`agent`] — the weight-guided actor-critic: action selection, replay
//!   buffer, TD targets, critic/actor updates, soft target updates and the
//!   time/frequency reward.
//! - [`trainer`] — the end-to-end training loop with manifests, checkpoints
//!   and deterministic resume.
//! - [`eval`] — FID over compressed features, energy maps, spectral and
//!   time-frequency reports, classifier metrics and the augmentation
//!   experiment.
//! - [`cli`] — the `eegdiff` command-line entry point.
//!
//! Most capabilities have a runnable demo under `examples/`.

pub mod agent;
pub mod autodiff;
pub mod cli;
pub mod diffusion;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod nets;
pub mod signal;
pub mod tensor;
pub mod trainer;

pub use error::Error;
