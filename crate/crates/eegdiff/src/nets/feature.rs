//! Feature networks: the wavelet network (fixed Morlet scalogram front-end
//! followed by a trainable 2-D convolution stack) and the classification
//! network (1-D convolution stack on raw epochs). Both expose a
//! `feature_dim` penultimate vector and class logits.

use std::f64::consts::PI;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::dsp::{log_spaced_freqs, MORLET_W0};
use crate::error::{Error, Result};
use crate::signal::EegEpoch;
use crate::tensor::Tensor;

use super::{
    add_conv1d, add_conv2d, add_linear, add_norm, bind, norm_layer, ForwardMode, NetConfig,
    ParameterStore,
};

/// Number of analysis frequencies in the scalogram front-end.
pub const FRONT_FREQS: usize = 16;
/// Time stride of the front-end correlation.
pub const FRONT_STRIDE: usize = 4;
/// Cap on the front-end kernel half-width in samples.
pub const FRONT_HALF_CAP: usize = 64;

/// Packs a homogeneous batch of epochs into a `[B, C, L]` tensor.
pub fn epochs_to_tensor(epochs: &[EegEpoch]) -> Result<Tensor> {
    let first = epochs
        .first()
        .ok_or_else(|| Error::net("empty epoch batch"))?;
    let (c, l) = (first.channels(), first.samples());
    let mut data = Vec::with_capacity(epochs.len() * c * l);
    for e in epochs {
        if e.channels() != c || e.samples() != l {
            return Err(Error::net("epoch batch must be homogeneous"));
        }
        data.extend_from_slice(e.data());
    }
    Tensor::new(vec![epochs.len(), c, l], data)
}

struct MorletKernel {
    re: Vec<f64>,
    im: Vec<f64>,
    half: usize,
}

fn morlet_kernels(fs_hz: f64, freqs: &[f64]) -> Vec<MorletKernel> {
    freqs
        .iter()
        .map(|&f| {
            let scale = MORLET_W0 * fs_hz / (2.0 * PI * f);
            let half = ((4.0 * scale).ceil() as usize).min(FRONT_HALF_CAP);
            let norm = PI.powf(-0.25) / scale.sqrt();
            let mut re = Vec::with_capacity(2 * half + 1);
            let mut im = Vec::with_capacity(2 * half + 1);
            for m in -(half as isize)..=(half as isize) {
                let t = m as f64 / scale;
                let env = norm * (-0.5 * t * t).exp();
                re.push(env * (MORLET_W0 * t).cos());
                im.push(env * (MORLET_W0 * t).sin());
            }
            MorletKernel { re, im, half }
        })
        .collect()
}

/// Wavelet network: fixed per-channel Morlet scalogram over 16 log-spaced
/// frequencies in 1-40 Hz, then a trainable 2-D convolution stack, global
/// average pooling to `feature_dim` and a linear class head.
pub struct WaveletNet {
    pub config: NetConfig,
    pub fs_hz: f64,
    freqs: Vec<f64>,
    kernels: Vec<MorletKernel>,
    front_len: usize,
}

impl WaveletNet {
    pub fn new(config: NetConfig, fs_hz: f64) -> Result<Self> {
        config.validate()?;
        if fs_hz <= 80.0 {
            return Err(Error::net("wavelet net needs fs > 80 Hz for the 40 Hz row"));
        }
        let freqs = log_spaced_freqs(1.0, 40.0, FRONT_FREQS);
        let kernels = morlet_kernels(fs_hz, &freqs);
        let front_len = (config.samples - 1) / FRONT_STRIDE + 1;
        Ok(Self {
            config,
            fs_hz,
            freqs,
            kernels,
            front_len,
        })
    }

    pub fn analysis_freqs(&self) -> &[f64] {
        &self.freqs
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Result<ParameterStore> {
        let c = &self.config;
        let mut store = ParameterStore::new();
        add_conv2d(&mut store, rng, "conv1", c.base_width, c.channels, 3, 3)?;
        add_norm(&mut store, "norm1", c.base_width)?;
        add_conv2d(&mut store, rng, "conv2", c.feature_dim, c.base_width, 3, 3)?;
        add_norm(&mut store, "norm2", c.feature_dim)?;
        add_linear(&mut store, rng, "head", c.feature_dim, c.num_classes)?;
        Ok(store)
    }

    /// Differentiable fixed front-end: `[B, C, L] -> [B, C, F, L']` scalogram
    /// magnitudes. Gradients flow through to the input signal.
    fn front_end(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let (batch, channels, len) = (shape[0], shape[1], shape[2]);
        let flat = tape.reshape(x, vec![batch * channels, 1, len])?;
        let zero_bias = tape.leaf(Tensor::new(vec![1], vec![0.0])?);
        let mut rows: Option<Var> = None;
        for kern in &self.kernels {
            let taps = kern.re.len();
            let wre = tape.leaf(Tensor::new(vec![1, 1, taps], kern.re.clone())?);
            let wim = tape.leaf(Tensor::new(vec![1, 1, taps], kern.im.clone())?);
            let re = tape.conv1d(flat, wre, zero_bias, FRONT_STRIDE, kern.half)?;
            let im = tape.conv1d(flat, wim, zero_bias, FRONT_STRIDE, kern.half)?;
            let mag = tape.magnitude(re, im)?;
            rows = Some(match rows {
                None => mag,
                Some(acc) => tape.concat_channels(acc, mag)?,
            });
        }
        let stacked = rows.expect("at least one frequency");
        tape.reshape(
            stacked,
            vec![batch, channels, FRONT_FREQS, self.front_len],
        )
    }

    /// Returns `(features [B, feature_dim], logits [B, num_classes])`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        mode: ForwardMode,
    ) -> Result<(Var, Var)> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.config.channels || shape[2] != self.config.samples
        {
            return Err(Error::net(format!(
                "wavelet net: input shape {shape:?} does not match config"
            )));
        }
        let sg = self.front_end(tape, x)?;
        let w1 = bind(tape, store, "conv1.w", mode)?;
        let b1 = bind(tape, store, "conv1.b", mode)?;
        let mut h = tape.conv2d(sg, w1, b1, (2, 2), (1, 1))?;
        h = norm_layer(tape, store, "norm1", h, mode)?;
        h = tape.swish(h);
        let w2 = bind(tape, store, "conv2.w", mode)?;
        let b2 = bind(tape, store, "conv2.b", mode)?;
        h = tape.conv2d(h, w2, b2, (2, 2), (1, 1))?;
        h = norm_layer(tape, store, "norm2", h, mode)?;
        h = tape.swish(h);
        let features = tape.global_avg_pool(h)?;
        let hw = bind(tape, store, "head.w", mode)?;
        let hb = bind(tape, store, "head.b", mode)?;
        let logits = tape.linear(features, hw, hb)?;
        Ok((features, logits))
    }
}

/// Classification network: 1-D convolution stack on raw epochs with
/// temporal pooling, a `feature_dim` penultimate layer and a linear head.
pub struct ClassNet {
    pub config: NetConfig,
}

impl ClassNet {
    pub fn new(config: NetConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn init_params(&self, rng: &mut ChaCha8Rng) -> Result<ParameterStore> {
        let c = &self.config;
        let mut store = ParameterStore::new();
        add_conv1d(&mut store, rng, "conv1", c.base_width, c.channels, 3)?;
        add_norm(&mut store, "norm1", c.base_width)?;
        add_conv1d(&mut store, rng, "conv2", 2 * c.base_width, c.base_width, 3)?;
        add_norm(&mut store, "norm2", 2 * c.base_width)?;
        add_conv1d(&mut store, rng, "conv3", c.feature_dim, 2 * c.base_width, 3)?;
        add_norm(&mut store, "norm3", c.feature_dim)?;
        add_linear(&mut store, rng, "head", c.feature_dim, c.num_classes)?;
        Ok(store)
    }

    /// Returns `(features [B, feature_dim], logits [B, num_classes])`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        mode: ForwardMode,
    ) -> Result<(Var, Var)> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 3 || shape[1] != self.config.channels || shape[2] != self.config.samples
        {
            return Err(Error::net(format!(
                "class net: input shape {shape:?} does not match config"
            )));
        }
        let mut h = x;
        for (i, name) in ["conv1", "conv2", "conv3"].iter().enumerate() {
            let w = bind(tape, store, &format!("{name}.w"), mode)?;
            let b = bind(tape, store, &format!("{name}.b"), mode)?;
            h = tape.conv1d(h, w, b, 2, 1)?;
            h = norm_layer(tape, store, &format!("norm{}", i + 1), h, mode)?;
            h = tape.swish(h);
        }
        let features = tape.global_avg_pool(h)?;
        let hw = bind(tape, store, "head.w", mode)?;
        let hb = bind(tape, store, "head.b", mode)?;
        let logits = tape.linear(features, hw, hb)?;
        Ok((features, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_config() -> NetConfig {
        NetConfig {
            channels: 2,
            samples: 32,
            base_width: 4,
            depth: 2,
            embed_dim: 8,
            num_classes: 2,
            feature_dim: 8,
        }
    }

    #[test]
    fn wavelet_zero_signal_zero_front_end() {
        let net = WaveletNet::new(toy_config(), 250.0).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 2, 32]));
        let sg = net.front_end(&mut tape, x).unwrap();
        assert!(tape.value(sg).data().iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(sg).shape(), &[1, 2, FRONT_FREQS, 8]);
    }

    #[test]
    fn wavelet_feature_dim_contract() {
        let net = WaveletNet::new(toy_config(), 250.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let store = net.init_params(&mut rng).unwrap();
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..3 * 2 * 32).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.leaf(Tensor::new(vec![3, 2, 32], data).unwrap());
        let (features, logits) = net
            .forward(&mut tape, &store, x, ForwardMode::Train)
            .unwrap();
        assert_eq!(tape.value(features).shape(), &[3, 8]);
        assert_eq!(tape.value(logits).shape(), &[3, 2]);
    }

    #[test]
    fn wavelet_front_end_tracks_tone_frequency() {
        // a strong 10 Hz tone should light the rows nearest 10 Hz
        let cfg = NetConfig {
            channels: 2,
            samples: 256,
            base_width: 4,
            depth: 2,
            embed_dim: 8,
            num_classes: 2,
            feature_dim: 8,
        };
        let net = WaveletNet::new(cfg, 250.0).unwrap();
        let data: Vec<f64> = (0..2 * 256)
            .map(|i| (2.0 * PI * 10.0 * (i % 256) as f64 / 250.0).sin())
            .collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 256], data).unwrap());
        let sg = net.front_end(&mut tape, x).unwrap();
        let v = tape.value(sg);
        let l = 64usize;
        // mean magnitude per frequency row of channel 0, central half
        let mut row_means = Vec::new();
        for f in 0..FRONT_FREQS {
            let base = f * l;
            let row = &v.data()[base..base + l];
            row_means.push(row[l / 4..3 * l / 4].iter().sum::<f64>() / (l / 2) as f64);
        }
        let peak = row_means
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let freq = net.analysis_freqs()[peak];
        assert!(
            (7.0..14.0).contains(&freq),
            "front-end peak at {freq} Hz for a 10 Hz tone"
        );
    }

    #[test]
    fn class_net_shapes_and_channel_sensitivity() {
        let net = ClassNet::new(toy_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = net.init_params(&mut rng).unwrap();
        let data: Vec<f64> = (0..2 * 32).map(|i| (i as f64 * 0.1).sin()).collect();

        let run = |input: Vec<f64>| -> (Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![1, 2, 32], input).unwrap());
            let (f, l) = net.forward(&mut tape, &store, x, ForwardMode::Train).unwrap();
            (
                tape.value(f).data().to_vec(),
                tape.value(l).data().to_vec(),
            )
        };
        let (features, logits) = run(data.clone());
        assert_eq!(features.len(), 8);
        assert_eq!(logits.len(), 2);

        // permuting channels must change the logits
        let mut permuted = data[32..64].to_vec();
        permuted.extend_from_slice(&data[0..32]);
        let (_, logits_p) = run(permuted);
        let diff = logits
            .iter()
            .zip(&logits_p)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-9, "channel permutation must change logits");
    }

    #[test]
    fn frozen_mode_uses_running_stats_and_gets_no_grads() {
        let net = ClassNet::new(toy_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = net.init_params(&mut rng).unwrap();
        let data: Vec<f64> = (0..2 * 2 * 32).map(|i| (i as f64 * 0.21).cos()).collect();
        store.zero_grads();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2, 2, 32], data).unwrap());
        let (_, logits) = net
            .forward(&mut tape, &store, x, ForwardMode::Frozen)
            .unwrap();
        let loss = tape.cross_entropy(logits, &[0, 1]).unwrap();
        tape.backward(loss, &mut store).unwrap();
        for name in store.names().map(|s| s.to_string()).collect::<Vec<_>>() {
            assert!(
                store.grad(&name).unwrap().iter().all(|&g| g == 0.0),
                "{name} must stay zero-grad in frozen mode"
            );
        }
    }

    #[test]
    fn epochs_to_tensor_validates() {
        let a = crate::signal::synth_mi_epoch(0, 2, 32, 250.0, 1).unwrap();
        let b = crate::signal::synth_mi_epoch(1, 2, 32, 250.0, 2).unwrap();
        let t = epochs_to_tensor(&[a.clone(), b]).unwrap();
        assert_eq!(t.shape(), &[2, 2, 32]);
        assert!(epochs_to_tensor(&[]).is_err());
    }
}
