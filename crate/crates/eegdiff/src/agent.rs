//! Weight-guided actor-critic: action selection with exploration noise,
//! replay buffer, TD targets, critic and actor updates, soft target updates
//! and the time/frequency reward.
//!
//! The actor maps the feature-state to the three loss weights through a
//! sigmoid head; executed actions are clamped to `[0.01, 1]` so no loss term
//! ever vanishes completely. The critic scores `(state, action)` pairs.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dsp;
use crate::error::{Error, Result};
use crate::nets::{epochs_to_tensor, ClassNet, ForwardMode, Mlp, ParameterStore, WaveletNet};
use crate::signal::EegEpoch;
use crate::tensor::Tensor;

/// Lower clamp of every loss weight.
pub const WEIGHT_FLOOR: f64 = 0.01;
/// Upper clamp of every loss weight.
pub const WEIGHT_CEIL: f64 = 1.0;
/// Histogram resolution of the reward's JS divergences.
pub const REWARD_BINS: usize = 32;

/// The agent's action: multipliers on the diffusion, time-frequency and
/// classification loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_d: f64,
    pub w_tf: f64,
    pub w_c: f64,
}

impl LossWeights {
    pub fn new(w_d: f64, w_tf: f64, w_c: f64) -> Result<Self> {
        let w = Self { w_d, w_tf, w_c };
        w.validate()?;
        Ok(w)
    }

    /// Clamps raw values into the valid action box.
    pub fn clamped(raw: [f64; 3]) -> Self {
        Self {
            w_d: raw[0].clamp(WEIGHT_FLOOR, WEIGHT_CEIL),
            w_tf: raw[1].clamp(WEIGHT_FLOOR, WEIGHT_CEIL),
            w_c: raw[2].clamp(WEIGHT_FLOOR, WEIGHT_CEIL),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for v in self.as_array() {
            if !(v.is_finite() && (WEIGHT_FLOOR..=WEIGHT_CEIL).contains(&v)) {
                return Err(Error::agent(format!(
                    "loss weight {v} outside [{WEIGHT_FLOOR}, {WEIGHT_CEIL}]"
                )));
            }
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.w_d, self.w_tf, self.w_c]
    }
}

/// One replay-buffer record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: LossWeights,
    pub reward: f64,
    pub next_state: Vec<f64>,
}

impl Transition {
    pub fn validate(&self) -> Result<()> {
        if self.state.len() != self.next_state.len() {
            return Err(Error::agent("transition state lengths differ"));
        }
        if !self.reward.is_finite() {
            return Err(Error::agent("non-finite reward"));
        }
        self.action.validate()
    }
}

/// Ring buffer of transitions with uniform without-replacement sampling.
#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    records: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            records: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &Transition> {
        self.records.iter()
    }

    /// Appends a record, evicting the oldest beyond capacity.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        t.validate()?;
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(t);
        Ok(())
    }

    /// Uniform sample without replacement, deterministic in the RNG stream.
    pub fn sample_with_rng(
        &self,
        batch_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<Transition>> {
        if batch_size > self.records.len() {
            return Err(Error::agent(format!(
                "cannot sample {batch_size} from a buffer of {}",
                self.records.len()
            )));
        }
        // partial Fisher-Yates over the index range
        let n = self.records.len();
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..batch_size {
            let j = rng.gen_range(i..n);
            idx.swap(i, j);
        }
        Ok(idx[..batch_size]
            .iter()
            .map(|&i| self.records[i].clone())
            .collect())
    }

    /// Seeded convenience wrapper around [`ReplayBuffer::sample_with_rng`].
    pub fn sample(&self, batch_size: usize, seed: u64) -> Result<Vec<Transition>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with_rng(batch_size, &mut rng)
    }
}

// ---------------------------------------------------------------------------
// State construction
// ---------------------------------------------------------------------------

/// Mean wavelet features concatenated with mean classification features over
/// a generated batch: the agent's observation vector (length 2*feature_dim).
pub fn build_state(
    gen_batch: &[EegEpoch],
    wavelet: &WaveletNet,
    wavelet_store: &ParameterStore,
    class: &ClassNet,
    class_store: &ParameterStore,
) -> Result<Vec<f64>> {
    if gen_batch.is_empty() {
        return Err(Error::agent("cannot build a state from an empty batch"));
    }
    let x = epochs_to_tensor(gen_batch)?;
    let batch = gen_batch.len();
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let (wf, _) = wavelet.forward(&mut tape, wavelet_store, xv, ForwardMode::Frozen)?;
    let (cf, _) = class.forward(&mut tape, class_store, xv, ForwardMode::Frozen)?;
    let mean_of = |t: &Tensor| -> Vec<f64> {
        let dim = t.shape()[1];
        let mut out = vec![0.0; dim];
        for b in 0..batch {
            for (o, v) in out.iter_mut().zip(&t.data()[b * dim..(b + 1) * dim]) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|v| *v /= batch as f64);
        out
    };
    let mut state = mean_of(tape.value(wf));
    state.extend(mean_of(tape.value(cf)));
    Ok(state)
}

// ---------------------------------------------------------------------------
// Action selection
// ---------------------------------------------------------------------------

/// Runs the actor on a state: sigmoid head into `(0,1)^3`, Gaussian
/// exploration noise, clamp to the action box.
pub fn select_action(
    actor: &Mlp,
    actor_store: &ParameterStore,
    state: &[f64],
    noise_std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossWeights> {
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::new(vec![1, state.len()], state.to_vec())?);
    let pre = actor.forward(&mut tape, actor_store, s, ForwardMode::Frozen)?;
    let act = tape.sigmoid(pre);
    let out = tape.value(act).data();
    if out.len() != 3 {
        return Err(Error::agent(format!(
            "actor must output 3 weights, got {}",
            out.len()
        )));
    }
    let mut raw = [0.0; 3];
    for (slot, &v) in raw.iter_mut().zip(out) {
        let noise = if noise_std > 0.0 {
            Normal::new(0.0, noise_std)
                .map_err(|e| Error::agent(format!("bad noise std: {e}")))?
                .sample(rng)
        } else {
            0.0
        };
        *slot = v + noise;
    }
    Ok(LossWeights::clamped(raw))
}

/// Deterministic policy output of an actor (no exploration noise), used for
/// TD targets.
pub fn policy_action(actor: &Mlp, actor_store: &ParameterStore, state: &[f64]) -> Result<[f64; 3]> {
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::new(vec![1, state.len()], state.to_vec())?);
    let pre = actor.forward(&mut tape, actor_store, s, ForwardMode::Frozen)?;
    let act = tape.sigmoid(pre);
    let out = tape.value(act).data();
    let w = LossWeights::clamped([out[0], out[1], out[2]]);
    Ok(w.as_array())
}

// ---------------------------------------------------------------------------
// Reward
// ---------------------------------------------------------------------------

/// Component scores of one reward evaluation. All components live in
/// `[0, 1]`; the total is their penalized combination in `[-1, 0]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub js_statistical: f64,
    pub js_informational: f64,
    pub js_nonlinear: f64,
    pub spectral_discrepancy: f64,
    pub total: f64,
}

impl RewardBreakdown {
    fn from_components(js: [f64; 3], spectral: f64) -> Self {
        let mean_js = (js[0] + js[1] + js[2]) / 3.0;
        Self {
            js_statistical: js[0],
            js_informational: js[1],
            js_nonlinear: js[2],
            spectral_discrepancy: spectral,
            total: -(mean_js + spectral) / 2.0,
        }
    }
}

/// JS divergence between per-(epoch, channel) feature samples of the two
/// batches, histogrammed over the pooled value range.
fn feature_js(gen_values: &[f64], ref_values: &[f64]) -> Result<f64> {
    let lo = gen_values
        .iter()
        .chain(ref_values)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let hi = gen_values
        .iter()
        .chain(ref_values)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    // all values identical: the two distributions coincide
    if lo == hi {
        return Ok(0.0);
    }
    let p = dsp::histogram(gen_values, REWARD_BINS, (lo, hi))?;
    let q = dsp::histogram(ref_values, REWARD_BINS, (lo, hi))?;
    dsp::js_divergence(&p, &q)
}

/// Scores how closely the generated batch matches the reference batch in
/// temporal feature distributions (three JS groups) and band-power
/// proportions (spectral discrepancy).
pub fn compute_reward(gen_batch: &[EegEpoch], ref_batch: &[EegEpoch]) -> Result<RewardBreakdown> {
    if gen_batch.is_empty() || ref_batch.is_empty() {
        return Err(Error::agent("reward needs non-empty batches"));
    }
    let (c, fs) = (gen_batch[0].channels(), gen_batch[0].fs_hz);
    if ref_batch[0].channels() != c {
        return Err(Error::agent("reward batches must share channel geometry"));
    }

    let features_of = |batch: &[EegEpoch]| -> Result<Vec<[f64; 11]>> {
        let mut rows = Vec::with_capacity(batch.len() * c);
        for e in batch {
            for ch in 0..c {
                let f = dsp::TemporalFeatures::compute(e.channel(ch)).map_err(|err| {
                    Error::agent(format!("degenerate epoch in reward batch: {err}"))
                })?;
                rows.push(f.as_array());
            }
        }
        Ok(rows)
    };
    let gen_rows = features_of(gen_batch)?;
    let ref_rows = features_of(ref_batch)?;

    let mut js_per_feature = [0.0; 11];
    for (fi, slot) in js_per_feature.iter_mut().enumerate() {
        let gv: Vec<f64> = gen_rows.iter().map(|r| r[fi]).collect();
        let rv: Vec<f64> = ref_rows.iter().map(|r| r[fi]).collect();
        *slot = feature_js(&gv, &rv)?;
    }
    let mut js_groups = [0.0; 3];
    for (gi, &(lo, hi)) in dsp::TemporalFeatures::GROUPS.iter().enumerate() {
        js_groups[gi] = js_per_feature[lo..hi].iter().sum::<f64>() / (hi - lo) as f64;
    }

    let mean_props = |batch: &[EegEpoch]| -> Result<[f64; 4]> {
        let mut acc = [0.0; 4];
        let mut count = 0usize;
        for e in batch {
            for ch in 0..c {
                let bp = dsp::band_proportions(e.channel(ch), fs)?;
                for (a, v) in acc.iter_mut().zip(bp.as_array()) {
                    *a += v;
                }
                count += 1;
            }
        }
        acc.iter_mut().for_each(|a| *a /= count as f64);
        Ok(acc)
    };
    let gp = mean_props(gen_batch)?;
    let rp = mean_props(ref_batch)?;
    let spectral = gp.iter().zip(&rp).map(|(a, b)| (a - b).abs()).sum::<f64>() / 4.0;

    Ok(RewardBreakdown::from_components(js_groups, spectral))
}

// ---------------------------------------------------------------------------
// TD target and updates
// ---------------------------------------------------------------------------

/// `y = R + tau * V_t(S', T_t(S'))` via the target networks.
pub fn td_target(
    critic_t: &Mlp,
    critic_t_store: &ParameterStore,
    actor_t: &Mlp,
    actor_t_store: &ParameterStore,
    next_state: &[f64],
    reward: f64,
    discount: f64,
) -> Result<f64> {
    let next_action = policy_action(actor_t, actor_t_store, next_state)?;
    let mut input = next_state.to_vec();
    input.extend_from_slice(&next_action);
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, input.len()], input)?);
    let v = critic_t.forward(&mut tape, critic_t_store, x, ForwardMode::Frozen)?;
    Ok(reward + discount * tape.value(v).item())
}

/// One SGD step on the critic against targets `y`:
/// loss = (1/2M) * sum((y_i - V(S_i, A_i))^2). Returns the pre-step loss.
pub fn critic_update(
    critic: &Mlp,
    critic_store: &mut ParameterStore,
    batch: &[Transition],
    targets: &[f64],
    lr: f64,
) -> Result<f64> {
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(Error::agent("critic update needs a non-empty matched batch"));
    }
    let state_dim = batch[0].state.len();
    let mut input = Vec::with_capacity(batch.len() * (state_dim + 3));
    for t in batch {
        input.extend_from_slice(&t.state);
        input.extend_from_slice(&t.action.as_array());
    }
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![batch.len(), state_dim + 3], input)?);
    let v = critic.forward(&mut tape, critic_store, x, ForwardMode::Train)?;
    let y = tape.leaf(Tensor::new(vec![batch.len(), 1], targets.to_vec())?);
    let d = tape.sub(y, v)?;
    let sq = tape.mul(d, d)?;
    let mean = tape.mean_all(sq);
    let loss = tape.mul_const(mean, 0.5);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("critic loss".into()));
    }
    critic_store.zero_grads();
    tape.backward(loss, critic_store)?;
    critic_store.sgd_step(lr);
    Ok(value)
}

/// One ascent step on the actor through a frozen critic:
/// J = (1/M) * sum(V(S_i, T(S_i))). Returns the pre-step J.
pub fn actor_update(
    actor: &Mlp,
    actor_store: &mut ParameterStore,
    critic: &Mlp,
    critic_store: &ParameterStore,
    states: &[Vec<f64>],
    lr: f64,
) -> Result<f64> {
    if states.is_empty() {
        return Err(Error::agent("actor update needs a non-empty batch"));
    }
    let state_dim = states[0].len();
    let mut flat = Vec::with_capacity(states.len() * state_dim);
    for s in states {
        if s.len() != state_dim {
            return Err(Error::agent("actor update states must share length"));
        }
        flat.extend_from_slice(s);
    }
    let mut tape = Tape::new();
    let s = tape.leaf(Tensor::new(vec![states.len(), state_dim], flat)?);
    let pre = actor.forward(&mut tape, actor_store, s, ForwardMode::Train)?;
    let action = tape.sigmoid(pre);
    let joined = tape.concat_channels(s, action)?;
    let v = critic.forward(&mut tape, critic_store, joined, ForwardMode::Frozen)?;
    let objective = tape.mean_all(v);
    let value = tape.value(objective).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("actor objective".into()));
    }
    actor_store.zero_grads();
    tape.backward(objective, actor_store)?;
    actor_store.ascend_step(lr);
    Ok(value)
}

/// `target <- sigma * source + (1 - sigma) * target`, every coordinate.
pub fn soft_update(source: &ParameterStore, target: &mut ParameterStore, sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::agent(format!("soft update sigma {sigma} outside [0,1]")));
    }
    let names: Vec<String> = source.names().map(|s| s.to_string()).collect();
    for name in names {
        let (src_shape, src_values) = source.get(&name)?;
        let (dst_shape, _) = target.get(&name)?;
        if src_shape != dst_shape {
            return Err(Error::agent(format!("soft update shape mismatch for '{name}'")));
        }
        let src: Vec<f64> = src_values.to_vec();
        let dst = target.values_mut(&name)?;
        for (d, s) in dst.iter_mut().zip(&src) {
            *d = sigma * s + (1.0 - sigma) * *d;
        }
    }
    Ok(())
}
