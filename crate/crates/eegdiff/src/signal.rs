//! EEG data model, file ingestion, preprocessing and the deterministic
//! synthetic motor-imagery generator.
//!
//! Epochs are stored as dense channels × samples matrices of `f64`. All
//! operations here are pure functions of their inputs: preprocessing returns
//! new epochs and never mutates shared state.

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum number of samples an epoch must carry.
pub const MIN_SAMPLES: usize = 16;

/// One multichannel EEG trial: a channels × samples matrix plus sampling
/// rate and class label.
#[derive(Debug, Clone, PartialEq)]
pub struct EegEpoch {
    data: Vec<f64>,
    channels: usize,
    samples: usize,
    pub fs_hz: f64,
    pub label: usize,
    pub channel_names: Vec<String>,
}

impl EegEpoch {
    /// Builds an epoch from a flat row-major buffer (`data[ch * samples + s]`).
    pub fn new(
        data: Vec<f64>,
        channels: usize,
        samples: usize,
        fs_hz: f64,
        label: usize,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        if channels < 1 {
            return Err(Error::signal("epoch needs at least one channel"));
        }
        if samples < MIN_SAMPLES {
            return Err(Error::signal(format!(
                "epoch needs at least {MIN_SAMPLES} samples, got {samples}"
            )));
        }
        if data.len() != channels * samples {
            return Err(Error::signal(format!(
                "data length {} does not match {channels}x{samples}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::signal("epoch contains non-finite values"));
        }
        if !(fs_hz.is_finite() && fs_hz > 0.0) {
            return Err(Error::signal(format!("invalid sampling rate {fs_hz}")));
        }
        if channel_names.len() != channels {
            return Err(Error::signal(format!(
                "{} channel names for {channels} channels",
                channel_names.len()
            )));
        }
        let unique: BTreeSet<&str> = channel_names.iter().map(|s| s.as_str()).collect();
        if unique.len() != channels {
            return Err(Error::signal("channel names must be unique"));
        }
        Ok(Self {
            data,
            channels,
            samples,
            fs_hz,
            label,
            channel_names,
        })
    }

    /// Builds an epoch from per-channel rows.
    pub fn from_rows(
        rows: Vec<Vec<f64>>,
        fs_hz: f64,
        label: usize,
        channel_names: Vec<String>,
    ) -> Result<Self> {
        let channels = rows.len();
        let samples = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != samples) {
            return Err(Error::signal("channel rows have unequal lengths"));
        }
        let mut data = Vec::with_capacity(channels * samples);
        for row in &rows {
            data.extend_from_slice(row);
        }
        Self::new(data, channels, samples, fs_hz, label, channel_names)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.samples..(c + 1) * self.samples]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Returns a copy with the same metadata and new sample values.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::new(
            data,
            self.channels,
            self.samples,
            self.fs_hz,
            self.label,
            self.channel_names.clone(),
        )
    }

    /// Default channel naming used by the synthetic generator and the
    /// sampler: channel 0 is "C3", channel 1 is "C4", the rest are "ch<i>".
    pub fn default_channel_names(channels: usize) -> Vec<String> {
        (0..channels)
            .map(|c| match c {
                0 => "C3".to_string(),
                1 => "C4".to_string(),
                i => format!("ch{i}"),
            })
            .collect()
    }
}

/// A homogeneous collection of epochs (same geometry and sampling rate).
#[derive(Debug, Clone)]
pub struct EpochSet {
    epochs: Vec<EegEpoch>,
}

impl EpochSet {
    pub fn new(epochs: Vec<EegEpoch>) -> Result<Self> {
        let first = epochs
            .first()
            .ok_or_else(|| Error::signal("epoch set must be non-empty"))?;
        let (c, s, fs) = (first.channels(), first.samples(), first.fs_hz);
        for e in &epochs {
            if e.channels() != c || e.samples() != s || e.fs_hz != fs {
                return Err(Error::signal(
                    "epoch set must have homogeneous shape and sampling rate",
                ));
            }
        }
        Ok(Self { epochs })
    }

    pub fn epochs(&self) -> &[EegEpoch] {
        &self.epochs
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.epochs[0].channels()
    }

    pub fn samples(&self) -> usize {
        self.epochs[0].samples()
    }

    pub fn fs_hz(&self) -> f64 {
        self.epochs[0].fs_hz
    }

    pub fn class_ids(&self) -> BTreeSet<usize> {
        self.epochs.iter().map(|e| e.label).collect()
    }

    /// Indices of all epochs carrying `label`.
    pub fn class_indices(&self, label: usize) -> Vec<usize> {
        self.epochs
            .iter()
            .enumerate()
            .filter(|(_, e)| e.label == label)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EpochMeta {
    fs_hz: f64,
    label: usize,
    channels: Vec<String>,
}

/// Serializes `v` with enough digits for an exact 64-bit round-trip.
///
/// Rust's shortest float formatting is round-trip exact and never exceeds 17
/// significant digits, and keeps integral values compact ("0", not "0.0e0").
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Loads one epoch from a CSV body plus its JSON metadata sidecar.
///
/// The CSV has a header of channel names; each following row is one sample
/// with one numeric column per channel.
pub fn load_epoch_csv(path: &Path, meta_path: &Path) -> Result<EegEpoch> {
    let meta_text = std::fs::read_to_string(meta_path)
        .map_err(|e| Error::signal(format!("cannot read metadata {}: {e}", meta_path.display())))?;
    let meta: EpochMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::signal(format!("invalid metadata {}: {e}", meta_path.display())))?;

    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::signal(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::signal("empty CSV file"))?;
    let names: Vec<String> = header.split(',').map(|s| s.to_string()).collect();
    if names != meta.channels {
        return Err(Error::signal(format!(
            "CSV header does not match metadata channels in {}",
            path.display()
        )));
    }
    let channels = names.len();

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); channels];
    let mut row_count = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != channels {
            return Err(Error::signal(format!(
                "ragged row {} in {}: {} values under {channels}-column header",
                lineno + 2,
                path.display(),
                cells.len()
            )));
        }
        for (c, cell) in cells.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::signal(format!(
                    "non-numeric cell '{cell}' at row {} column {} in {}",
                    lineno + 2,
                    c + 1,
                    path.display()
                ))
            })?;
            columns[c].push(v);
        }
        row_count += 1;
    }
    if row_count == 0 {
        return Err(Error::signal(format!("empty CSV body in {}", path.display())));
    }
    EegEpoch::from_rows(columns, meta.fs_hz, meta.label, names)
}

/// Inverse of [`load_epoch_csv`]; values round-trip bit-exactly.
pub fn save_epoch_csv(epoch: &EegEpoch, path: &Path, meta_path: &Path) -> Result<()> {
    for name in &epoch.channel_names {
        if name.contains(',') || name.contains('\n') {
            return Err(Error::signal(format!("channel name '{name}' not CSV-safe")));
        }
    }
    let mut out = String::new();
    out.push_str(&epoch.channel_names.join(","));
    out.push('\n');
    for s in 0..epoch.samples() {
        for c in 0..epoch.channels() {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&fmt_f64(epoch.channel(c)[s]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| Error::signal(format!("cannot write {}: {e}", path.display())))?;

    let meta = EpochMeta {
        fs_hz: epoch.fs_hz,
        label: epoch.label,
        channels: epoch.channel_names.clone(),
    };
    let meta_json = serde_json::to_string_pretty(&meta)?;
    std::fs::write(meta_path, meta_json)
        .map_err(|e| Error::signal(format!("cannot write {}: {e}", meta_path.display())))?;
    Ok(())
}

/// Writes a whole set as `epoch_<idx>.csv` + `epoch_<idx>.json` under `dir`.
pub fn save_epoch_set(set: &EpochSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, epoch) in set.epochs().iter().enumerate() {
        let csv = dir.join(format!("epoch_{i}.csv"));
        let json = dir.join(format!("epoch_{i}.json"));
        save_epoch_csv(epoch, &csv, &json)?;
    }
    Ok(())
}

/// Loads every `epoch_<idx>.csv`/`.json` pair under `dir`, in index order.
pub fn load_epoch_set(dir: &Path) -> Result<EpochSet> {
    let mut epochs = Vec::new();
    for i in 0.. {
        let csv = dir.join(format!("epoch_{i}.csv"));
        let json = dir.join(format!("epoch_{i}.json"));
        if !csv.exists() {
            break;
        }
        epochs.push(load_epoch_csv(&csv, &json)?);
    }
    if epochs.is_empty() {
        return Err(Error::signal(format!(
            "no epoch_<idx>.csv files under {}",
            dir.display()
        )));
    }
    EpochSet::new(epochs)
}

// ---------------------------------------------------------------------------
// Butterworth bandpass, forward-backward
// ---------------------------------------------------------------------------

/// One second-order section in direct form II transposed.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2], // a1, a2 (a0 normalized to 1)
}

impl Biquad {
    /// Steady-state internal state for a unit step input; scaling this by the
    /// first sample removes the startup transient for constant inputs.
    fn step_state(&self) -> [f64; 2] {
        let k = (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1]);
        [k - self.b[0], self.b[2] - self.a[1] * k]
    }

    /// DC gain, used to propagate step initial conditions through a cascade.
    fn dc_gain(&self) -> f64 {
        (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1])
    }

    fn run(&self, x: &mut [f64], x0_scale: f64) {
        let zi = self.step_state();
        let mut z1 = zi[0] * x0_scale;
        let mut z2 = zi[1] * x0_scale;
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        for v in x.iter_mut() {
            let xin = *v;
            let y = b0 * xin + z1;
            z1 = b1 * xin - a1 * y + z2;
            z2 = b2 * xin - a2 * y;
            *v = y;
        }
    }
}

/// Designs a 4th-order Butterworth bandpass as two biquads via the
/// lowpass-to-bandpass transform and the bilinear transform with prewarping.
fn design_butter_bandpass(lo_hz: f64, hi_hz: f64, fs_hz: f64) -> [Biquad; 2] {
    use rustfft::num_complex::Complex64;

    let c = 2.0 * fs_hz;
    let w_lo = c * (PI * lo_hz / fs_hz).tan();
    let w_hi = c * (PI * hi_hz / fs_hz).tan();
    let w0sq = w_lo * w_hi;
    let bw = w_hi - w_lo;

    // Order-2 Butterworth prototype pole in the upper half plane.
    let proto = Complex64::new(-(0.5f64).sqrt(), (0.5f64).sqrt());
    // Lowpass-to-bandpass images of the prototype pole.
    let bp = bw * proto;
    let disc = (bp * bp - Complex64::new(4.0 * w0sq, 0.0)).sqrt();
    let poles = [(bp + disc) / 2.0, (bp - disc) / 2.0];

    // Each image pairs with its conjugate into one real analog section
    // bw*s / (s^2 + a1*s + a0); the cascade multiplies to bw^2 s^2 / D(s).
    let mut sections = [Biquad {
        b: [0.0; 3],
        a: [0.0; 2],
    }; 2];
    for (i, p) in poles.iter().enumerate() {
        let a1 = -2.0 * p.re;
        let a0 = p.norm_sqr();
        // Bilinear transform of (0*s^2 + bw*s + 0) / (s^2 + a1*s + a0).
        let b_num = [bw * c, 0.0, -bw * c];
        let a_den = [c * c + a1 * c + a0, 2.0 * a0 - 2.0 * c * c, c * c - a1 * c + a0];
        sections[i] = Biquad {
            b: [
                b_num[0] / a_den[0],
                b_num[1] / a_den[0],
                b_num[2] / a_den[0],
            ],
            a: [a_den[1] / a_den[0], a_den[2] / a_den[0]],
        };
    }
    sections
}

fn filtfilt_channel(sections: &[Biquad; 2], x: &[f64], lo_hz: f64, fs_hz: f64) -> Vec<f64> {
    let n = x.len();
    // Transients of the low edge decay over ~fs/lo samples; keep them inside
    // the padding so they are stripped with it.
    let padlen = (n - 1).min(((1.5 * fs_hz / lo_hz).ceil() as usize).max(24));

    // Constant padding: combined with step-matched initial conditions the
    // filter state is fully settled when it enters the data region, so no
    // baseline step is injected at either end.
    let mut ext = Vec::with_capacity(n + 2 * padlen);
    ext.extend(std::iter::repeat(x[0]).take(padlen));
    ext.extend_from_slice(x);
    ext.extend(std::iter::repeat(x[n - 1]).take(padlen));

    let pass = |buf: &mut [f64]| {
        let mut scale = buf[0];
        for s in sections {
            s.run(buf, scale);
            scale *= s.dc_gain();
        }
    };

    pass(&mut ext);
    ext.reverse();
    pass(&mut ext);
    ext.reverse();

    ext[padlen..padlen + n].to_vec()
}

/// 4th-order Butterworth bandpass applied forward-backward (zero phase) per
/// channel. Band edges must satisfy `0 < lo < hi < fs/2`.
pub fn bandpass(epoch: &EegEpoch, lo_hz: f64, hi_hz: f64) -> Result<EegEpoch> {
    if !(lo_hz > 0.0 && lo_hz < hi_hz && hi_hz < epoch.fs_hz / 2.0) {
        return Err(Error::signal(format!(
            "invalid band edges {lo_hz}-{hi_hz} Hz for fs {} Hz",
            epoch.fs_hz
        )));
    }
    let sections = design_butter_bandpass(lo_hz, hi_hz, epoch.fs_hz);
    let mut data = Vec::with_capacity(epoch.data.len());
    for c in 0..epoch.channels() {
        data.extend(filtfilt_channel(&sections, epoch.channel(c), lo_hz, epoch.fs_hz));
    }
    epoch.with_data(data)
}

/// Subtracts the cross-channel mean at every sample index.
pub fn rereference_common_average(epoch: &EegEpoch) -> Result<EegEpoch> {
    if epoch.channels() < 2 {
        return Err(Error::signal(
            "common-average re-referencing needs at least 2 channels",
        ));
    }
    let (channels, samples) = (epoch.channels(), epoch.samples());
    let mut data = epoch.data.clone();
    for s in 0..samples {
        let mut mean = 0.0;
        for c in 0..channels {
            mean += data[c * samples + s];
        }
        mean /= channels as f64;
        for c in 0..channels {
            data[c * samples + s] -= mean;
        }
    }
    epoch.with_data(data)
}

/// Z-scores each channel to mean 0 and population standard deviation 1.
pub fn normalize_per_channel(epoch: &EegEpoch) -> Result<EegEpoch> {
    let samples = epoch.samples();
    let mut data = Vec::with_capacity(epoch.data.len());
    for c in 0..epoch.channels() {
        let ch = epoch.channel(c);
        let mean = ch.iter().sum::<f64>() / samples as f64;
        let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / samples as f64;
        if var == 0.0 {
            return Err(Error::signal(format!(
                "channel {c} has zero variance, cannot normalize"
            )));
        }
        let std = var.sqrt();
        data.extend(ch.iter().map(|v| (v - mean) / std));
    }
    epoch.with_data(data)
}

// ---------------------------------------------------------------------------
// Synthetic motor-imagery generator
// ---------------------------------------------------------------------------

/// Paul Kellet style pink noise with an extra high-frequency rolloff,
/// matching the steep falloff of resting EEG above the beta band.
struct PinkNoise {
    rng: ChaCha8Rng,
    state: [f64; 3],
    lp: [f64; 2],
    hp_x: f64,
    hp_y: f64,
}

impl PinkNoise {
    fn new(rng: ChaCha8Rng) -> Self {
        Self {
            rng,
            state: [0.0; 3],
            lp: [0.0; 2],
            hp_x: 0.0,
            hp_y: 0.0,
        }
    }

    fn next(&mut self) -> f64 {
        let w: f64 = self.rng.gen_range(-1.0..1.0);
        // Pole corners near 0.9, 2.9 and 17 Hz at fs = 250, so the spectrum
        // plateaus below the EEG analysis band instead of diverging at DC.
        self.state[0] = 0.97800 * self.state[0] + w * 0.0990460;
        self.state[1] = 0.92800 * self.state[1] + w * 0.2965164;
        self.state[2] = 0.57000 * self.state[2] + w * 1.0526913;
        let pink = self.state[0] + self.state[1] + self.state[2] + w * 0.1848;
        // two-pole rolloff with corners near 22 and 14 Hz at fs = 250
        self.lp[0] = 0.57 * self.lp[0] + 0.43 * pink;
        self.lp[1] = 0.70 * self.lp[1] + 0.30 * self.lp[0];
        // one-pole highpass near 2.4 Hz keeps energy off the analysis band edge
        let y = 0.942 * (self.hp_y + self.lp[1] - self.hp_x);
        self.hp_x = self.lp[1];
        self.hp_y = y;
        y
    }
}

/// Alpha-band (10 Hz) sinusoid amplitude of the burst carried by the
/// dominant sensorimotor channel relative to the opposite one.
const ALPHA_ASYMMETRY: f64 = 1.5;
const ALPHA_BASE_AMPLITUDE: f64 = 1.4;
const PINK_SCALE: f64 = 0.3;

/// Deterministic synthetic motor-imagery epoch: per-channel pink noise plus
/// a 10 Hz alpha burst over the middle half of the window. Channel 0 plays
/// the role of C3, channel 1 of C4; class 0 (left hand) puts the stronger
/// alpha on C3, class 1 reverses the asymmetry. All randomness comes from
/// `seed`, and the class only swaps the two alpha amplitudes, so class 0 and
/// class 1 epochs for the same seed share their noise exactly.
pub fn synth_mi_epoch(
    class_id: usize,
    channels: usize,
    samples: usize,
    fs_hz: f64,
    seed: u64,
) -> Result<EegEpoch> {
    if class_id > 1 {
        return Err(Error::signal(format!("class id must be 0 or 1, got {class_id}")));
    }
    if channels < 2 {
        return Err(Error::signal(
            "synthetic generator needs at least 2 channels (C3 and C4)",
        ));
    }

    let mut data = vec![0.0; channels * samples];
    for c in 0..channels {
        // Independent per-channel streams derived from the epoch seed.
        let mut seed_bytes = [0u8; 32];
        seed_bytes[..8].copy_from_slice(&seed.to_le_bytes());
        seed_bytes[8..16].copy_from_slice(&(c as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(seed_bytes);
        let phase: f64 = rng.gen_range(0.0..2.0 * PI);
        let mut pink = PinkNoise::new(rng);

        // warm up the pink filter past its startup transient
        for _ in 0..256 {
            pink.next();
        }

        let amp = if c == 0 {
            // C3: dominant for left-hand imagery (class 0)
            if class_id == 0 {
                ALPHA_BASE_AMPLITUDE * ALPHA_ASYMMETRY
            } else {
                ALPHA_BASE_AMPLITUDE
            }
        } else if c == 1 {
            // C4: dominant for right-hand imagery (class 1)
            if class_id == 1 {
                ALPHA_BASE_AMPLITUDE * ALPHA_ASYMMETRY
            } else {
                ALPHA_BASE_AMPLITUDE
            }
        } else {
            ALPHA_BASE_AMPLITUDE
        };

        let burst_start = samples / 4;
        let burst_len = samples / 2;
        let row = &mut data[c * samples..(c + 1) * samples];
        for (s, v) in row.iter_mut().enumerate() {
            let mut x = PINK_SCALE * pink.next();
            if s >= burst_start && s < burst_start + burst_len {
                let u = (s - burst_start) as f64 / burst_len as f64;
                let env = 0.5 * (1.0 - (2.0 * PI * u).cos());
                let t = s as f64 / fs_hz;
                x += amp * env * (2.0 * PI * 10.0 * t + phase).sin();
            }
            *v = x;
        }
    }

    EegEpoch::new(
        data,
        channels,
        samples,
        fs_hz,
        class_id,
        EegEpoch::default_channel_names(channels),
    )
}

/// Builds a balanced two-class synthetic corpus with `per_class` epochs per
/// label. Epoch seeds are derived from `seed` so corpora are reproducible.
pub fn synth_mi_set(
    per_class: usize,
    channels: usize,
    samples: usize,
    fs_hz: f64,
    seed: u64,
) -> Result<EpochSet> {
    let mut epochs = Vec::with_capacity(per_class * 2);
    for i in 0..per_class {
        for class in 0..2usize {
            let epoch_seed = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((i * 2 + class) as u64);
            epochs.push(synth_mi_epoch(class, channels, samples, fs_hz, epoch_seed)?);
        }
    }
    EpochSet::new(epochs)
}
