//! Reward-mechanism feature stack: temporal statistics, entropies, Hjorth
//! parameters, histogram JS divergence, Welch PSD, band-power proportions
//! and Morlet scalograms.
//!
//! Everything in this module is a deterministic pure function. The three
//! normalized entropies (Shannon, Renyi, Tsallis) share the energy
//! probability vector `p_i = x_i^2 / sum(x^2)`, which makes them invariant
//! under signal scaling.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Floor added to squared samples inside the log-energy entropy so the sum
/// stays defined for zero samples.
pub const LOG_ENERGY_FLOOR: f64 = 1e-12;

/// Welch segment length in samples.
pub const WELCH_SEGMENT: usize = 128;

/// Zero-padded FFT length for Welch segments: the 128-sample Hann window
/// keeps its resolution, but the density is sampled on a 4x finer grid so
/// band-boundary attribution does not depend on coarse bin placement.
pub const WELCH_NFFT: usize = 512;

/// Morlet center-frequency parameter (omega zero).
pub const MORLET_W0: f64 = 6.0;

/// The classic EEG analysis bands retained by the reward, in Hz.
pub const BAND_EDGES: [(f64, f64); 4] = [(0.5, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0)];

// ---------------------------------------------------------------------------
// Temporal statistics and entropies
// ---------------------------------------------------------------------------

/// The eleven per-channel temporal features used by the reward, grouped as
/// statistical (4), informational (4) and nonlinear (3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalFeatures {
    pub variance: f64,
    pub std_dev: f64,
    pub mean: f64,
    pub mean_energy: f64,
    pub shannon: f64,
    pub renyi: f64,
    pub tsallis: f64,
    pub log_energy: f64,
    pub hjorth_activity: f64,
    pub hjorth_mobility: f64,
    pub hjorth_complexity: f64,
}

impl TemporalFeatures {
    /// Computes all eleven features for one channel.
    pub fn compute(x: &[f64]) -> Result<Self> {
        let (variance, std_dev, mean, mean_energy) = temporal_stats(x)?;
        let shannon = shannon_entropy(x)?;
        let renyi = renyi_entropy(x, 2.0)?;
        let tsallis = tsallis_entropy(x, 2.0)?;
        let log_energy = log_energy_entropy(x);
        let (hjorth_activity, hjorth_mobility, hjorth_complexity) = hjorth(x)?;
        Ok(Self {
            variance,
            std_dev,
            mean,
            mean_energy,
            shannon,
            renyi,
            tsallis,
            log_energy,
            hjorth_activity,
            hjorth_mobility,
            hjorth_complexity,
        })
    }

    /// Feature values in a fixed order matching [`TemporalFeatures::NAMES`].
    pub fn as_array(&self) -> [f64; 11] {
        [
            self.variance,
            self.std_dev,
            self.mean,
            self.mean_energy,
            self.shannon,
            self.renyi,
            self.tsallis,
            self.log_energy,
            self.hjorth_activity,
            self.hjorth_mobility,
            self.hjorth_complexity,
        ]
    }

    pub const NAMES: [&'static str; 11] = [
        "variance",
        "std_dev",
        "mean",
        "mean_energy",
        "shannon",
        "renyi",
        "tsallis",
        "log_energy",
        "hjorth_activity",
        "hjorth_mobility",
        "hjorth_complexity",
    ];

    /// Index ranges of the statistical / informational / nonlinear groups.
    pub const GROUPS: [(usize, usize); 3] = [(0, 4), (4, 8), (8, 11)];
}

/// Population variance, standard deviation, arithmetic mean and mean energy.
pub fn temporal_stats(x: &[f64]) -> Result<(f64, f64, f64, f64)> {
    if x.len() < 2 {
        return Err(Error::dsp("temporal statistics need at least 2 samples"));
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let variance = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let mean_energy = x.iter().map(|v| v * v).sum::<f64>() / n;
    Ok((variance, variance.sqrt(), mean, mean_energy))
}

/// Energy probability vector `p_i = x_i^2 / sum(x^2)`.
pub fn energy_pmf(x: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = x.iter().map(|v| v * v).sum();
    if total <= 0.0 {
        return Err(Error::dsp("all-zero signal has no energy distribution"));
    }
    Ok(x.iter().map(|v| v * v / total).collect())
}

/// Shannon entropy of the energy distribution, in bits.
pub fn shannon_entropy(x: &[f64]) -> Result<f64> {
    let p = energy_pmf(x)?;
    Ok(-p
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.log2())
        .sum::<f64>())
}

/// Renyi entropy of order `alpha` of the energy distribution, in bits.
pub fn renyi_entropy(x: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) || alpha == 1.0 {
        return Err(Error::dsp(format!(
            "Renyi order must be positive and != 1, got {alpha}"
        )));
    }
    let p = energy_pmf(x)?;
    let s: f64 = p.iter().map(|&v| v.powf(alpha)).sum();
    Ok(s.log2() / (1.0 - alpha))
}

/// Tsallis entropy of order `q` of the energy distribution.
pub fn tsallis_entropy(x: &[f64], q: f64) -> Result<f64> {
    if !(q > 0.0) || q == 1.0 {
        return Err(Error::dsp(format!(
            "Tsallis order must be positive and != 1, got {q}"
        )));
    }
    let p = energy_pmf(x)?;
    let s: f64 = p.iter().map(|&v| v.powf(q)).sum();
    Ok((1.0 - s) / (q - 1.0))
}

/// Log-energy entropy: `sum(ln(x_i^2 + floor))` with a 1e-12 floor.
pub fn log_energy_entropy(x: &[f64]) -> f64 {
    x.iter().map(|v| (v * v + LOG_ENERGY_FLOOR).ln()).sum()
}

fn population_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

fn first_difference(x: &[f64]) -> Vec<f64> {
    x.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Hjorth activity, mobility and complexity.
pub fn hjorth(x: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() < 3 {
        return Err(Error::dsp("Hjorth parameters need at least 3 samples"));
    }
    let activity = population_variance(x);
    if activity == 0.0 {
        return Err(Error::dsp("Hjorth parameters undefined for zero variance"));
    }
    let dx = first_difference(x);
    let var_dx = population_variance(&dx);
    let mobility = (var_dx / activity).sqrt();
    let ddx = first_difference(&dx);
    let var_ddx = population_variance(&ddx);
    if var_dx == 0.0 {
        return Err(Error::dsp("Hjorth complexity undefined: flat derivative"));
    }
    let mobility_dx = (var_ddx / var_dx).sqrt();
    let complexity = mobility_dx / mobility;
    Ok((activity, mobility, complexity))
}

// ---------------------------------------------------------------------------
// Histograms and JS divergence
// ---------------------------------------------------------------------------

/// A normalized histogram over explicit bin edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub mass: Vec<f64>,
}

/// Histograms `values` over `bins` equal-width cells spanning `range`.
/// Out-of-range values are clamped into the boundary bins; the last bin is
/// right-closed; the mass normalizes to 1.
pub fn histogram(values: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if bins < 2 {
        return Err(Error::dsp("histogram needs at least 2 bins"));
    }
    if !(lo < hi) {
        return Err(Error::dsp(format!("invalid histogram range [{lo}, {hi}]")));
    }
    if values.is_empty() {
        return Err(Error::dsp("cannot histogram an empty sample"));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0u64; bins];
    for &v in values {
        let clamped = v.clamp(lo, hi);
        let mut idx = ((clamped - lo) / width) as usize;
        if idx >= bins {
            idx = bins - 1;
        }
        counts[idx] += 1;
    }
    let total = values.len() as f64;
    let bin_edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
    let mass = counts.iter().map(|&c| c as f64 / total).collect();
    Ok(Histogram { bin_edges, mass })
}

/// Jensen-Shannon divergence in base 2, bounded to `[0, 1]`.
pub fn js_divergence(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.bin_edges != q.bin_edges {
        return Err(Error::dsp("JS divergence needs identical bin edges"));
    }
    let kl_to_mix = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .filter(|(&ai, _)| ai > 0.0)
            .map(|(&ai, &bi)| {
                let m = 0.5 * (ai + bi);
                ai * (ai / m).log2()
            })
            .sum()
    };
    let js = 0.5 * kl_to_mix(&p.mass, &q.mass) + 0.5 * kl_to_mix(&q.mass, &p.mass);
    // exact bounds; tiny negative rounding clipped
    Ok(js.clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// Welch PSD and band proportions
// ---------------------------------------------------------------------------

/// One-sided Welch power spectral density: Hann window, 128-sample segments,
/// 50% overlap. The density integrates to the signal power.
pub fn welch_psd(x: &[f64], fs_hz: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let seg = WELCH_SEGMENT;
    if x.len() < seg {
        return Err(Error::dsp(format!(
            "Welch needs at least {seg} samples, got {}",
            x.len()
        )));
    }
    let hop = seg / 2;
    let window: Vec<f64> = (0..seg)
        .map(|n| 0.5 * (1.0 - (2.0 * PI * n as f64 / seg as f64).cos()))
        .collect();
    let u: f64 = window.iter().map(|w| w * w).sum();

    let nfft = WELCH_NFFT;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(nfft);
    let half = nfft / 2;
    let mut acc = vec![0.0; half + 1];
    let mut count = 0usize;
    let mut start = 0usize;
    while start + seg <= x.len() {
        let mut buf = vec![Complex64::default(); nfft];
        for (b, (&v, &w)) in buf.iter_mut().zip(x[start..start + seg].iter().zip(&window)) {
            *b = Complex64::new(v * w, 0.0);
        }
        fft.process(&mut buf);
        for (k, slot) in acc.iter_mut().enumerate() {
            *slot += buf[k].norm_sqr();
        }
        count += 1;
        start += hop;
    }

    let freqs: Vec<f64> = (0..=half).map(|k| k as f64 * fs_hz / nfft as f64).collect();
    let psd: Vec<f64> = acc
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let c = if k == 0 || k == half { 1.0 } else { 2.0 };
            c * s / (count as f64 * fs_hz * u)
        })
        .collect();
    Ok((freqs, psd))
}

/// Energy proportions of the delta/theta/alpha/beta bands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandProportions {
    pub delta: f64,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl BandProportions {
    pub fn as_array(&self) -> [f64; 4] {
        [self.delta, self.theta, self.alpha, self.beta]
    }
}

/// Integrates the Welch density over the four retained EEG bands and
/// normalizes the integrals to sum to 1. Bins are treated as piecewise
/// constant density cells so band boundaries split straddling bins.
pub fn band_proportions(x: &[f64], fs_hz: f64) -> Result<BandProportions> {
    let (freqs, psd) = welch_psd(x, fs_hz)?;
    let df = fs_hz / WELCH_NFFT as f64;
    let mut integrals = [0.0; 4];
    for (k, (&f, &d)) in freqs.iter().zip(&psd).enumerate() {
        let cell_lo = if k == 0 { 0.0 } else { f - df / 2.0 };
        let cell_hi = f + df / 2.0;
        for (b, &(lo, hi)) in BAND_EDGES.iter().enumerate() {
            let ov = (cell_hi.min(hi) - cell_lo.max(lo)).max(0.0);
            integrals[b] += d * ov;
        }
    }
    let total: f64 = integrals.iter().sum();
    if total <= 0.0 {
        return Err(Error::dsp("no band power in 0.5-30 Hz"));
    }
    Ok(BandProportions {
        delta: integrals[0] / total,
        theta: integrals[1] / total,
        alpha: integrals[2] / total,
        beta: integrals[3] / total,
    })
}

// ---------------------------------------------------------------------------
// Morlet continuous wavelet transform
// ---------------------------------------------------------------------------

/// CWT magnitude over a frequency × time grid.
#[derive(Debug, Clone)]
pub struct Scalogram {
    pub freqs_hz: Vec<f64>,
    /// Row-major `freqs × samples` magnitude matrix.
    pub magnitude: Vec<f64>,
    pub samples: usize,
}

impl Scalogram {
    pub fn row(&self, f: usize) -> &[f64] {
        &self.magnitude[f * self.samples..(f + 1) * self.samples]
    }
}

/// Reusable CWT plan: per-frequency Morlet kernels pre-transformed at a
/// fixed signal length.
pub struct CwtPlan {
    freqs_hz: Vec<f64>,
    len: usize,
    nfft: usize,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    kernel_ffts: Vec<Vec<Complex64>>,
    half_widths: Vec<usize>,
}

impl CwtPlan {
    pub fn new(fs_hz: f64, freqs_hz: &[f64], len: usize) -> Result<Self> {
        if freqs_hz.is_empty() {
            return Err(Error::dsp("CWT needs at least one frequency"));
        }
        for w in freqs_hz.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::dsp("CWT frequencies must be strictly ascending"));
            }
        }
        for &f in freqs_hz {
            if !(f > 0.0 && f < fs_hz / 2.0) {
                return Err(Error::dsp(format!(
                    "CWT frequency {f} Hz outside (0, {})",
                    fs_hz / 2.0
                )));
            }
        }

        let mut max_half = 0usize;
        let mut kernels = Vec::with_capacity(freqs_hz.len());
        let mut half_widths = Vec::with_capacity(freqs_hz.len());
        for &f in freqs_hz {
            let scale = MORLET_W0 * fs_hz / (2.0 * PI * f);
            let half = (4.0 * scale).ceil() as usize;
            let norm = PI.powf(-0.25) / scale.sqrt();
            let mut kernel = Vec::with_capacity(2 * half + 1);
            for m in -(half as isize)..=(half as isize) {
                let t = m as f64 / scale;
                let env = norm * (-0.5 * t * t).exp();
                kernel.push(Complex64::new(
                    env * (MORLET_W0 * t).cos(),
                    env * (MORLET_W0 * t).sin(),
                ));
            }
            max_half = max_half.max(half);
            half_widths.push(half);
            kernels.push(kernel);
        }

        let nfft = (len + 2 * max_half + 1).next_power_of_two();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(nfft);
        let ifft = planner.plan_fft_inverse(nfft);

        let kernel_ffts = kernels
            .into_iter()
            .map(|k| {
                let mut buf = vec![Complex64::default(); nfft];
                buf[..k.len()].copy_from_slice(&k);
                fft.process(&mut buf);
                buf
            })
            .collect();

        Ok(Self {
            freqs_hz: freqs_hz.to_vec(),
            len,
            nfft,
            fft,
            ifft,
            kernel_ffts,
            half_widths,
        })
    }

    /// Computes the scalogram of one signal of the planned length.
    pub fn scalogram(&self, x: &[f64]) -> Result<Scalogram> {
        if x.len() != self.len {
            return Err(Error::dsp(format!(
                "CWT plan built for length {}, got {}",
                self.len,
                x.len()
            )));
        }
        let mut sig = vec![Complex64::default(); self.nfft];
        for (i, &v) in x.iter().enumerate() {
            sig[i] = Complex64::new(v, 0.0);
        }
        self.fft.process(&mut sig);

        let mut magnitude = vec![0.0; self.freqs_hz.len() * self.len];
        let mut buf = vec![Complex64::default(); self.nfft];
        for (fi, kf) in self.kernel_ffts.iter().enumerate() {
            for (b, (s, k)) in buf.iter_mut().zip(sig.iter().zip(kf)) {
                // correlation: conjugate the kernel spectrum
                *b = s * k.conj();
            }
            self.ifft.process(&mut buf);
            let half = self.half_widths[fi];
            let scale = 1.0 / self.nfft as f64;
            let row = &mut magnitude[fi * self.len..(fi + 1) * self.len];
            for (tau, slot) in row.iter_mut().enumerate() {
                // kernel tap 0 is its leftmost sample, so the correlation
                // value centered at tau lands `half` taps earlier
                let idx = (tau + self.nfft - half) % self.nfft;
                *slot = (buf[idx] * scale).norm();
            }
        }
        Ok(Scalogram {
            freqs_hz: self.freqs_hz.clone(),
            magnitude,
            samples: self.len,
        })
    }
}

/// Integrated Welch power inside `[lo_hz, hi_hz)`.
pub fn welch_band_power(x: &[f64], fs_hz: f64, lo_hz: f64, hi_hz: f64) -> Result<f64> {
    let (freqs, psd) = welch_psd(x, fs_hz)?;
    let df = fs_hz / WELCH_NFFT as f64;
    Ok(freqs
        .iter()
        .zip(&psd)
        .filter(|(&f, _)| f >= lo_hz && f < hi_hz)
        .map(|(_, &d)| d * df)
        .sum())
}

/// Morlet scalogram of `x` at the requested analysis frequencies.
pub fn cwt_morlet(x: &[f64], fs_hz: f64, freqs_hz: &[f64]) -> Result<Scalogram> {
    CwtPlan::new(fs_hz, freqs_hz, x.len())?.scalogram(x)
}

/// Log-spaced frequency grid, inclusive of both ends.
pub fn log_spaced_freqs(lo_hz: f64, hi_hz: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo_hz];
    }
    let (llo, lhi) = (lo_hz.ln(), hi_hz.ln());
    (0..count)
        .map(|i| (llo + (lhi - llo) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

// ---------------------------------------------------------------------------
// CSV exports
// ---------------------------------------------------------------------------

/// Two-column CSV export of a PSD. `comment` becomes a leading `#` line.
pub fn write_psd_csv(path: &Path, freqs: &[f64], psd: &[f64], comment: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    if !comment.is_empty() {
        writeln!(f, "# {comment}")?;
    }
    writeln!(f, "freq_hz,density")?;
    for (fr, d) in freqs.iter().zip(psd) {
        writeln!(f, "{fr},{d}")?;
    }
    Ok(())
}

/// CSV export of a scalogram: first column frequency, then one column per
/// sample.
pub fn write_scalogram_csv(path: &Path, sg: &Scalogram, comment: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    if !comment.is_empty() {
        writeln!(f, "# {comment}")?;
    }
    for (fi, freq) in sg.freqs_hz.iter().enumerate() {
        let row = sg.row(fi);
        let mut line = String::with_capacity(row.len() * 12);
        line.push_str(&format!("{freq}"));
        for v in row {
            line.push(',');
            line.push_str(&format!("{v}"));
        }
        writeln!(f, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|s| (2.0 * PI * freq * s as f64 / fs).sin())
            .collect()
    }

    // ---- temporal statistics ----

    #[test]
    fn temporal_stats_constant() {
        let (var, std, mean, energy) = temporal_stats(&[3.0; 8]).unwrap();
        assert_eq!((var, std, mean, energy), (0.0, 0.0, 3.0, 9.0));
    }

    #[test]
    fn temporal_stats_alternating() {
        let (var, std, mean, energy) = temporal_stats(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert_eq!((var, std, mean, energy), (1.0, 1.0, 0.0, 1.0));
    }

    #[test]
    fn temporal_stats_sine_energy() {
        let x = sine(10.0, 250.0, 1000); // full periods
        let (_, _, _, energy) = temporal_stats(&x).unwrap();
        assert_relative_eq!(energy, 0.5, max_relative = 0.02);
    }

    #[test]
    fn temporal_stats_too_short() {
        assert!(temporal_stats(&[1.0]).is_err());
    }

    // ---- energy pmf and entropies ----

    #[test]
    fn energy_pmf_cases() {
        assert_eq!(
            energy_pmf(&[0.0, 0.0, 1.0, 0.0]).unwrap(),
            vec![0.0, 0.0, 1.0, 0.0]
        );
        let p = energy_pmf(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        for v in p {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-15);
        }
        let p = energy_pmf(&[1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(p[0], 0.2, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.8, epsilon = 1e-15);
        assert!(energy_pmf(&[0.0; 4]).is_err());
    }

    #[test]
    fn shannon_entropy_cases() {
        assert_abs_diff_eq!(
            shannon_entropy(&[0.0, 1.0, 0.0]).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        let x = vec![1.0; 8];
        assert_abs_diff_eq!(shannon_entropy(&x).unwrap(), 3.0, epsilon = 1e-12);
        // p = [0.2, 0.8] -> 0.7219 bits
        let x = [0.2f64.sqrt(), 0.8f64.sqrt()];
        assert_abs_diff_eq!(shannon_entropy(&x).unwrap(), 0.721928, epsilon = 1e-6);
    }

    #[test]
    fn renyi_entropy_cases() {
        assert_abs_diff_eq!(
            renyi_entropy(&[0.0, 1.0], 2.0).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        let x = vec![-1.0; 16];
        assert_abs_diff_eq!(renyi_entropy(&x, 2.0).unwrap(), 4.0, epsilon = 1e-12);
        let x = [0.2f64.sqrt(), 0.8f64.sqrt()];
        assert_abs_diff_eq!(
            renyi_entropy(&x, 2.0).unwrap(),
            (1.0f64 / 0.68).log2(),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(renyi_entropy(&x, 2.0).unwrap(), 0.556393, epsilon = 1e-6);
        assert!(renyi_entropy(&x, 1.0).is_err());
        assert!(renyi_entropy(&x, -1.0).is_err());
    }

    #[test]
    fn tsallis_entropy_cases() {
        assert_abs_diff_eq!(
            tsallis_entropy(&[0.0, 1.0], 2.0).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        let x = vec![1.0; 10];
        assert_abs_diff_eq!(tsallis_entropy(&x, 2.0).unwrap(), 0.9, epsilon = 1e-12);
        let x = [0.2f64.sqrt(), 0.8f64.sqrt()];
        assert_abs_diff_eq!(tsallis_entropy(&x, 2.0).unwrap(), 0.32, epsilon = 1e-9);
        assert!(tsallis_entropy(&x, 1.0).is_err());
    }

    #[test]
    fn log_energy_entropy_cases() {
        let v = log_energy_entropy(&[1.0; 4]);
        assert_abs_diff_eq!(v, 4.0 * (1.0f64 + 1e-12).ln(), epsilon = 1e-15);
        assert!(v.abs() < 1e-10);
        let z = log_energy_entropy(&[0.0; 4]);
        assert_abs_diff_eq!(z, 4.0 * (1e-12f64).ln(), epsilon = 1e-9);
        let e = std::f64::consts::E;
        assert_abs_diff_eq!(log_energy_entropy(&[e, e]), 4.0, epsilon = 1e-9);
    }

    // ---- Hjorth ----

    #[test]
    fn hjorth_sine_mobility_matches_identity() {
        let x = sine(10.0, 250.0, 5000);
        let (_, mobility, complexity) = hjorth(&x).unwrap();
        let expect = 2.0 * (PI * 10.0 / 250.0).sin();
        assert_relative_eq!(mobility, expect, max_relative = 0.02);
        assert_relative_eq!(complexity, 1.0, max_relative = 0.02);
    }

    #[test]
    fn hjorth_white_noise_complexity_exceeds_one() {
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..512)
                .map(|_| {
                    let u1: f64 = rng.gen_range(1e-12..1.0);
                    let u2: f64 = rng.gen_range(0.0..1.0);
                    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
                })
                .collect();
            let (_, _, complexity) = hjorth(&x).unwrap();
            assert!(complexity > 1.0, "seed {seed}: complexity {complexity}");
        }
    }

    #[test]
    fn hjorth_rejects_degenerate() {
        assert!(hjorth(&[2.0; 16]).is_err());
        assert!(hjorth(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn hjorth_activity_is_variance_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f64> = (0..257).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let (activity, _, _) = hjorth(&x).unwrap();
        let (variance, _, _, _) = temporal_stats(&x).unwrap();
        assert_eq!(activity.to_bits(), variance.to_bits());
    }

    // ---- histogram and JS ----

    #[test]
    fn histogram_all_at_lo() {
        let h = histogram(&[1.0; 10], 4, (1.0, 5.0)).unwrap();
        assert_eq!(h.mass[0], 1.0);
        assert_eq!(h.mass[1..], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn histogram_uniform_grid() {
        // 32 values evenly spread over [0, 8) with 8 bins dividing evenly
        let values: Vec<f64> = (0..32).map(|i| i as f64 / 4.0).collect();
        let h = histogram(&values, 8, (0.0, 8.0)).unwrap();
        for m in &h.mass {
            assert_abs_diff_eq!(*m, 0.125, epsilon = 1.0 / 32.0);
        }
    }

    #[test]
    fn histogram_clamps_above_hi() {
        let h = histogram(&[99.0], 4, (0.0, 1.0)).unwrap();
        assert_eq!(h.mass[3], 1.0);
    }

    #[test]
    fn histogram_rejects_bad_input() {
        assert!(histogram(&[], 4, (0.0, 1.0)).is_err());
        assert!(histogram(&[1.0], 1, (0.0, 1.0)).is_err());
        assert!(histogram(&[1.0], 4, (1.0, 0.0)).is_err());
    }

    #[test]
    fn js_identical_zero() {
        let h = histogram(&[0.1, 0.4, 0.9], 8, (0.0, 1.0)).unwrap();
        assert_eq!(js_divergence(&h, &h).unwrap(), 0.0);
    }

    #[test]
    fn js_disjoint_one() {
        let p = histogram(&[0.1; 5], 2, (0.0, 1.0)).unwrap();
        let q = histogram(&[0.9; 5], 2, (0.0, 1.0)).unwrap();
        assert_abs_diff_eq!(js_divergence(&p, &q).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn js_hand_value() {
        let p = Histogram {
            bin_edges: vec![0.0, 0.5, 1.0],
            mass: vec![1.0, 0.0],
        };
        let q = Histogram {
            bin_edges: vec![0.0, 0.5, 1.0],
            mass: vec![0.5, 0.5],
        };
        let expect = 0.5 * (4.0f64 / 3.0).log2()
            + 0.5 * (0.5 * (2.0f64 / 3.0).log2() + 0.5 * (2.0f64).log2());
        assert_abs_diff_eq!(js_divergence(&p, &q).unwrap(), expect, epsilon = 1e-12);
        assert_abs_diff_eq!(js_divergence(&p, &q).unwrap(), 0.311278, epsilon = 1e-6);
    }

    #[test]
    fn js_mismatched_edges_rejected() {
        let p = histogram(&[0.1], 2, (0.0, 1.0)).unwrap();
        let q = histogram(&[0.1], 2, (0.0, 2.0)).unwrap();
        assert!(js_divergence(&p, &q).is_err());
    }

    // ---- Welch ----

    #[test]
    fn welch_peak_at_tone() {
        let x = sine(10.0, 250.0, 1024);
        let (freqs, psd) = welch_psd(&x, 250.0).unwrap();
        let peak = psd
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let df = 250.0 / WELCH_NFFT as f64;
        assert!(
            (freqs[peak] - 10.0).abs() <= df,
            "peak at {} Hz",
            freqs[peak]
        );
    }

    #[test]
    fn welch_integrated_power() {
        let x = sine(10.0, 250.0, 1024);
        let (_, psd) = welch_psd(&x, 250.0).unwrap();
        let df = 250.0 / WELCH_NFFT as f64;
        let total: f64 = psd.iter().map(|d| d * df).sum();
        assert_relative_eq!(total, 0.5, max_relative = 0.05);
    }

    #[test]
    fn welch_zero_signal() {
        let (_, psd) = welch_psd(&[0.0; 256], 250.0).unwrap();
        assert!(psd.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn welch_too_short_rejected() {
        assert!(welch_psd(&[0.0; 100], 250.0).is_err());
    }

    // ---- band proportions ----

    #[test]
    fn band_proportions_alpha_tone() {
        let x = sine(10.0, 250.0, 1024);
        let bp = band_proportions(&x, 250.0).unwrap();
        assert!(bp.alpha >= 0.9, "alpha {}", bp.alpha);
    }

    #[test]
    fn band_proportions_delta_tone() {
        let x = sine(2.0, 250.0, 1024);
        let bp = band_proportions(&x, 250.0).unwrap();
        assert!(bp.delta >= 0.9, "delta {}", bp.delta);
    }

    #[test]
    fn band_proportions_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let x: Vec<f64> = (0..512).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bp = band_proportions(&x, 250.0).unwrap();
            assert_abs_diff_eq!(bp.as_array().iter().sum::<f64>(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn band_proportions_equal_power_pair() {
        let a = sine(2.0, 250.0, 2048);
        let b = sine(20.0, 250.0, 2048);
        let x: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u + v).collect();
        let bp = band_proportions(&x, 250.0).unwrap();
        let ratio = bp.delta / bp.beta;
        assert!(
            (ratio - 1.0).abs() < 0.15,
            "delta {} beta {} ratio {ratio}",
            bp.delta,
            bp.beta
        );
    }

    #[test]
    fn synth_class_asymmetry_detectable() {
        let mut hits = [0usize; 2];
        for seed in 0..100 {
            for class in 0..2usize {
                let e = crate::signal::synth_mi_epoch(class, 4, 256, 250.0, seed).unwrap();
                let a = welch_band_power(e.channel(0), 250.0, 8.0, 13.0).unwrap();
                let b = welch_band_power(e.channel(1), 250.0, 8.0, 13.0).unwrap();
                let dominant_first = a > b;
                if dominant_first == (class == 0) {
                    hits[class] += 1;
                }
            }
        }
        assert!(hits[0] >= 95, "class 0 asymmetry hits: {}", hits[0]);
        assert!(hits[1] >= 95, "class 1 asymmetry hits: {}", hits[1]);
    }

    // ---- CWT ----

    #[test]
    fn cwt_ridge_at_tone() {
        let x = sine(10.0, 250.0, 512);
        let freqs: Vec<f64> = (1..=40).map(|f| f as f64).collect();
        let sg = cwt_morlet(&x, 250.0, &freqs).unwrap();
        for tau in 128..384 {
            let ridge = (0..freqs.len())
                .max_by(|&a, &b| sg.row(a)[tau].partial_cmp(&sg.row(b)[tau]).unwrap())
                .unwrap();
            assert!(
                (freqs[ridge] - 10.0).abs() <= 1.0,
                "tau {tau}: ridge at {} Hz",
                freqs[ridge]
            );
        }
    }

    #[test]
    fn cwt_zero_signal() {
        let sg = cwt_morlet(&[0.0; 256], 250.0, &[5.0, 10.0]).unwrap();
        assert!(sg.magnitude.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cwt_chirp_ridge_monotone() {
        let fs = 250.0;
        let n = 1024;
        // linear chirp 5 -> 20 Hz
        let x: Vec<f64> = (0..n)
            .map(|s| {
                let t = s as f64 / fs;
                let dur = n as f64 / fs;
                let k = (20.0 - 5.0) / dur;
                (2.0 * PI * (5.0 * t + 0.5 * k * t * t)).sin()
            })
            .collect();
        let freqs: Vec<f64> = (1..=40).map(|f| f as f64).collect();
        let sg = cwt_morlet(&x, fs, &freqs).unwrap();
        let mut last = 0.0;
        for tau in (n / 4..3 * n / 4).step_by(32) {
            let ridge = (0..freqs.len())
                .max_by(|&a, &b| sg.row(a)[tau].partial_cmp(&sg.row(b)[tau]).unwrap())
                .unwrap();
            let f = freqs[ridge];
            assert!(
                f + 1e-9 >= last,
                "ridge not monotone: {f} Hz after {last} Hz at tau {tau}"
            );
            last = f;
        }
        assert!(last > 10.0, "chirp ridge should climb, ended at {last}");
    }

    /// Brute-force inner-product oracle cross-checking the FFT convolution.
    #[test]
    fn cwt_matches_naive_inner_product() {
        let x = sine(8.0, 250.0, 200);
        let freqs = [4.0, 8.0, 16.0];
        let sg = cwt_morlet(&x, 250.0, &freqs).unwrap();
        for (fi, &f) in freqs.iter().enumerate() {
            let scale = MORLET_W0 * 250.0 / (2.0 * PI * f);
            let half = (4.0 * scale).ceil() as isize;
            let norm = PI.powf(-0.25) / scale.sqrt();
            for &tau in &[30usize, 100, 170] {
                let (mut re, mut im) = (0.0, 0.0);
                for m in -half..=half {
                    let idx = tau as isize + m;
                    if idx < 0 || idx >= x.len() as isize {
                        continue;
                    }
                    let t = m as f64 / scale;
                    let env = norm * (-0.5 * t * t).exp();
                    // conjugated wavelet
                    re += x[idx as usize] * env * (MORLET_W0 * t).cos();
                    im -= x[idx as usize] * env * (MORLET_W0 * t).sin();
                }
                let expect = (re * re + im * im).sqrt();
                let got = sg.row(fi)[tau];
                assert_relative_eq!(got, expect, max_relative = 1e-9, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cwt_rejects_out_of_band() {
        assert!(cwt_morlet(&[0.0; 64], 250.0, &[200.0]).is_err());
        assert!(cwt_morlet(&[0.0; 64], 250.0, &[10.0, 5.0]).is_err());
    }

    // ---- exports ----

    #[test]
    fn psd_and_scalogram_csv_written() {
        let dir = tempfile::tempdir().unwrap();
        let x = sine(10.0, 250.0, 256);
        let (freqs, psd) = welch_psd(&x, 250.0).unwrap();
        let p = dir.path().join("psd.csv");
        write_psd_csv(&p, &freqs, &psd, "digest=test").unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# digest=test\nfreq_hz,density\n"));
        assert_eq!(text.lines().count(), 2 + freqs.len());

        let sg = cwt_morlet(&x, 250.0, &[5.0, 10.0]).unwrap();
        let s = dir.path().join("sg.csv");
        write_scalogram_csv(&s, &sg, "").unwrap();
        let text = std::fs::read_to_string(&s).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap().split(',').count(), 257);
    }

    // ---- property tests ----

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn entropies_scale_invariant(
            seed in 0u64..1000,
            c in prop_oneof![(-100.0f64..-0.01), (0.01f64..100.0)],
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xs: Vec<f64> = x.iter().map(|v| c * v).collect();
            prop_assert!((shannon_entropy(&x).unwrap() - shannon_entropy(&xs).unwrap()).abs() < 1e-9);
            prop_assert!((renyi_entropy(&x, 2.0).unwrap() - renyi_entropy(&xs, 2.0).unwrap()).abs() < 1e-9);
            prop_assert!((tsallis_entropy(&x, 2.0).unwrap() - tsallis_entropy(&xs, 2.0).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn js_symmetric_and_bounded(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p = histogram(&a, 16, (-2.0, 2.0)).unwrap();
            let q = histogram(&b, 16, (-2.0, 2.0)).unwrap();
            let pq = js_divergence(&p, &q).unwrap();
            let qp = js_divergence(&q, &p).unwrap();
            prop_assert_eq!(pq.to_bits(), qp.to_bits());
            prop_assert!((0.0..=1.0).contains(&pq));
        }

        #[test]
        fn scalogram_sign_flip_invariant(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..128).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let neg: Vec<f64> = x.iter().map(|v| -v).collect();
            let a = cwt_morlet(&x, 250.0, &[8.0, 16.0]).unwrap();
            let b = cwt_morlet(&neg, 250.0, &[8.0, 16.0]).unwrap();
            for (u, v) in a.magnitude.iter().zip(&b.magnitude) {
                prop_assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
            }
        }
    }
}
