//! Physiological noise models for ECG: baseline wander, powerline
//! interference, electromyographic noise and baseline shift, plus their
//! superposition and the six-level intensity ladder used for robustness
//! benchmarks.

use std::f64::consts::PI;

use rand::{Rng as _, RngCore};
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record::{Segment, Waveform};
use crate::rng::{seeded, Rng};

/// How `c_max_emn` parameterizes the EMG Gaussian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmgScale {
    /// `c_max_emn` is the variance.
    #[default]
    Variance,
    /// `c_max_emn` is the standard deviation.
    StdDev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhysioParams {
    pub c_max_blw: f64,
    pub c_max_pln: f64,
    pub c_max_emn: f64,
    pub c_max_bls: f64,
    /// Baseline wander frequency spacing (Hz).
    pub delta_f: f64,
    /// Baseline wander cutoff (Hz).
    pub f_c: f64,
    /// Explicit baseline wander component count; `round(f_c / delta_f)` when unset.
    pub k_blw: Option<usize>,
    /// Powerline frequency (Hz).
    pub f_n: f64,
    pub k_pln: usize,
    /// Expected baseline shift segments per second.
    pub bls_max: f64,
    /// Mean baseline shift segment length (s).
    pub bls_len_mean: f64,
    pub emg_scale: EmgScale,
}

impl Default for PhysioParams {
    fn default() -> Self {
        Self::pretraining()
    }
}

impl PhysioParams {
    /// Amplitudes used when physiological noise serves as a pretraining view.
    pub fn pretraining() -> Self {
        Self::with_amplitudes(0.1, 0.2, 0.5, 1.0)
    }

    pub fn with_amplitudes(blw: f64, pln: f64, emn: f64, bls: f64) -> Self {
        Self {
            c_max_blw: blw,
            c_max_pln: pln,
            c_max_emn: emn,
            c_max_bls: bls,
            delta_f: 0.01,
            f_c: 0.05,
            k_blw: None,
            f_n: 50.0,
            k_pln: 3,
            bls_max: 0.3,
            bls_len_mean: 3.0,
            emg_scale: EmgScale::Variance,
        }
    }

    pub fn silent() -> Self {
        Self::with_amplitudes(0.0, 0.0, 0.0, 0.0)
    }

    pub fn k_blw(&self) -> usize {
        self.k_blw
            .unwrap_or_else(|| (self.f_c / self.delta_f).round() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let bad =
            |key: &str, msg: &str| Err(Error::config(format!("physio.{key}"), msg.to_string()));
        for (key, v) in [
            ("c_max_blw", self.c_max_blw),
            ("c_max_pln", self.c_max_pln),
            ("c_max_emn", self.c_max_emn),
            ("c_max_bls", self.c_max_bls),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(key, "amplitude scale must be finite and >= 0");
            }
        }
        if !(self.delta_f > 0.0) {
            return bad("delta_f", "must be > 0");
        }
        if !(self.f_n > 0.0) {
            return bad("f_n", "must be > 0");
        }
        if self.k_pln < 1 {
            return bad("k_pln", "must be >= 1");
        }
        if !(self.bls_max >= 0.0) {
            return bad("bls_max", "must be >= 0");
        }
        if !(self.bls_len_mean > 0.0) {
            return bad("bls_len_mean", "must be > 0");
        }
        Ok(())
    }
}

/// Row of the noise-level ladder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub level: u8,
    pub c_max_blw: f64,
    pub c_max_pln: f64,
    pub c_max_emn: f64,
    pub c_max_bls: f64,
}

const LADDER: [(f64, f64, f64, f64); 6] = [
    (0.05, 0.25, 0.1, 0.5),
    (0.1, 0.5, 0.2, 1.0),
    (0.1, 1.0, 0.2, 2.0),
    (0.2, 1.0, 0.4, 2.0),
    (0.2, 1.5, 0.4, 2.5),
    (0.3, 2.0, 0.5, 3.0),
];

impl NoiseLevel {
    pub fn new(level: u8) -> Result<Self> {
        let (blw, pln, emn, bls) =
            *LADDER
                .get(usize::from(level).wrapping_sub(1))
                .ok_or_else(|| {
                    Error::invalid(format!("unknown noise level {level}, expected 1..=6"))
                })?;
        Ok(Self {
            level,
            c_max_blw: blw,
            c_max_pln: pln,
            c_max_emn: emn,
            c_max_bls: bls,
        })
    }

    pub fn all() -> Vec<NoiseLevel> {
        (1..=6)
            .map(|l| NoiseLevel::new(l).expect("ladder level"))
            .collect()
    }

    pub fn params(&self) -> PhysioParams {
        PhysioParams::with_amplitudes(
            self.c_max_blw,
            self.c_max_pln,
            self.c_max_emn,
            self.c_max_bls,
        )
    }
}

/// Standard-normal magnitude with a fair-coin sign.
fn signed_half_normal(rng: &mut Rng) -> f64 {
    let m: f64 = StandardNormal.sample(rng);
    let m = m.abs();
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

/// Broadcasts one temporal waveform across channels with per-channel gains.
fn outer(gains: &[f64], temporal: &[f64]) -> Waveform {
    let mut out = Waveform::zeros(gains.len(), temporal.len());
    for (c, g) in gains.iter().enumerate() {
        for (d, s) in out.channel_mut(c).iter_mut().zip(temporal) {
            *d = g * s;
        }
    }
    out
}

fn sinusoid_sum(n_t: usize, fs: f64, amps: &[f64], freqs: &[f64], phases: &[f64]) -> Vec<f64> {
    (0..n_t)
        .map(|i| {
            let t = i as f64 / fs;
            amps.iter()
                .zip(freqs)
                .zip(phases)
                .map(|((a, f), p)| a * (2.0 * PI * t * f + p).cos())
                .sum()
        })
        .collect()
}

/// `n(t)_i = C c_i sum_k a_k cos(2 pi t k delta_f + phi_k)`.
pub fn baseline_wander(
    n_channels: usize,
    n_t: usize,
    fs: f64,
    params: &PhysioParams,
    rng: &mut Rng,
) -> Waveform {
    if params.c_max_blw == 0.0 {
        return Waveform::zeros(n_channels, n_t);
    }
    let k = params.k_blw();
    let scale: f64 = rng.gen_range(0.0..=params.c_max_blw);
    let amps: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let phases: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let freqs: Vec<f64> = (1..=k).map(|j| j as f64 * params.delta_f).collect();
    let gains: Vec<f64> = (0..n_channels)
        .map(|_| scale * signed_half_normal(rng))
        .collect();
    outer(&gains, &sinusoid_sum(n_t, fs, &amps, &freqs, &phases))
}

/// `n(t)_i = C c_i sum_k a_k cos(2 pi t k f_n + phi_1)` with one phase shared by
/// all harmonics and `c_i ~ U[-1, 1]`.
pub fn powerline_noise(
    n_channels: usize,
    n_t: usize,
    fs: f64,
    params: &PhysioParams,
    rng: &mut Rng,
) -> Waveform {
    if params.c_max_pln == 0.0 {
        return Waveform::zeros(n_channels, n_t);
    }
    let k = params.k_pln;
    let scale: f64 = rng.gen_range(0.0..=params.c_max_pln);
    let amps: Vec<f64> = (0..k).map(|_| rng.gen_range(0.0..=1.0)).collect();
    let phase: f64 = rng.gen_range(0.0..2.0 * PI);
    let freqs: Vec<f64> = (1..=k).map(|j| j as f64 * params.f_n).collect();
    let gains: Vec<f64> = (0..n_channels)
        .map(|_| scale * rng.gen_range(-1.0..=1.0))
        .collect();
    outer(
        &gains,
        &sinusoid_sum(n_t, fs, &amps, &freqs, &vec![phase; k]),
    )
}

/// Independent zero-mean Gaussian samples per channel and timestep.
pub fn emg_noise(n_channels: usize, n_t: usize, params: &PhysioParams, rng: &mut Rng) -> Waveform {
    if params.c_max_emn == 0.0 {
        return Waveform::zeros(n_channels, n_t);
    }
    let sd = match params.emg_scale {
        EmgScale::Variance => params.c_max_emn.sqrt(),
        EmgScale::StdDev => params.c_max_emn,
    };
    let normal = Normal::new(0.0, sd).expect("finite emg scale");
    let data = (0..n_channels * n_t).map(|_| normal.sample(rng)).collect();
    Waveform::new(n_channels, n_t, data).expect("shape matches")
}

/// Sampled step function underlying baseline shift.
#[derive(Debug, Clone, PartialEq)]
pub struct StepFunction {
    pub values: Vec<f64>,
    /// `(offset, length, amplitude)` per step.
    pub steps: Vec<(usize, usize, f64)>,
}

/// Draws `swf(t)`: a random number of overlapping, additive unit-range steps.
pub fn sample_step_function(
    n_t: usize,
    fs: f64,
    params: &PhysioParams,
    rng: &mut Rng,
) -> StepFunction {
    let max_segments = (params.bls_max * n_t as f64 / fs).ceil().max(0.0) as usize;
    let n_seg = rng.gen_range(0..=max_segments);
    let mean = fs * params.bls_len_mean;
    let len_dist = Normal::new(mean, 0.2 * mean).expect("positive step length");
    let mut values = vec![0.0; n_t];
    let mut steps = Vec::with_capacity(n_seg);
    for _ in 0..n_seg {
        let len = (len_dist.sample(rng).round()).clamp(1.0, n_t as f64) as usize;
        let offset = rng.gen_range(0..=n_t - len);
        let amp: f64 = rng.gen_range(0.0..=1.0);
        for v in &mut values[offset..offset + len] {
            *v += amp;
        }
        steps.push((offset, len, amp));
    }
    StepFunction { values, steps }
}

/// `n(t)_i = C c_i swf(t)`.
pub fn baseline_shift(
    n_channels: usize,
    n_t: usize,
    fs: f64,
    params: &PhysioParams,
    rng: &mut Rng,
) -> Waveform {
    baseline_shift_with_steps(n_channels, n_t, fs, params, rng).0
}

pub fn baseline_shift_with_steps(
    n_channels: usize,
    n_t: usize,
    fs: f64,
    params: &PhysioParams,
    rng: &mut Rng,
) -> (Waveform, StepFunction) {
    if params.c_max_bls == 0.0 {
        let empty = StepFunction {
            values: vec![0.0; n_t],
            steps: Vec::new(),
        };
        return (Waveform::zeros(n_channels, n_t), empty);
    }
    let swf = sample_step_function(n_t, fs, params, rng);
    let scale: f64 = rng.gen_range(0.0..=params.c_max_bls);
    let gains: Vec<f64> = (0..n_channels)
        .map(|_| scale * signed_half_normal(rng))
        .collect();
    (outer(&gains, &swf.values), swf)
}

/// The four noise components of one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseComponents {
    pub baseline_wander: Waveform,
    pub powerline: Waveform,
    pub emg: Waveform,
    pub baseline_shift: Waveform,
}

impl NoiseComponents {
    /// Generates all four components from independent child streams.
    pub fn sample(
        n_channels: usize,
        n_t: usize,
        fs: f64,
        params: &PhysioParams,
        rng: &mut Rng,
    ) -> Result<Self> {
        params.validate()?;
        let mut child = || seeded(rng.next_u64());
        let (mut r1, mut r2, mut r3, mut r4) = (child(), child(), child(), child());
        Ok(Self {
            baseline_wander: baseline_wander(n_channels, n_t, fs, params, &mut r1),
            powerline: powerline_noise(n_channels, n_t, fs, params, &mut r2),
            emg: emg_noise(n_channels, n_t, params, &mut r3),
            baseline_shift: baseline_shift(n_channels, n_t, fs, params, &mut r4),
        })
    }

    /// `blw + pln + emn + bls`, summed in that order.
    pub fn total(&self) -> Waveform {
        let mut out = self.baseline_wander.clone();
        for part in [&self.powerline, &self.emg, &self.baseline_shift] {
            for (o, v) in out.data_mut().iter_mut().zip(part.data()) {
                *o += v;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysioOutcome {
    pub segment: Segment,
    /// `output - input`, elementwise.
    pub noise: Waveform,
    pub components: NoiseComponents,
}

/// Superimposes all four noise types on a segment.
pub fn apply_physio_noise(
    seg: &Segment,
    params: &PhysioParams,
    rng: &mut Rng,
) -> Result<PhysioOutcome> {
    let components = NoiseComponents::sample(seg.n_channels(), seg.len(), seg.fs, params, rng)?;
    let out = seg.samples.add(&components.total())?;
    let noise_data = out
        .data()
        .iter()
        .zip(seg.samples.data())
        .map(|(o, i)| o - i)
        .collect();
    let noise = Waveform::new(out.n_channels(), out.n_timesteps(), noise_data)?;
    Ok(PhysioOutcome {
        segment: seg.with_samples(out),
        noise,
        components,
    })
}

/// Applies a ladder level (1..=6).
pub fn apply_noise_level(seg: &Segment, level: u8, rng: &mut Rng) -> Result<PhysioOutcome> {
    apply_physio_noise(seg, &NoiseLevel::new(level)?.params(), rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    #[test]
    fn ladder_rows() {
        let l2 = NoiseLevel::new(2).unwrap();
        assert_eq!(
            (l2.c_max_blw, l2.c_max_pln, l2.c_max_emn, l2.c_max_bls),
            (0.1, 0.5, 0.2, 1.0)
        );
        let l6 = NoiseLevel::new(6).unwrap();
        assert_eq!(
            (l6.c_max_blw, l6.c_max_pln, l6.c_max_emn, l6.c_max_bls),
            (0.3, 2.0, 0.5, 3.0)
        );
        assert!(NoiseLevel::new(0).is_err());
        assert!(NoiseLevel::new(7).is_err());
        assert_eq!(PhysioParams::default().k_blw(), 5);
    }

    #[test]
    fn zero_amplitudes_give_exact_zeros() {
        let p = PhysioParams::silent();
        let mut rng = seeded(1);
        for w in [
            baseline_wander(3, 100, 100.0, &p, &mut rng),
            powerline_noise(3, 100, 100.0, &p, &mut rng),
            emg_noise(3, 100, &p, &mut rng),
            baseline_shift(3, 100, 100.0, &p, &mut rng),
        ] {
            assert!(w.data().iter().all(|v| v.to_bits() == 0));
        }
    }

    #[test]
    fn baseline_wander_is_low_frequency() {
        // 200 s is two full periods of the 0.01 Hz fundamental, so no leakage
        let n = 20_000;
        let w = baseline_wander(1, n, 100.0, &PhysioParams::pretraining(), &mut seeded(3));
        let mut buf: Vec<Complex<f64>> =
            w.channel(0).iter().map(|&v| Complex::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let total: f64 = buf.iter().map(|c| c.norm_sqr()).sum();
        // bin k has frequency k * 100 / n = k / 200 Hz
        let high: f64 = buf
            .iter()
            .enumerate()
            .filter(|(k, _)| {
                let f = (*k).min(n - *k) as f64 / 200.0;
                f > 0.1
            })
            .map(|(_, c)| c.norm_sqr())
            .sum();
        assert!(total > 0.0);
        assert!(high < 1e-6 * total, "high {high} total {total}");
    }

    fn assert_rank_one(w: &Waveform) {
        let base = w.channel(0);
        let pivot = base
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
            .unwrap()
            .0;
        for c in 1..w.n_channels() {
            let ratio = w.get(c, pivot) / base[pivot];
            for (a, b) in w.channel(c).iter().zip(base) {
                assert!((a - ratio * b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shared_temporal_waveforms() {
        let p = PhysioParams::pretraining();
        assert_rank_one(&baseline_wander(4, 500, 100.0, &p, &mut seeded(5)));
        assert_rank_one(&powerline_noise(4, 500, 100.0, &p, &mut seeded(5)));
    }

    #[test]
    fn powerline_aliases_to_nyquist() {
        let p = PhysioParams {
            k_pln: 1,
            ..PhysioParams::pretraining()
        };
        let w = powerline_noise(2, 400, 100.0, &p, &mut seeded(8));
        for c in 0..2 {
            let x = w.channel(c);
            // cos(pi n + phi) = (-1)^n cos(phi)
            for i in 0..398 {
                assert!((x[i + 2] - x[i]).abs() < 1e-9);
                assert!((x[i + 1] + x[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn emg_moments_and_independence() {
        let p = PhysioParams::with_amplitudes(0.0, 0.0, 0.2, 0.0);
        let n = 100_000;
        let w = emg_noise(2, n, &p, &mut seeded(4));
        let var = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let v0 = var(w.channel(0));
        // standard error of a variance estimate is sigma^2 sqrt(2 / n)
        assert!(
            (v0 - 0.2).abs() < 3.0 * 0.2 * (2.0 / n as f64).sqrt(),
            "var {v0}"
        );
        let cross: f64 = w
            .channel(0)
            .iter()
            .zip(w.channel(1))
            .map(|(a, b)| a * b)
            .sum::<f64>()
            / n as f64;
        let corr = cross / (v0 * var(w.channel(1))).sqrt();
        assert!(corr.abs() < 0.02);
        let sd = PhysioParams {
            emg_scale: EmgScale::StdDev,
            ..p
        };
        let w = emg_noise(1, n, &sd, &mut seeded(4));
        assert!((var(w.channel(0)) - 0.04).abs() < 3.0 * 0.04 * (2.0 / n as f64).sqrt());
    }

    #[test]
    fn baseline_shift_is_piecewise_constant() {
        let p = PhysioParams::pretraining();
        let mut saw_steps = false;
        for seed in 0..50 {
            let (w, swf) = baseline_shift_with_steps(3, 3000, 100.0, &p, &mut seeded(seed));
            saw_steps |= !swf.steps.is_empty();
            assert!(swf.steps.len() <= 9);
            for (off, len, amp) in &swf.steps {
                assert!(*len >= 1 && off + len <= 3000);
                assert!((0.0..=1.0).contains(amp));
            }
            for c in 0..3 {
                let jumps = w.channel(c).windows(2).filter(|d| d[1] != d[0]).count();
                assert!(jumps <= 2 * swf.steps.len());
            }
            if swf.steps.is_empty() {
                assert!(w.data().iter().all(|v| *v == 0.0));
            }
        }
        assert!(saw_steps);
    }

    #[test]
    fn superposition_is_additive() {
        let seg = Segment {
            samples: Waveform::new(2, 300, (0..600).map(|i| (i as f64 * 0.1).sin()).collect())
                .unwrap(),
            fs: 100.0,
            source_id: "x".into(),
            source_offset: 0,
            padded: false,
        };
        let out = apply_physio_noise(&seg, &NoiseLevel::new(3).unwrap().params(), &mut seeded(9))
            .unwrap();
        for ((o, i), n) in out
            .segment
            .samples
            .data()
            .iter()
            .zip(seg.samples.data())
            .zip(out.noise.data())
        {
            assert_eq!((o - i).to_bits(), n.to_bits());
        }
        let total = out.components.total();
        for ((t, n), o) in total
            .data()
            .iter()
            .zip(out.noise.data())
            .zip(out.segment.samples.data())
        {
            assert!((t - n).abs() <= 4.0 * f64::EPSILON * o.abs().max(1.0));
        }
        let silent = apply_physio_noise(&seg, &PhysioParams::silent(), &mut seeded(9)).unwrap();
        assert_eq!(silent.segment, seg);
        assert!(apply_noise_level(&seg, 9, &mut seeded(1)).is_err());
    }
}
