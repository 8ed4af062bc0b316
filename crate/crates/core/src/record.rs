//! Waveform data model: records, crops and signal/noise power accounting.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Channel-major 2-D array of samples (millivolts).
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    n_channels: usize,
    n_timesteps: usize,
    data: Vec<f64>,
}

impl Waveform {
    pub fn new(n_channels: usize, n_timesteps: usize, data: Vec<f64>) -> Result<Self> {
        if n_channels == 0 || n_timesteps == 0 {
            return Err(Error::invalid(format!(
                "waveform needs at least one channel and one timestep, got {n_channels}x{n_timesteps}"
            )));
        }
        if data.len() != n_channels * n_timesteps {
            return Err(Error::shape(
                "Waveform::new",
                format!("{} values for {n_channels}x{n_timesteps}", data.len()),
            ));
        }
        Ok(Self {
            n_channels,
            n_timesteps,
            data,
        })
    }

    pub fn zeros(n_channels: usize, n_timesteps: usize) -> Self {
        Self {
            n_channels,
            n_timesteps,
            data: vec![0.0; n_channels * n_timesteps],
        }
    }

    pub fn from_channels(channels: &[Vec<f64>]) -> Result<Self> {
        let n_t = channels.first().map_or(0, Vec::len);
        if channels.iter().any(|c| c.len() != n_t) {
            return Err(Error::shape("Waveform::from_channels", "ragged channels"));
        }
        Self::new(channels.len(), n_t, channels.concat())
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_timesteps(&self) -> usize {
        self.n_timesteps
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_channels, self.n_timesteps)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.n_timesteps..(c + 1) * self.n_timesteps]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let t = self.n_timesteps;
        &mut self.data[c * t..(c + 1) * t]
    }

    pub fn get(&self, c: usize, t: usize) -> f64 {
        self.data[c * self.n_timesteps + t]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sum of squares over all channels and timesteps.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Elementwise sum; shapes must agree.
    pub fn add(&self, other: &Waveform) -> Result<Waveform> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                "Waveform::add",
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Waveform { data, ..*self })
    }

    /// Copies `len` timesteps starting at `offset`, zero-padding on the right
    /// past the end.
    pub fn window(&self, offset: usize, len: usize) -> Waveform {
        let mut out = Waveform::zeros(self.n_channels, len);
        let avail = self.n_timesteps.saturating_sub(offset).min(len);
        for c in 0..self.n_channels {
            out.channel_mut(c)[..avail].copy_from_slice(&self.channel(c)[offset..offset + avail]);
        }
        out
    }

    /// Per-channel z-score. Constant channels are centered only.
    pub fn zscore_channels(&mut self) {
        let n = self.n_timesteps as f64;
        for c in 0..self.n_channels {
            let ch = self.channel_mut(c);
            let mean = ch.iter().sum::<f64>() / n;
            let var = ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            for v in ch.iter_mut() {
                *v -= mean;
                if sd > 0.0 {
                    *v /= sd;
                }
            }
        }
    }

    /// Time-major copy, `[t][c]` flattened.
    pub fn to_time_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        for c in 0..self.n_channels {
            for (t, v) in self.channel(c).iter().enumerate() {
                out[t * self.n_channels + c] = *v;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    names: Vec<String>,
}

impl LabelSpace {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::invalid(
                "label space must contain at least one label",
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::invalid(format!("duplicate label name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub id: String,
    pub samples: Waveform,
    pub fs: f64,
    /// Sorted, deduplicated label indices.
    pub labels: Vec<usize>,
}

impl EcgRecord {
    pub fn new(
        id: impl Into<String>,
        samples: Waveform,
        fs: f64,
        mut labels: Vec<usize>,
    ) -> Result<Self> {
        let id = id.into();
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(Error::invalid(format!(
                "record `{id}`: sampling rate must be positive, got {fs}"
            )));
        }
        if !samples.is_finite() {
            return Err(Error::invalid(format!(
                "record `{id}` contains non-finite samples"
            )));
        }
        labels.sort_unstable();
        labels.dedup();
        Ok(Self {
            id,
            samples,
            fs,
            labels,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.samples.n_channels()
    }

    pub fn n_timesteps(&self) -> usize {
        self.samples.n_timesteps()
    }

    pub fn duration_s(&self) -> f64 {
        self.n_timesteps() as f64 / self.fs
    }

    pub fn check_labels(&self, space: &LabelSpace) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= space.len()) {
            Some(l) => Err(Error::invalid(format!(
                "record `{}`: label index {l} outside label space of size {}",
                self.id,
                space.len()
            ))),
            None => Ok(()),
        }
    }

    /// Multi-hot target vector over `n_labels`.
    pub fn multi_hot(&self, n_labels: usize) -> Vec<f64> {
        let mut v = vec![0.0; n_labels];
        for &l in &self.labels {
            if l < n_labels {
                v[l] = 1.0;
            }
        }
        v
    }

    /// The whole record viewed as one segment.
    pub fn as_segment(&self) -> Segment {
        Segment {
            samples: self.samples.clone(),
            fs: self.fs,
            source_id: self.id.clone(),
            source_offset: 0,
            padded: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub samples: Waveform,
    pub fs: f64,
    pub source_id: String,
    pub source_offset: usize,
    pub padded: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.samples.n_timesteps()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.samples.n_channels()
    }

    /// Same metadata, new samples.
    pub fn with_samples(&self, samples: Waveform) -> Segment {
        Segment {
            samples,
            fs: self.fs,
            source_id: self.source_id.clone(),
            source_offset: self.source_offset,
            padded: self.padded,
        }
    }
}

/// Window length in timesteps for a duration in seconds.
pub fn window_len(len_s: f64, fs: f64) -> Result<usize> {
    if !(len_s > 0.0 && len_s.is_finite()) {
        return Err(Error::invalid(format!(
            "crop length must be positive, got {len_s} s"
        )));
    }
    let n = (len_s * fs).round();
    if n < 1.0 {
        return Err(Error::invalid(format!(
            "crop length {len_s} s at {fs} Hz is shorter than one sample"
        )));
    }
    Ok(n as usize)
}

/// Random contiguous crop of `round(len_s * fs)` timesteps, offset uniform over
/// all valid positions. Shorter records are zero-padded on the right.
pub fn random_crop(record: &EcgRecord, len_s: f64, rng: &mut Rng) -> Result<Segment> {
    let len = window_len(len_s, record.fs)?;
    let n = record.n_timesteps();
    let (offset, padded) = if n >= len {
        (rng.gen_range(0..=n - len), false)
    } else {
        (0, true)
    };
    Ok(Segment {
        samples: record.samples.window(offset, len),
        fs: record.fs,
        source_id: record.id.clone(),
        source_offset: offset,
        padded,
    })
}

/// All consecutive non-overlapping windows starting at index 0; the tail is
/// dropped. A record shorter than one window yields a single padded segment.
pub fn nonoverlapping_crops(record: &EcgRecord, len_s: f64) -> Result<Vec<Segment>> {
    let len = window_len(len_s, record.fs)?;
    let n = record.n_timesteps();
    let count = n / len;
    if count == 0 {
        return Ok(vec![Segment {
            samples: record.samples.window(0, len),
            fs: record.fs,
            source_id: record.id.clone(),
            source_offset: 0,
            padded: true,
        }]);
    }
    Ok((0..count)
        .map(|i| Segment {
            samples: record.samples.window(i * len, len),
            fs: record.fs,
            source_id: record.id.clone(),
            source_offset: i * len,
            padded: false,
        })
        .collect())
}

/// Signal-to-noise ratio in decibels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrDb {
    pub value: f64,
    /// Set when the noise has zero power; `value` is then `+inf`.
    pub noise_free: bool,
}

/// `10 log10(sum signal^2 / sum noise^2)` over all channels and timesteps.
pub fn snr_db(signal: &Waveform, noise: &Waveform) -> Result<SnrDb> {
    if signal.shape() != noise.shape() {
        return Err(Error::shape(
            "snr_db",
            format!("signal {:?} vs noise {:?}", signal.shape(), noise.shape()),
        ));
    }
    let ps = signal.energy();
    if ps <= 0.0 {
        return Err(Error::invalid("signal has zero power"));
    }
    let pn = noise.energy();
    if pn <= 0.0 {
        return Ok(SnrDb {
            value: f64::INFINITY,
            noise_free: true,
        });
    }
    Ok(SnrDb {
        value: 10.0 * (ps / pn).log10(),
        noise_free: false,
    })
}
