//! Dataset manifests and waveform files, fold splits, synthetic ECG fixtures
//! and the checkpoint container.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{Model, ModelSpec};
use crate::nn::{AdamW, AdamWConfig, LayerGroup, ParamKind, ParamStore, Tensor};
use crate::record::{EcgRecord, LabelSpace, Waveform};
use crate::rng::{derive, seeded, Rng};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;
pub const N_FOLDS: u8 = 10;
pub const VAL_FOLD: u8 = 9;
pub const TEST_FOLD: u8 = 10;
pub const DEFAULT_TRAIN_FOLDS: u8 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    /// Path of the waveform file, relative to the dataset directory.
    pub file: String,
    pub n_channels: usize,
    pub n_timesteps: usize,
    pub fs: f64,
    pub labels: Vec<usize>,
    pub fold: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub label_space: Vec<String>,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!(
                "manifest format_version {} is not supported (expected {MANIFEST_VERSION})",
                self.format_version
            )));
        }
        LabelSpace::new(self.label_space.clone())?;
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate record id `{}`", r.id)));
            }
            if !(1..=N_FOLDS).contains(&r.fold) {
                return Err(Error::Dataset(format!(
                    "record `{}`: fold {} outside 1..=10",
                    r.id, r.fold
                )));
            }
            if let Some(l) = r.labels.iter().find(|&&l| l >= self.label_space.len()) {
                return Err(Error::Dataset(format!(
                    "record `{}`: label index {l} outside label space",
                    r.id
                )));
            }
            if !(r.fs > 0.0 && r.fs.is_finite()) || r.n_timesteps == 0 || r.n_channels == 0 {
                return Err(Error::Dataset(format!(
                    "record `{}`: invalid shape or sampling rate",
                    r.id
                )));
            }
        }
        Ok(())
    }

    pub fn record(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// An in-memory labelled corpus with fold assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub labels: LabelSpace,
    pub records: Vec<EcgRecord>,
    pub folds: Vec<u8>,
}

impl Dataset {
    pub fn new(labels: LabelSpace, records: Vec<EcgRecord>, folds: Vec<u8>) -> Result<Self> {
        if records.len() != folds.len() {
            return Err(Error::Dataset("one fold per record required".into()));
        }
        for (r, &f) in records.iter().zip(&folds) {
            r.check_labels(&labels)?;
            if !(1..=N_FOLDS).contains(&f) {
                return Err(Error::Dataset(format!(
                    "record `{}`: fold {f} outside 1..=10",
                    r.id
                )));
            }
        }
        Ok(Self {
            labels,
            records,
            folds,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EcgRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Records with the given ids, in the order given.
    pub fn subset(&self, ids: &[String]) -> Result<Vec<&EcgRecord>> {
        let index: HashMap<&str, &EcgRecord> =
            self.records.iter().map(|r| (r.id.as_str(), r)).collect();
        ids.iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| Error::Dataset(format!("unknown record id `{id}`")))
            })
            .collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            format_version: MANIFEST_VERSION,
            label_space: self.labels.names().to_vec(),
            records: self
                .records
                .iter()
                .zip(&self.folds)
                .map(|(r, &fold)| ManifestRecord {
                    id: r.id.clone(),
                    file: format!("{}.f32", r.id),
                    n_channels: r.n_channels(),
                    n_timesteps: r.n_timesteps(),
                    fs: r.fs,
                    labels: r.labels.clone(),
                    fold,
                })
                .collect(),
        }
    }
}

/// A dataset directory whose records are read on demand.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl DatasetDir {
    pub fn load_record(&self, id: &str) -> Result<EcgRecord> {
        let m = self
            .manifest
            .record(id)
            .ok_or_else(|| Error::Dataset(format!("unknown record id `{id}`")))?;
        let path = self.root.join(&m.file);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingRecord {
                    id: id.to_string(),
                    path,
                });
            }
            Err(e) => return Err(Error::io(path, e)),
        };
        let want = m.n_channels * m.n_timesteps * 4;
        if bytes.len() != want {
            return Err(Error::Dataset(format!(
                "record `{id}`: file holds {} bytes, manifest shape [{}, {}] needs {want}",
                bytes.len(),
                m.n_channels,
                m.n_timesteps
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let samples = Waveform::new(m.n_channels, m.n_timesteps, data)?;
        EcgRecord::new(id, samples, m.fs, m.labels.clone())
    }

    pub fn load_all(&self) -> Result<Dataset> {
        let labels = LabelSpace::new(self.manifest.label_space.clone())?;
        let records = self
            .manifest
            .records
            .iter()
            .map(|r| self.load_record(&r.id))
            .collect::<Result<Vec<_>>>()?;
        let folds = self.manifest.records.iter().map(|r| r.fold).collect();
        Dataset::new(labels, records, folds)
    }
}

/// Opens a dataset directory and validates its manifest against the files.
pub fn load_dataset(dir: &Path) -> Result<DatasetDir> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    manifest.validate()?;
    for r in &manifest.records {
        let p = dir.join(&r.file);
        match fs::metadata(&p) {
            Ok(md) if md.len() as usize == r.n_channels * r.n_timesteps * 4 => {}
            Ok(md) => {
                return Err(Error::Dataset(format!(
                    "record `{}`: file holds {} bytes, manifest shape [{}, {}] needs {}",
                    r.id,
                    md.len(),
                    r.n_channels,
                    r.n_timesteps,
                    r.n_channels * r.n_timesteps * 4
                )));
            }
            Err(_) => {
                return Err(Error::MissingRecord {
                    id: r.id.clone(),
                    path: p,
                });
            }
        }
    }
    Ok(DatasetDir {
        root: dir.to_path_buf(),
        manifest,
    })
}

/// Writes `manifest.json` plus one little-endian f32 file per record.
/// Samples are narrowed to f32.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = ds.manifest();
    for (r, m) in ds.records.iter().zip(&manifest.records) {
        let mut bytes = Vec::with_capacity(r.samples.data().len() * 4);
        for &v in r.samples.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let p = dir.join(&m.file);
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Train on folds `1..=train_folds`, validate on fold 9, test on fold 10.
pub fn split_folds(ids: &[String], folds: &[u8], train_folds: u8) -> Result<Splits> {
    if !(1..=DEFAULT_TRAIN_FOLDS).contains(&train_folds) {
        return Err(Error::config(
            "folds",
            format!("training fold count must be in 1..=8, got {train_folds}"),
        ));
    }
    if ids.len() != folds.len() {
        return Err(Error::Dataset("one fold per record required".into()));
    }
    let pick = |keep: &dyn Fn(u8) -> bool| -> Vec<String> {
        ids.iter()
            .zip(folds)
            .filter(|(_, &f)| keep(f))
            .map(|(id, _)| id.clone())
            .collect()
    };
    let splits = Splits {
        train: pick(&|f| f >= 1 && f <= train_folds),
        val: pick(&|f| f == VAL_FOLD),
        test: pick(&|f| f == TEST_FOLD),
    };
    for (name, s) in [
        ("train", &splits.train),
        ("validation", &splits.val),
        ("test", &splits.test),
    ] {
        if s.is_empty() {
            return Err(Error::Dataset(format!("{name} split is empty")));
        }
    }
    Ok(splits)
}

pub fn split_dataset(ds: &Dataset, train_folds: u8) -> Result<Splits> {
    let ids: Vec<String> = ds.records.iter().map(|r| r.id.clone()).collect();
    split_folds(&ids, &ds.folds, train_folds)
}

/// Gaussian bump of a beat template, relative to the R peak.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub offset_s: f64,
    pub amplitude: f64,
    pub width_s: f64,
}

/// Label-dependent changes to the beat template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassMorph {
    pub name: String,
    /// Multiplies the widths of the Q, R and S waves.
    pub qrs_width_scale: f64,
    /// Added to the record's heart rate.
    pub hr_shift_bpm: f64,
    /// Multiplies the T-wave amplitude.
    pub t_scale: f64,
    /// Multiplies the P-wave amplitude.
    pub p_scale: f64,
}

impl Default for ClassMorph {
    fn default() -> Self {
        Self {
            name: "normal".into(),
            qrs_width_scale: 1.0,
            hr_shift_bpm: 0.0,
            t_scale: 1.0,
            p_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_records: usize,
    pub n_channels: usize,
    pub duration_s: f64,
    pub fs: f64,
    /// One label per class; each record gets exactly one class.
    pub classes: Vec<ClassMorph>,
    /// Scales every template wave; 0 gives flat records.
    pub amplitude: f64,
    pub hr_range_bpm: (f64, f64),
    /// Per-record multiplicative spread of the channel gains.
    pub gain_jitter: f64,
    /// Standard deviation of additive white measurement noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_records: 100,
            n_channels: 12,
            duration_s: 10.0,
            fs: 100.0,
            classes: vec![
                ClassMorph::default(),
                ClassMorph {
                    name: "wide_qrs".into(),
                    qrs_width_scale: 2.0,
                    ..Default::default()
                },
            ],
            amplitude: 1.0,
            hr_range_bpm: (50.0, 120.0),
            gain_jitter: 0.2,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

/// P, Q, R, S, T with a unit R wave.
pub fn base_template() -> [Wave; 5] {
    [
        Wave {
            offset_s: -0.2,
            amplitude: 0.15,
            width_s: 0.025,
        },
        Wave {
            offset_s: -0.035,
            amplitude: -0.12,
            width_s: 0.01,
        },
        Wave {
            offset_s: 0.0,
            amplitude: 1.0,
            width_s: 0.012,
        },
        Wave {
            offset_s: 0.035,
            amplitude: -0.25,
            width_s: 0.01,
        },
        Wave {
            offset_s: 0.3,
            amplitude: 0.3,
            width_s: 0.06,
        },
    ]
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_records == 0 || self.n_channels == 0 {
            return Err(Error::config(
                "synth",
                "need at least one record and one channel",
            ));
        }
        if !(self.fs > 0.0) || !(self.duration_s > 0.0) || (self.duration_s * self.fs).round() < 1.0
        {
            return Err(Error::config(
                "synth",
                "duration and sampling rate must give at least one sample",
            ));
        }
        if self.classes.is_empty() {
            return Err(Error::config("synth.classes", "need at least one class"));
        }
        let (lo, hi) = self.hr_range_bpm;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::config("synth.hr_range_bpm", "need 0 < low <= high"));
        }
        if self
            .classes
            .iter()
            .any(|c| !(c.qrs_width_scale > 0.0) || lo + c.hr_shift_bpm <= 0.0)
        {
            return Err(Error::config(
                "synth.classes",
                "widths must be positive and heart rates stay positive",
            ));
        }
        if !(self.noise_std >= 0.0) || !(self.gain_jitter >= 0.0) || !self.amplitude.is_finite() {
            return Err(Error::config(
                "synth",
                "noise, jitter and amplitude must be finite and non-negative",
            ));
        }
        Ok(())
    }

    /// Beat template of one class.
    pub fn template(&self, class: usize) -> [Wave; 5] {
        let m = &self.classes[class];
        let mut w = base_template();
        w[0].amplitude *= m.p_scale;
        for q in &mut w[1..4] {
            q.width_s *= m.qrs_width_scale;
        }
        w[4].amplitude *= m.t_scale;
        for x in &mut w {
            x.amplitude *= self.amplitude;
        }
        w
    }
}

/// Renders a periodic beat train with R peaks at `first_r + n * rr`.
pub fn render_beats(
    n_t: usize,
    fs: f64,
    template: &[Wave],
    rr_s: f64,
    first_r_s: f64,
    gains: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; n_t];
    let dur = n_t as f64 / fs;
    let mut r = first_r_s - rr_s * ((first_r_s + 1.0) / rr_s).ceil();
    while r < dur + 1.0 {
        for (w, g) in template.iter().zip(gains) {
            if w.amplitude == 0.0 {
                continue;
            }
            let centre = r + w.offset_s;
            let reach = 5.0 * w.width_s;
            let lo = (((centre - reach) * fs).floor().max(0.0)) as usize;
            let hi = (((centre + reach) * fs).ceil().min(n_t as f64 - 1.0)).max(-1.0);
            if hi < 0.0 {
                continue;
            }
            for (t, o) in out.iter_mut().enumerate().take(hi as usize + 1).skip(lo) {
                let x = (t as f64 / fs - centre) / w.width_s;
                *o += g * w.amplitude * (-0.5 * x * x).exp();
            }
        }
        r += rr_s;
    }
    out
}

/// Per-record generation parameters, exposed for tests.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecordInfo {
    pub class: usize,
    pub hr_bpm: f64,
    pub rr_s: f64,
}

/// Synthetic ECG-like corpus: periodic Gaussian-bump beats with per-record
/// heart rate and channel gains, and a class-dependent template. Folds
/// cycle 1..=10 over records and classes cycle once per full round of
/// folds, so every fold sees every class. Samples are rounded to f32
/// so files round-trip exactly.
pub fn synth_ecg(spec: &SynthSpec) -> Result<(Dataset, Vec<SynthRecordInfo>)> {
    spec.validate()?;
    let n_t = (spec.duration_s * spec.fs).round() as usize;
    // lead pattern: fixed per channel and wave across the corpus
    let mut lead_rng = seeded(derive(spec.seed, "synth-leads"));
    let leads: Vec<[f64; 5]> = (0..spec.n_channels)
        .map(|c| {
            if c == 0 {
                [1.0; 5]
            } else {
                let s =
                    lead_rng.gen_range(0.3..1.2) * if lead_rng.gen_bool(0.2) { -1.0 } else { 1.0 };
                let mut g = [s; 5];
                for x in &mut g {
                    *x *= lead_rng.gen_range(0.8..1.2);
                }
                g
            }
        })
        .collect();
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let labels = LabelSpace::new(spec.classes.iter().map(|c| c.name.clone()).collect())?;
    let mut records = Vec::with_capacity(spec.n_records);
    let mut folds = Vec::with_capacity(spec.n_records);
    let mut infos = Vec::with_capacity(spec.n_records);
    let width = spec.n_records.to_string().len().max(4);
    for i in 0..spec.n_records {
        let id = format!("synth{i:0width$}");
        let mut rng: Rng = seeded(derive(spec.seed, &id));
        let class = (i / N_FOLDS as usize) % spec.classes.len();
        let hr = rng.gen_range(spec.hr_range_bpm.0..=spec.hr_range_bpm.1)
            + spec.classes[class].hr_shift_bpm;
        let rr = 60.0 / hr;
        let first_r = rng.gen_range(0.0..rr);
        let template = spec.template(class);
        let scale: f64 = 1.0 + spec.gain_jitter * rng.gen_range(-1.0..1.0);
        let mut data = Vec::with_capacity(spec.n_channels * n_t);
        for lead in &leads {
            let jitter: f64 = 1.0 + spec.gain_jitter * rng.gen_range(-0.5..0.5);
            let gains: Vec<f64> = lead.iter().map(|g| g * scale * jitter).collect();
            let mut ch = render_beats(n_t, spec.fs, &template, rr, first_r, &gains);
            if spec.noise_std > 0.0 {
                for v in &mut ch {
                    *v += noise.sample(&mut rng);
                }
            }
            data.extend(ch.into_iter().map(|v| v as f32 as f64));
        }
        let samples = Waveform::new(spec.n_channels, n_t, data)?;
        records.push(EcgRecord::new(id, samples, spec.fs, vec![class])?);
        folds.push((i % N_FOLDS as usize) as u8 + 1);
        infos.push(SynthRecordInfo {
            class,
            hr_bpm: hr,
            rr_s: rr,
        });
    }
    Ok((Dataset::new(labels, records, folds)?, infos))
}

const MAGIC: &[u8; 8] = b"ECGSSLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training state persisted next to the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Epochs completed; per-record streams are derived from (seed, id, epoch).
    pub epoch: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamW>,
    /// Target network of a BYOL run.
    pub ema: Option<(ParamStore, f64)>,
    pub run_config: serde_json::Value,
    pub rng: RngState,
    /// Free-form run information (loss curve, selected epoch, ...).
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    section: String,
    name: String,
    group: LayerGroup,
    kind: ParamKind,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
    ema_tau: Option<f64>,
    run_config: serde_json::Value,
    rng: RngState,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OptimizerHeader {
    config: AdamWConfig,
    steps: Vec<u64>,
}

fn push_store(
    section: &str,
    store: &ParamStore,
    table: &mut Vec<TensorEntry>,
    blocks: &mut Vec<f64>,
) {
    for e in store.entries() {
        table.push(TensorEntry {
            section: section.into(),
            name: e.name.clone(),
            group: e.group,
            kind: e.kind,
            shape: e.value.shape().to_vec(),
        });
        blocks.extend_from_slice(e.value.data());
    }
}

/// Binary layout: magic, u64 LE header length, JSON header, f64 LE tensor
/// blocks in header order, sha256 of everything before it. Written to a
/// temporary file and renamed into place.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut table = Vec::new();
    let mut blocks = Vec::new();
    push_store("model", &ck.model.store, &mut table, &mut blocks);
    let optimizer = ck.optimizer.as_ref().map(|opt| {
        let (m, v, steps) = opt.state();
        for (section, moments) in [("adam_m", m), ("adam_v", v)] {
            for (e, mom) in ck.model.store.entries().iter().zip(moments) {
                if let Some(mom) = mom {
                    table.push(TensorEntry {
                        section: section.into(),
                        name: e.name.clone(),
                        group: e.group,
                        kind: e.kind,
                        shape: e.value.shape().to_vec(),
                    });
                    blocks.extend_from_slice(mom);
                }
            }
        }
        OptimizerHeader {
            config: opt.config,
            steps: steps.to_vec(),
        }
    });
    if let Some((target, _)) = &ck.ema {
        push_store("ema", target, &mut table, &mut blocks);
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        spec: ck.model.spec().clone(),
        tensors: table,
        optimizer,
        ema_tau: ck.ema.as_ref().map(|(_, tau)| *tau),
        run_config: ck.run_config.clone(),
        rng: ck.rng.clone(),
        meta: ck.meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + header_bytes.len() + blocks.len() * 8 + 32);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for v in &blocks {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {}", msg.into()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < 16 + 32 || &buf[..8] != MAGIC {
        return Err(corrupt("bad magic or truncated file"));
    }
    let (body, digest) = buf.split_at(buf.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    if 16 + hlen > body.len() {
        return Err(corrupt("header length exceeds file"));
    }
    let header: Header = serde_json::from_slice(&body[16..16 + hlen])
        .map_err(|e| corrupt(format!("header: {e}")))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint format_version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.format_version
        )));
    }
    let data = &body[16 + hlen..];
    let total: usize = header
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>())
        .sum();
    if data.len() != total * 8 {
        return Err(corrupt(format!(
            "{} data bytes for {total} values",
            data.len()
        )));
    }
    let mut values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut model = Model::build(&header.spec, 0)?;
    let n = model.store.len();
    let mut m: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut v: Vec<Option<Vec<f64>>> = vec![None; n];
    let mut ema_store = header.ema_tau.map(|_| model.store.clone());
    let mut model_seen = vec![false; n];
    for t in &header.tensors {
        let len: usize = t.shape.iter().product();
        let vals: Vec<f64> = values.by_ref().take(len).collect();
        let id = model.store.find(&t.name).ok_or_else(|| {
            Error::Checkpoint(format!(
                "tensor `{}` does not belong to this architecture",
                t.name
            ))
        })?;
        if model.store.get(id).shape() != t.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?}, architecture expects {:?}",
                t.name,
                t.shape,
                model.store.get(id).shape()
            )));
        }
        match t.section.as_str() {
            "model" => {
                *model.store.get_mut(id) = Tensor::new(&t.shape, vals)?;
                model_seen[id.0] = true;
            }
            "adam_m" => m[id.0] = Some(vals),
            "adam_v" => v[id.0] = Some(vals),
            "ema" => match ema_store.as_mut() {
                Some(s) => *s.get_mut(id) = Tensor::new(&t.shape, vals)?,
                None => return Err(corrupt("ema tensors without ema section")),
            },
            other => return Err(corrupt(format!("unknown section `{other}`"))),
        }
    }
    if let Some(i) = model_seen.iter().position(|s| !s) {
        return Err(Error::Checkpoint(format!(
            "missing tensor `{}`",
            model.store.entries()[i].name
        )));
    }
    let optimizer = match header.optimizer {
        Some(o) => Some(AdamW::from_state(o.config, m, v, o.steps)?),
        None => None,
    };
    Ok(Checkpoint {
        model,
        optimizer,
        ema: ema_store.zip(header.ema_tau),
        run_config: header.run_config,
        rng: header.rng,
        meta: header.meta,
    })
}

/// Loads a checkpoint and insists on an architecture kind (`cpc`/`conv`).
pub fn load_checkpoint_for(path: &Path, kind: &str) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    let got = ck.model.spec().architecture.kind();
    if got != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a `{got}` model, expected `{kind}`",
            path.display()
        )));
    }
    Ok(ck)
}

/// Hex sha256 of a JSON value's canonical (sorted-key, compact) form.
pub fn config_hash(v: &serde_json::Value) -> String {
    hex::encode(Sha256::digest(canonical_json(v).as_bytes()))
}

fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let parts: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", parts.join(","))
        }
        Value::Array(items) => format!(
            "[{}]",
            items
                .iter()
                .map(canonical_json)
                .collect::<Vec<_>>()
                .join(",")
        ),
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, CpcConfig, HeadSpec, HeadVariant, Objective};

    fn small_spec(n: usize) -> SynthSpec {
        SynthSpec {
            n_records: n,
            n_channels: 3,
            duration_s: 4.0,
            ..Default::default()
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, _) = synth_ecg(&small_spec(12)).unwrap();
        let m = write_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.manifest, m);
        assert_eq!(loaded.load_all().unwrap(), ds);
    }

    #[test]
    fn missing_file_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, _) = synth_ecg(&small_spec(3)).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        fs::remove_file(dir.path().join("synth0001.f32")).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::MissingRecord { id, .. }) => assert_eq!(id, "synth0001"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn manifest_validation() {
        let (ds, _) = synth_ecg(&small_spec(3)).unwrap();
        let mut m = ds.manifest();
        m.records[0].fold = 11;
        assert!(m.validate().is_err());
        let mut m = ds.manifest();
        m.format_version = 2;
        assert!(m.validate().is_err());
        let mut m = ds.manifest();
        m.records[1].id = m.records[0].id.clone();
        assert!(m.validate().is_err());
        let mut m = ds.manifest();
        m.records[0].labels = vec![5];
        assert!(m.validate().is_err());
    }

    #[test]
    fn wrong_file_size_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, _) = synth_ecg(&small_spec(2)).unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        fs::write(dir.path().join("synth0000.f32"), [0u8; 12]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
    }

    #[test]
    fn fold_splits() {
        let ids: Vec<String> = (0..10).map(|i| format!("r{i}")).collect();
        let folds: Vec<u8> = (1..=10).collect();
        let s = split_folds(&ids, &folds, 8).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<String> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .cloned()
            .collect();
        all.sort();
        let mut want = ids.clone();
        want.sort();
        assert_eq!(all, want);
        let s2 = split_folds(&ids, &folds, 2).unwrap();
        assert_eq!(s2.train, vec!["r0".to_string(), "r1".to_string()]);
        assert!(split_folds(&ids, &folds, 9).is_err());
        assert!(split_folds(&ids[..8], &folds[..8], 8).is_err());
    }

    #[test]
    fn zero_amplitude_gives_flat_records() {
        let spec = SynthSpec {
            amplitude: 0.0,
            noise_std: 0.0,
            ..small_spec(4)
        };
        let (ds, _) = synth_ecg(&spec).unwrap();
        assert!(ds
            .records
            .iter()
            .all(|r| r.samples.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn autocorrelation_peaks_at_rr() {
        let spec = SynthSpec {
            noise_std: 0.0,
            duration_s: 10.0,
            ..small_spec(6)
        };
        let (ds, infos) = synth_ecg(&spec).unwrap();
        for (r, info) in ds.records.iter().zip(&infos) {
            let x = r.samples.channel(0);
            let n = x.len();
            let rr = info.rr_s * r.fs;
            let lo = (0.8 * rr) as usize;
            let hi = ((1.2 * rr) as usize).min(n / 2);
            let best = (lo..=hi)
                .max_by(|&a, &b| {
                    let ac = |lag: usize| {
                        (0..n - lag).map(|t| x[t] * x[t + lag]).sum::<f64>() / (n - lag) as f64
                    };
                    ac(a).partial_cmp(&ac(b)).unwrap()
                })
                .unwrap();
            assert!((best as f64 - rr).abs() <= 2.0, "lag {best} vs rr {rr}");
        }
    }

    #[test]
    fn every_fold_sees_every_class() {
        let (ds, infos) = synth_ecg(&small_spec(40)).unwrap();
        for fold in 1..=10u8 {
            let mut seen: Vec<usize> = ds
                .folds
                .iter()
                .zip(&infos)
                .filter(|(f, _)| **f == fold)
                .map(|(_, i)| i.class)
                .collect();
            seen.sort();
            seen.dedup();
            assert_eq!(seen, vec![0, 1], "fold {fold}");
        }
    }

    #[test]
    fn classes_are_separable_by_a_simple_probe() {
        // mean absolute first difference is larger for narrow QRS complexes
        let (ds, infos) = synth_ecg(&small_spec(40)).unwrap();
        let feat: Vec<f64> = ds
            .records
            .iter()
            .map(|r| {
                let x = r.samples.channel(0);
                x.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() / x.len() as f64
            })
            .collect();
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, a) in infos.iter().enumerate() {
            for (j, b) in infos.iter().enumerate() {
                if a.class == 0 && b.class == 1 {
                    pairs += 1.0;
                    if feat[i] > feat[j] {
                        wins += 1.0;
                    }
                }
            }
        }
        assert!(wins / pairs > 0.5, "{}", wins / pairs);
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_ecg(&small_spec(5)).unwrap().0;
        let b = synth_ecg(&small_spec(5)).unwrap().0;
        assert_eq!(a, b);
        let c = synth_ecg(&SynthSpec {
            seed: 1,
            ..small_spec(5)
        })
        .unwrap()
        .0;
        assert_ne!(a, c);
        assert!(synth_ecg(&SynthSpec {
            n_records: 0,
            ..small_spec(5)
        })
        .is_err());
    }

    fn toy_model() -> Model {
        Model::build(
            &ModelSpec {
                architecture: Architecture::Cpc(CpcConfig {
                    encoder_layers: 1,
                    encoder_width: 4,
                    lstm_layers: 1,
                    lstm_hidden: 3,
                    steps_ahead: 2,
                    n_negatives: 2,
                    ..Default::default()
                }),
                n_channels: 2,
                objective: Some(Objective::Cpc),
                head: Some(HeadSpec {
                    n_labels: 2,
                    variant: HeadVariant::Full,
                }),
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let mut model = toy_model();
        let mut opt = AdamW::new(AdamWConfig::default(), model.store.len());
        let grads: Vec<Option<Tensor>> = model
            .store
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| (i % 2 == 0).then(|| e.value.map(|x| x * 0.3 + 0.1)))
            .collect();
        let lrs = vec![1e-2; model.store.len()];
        opt.step(&mut model.store, &grads, &lrs).unwrap();
        let ck = Checkpoint {
            model: model.clone(),
            optimizer: Some(opt.clone()),
            ema: Some((model.store.clone(), 0.99)),
            // floats chosen to need exact shortest-repr parsing
            run_config: serde_json::json!({"seed": 3, "lr": 0.1 + 0.2, "tau": 1.0 / 3.0}),
            rng: RngState { seed: 3, epoch: 2 },
            meta: serde_json::json!({"best_epoch": 1, "val_loss": 2.0f64.ln()}),
        };
        save_checkpoint(&path, &ck).unwrap();
        let mut back = load_checkpoint(&path).unwrap();
        assert_eq!(back.run_config, ck.run_config);
        let again = dir.path().join("ck2.bin");
        save_checkpoint(&again, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
        assert_eq!(back.model.store, model.store);
        assert_eq!(back.optimizer.as_ref().unwrap(), &opt);
        assert_eq!(back.ema.as_ref().unwrap().0, model.store);
        assert_eq!(back.rng, ck.rng);
        assert_eq!(back.meta, ck.meta);
        let x = Tensor::randn(&[2, 2, 7], &mut seeded(1));
        assert_eq!(
            back.model.predict_logits(&x).unwrap(),
            model.predict_logits(&x).unwrap()
        );
    }

    #[test]
    fn checkpoint_corruption_and_kind_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        let ck = Checkpoint {
            model: toy_model(),
            optimizer: None,
            ema: None,
            run_config: serde_json::Value::Null,
            rng: RngState { seed: 0, epoch: 0 },
            meta: serde_json::Value::Null,
        };
        save_checkpoint(&path, &ck).unwrap();
        assert!(load_checkpoint_for(&path, "cpc").is_ok());
        let err = load_checkpoint_for(&path, "conv").unwrap_err().to_string();
        assert!(err.contains("cpc") && err.contains("conv"), "{err}");

        let bytes = fs::read(&path).unwrap();
        let cut = dir.path().join("cut.bin");
        fs::write(&cut, &bytes[..bytes.len() - 40]).unwrap();
        assert!(matches!(load_checkpoint(&cut), Err(Error::Checkpoint(_))));
        let mut flipped = bytes.clone();
        let mid = bytes.len() - 100;
        flipped[mid] ^= 1;
        fs::write(&cut, &flipped).unwrap();
        assert!(load_checkpoint(&cut)
            .unwrap_err()
            .to_string()
            .contains("checksum"));
    }

    #[test]
    fn config_hash_ignores_key_order() {
        let a: serde_json::Value =
            serde_json::from_str(r#"{"b": 1, "a": {"y": [1, 2], "x": null}}"#).unwrap();
        let b: serde_json::Value =
            serde_json::from_str(r#"{"a": {"x": null, "y": [1, 2]}, "b": 1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
        assert_ne!(config_hash(&a), config_hash(&serde_json::json!({"b": 2})));
    }
}
