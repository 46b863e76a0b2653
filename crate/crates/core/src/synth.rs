//! Synthetic EEG-like epochs with band-power class structure, and the
//! binary epoch file format.
//!
//! Each class owns a frequency band. A sample of class `k` carries, on
//! every channel, three sinusoids with frequencies drawn uniformly inside
//! `class_bands[k]` and uniform random phases, scaled by a per-channel gain
//! in `[0.8, 1.2]`, plus white Gaussian noise. The continuous signal of
//! `S * P` samples is cut into `S` patches of `P` samples.
//!
//! # Epoch file layout
//!
//! All integers are little-endian.
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 8    | magic `DLNKEPCH`              |
//! | 8      | 4    | version (`u32`, currently 1)  |
//! | 12     | 4    | B (`u32`)                     |
//! | 16     | 4    | C (`u32`)                     |
//! | 20     | 4    | S (`u32`)                     |
//! | 24     | 4    | P (`u32`)                     |
//! | 28     | 4    | N_cls (`u32`)                 |
//! | 32     | 4    | sample rate in Hz (`f32`)     |
//! | 36     | 28   | reserved, zero                |
//! | 64     | 4·B  | labels (`u32`)                |
//! | …      | 4·B·C·S·P | signals, row-major `f32` |

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DlinkError, Result};

pub const EPOCH_MAGIC: &[u8; 8] = b"DLNKEPCH";
pub const EPOCH_VERSION: u32 = 1;
pub const EPOCH_HEADER_LEN: usize = 64;

/// Number of sinusoids summed per channel.
const TONES_PER_CHANNEL: usize = 3;

/// Frequency band `[low, high]` in Hz with the amplitude of each tone.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassBand {
    pub low: f64,
    pub high: f64,
    pub amplitude: f64,
}

impl ClassBand {
    pub fn new(low: f64, high: f64, amplitude: f64) -> Self {
        Self { low, high, amplitude }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalConfig {
    pub sample_rate: f64,
    pub channels: usize,
    pub segments: usize,
    pub patch_len: usize,
    pub num_classes: usize,
    pub class_bands: Vec<ClassBand>,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SignalConfig {
    /// Reference dimensions: 32 channels, ten 1-second patches at 200 Hz.
    fn default() -> Self {
        Self {
            sample_rate: 200.0,
            channels: 32,
            segments: 10,
            patch_len: 200,
            num_classes: 3,
            class_bands: vec![
                ClassBand::new(4.0, 8.0, 1.0),
                ClassBand::new(8.0, 13.0, 1.0),
                ClassBand::new(13.0, 30.0, 1.0),
            ],
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl SignalConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(DlinkError::Config(m));
        if !(self.sample_rate.is_finite() && self.sample_rate > 0.0) {
            return cfg(format!("sample_rate must be positive, got {}", self.sample_rate));
        }
        if self.channels == 0 || self.segments == 0 || self.patch_len == 0 {
            return cfg("channels, segments and patch_len must be positive".into());
        }
        if self.num_classes == 0 {
            return cfg("num_classes must be positive".into());
        }
        if self.class_bands.len() != self.num_classes {
            return cfg(format!(
                "{} class bands given for {} classes",
                self.class_bands.len(),
                self.num_classes
            ));
        }
        let nyquist = self.sample_rate / 2.0;
        for (k, band) in self.class_bands.iter().enumerate() {
            // low == high is a single tone
            if !(band.low > 0.0 && band.low <= band.high && band.high < nyquist) {
                return cfg(format!(
                    "class {k} band ({}, {}) violates 0 < low <= high < Nyquist ({nyquist})",
                    band.low, band.high
                ));
            }
            if !(band.amplitude.is_finite() && band.amplitude >= 0.0) {
                return cfg(format!("class {k} amplitude must be finite and >= 0"));
            }
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return cfg("noise_std must be finite and >= 0".into());
        }
        Ok(())
    }

    pub fn nyquist(&self) -> f64 {
        self.sample_rate / 2.0
    }
}

/// Segmented signals `(B, C, S, P)` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochBatch {
    pub signals: Array4<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub sample_rate: f32,
}

impl EpochBatch {
    pub fn new(signals: Array4<f32>, labels: Vec<usize>, num_classes: usize, sample_rate: f32) -> Result<Self> {
        let batch = Self {
            signals,
            labels,
            num_classes,
            sample_rate,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.signals.shape()[0] {
            return Err(DlinkError::Format(format!(
                "{} labels for {} samples",
                self.labels.len(),
                self.signals.shape()[0]
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(DlinkError::Format(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        if self.signals.iter().any(|v| !v.is_finite()) {
            return Err(DlinkError::Format("non-finite signal value".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(B, C, S, P)`.
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.signals.dim()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> EpochBatch {
        EpochBatch {
            signals: self.signals.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            sample_rate: self.sample_rate,
        }
    }

    /// Signals widened to `f64`.
    pub fn signals_f64(&self) -> Array4<f64> {
        self.signals.mapv(f64::from)
    }

    /// Stratified split into parts with the given fractions; see
    /// [`stratified_indices`].
    pub fn stratified_split(&self, fractions: &[f64], seed: u64) -> Vec<EpochBatch> {
        stratified_indices(&self.labels, self.num_classes, fractions, seed)
            .into_iter()
            .map(|idx| self.subset(&idx))
            .collect()
    }
}

/// Per class, shuffles the sample indices and cuts them by `fractions`;
/// the last part takes the remainder. Each part is returned sorted.
pub fn stratified_indices(labels: &[usize], num_classes: usize, fractions: &[f64], seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for class in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let mut start = 0;
        for (p, &frac) in fractions.iter().enumerate() {
            let end = if p + 1 == fractions.len() {
                n
            } else {
                (start + (frac * n as f64).round() as usize).min(n)
            };
            parts[p].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    for part in &mut parts {
        part.sort_unstable();
    }
    parts
}

/// Generates `n` labelled epochs. Labels are balanced to within one sample
/// per class and the output is a pure function of `(config, n)`.
pub fn generate(config: &SignalConfig, n: usize) -> Result<EpochBatch> {
    config.validate()?;
    if n == 0 {
        return Err(DlinkError::Usage("generate needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % config.num_classes).collect();
    labels.shuffle(&mut rng);

    let (c, s, p) = (config.channels, config.segments, config.patch_len);
    let total = s * p;
    let noise = Normal::new(0.0, config.noise_std.max(f64::MIN_POSITIVE)).expect("noise std");
    let mut signals = Array4::<f32>::zeros((n, c, s, p));
    let mut trace = vec![0.0f64; total];
    for (b, &label) in labels.iter().enumerate() {
        let band = config.class_bands[label];
        for ch in 0..c {
            let gain = rng.random_range(0.8..=1.2);
            trace.iter_mut().for_each(|v| *v = 0.0);
            for _ in 0..TONES_PER_CHANNEL {
                let freq = if band.high > band.low {
                    rng.random_range(band.low..band.high)
                } else {
                    band.low
                };
                let phase = rng.random_range(0.0..2.0 * PI);
                let omega = 2.0 * PI * freq / config.sample_rate;
                for (t, v) in trace.iter_mut().enumerate() {
                    *v += band.amplitude * (omega * t as f64 + phase).cos();
                }
            }
            for (t, &v) in trace.iter().enumerate() {
                let noisy = if config.noise_std > 0.0 {
                    gain * v + noise.sample(&mut rng)
                } else {
                    gain * v
                };
                signals[[b, ch, t / p, t % p]] = noisy as f32;
            }
        }
    }
    EpochBatch::new(signals, labels, config.num_classes, config.sample_rate as f32)
}

pub fn save_epochs(batch: &EpochBatch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    batch.validate()?;
    let bytes = encode_epochs(batch)?;
    let mut file = std::fs::File::create(path).map_err(|e| DlinkError::io(path, e))?;
    file.write_all(&bytes).map_err(|e| DlinkError::io(path, e))?;
    Ok(())
}

pub fn load_epochs(path: impl AsRef<Path>) -> Result<EpochBatch> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| DlinkError::io(path, e))?;
    decode_epochs(&bytes)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| DlinkError::Format(format!("{what} = {v} does not fit in u32")))
}

pub fn encode_epochs(batch: &EpochBatch) -> Result<Vec<u8>> {
    let (b, c, s, p) = batch.dims();
    let mut out = Vec::with_capacity(EPOCH_HEADER_LEN + 4 * b + 4 * batch.signals.len());
    out.extend_from_slice(EPOCH_MAGIC);
    out.extend_from_slice(&EPOCH_VERSION.to_le_bytes());
    for (v, what) in [(b, "B"), (c, "C"), (s, "S"), (p, "P"), (batch.num_classes, "N_cls")] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    out.extend_from_slice(&batch.sample_rate.to_le_bytes());
    out.resize(EPOCH_HEADER_LEN, 0);
    for &l in &batch.labels {
        out.extend_from_slice(&to_u32(l, "label")?.to_le_bytes());
    }
    for &v in batch.signals.as_standard_layout().iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_epochs(bytes: &[u8]) -> Result<EpochBatch> {
    let fmt = |m: String| DlinkError::Format(m);
    if bytes.len() < EPOCH_HEADER_LEN {
        return Err(fmt(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[0..8] != EPOCH_MAGIC {
        return Err(fmt("bad magic".into()));
    }
    let word = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    let version = word(8);
    if version != EPOCH_VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let (b, c, s, p, n_cls) = (
        word(12) as usize,
        word(16) as usize,
        word(20) as usize,
        word(24) as usize,
        word(28) as usize,
    );
    let sample_rate = f32::from_le_bytes(bytes[32..36].try_into().unwrap());
    let count = b
        .checked_mul(c)
        .and_then(|v| v.checked_mul(s))
        .and_then(|v| v.checked_mul(p))
        .ok_or_else(|| fmt("header dimensions overflow".into()))?;
    let expected = EPOCH_HEADER_LEN + 4 * b + 4 * count;
    if bytes.len() != expected {
        return Err(fmt(format!(
            "header declares ({b},{c},{s},{p}) needing {expected} bytes, file has {}",
            bytes.len()
        )));
    }
    let mut labels = Vec::with_capacity(b);
    let mut off = EPOCH_HEADER_LEN;
    for _ in 0..b {
        labels.push(word(off) as usize);
        off += 4;
    }
    let payload: Vec<f32> = bytes[off..]
        .chunks_exact(4)
        .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()))
        .collect();
    let signals = Array4::from_shape_vec((b, c, s, p), payload).map_err(|e| fmt(e.to_string()))?;
    EpochBatch::new(signals, labels, n_cls, sample_rate)
}
