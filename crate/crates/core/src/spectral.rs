//! Frequency-domain primitives: real FFT along the last axis, magnitude
//! and unit-circle phase encoding, saliency scores per teacher layer, and
//! the spectral discrepancy that drives distillation.
//!
//! Array functions here use `rustfft`. The differentiable path
//! ([`spectrum_var`]) evaluates the same transform as a product with a
//! DFT basis so gradients flow through the autodiff tape.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, Array4, ArrayD, Axis, Zip};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{DlinkError, Result};

/// rFFT of `(B, C, S, T)` features: magnitude and `(cos, sin)` of the phase,
/// each `(B, C, S, F)` with `F = T/2 + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralRep {
    pub magnitude: Array4<f64>,
    pub phase_cos: Array4<f64>,
    pub phase_sin: Array4<f64>,
}

impl SpectralRep {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.magnitude.dim()
    }

    pub fn select(&self, indices: &[usize]) -> SpectralRep {
        SpectralRep {
            magnitude: self.magnitude.select(Axis(0), indices),
            phase_cos: self.phase_cos.select(Axis(0), indices),
            phase_sin: self.phase_sin.select(Axis(0), indices),
        }
    }
}

/// Number of one-sided frequency bins for a length-`t` signal.
pub fn num_bins(t: usize) -> usize {
    t / 2 + 1
}

/// Weights that turn one-sided `|X_k|^2` into two-sided energy: DC and
/// (for even `t`) Nyquist count once, interior bins twice.
pub fn one_sided_weights(t: usize) -> Vec<f64> {
    let f = num_bins(t);
    (0..f)
        .map(|k| if k == 0 || (t % 2 == 0 && k == f - 1) { 1.0 } else { 2.0 })
        .collect()
}

fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    if values.into_iter().any(|v| !v.is_finite()) {
        return Err(DlinkError::Numeric("non-finite input to spectrum".into()));
    }
    Ok(())
}

/// One-sided complex rFFT of every lane along the last axis.
fn rfft_lanes(x: &ArrayD<f64>) -> Result<Vec<Vec<Complex64>>> {
    let t = *x.shape().last().ok_or_else(|| DlinkError::Usage("scalar input".into()))?;
    if t < 2 {
        return Err(DlinkError::Usage(format!("time axis must have length >= 2, got {t}")));
    }
    check_finite(x.iter())?;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(t);
    let f = num_bins(t);
    let mut buf = vec![Complex64::new(0.0, 0.0); t];
    let last = x.ndim() - 1;
    let mut out = Vec::with_capacity(x.len() / t);
    for lane in x.lanes(Axis(last)) {
        for (b, &v) in buf.iter_mut().zip(lane.iter()) {
            *b = Complex64::new(v, 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..f].to_vec());
    }
    Ok(out)
}

/// Real FFT along the time axis with magnitude and encoded phase.
pub fn spectrum(features: &Array4<f64>) -> Result<SpectralRep> {
    let (b, c, s, t) = features.dim();
    let lanes = rfft_lanes(&features.clone().into_dyn())?;
    let f = num_bins(t);
    let mut magnitude = Array4::<f64>::zeros((b, c, s, f));
    let mut phase_cos = Array4::<f64>::ones((b, c, s, f));
    let mut phase_sin = Array4::<f64>::zeros((b, c, s, f));
    for (i, lane) in lanes.iter().enumerate() {
        let (bi, ci, si) = (i / (c * s), (i / s) % c, i % s);
        for (k, z) in lane.iter().enumerate() {
            let m = z.re.hypot(z.im);
            magnitude[[bi, ci, si, k]] = m;
            if m > 0.0 {
                phase_cos[[bi, ci, si, k]] = z.re / m;
                phase_sin[[bi, ci, si, k]] = z.im / m;
            }
        }
    }
    Ok(SpectralRep {
        magnitude,
        phase_cos,
        phase_sin,
    })
}

/// Saliency score per layer, per sample: `(B, L)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PsdScores {
    pub per_sample: Array2<f64>,
}

impl PsdScores {
    pub fn num_layers(&self) -> usize {
        self.per_sample.ncols()
    }

    /// Scores averaged over the batch, length `L`.
    pub fn batch_mean(&self) -> Array1<f64> {
        self.per_sample.mean_axis(Axis(0)).expect("non-empty batch")
    }

    /// Every row replaced by the batch mean.
    pub fn batch_averaged(&self) -> PsdScores {
        let mean = self.batch_mean();
        let mut per_sample = self.per_sample.clone();
        for mut row in per_sample.rows_mut() {
            row.assign(&mean);
        }
        PsdScores { per_sample }
    }

    pub fn select(&self, indices: &[usize]) -> PsdScores {
        PsdScores {
            per_sample: self.per_sample.select(Axis(0), indices),
        }
    }
}

fn check_layers<T>(layers: &[T]) -> Result<()> {
    if layers.is_empty() {
        return Err(DlinkError::Usage("at least one teacher layer is required".into()));
    }
    Ok(())
}

/// Mean squared magnitude over `(c, s, f)` for each sample and layer.
pub fn psd_scores(teacher_spectra: &[SpectralRep]) -> Result<PsdScores> {
    check_layers(teacher_spectra)?;
    let dims = teacher_spectra[0].dims();
    if teacher_spectra.iter().any(|r| r.dims() != dims) {
        return Err(DlinkError::Usage("teacher layers differ in shape".into()));
    }
    let b = dims.0;
    let mut per_sample = Array2::<f64>::zeros((b, teacher_spectra.len()));
    for (l, rep) in teacher_spectra.iter().enumerate() {
        for (bi, sample) in rep.magnitude.outer_iter().enumerate() {
            per_sample[[bi, l]] = sample.iter().map(|m| m * m).sum::<f64>() / sample.len() as f64;
        }
    }
    Ok(PsdScores { per_sample })
}

/// Layer saliency metrics compared in the ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaliencyMetric {
    /// Mean squared time-domain amplitude.
    MeanPower,
    /// Largest spectral magnitude.
    MaxAmp,
    /// Mean squared spectral magnitude.
    #[default]
    Psd,
}

impl FromStr for SaliencyMetric {
    type Err = DlinkError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean_power" => Ok(Self::MeanPower),
            "max_amp" => Ok(Self::MaxAmp),
            "psd" => Ok(Self::Psd),
            other => Err(DlinkError::Config(format!(
                "unknown saliency metric '{other}' (expected mean_power, max_amp or psd)"
            ))),
        }
    }
}

impl std::fmt::Display for SaliencyMetric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::MeanPower => "mean_power",
            Self::MaxAmp => "max_amp",
            Self::Psd => "psd",
        })
    }
}

/// Saliency scores under `metric`. `features` are the time-domain layer
/// features (only read by `MeanPower`), `spectra` their spectra.
pub fn saliency_scores(
    metric: SaliencyMetric,
    features: &[Array4<f64>],
    spectra: &[SpectralRep],
) -> Result<PsdScores> {
    match metric {
        SaliencyMetric::Psd => psd_scores(spectra),
        SaliencyMetric::MaxAmp => {
            check_layers(spectra)?;
            let b = spectra[0].dims().0;
            let mut per_sample = Array2::<f64>::zeros((b, spectra.len()));
            for (l, rep) in spectra.iter().enumerate() {
                for (bi, sample) in rep.magnitude.outer_iter().enumerate() {
                    per_sample[[bi, l]] = sample.iter().cloned().fold(0.0, f64::max);
                }
            }
            Ok(PsdScores { per_sample })
        }
        SaliencyMetric::MeanPower => {
            check_layers(features)?;
            let b = features[0].dim().0;
            let mut per_sample = Array2::<f64>::zeros((b, features.len()));
            for (l, feat) in features.iter().enumerate() {
                for (bi, sample) in feat.outer_iter().enumerate() {
                    per_sample[[bi, l]] = sample.iter().map(|v| v * v).sum::<f64>() / sample.len() as f64;
                }
            }
            Ok(PsdScores { per_sample })
        }
    }
}

/// Per-sample discrepancy: mean squared magnitude difference plus mean
/// squared difference of the `(cos, sin)` phase pair, both normalised by
/// the element count of one `(C, S, F)` spectrum.
pub fn spectral_discrepancy_per_sample(student: &SpectralRep, teacher: &SpectralRep) -> Result<Array1<f64>> {
    if student.dims() != teacher.dims() {
        return Err(DlinkError::Usage(format!(
            "spectra shapes differ: {:?} vs {:?}",
            student.dims(),
            teacher.dims()
        )));
    }
    let (b, c, s, f) = student.dims();
    let n = (c * s * f) as f64;
    let mut out = Array1::<f64>::zeros(b);
    for bi in 0..b {
        let mut acc = 0.0;
        let pairs = [
            (&student.magnitude, &teacher.magnitude),
            (&student.phase_cos, &teacher.phase_cos),
            (&student.phase_sin, &teacher.phase_sin),
        ];
        for (x, y) in pairs {
            Zip::from(x.index_axis(Axis(0), bi))
                .and(y.index_axis(Axis(0), bi))
                .for_each(|a, b| acc += (a - b) * (a - b));
        }
        out[bi] = acc / n;
    }
    Ok(out)
}

/// Batch mean of [`spectral_discrepancy_per_sample`].
pub fn spectral_discrepancy(student: &SpectralRep, teacher: &SpectralRep) -> Result<f64> {
    let per = spectral_discrepancy_per_sample(student, teacher)?;
    Ok(per.mean().unwrap_or(0.0))
}

/// Fraction of spectral power above `cutoff_fraction * Nyquist`, pooled over
/// every lane of `features` (last axis is time). Returns 0 for all-zero input.
pub fn highfreq_tail_energy(features: &ArrayD<f64>, cutoff_fraction: f64) -> Result<f64> {
    if !(cutoff_fraction > 0.0 && cutoff_fraction < 1.0) {
        return Err(DlinkError::Usage(format!(
            "cutoff_fraction must lie in (0, 1), got {cutoff_fraction}"
        )));
    }
    let power = mean_power_spectrum(features)?;
    let t = *features.shape().last().unwrap();
    let total: f64 = power.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let tail: f64 = power
        .iter()
        .enumerate()
        .filter(|(k, _)| bin_fraction_of_nyquist(*k, t) > cutoff_fraction)
        .map(|(_, p)| p)
        .sum();
    Ok(tail / total)
}

/// Spectral power at or below `cutoff_fraction * Nyquist` in absolute
/// units (mean energy per lane).
pub fn lowband_energy(features: &ArrayD<f64>, cutoff_fraction: f64) -> Result<f64> {
    let power = mean_power_spectrum(features)?;
    let t = *features.shape().last().unwrap();
    Ok(power
        .iter()
        .enumerate()
        .filter(|(k, _)| bin_fraction_of_nyquist(*k, t) <= cutoff_fraction)
        .map(|(_, p)| p)
        .sum())
}

/// Centre frequency of bin `k` as a fraction of Nyquist.
pub fn bin_fraction_of_nyquist(k: usize, t: usize) -> f64 {
    2.0 * k as f64 / t as f64
}

/// Two-sided-equivalent power per one-sided bin, averaged over lanes:
/// `w_k |X_k|^2 / T` so that the bins sum to the mean lane energy.
pub fn mean_power_spectrum(features: &ArrayD<f64>) -> Result<Vec<f64>> {
    let lanes = rfft_lanes(features)?;
    let t = *features.shape().last().unwrap();
    let weights = one_sided_weights(t);
    let mut power = vec![0.0; num_bins(t)];
    for lane in &lanes {
        for (k, z) in lane.iter().enumerate() {
            power[k] += weights[k] * z.norm_sqr() / t as f64;
        }
    }
    let n = lanes.len().max(1) as f64;
    power.iter_mut().for_each(|p| *p /= n);
    Ok(power)
}

/// One row of a spectrum CSV.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub bin: usize,
    pub frequency: f64,
    pub mean_power: f64,
}

/// Mean power spectrum with bin frequencies in Hz for the given sampling
/// rate of the time axis.
pub fn spectrum_rows(features: &ArrayD<f64>, sample_rate: f64) -> Result<Vec<SpectrumRow>> {
    let power = mean_power_spectrum(features)?;
    let t = *features.shape().last().unwrap();
    Ok(power
        .into_iter()
        .enumerate()
        .map(|(bin, mean_power)| SpectrumRow {
            bin,
            frequency: bin as f64 * sample_rate / t as f64,
            mean_power,
        })
        .collect())
}

pub fn write_spectrum_csv(path: impl AsRef<Path>, rows: &[SpectrumRow]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("bin,frequency,mean_power\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.bin, r.frequency, r.mean_power));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| DlinkError::io(path, e))
}

// ----------------------------------------------------------------------
// Differentiable path
// ----------------------------------------------------------------------

/// Real DFT basis for length `t`: `Re X = x . cos`, `Im X = x . neg_sin`.
#[derive(Clone, Debug)]
pub struct DftBasis {
    pub cos: Tensor,
    pub neg_sin: Tensor,
}

impl DftBasis {
    pub fn new(t: usize) -> Self {
        let f = num_bins(t);
        let mut cos = Array2::<f64>::zeros((t, f));
        let mut neg_sin = Array2::<f64>::zeros((t, f));
        for n in 0..t {
            for k in 0..f {
                // reduce k*n mod t in integers so exact angles stay exact
                let m = (k * n) % t;
                let (c, s) = if m == 0 {
                    (1.0, 0.0)
                } else if 2 * m == t {
                    (-1.0, 0.0)
                } else if 4 * m == t {
                    (0.0, 1.0)
                } else if 4 * m == 3 * t {
                    (0.0, -1.0)
                } else {
                    let angle = 2.0 * PI * m as f64 / t as f64;
                    (angle.cos(), angle.sin())
                };
                cos[[n, k]] = c;
                neg_sin[[n, k]] = -s;
            }
        }
        Self {
            cos: cos.into_dyn(),
            neg_sin: neg_sin.into_dyn(),
        }
    }
}

/// Magnitude and encoded phase as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct SpectralVars<'g> {
    pub magnitude: Var<'g>,
    pub phase_cos: Var<'g>,
    pub phase_sin: Var<'g>,
}

/// Differentiable rFFT along the last axis of `x`.
pub fn spectrum_var<'g>(x: Var<'g>, basis: &DftBasis) -> SpectralVars<'g> {
    let g = x.graph();
    let re = x.matmul(g.constant(basis.cos.clone()));
    let im = x.matmul(g.constant(basis.neg_sin.clone()));
    SpectralVars {
        magnitude: re.magnitude(im),
        phase_cos: re.phase_cos(im),
        phase_sin: re.phase_sin(im),
    }
}

impl<'g> SpectralVars<'g> {
    /// Places a precomputed spectrum on the graph as constants.
    pub fn constant(graph: &'g Graph, rep: &SpectralRep) -> Self {
        Self {
            magnitude: graph.constant(rep.magnitude.clone().into_dyn()),
            phase_cos: graph.constant(rep.phase_cos.clone().into_dyn()),
            phase_sin: graph.constant(rep.phase_sin.clone().into_dyn()),
        }
    }

    pub fn to_rep(&self) -> SpectralRep {
        let cast = |v: Var<'_>| {
            (*v.value())
                .clone()
                .into_dimensionality::<ndarray::Ix4>()
                .expect("spectrum is 4-D")
        };
        SpectralRep {
            magnitude: cast(self.magnitude),
            phase_cos: cast(self.phase_cos),
            phase_sin: cast(self.phase_sin),
        }
    }
}

/// Per-sample spectral discrepancy on the tape, shape `(B)`.
pub fn spectral_discrepancy_var<'g>(student: &SpectralVars<'g>, teacher: &SpectralVars<'g>) -> Var<'g> {
    let shape = student.magnitude.shape();
    let b = shape[0];
    let n: usize = shape[1..].iter().product();
    let sq = student
        .magnitude
        .sub(teacher.magnitude)
        .square()
        .add(student.phase_cos.sub(teacher.phase_cos).square())
        .add(student.phase_sin.sub(teacher.phase_sin).square());
    sq.reshape(&[b, n]).mean_axis(1)
}
