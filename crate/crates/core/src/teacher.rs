//! Multi-layer transformer teacher over patch tokens, plus a synthetic
//! teacher whose layers are constructed rather than learned.
//!
//! Tokens are the `C * S` (channel, segment) patches; every block output
//! is kept and reshaped back to `(B, C, S, T)`.

use std::path::Path;

use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::checkpoint;
use crate::error::{DlinkError, Result};
use crate::nn::{normal, Binding, Complexity, LayerNorm, Linear, ParamId, ParamStore, TransformerBlock};
use crate::optim::{AdamW, AdamWConfig};
use crate::spectral::{spectrum, SpectralRep};
use crate::synth::EpochBatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Random weights, never trained.
    FrozenRandom,
    /// Trained on the labelled epochs, then frozen.
    Pretrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub layers: usize,
    /// Token width `T`; must equal the student's patch feature width.
    pub feature_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub head_hidden: usize,
    pub mode: TeacherMode,
    /// 1-based layer that carries class information in the synthetic
    /// teacher; `None` uses the transformer.
    pub informative_layer: Option<usize>,
    /// Noise power relative to pattern power in the informative layer.
    pub injection_noise: f64,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            feature_dim: 200,
            heads: 4,
            ffn_dim: 400,
            head_hidden: 200,
            mode: TeacherMode::Pretrain,
            informative_layer: None,
            injection_noise: 0.1,
            pretrain_epochs: 10,
            pretrain_lr: 1e-3,
            pretrain_batch: 64,
            seed: 0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DlinkError::Config(m));
        if self.layers == 0 || self.feature_dim == 0 || self.head_hidden == 0 || self.ffn_dim == 0 {
            return bad("teacher layers, feature_dim, ffn_dim and head_hidden must be positive".into());
        }
        if self.heads == 0 || self.feature_dim % self.heads != 0 {
            return bad(format!(
                "teacher feature_dim {} is not divisible by {} heads",
                self.feature_dim, self.heads
            ));
        }
        if let Some(l) = self.informative_layer {
            if l == 0 || l > self.layers {
                return bad(format!("informative_layer {l} outside 1..={}", self.layers));
            }
        }
        if !(self.injection_noise.is_finite() && self.injection_noise >= 0.0) {
            return bad("injection_noise must be finite and >= 0".into());
        }
        if self.pretrain_batch == 0 || !(self.pretrain_lr > 0.0) {
            return bad("pretrain_batch and pretrain_lr must be positive".into());
        }
        Ok(())
    }
}

/// Input geometry shared by every model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDims {
    pub channels: usize,
    pub segments: usize,
    pub patch_len: usize,
    pub num_classes: usize,
}

impl InputDims {
    pub fn of(batch: &EpochBatch) -> Self {
        let (_, c, s, p) = batch.dims();
        Self {
            channels: c,
            segments: s,
            patch_len: p,
            num_classes: batch.num_classes,
        }
    }

    pub fn tokens(&self) -> usize {
        self.channels * self.segments
    }
}

/// Per-layer features, each `(B, C, S, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerFeatureStack {
    pub layers: Vec<Array4<f64>>,
}

impl LayerFeatureStack {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.layers[0].dim()
    }

    /// All layers equal in shape and finite.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(DlinkError::Usage("empty layer stack".into()));
        }
        let dims = self.dims();
        for (l, x) in self.layers.iter().enumerate() {
            if x.dim() != dims {
                return Err(DlinkError::Usage(format!("layer {} has shape {:?}, expected {dims:?}", l + 1, x.dim())));
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(DlinkError::Numeric(format!("layer {} has non-finite features", l + 1)));
            }
        }
        Ok(())
    }

    pub fn spectra(&self) -> Result<Vec<SpectralRep>> {
        self.layers.iter().map(spectrum).collect()
    }

    pub fn select(&self, indices: &[usize]) -> LayerFeatureStack {
        LayerFeatureStack {
            layers: self.layers.iter().map(|x| x.select(Axis(0), indices)).collect(),
        }
    }
}

/// Summary of a pretraining run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_accuracy: f64,
}

#[derive(Clone, Debug)]
pub struct Teacher {
    pub config: TeacherConfig,
    pub dims: InputDims,
    pub store: ParamStore,
    embed: Linear,
    pos: ParamId,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    head1: Linear,
    head2: Linear,
}

#[derive(Serialize, Deserialize)]
struct TeacherHeader {
    config: TeacherConfig,
    dims: InputDims,
}

const KIND: &str = "teacher";

impl Teacher {
    pub fn new(config: TeacherConfig, dims: InputDims) -> Result<Self> {
        config.validate()?;
        if dims.channels == 0 || dims.segments == 0 || dims.patch_len == 0 || dims.num_classes == 0 {
            return Err(DlinkError::Config(format!("degenerate input dims {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let t = config.feature_dim;
        let embed = Linear::new(&mut store, "embed", dims.patch_len, t, &mut rng);
        if dims.patch_len == t {
            // start near identity so early layers keep the waveform
            let w = store.get_mut(embed.weight);
            let noise = normal(&[t, t], 0.02, &mut rng);
            *w = noise;
            for i in 0..t {
                w[[i, i]] += 1.0;
            }
            store.get_mut(embed.bias.unwrap()).fill(0.0);
        }
        let pos = store.add("pos", normal(&[dims.tokens(), t], 0.02, &mut rng));
        let blocks = (0..config.layers)
            .map(|l| TransformerBlock::new(&mut store, &format!("block{l}"), t, config.heads, config.ffn_dim, &mut rng))
            .collect();
        let norm = LayerNorm::new(&mut store, "norm", t);
        let head1 = Linear::new(&mut store, "head1", t, config.head_hidden, &mut rng);
        let head2 = Linear::new(&mut store, "head2", config.head_hidden, dims.num_classes, &mut rng);
        Ok(Self {
            config,
            dims,
            store,
            embed,
            pos,
            blocks,
            norm,
            head1,
            head2,
        })
    }

    fn check_input(&self, batch: &EpochBatch) -> Result<()> {
        let (_, c, s, p) = batch.dims();
        if (c, s, p) != (self.dims.channels, self.dims.segments, self.dims.patch_len) {
            return Err(DlinkError::Incompatible(format!(
                "teacher expects (C, S, P) = ({}, {}, {}), got ({c}, {s}, {p})",
                self.dims.channels, self.dims.segments, self.dims.patch_len
            )));
        }
        Ok(())
    }

    /// Block outputs `(B, C, S, T)` and class logits `(B, N_cls)`.
    pub fn forward<'g>(&self, p: &Binding<'g>, x: Var<'g>) -> (Vec<Var<'g>>, Var<'g>) {
        let shape = x.shape();
        let (b, c, s) = (shape[0], shape[1], shape[2]);
        let t = self.config.feature_dim;
        let mut h = self
            .embed
            .forward(p, x.reshape(&[b, c * s, shape[3]]))
            .add(p.get(self.pos));
        let mut layers = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(p, h);
            layers.push(h.reshape(&[b, c, s, t]));
        }
        let pooled = self.norm.forward(p, h).mean_axis(1);
        let logits = self.head2.forward(p, self.head1.forward(p, pooled).elu());
        (layers, logits)
    }

    /// Every layer's features and the logits for a whole batch, evaluated
    /// in chunks.
    pub fn forward_all_layers(&self, batch: &EpochBatch) -> Result<(LayerFeatureStack, Array2<f64>)> {
        self.check_input(batch)?;
        let x = batch.signals_f64();
        let n = x.dim().0;
        let mut layers: Vec<Vec<Array4<f64>>> = vec![Vec::new(); self.config.layers];
        let mut logits = Vec::new();
        for start in (0..n).step_by(64) {
            let end = (start + 64).min(n);
            let graph = Graph::new();
            let p = self.store.bind(&graph, false);
            let xv = graph.constant(x.slice(s![start..end, .., .., ..]).to_owned().into_dyn());
            let (ls, lg) = self.forward(&p, xv);
            for (acc, l) in layers.iter_mut().zip(ls) {
                acc.push(to4(&l.value()));
            }
            logits.push((*lg.value()).clone().into_dimensionality::<ndarray::Ix2>().expect("2-D logits"));
        }
        let cat4 = |parts: Vec<Array4<f64>>| {
            let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("batch concat")
        };
        let stack = LayerFeatureStack {
            layers: layers.into_iter().map(cat4).collect(),
        };
        let views: Vec<_> = logits.iter().map(|a| a.view()).collect();
        let logits = ndarray::concatenate(Axis(0), &views).expect("batch concat");
        stack.validate()?;
        Ok((stack, logits))
    }

    /// Class probabilities `(B, N)` from the pooled head.
    pub fn predict_proba(&self, batch: &EpochBatch) -> Result<Array2<f64>> {
        let (_, logits) = self.forward_all_layers(batch)?;
        Ok(crate::autograd::softmax_last(&logits.into_dyn())
            .into_dimensionality()
            .expect("2-D probabilities"))
    }

    /// Supervised training of every teacher parameter with cross-entropy.
    pub fn pretrain(&mut self, data: &EpochBatch) -> Result<PretrainReport> {
        self.check_input(data)?;
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6574_7261_696e);
        let mut opt = AdamW::new(
            AdamWConfig {
                lr: cfg.pretrain_lr,
                ..AdamWConfig::default()
            },
            &self.store,
        );
        let x = data.signals_f64();
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut epoch_losses = Vec::with_capacity(cfg.pretrain_epochs);
        for epoch in 0..cfg.pretrain_epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.pretrain_batch) {
                let graph = Graph::new();
                let p = self.store.bind(&graph, true);
                let xb = graph.constant(x.select(Axis(0), chunk).into_dyn());
                let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
                let (_, logits) = self.forward(&p, xb);
                let loss = cross_entropy(logits, &labels);
                let value = loss.item();
                if !value.is_finite() {
                    return Err(DlinkError::Divergence {
                        epoch,
                        step: opt.steps() as usize,
                        detail: "teacher pretraining loss is not finite".into(),
                    });
                }
                total += value * chunk.len() as f64;
                let grads = graph.backward(loss);
                let g = p.grads(&grads);
                drop(p);
                opt.step(&mut self.store, &g, cfg.pretrain_lr);
            }
            let mean = total / data.len() as f64;
            log::info!("teacher epoch {} loss {mean:.4}", epoch + 1);
            epoch_losses.push(mean);
        }
        let (_, logits) = self.forward_all_layers(data)?;
        let correct = logits
            .rows()
            .into_iter()
            .zip(&data.labels)
            .filter(|(row, &y)| argmax(row.iter().copied()) == y)
            .count();
        Ok(PretrainReport {
            epoch_losses,
            train_accuracy: correct as f64 / data.len() as f64,
        })
    }

    pub fn complexity(&self) -> Complexity {
        let n = self.dims.tokens();
        let t = self.config.feature_dim as u64;
        let pos = Complexity {
            params: n as u64 * t,
            flops: 0,
        };
        self.embed.complexity(n)
            + pos
            + self.blocks.iter().map(|b| b.complexity(n)).sum::<Complexity>()
            + self.norm.complexity()
            + self.head1.complexity(1)
            + self.head2.complexity(1)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let header = TeacherHeader {
            config: self.config.clone(),
            dims: self.dims,
        };
        checkpoint::save(path, KIND, &header, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (header, tensors): (TeacherHeader, _) = checkpoint::load(path, KIND)?;
        let mut teacher = Teacher::new(header.config, header.dims)?;
        checkpoint::restore(&mut teacher.store, tensors)?;
        Ok(teacher)
    }
}

pub(crate) fn to4(t: &Tensor) -> Array4<f64> {
    t.clone().into_dimensionality::<ndarray::Ix4>().expect("4-D tensor")
}

pub(crate) fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Mean categorical cross-entropy of `(B, N)` logits.
pub(crate) fn cross_entropy<'g>(logits: Var<'g>, labels: &[usize]) -> Var<'g> {
    let shape = logits.shape();
    let mut onehot = Tensor::zeros(ndarray::IxDyn(&shape));
    for (i, &y) in labels.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    let g = logits.graph();
    logits
        .log_softmax_last()
        .mul(g.constant(onehot))
        .sum_all()
        .scale(-1.0 / labels.len() as f64)
}

/// Brings `(B, C, S, D)` teacher features to width `target`: unchanged
/// when `D == target`, averaged over groups of `D / target` adjacent
/// features when `target` divides `D`.
pub fn unify_feature_space(raw: &Array4<f64>, target: usize) -> Result<Array4<f64>> {
    let (b, c, s, d) = raw.dim();
    if target == 0 {
        return Err(DlinkError::Incompatible("target width must be positive".into()));
    }
    if d == target {
        return Ok(raw.clone());
    }
    if d < target || d % target != 0 {
        return Err(DlinkError::Incompatible(format!(
            "teacher width {d} cannot be mapped to student width {target}"
        )));
    }
    let k = d / target;
    let grouped = raw
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b, c, s, target, k))
        .expect("group reshape");
    Ok(grouped.mean_axis(Axis(4)).expect("non-empty group"))
}

/// Deterministic layer stack for a batch: the informative layer holds a
/// class-specific waveform over the lower half of the spectrum plus a
/// little noise, every other layer holds class-independent Gaussian noise.
/// All layers are rescaled to the same mean power `1 / T`.
pub fn inject_informative_layer(cfg: &TeacherConfig, batch: &EpochBatch) -> Result<LayerFeatureStack> {
    cfg.validate()?;
    let informative = cfg
        .informative_layer
        .ok_or_else(|| DlinkError::Config("inject_informative_layer needs informative_layer".into()))?;
    let (b, c, s, _) = batch.dims();
    let t = cfg.feature_dim;
    let target_power = 1.0 / t as f64;

    let patterns = class_patterns(cfg, batch.num_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ batch_fingerprint(batch));
    let noise_std = cfg.injection_noise.sqrt();
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 1..=cfg.layers {
        let mut x = Array4::<f64>::zeros((b, c, s, t));
        if l == informative {
            for (i, mut sample) in x.outer_iter_mut().enumerate() {
                let pattern = &patterns[batch.labels[i]];
                for mut lane in sample.lanes_mut(Axis(2)) {
                    for (v, &p) in lane.iter_mut().zip(pattern) {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *v = p + noise_std * z;
                    }
                }
            }
        } else {
            x.mapv_inplace(|_| StandardNormal.sample(&mut rng));
        }
        let power = x.mapv(|v| v * v).mean().unwrap_or(0.0);
        if power > 0.0 {
            x *= (target_power / power).sqrt();
        }
        layers.push(x);
    }
    let stack = LayerFeatureStack { layers };
    stack.validate()?;
    Ok(stack)
}

/// Unit-power waveform per class: equal-amplitude cosines at bins
/// `1..=T/4` with class-specific phases.
fn class_patterns(cfg: &TeacherConfig, num_classes: usize) -> Vec<Vec<f64>> {
    let t = cfg.feature_dim;
    let top = (t / 4).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7061_7474_6572_6e73);
    (0..num_classes)
        .map(|_| {
            let phases: Vec<f64> = (0..top).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            let mut wave: Vec<f64> = (0..t)
                .map(|n| {
                    phases
                        .iter()
                        .enumerate()
                        .map(|(j, ph)| {
                            (std::f64::consts::TAU * (j + 1) as f64 * n as f64 / t as f64 + ph).cos()
                        })
                        .sum()
                })
                .collect();
            let power = wave.iter().map(|v| v * v).sum::<f64>() / t as f64;
            if power > 0.0 {
                wave.iter_mut().for_each(|v| *v /= power.sqrt());
            }
            wave
        })
        .collect()
}

/// FNV-1a over labels and signal bits, so distinct batches draw distinct
/// noise while a batch always draws the same.
fn batch_fingerprint(batch: &EpochBatch) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &byte in bytes {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for &y in &batch.labels {
        eat(&(y as u64).to_le_bytes());
    }
    for v in batch.signals.iter() {
        eat(&v.to_bits().to_le_bytes());
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SignalConfig};

    fn small_signal() -> SignalConfig {
        SignalConfig {
            sample_rate: 32.0,
            channels: 2,
            segments: 3,
            patch_len: 8,
            num_classes: 2,
            class_bands: vec![crate::synth::ClassBand::new(3.0, 5.0, 1.0), crate::synth::ClassBand::new(9.0, 11.0, 1.0)],
            noise_std: 0.1,
            seed: 1,
        }
    }

    fn small_teacher(layers: usize) -> TeacherConfig {
        TeacherConfig {
            layers,
            feature_dim: 8,
            heads: 2,
            ffn_dim: 16,
            head_hidden: 8,
            pretrain_epochs: 2,
            pretrain_batch: 8,
            ..TeacherConfig::default()
        }
    }

    #[test]
    fn forward_returns_every_layer() {
        let data = generate(&small_signal(), 5).unwrap();
        let teacher = Teacher::new(small_teacher(3), InputDims::of(&data)).unwrap();
        let (stack, logits) = teacher.forward_all_layers(&data).unwrap();
        assert_eq!(stack.num_layers(), 3);
        assert_eq!(stack.dims(), (5, 2, 3, 8));
        assert_eq!(logits.dim(), (5, 2));
    }

    #[test]
    fn forward_is_chunk_invariant() {
        let data = generate(&small_signal(), 70).unwrap();
        let teacher = Teacher::new(small_teacher(1), InputDims::of(&data)).unwrap();
        let (all, _) = teacher.forward_all_layers(&data).unwrap();
        let tail = data.subset(&[66, 67, 68, 69]);
        let (part, _) = teacher.forward_all_layers(&tail).unwrap();
        let diff = (&all.layers[0].slice(s![66.., .., .., ..]) - &part.layers[0]).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-12));
    }

    #[test]
    fn mismatched_input_is_incompatible() {
        let data = generate(&small_signal(), 2).unwrap();
        let mut dims = InputDims::of(&data);
        dims.channels = 5;
        let teacher = Teacher::new(small_teacher(1), dims).unwrap();
        assert!(matches!(teacher.forward_all_layers(&data), Err(DlinkError::Incompatible(_))));
    }

    #[test]
    fn complexity_matches_store() {
        let data = generate(&small_signal(), 2).unwrap();
        let teacher = Teacher::new(small_teacher(2), InputDims::of(&data)).unwrap();
        assert_eq!(teacher.complexity().params, teacher.store.num_scalars() as u64);
    }

    #[test]
    fn pretraining_reduces_loss_and_checkpoint_round_trips() {
        let data = generate(&small_signal(), 32).unwrap();
        let mut cfg = small_teacher(1);
        cfg.pretrain_epochs = 15;
        let mut teacher = Teacher::new(cfg, InputDims::of(&data)).unwrap();
        let report = teacher.pretrain(&data).unwrap();
        assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        teacher.save(&path).unwrap();
        let back = Teacher::load(&path).unwrap();
        assert_eq!(back.store.checksum(), teacher.store.checksum());
        assert!(matches!(
            checkpoint::load::<serde_json::Value>(&path, "student"),
            Err(DlinkError::Format(_))
        ));
    }

    #[test]
    fn unify_identity_and_grouping() {
        let x = Array4::from_shape_fn((1, 1, 1, 4), |(_, _, _, t)| t as f64);
        assert_eq!(unify_feature_space(&x, 4).unwrap(), x);
        let y = unify_feature_space(&x, 2).unwrap();
        assert_eq!(y.iter().copied().collect::<Vec<_>>(), vec![0.5, 2.5]);
        assert!(matches!(unify_feature_space(&x, 3), Err(DlinkError::Incompatible(_))));
        assert!(matches!(unify_feature_space(&x, 8), Err(DlinkError::Incompatible(_))));
    }

    #[test]
    fn injected_layers_share_power_and_are_deterministic() {
        let data = generate(&small_signal(), 6).unwrap();
        let cfg = TeacherConfig {
            informative_layer: Some(2),
            ..small_teacher(4)
        };
        let a = inject_informative_layer(&cfg, &data).unwrap();
        let b = inject_informative_layer(&cfg, &data).unwrap();
        assert_eq!(a, b);
        for x in &a.layers {
            let p = x.mapv(|v| v * v).mean().unwrap();
            assert!((p - 1.0 / 8.0).abs() < 1e-12);
        }
        // same class, same lane: informative layer nearly repeats
        let first = data.labels[0];
        let other = (1..6).find(|&i| data.labels[i] == first).unwrap();
        let d_inf = (&a.layers[1].slice(s![0, .., .., ..]) - &a.layers[1].slice(s![other, .., .., ..]))
            .mapv(|v| v * v)
            .mean()
            .unwrap();
        let d_noise = (&a.layers[0].slice(s![0, .., .., ..]) - &a.layers[0].slice(s![other, .., .., ..]))
            .mapv(|v| v * v)
            .mean()
            .unwrap();
        assert!(d_inf < 0.5 * d_noise);
    }

    #[test]
    fn injection_requires_a_layer() {
        let data = generate(&small_signal(), 2).unwrap();
        assert!(matches!(
            inject_informative_layer(&small_teacher(2), &data),
            Err(DlinkError::Config(_))
        ));
    }
}
