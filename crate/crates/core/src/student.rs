//! Mimic-then-compress student.
//!
//! The mimic stage blends a convolutional branch and a transformer branch
//! into features shaped like a teacher layer. The compress stage pools
//! channels (`D_s`) and time (`D_t`) with learned per-channel kernels whose
//! stride equals their size, then projects the time axis to a bottleneck.
//! The classifier reads the flattened compressed features.

use std::path::Path;

use ndarray::IxDyn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tensor, Var};
use crate::checkpoint;
use crate::error::{DlinkError, Result};
use crate::nn::{dropout_mask, linear_complexity, normal, uniform, Binding, Complexity, Linear, ParamId, ParamStore, TransformerBlock};
use crate::teacher::InputDims;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    MicS,
    MicM,
}

impl std::str::FromStr for Variant {
    type Err = DlinkError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "mic_s" => Ok(Variant::MicS),
            "mic_m" => Ok(Variant::MicM),
            other => Err(DlinkError::Config(format!("unknown student variant {other:?}"))),
        }
    }
}

/// Which mimic branches are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MimicMode {
    #[default]
    Hybrid,
    /// Transformer branch only (`alpha = 0`).
    NoCnn,
    /// Convolutional branch only (`alpha = 1`).
    NoTrans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub variant: Variant,
    pub channels: usize,
    pub segments: usize,
    /// Patch width `T`, shared with the teacher layers.
    pub feature_dim: usize,
    pub num_classes: usize,
    pub cnn_blocks: usize,
    pub cnn_kernel: usize,
    pub trans_blocks: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Channel pooling kernel and stride `k_s`.
    pub spatial_stride: usize,
    /// Time pooling kernel and stride `k_t`.
    pub temporal_stride: usize,
    pub bottleneck_dim: usize,
    /// Classifier hidden width `d_h`.
    pub hidden_dim: usize,
    pub dropout: f64,
    pub alpha_init: f64,
    pub mimic: MimicMode,
    pub seed: u64,
}

impl StudentConfig {
    pub fn preset(variant: Variant, dims: InputDims) -> Self {
        let t = dims.patch_len;
        let (cnn_blocks, trans_blocks, stride, bottleneck, hidden) = match variant {
            Variant::MicS => (1, 1, 4, 32, 100),
            Variant::MicM => (2, 2, 2, 64, 200),
        };
        Self {
            variant,
            channels: dims.channels,
            segments: dims.segments,
            feature_dim: t,
            num_classes: dims.num_classes,
            cnn_blocks,
            cnn_kernel: 7,
            trans_blocks,
            heads: if t % 4 == 0 { 4 } else { 1 },
            ffn_dim: 2 * t,
            spatial_stride: stride,
            temporal_stride: stride,
            bottleneck_dim: bottleneck,
            hidden_dim: hidden,
            dropout: 0.1,
            alpha_init: 0.5,
            mimic: MimicMode::Hybrid,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DlinkError::Config(m));
        if self.channels == 0 || self.segments == 0 || self.feature_dim == 0 || self.num_classes == 0 {
            return bad("student channels, segments, feature_dim and num_classes must be positive".into());
        }
        if self.spatial_stride == 0 || self.temporal_stride == 0 {
            return bad(format!(
                "pooling strides must be positive, got k_s = {}, k_t = {}",
                self.spatial_stride, self.temporal_stride
            ));
        }
        if self.bottleneck_dim == 0 || self.hidden_dim == 0 {
            return bad("bottleneck_dim and hidden_dim must be positive".into());
        }
        if self.mimic != MimicMode::NoCnn && (self.cnn_blocks == 0 || self.cnn_kernel % 2 == 0) {
            return bad(format!(
                "convolutional branch needs >= 1 block and an odd kernel, got {} blocks, kernel {}",
                self.cnn_blocks, self.cnn_kernel
            ));
        }
        if self.mimic != MimicMode::NoTrans {
            if self.trans_blocks == 0 || self.ffn_dim == 0 {
                return bad("transformer branch needs >= 1 block and ffn_dim > 0".into());
            }
            if self.heads == 0 || self.feature_dim % self.heads != 0 {
                return bad(format!("feature_dim {} not divisible by {} heads", self.feature_dim, self.heads));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !(self.alpha_init > 0.0 && self.alpha_init < 1.0) {
            return bad(format!("alpha_init must lie in (0, 1), got {}", self.alpha_init));
        }
        Ok(())
    }

    pub fn dims(&self) -> InputDims {
        InputDims {
            channels: self.channels,
            segments: self.segments,
            patch_len: self.feature_dim,
            num_classes: self.num_classes,
        }
    }

    /// Channels after spatial pooling, `ceil(C / k_s)`.
    pub fn pooled_channels(&self) -> usize {
        self.channels.div_ceil(self.spatial_stride)
    }

    /// Time steps after temporal pooling, `ceil(T / k_t)`.
    pub fn pooled_time(&self) -> usize {
        self.feature_dim.div_ceil(self.temporal_stride)
    }

    /// Length of the flattened compressed representation.
    pub fn compressed_len(&self) -> usize {
        self.pooled_channels() * self.segments * self.bottleneck_dim
    }
}

/// Parameters and per-sample FLOPs of the student, from the config alone.
pub fn count_params_flops(cfg: &StudentConfig) -> Complexity {
    let (c, s, t) = (cfg.channels, cfg.segments, cfg.feature_dim);
    let positions = (s * t) as u64;
    let mut total = Complexity::default();
    if cfg.mimic != MimicMode::NoCnn {
        let k = cfg.cnn_kernel as u64;
        let per_block = Complexity {
            params: c as u64 * k + c as u64,
            flops: 2 * k * c as u64 * positions,
        } + linear_complexity(c, c, s * t);
        total += Complexity {
            params: per_block.params * cfg.cnn_blocks as u64,
            flops: per_block.flops * cfg.cnn_blocks as u64,
        };
    }
    if cfg.mimic != MimicMode::NoTrans {
        let tokens = c * s;
        let pos = Complexity {
            params: (tokens * t) as u64,
            flops: 0,
        };
        let block = transformer_block_complexity(t, cfg.ffn_dim, tokens);
        total += pos
            + Complexity {
                params: block.params * cfg.trans_blocks as u64,
                flops: block.flops * cfg.trans_blocks as u64,
            };
    }
    if cfg.mimic == MimicMode::Hybrid {
        total += Complexity { params: 1, flops: 0 };
    }
    total + compression_complexity(cfg) + classifier_complexity(cfg)
}

fn transformer_block_complexity(dim: usize, ffn: usize, tokens: usize) -> Complexity {
    let norms = Complexity {
        params: 4 * dim as u64,
        flops: 0,
    };
    let proj = linear_complexity(dim, dim, tokens);
    let mixing = Complexity {
        params: 0,
        flops: 4 * (tokens * tokens * dim) as u64,
    };
    norms + proj + proj + proj + proj + mixing + linear_complexity(dim, ffn, tokens) + linear_complexity(ffn, dim, tokens)
}

/// `D_s`, `D_t` and the bottleneck projection.
pub fn compression_complexity(cfg: &StudentConfig) -> Complexity {
    let (cp, tp) = (cfg.pooled_channels() as u64, cfg.pooled_time() as u64);
    let (ks, kt) = (cfg.spatial_stride as u64, cfg.temporal_stride as u64);
    let (s, t) = (cfg.segments as u64, cfg.feature_dim as u64);
    let ds = Complexity {
        params: cp * ks + cp,
        flops: 2 * cp * ks * s * t,
    };
    let dt = Complexity {
        params: cp * kt + cp,
        flops: 2 * cp * s * tp * kt,
    };
    ds + dt + linear_complexity(cfg.pooled_time(), cfg.bottleneck_dim, cfg.pooled_channels() * cfg.segments)
}

/// Two-layer head on the compressed features.
pub fn classifier_complexity(cfg: &StudentConfig) -> Complexity {
    linear_complexity(cfg.compressed_len(), cfg.hidden_dim, 1) + linear_complexity(cfg.hidden_dim, cfg.num_classes, 1)
}

/// The same head applied to uncompressed `(C, S, T)` features.
pub fn flatten_classifier_complexity(c: usize, s: usize, t: usize, hidden: usize, num_classes: usize) -> Complexity {
    linear_complexity(c * s * t, hidden, 1) + linear_complexity(hidden, num_classes, 1)
}

#[derive(Clone, Debug)]
struct CnnBlock {
    dw_weight: ParamId,
    dw_bias: ParamId,
    pointwise: Linear,
}

#[derive(Clone, Debug)]
struct Compression {
    ds_weight: ParamId,
    ds_bias: ParamId,
    dt_weight: ParamId,
    dt_bias: ParamId,
    bottleneck: Linear,
}

/// Intermediate mimic outputs, each `(B, C, S, T)`.
#[derive(Clone, Copy, Debug)]
pub struct MimicVars<'g> {
    pub f_cnn: Option<Var<'g>>,
    pub f_trans: Option<Var<'g>>,
    pub alpha: Option<Var<'g>>,
    pub f_mimic: Var<'g>,
}

#[derive(Clone, Copy, Debug)]
pub struct CompressVars<'g> {
    /// After `D_s` and `D_t`: `(B, C', S, T')`.
    pub pooled: Var<'g>,
    /// After the bottleneck: `(B, C', S, bottleneck)`.
    pub f_comp: Var<'g>,
}

#[derive(Clone, Copy, Debug)]
pub struct StudentOutputs<'g> {
    pub mimic: MimicVars<'g>,
    pub compress: CompressVars<'g>,
    pub logits: Var<'g>,
}

#[derive(Clone, Debug)]
pub struct Student {
    pub config: StudentConfig,
    pub store: ParamStore,
    cnn: Vec<CnnBlock>,
    pos: Option<ParamId>,
    trans: Vec<TransformerBlock>,
    alpha_raw: Option<ParamId>,
    comp: Compression,
    fc1: Linear,
    fc2: Linear,
}

const KIND: &str = "student";

impl Student {
    pub fn new(config: StudentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (c, t) = (config.channels, config.feature_dim);

        let mut cnn = Vec::new();
        if config.mimic != MimicMode::NoCnn {
            for i in 0..config.cnn_blocks {
                let k = config.cnn_kernel;
                let bound = 1.0 / (k as f64).sqrt();
                cnn.push(CnnBlock {
                    dw_weight: store.add(format!("cnn{i}.dw.weight"), uniform(&[c, k], bound, &mut rng)),
                    dw_bias: store.add(format!("cnn{i}.dw.bias"), uniform(&[c], bound, &mut rng)),
                    pointwise: Linear::new(&mut store, &format!("cnn{i}.pw"), c, c, &mut rng),
                });
            }
        }
        let (mut pos, mut trans) = (None, Vec::new());
        if config.mimic != MimicMode::NoTrans {
            pos = Some(store.add("trans.pos", normal(&[c * config.segments, t], 0.02, &mut rng)));
            for i in 0..config.trans_blocks {
                trans.push(TransformerBlock::new(
                    &mut store,
                    &format!("trans{i}"),
                    t,
                    config.heads,
                    config.ffn_dim,
                    &mut rng,
                ));
            }
        }
        let alpha_raw = (config.mimic == MimicMode::Hybrid).then(|| {
            let a = config.alpha_init;
            store.add("alpha", Tensor::from_elem(IxDyn(&[1]), (a / (1.0 - a)).ln()))
        });

        let (cp, tp) = (config.pooled_channels(), config.pooled_time());
        let (ks, kt) = (config.spatial_stride, config.temporal_stride);
        // start as averaging pools
        let comp = Compression {
            ds_weight: store.add("ds.weight", Tensor::from_elem(IxDyn(&[cp, ks]), 1.0 / ks as f64)),
            ds_bias: store.add("ds.bias", Tensor::zeros(IxDyn(&[cp]))),
            dt_weight: store.add("dt.weight", Tensor::from_elem(IxDyn(&[cp, kt]), 1.0 / kt as f64)),
            dt_bias: store.add("dt.bias", Tensor::zeros(IxDyn(&[cp]))),
            bottleneck: Linear::new(&mut store, "bottleneck", tp, config.bottleneck_dim, &mut rng),
        };
        let fc1 = Linear::new(&mut store, "fc1", config.compressed_len(), config.hidden_dim, &mut rng);
        let fc2 = Linear::new(&mut store, "fc2", config.hidden_dim, config.num_classes, &mut rng);
        Ok(Self {
            config,
            store,
            cnn,
            pos,
            trans,
            alpha_raw,
            comp,
            fc1,
            fc2,
        })
    }

    /// Makes `D_s`, `D_t` and the bottleneck exact identities. Needs
    /// `k_s = k_t = 1` and `bottleneck_dim = T`.
    pub fn set_identity_compression(&mut self) -> Result<()> {
        let cfg = &self.config;
        if cfg.spatial_stride != 1 || cfg.temporal_stride != 1 || cfg.bottleneck_dim != cfg.feature_dim {
            return Err(DlinkError::Usage(
                "identity compression needs k_s = k_t = 1 and bottleneck_dim = feature_dim".into(),
            ));
        }
        let t = cfg.feature_dim;
        self.store.get_mut(self.comp.ds_weight).fill(1.0);
        self.store.get_mut(self.comp.ds_bias).fill(0.0);
        self.store.get_mut(self.comp.dt_weight).fill(1.0);
        self.store.get_mut(self.comp.dt_bias).fill(0.0);
        let w = self.store.get_mut(self.comp.bottleneck.weight);
        w.fill(0.0);
        for i in 0..t {
            w[[i, i]] = 1.0;
        }
        self.store.get_mut(self.comp.bottleneck.bias.unwrap()).fill(0.0);
        Ok(())
    }

    /// Current blend weight of the convolutional branch.
    pub fn alpha(&self) -> f64 {
        match (self.config.mimic, self.alpha_raw) {
            (MimicMode::NoCnn, _) => 0.0,
            (MimicMode::NoTrans, _) => 1.0,
            (_, Some(id)) => 1.0 / (1.0 + (-self.store.get(id)[[0]]).exp()),
            (_, None) => unreachable!("hybrid student has alpha"),
        }
    }

    fn cnn_branch<'g>(&self, p: &Binding<'g>, x: Var<'g>) -> Var<'g> {
        let mut h = x;
        for (i, block) in self.cnn.iter().enumerate() {
            h = h.depthwise_conv_time(p.get(block.dw_weight), p.get(block.dw_bias));
            h = block.pointwise.forward(p, h.permute(&[0, 2, 3, 1])).permute(&[0, 3, 1, 2]);
            if i + 1 < self.cnn.len() {
                h = h.gelu();
            }
        }
        h
    }

    fn trans_branch<'g>(&self, p: &Binding<'g>, x: Var<'g>) -> Var<'g> {
        let shape = x.shape();
        let (b, c, s, t) = (shape[0], shape[1], shape[2], shape[3]);
        let mut h = x.reshape(&[b, c * s, t]).add(p.get(self.pos.expect("transformer branch")));
        for block in &self.trans {
            h = block.forward(p, h);
        }
        h.reshape(&[b, c, s, t])
    }

    /// `f_mimic = alpha * f_cnn + (1 - alpha) * f_trans` on `(B, C, S, T)`.
    pub fn mimic<'g>(&self, p: &Binding<'g>, x: Var<'g>) -> MimicVars<'g> {
        match self.config.mimic {
            MimicMode::NoCnn => {
                let f = self.trans_branch(p, x);
                MimicVars {
                    f_cnn: None,
                    f_trans: Some(f),
                    alpha: None,
                    f_mimic: f,
                }
            }
            MimicMode::NoTrans => {
                let f = self.cnn_branch(p, x);
                MimicVars {
                    f_cnn: Some(f),
                    f_trans: None,
                    alpha: None,
                    f_mimic: f,
                }
            }
            MimicMode::Hybrid => {
                let f_cnn = self.cnn_branch(p, x);
                let f_trans = self.trans_branch(p, x);
                let alpha = p.get(self.alpha_raw.expect("hybrid alpha")).sigmoid();
                let f_mimic = f_cnn.mul(alpha).add(f_trans.mul(alpha.neg().add_scalar(1.0)));
                MimicVars {
                    f_cnn: Some(f_cnn),
                    f_trans: Some(f_trans),
                    alpha: Some(alpha),
                    f_mimic,
                }
            }
        }
    }

    /// Blend with a fixed `alpha`, bypassing the learned one.
    pub fn mimic_with_alpha<'g>(&self, p: &Binding<'g>, x: Var<'g>, alpha: f64) -> Result<Var<'g>> {
        if self.config.mimic != MimicMode::Hybrid {
            return Err(DlinkError::Usage("a fixed alpha needs both mimic branches".into()));
        }
        let f_cnn = self.cnn_branch(p, x);
        let f_trans = self.trans_branch(p, x);
        Ok(f_cnn.scale(alpha).add(f_trans.scale(1.0 - alpha)))
    }

    /// `D_t(D_s(f_mimic))` followed by the bottleneck projection.
    pub fn compress<'g>(&self, p: &Binding<'g>, f_mimic: Var<'g>) -> CompressVars<'g> {
        let shape = f_mimic.shape();
        let (b, s) = (shape[0], shape[2]);
        let cfg = &self.config;
        let (cp, ks, kt, tp) = (
            cfg.pooled_channels(),
            cfg.spatial_stride,
            cfg.temporal_stride,
            cfg.pooled_time(),
        );
        let t = cfg.feature_dim;
        let spatial = f_mimic
            .pad_axis(1, cp * ks)
            .reshape(&[b, cp, ks, s, t])
            .mul(p.get(self.comp.ds_weight).reshape(&[1, cp, ks, 1, 1]))
            .sum_axis(2)
            .add(p.get(self.comp.ds_bias).reshape(&[1, cp, 1, 1]));
        let pooled = spatial
            .pad_axis(3, tp * kt)
            .reshape(&[b, cp, s, tp, kt])
            .mul(p.get(self.comp.dt_weight).reshape(&[1, cp, 1, 1, kt]))
            .sum_axis(4)
            .add(p.get(self.comp.dt_bias).reshape(&[1, cp, 1, 1]));
        let f_comp = self.comp.bottleneck.forward(p, pooled);
        CompressVars { pooled, f_comp }
    }

    /// `Linear(Dropout(ELU(Linear(flatten(f_comp)))))`; dropout is active
    /// only when an RNG is given.
    pub fn classify<'g>(&self, p: &Binding<'g>, f_comp: Var<'g>, dropout: Option<&mut ChaCha8Rng>) -> Var<'g> {
        let b = f_comp.shape()[0];
        let mut h = self
            .fc1
            .forward(p, f_comp.reshape(&[b, self.config.compressed_len()]))
            .elu();
        if let Some(rng) = dropout {
            if self.config.dropout > 0.0 {
                let mask = dropout_mask(&h.shape(), self.config.dropout, rng);
                h = h.mul(h.graph().constant(mask));
            }
        }
        self.fc2.forward(p, h)
    }

    pub fn forward<'g>(&self, p: &Binding<'g>, x: Var<'g>, dropout: Option<&mut ChaCha8Rng>) -> StudentOutputs<'g> {
        let mimic = self.mimic(p, x);
        let compress = self.compress(p, mimic.f_mimic);
        let logits = self.classify(p, compress.f_comp, dropout);
        StudentOutputs {
            mimic,
            compress,
            logits,
        }
    }

    pub fn complexity(&self) -> Complexity {
        count_params_flops(&self.config)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::save(path, KIND, &self.config, &self.store)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (config, tensors) = checkpoint::load(path, KIND)?;
        let mut student = Student::new(config)?;
        checkpoint::restore(&mut student.store, tensors)?;
        Ok(student)
    }
}
