//! Objective, training loop, baselines and evaluation.
//!
//! Teacher targets (per-layer spectra, saliency scores, last-layer
//! features, logits) are computed once per dataset; the teacher is frozen
//! so they never change during training.

use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::error::{DlinkError, Result};
use crate::metrics::{metric_report, MetricReport};
use crate::optim::{AdamW, AdamWConfig};
use crate::router::{build_router_input, fixed_route, psd_supervision_loss_var, FixedRoute, Router};
use crate::spectral::{
    saliency_scores, spectral_discrepancy_per_sample, spectral_discrepancy_var, spectrum_var, DftBasis, PsdScores,
    SaliencyMetric, SpectralRep, SpectralVars,
};
use crate::student::{MimicMode, Student};
use crate::synth::EpochBatch;
use crate::teacher::{to4, LayerFeatureStack, Teacher};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Full objective with the router.
    #[default]
    None,
    /// Cross-entropy only.
    NoDistill,
    /// Temperature-softened KL to the teacher logits.
    LogitKd,
    /// MSE between mimic features and the teacher's last layer.
    FeatureMse,
}

impl FromStr for Baseline {
    type Err = DlinkError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Baseline::None),
            "no_distill" => Ok(Baseline::NoDistill),
            "logit_kd" => Ok(Baseline::LogitKd),
            "feature_mse" => Ok(Baseline::FeatureMse),
            other => Err(DlinkError::Config(format!("unknown baseline {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_cnn: bool,
    pub no_trans: bool,
    pub no_psd: bool,
    pub route_fixed_last: bool,
    pub route_fixed_avg: bool,
    pub metric: SaliencyMetric,
}

/// Named ablations accepted on the command line.
pub const ABLATION_NAMES: &[&str] = &[
    "none",
    "no_cnn",
    "no_trans",
    "no_psd",
    "route_fixed_last",
    "route_fixed_avg",
    "metric_mean_power",
    "metric_max_amp",
    "metric_psd",
];

impl Ablation {
    pub fn from_name(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "none" | "metric_psd" => {}
            "no_cnn" => a.no_cnn = true,
            "no_trans" => a.no_trans = true,
            "no_psd" => a.no_psd = true,
            "route_fixed_last" => a.route_fixed_last = true,
            "route_fixed_avg" => a.route_fixed_avg = true,
            "metric_mean_power" => a.metric = SaliencyMetric::MeanPower,
            "metric_max_amp" => a.metric = SaliencyMetric::MaxAmp,
            other => {
                return Err(DlinkError::Config(format!(
                    "unknown ablation {other:?}; expected one of {}",
                    ABLATION_NAMES.join(", ")
                )))
            }
        }
        Ok(a)
    }

    pub fn fixed_route(&self) -> Option<FixedRoute> {
        if self.route_fixed_last {
            Some(FixedRoute::Last)
        } else if self.route_fixed_avg {
            Some(FixedRoute::Avg)
        } else {
            None
        }
    }

    pub fn mimic_mode(&self) -> MimicMode {
        if self.no_cnn {
            MimicMode::NoCnn
        } else if self.no_trans {
            MimicMode::NoTrans
        } else {
            MimicMode::Hybrid
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Shared by the routing softmax and the PSD supervision loss.
    pub temperature: f64,
    pub kd_temperature: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub ablation: Ablation,
    pub baseline: Baseline,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.05,
            epochs: 100,
            batch_size: 64,
            lambda1: 0.5,
            lambda2: 1.0,
            temperature: 1.0,
            kd_temperature: 4.0,
            seed: 0,
            schedule: Schedule::Constant,
            ablation: Ablation::default(),
            baseline: Baseline::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DlinkError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return bad(format!("lambda1 and lambda2 must be finite and >= 0, got {} and {}", self.lambda1, self.lambda2));
        }
        if !(self.temperature > 0.0 && self.kd_temperature > 0.0) {
            return bad("temperatures must be positive".into());
        }
        let a = &self.ablation;
        if a.no_cnn && a.no_trans {
            return bad("no_cnn and no_trans together leave no mimic branch".into());
        }
        if a.route_fixed_last && a.route_fixed_avg {
            return bad("route_fixed_last and route_fixed_avg are exclusive".into());
        }
        Ok(())
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine => {
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * epoch as f64 / self.epochs as f64).cos())
            }
        }
    }
}

/// Independent seed for one named random stream.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    // splitmix64 finaliser over seed xor FNV-1a(stream)
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in stream.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_cls: f64,
    pub l_distill: f64,
    pub l_psd: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBundle {
    /// `|L_total - (L_cls + lambda1 L_distill + lambda2 L_psd)|`.
    pub fn residual(&self) -> f64 {
        (self.l_total - (self.l_cls + self.lambda1 * self.l_distill + self.lambda2 * self.l_psd)).abs()
    }
}

/// Precomputed, frozen teacher outputs for one dataset.
#[derive(Clone, Debug)]
pub struct TeacherTargets {
    pub spectra: Vec<SpectralRep>,
    pub scores: PsdScores,
    pub last_features: Array4<f64>,
    pub logits: Option<Array2<f64>>,
}

impl TeacherTargets {
    pub fn from_stack(stack: &LayerFeatureStack, logits: Option<Array2<f64>>, metric: SaliencyMetric) -> Result<Self> {
        stack.validate()?;
        let spectra = stack.spectra()?;
        let scores = saliency_scores(metric, &stack.layers, &spectra)?;
        Ok(Self {
            spectra,
            scores,
            last_features: stack.layers.last().expect("non-empty").clone(),
            logits,
        })
    }

    pub fn from_teacher(teacher: &Teacher, data: &EpochBatch, metric: SaliencyMetric) -> Result<Self> {
        let (stack, logits) = teacher.forward_all_layers(data)?;
        Self::from_stack(&stack, Some(logits), metric)
    }

    pub fn num_layers(&self) -> usize {
        self.spectra.len()
    }

    pub fn len(&self) -> usize {
        self.last_features.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One epoch of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub l_cls: f64,
    pub l_distill: f64,
    pub l_psd: f64,
    pub l_total: f64,
    /// Mean routing weights over the epoch's training samples; empty when
    /// no routing is involved.
    pub routing_weights: Vec<f64>,
    pub alpha: f64,
    pub val: Option<MetricReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<LossBundle>,
}

impl TrainingHistory {
    pub fn final_routing_weights(&self) -> Option<&[f64]> {
        self.epochs
            .last()
            .map(|e| e.routing_weights.as_slice())
            .filter(|w| !w.is_empty())
    }

    /// One JSON object per epoch.
    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for e in &self.epochs {
            serde_json::to_writer(&mut out, e)?;
            out.push(b'\n');
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| DlinkError::io(path, e))
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| DlinkError::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

fn check_labels(labels: &[usize], num_classes: usize) -> Result<()> {
    if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(DlinkError::Usage(format!("label {y} out of range for {num_classes} classes")));
    }
    Ok(())
}

/// Mean cross-entropy of `(B, N)` logits. Two classes use binary
/// cross-entropy on the logit difference, which is the same quantity.
pub fn classification_loss<'g>(logits: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(DlinkError::Usage(format!("logits {shape:?} do not match {} labels", labels.len())));
    }
    let (b, k) = (shape[0], shape[1]);
    check_labels(labels, k)?;
    let g = logits.graph();
    if k == 2 {
        let diff = g.constant(ndarray::arr2(&[[-1.0], [1.0]]).into_dyn());
        let z = logits.matmul(diff).reshape(&[b]);
        let y = g.constant(Tensor::from_shape_vec(ndarray::IxDyn(&[b]), labels.iter().map(|&y| y as f64).collect()).unwrap());
        return Ok(z.softplus().sub(z.mul(y)).mean_all());
    }
    let mut onehot = Tensor::zeros(ndarray::IxDyn(&[b, k]));
    for (i, &y) in labels.iter().enumerate() {
        onehot[[i, y]] = 1.0;
    }
    Ok(logits
        .log_softmax_last()
        .mul(g.constant(onehot))
        .sum_all()
        .scale(-1.0 / b as f64))
}

/// Assembles the bundle for concrete logits and precomputed loss terms.
pub fn total_loss(logits: &Array2<f64>, labels: &[usize], distill: f64, psd: f64, cfg: &TrainConfig) -> Result<LossBundle> {
    let g = Graph::new();
    let l_cls = classification_loss(g.constant(logits.clone().into_dyn()), labels)?.item();
    Ok(LossBundle {
        l_cls,
        l_distill: distill,
        l_psd: psd,
        l_total: l_cls + cfg.lambda1 * distill + cfg.lambda2 * psd,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
    })
}

/// `mean_b sum_l w[b, l] * d(student_b, teacher_l_b)`.
pub fn distill_loss(student: &SpectralRep, teachers: &[SpectralRep], weights: &Array2<f64>) -> Result<f64> {
    if teachers.len() != weights.ncols() {
        return Err(DlinkError::Usage(format!(
            "{} teacher layers but {} routing weights",
            teachers.len(),
            weights.ncols()
        )));
    }
    if weights.nrows() != student.dims().0 {
        return Err(DlinkError::Usage("routing weights and student batch differ in size".into()));
    }
    let mut per_sample = ndarray::Array1::<f64>::zeros(weights.nrows());
    for (l, t) in teachers.iter().enumerate() {
        per_sample += &(spectral_discrepancy_per_sample(student, t)? * &weights.column(l));
    }
    Ok(per_sample.mean().unwrap_or(0.0))
}

/// Graph form of [`distill_loss`]: `weights` is `(B, L)`.
pub fn distill_loss_var<'g>(student: &SpectralVars<'g>, teachers: &[SpectralVars<'g>], weights: Var<'g>) -> Var<'g> {
    let per_layer: Vec<Var<'g>> = teachers.iter().map(|t| spectral_discrepancy_var(student, t)).collect();
    Var::stack_last(&per_layer).mul(weights).sum_axis(1).mean_all()
}

/// `tau^2 KL(softmax(t / tau) || softmax(s / tau))`, batch mean.
pub fn logit_kd_loss<'g>(student_logits: Var<'g>, teacher_logits: &Array2<f64>, tau: f64) -> Var<'g> {
    let g = student_logits.graph();
    let t = teacher_logits / tau;
    let log_q = crate::autograd::log_softmax_last(&t.into_dyn());
    let q = log_q.mapv(f64::exp);
    let b = teacher_logits.nrows() as f64;
    let cross = student_logits.scale(1.0 / tau).log_softmax_last().mul(g.constant(q.clone())).sum_all();
    let entropy = (&q * &log_q).sum();
    cross.neg().add_scalar(entropy).scale(tau * tau / b)
}

/// Mean squared difference between mimic features and a target.
pub fn feature_mse_loss<'g>(f_mimic: Var<'g>, target: &Array4<f64>) -> Var<'g> {
    let g = f_mimic.graph();
    f_mimic.sub(g.constant(target.clone().into_dyn())).square().mean_all()
}

enum Objective<'a> {
    Supervised,
    Dlink { targets: &'a TeacherTargets, router: &'a mut Router },
    LogitKd { targets: &'a TeacherTargets },
    FeatureMse { targets: &'a TeacherTargets },
}

/// Distillation with the router. Student and router are updated in place.
pub fn run_distillation(
    train: &EpochBatch,
    val: Option<&EpochBatch>,
    targets: &TeacherTargets,
    student: &mut Student,
    router: &mut Router,
    cfg: &TrainConfig,
) -> Result<TrainingHistory> {
    if targets.num_layers() != router.config.layers {
        return Err(DlinkError::Incompatible(format!(
            "teacher has {} layers, router expects {}",
            targets.num_layers(),
            router.config.layers
        )));
    }
    if (router.config.temperature - cfg.temperature).abs() > 0.0 {
        return Err(DlinkError::Config(format!(
            "router temperature {} differs from training temperature {}",
            router.config.temperature, cfg.temperature
        )));
    }
    train_loop(train, val, Objective::Dlink { targets, router }, student, cfg)
}

/// Cross-entropy training without a teacher.
pub fn run_supervised(train: &EpochBatch, val: Option<&EpochBatch>, student: &mut Student, cfg: &TrainConfig) -> Result<TrainingHistory> {
    train_loop(train, val, Objective::Supervised, student, cfg)
}

/// Conventional distillation baselines; `lambda1` weights the KD term.
pub fn run_baseline_kd(
    kind: Baseline,
    train: &EpochBatch,
    val: Option<&EpochBatch>,
    targets: &TeacherTargets,
    student: &mut Student,
    cfg: &TrainConfig,
) -> Result<TrainingHistory> {
    let objective = match kind {
        Baseline::LogitKd => {
            if targets.logits.is_none() {
                return Err(DlinkError::Usage("logit_kd needs teacher logits".into()));
            }
            Objective::LogitKd { targets }
        }
        Baseline::FeatureMse => Objective::FeatureMse { targets },
        other => return Err(DlinkError::Usage(format!("{other:?} is not a KD baseline"))),
    };
    train_loop(train, val, objective, student, cfg)
}

fn train_loop(
    train: &EpochBatch,
    val: Option<&EpochBatch>,
    mut objective: Objective<'_>,
    student: &mut Student,
    cfg: &TrainConfig,
) -> Result<TrainingHistory> {
    cfg.validate()?;
    check_labels(&train.labels, student.config.num_classes)?;
    let (_, c, s, t) = train.dims();
    let sc = &student.config;
    if (c, s, t) != (sc.channels, sc.segments, sc.feature_dim) {
        return Err(DlinkError::Incompatible(format!(
            "student expects (C, S, T) = ({}, {}, {}), data has ({c}, {s}, {t})",
            sc.channels, sc.segments, sc.feature_dim
        )));
    }
    match &objective {
        Objective::Supervised => {}
        Objective::Dlink { targets, .. } | Objective::LogitKd { targets } | Objective::FeatureMse { targets } => {
            if targets.len() != train.len() {
                return Err(DlinkError::Incompatible("teacher targets and training set differ in size".into()));
            }
            if targets.last_features.dim() != (train.len(), c, s, t) {
                return Err(DlinkError::Incompatible(format!(
                    "teacher features {:?} do not match student features ({}, {c}, {s}, {t})",
                    targets.last_features.dim(),
                    train.len()
                )));
            }
        }
    }
    let basis = DftBasis::new(t);
    let x_all = train.signals_f64();
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "data-order"));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout"));
    let mut student_opt = AdamW::new(cfg.optimizer(), &student.store);
    let mut router_opt = match &objective {
        Objective::Dlink { router, .. } => Some(AdamW::new(cfg.optimizer(), &router.store)),
        _ => None,
    };
    let fixed = cfg.ablation.fixed_route();
    let lambda2 = if cfg.ablation.no_psd { 0.0 } else { cfg.lambda2 };
    let lambda1 = match objective {
        Objective::Supervised => 0.0,
        _ => cfg.lambda1,
    };

    let mut history = TrainingHistory::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut order_rng);
        let mut sums = LossBundle::default();
        let mut weight_sum: Vec<f64> = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let graph = Graph::new();
            let ps = student.store.bind(&graph, true);
            let x = graph.constant(x_all.select(Axis(0), chunk).into_dyn());
            let out = student.forward(&ps, x, Some(&mut dropout_rng));
            let l_cls = classification_loss(out.logits, &labels)?;

            let mut router_binding = None;
            let mut batch_weights = None;
            let (l_distill, l_psd) = match &objective {
                Objective::Supervised => (graph.scalar(0.0), graph.scalar(0.0)),
                Objective::Dlink { targets, router } => {
                    let spec = spectrum_var(out.mimic.f_mimic, &basis);
                    let teachers: Vec<SpectralVars<'_>> = targets
                        .spectra
                        .iter()
                        .map(|r| SpectralVars::constant(&graph, &r.select(chunk)))
                        .collect();
                    let (w, psd) = match fixed {
                        Some(kind) => {
                            let d = fixed_route(kind, targets.num_layers(), chunk.len())?;
                            (graph.constant(d.weights.into_dyn()), graph.scalar(0.0))
                        }
                        None => {
                            let pr = router.store.bind(&graph, true);
                            let z = build_router_input(out.mimic.f_mimic.detach(), spec.magnitude.detach())?;
                            let rv = router.forward(&pr, z);
                            let mut scores = targets.scores.select(chunk);
                            if router.config.batch_mean_scores {
                                scores = scores.batch_averaged();
                            }
                            let psd = psd_supervision_loss_var(rv.logits, &scores.per_sample, cfg.temperature)?;
                            router_binding = Some(pr);
                            (rv.weights, psd)
                        }
                    };
                    batch_weights = Some(w.value());
                    (distill_loss_var(&spec, &teachers, w), psd)
                }
                Objective::LogitKd { targets } => {
                    let tl = targets.logits.as_ref().expect("checked").select(Axis(0), chunk);
                    (logit_kd_loss(out.logits, &tl, cfg.kd_temperature), graph.scalar(0.0))
                }
                Objective::FeatureMse { targets } => {
                    let tf = targets.last_features.select(Axis(0), chunk);
                    (feature_mse_loss(out.mimic.f_mimic, &tf), graph.scalar(0.0))
                }
            };
            let total = l_cls.add(l_distill.scale(lambda1)).add(l_psd.scale(lambda2));
            let bundle = LossBundle {
                l_cls: l_cls.item(),
                l_distill: l_distill.item(),
                l_psd: l_psd.item(),
                l_total: total.item(),
                lambda1,
                lambda2,
            };
            if !bundle.l_total.is_finite() {
                return Err(DlinkError::Divergence {
                    epoch: epoch + 1,
                    step: history.steps.len() + 1,
                    detail: format!("non-finite loss {bundle:?}"),
                });
            }
            let grads = graph.backward(total);
            let g_student = ps.grads(&grads);
            let g_router = router_binding.as_ref().map(|pr| pr.grads(&grads));
            student_opt.step(&mut student.store, &g_student, lr);
            if let (Some(g), Objective::Dlink { router, .. }, Some(opt)) = (g_router, &mut objective, router_opt.as_mut()) {
                opt.step(&mut router.store, &g, lr);
            }

            let n = chunk.len() as f64;
            sums.l_cls += bundle.l_cls * n;
            sums.l_distill += bundle.l_distill * n;
            sums.l_psd += bundle.l_psd * n;
            sums.l_total += bundle.l_total * n;
            if let Some(w) = batch_weights {
                let col_sums = w.sum_axis(Axis(0));
                if weight_sum.is_empty() {
                    weight_sum = vec![0.0; col_sums.len()];
                }
                for (acc, v) in weight_sum.iter_mut().zip(col_sums.iter()) {
                    *acc += v;
                }
            }
            history.steps.push(bundle);
        }
        let n = train.len() as f64;
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            l_cls: sums.l_cls / n,
            l_distill: sums.l_distill / n,
            l_psd: sums.l_psd / n,
            l_total: sums.l_total / n,
            routing_weights: weight_sum.iter().map(|v| v / n).collect(),
            alpha: student.alpha(),
            val: val.map(|v| evaluate(student, v)).transpose()?,
        };
        log::info!(
            "epoch {} total {:.4} cls {:.4} distill {:.4} psd {:.4}",
            record.epoch,
            record.l_total,
            record.l_cls,
            record.l_distill,
            record.l_psd
        );
        history.epochs.push(record);
    }
    Ok(history)
}

/// Class probabilities `(N, N_cls)` in evaluation mode.
pub fn predict_proba(student: &Student, data: &EpochBatch) -> Result<Array2<f64>> {
    let x = data.signals_f64();
    let n = data.len();
    let mut rows = Vec::with_capacity(n);
    for start in (0..n).step_by(64) {
        let end = (start + 64).min(n);
        let g = Graph::new();
        let p = student.store.bind(&g, false);
        let out = student.forward(&p, g.constant(x.slice(s![start..end, .., .., ..]).to_owned().into_dyn()), None);
        let probs = out.logits.softmax_last();
        rows.push((*probs.value()).clone().into_dimensionality::<ndarray::Ix2>().expect("2-D"));
    }
    let views: Vec<_> = rows.iter().map(|a| a.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("batch concat"))
}

pub fn evaluate(student: &Student, data: &EpochBatch) -> Result<MetricReport> {
    check_labels(&data.labels, student.config.num_classes)?;
    metric_report(&predict_proba(student, data)?, &data.labels)
}

/// Mimic features and pooled (`D_t(D_s(.))`) features in evaluation mode.
pub fn compression_features(student: &Student, data: &EpochBatch) -> Result<(Array4<f64>, Array4<f64>)> {
    let x = data.signals_f64();
    let n = data.len();
    let (mut pre, mut post) = (Vec::new(), Vec::new());
    for start in (0..n).step_by(64) {
        let end = (start + 64).min(n);
        let g = Graph::new();
        let p = student.store.bind(&g, false);
        let m = student.mimic(&p, g.constant(x.slice(s![start..end, .., .., ..]).to_owned().into_dyn()));
        let c = student.compress(&p, m.f_mimic);
        pre.push(to4(&m.f_mimic.value()));
        post.push(to4(&c.pooled.value()));
    }
    let cat = |parts: Vec<Array4<f64>>| {
        let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("batch concat")
    };
    Ok((cat(pre), cat(post)))
}
