//! Subcommand implementations. Each writes its artifacts under the run
//! directory `output_dir/run_name` and returns a one-line summary.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use dlink::config::{ExperimentConfig, Splits};
use dlink::metrics::{aggregate, metric_report, MetricReport, MetricSummary};
use dlink::probe::{linear_probe_layers, probe_stack};
use dlink::router::{write_routing_csv, Router};
use dlink::spectral::{highfreq_tail_energy, lowband_energy, spectrum_rows, write_spectrum_csv, SaliencyMetric};
use dlink::student::Student;
use dlink::synth::{generate, load_epochs, save_epochs, EpochBatch};
use dlink::teacher::{inject_informative_layer, InputDims, Teacher, TeacherMode};
use dlink::training::{
    compression_features, evaluate, run_baseline_kd, run_distillation, run_supervised, Ablation, Baseline,
    TeacherTargets, TrainingHistory,
};
use dlink::{DlinkError, Result};

/// Cutoff, as a fraction of Nyquist, for the tail and low-band diagnostics.
pub const TAIL_CUTOFF: f64 = 0.5;

pub struct Ctx {
    pub output_root: Option<PathBuf>,
}

impl Ctx {
    fn run_dir(&self, cfg: &ExperimentConfig) -> Result<PathBuf> {
        let dir = cfg.run_dir(self.output_root.as_deref());
        create_dir(&dir)?;
        Ok(dir)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| DlinkError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| DlinkError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| DlinkError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Configured data, from `data` when given, otherwise generated.
fn load_all(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<EpochBatch> {
    let Some(path) = data else {
        return generate(&cfg.signal, cfg.data.samples);
    };
    let all = load_epochs(path)?;
    if InputDims::of(&all) != cfg.dims() {
        return Err(DlinkError::Incompatible(format!(
            "{} has dims {:?}, config expects {:?}",
            path.display(),
            InputDims::of(&all),
            cfg.dims()
        )));
    }
    Ok(all)
}

fn load_splits(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Splits> {
    cfg.split(&load_all(cfg, data)?)
}

// ----------------------------------------------------------------------
// gen-data
// ----------------------------------------------------------------------

/// Per-class mean power inside every class band, rows = class.
#[derive(Debug, Serialize)]
pub struct BandCheck {
    pub band_power: Vec<Vec<f64>>,
    pub passed: bool,
}

/// Each class must put more mean power in its own band than in any other
/// class's band.
pub fn verify_bands(cfg: &ExperimentConfig, batch: &EpochBatch) -> Result<BandCheck> {
    let k = cfg.signal.num_classes;
    let mut band_power = vec![vec![0.0; k]; k];
    for (class, row) in band_power.iter_mut().enumerate() {
        let idx: Vec<usize> = (0..batch.len()).filter(|&i| batch.labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        let spectrum = spectrum_rows(&batch.subset(&idx).signals_f64().into_dyn(), cfg.signal.sample_rate)?;
        for (other, band) in cfg.signal.class_bands.iter().enumerate() {
            row[other] = spectrum
                .iter()
                .filter(|r| r.frequency >= band.low && r.frequency <= band.high)
                .map(|r| r.mean_power)
                .sum();
        }
    }
    let passed = band_power
        .iter()
        .enumerate()
        .all(|(c, row)| row.iter().enumerate().all(|(o, &p)| o == c || row[c] > p));
    Ok(BandCheck { band_power, passed })
}

pub fn gen_data(
    ctx: &Ctx,
    mut cfg: ExperimentConfig,
    out: Option<PathBuf>,
    seed: Option<u64>,
    samples: Option<usize>,
    verify: bool,
) -> Result<String> {
    if let Some(s) = seed {
        cfg.signal.seed = s;
    }
    let n = samples.unwrap_or(cfg.data.samples);
    let batch = generate(&cfg.signal, n)?;
    let path = match out {
        Some(p) => p,
        None => ctx.run_dir(&cfg)?.join("data.epochs"),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    save_epochs(&batch, &path)?;
    let (b, c, s, p) = batch.dims();
    let mut summary = format!(
        "wrote {} (B={b}, C={c}, S={s}, P={p}); class counts {:?}",
        path.display(),
        batch.class_counts()
    );
    if verify {
        let check = verify_bands(&cfg, &batch)?;
        for (class, row) in check.band_power.iter().enumerate() {
            info!("class {class} band power {row:?}");
        }
        if !check.passed {
            return Err(DlinkError::Format(format!(
                "band-energy verification failed: {:?}",
                check.band_power
            )));
        }
        summary.push_str("; band energy verified");
    }
    Ok(summary)
}

// ----------------------------------------------------------------------
// train-teacher
// ----------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct TeacherMetrics {
    pub train_accuracy: Option<f64>,
    pub test: MetricReport,
    pub params: u64,
    pub flops: u64,
}

#[derive(Serialize)]
struct TeacherEpoch {
    epoch: usize,
    loss: f64,
}

fn teacher_dir(ctx: &Ctx, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = ctx.run_dir(cfg)?.join("teacher");
    create_dir(&dir)?;
    Ok(dir)
}

pub fn train_teacher(ctx: &Ctx, cfg: ExperimentConfig, data: Option<&Path>) -> Result<String> {
    if cfg.teacher.informative_layer.is_some() {
        return Err(DlinkError::Usage(
            "teacher.informative_layer is set: the injected teacher has no parameters to train".into(),
        ));
    }
    let splits = load_splits(&cfg, data)?;
    let mut teacher = Teacher::new(cfg.teacher.clone(), cfg.dims())?;
    let dir = teacher_dir(ctx, &cfg)?;
    let mut history = String::new();
    let train_accuracy = match cfg.teacher.mode {
        TeacherMode::Pretrain => {
            let report = teacher.pretrain(&splits.train)?;
            for (epoch, &loss) in report.epoch_losses.iter().enumerate() {
                history.push_str(&serde_json::to_string(&TeacherEpoch { epoch: epoch + 1, loss })?);
                history.push('\n');
            }
            Some(report.train_accuracy)
        }
        TeacherMode::FrozenRandom => None,
    };
    let test = metric_report(&teacher.predict_proba(&splits.test)?, &splits.test.labels)?;
    let cost = teacher.complexity();
    teacher.save(dir.join("teacher.ckpt"))?;
    fs::write(dir.join("history.jsonl"), history).map_err(|e| DlinkError::io(dir.join("history.jsonl"), e))?;
    write_json(
        &dir.join("metrics.json"),
        &TeacherMetrics {
            train_accuracy,
            test,
            params: cost.params,
            flops: cost.flops,
        },
    )?;
    Ok(format!(
        "teacher saved to {}; test balanced accuracy {:.4}",
        dir.display(),
        test.acc_balanced
    ))
}

// ----------------------------------------------------------------------
// distill
// ----------------------------------------------------------------------

/// Everything recorded for one seed of one variant.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub variant: String,
    pub test: MetricReport,
    pub student_params: u64,
    pub student_flops: u64,
    pub router_params: u64,
    pub router_flops: u64,
    pub final_routing_weights: Vec<f64>,
    pub alpha: f64,
    /// Largest `|L_total - (L_cls + l1 L_distill + l2 L_psd)|` over steps.
    pub max_loss_residual: f64,
    pub tail_energy_pre: f64,
    pub tail_energy_post: f64,
    pub lowband_energy_pre: f64,
    /// Sampling rate of the time axis before and after temporal pooling.
    pub sample_rate_pre: f64,
    pub sample_rate_post: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantMetrics {
    pub variant: String,
    pub student: String,
    pub runs: Vec<SeedMetrics>,
    pub summary: MetricSummary,
}

/// Directory name for an ablation or baseline run.
pub fn variant_name(ablation: &str, baseline: Baseline) -> String {
    match baseline {
        Baseline::None if ablation == "none" => "dlink".into(),
        Baseline::None => ablation.into(),
        Baseline::NoDistill => "no_distill".into(),
        Baseline::LogitKd => "logit_kd".into(),
        Baseline::FeatureMse => "feature_mse".into(),
    }
}

fn teacher_targets(
    ctx: &Ctx,
    cfg: &ExperimentConfig,
    teacher_path: Option<&Path>,
    train: &EpochBatch,
    metric: SaliencyMetric,
) -> Result<TeacherTargets> {
    if cfg.teacher.informative_layer.is_some() {
        let stack = inject_informative_layer(&cfg.teacher, train)?;
        return TeacherTargets::from_stack(&stack, None, metric);
    }
    let teacher = load_teacher(ctx, cfg, teacher_path)?;
    TeacherTargets::from_teacher(&teacher, train, metric)
}

fn load_teacher(ctx: &Ctx, cfg: &ExperimentConfig, teacher_path: Option<&Path>) -> Result<Teacher> {
    let path = match teacher_path {
        Some(p) => p.to_path_buf(),
        None => cfg.run_dir(ctx.output_root.as_deref()).join("teacher").join("teacher.ckpt"),
    };
    if !path.exists() {
        return Err(DlinkError::Usage(format!(
            "teacher checkpoint {} not found; run train-teacher first",
            path.display()
        )));
    }
    let teacher = Teacher::load(&path)?;
    if teacher.config.layers != cfg.router.layers {
        return Err(DlinkError::Incompatible(format!(
            "teacher checkpoint has {} layers, router expects {}",
            teacher.config.layers, cfg.router.layers
        )));
    }
    Ok(teacher)
}

pub struct DistillArgs {
    pub ablation: String,
    pub baseline: Baseline,
    pub seeds: Option<usize>,
    pub data: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
}

pub fn distill(ctx: &Ctx, cfg: ExperimentConfig, args: DistillArgs) -> Result<String> {
    let ablation = Ablation::from_name(&args.ablation)?;
    if args.baseline != Baseline::None && args.ablation != "none" {
        return Err(DlinkError::Usage("--ablation and --baseline are exclusive".into()));
    }
    let seeds = args.seeds.unwrap_or(cfg.seeds);
    if seeds == 0 {
        return Err(DlinkError::Usage("--seeds must be positive".into()));
    }
    let splits = load_splits(&cfg, args.data.as_deref())?;
    let targets = match args.baseline {
        Baseline::NoDistill => None,
        _ => Some(teacher_targets(
            ctx,
            &cfg,
            args.teacher.as_deref(),
            &splits.train,
            ablation.metric,
        )?),
    };
    let name = variant_name(&args.ablation, args.baseline);
    let dir = ctx.run_dir(&cfg)?.join(&name);
    create_dir(&dir)?;
    let mut runs = Vec::with_capacity(seeds);
    for k in 0..seeds {
        let seed = cfg.train.seed + k as u64;
        info!("{name}: seed {seed} ({}/{seeds})", k + 1);
        let m = distill_seed(&cfg, &splits, targets.as_ref(), &ablation, args.baseline, seed, &dir.join(format!("seed_{seed}")), &name)?;
        info!("{name}: seed {seed} test balanced accuracy {:.4}", m.test.acc_balanced);
        runs.push(m);
    }
    let reports: Vec<MetricReport> = runs.iter().map(|r| r.test).collect();
    let summary = aggregate(&reports)?;
    let student = format!("{:?}", cfg.student.variant);
    write_json(
        &dir.join("metrics.json"),
        &VariantMetrics {
            variant: name.clone(),
            student,
            runs,
            summary: summary.clone(),
        },
    )?;
    Ok(format!(
        "{name}: balanced accuracy {:.4} ± {:.4} over {} seed(s); artifacts in {}",
        summary.mean.acc_balanced,
        summary.std.acc_balanced,
        summary.seeds,
        dir.display()
    ))
}

#[allow(clippy::too_many_arguments)]
fn distill_seed(
    cfg: &ExperimentConfig,
    splits: &Splits,
    targets: Option<&TeacherTargets>,
    ablation: &Ablation,
    baseline: Baseline,
    seed: u64,
    dir: &Path,
    name: &str,
) -> Result<SeedMetrics> {
    create_dir(dir)?;
    let tcfg = cfg.train_config(seed, ablation.clone(), baseline);
    let mut student = Student::new(cfg.student_config(seed, ablation)?)?;
    let mut router_cost = (0, 0);
    let history: TrainingHistory = match (baseline, targets) {
        (Baseline::NoDistill, _) => run_supervised(&splits.train, Some(&splits.val), &mut student, &tcfg)?,
        (Baseline::None, Some(t)) => {
            let mut router = Router::new(cfg.router_config(seed), cfg.signal.patch_len)?;
            let h = run_distillation(&splits.train, Some(&splits.val), t, &mut student, &mut router, &tcfg)?;
            // fixed routes never consult the router
            if ablation.fixed_route().is_none() {
                let c = router.complexity(cfg.signal.segments);
                router_cost = (c.params, c.flops);
                router.save(dir.join("router.ckpt"))?;
            }
            h
        }
        (kind, Some(t)) => run_baseline_kd(kind, &splits.train, Some(&splits.val), t, &mut student, &tcfg)?,
        (_, None) => unreachable!("teacher targets are built for every distilling baseline"),
    };
    history.write_jsonl(dir.join("history.jsonl"))?;
    let routing: Vec<(usize, Vec<f64>)> = history
        .epochs
        .iter()
        .filter(|e| !e.routing_weights.is_empty())
        .map(|e| (e.epoch, e.routing_weights.clone()))
        .collect();
    if !routing.is_empty() {
        write_routing_csv(dir.join("routing_weights.csv"), &routing)?;
    }
    student.save(dir.join("student.ckpt"))?;

    let test = evaluate(&student, &splits.test)?;
    let (pre, post) = compression_features(&student, &splits.test)?;
    let (pre, post) = (pre.into_dyn(), post.into_dyn());
    let sample_rate_pre = cfg.signal.sample_rate;
    let sample_rate_post = sample_rate_pre / student.config.temporal_stride as f64;
    write_spectrum_csv(dir.join("spectrum_pre.csv"), &spectrum_rows(&pre, sample_rate_pre)?)?;
    write_spectrum_csv(dir.join("spectrum_post.csv"), &spectrum_rows(&post, sample_rate_post)?)?;
    let cost = student.complexity();
    let metrics = SeedMetrics {
        seed,
        variant: name.into(),
        test,
        student_params: cost.params,
        student_flops: cost.flops,
        router_params: router_cost.0,
        router_flops: router_cost.1,
        final_routing_weights: history.final_routing_weights().map(<[f64]>::to_vec).unwrap_or_default(),
        alpha: student.alpha(),
        max_loss_residual: history.steps.iter().map(|s| s.residual()).fold(0.0, f64::max),
        tail_energy_pre: highfreq_tail_energy(&pre, TAIL_CUTOFF)?,
        tail_energy_post: highfreq_tail_energy(&post, TAIL_CUTOFF)?,
        lowband_energy_pre: lowband_energy(&pre, TAIL_CUTOFF)?,
        sample_rate_pre,
        sample_rate_post,
    };
    write_json(&dir.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

// ----------------------------------------------------------------------
// eval
// ----------------------------------------------------------------------

pub fn eval(
    cfg: ExperimentConfig,
    student_path: &Path,
    data: Option<&Path>,
    split: &str,
    out: Option<PathBuf>,
) -> Result<String> {
    let student = Student::load(student_path)?;
    let splits = load_splits(&cfg, data)?;
    let batch = match split {
        "train" => &splits.train,
        "val" => &splits.val,
        "test" => &splits.test,
        other => return Err(DlinkError::Usage(format!("unknown split {other:?}; expected train, val or test"))),
    };
    if student.config.dims() != InputDims::of(batch) {
        return Err(DlinkError::Incompatible(format!(
            "student expects {:?}, data has {:?}",
            student.config.dims(),
            InputDims::of(batch)
        )));
    }
    let report = evaluate(&student, batch)?;
    let out = out.unwrap_or_else(|| {
        student_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{split}.json"))
    });
    write_json(&out, &report)?;
    Ok(format!(
        "{split}: balanced accuracy {:.4}, weighted F1 {:.4}, kappa {:.4}; wrote {}",
        report.acc_balanced,
        report.f1_weighted,
        report.kappa,
        out.display()
    ))
}

// ----------------------------------------------------------------------
// probe
// ----------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Held-out balanced accuracy per layer, layer 1 first.
    pub accuracy: Vec<f64>,
    /// 1-based layer with the highest accuracy.
    pub best_layer: usize,
}

pub fn probe(ctx: &Ctx, cfg: ExperimentConfig, teacher_path: Option<&Path>, data: Option<&Path>) -> Result<String> {
    let all = load_all(&cfg, data)?;
    let accuracy = if cfg.teacher.informative_layer.is_some() {
        let stack = inject_informative_layer(&cfg.teacher, &all)?;
        probe_stack(&stack, &all.labels, all.num_classes, &cfg.probe)?
    } else {
        let teacher = load_teacher(ctx, &cfg, teacher_path)?;
        linear_probe_layers(&teacher, &all, &cfg.probe)?
    };
    let best_layer = accuracy
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (l, &a)| if a > best.1 { (l, a) } else { best })
        .0
        + 1;
    let dir = ctx.run_dir(&cfg)?.join("probe");
    create_dir(&dir)?;
    let mut csv = csv::Writer::from_path(dir.join("probe.csv")).map_err(csv_err)?;
    csv.write_record(["layer", "balanced_accuracy"]).map_err(csv_err)?;
    for (l, a) in accuracy.iter().enumerate() {
        csv.write_record([(l + 1).to_string(), a.to_string()]).map_err(csv_err)?;
    }
    csv.flush().map_err(|e| DlinkError::io(dir.join("probe.csv"), e))?;
    write_json(&dir.join("probe.json"), &ProbeReport { accuracy: accuracy.clone(), best_layer })?;
    if accuracy.iter().all(|&a| a == accuracy[0]) {
        warn!("every layer probes at the same accuracy");
    }
    Ok(format!("probe: best layer {best_layer} of {}; wrote {}", accuracy.len(), dir.display()))
}

pub fn csv_err(e: csv::Error) -> DlinkError {
    DlinkError::Format(e.to_string())
}
