//! Acceptance suite. Runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion, followed by the measured values.
//!
//! Criteria listed in `KNOWN_UNMET` are reported but do not fail the run;
//! every other failure does. See the README for the current status.

use std::time::{Duration, Instant};

use ndarray::{Array, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dlink::autograd::{Graph, Tensor};
use dlink::metrics::{aggregate, MetricReport};
use dlink::probe::{probe_stack, ProbeConfig};
use dlink::router::{psd_supervision_loss, psd_supervision_loss_var, Router, RouterConfig, RoutingDecision};
use dlink::spectral::{
    highfreq_tail_energy, lowband_energy, num_bins, spectrum, spectrum_var, DftBasis, PsdScores,
    SaliencyMetric, SpectralVars,
};
use dlink::student::{
    classifier_complexity, count_params_flops, flatten_classifier_complexity, Student, StudentConfig, Variant,
};
use dlink::synth::{generate, ClassBand, EpochBatch, SignalConfig};
use dlink::teacher::{inject_informative_layer, InputDims, Teacher, TeacherConfig};
use dlink::training::{
    classification_loss, compression_features, derive_seed, distill_loss_var, evaluate, run_baseline_kd,
    run_distillation, run_supervised, Baseline, TeacherTargets, TrainConfig,
};

/// Criteria that do not hold on the synthetic protocol; see README.
const KNOWN_UNMET: &[u32] = &[5, 6];

/// Exact counts at default synthetic dims (C=32, S=10, T=200, 3 classes).
const MIC_S_COST: (u64, u64) = (645_628, 292_640_600);
const MIC_M_COST: (u64, u64) = (2_766_388, 589_761_200);
const TEACHER_COST: (u64, u64) = (4_011_803, 3_466_321_200);
const ROUTER_COST: (u64, u64) = (37_868, 755_328);

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn desk_signal(noise_std: f64, seed: u64) -> SignalConfig {
    SignalConfig {
        sample_rate: 32.0,
        channels: 4,
        segments: 4,
        patch_len: 32,
        num_classes: 3,
        class_bands: vec![
            ClassBand::new(3.0, 6.0, 1.0),
            ClassBand::new(7.0, 10.0, 1.0),
            ClassBand::new(11.0, 14.0, 1.0),
        ],
        noise_std,
        seed,
    }
}

fn rand_array(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    Array::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
}

fn to4(a: ArrayD<f64>) -> Array4<f64> {
    a.into_dimensionality().unwrap()
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ----------------------------------------------------------------------
// 1. spectral invariants
// ----------------------------------------------------------------------

fn spectral_invariants() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut shift_err, mut norm_err, mut parseval_err) = (0.0f64, 0.0f64, 0.0f64);
    for &t in &[7usize, 8, 31, 32, 200] {
        let x = to4(rand_array(&[3, 4, 5, t], &mut rng));
        let rep = spectrum(&x).unwrap();
        let k = rng.random_range(1..t);
        let mut shifted = x.clone();
        for (mut dst, src) in shifted.lanes_mut(Axis(3)).into_iter().zip(x.lanes(Axis(3))) {
            for i in 0..t {
                dst[(i + k) % t] = src[i];
            }
        }
        let rep_s = spectrum(&shifted).unwrap();
        shift_err = shift_err.max((&rep.magnitude - &rep_s.magnitude).iter().fold(0.0, |m, v| m.max(v.abs())));
        let unit = &rep.phase_cos * &rep.phase_cos + &rep.phase_sin * &rep.phase_sin;
        norm_err = norm_err.max(unit.iter().fold(0.0, |m, v| m.max((v - 1.0).abs())));
        let f = num_bins(t);
        for (lane, mag) in x.lanes(Axis(3)).into_iter().zip(rep.magnitude.lanes(Axis(3))) {
            let energy: f64 = lane.iter().map(|v| v * v).sum();
            let mut spec = mag[0] * mag[0];
            for kk in 1..f {
                let w = if t % 2 == 0 && kk == f - 1 { 1.0 } else { 2.0 };
                spec += w * mag[kk] * mag[kk];
            }
            parseval_err = parseval_err.max((energy - spec / t as f64).abs() / energy);
        }
    }
    let pass = shift_err < 1e-6 && norm_err < 1e-6 && parseval_err < 1e-5;
    (
        pass,
        format!("shift {shift_err:.1e} (<1e-6), unit norm {norm_err:.1e} (<1e-6), Parseval {parseval_err:.1e} (<1e-5)"),
    )
}

// ----------------------------------------------------------------------
// 2. routing invariants
// ----------------------------------------------------------------------

fn routing_invariants() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let t = 32;
    let router = Router::new(
        RouterConfig {
            layers: 12,
            seed: 3,
            ..RouterConfig::default()
        },
        t,
    )
    .unwrap();
    let mut simplex_err = 0.0f64;
    let mut shift_err = 0.0f64;
    let mut inputs = 0;
    while inputs < 1000 {
        let z = rand_array(&[25, 4, t + num_bins(t)], &mut rng).mapv(|v| 3.0 * v).into_dimensionality().unwrap();
        let d = router.route(&z).unwrap();
        for row in d.weights.rows() {
            let neg = row.iter().fold(0.0f64, |m, &w| m.max(-w));
            simplex_err = simplex_err.max(neg).max((row.sum() - 1.0).abs());
        }
        let c = rng.random_range(-50.0..50.0);
        let shifted = RoutingDecision::from_logits(&d.logits + c, d.temperature);
        shift_err = shift_err.max((&shifted.weights - &d.weights).iter().fold(0.0, |m, v| m.max(v.abs())));
        inputs += 25;
    }

    let mut psd_zero = 0.0f64;
    for _ in 0..50 {
        let s = rand_array(&[8, 12], &mut rng).mapv(|v| 10.0 * v).into_dimensionality::<ndarray::Ix2>().unwrap();
        let tau = rng.random_range(0.1..3.0);
        let c = rng.random_range(-20.0..20.0);
        let d = RoutingDecision::from_logits(&s + c, tau);
        let loss = psd_supervision_loss(&d, &PsdScores { per_sample: s }, tau).unwrap();
        psd_zero = psd_zero.max(loss.abs());
    }

    // the one-hot limit presumes distinct logits: rows whose top two
    // logits are closer than 0.1 are redrawn
    let mut min_max = 1.0f64;
    let mut rows = 0;
    while rows < 1000 {
        let l = rand_array(&[1, 12], &mut rng).mapv(|v| 3.0 * v);
        let mut sorted: Vec<f64> = l.iter().copied().collect();
        sorted.sort_by(|a, b| b.total_cmp(a));
        if sorted[0] - sorted[1] < 0.1 {
            continue;
        }
        let d = RoutingDecision::from_logits(l.into_dimensionality().unwrap(), 0.01);
        min_max = min_max.min(d.weights.fold(0.0f64, |m, &w| m.max(w)));
        rows += 1;
    }

    let pass = simplex_err < 1e-12 && shift_err < 1e-6 && psd_zero < 1e-8 && min_max > 0.99;
    (
        pass,
        format!(
            "simplex over {inputs} inputs {simplex_err:.1e}, shift {shift_err:.1e} (<1e-6), L_psd(a=s+c) {psd_zero:.1e} (<1e-8), tau=0.01 min max-weight {min_max:.4} over {rows} distinct-logit rows (>0.99)"
        ),
    )
}

// ----------------------------------------------------------------------
// 3. gradient checks
// ----------------------------------------------------------------------

/// `||analytic - numeric|| / max(||analytic||, ||numeric||)` over `coords`.
fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-12)
}

const H: f64 = 1e-5;

fn central(x0: &Tensor, i: usize, f: &dyn Fn(&Tensor) -> f64) -> f64 {
    let mut p = x0.clone();
    p.as_slice_mut().unwrap()[i] += H;
    let mut m = x0.clone();
    m.as_slice_mut().unwrap()[i] -= H;
    (f(&p) - f(&m)) / (2.0 * H)
}

fn gradient_checks() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (b, c, s, t, l) = (2, 2, 2, 8, 3);
    let basis = DftBasis::new(t);
    let x0 = rand_array(&[b, c, s, t], &mut rng);
    let a0 = rand_array(&[b, l], &mut rng);
    let teachers: Vec<Array4<f64>> = (0..l).map(|_| to4(rand_array(&[b, c, s, t], &mut rng))).collect();
    let teacher_reps: Vec<_> = teachers.iter().map(|x| spectrum(x).unwrap()).collect();

    let distill = |x: &Tensor, a: &Tensor, grads: bool| -> (f64, Option<(Tensor, Tensor)>) {
        let g = Graph::new();
        let (xv, av) = if grads {
            (g.leaf(x.clone()), g.leaf(a.clone()))
        } else {
            (g.constant(x.clone()), g.constant(a.clone()))
        };
        let tv: Vec<SpectralVars> = teacher_reps.iter().map(|r| SpectralVars::constant(&g, r)).collect();
        let loss = distill_loss_var(&spectrum_var(xv, &basis), &tv, av.softmax_last());
        let value = loss.item();
        let gr = grads.then(|| {
            let gs = g.backward(loss);
            (gs.get_or_zeros(xv), gs.get_or_zeros(av))
        });
        (value, gr)
    };
    let (_, gr) = distill(&x0, &a0, true);
    let (gx, ga) = gr.unwrap();
    let nx: Vec<f64> = (0..x0.len()).map(|i| central(&x0, i, &|x| distill(x, &a0, false).0)).collect();
    let na: Vec<f64> = (0..a0.len()).map(|i| central(&a0, i, &|a| distill(&x0, a, false).0)).collect();
    let e_distill = rel_err(gx.as_slice().unwrap(), &nx).max(rel_err(ga.as_slice().unwrap(), &na));

    let scores = rand_array(&[b, l], &mut rng).mapv(|v| 3.0 * v).into_dimensionality::<ndarray::Ix2>().unwrap();
    let psd = |a: &Tensor, grads: bool| -> (f64, Option<Tensor>) {
        let g = Graph::new();
        let av = if grads { g.leaf(a.clone()) } else { g.constant(a.clone()) };
        let loss = psd_supervision_loss_var(av, &scores, 0.7).unwrap();
        let v = loss.item();
        (v, grads.then(|| g.backward(loss).get_or_zeros(av)))
    };
    let ga = psd(&a0, true).1.unwrap();
    let na: Vec<f64> = (0..a0.len()).map(|i| central(&a0, i, &|a| psd(a, false).0)).collect();
    let e_psd = rel_err(ga.as_slice().unwrap(), &na);

    let dims = InputDims {
        channels: c,
        segments: s,
        patch_len: t,
        num_classes: 3,
    };
    let mut cfg = StudentConfig::preset(Variant::MicS, dims);
    cfg.seed = 9;
    let mut student = Student::new(cfg).unwrap();
    let labels = vec![0, 2];
    let cls = |st: &Student| -> f64 {
        let g = Graph::new();
        let p = st.store.bind(&g, false);
        let out = st.forward(&p, g.constant(x0.clone()), None);
        classification_loss(out.logits, &labels).unwrap().item()
    };
    let analytic = {
        let g = Graph::new();
        let p = student.store.bind(&g, true);
        let out = student.forward(&p, g.constant(x0.clone()), None);
        let loss = classification_loss(out.logits, &labels).unwrap();
        p.grads(&g.backward(loss))
    };
    let (mut an, mut nu) = (Vec::new(), Vec::new());
    for (pi, grad) in analytic.iter().enumerate() {
        let n = grad.len();
        for _ in 0..n.min(6) {
            let i = rng.random_range(0..n);
            let orig = student.store.values()[pi].as_slice().unwrap()[i];
            student.store.values_mut()[pi].as_slice_mut().unwrap()[i] = orig + H;
            let fp = cls(&student);
            student.store.values_mut()[pi].as_slice_mut().unwrap()[i] = orig - H;
            let fm = cls(&student);
            student.store.values_mut()[pi].as_slice_mut().unwrap()[i] = orig;
            an.push(grad.as_slice().unwrap()[i]);
            nu.push((fp - fm) / (2.0 * H));
        }
    }
    let e_cls = rel_err(&an, &nu);
    let pass = e_distill < 1e-4 && e_psd < 1e-4 && e_cls < 1e-4;
    (
        pass,
        format!(
            "L_distill {e_distill:.1e}, L_psd {e_psd:.1e}, end-to-end L_cls {e_cls:.1e} over {} params (all <1e-4)",
            an.len()
        ),
    )
}

// ----------------------------------------------------------------------
// 4. routing discovery
// ----------------------------------------------------------------------

fn routing_discovery() -> (bool, String) {
    let j_star = 11;
    let train = generate(&desk_signal(1.0, 41), 1024).unwrap();
    let tcfg = TeacherConfig {
        layers: 12,
        feature_dim: 32,
        informative_layer: Some(j_star),
        injection_noise: 0.1,
        ..TeacherConfig::default()
    };
    let stack = inject_informative_layer(&tcfg, &train).unwrap();
    let targets = TeacherTargets::from_stack(&stack, None, SaliencyMetric::Psd).unwrap();
    let mut hits = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let mut scfg = StudentConfig::preset(Variant::MicS, InputDims::of(&train));
        scfg.seed = derive_seed(seed, "student-init");
        let mut student = Student::new(scfg).unwrap();
        let mut router = Router::new(
            RouterConfig {
                layers: 12,
                seed: derive_seed(seed, "router-init"),
                ..RouterConfig::default()
            },
            32,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 30,
            seed,
            ..TrainConfig::default()
        };
        let history = run_distillation(&train, None, &targets, &mut student, &mut router, &cfg).unwrap();
        let w = history.final_routing_weights().unwrap().to_vec();
        let probe = probe_stack(
            &stack,
            &train.labels,
            3,
            &ProbeConfig {
                seed,
                ..ProbeConfig::default()
            },
        )
        .unwrap();
        let (rw, pr) = (argmax(&w) + 1, argmax(&probe) + 1);
        if rw == j_star && pr == j_star {
            hits += 1;
        }
        lines.push(format!("seed {seed}: route {rw} (w={:.3}) probe {pr}", w[rw - 1]));
    }
    (hits >= 4, format!("{hits}/5 seeds with both argmaxes at layer {j_star} (>=4); {}", lines.join("; ")))
}

// ----------------------------------------------------------------------
// 5 and 6. distillation gain and anti-aliasing
// ----------------------------------------------------------------------

struct GainRun {
    none: MetricReport,
    dlink: MetricReport,
    fmse: f64,
    tail_none: f64,
    tail_dlink: f64,
    low_none: f64,
    low_dlink: f64,
    lowfrac_none: f64,
    lowfrac_dlink: f64,
}

struct GainStudy {
    teacher_acc: f64,
    runs: Vec<GainRun>,
}

fn gain_study() -> GainStudy {
    let layers = 6;
    let teacher_data = generate(&desk_signal(1.5, 100), 1500).unwrap();
    let test = generate(&desk_signal(1.5, 200), 600).unwrap();
    let train = generate(&desk_signal(1.5, 300), 120).unwrap();
    let mut teacher = Teacher::new(
        TeacherConfig {
            layers,
            feature_dim: 32,
            ffn_dim: 64,
            head_hidden: 64,
            pretrain_epochs: 20,
            ..TeacherConfig::default()
        },
        InputDims::of(&teacher_data),
    )
    .unwrap();
    teacher.pretrain(&teacher_data).unwrap();
    let probs = teacher.predict_proba(&test).unwrap();
    let teacher_acc = dlink::metrics::metric_report(&probs, &test.labels).unwrap().acc_balanced;
    let targets = TeacherTargets::from_teacher(&teacher, &train, SaliencyMetric::Psd).unwrap();

    let diag = |s: &Student, data: &EpochBatch| {
        let (pre, post) = compression_features(s, data).unwrap();
        let (pre, post) = (pre.into_dyn(), post.into_dyn());
        (
            highfreq_tail_energy(&post, 0.5).unwrap(),
            lowband_energy(&pre, 0.5).unwrap(),
            1.0 - highfreq_tail_energy(&pre, 0.5).unwrap(),
        )
    };
    let runs = (0..5u64)
        .map(|seed| {
            let mut scfg = StudentConfig::preset(Variant::MicS, InputDims::of(&train));
            scfg.seed = derive_seed(seed, "student-init");
            let base = Student::new(scfg).unwrap();
            let cfg = TrainConfig {
                epochs: 200,
                seed,
                ..TrainConfig::default()
            };
            let mut none = base.clone();
            run_supervised(&train, None, &mut none, &cfg).unwrap();
            let mut dl = base.clone();
            let mut router = Router::new(
                RouterConfig {
                    layers,
                    seed: derive_seed(seed, "router-init"),
                    ..RouterConfig::default()
                },
                32,
            )
            .unwrap();
            run_distillation(&train, None, &targets, &mut dl, &mut router, &cfg).unwrap();
            let mut fm = base.clone();
            run_baseline_kd(Baseline::FeatureMse, &train, None, &targets, &mut fm, &cfg).unwrap();
            let (tail_none, low_none, lowfrac_none) = diag(&none, &test);
            let (tail_dlink, low_dlink, lowfrac_dlink) = diag(&dl, &test);
            GainRun {
                none: evaluate(&none, &test).unwrap(),
                dlink: evaluate(&dl, &test).unwrap(),
                fmse: evaluate(&fm, &test).unwrap().acc_balanced,
                tail_none,
                tail_dlink,
                low_none,
                low_dlink,
                lowfrac_none,
                lowfrac_dlink,
            }
        })
        .collect();
    GainStudy { teacher_acc, runs }
}

fn distillation_gain(study: &GainStudy) -> (bool, String) {
    let none = mean(&study.runs.iter().map(|r| r.none.acc_balanced).collect::<Vec<_>>());
    let dlink = mean(&study.runs.iter().map(|r| r.dlink.acc_balanced).collect::<Vec<_>>());
    let fmse = mean(&study.runs.iter().map(|r| r.fmse).collect::<Vec<_>>());
    let teacher_ok = study.teacher_acc >= 0.9;
    let gain_ok = dlink - none >= 0.02;
    let fmse_ok = dlink >= fmse;
    (
        teacher_ok && gain_ok && fmse_ok,
        format!(
            "teacher {:.3} (>=0.9: {}), DLink {dlink:.4} vs no-distill {none:.4}, gain {:+.4} (>=0.02: {}), feature_mse {fmse:.4} (DLink >= it: {})",
            study.teacher_acc,
            ok(teacher_ok),
            dlink - none,
            ok(gain_ok),
            ok(fmse_ok)
        ),
    )
}

fn anti_aliasing(study: &GainStudy) -> (bool, String) {
    let col = |f: fn(&GainRun) -> f64| mean(&study.runs.iter().map(f).collect::<Vec<_>>());
    let (tn, td) = (col(|r| r.tail_none), col(|r| r.tail_dlink));
    let (ln, ld) = (col(|r| r.low_none), col(|r| r.low_dlink));
    let (fnn, fd) = (col(|r| r.lowfrac_none), col(|r| r.lowfrac_dlink));
    let rel = (ld - ln).abs() / ln.abs().max(ld.abs());
    let tail_ok = td < tn;
    let low_ok = rel < 0.2;
    (
        tail_ok && low_ok,
        format!(
            "post-compression tail DLink {td:.4} vs no-distill {tn:.4} (lower: {}), pre-compression low-band energy {ld:.3} vs {ln:.3}, rel diff {rel:.3} (<0.2: {}); low-band fraction {fd:.3} vs {fnn:.3}",
            ok(tail_ok),
            ok(low_ok)
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

// ----------------------------------------------------------------------
// 7. efficiency accounting
// ----------------------------------------------------------------------

fn efficiency() -> (bool, String) {
    let sig = SignalConfig::default();
    let dims = InputDims {
        channels: sig.channels,
        segments: sig.segments,
        patch_len: sig.patch_len,
        num_classes: sig.num_classes,
    };
    let s_cfg = StudentConfig::preset(Variant::MicS, dims);
    let m_cfg = StudentConfig::preset(Variant::MicM, dims);
    let s = count_params_flops(&s_cfg);
    let m = count_params_flops(&m_cfg);
    let teacher = Teacher::new(TeacherConfig::default(), dims).unwrap();
    let t = teacher.complexity();
    let router = Router::new(RouterConfig::default(), sig.patch_len).unwrap();
    let r = router.complexity(sig.segments);
    let introspected = Student::new(s_cfg.clone()).unwrap().store.num_scalars() as u64;
    let flat = flatten_classifier_complexity(dims.channels, dims.segments, dims.patch_len, s_cfg.hidden_dim, dims.num_classes);
    let comp = classifier_complexity(&s_cfg);
    let ratio = flat.params as f64 / comp.params as f64;

    let order_ok = s.params < m.params && m.params < t.params;
    let ratio_ok = ratio >= 10.0;
    let router_ok = r.params <= 100_000;
    let regress_ok = (s.params, s.flops) == MIC_S_COST
        && (m.params, m.flops) == MIC_M_COST
        && (t.params, t.flops) == TEACHER_COST
        && (r.params, r.flops) == ROUTER_COST
        && introspected == s.params
        && teacher.store.num_scalars() as u64 == t.params;
    (
        order_ok && ratio_ok && router_ok && regress_ok,
        format!(
            "params MiC-S {} < MiC-M {} < teacher {} ({}), flatten/compressed classifier {}/{} = {ratio:.1}x (>=10), router {} params (<=0.1M), regression constants match: {}",
            s.params,
            m.params,
            t.params,
            ok(order_ok),
            flat.params,
            comp.params,
            r.params,
            ok(regress_ok)
        ),
    )
}

// ----------------------------------------------------------------------
// 8. objective composition
// ----------------------------------------------------------------------

fn objective_composition() -> (bool, String) {
    let train = generate(&desk_signal(1.0, 8), 96).unwrap();
    let tcfg = TeacherConfig {
        layers: 4,
        feature_dim: 32,
        informative_layer: Some(2),
        ..TeacherConfig::default()
    };
    let stack = inject_informative_layer(&tcfg, &train).unwrap();
    let targets = TeacherTargets::from_stack(&stack, None, SaliencyMetric::Psd).unwrap();
    let mut scfg = StudentConfig::preset(Variant::MicS, InputDims::of(&train));
    scfg.seed = derive_seed(5, "student-init");
    let base = Student::new(scfg).unwrap();
    let rcfg = RouterConfig {
        layers: 4,
        seed: derive_seed(5, "router-init"),
        ..RouterConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 32,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut st = base.clone();
    let mut router = Router::new(rcfg.clone(), 32).unwrap();
    let h = run_distillation(&train, None, &targets, &mut st, &mut router, &cfg).unwrap();
    let residual = h.steps.iter().map(|s| s.residual()).fold(0.0, f64::max);
    let steps = h.steps.len();

    let zero = TrainConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..cfg.clone()
    };
    let mut a = base.clone();
    let mut router = Router::new(rcfg, 32).unwrap();
    let ha = run_distillation(&train, None, &targets, &mut a, &mut router, &zero).unwrap();
    let mut b = base;
    let hb = run_supervised(&train, None, &mut b, &zero).unwrap();
    let same_params = a.store.values() == b.store.values();
    let same_loss = ha.epochs.iter().zip(&hb.epochs).all(|(x, y)| x.l_cls.to_bits() == y.l_cls.to_bits());
    (
        residual < 1e-6 && steps > 0 && same_params && same_loss,
        format!(
            "max |L_total - sum| {residual:.1e} over {steps} steps (<1e-6), lambda=0 vs supervised: parameters bitwise equal {}, losses bitwise equal {}",
            ok(same_params),
            ok(same_loss)
        ),
    )
}

// ----------------------------------------------------------------------
// 9. determinism and five-seed aggregation
// ----------------------------------------------------------------------

fn determinism(study: &GainStudy) -> (bool, String) {
    let train = generate(&desk_signal(1.0, 9), 96).unwrap();
    let test = generate(&desk_signal(1.0, 10), 60).unwrap();
    let tcfg = TeacherConfig {
        layers: 3,
        feature_dim: 32,
        informative_layer: Some(3),
        ..TeacherConfig::default()
    };
    let targets =
        TeacherTargets::from_stack(&inject_informative_layer(&tcfg, &train).unwrap(), None, SaliencyMetric::Psd).unwrap();
    let run = || {
        let mut scfg = StudentConfig::preset(Variant::MicS, InputDims::of(&train));
        scfg.seed = derive_seed(7, "student-init");
        let mut st = Student::new(scfg).unwrap();
        let mut router = Router::new(
            RouterConfig {
                layers: 3,
                seed: derive_seed(7, "router-init"),
                ..RouterConfig::default()
            },
            32,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 3,
            seed: 7,
            ..TrainConfig::default()
        };
        let h = run_distillation(&train, Some(&test), &targets, &mut st, &mut router, &cfg).unwrap();
        let report = evaluate(&st, &test).unwrap();
        serde_json::to_string(&(report, h)).unwrap()
    };
    let identical = run() == run();

    let reports: Vec<MetricReport> = study.runs.iter().map(|r| r.none).collect();
    let summary = aggregate(&reports).unwrap();
    let accs: Vec<f64> = reports.iter().map(|r| r.acc_balanced).collect();
    let m = mean(&accs);
    let sd = (accs.iter().map(|a| (a - m).powi(2)).sum::<f64>() / accs.len() as f64).sqrt();
    let agg_ok = summary.seeds == 5
        && (summary.mean.acc_balanced - m).abs() < 1e-12
        && (summary.std.acc_balanced - sd).abs() < 1e-12;
    (
        identical && agg_ok,
        format!(
            "rerun metrics identical: {}, five-seed no-distill {:.4} ± {:.4} matches direct mean/std: {}",
            ok(identical),
            summary.mean.acc_balanced,
            summary.std.acc_balanced,
            ok(agg_ok)
        ),
    )
}

fn timed(id: u32, name: &'static str, budget: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let start = Instant::now();
    let (pass, mut detail) = f();
    let elapsed = start.elapsed();
    let in_budget = budget.is_none_or(|b| elapsed < b);
    if let Some(b) = budget {
        detail.push_str(&format!("; {:.1}s (budget {}s)", elapsed.as_secs_f64(), b.as_secs()));
    }
    let outcome = Outcome {
        id,
        name,
        pass: pass && in_budget,
        detail,
        elapsed,
    };
    println!(
        "criterion {} {:<28} {}  {}",
        outcome.id,
        outcome.name,
        if outcome.pass { "PASS" } else { "FAIL" },
        outcome.detail
    );
    outcome
}

fn main() {
    // the harness is plain `main`; honour `cargo test -- --list` style probes
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let secs = Duration::from_secs;
    let mut outcomes = vec![
        timed(1, "spectral invariants", Some(secs(10)), spectral_invariants),
        timed(2, "routing invariants", None, routing_invariants),
        timed(3, "gradient checks", Some(secs(60)), gradient_checks),
        timed(4, "routing discovery", Some(secs(15 * 60)), routing_discovery),
    ];
    let start = Instant::now();
    let study = gain_study();
    let study_time = start.elapsed();
    let mut gain = timed(5, "distillation gain", None, || distillation_gain(&study));
    gain.elapsed += study_time;
    let budget_ok = study_time < secs(30 * 60);
    gain.pass &= budget_ok;
    println!("  (gain and anti-aliasing study: {:.1}s, budget 1800s)", study_time.as_secs_f64());
    outcomes.push(gain);
    outcomes.push(timed(6, "anti-aliasing diagnostic", None, || anti_aliasing(&study)));
    outcomes.push(timed(7, "efficiency accounting", None, efficiency));
    outcomes.push(timed(8, "objective composition", None, objective_composition));
    outcomes.push(timed(9, "determinism and protocol", None, || determinism(&study)));

    let passed = outcomes.iter().filter(|o| o.pass).count();
    let unexpected: Vec<u32> = outcomes
        .iter()
        .filter(|o| !o.pass && !KNOWN_UNMET.contains(&o.id))
        .map(|o| o.id)
        .collect();
    let fixed: Vec<u32> = outcomes
        .iter()
        .filter(|o| o.pass && KNOWN_UNMET.contains(&o.id))
        .map(|o| o.id)
        .collect();
    let total: f64 = outcomes.iter().map(|o| o.elapsed.as_secs_f64()).sum();
    println!("acceptance: {passed}/{} criteria pass in {total:.1}s; known unmet {KNOWN_UNMET:?}", outcomes.len());
    if !fixed.is_empty() {
        println!("acceptance: criteria {fixed:?} now pass; remove them from KNOWN_UNMET");
    }
    if !unexpected.is_empty() {
        println!("acceptance: unexpected failures {unexpected:?}");
        std::process::exit(1);
    }
}
