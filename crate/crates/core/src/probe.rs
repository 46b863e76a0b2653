//! Layer-wise linear probing of frozen teacher features.
//!
//! Each layer is mean-pooled over channels and segments to one `T`-vector
//! per sample, standardised with training statistics, and fitted with
//! multinomial logistic regression by full-batch gradient descent. The
//! score is held-out balanced accuracy.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::autograd::softmax_last;
use crate::error::{DlinkError, Result};
use crate::metrics::balanced_accuracy;
use crate::synth::{stratified_indices, EpochBatch};
use crate::teacher::{argmax, LayerFeatureStack, Teacher};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub l2: f64,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.5,
            l2: 1e-4,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

/// Held-out balanced accuracy of a linear probe on every teacher layer.
pub fn linear_probe_layers(teacher: &Teacher, data: &EpochBatch, cfg: &ProbeConfig) -> Result<Vec<f64>> {
    let (stack, _) = teacher.forward_all_layers(data)?;
    probe_stack(&stack, &data.labels, data.num_classes, cfg)
}

/// [`linear_probe_layers`] on precomputed features.
pub fn probe_stack(stack: &LayerFeatureStack, labels: &[usize], num_classes: usize, cfg: &ProbeConfig) -> Result<Vec<f64>> {
    stack.validate()?;
    if labels.len() != stack.dims().0 {
        return Err(DlinkError::Usage("labels and features differ in sample count".into()));
    }
    if !(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0) {
        return Err(DlinkError::Config("probe train_fraction must lie in (0, 1)".into()));
    }
    let parts = stratified_indices(labels, num_classes, &[cfg.train_fraction, 1.0 - cfg.train_fraction], cfg.seed);
    let (train, test) = (&parts[0], &parts[1]);
    if train.is_empty() || test.is_empty() {
        return Err(DlinkError::Usage("too few samples to probe".into()));
    }
    stack
        .layers
        .iter()
        .map(|x| {
            let (b, c, s, t) = x.dim();
            let pooled = x
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order((b, c * s, t))
                .expect("pool reshape")
                .mean_axis(Axis(1))
                .expect("non-empty");
            fit_and_score(&pooled, labels, num_classes, train, test, cfg)
        })
        .collect()
}

fn fit_and_score(
    x: &Array2<f64>,
    labels: &[usize],
    k: usize,
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
) -> Result<f64> {
    let xt = x.select(Axis(0), train);
    let mean = xt.mean_axis(Axis(0)).unwrap();
    let std = xt.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let norm = |a: &Array2<f64>| (a - &mean) / &std;
    let xt = norm(&xt);
    let xs = norm(&x.select(Axis(0), test));
    let n = train.len() as f64;
    let d = xt.ncols();
    let mut y = Array2::<f64>::zeros((train.len(), k));
    for (i, &j) in train.iter().enumerate() {
        y[[i, labels[j]]] = 1.0;
    }
    let mut w = Array2::<f64>::zeros((d, k));
    let mut b = Array1::<f64>::zeros(k);
    for _ in 0..cfg.epochs {
        let logits = xt.dot(&w) + &b;
        let p = softmax_last(&logits.into_dyn()).into_dimensionality::<ndarray::Ix2>().unwrap();
        let err = (p - &y) / n;
        let gw = xt.t().dot(&err) + &(&w * cfg.l2);
        let gb = err.sum_axis(Axis(0));
        w -= &(gw * cfg.lr);
        b -= &(gb * cfg.lr);
    }
    let pred: Vec<usize> = (xs.dot(&w) + &b)
        .rows()
        .into_iter()
        .map(|r| argmax(r.iter().copied()))
        .collect();
    let truth: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
    balanced_accuracy(&truth, &pred, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, ClassBand, SignalConfig};
    use crate::teacher::{inject_informative_layer, TeacherConfig, TeacherMode};

    fn signal(noise_only: bool) -> SignalConfig {
        let amp = if noise_only { 0.0 } else { 1.0 };
        SignalConfig {
            sample_rate: 32.0,
            channels: 2,
            segments: 2,
            patch_len: 16,
            num_classes: 3,
            class_bands: vec![
                ClassBand::new(2.0, 3.0, amp),
                ClassBand::new(6.0, 7.0, amp),
                ClassBand::new(11.0, 12.0, amp),
            ],
            noise_std: 1.0,
            seed: 4,
        }
    }

    #[test]
    fn injected_layer_wins_the_probe() {
        let data = generate(&signal(false), 90).unwrap();
        let cfg = TeacherConfig {
            layers: 5,
            feature_dim: 16,
            informative_layer: Some(3),
            ..TeacherConfig::default()
        };
        let stack = inject_informative_layer(&cfg, &data).unwrap();
        let acc = probe_stack(&stack, &data.labels, 3, &ProbeConfig::default()).unwrap();
        assert_eq!(acc.len(), 5);
        assert!(acc.iter().all(|a| (0.0..=1.0).contains(a)));
        assert_eq!(argmax(acc.iter().copied()), 2);
        assert!(acc[2] > 0.95, "{acc:?}");
    }

    #[test]
    fn random_teacher_on_noise_is_near_chance() {
        let data = generate(&signal(true), 240).unwrap();
        let cfg = TeacherConfig {
            layers: 2,
            feature_dim: 16,
            heads: 2,
            ffn_dim: 16,
            head_hidden: 8,
            mode: TeacherMode::FrozenRandom,
            ..TeacherConfig::default()
        };
        let teacher = Teacher::new(cfg, crate::teacher::InputDims::of(&data)).unwrap();
        let acc = linear_probe_layers(&teacher, &data, &ProbeConfig::default()).unwrap();
        for a in acc {
            assert!((a - 1.0 / 3.0).abs() < 0.2, "{a}");
        }
    }
}
