//! Property tests over the library invariants.

use ndarray::{Array, Array2, Array4, ArrayD, Axis, IxDyn};
use proptest::prelude::*;

use dlink::autograd::{Graph, Tensor};
use dlink::router::{psd_supervision_loss, RoutingDecision};
use dlink::spectral::{
    highfreq_tail_energy, lowband_energy, mean_power_spectrum, spectral_discrepancy, spectrum, PsdScores,
};
use dlink::student::{Student, StudentConfig, Variant};
use dlink::synth::{decode_epochs, encode_epochs, stratified_indices, EpochBatch};
use dlink::teacher::{unify_feature_space, InputDims};

fn array(shape: &[usize], values: &[f64]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    Array::from_shape_vec(IxDyn(shape), values.iter().cycle().take(n).copied().collect()).unwrap()
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, n)
}

fn max_abs(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
    (a - b).iter().fold(0.0, |m, v| m.max(v.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn routing_weights_lie_on_the_simplex(v in values(24), tau in 0.01f64..10.0) {
        let d = RoutingDecision::from_logits(array(&[4, 6], &v).into_dimensionality().unwrap(), tau);
        for row in d.weights.rows() {
            prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ignores_a_constant_shift(v in values(20), c in -100.0f64..100.0) {
        let g = Graph::new();
        let soft = |t: Tensor| (*g.constant(t).softmax_last().value()).clone();
        let x = array(&[4, 5], &v);
        prop_assert!(max_abs(&soft(x.clone()), &soft(&x + c)) < 1e-12);
    }

    #[test]
    fn psd_loss_vanishes_when_logits_match_scores(v in values(15), c in -20.0f64..20.0, tau in 0.1f64..5.0) {
        let s: Array2<f64> = array(&[3, 5], &v).into_dimensionality().unwrap();
        let d = RoutingDecision::from_logits(&s + c, tau);
        let loss = psd_supervision_loss(&d, &PsdScores { per_sample: s }, tau).unwrap();
        prop_assert!(loss.abs() < 1e-10);
    }

    #[test]
    fn magnitude_is_invariant_to_circular_shift(v in values(2 * 3 * 12), k in 1usize..12) {
        let x: Array4<f64> = array(&[1, 2, 3, 12], &v).into_dimensionality().unwrap();
        let mut shifted = x.clone();
        for (mut dst, src) in shifted.lanes_mut(Axis(3)).into_iter().zip(x.lanes(Axis(3))) {
            for i in 0..12 {
                dst[(i + k) % 12] = src[i];
            }
        }
        let a = spectrum(&x).unwrap().magnitude;
        let b = spectrum(&shifted).unwrap().magnitude;
        prop_assert!(max_abs(&a.into_dyn(), &b.into_dyn()) < 1e-9);
    }

    #[test]
    fn discrepancy_is_symmetric_and_nonnegative(a in values(2 * 2 * 10), b in values(2 * 2 * 10)) {
        let x: Array4<f64> = array(&[2, 1, 2, 10], &a).into_dimensionality().unwrap();
        let y: Array4<f64> = array(&[2, 1, 2, 10], &b).into_dimensionality().unwrap();
        let (sx, sy) = (spectrum(&x).unwrap(), spectrum(&y).unwrap());
        let xy = spectral_discrepancy(&sx, &sy).unwrap();
        let yx = spectral_discrepancy(&sy, &sx).unwrap();
        prop_assert!(xy >= 0.0);
        prop_assert!((xy - yx).abs() <= 1e-12 * xy.max(1.0));
        prop_assert!(spectral_discrepancy(&sx, &sx).unwrap().abs() < 1e-12);
    }

    #[test]
    fn tail_and_low_band_partition_the_power(v in values(3 * 16), cut in 0.05f64..0.95) {
        let x = array(&[3, 16], &v);
        let total: f64 = mean_power_spectrum(&x).unwrap().iter().sum();
        prop_assume!(total > 1e-9);
        let tail = highfreq_tail_energy(&x, cut).unwrap();
        let low = lowband_energy(&x, cut).unwrap();
        prop_assert!((0.0..=1.0).contains(&tail));
        prop_assert!((tail + low / total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tail_energy_shrinks_as_the_cutoff_rises(v in values(2 * 20), lo in 0.05f64..0.5, step in 0.0f64..0.45) {
        let x = array(&[2, 20], &v);
        let a = highfreq_tail_energy(&x, lo).unwrap();
        let b = highfreq_tail_energy(&x, lo + step).unwrap();
        prop_assert!(b <= a + 1e-12);
    }

    #[test]
    fn unified_features_are_group_means(v in values(2 * 3 * 12), g in prop::sample::select(vec![1usize, 2, 3, 4, 6, 12])) {
        let x: Array4<f64> = array(&[1, 2, 3, 12], &v).into_dimensionality().unwrap();
        let u = unify_feature_space(&x, 12 / g).unwrap();
        for ((c, s, j), &got) in u.index_axis(Axis(0), 0).indexed_iter() {
            let want = (0..g).map(|q| x[[0, c, s, j * g + q]]).sum::<f64>() / g as f64;
            prop_assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn stratified_split_is_a_partition(labels in prop::collection::vec(0usize..3, 30..80), seed in any::<u64>()) {
        let parts = stratified_indices(&labels, 3, &[0.6, 0.2, 0.2], seed);
        let mut all: Vec<usize> = parts.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
    }

    #[test]
    fn epoch_files_round_trip(v in prop::collection::vec(-3.0f32..3.0, 2 * 2 * 2 * 8), labels in prop::collection::vec(0usize..2, 2)) {
        let signals = Array::from_shape_vec((2, 2, 2, 8), v).unwrap();
        let batch = EpochBatch::new(signals, labels, 2, 16.0).unwrap();
        let back = decode_epochs(&encode_epochs(&batch).unwrap()).unwrap();
        prop_assert_eq!(back.signals, batch.signals);
        prop_assert_eq!(back.labels, batch.labels);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn hybrid_blend_interpolates_the_branches(v in values(2 * 2 * 2 * 8), alpha in 0.0f64..1.0, seed in any::<u64>()) {
        let dims = InputDims { channels: 2, segments: 2, patch_len: 8, num_classes: 2 };
        let mut cfg = StudentConfig::preset(Variant::MicS, dims);
        cfg.seed = seed;
        let student = Student::new(cfg).unwrap();
        let g = Graph::new();
        let p = student.store.bind(&g, false);
        let x = g.constant(array(&[2, 2, 2, 8], &v));
        let at = |a: f64| (*student.mimic_with_alpha(&p, x, a).unwrap().value()).clone();
        let (f1, f0, fa) = (at(1.0), at(0.0), at(alpha));
        let want = &f1 * alpha + &f0 * (1.0 - alpha);
        prop_assert!(max_abs(&fa, &want) < 1e-9);
    }
}
