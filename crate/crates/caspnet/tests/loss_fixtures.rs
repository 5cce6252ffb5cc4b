//! Loss-function fixtures with hand-computed values, plus parity between the
//! pure evaluators and the taped ops.

use caspnet::loss::{
    focal_loss_value, offset_loss_value, offset_mask, total_loss_on_tape, LossConfig,
};
use caspnet::network::StepOutput;
use caspnet::raster::GroundTruthSeq;
use caspnet::tensor::{GridTensor, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn focal_loss_half_probability_fixture() {
    // One positive pixel predicted at 0.5 with one agent in view:
    //   -1/(1+1) * 0.25 * (1-0.5)^2 * ln(0.5) = 0.25 * 0.25 * ln(2) / 2
    let pred = GridTensor::<f64>::new(vec![1, 1, 1], vec![0.5]).unwrap();
    let gt = GridTensor::<f64>::new(vec![1, 1, 1], vec![1.0]).unwrap();
    let cfg = LossConfig::for_classes(1);
    let got = focal_loss_value(&pred, &gt, 1, &cfg).unwrap();

    let oracle = 0.25 * 0.25 * std::f64::consts::LN_2 / 2.0;
    assert!((got - oracle).abs() < 1e-15, "{got} vs oracle {oracle}");
    assert!((got - 0.021661).abs() <= 1e-6, "{got} vs published fixture");

    // The taped op agrees with the pure evaluator.
    let mut tape = Tape::new();
    let p = tape.leaf(pred);
    let node = tape.focal_class_loss(p, gt, 1, 0.25, 4.0, 2.0, 1e-6).unwrap();
    assert_eq!(tape.value(node).item(), got);
}

#[test]
fn offset_loss_single_peak_fixture() {
    // One supervised pixel with offset error (0.2, -0.1): squared error
    // 0.2^2 + 0.1^2 = 0.05.
    let mut pred = GridTensor::<f64>::zeros(&[2, 3, 3]);
    let target = GridTensor::<f64>::zeros(&[2, 3, 3]);
    pred.data_mut()[4] = 0.2;
    pred.data_mut()[9 + 4] = -0.1;
    let mut mask = vec![false; 9];
    mask[4] = true;
    let got = offset_loss_value(&pred, &target, &mask).unwrap();
    assert_eq!(got, 0.2f64 * 0.2 + (-0.1f64) * (-0.1), "same-rounding equality");
    assert!((got - 0.05).abs() < 1e-15);

    // Unmasked error contributes nothing.
    pred.data_mut()[0] = 5.0;
    let same = offset_loss_value(&pred, &target, &mask).unwrap();
    assert_eq!(same, got);

    // The taped op agrees.
    let mut tape = Tape::new();
    let p = tape.leaf(pred);
    let node = tape.offset_loss(p, target, mask).unwrap();
    assert_eq!(tape.value(node).item(), got);
}

#[test]
fn perfect_prediction_costs_almost_nothing() {
    // Ground truth with two peaks and smooth tails; prediction saturated at
    // the clamp boundaries in the right direction.
    let mut gt = GridTensor::<f64>::zeros(&[1, 8, 8]);
    for (i, v) in [(9usize, 1.0), (10, 0.6), (17, 0.6), (54, 1.0), (53, 0.4)] {
        gt.data_mut()[i] = v;
    }
    let eps = 1e-6;
    let pred = GridTensor::from_fn(&[1, 8, 8], |i| if gt.data()[i] == 1.0 { 1.0 - eps } else { eps });
    let cfg = LossConfig::for_classes(1);
    let loss = focal_loss_value(&pred, &gt, 2, &cfg).unwrap();
    assert!(loss.abs() < 1e-4, "perfect prediction loss {loss}");
    assert!(loss >= 0.0);
}

#[test]
fn focal_loss_matches_elementwise_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let pred = GridTensor::<f64>::from_fn(&[1, 6, 5], |_| rng.gen_range(0.02..0.98));
    let mut gt = GridTensor::<f64>::from_fn(&[1, 6, 5], |_| rng.gen_range(0.0..0.9));
    gt.data_mut()[7] = 1.0;
    gt.data_mut()[22] = 1.0;
    let cfg = LossConfig::for_classes(1);
    let e = 2usize;
    let got = focal_loss_value(&pred, &gt, e, &cfg).unwrap();

    // Independent elementwise reference: positives use alpha (1-p)^gamma
    // ln p, negatives (1-alpha)(1-Y)^beta p^gamma ln(1-p), clamping only the
    // log arguments.
    let mut acc = 0.0f64;
    for i in 0..30 {
        let p = pred.data()[i];
        let y = gt.data()[i];
        let pc = p.clamp(1e-6, 1.0 - 1e-6);
        if y == 1.0 {
            acc += 0.25 * (1.0 - p).powi(2) * pc.ln();
        } else {
            acc += 0.75 * (1.0 - y).powi(4) * p.powi(2) * (1.0 - pc).ln();
        }
    }
    let want = -acc / (e as f64 + 1.0);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");

    // Clamping engages at the boundaries without producing infinities.
    let hard = GridTensor::<f64>::from_fn(&[1, 6, 5], |i| if gt.data()[i] == 1.0 { 0.0 } else { 1.0 });
    let worst = focal_loss_value(&hard, &gt, e, &cfg).unwrap();
    assert!(worst.is_finite() && worst > 0.0);
}

#[test]
fn ground_truth_out_of_range_is_rejected() {
    let pred = GridTensor::<f64>::full(&[1, 2, 2], 0.5);
    let bad = GridTensor::<f64>::new(vec![1, 2, 2], vec![0.0, 1.2, 0.0, 0.0]).unwrap();
    let cfg = LossConfig::for_classes(1);
    assert!(focal_loss_value(&pred, &bad, 1, &cfg).is_err());
    let neg = GridTensor::<f64>::new(vec![1, 2, 2], vec![0.0, -0.1, 0.0, 0.0]).unwrap();
    assert!(focal_loss_value(&pred, &neg, 1, &cfg).is_err());
}

#[test]
fn offset_mask_requires_exact_unit_class_sum() {
    // Step layout: 2 class channels + 2 offset channels on a 2x2 plane.
    let mut step = GridTensor::<f64>::zeros(&[4, 2, 2]);
    step.data_mut()[0] = 1.0; // class 0 peak at pixel 0
    step.data_mut()[1] = 0.5; // partial value: no supervision
    step.data_mut()[4 + 2] = 0.3; // class 1 pixel 2
    step.data_mut()[2] = 0.7; // class 0 pixel 2: sums to exactly 1.0
    step.data_mut()[3] = 1.0 - 1e-9; // just below one
    let mask = offset_mask(&step, 2).unwrap();
    assert_eq!(mask, vec![true, false, true, false]);
}

#[test]
fn total_loss_averages_steps_and_honors_class_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let (h, w, n_classes, n_steps) = (5usize, 4usize, 2usize, 3usize);
    let plane = h * w;

    // Ground truth: one exact peak per class per step plus soft tails, with
    // offsets at the peaks.
    let mut gt_steps = Vec::new();
    let mut counts = Vec::new();
    for k in 0..n_steps {
        let mut g = GridTensor::<f64>::from_fn(&[n_classes + 2, h, w], |i| {
            if i < n_classes * plane { rng.gen_range(0.0..0.8) } else { 0.0 }
        });
        g.data_mut()[k + 1] = 1.0;
        g.data_mut()[plane + 2 * k + 3] = 1.0;
        g.data_mut()[n_classes * plane + k + 1] = 0.25;
        g.data_mut()[(n_classes + 1) * plane + k + 1] = -0.25;
        gt_steps.push(g);
        counts.push(vec![1usize, 1]);
    }
    let gt = GroundTruthSeq { steps: gt_steps, counts, n_classes };

    let mut tape = Tape::new();
    let mut steps = Vec::new();
    let mut preds = Vec::new();
    for _ in 0..n_steps {
        let p = GridTensor::<f64>::from_fn(&[n_classes, h, w], |_| rng.gen_range(0.05..0.95));
        let o = GridTensor::<f64>::from_fn(&[2, h, w], |_| rng.gen_range(-0.4..0.4));
        let class_probs = tape.leaf(p.clone());
        let offsets = tape.leaf(o.clone());
        steps.push(StepOutput { class_probs, offsets });
        preds.push((p, o));
    }

    let mut cfg = LossConfig::for_classes(n_classes);
    cfg.class_weights = vec![2.0, 0.5];
    let nodes = total_loss_on_tape(&mut tape, &steps, &gt, &cfg).unwrap();

    // Reference from the pure evaluators.
    let (mut class_ref, mut off_ref) = (0.0f64, 0.0f64);
    for k in 0..n_steps {
        for c in 0..n_classes {
            let y = gt.steps[k].slice_channels(c, c + 1).unwrap();
            let p = preds[k].0.slice_channels(c, c + 1).unwrap();
            class_ref +=
                cfg.class_weights[c] * focal_loss_value(&p, &y, gt.counts[k][c], &cfg).unwrap();
        }
        let mask = offset_mask(&gt.steps[k], n_classes).unwrap();
        let target = gt.steps[k].slice_channels(n_classes, n_classes + 2).unwrap();
        off_ref += offset_loss_value(&preds[k].1, &target, &mask).unwrap();
    }
    class_ref /= n_steps as f64;
    off_ref /= n_steps as f64;

    assert!((nodes.l_class - class_ref).abs() < 1e-12, "class component");
    assert!((nodes.l_offset - off_ref).abs() < 1e-12, "offset component");
    assert!((nodes.l_total - (class_ref + off_ref)).abs() < 1e-12, "total");
    assert!((tape.value(nodes.total).item() - nodes.l_total).abs() < 1e-15);

    // Doubling a class weight moves only the class component, linearly in
    // that class's share.
    let mut tape2 = Tape::new();
    let steps2: Vec<StepOutput> = preds
        .iter()
        .map(|(p, o)| StepOutput {
            class_probs: tape2.leaf(p.clone()),
            offsets: tape2.leaf(o.clone()),
        })
        .collect();
    let mut cfg2 = cfg.clone();
    cfg2.class_weights = vec![4.0, 0.5];
    let nodes2 = total_loss_on_tape(&mut tape2, &steps2, &gt, &cfg2).unwrap();
    let mut class0 = 0.0;
    for k in 0..n_steps {
        let y = gt.steps[k].slice_channels(0, 1).unwrap();
        let p = preds[k].0.slice_channels(0, 1).unwrap();
        class0 += focal_loss_value(&p, &y, gt.counts[k][0], &cfg).unwrap();
    }
    class0 /= n_steps as f64;
    assert!(
        (nodes2.l_class - (nodes.l_class + 2.0 * class0)).abs() < 1e-12,
        "weight sensitivity"
    );
}

#[test]
fn loss_config_validation() {
    let cfg = LossConfig::for_classes(3);
    assert!(cfg.validate(3).is_ok());
    assert!(cfg.validate(2).is_err(), "weight count mismatch");

    let mut bad = LossConfig::for_classes(1);
    bad.alpha = 1.5;
    assert!(bad.validate(1).is_err());
    let mut bad = LossConfig::for_classes(1);
    bad.gamma = -1.0;
    assert!(bad.validate(1).is_err());
    let mut bad = LossConfig::for_classes(1);
    bad.clamp_eps = 0.0;
    assert!(bad.validate(1).is_err());
}

#[test]
fn step_count_mismatch_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let p = tape.leaf(GridTensor::full(&[1, 2, 2], 0.5));
    let o = tape.leaf(GridTensor::zeros(&[2, 2, 2]));
    let steps = vec![StepOutput { class_probs: p, offsets: o }];
    let gt = GroundTruthSeq::<f64> {
        steps: vec![GridTensor::zeros(&[3, 2, 2]), GridTensor::zeros(&[3, 2, 2])],
        counts: vec![vec![0], vec![0]],
        n_classes: 1,
    };
    let cfg = LossConfig::for_classes(1);
    assert!(total_loss_on_tape(&mut tape, &steps, &gt, &cfg).is_err());
}
