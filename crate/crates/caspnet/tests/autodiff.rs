//! Central finite-difference checks for every differentiable operation and
//! for a small end-to-end network, all at 64-bit precision.

use caspnet::loss::{total_loss_on_tape, LossConfig};
use caspnet::network::{CaspNet, CaspNetConfig};
use caspnet::raster::{GroundTruthSeq, InputGridSeq, PredictionMode};
use caspnet::tensor::{GridTensor, NodeId, NormMode, Tape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_H: f64 = 1e-5;
const OP_TOL: f64 = 1e-4;
const E2E_TOL: f64 = 1e-3;
/// Differences below this absolute size are treated as zero agreement.
const ABS_FLOOR: f64 = 1e-7;

fn rt(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> GridTensor<f64> {
    GridTensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Random values bounded away from zero, for kinked activations.
fn rt_offzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> GridTensor<f64> {
    GridTensor::from_fn(shape, |_| {
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        sign * rng.gen_range(0.1..1.0)
    })
}

fn rel_err(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < ABS_FLOOR {
        0.0
    } else {
        (a - n).abs() / scale.max(ABS_FLOOR)
    }
}

/// Evaluate the scalar output of `build` at the given leaf values.
fn eval<F>(build: &F, leaves: &[GridTensor<f64>]) -> f64
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = build(&mut tape, &ids);
    tape.value(out).item()
}

/// Compare reverse-mode gradients of `build` against central finite
/// differences for every element of every leaf. Returns the max rel error.
fn check_gradients<F>(name: &str, leaves: &[GridTensor<f64>], build: F, tol: f64) -> f64
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> NodeId,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = build(&mut tape, &ids);
    assert_eq!(
        tape.value(out).numel(),
        1,
        "{name}: gradient check needs a scalar output"
    );
    tape.backward(out).unwrap();
    let grads: Vec<GridTensor<f64>> = ids
        .iter()
        .zip(leaves)
        .map(|(&id, leaf)| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| GridTensor::zeros(leaf.shape()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut probe = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for j in 0..leaf.numel() {
            let x = leaf.data()[j];
            probe[li].data_mut()[j] = x + FD_H;
            let up = eval(&build, &probe);
            probe[li].data_mut()[j] = x - FD_H;
            let down = eval(&build, &probe);
            probe[li].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_H);
            let analytic = grads[li].data()[j];
            let e = rel_err(analytic, numeric);
            if e > worst {
                worst = e;
            }
            assert!(
                e <= tol,
                "{name}: leaf {li} element {j}: analytic {analytic:.9e} vs numeric {numeric:.9e} (rel {e:.3e})"
            );
        }
    }
    worst
}

/// Reduce any tensor to a scalar through a fixed random weighting so all
/// output elements influence the check.
fn head(tape: &mut Tape<f64>, y: NodeId, w: &GridTensor<f64>) -> NodeId {
    let weighted = tape.mul_const(y, w.clone()).unwrap();
    tape.sum(weighted)
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for &(stride, pad, dilation) in &[(1usize, (1usize, 1usize), 1usize), (2, (0, 0), 1), (1, (2, 2), 2)] {
        let x = rt(&mut rng, &[2, 6, 7], -1.0, 1.0);
        let w = rt(&mut rng, &[3, 2, 3, 3], -0.6, 0.6);
        let b = rt(&mut rng, &[3], -0.3, 0.3);
        let probe = {
            let mut t = Tape::<f64>::new();
            let (xi, wi, bi) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
            let y = t.conv2d(xi, wi, Some(bi), stride, pad, dilation).unwrap();
            t.value(y).shape().to_vec()
        };
        let hw = rt(&mut rng, &probe, -1.0, 1.0);
        check_gradients(
            &format!("conv2d s{stride} p{pad:?} d{dilation}"),
            &[x, w, b],
            |t, ids| {
                let y = t.conv2d(ids[0], ids[1], Some(ids[2]), stride, pad, dilation).unwrap();
                head(t, y, &hw)
            },
            OP_TOL,
        );
    }
}

#[test]
fn conv2d_without_bias_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rt(&mut rng, &[2, 5, 5], -1.0, 1.0);
    let w = rt(&mut rng, &[2, 2, 3, 3], -0.6, 0.6);
    let hw = rt(&mut rng, &[2, 5, 5], -1.0, 1.0);
    check_gradients(
        "conv2d no bias",
        &[x, w],
        |t, ids| {
            let y = t.conv2d(ids[0], ids[1], None, 1, (1, 1), 1).unwrap();
            head(t, y, &hw)
        },
        OP_TOL,
    );
}

#[test]
fn conv_transpose2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rt(&mut rng, &[2, 4, 5], -1.0, 1.0);
    let w = rt(&mut rng, &[2, 3, 4, 4], -0.5, 0.5);
    let b = rt(&mut rng, &[3], -0.3, 0.3);
    let probe = {
        let mut t = Tape::<f64>::new();
        let (xi, wi, bi) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(b.clone()));
        let y = t.conv_transpose2d(xi, wi, Some(bi), 2, (1, 1)).unwrap();
        t.value(y).shape().to_vec()
    };
    let hw = rt(&mut rng, &probe, -1.0, 1.0);
    check_gradients(
        "conv_transpose2d s2 p1",
        &[x, w, b],
        |t, ids| {
            let y = t.conv_transpose2d(ids[0], ids[1], Some(ids[2]), 2, (1, 1)).unwrap();
            head(t, y, &hw)
        },
        OP_TOL,
    );
}

#[test]
fn max_pool_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rt(&mut rng, &[2, 6, 6], -1.0, 1.0);
    let hw = rt(&mut rng, &[2, 3, 3], -1.0, 1.0);
    check_gradients(
        "max_pool2d k2 s2",
        &[x],
        |t, ids| {
            let y = t.max_pool2d(ids[0], 2, 2).unwrap();
            head(t, y, &hw)
        },
        OP_TOL,
    );
}

#[test]
fn batch_norm_train_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rt(&mut rng, &[3, 4, 4], -1.0, 1.0);
    let gamma = rt(&mut rng, &[3], 0.5, 1.5);
    let beta = rt(&mut rng, &[3], -0.5, 0.5);
    let rm = GridTensor::zeros(&[3]);
    let rv = GridTensor::full(&[3], 1.0);
    let hw = rt(&mut rng, &[3, 4, 4], -1.0, 1.0);
    check_gradients(
        "batch_norm train",
        &[x, gamma, beta],
        |t, ids| {
            let y = t
                .batch_norm2d(ids[0], ids[1], ids[2], &rm, &rv, NormMode::Train, 1e-5)
                .unwrap();
            head(t, y, &hw)
        },
        OP_TOL,
    );
}

#[test]
fn batch_norm_eval_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rt(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let gamma = rt(&mut rng, &[2], 0.5, 1.5);
    let beta = rt(&mut rng, &[2], -0.5, 0.5);
    let rm = rt(&mut rng, &[2], -0.2, 0.2);
    let rv = rt(&mut rng, &[2], 0.5, 1.5);
    let hw = rt(&mut rng, &[2, 3, 3], -1.0, 1.0);
    check_gradients(
        "batch_norm eval",
        &[x, gamma, beta],
        |t, ids| {
            let y = t
                .batch_norm2d(ids[0], ids[1], ids[2], &rm, &rv, NormMode::Eval, 1e-5)
                .unwrap();
            head(t, y, &hw)
        },
        OP_TOL,
    );
}

#[test]
fn softmax_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = rt(&mut rng, &[4, 3, 3], -2.0, 2.0);
    let hw = rt(&mut rng, &[4, 3, 3], -1.0, 1.0);
    check_gradients(
        "softmax_channels",
        &[x],
        |t, ids| {
            let y = t.softmax_channels(ids[0]).unwrap();
            head(t, y, &hw)
        },
        OP_TOL,
    );
}

#[test]
fn bilinear_upsample_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = rt(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let hw = rt(&mut rng, &[2, 6, 8], -1.0, 1.0);
    check_gradients(
        "bilinear_upsample2x",
        &[x],
        |t, ids| {
            let y = t.bilinear_upsample2x(ids[0]).unwrap();
            head(t, y, &hw)
        },
        OP_TOL,
    );
}

#[test]
fn pointwise_activation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let hw = rt(&mut rng, &[2, 4, 4], -1.0, 1.0);

    let x = rt_offzero(&mut rng, &[2, 4, 4]);
    check_gradients(
        "relu",
        &[x],
        |t, ids| {
            let y = t.relu(ids[0]);
            head(t, y, &hw)
        },
        OP_TOL,
    );

    let x = rt(&mut rng, &[2, 4, 4], -2.0, 2.0);
    check_gradients(
        "sigmoid",
        &[x],
        |t, ids| {
            let y = t.sigmoid(ids[0]);
            head(t, y, &hw)
        },
        OP_TOL,
    );

    let x = rt(&mut rng, &[2, 4, 4], -2.0, 2.0);
    check_gradients(
        "tanh",
        &[x],
        |t, ids| {
            let y = t.tanh(ids[0]);
            head(t, y, &hw)
        },
        OP_TOL,
    );
}

#[test]
fn arithmetic_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let hw = rt(&mut rng, &[2, 3, 3], -1.0, 1.0);

    let a = rt(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let b = rt(&mut rng, &[2, 3, 3], -1.0, 1.0);
    check_gradients(
        "add",
        &[a.clone(), b.clone()],
        |t, ids| {
            let y = t.add(ids[0], ids[1]).unwrap();
            head(t, y, &hw)
        },
        OP_TOL,
    );
    check_gradients(
        "mul",
        &[a.clone(), b],
        |t, ids| {
            let y = t.mul(ids[0], ids[1]).unwrap();
            head(t, y, &hw)
        },
        OP_TOL,
    );
    check_gradients(
        "scale",
        &[a.clone()],
        |t, ids| {
            let y = t.scale(ids[0], -1.7);
            head(t, y, &hw)
        },
        OP_TOL,
    );
    let k = rt(&mut rng, &[2, 3, 3], -1.0, 1.0);
    check_gradients(
        "mul_const",
        &[a],
        |t, ids| {
            let y = t.mul_const(ids[0], k.clone()).unwrap();
            head(t, y, &hw)
        },
        OP_TOL,
    );
}

#[test]
fn channel_shuffle_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let a = rt(&mut rng, &[2, 3, 3], -1.0, 1.0);
    let b = rt(&mut rng, &[1, 3, 3], -1.0, 1.0);
    let c = rt(&mut rng, &[3, 3, 3], -1.0, 1.0);
    let hw = rt(&mut rng, &[6, 3, 3], -1.0, 1.0);
    check_gradients(
        "concat_channels",
        &[a.clone(), b.clone(), c],
        |t, ids| {
            let y = t.concat_channels(&[ids[0], ids[1], ids[2]]).unwrap();
            head(t, y, &hw)
        },
        OP_TOL,
    );

    let x = rt(&mut rng, &[5, 3, 3], -1.0, 1.0);
    let hw2 = rt(&mut rng, &[2, 3, 3], -1.0, 1.0);
    check_gradients(
        "slice_channels",
        &[x],
        |t, ids| {
            let y = t.slice_channels(ids[0], 1, 3).unwrap();
            head(t, y, &hw2)
        },
        OP_TOL,
    );

    let s = rt(&mut rng, &[1, 3, 3], -1.0, 1.0);
    let hw3 = rt(&mut rng, &[2, 3, 3], -1.0, 1.0);
    check_gradients(
        "broadcast_mul_channel",
        &[a, s],
        |t, ids| {
            let y = t.broadcast_mul_channel(ids[0], ids[1]).unwrap();
            head(t, y, &hw3)
        },
        OP_TOL,
    );
}

#[test]
fn max_n_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let a = rt(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let b = rt(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let c = rt(&mut rng, &[2, 4, 4], -1.0, 1.0);
    let hw = rt(&mut rng, &[2, 4, 4], -1.0, 1.0);
    check_gradients(
        "max_n",
        &[a, b, c],
        |t, ids| {
            let y = t.max_n(&[ids[0], ids[1], ids[2]]).unwrap();
            head(t, y, &hw)
        },
        OP_TOL,
    );
}

#[test]
fn focal_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let p = rt(&mut rng, &[1, 5, 5], 0.08, 0.92);
    // Ground truth: two exact peaks, smooth elsewhere.
    let mut y = rt(&mut rng, &[1, 5, 5], 0.0, 0.85);
    y.data_mut()[3] = 1.0;
    y.data_mut()[17] = 1.0;
    check_gradients(
        "focal_class_loss",
        &[p],
        |t, ids| {
            t.focal_class_loss(ids[0], y.clone(), 2, 0.25, 4.0, 2.0, 1e-6)
                .unwrap()
        },
        OP_TOL,
    );
}

#[test]
fn offset_loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let pred = rt(&mut rng, &[2, 4, 4], -0.5, 0.5);
    let target = rt(&mut rng, &[2, 4, 4], -0.5, 0.5);
    let mask: Vec<bool> = (0..16).map(|i| i % 3 == 0).collect();
    check_gradients(
        "offset_loss",
        &[pred],
        |t, ids| t.offset_loss(ids[0], target.clone(), mask.clone()).unwrap(),
        OP_TOL,
    );
}

#[test]
fn shared_parameter_gradients_accumulate() {
    // The same parameter slot bound twice must receive the sum of both
    // contributions: d/dw sum(x1*w + x2*w) = sum(x1) + sum(x2) per element.
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let w = rt(&mut rng, &[2, 3], -1.0, 1.0);
    let x1 = rt(&mut rng, &[2, 3], -1.0, 1.0);
    let x2 = rt(&mut rng, &[2, 3], -1.0, 1.0);

    let mut tape = Tape::<f64>::new();
    let wa = tape.param_leaf(0, &w);
    let wb = tape.param_leaf(0, &w);
    assert_eq!(wa, wb, "same slot must bind to one leaf");
    let x1n = tape.leaf(x1.clone());
    let x2n = tape.leaf(x2.clone());
    let m1 = tape.mul(x1n, wa).unwrap();
    let m2 = tape.mul(x2n, wb).unwrap();
    let s = tape.add(m1, m2).unwrap();
    let loss = tape.sum(s);
    tape.backward(loss).unwrap();
    let g = tape.grad(wa).unwrap();
    for i in 0..g.numel() {
        let expect = x1.data()[i] + x2.data()[i];
        assert!(
            (g.data()[i] - expect).abs() < 1e-12,
            "shared grad {i}: {} vs {expect}",
            g.data()[i]
        );
    }
}

#[test]
fn backward_twice_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(GridTensor::full(&[2, 2], 1.5));
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    let err = tape.backward(loss).unwrap_err();
    assert!(
        err.to_string().contains("backward called twice"),
        "unexpected error: {err}"
    );
}

/// End-to-end: every trainable parameter of a toy network (16x16 grid, two
/// input and two output steps, one pyramid level) against finite differences
/// of the full training loss.
#[test]
fn end_to_end_toy_network_gradients() {
    let cfg = CaspNetConfig {
        levels: 1,
        channels: vec![4],
        dilations: vec![1, 2],
        gabor_enabled: true,
        gabor_orientations: 2,
        mode: PredictionMode::SingleTarget,
        input_steps: 2,
        output_steps: 2,
        u_extent: 16,
        v_extent: 16,
        seed: 5,
    };
    let net = CaspNet::<f64>::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);

    let inputs = InputGridSeq {
        steps: (0..cfg.input_steps)
            .map(|_| rt(&mut rng, &[7, 16, 16], 0.0, 1.0))
            .collect(),
    };
    let map = rt(&mut rng, &[3, 16, 16], 0.0, 1.0);
    // Ground truth with one exact peak per step plus its offset target.
    let gt_steps: Vec<GridTensor<f64>> = (0..cfg.output_steps)
        .map(|k| {
            let mut g = GridTensor::<f64>::zeros(&[3, 16, 16]);
            let at = (5 + k) * 16 + (7 + k);
            g.data_mut()[at] = 1.0;
            g.data_mut()[at - 1] = 0.6;
            g.data_mut()[256 + at] = 0.25;
            g.data_mut()[2 * 256 + at] = -0.1;
            g
        })
        .collect();
    let gt = GroundTruthSeq {
        steps: gt_steps,
        counts: vec![vec![1usize]; cfg.output_steps],
        n_classes: 1,
    };
    let loss_cfg = LossConfig::for_classes(1);

    let loss_value = |net: &CaspNet<f64>| -> f64 {
        let mut tape = Tape::new();
        let trace = net.forward(&mut tape, &inputs, &map, NormMode::Train).unwrap();
        let nodes = total_loss_on_tape(&mut tape, &trace.steps, &gt, &loss_cfg).unwrap();
        nodes.l_total
    };

    // Analytic gradients.
    let mut tape = Tape::new();
    let trace = net.forward(&mut tape, &inputs, &map, NormMode::Train).unwrap();
    let nodes = total_loss_on_tape(&mut tape, &trace.steps, &gt, &loss_cfg).unwrap();
    tape.backward(nodes.total).unwrap();
    let mut grads: Vec<Option<GridTensor<f64>>> = vec![None; net.registry.len()];
    let bindings: Vec<(usize, NodeId)> = tape.param_bindings().collect();
    for (slot, node) in bindings {
        grads[slot] = tape.grad(node).cloned();
    }

    let mut probe = net;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for slot in 0..probe.registry.len() {
        let id = caspnet::network::ParamId(slot);
        if !probe.registry.is_trainable(id) {
            continue;
        }
        let g = grads[slot]
            .as_ref()
            .unwrap_or_else(|| panic!("no gradient for {}", probe.registry.name(id)))
            .clone();
        let n = probe.registry.get(id).numel();
        // Sample a handful of elements per parameter to keep runtime low
        // while touching every layer.
        let stride = (n / 6).max(1);
        for j in (0..n).step_by(stride) {
            let x = probe.registry.get(id).data()[j];
            probe.registry.get_mut(id).data_mut()[j] = x + FD_H;
            let up = loss_value(&probe);
            probe.registry.get_mut(id).data_mut()[j] = x - FD_H;
            let down = loss_value(&probe);
            probe.registry.get_mut(id).data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * FD_H);
            let analytic = g.data()[j];
            let e = rel_err(analytic, numeric);
            if e > worst {
                worst = e;
            }
            checked += 1;
            assert!(
                e <= E2E_TOL,
                "{} element {j}: analytic {analytic:.9e} vs numeric {numeric:.9e} (rel {e:.3e})",
                probe.registry.name(id)
            );
        }
    }
    assert!(checked > 100, "too few elements probed: {checked}");
    println!("end-to-end gradient check: {checked} elements, worst rel {worst:.3e}");
}
