//! Finite-difference verification of every differentiable graph operation.
//!
//! Each trial draws seeded random inputs, scalarises the operation's output
//! against a random cotangent (so every output entry feeds the loss with its
//! own weight), and compares every input entry's analytic gradient with
//! central differences at eps = 1e-6. The registry must run at least 100
//! trials and stay under a max relative error of 1e-6 throughout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skinfuse::blocks::AttentionBlock;
use skinfuse::gradcheck::max_grad_error;
use skinfuse::rng::Streams;
use skinfuse::tensor::{Graph, Tensor, Var};
use skinfuse::Result;

const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid random tensor")
}

/// Random shape within the checked envelope: rank 1-3, spatial dims <= 4,
/// channel dim <= 8.
fn rand_shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    match rng.gen_range(1..=3) {
        1 => vec![rng.gen_range(1..=8)],
        2 => vec![rng.gen_range(1..=4), rng.gen_range(1..=8)],
        _ => vec![rng.gen_range(1..=4), rng.gen_range(1..=4), rng.gen_range(1..=8)],
    }
}

#[derive(Default)]
struct Stats {
    trials: usize,
    worst: f64,
    worst_at: String,
}

impl Stats {
    fn record(&mut self, label: &str, err: f64) {
        self.trials += 1;
        if err > self.worst {
            self.worst = err;
            self.worst_at = label.to_string();
        }
    }
}

/// Run one gradient check: probe the op's output shape, scalarise against a
/// random cotangent, and compare analytic vs central-difference gradients
/// for every entry of every input.
fn check(
    stats: &mut Stats,
    rng: &mut ChaCha8Rng,
    label: &str,
    inputs: &mut [Tensor],
    mut op: impl FnMut(&mut Graph, &[Var]) -> Result<Var>,
) {
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
        let y = op(&mut g, &vars).unwrap_or_else(|e| panic!("{label}: op failed to build: {e}"));
        g.value(y).shape().to_vec()
    };
    let cot = rand_tensor(&out_shape, -1.0, 1.0, rng);
    let err = max_grad_error(inputs, EPS, |g, v| {
        let y = op(g, v)?;
        let c = g.constant(cot.clone());
        let weighted = g.mul(y, c)?;
        g.sum_all(weighted)
    })
    .unwrap_or_else(|e| panic!("{label}: gradient check failed to run: {e}"));
    assert!(err < TOL, "{label}: max relative error {err:.3e} exceeds {TOL:.0e}");
    stats.record(label, err);
}

#[test]
fn every_graph_op_matches_central_differences() {
    let mut stats = Stats::default();
    let mut r = ChaCha8Rng::seed_from_u64(0x0f2d_5eed);

    for t in 0..10 {
        let shape = rand_shape(&mut r);
        let mut inputs =
            vec![rand_tensor(&shape, -1.0, 1.0, &mut r), rand_tensor(&shape, -1.0, 1.0, &mut r)];
        check(&mut stats, &mut r, &format!("add #{t}"), &mut inputs, |g, v| g.add(v[0], v[1]));
    }

    for t in 0..10 {
        let shape = rand_shape(&mut r);
        let mut inputs =
            vec![rand_tensor(&shape, -1.0, 1.0, &mut r), rand_tensor(&shape, -1.0, 1.0, &mut r)];
        check(&mut stats, &mut r, &format!("mul #{t}"), &mut inputs, |g, v| g.mul(v[0], v[1]));
    }

    for t in 0..10 {
        let shape = rand_shape(&mut r);
        let c = r.gen_range(-2.0..2.0);
        let mut inputs = vec![rand_tensor(&shape, -1.0, 1.0, &mut r)];
        check(&mut stats, &mut r, &format!("mul_scalar #{t}"), &mut inputs, |g, v| {
            g.mul_scalar(v[0], c)
        });
    }

    for t in 0..10 {
        let (m, k, n) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
        let mut inputs =
            vec![rand_tensor(&[m, k], -1.0, 1.0, &mut r), rand_tensor(&[k, n], -1.0, 1.0, &mut r)];
        check(&mut stats, &mut r, &format!("matmul #{t}"), &mut inputs, |g, v| {
            g.matmul(v[0], v[1])
        });
    }

    for t in 0..5 {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let mut inputs = vec![rand_tensor(&[m, n], -1.0, 1.0, &mut r)];
        check(&mut stats, &mut r, &format!("transpose2d #{t}"), &mut inputs, |g, v| {
            g.transpose2d(v[0])
        });
    }

    for t in 0..5 {
        let (a, b, c) = (r.gen_range(1..=3), r.gen_range(1..=3), r.gen_range(1..=4));
        let mut inputs = vec![rand_tensor(&[a, b, c], -1.0, 1.0, &mut r)];
        check(&mut stats, &mut r, &format!("reshape #{t}"), &mut inputs, move |g, v| {
            g.reshape(v[0], &[c, a * b])
        });
    }

    for t in 0..10 {
        let (m, n) = (r.gen_range(1..=4), r.gen_range(2..=6));
        let mut inputs = vec![rand_tensor(&[m, n], -3.0, 3.0, &mut r)];
        check(&mut stats, &mut r, &format!("softmax_rows #{t}"), &mut inputs, |g, v| {
            g.softmax_rows(v[0])
        });
    }

    for t in 0..10 {
        let shape = rand_shape(&mut r);
        let mut inputs = vec![rand_tensor(&shape, -3.0, 3.0, &mut r)];
        check(&mut stats, &mut r, &format!("silu #{t}"), &mut inputs, |g, v| g.silu(v[0]));
    }

    for t in 0..10 {
        let (h, w) = (r.gen_range(2..=4), r.gen_range(2..=4));
        let (ci, co) = (r.gen_range(1..=3), r.gen_range(1..=3));
        let stride = r.gen_range(1..=2);
        let mut inputs = vec![
            rand_tensor(&[h, w, ci], -1.0, 1.0, &mut r),
            rand_tensor(&[3, 3, ci, co], -0.5, 0.5, &mut r),
            rand_tensor(&[co], -0.5, 0.5, &mut r),
        ];
        check(
            &mut stats,
            &mut r,
            &format!("conv3x3 stride {stride} #{t}"),
            &mut inputs,
            move |g, v| g.conv3x3(v[0], v[1], v[2], stride),
        );
    }

    for t in 0..10 {
        let (h, w) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let (ci, co) = (r.gen_range(1..=4), r.gen_range(1..=4));
        let mut inputs = vec![
            rand_tensor(&[h, w, ci], -1.0, 1.0, &mut r),
            rand_tensor(&[ci, co], -0.5, 0.5, &mut r),
            rand_tensor(&[co], -0.5, 0.5, &mut r),
        ];
        check(&mut stats, &mut r, &format!("conv1x1 #{t}"), &mut inputs, |g, v| {
            g.conv1x1(v[0], v[1], v[2])
        });
    }

    for t in 0..10 {
        let (i, o) = (r.gen_range(1..=8), r.gen_range(1..=5));
        let mut inputs = vec![
            rand_tensor(&[i], -1.0, 1.0, &mut r),
            rand_tensor(&[i, o], -0.5, 0.5, &mut r),
            rand_tensor(&[o], -0.5, 0.5, &mut r),
        ];
        check(&mut stats, &mut r, &format!("linear #{t}"), &mut inputs, |g, v| {
            g.linear(v[0], v[1], v[2])
        });
    }

    for t in 0..5 {
        let (h, w, c) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=8));
        let mut inputs = vec![rand_tensor(&[h, w, c], -1.0, 1.0, &mut r)];
        check(&mut stats, &mut r, &format!("global_avg_pool #{t}"), &mut inputs, |g, v| {
            g.global_avg_pool(v[0])
        });
    }

    for t in 0..5 {
        let (fh, fw) = (r.gen_range(1..=2), r.gen_range(1..=2));
        let (oh, ow) = (r.gen_range(1..=2), r.gen_range(1..=2));
        let c = r.gen_range(1..=4);
        let mut inputs = vec![rand_tensor(&[fh * oh, fw * ow, c], -1.0, 1.0, &mut r)];
        check(&mut stats, &mut r, &format!("avg_pool2d #{t}"), &mut inputs, move |g, v| {
            g.avg_pool2d(v[0], fh, fw)
        });
    }

    for t in 0..5 {
        let (h, w, c) = (r.gen_range(1..=2), r.gen_range(1..=2), r.gen_range(1..=4));
        let (fh, fw) = (r.gen_range(1..=2), r.gen_range(1..=2));
        let mut inputs = vec![rand_tensor(&[h, w, c], -1.0, 1.0, &mut r)];
        check(&mut stats, &mut r, &format!("upsample_nearest #{t}"), &mut inputs, move |g, v| {
            g.upsample_nearest(v[0], fh, fw)
        });
    }

    for t in 0..5 {
        let (la, lb) = (r.gen_range(1..=6), r.gen_range(1..=6));
        let mut inputs =
            vec![rand_tensor(&[la], -1.0, 1.0, &mut r), rand_tensor(&[lb], -1.0, 1.0, &mut r)];
        check(&mut stats, &mut r, &format!("concat #{t}"), &mut inputs, |g, v| {
            g.concat(v[0], v[1])
        });
    }

    for t in 0..10 {
        let k = r.gen_range(2..=6);
        let target = t % k;
        let mut inputs = vec![rand_tensor(&[k], -3.0, 3.0, &mut r)];
        check(
            &mut stats,
            &mut r,
            &format!("cross_entropy k={k} target={target} #{t}"),
            &mut inputs,
            move |g, v| g.cross_entropy(v[0], target),
        );
    }

    // A chain through several ops at once, ending in the scalar loss the
    // training loop actually uses.
    for t in 0..5 {
        let target = t % 4;
        let mut inputs = vec![
            rand_tensor(&[3, 3, 2], -1.0, 1.0, &mut r),
            rand_tensor(&[3, 3, 2, 3], -0.5, 0.5, &mut r),
            rand_tensor(&[3], -0.5, 0.5, &mut r),
            rand_tensor(&[3, 4], -0.5, 0.5, &mut r),
            rand_tensor(&[4], -0.5, 0.5, &mut r),
        ];
        let err = max_grad_error(&mut inputs, EPS, |g, v| {
            let conv = g.conv3x3(v[0], v[1], v[2], 1)?;
            let act = g.silu(conv)?;
            let pooled = g.global_avg_pool(act)?;
            let logits = g.linear(pooled, v[3], v[4])?;
            g.cross_entropy(logits, target)
        })
        .expect("composite chain check runs");
        assert!(err < TOL, "composite chain #{t}: max relative error {err:.3e}");
        stats.record(&format!("composite chain #{t}"), err);
    }

    assert!(stats.trials >= 100, "only {} trials ran; the suite promises at least 100", stats.trials);
    println!(
        "{} gradient trials, worst relative error {:.3e} at {}",
        stats.trials, stats.worst, stats.worst_at
    );
}

/// The attention block wires projections, a row softmax, matrix products and
/// a residual add together; its input gradients must still verify.
#[test]
fn attention_block_input_gradients_verify() {
    let streams = Streams::new(41);
    for trial in 0..4u64 {
        let mut r = ChaCha8Rng::seed_from_u64(900 + trial);
        let mut block =
            AttentionBlock::init(3, trial % 2 == 0, &streams.derive(&trial.to_string()));
        // A fresh block passes the target straight through (zero value
        // projection), which would make the guide gradient trivially zero;
        // fill the projection so both inputs carry real gradient signal.
        for v in block.value_proj.weight.data_mut() {
            *v = r.gen_range(-0.8..0.8);
        }
        for v in block.value_proj.bias.data_mut() {
            *v = r.gen_range(-0.2..0.2);
        }
        let mut inputs = vec![
            rand_tensor(&[2, 2, 3], -1.0, 1.0, &mut r),
            rand_tensor(&[2, 2, 3], -1.0, 1.0, &mut r),
        ];
        let cot = rand_tensor(&[2, 2, 3], -1.0, 1.0, &mut r);
        let err = max_grad_error(&mut inputs, EPS, |g, v| {
            let (refined, _map) = block.forward(g, v[0], v[1])?;
            let c = g.constant(cot.clone());
            let weighted = g.mul(refined, c)?;
            g.sum_all(weighted)
        })
        .expect("attention gradient check runs");
        assert!(err < TOL, "attention block trial {trial}: max relative error {err:.3e}");
    }
}

/// Pushing one logit far above the rest must not destroy the gradient: the
/// analytic value has to match the closed form softmax(logits) - onehot to
/// near machine precision, even where finite differences get too noisy to
/// measure it.
#[test]
fn extreme_logit_cross_entropy_matches_the_closed_form_gradient() {
    let cases: &[(Vec<f64>, usize)] = &[
        (vec![30.0, -30.0, 0.0], 0),
        (vec![30.0, -30.0, 0.0], 1),
        (vec![-8.0, 8.0, 1.0, 0.5], 2),
        (vec![700.0, -700.0], 0),
        (vec![700.0, -700.0], 1),
    ];
    for (logits, target) in cases {
        let mut t = Tensor::new(vec![logits.len()], logits.clone()).unwrap();
        t.set_requires_grad(true);
        let mut g = Graph::new();
        let l = g.leaf(&t);
        let ce = g.cross_entropy(l, *target).unwrap();
        let loss_val = g.scalar_value(ce);
        assert!(loss_val.is_finite(), "loss must stay finite for logits {logits:?}");
        g.backward(ce).unwrap();
        let grad = g.grad_of(&t).expect("tracked leaf has a gradient");

        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (i, &gi) in grad.iter().enumerate() {
            let expected = exps[i] / z - if i == *target { 1.0 } else { 0.0 };
            assert!(
                (gi - expected).abs() <= 1e-12,
                "logits {logits:?} target {target}: grad[{i}] = {gi}, expected {expected}"
            );
        }
    }
}

/// One tensor feeding several consumers must receive the sum of all its
/// downstream gradients, and registering the same tensor twice must bind to
/// a single graph leaf rather than splitting the gradient.
#[test]
fn shared_inputs_accumulate_gradients() {
    // y = x*x + x  =>  dy/dx = 2x + 1, with x entering mul twice and add once.
    let mut x = Tensor::new(vec![4], vec![0.5, -1.25, 2.0, 0.0]).unwrap();
    x.set_requires_grad(true);
    let mut g = Graph::new();
    let xv = g.leaf(&x);
    let sq = g.mul(xv, xv).unwrap();
    let y = g.add(sq, xv).unwrap();
    let loss = g.sum_all(y).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad_of(&x).unwrap();
    for (i, (&gi, &xi)) in grad.iter().zip(x.data()).enumerate() {
        assert_eq!(gi, 2.0 * xi + 1.0, "entry {i}");
    }

    // Registering the same tensor twice: both uses hit one leaf, so the
    // gradient of sum(x + x) is exactly 2 everywhere.
    let mut g = Graph::new();
    let a = g.leaf(&x);
    let b = g.leaf(&x);
    let s = g.add(a, b).unwrap();
    let loss = g.sum_all(s).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad_of(&x).unwrap();
    assert!(grad.iter().all(|&v| v == 2.0), "deduplicated leaf grads: {grad:?}");
}
