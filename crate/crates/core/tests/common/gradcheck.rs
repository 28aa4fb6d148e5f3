//! Finite-difference gradient checks for every tape operation and for the
//! full model loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfmamba_core::autodiff::relative_error;
use sfmamba_core::model::{BnMode, Model, ModelConfig};
use sfmamba_core::objectives::label_smoothed_ce;
use sfmamba_core::{finite_difference, Graph, Result, Tensor, Var};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
pub const CASES: u64 = 20;

/// Receives `(operation, max relative error)` for each checked input set.
pub type Report<'a> = &'a mut dyn FnMut(&str, f64);

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Entries in [-2, 2] kept at least `gap` away from zero (for kinked ops).
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(gap..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Builds `sum(op(inputs) * weights)` with fixed pseudo-random weights so
/// every output element gets a distinct upstream gradient.
fn scalar_loss<F>(g: &mut Graph, vars: &[Var], op: &F) -> Result<Var>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let out = op(g, vars)?;
    let shape = g.shape(out).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.7).sin()));
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

/// Largest relative error over all inputs of `op`; infinite on a shape error.
pub fn max_error<F>(inputs: &[Tensor], op: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = scalar_loss(&mut g, &vars, &op).unwrap();
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let numeric = finite_difference(
            |probe| {
                let mut g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| g.param(if j == k { probe.clone() } else { t.clone() }))
                    .collect();
                let l = scalar_loss(&mut g, &vars, &op)?;
                Ok(g.value(l).item())
            },
            x,
            H,
        )
        .unwrap();
        let analytic = grads.get(vars[k]);
        if analytic.shape() != x.shape() {
            return f64::INFINITY;
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    worst
}

fn check<F>(report: Report<'_>, name: &str, inputs: &[Tensor], op: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    report(name, max_error(inputs, op));
}

fn each_case(seed: u64, report: Report<'_>, f: impl Fn(&mut ChaCha8Rng, Report<'_>)) {
    for case in 0..CASES {
        f(&mut ChaCha8Rng::seed_from_u64(seed * 1000 + case), report);
    }
}

pub fn elementwise_binary_ops(report: Report<'_>) {
    each_case(1, report, |r, report| {
        let a = uniform(r, &[3, 4], -2.0, 2.0);
        let b = uniform(r, &[3, 4], -2.0, 2.0);
        check(report, "add", &[a.clone(), b.clone()], |g, v| {
            g.add(v[0], v[1])
        });
        check(report, "sub", &[a.clone(), b.clone()], |g, v| {
            g.sub(v[0], v[1])
        });
        check(report, "mul", &[a, b], |g, v| g.mul(v[0], v[1]));
    });
}

pub fn trailing_broadcast_ops(report: Report<'_>) {
    each_case(2, report, |r, report| {
        let a = uniform(r, &[2, 3, 4], -2.0, 2.0);
        let row = uniform(r, &[4], -2.0, 2.0);
        let mat = uniform(r, &[3, 4], -2.0, 2.0);
        check(report, "add row", &[a.clone(), row.clone()], |g, v| {
            g.add(v[0], v[1])
        });
        check(report, "mul row", &[row, a.clone()], |g, v| {
            g.mul(v[0], v[1])
        });
        check(report, "sub matrix", &[a, mat], |g, v| g.sub(v[0], v[1]));
    });
}

pub fn matmul_op(report: Report<'_>) {
    each_case(3, report, |r, report| {
        let a = uniform(r, &[3, 5], -2.0, 2.0);
        let b = uniform(r, &[5, 2], -2.0, 2.0);
        check(report, "matmul", &[a, b], |g, v| g.matmul(v[0], v[1]));
        let batched = uniform(r, &[2, 3, 5], -2.0, 2.0);
        let w = uniform(r, &[5, 4], -2.0, 2.0);
        check(report, "batched matmul", &[batched, w], |g, v| {
            g.matmul(v[0], v[1])
        });
    });
}

pub fn unary_ops(report: Report<'_>) {
    each_case(4, report, |r, report| {
        let x = uniform(r, &[2, 5], -2.0, 2.0);
        let pos = uniform(r, &[2, 5], 0.3, 2.0);
        check(report, "exp", std::slice::from_ref(&x), |g, v| {
            Ok(g.exp(v[0]))
        });
        check(report, "log", std::slice::from_ref(&pos), |g, v| {
            g.log(v[0])
        });
        check(report, "reciprocal", std::slice::from_ref(&pos), |g, v| {
            g.reciprocal(v[0])
        });
        check(report, "sqrt", &[pos], |g, v| g.sqrt(v[0]));
        check(
            report,
            "relu",
            &[away_from_zero(r, &[2, 5], 1e-3)],
            |g, v| Ok(g.relu(v[0])),
        );
        check(report, "sigmoid", std::slice::from_ref(&x), |g, v| {
            Ok(g.sigmoid(v[0]))
        });
        check(report, "softplus", std::slice::from_ref(&x), |g, v| {
            Ok(g.softplus(v[0]))
        });
        check(report, "silu", std::slice::from_ref(&x), |g, v| {
            g.silu(v[0])
        });
        check(report, "scale", std::slice::from_ref(&x), |g, v| {
            Ok(g.scale(v[0], -1.7))
        });
        check(report, "add_scalar", &[x], |g, v| {
            Ok(g.add_scalar(v[0], 0.4))
        });
    });
}

pub fn softmax_family(report: Report<'_>) {
    each_case(5, report, |r, report| {
        let x = uniform(r, &[3, 4], -2.0, 2.0);
        check(report, "softmax", std::slice::from_ref(&x), |g, v| {
            g.softmax(v[0])
        });
        check(report, "log_softmax", &[x], |g, v| g.log_softmax(v[0]));
    });
}

pub fn reductions(report: Report<'_>) {
    each_case(6, report, |r, report| {
        let x = uniform(r, &[2, 3, 4], -2.0, 2.0);
        for axis in 0..3 {
            check(report, "sum_axis", std::slice::from_ref(&x), |g, v| {
                g.sum_axis(v[0], axis)
            });
            check(report, "mean_axis", std::slice::from_ref(&x), |g, v| {
                g.mean_axis(v[0], axis)
            });
        }
        check(report, "sum", std::slice::from_ref(&x), |g, v| {
            Ok(g.sum(v[0]))
        });
        check(report, "mean", &[x], |g, v| Ok(g.mean(v[0])));
    });
}

pub fn layout_ops(report: Report<'_>) {
    each_case(7, report, |r, report| {
        let x = uniform(r, &[2, 3, 4], -2.0, 2.0);
        let y = uniform(r, &[2, 2, 4], -2.0, 2.0);
        check(report, "reshape", std::slice::from_ref(&x), |g, v| {
            g.reshape(v[0], &[6, 4])
        });
        check(report, "transpose", std::slice::from_ref(&x), |g, v| {
            g.transpose(v[0])
        });
        check(report, "concat", &[x.clone(), y], |g, v| {
            g.concat(&[v[0], v[1]], 1)
        });
        for axis in 0..3 {
            check(report, "slice", std::slice::from_ref(&x), |g, v| {
                g.slice(v[0], axis, 1, 2)
            });
            check(report, "reverse", std::slice::from_ref(&x), |g, v| {
                g.reverse(v[0], axis)
            });
        }
        let idx: Vec<usize> = (0..5).map(|_| r.random_range(0..3)).collect();
        check(report, "gather", &[x], |g, v| g.gather(v[0], 1, &idx));
    });
}

pub fn layer_norm_op(report: Report<'_>) {
    each_case(8, report, |r, report| {
        let x = uniform(r, &[3, 6], -2.0, 2.0);
        check(report, "layer_norm", &[x], |g, v| g.layer_norm(v[0], 1e-5));
    });
}

pub fn selective_scan_op(report: Report<'_>) {
    each_case(9, report, |r, report| {
        let (b, t, e, n) = (2, 5, 3, 2);
        let inputs = [
            uniform(r, &[b, t, e], -2.0, 2.0),
            uniform(r, &[b, t, e], 0.05, 1.0),
            uniform(r, &[e, n], -1.0, 1.0),
            uniform(r, &[b, t, n], -2.0, 2.0),
            uniform(r, &[b, t, n], -2.0, 2.0),
            uniform(r, &[e], -2.0, 2.0),
        ];
        check(report, "selective_scan", &inputs, |g, v| {
            g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5])
        });
    });
}

pub fn composite_graph_with_shared_subexpressions(report: Report<'_>) {
    each_case(10, report, |r, report| {
        let x = uniform(r, &[4, 3], -2.0, 2.0);
        let w = uniform(r, &[3, 3], -2.0, 2.0);
        check(report, "composite", &[x, w], |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let a = g.silu(h)?;
            let n = g.layer_norm(a, 1e-5)?;
            let s = g.add(n, h)?;
            let t = g.transpose(s)?;
            g.log_softmax(t)
        });
    });
}

/// Every operation group, for suites that run them all.
pub const GROUPS: &[(&str, fn(Report<'_>))] = &[
    ("elementwise_binary_ops", elementwise_binary_ops),
    ("trailing_broadcast_ops", trailing_broadcast_ops),
    ("matmul_op", matmul_op),
    ("unary_ops", unary_ops),
    ("softmax_family", softmax_family),
    ("reductions", reductions),
    ("layout_ops", layout_ops),
    ("layer_norm_op", layer_norm_op),
    ("selective_scan_op", selective_scan_op),
    (
        "composite_graph_with_shared_subexpressions",
        composite_graph_with_shared_subexpressions,
    ),
];

/// Smoothed cross-entropy of a micro model on a 2x2-patch batch, checked
/// against finite differences for every trainable tensor.
pub fn model_loss_error(chgroup_width: usize, seed: u64) -> f64 {
    let cfg = ModelConfig {
        grid_h: 2,
        grid_w: 2,
        patch_dim: 3,
        embed_dim: 4,
        n_encoder_blocks: 1,
        state_dim: 2,
        n_chvss: 1,
        n_classes: 3,
        chgroup_width,
    };
    let m = Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let x = uniform(&mut rng, &[3, 4, 3], -1.0, 1.0);
    let labels = [0, 2, 1];
    let loss_of = |m: &Model, trainable: bool| -> (Graph, Var, sfmamba_core::model::ModelVars) {
        let mut g = Graph::new();
        let v = m.bind(&mut g, trainable);
        let xv = g.constant(x.clone());
        let (f, _) = m.forward(&mut g, &v, xv, BnMode::Train).unwrap();
        let l = label_smoothed_ce(&mut g, f.logits, &labels, 0.1).unwrap();
        (g, l, v)
    };
    let (g, loss, v) = loss_of(&m, true);
    let grads = g.backward(loss).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for name in m.param_names() {
        let fd = finite_difference(
            |t| {
                let mut mm = m.clone();
                *mm.tensor_mut(name)? = t.clone();
                let (g, l, _) = loss_of(&mm, false);
                Ok(g.value(l).item())
            },
            &m.tensors[name],
            H,
        )
        .unwrap();
        analytic.extend_from_slice(grads.get(v.vars[name]).data());
        numeric.extend_from_slice(fd.data());
    }
    relative_error(&Tensor::vector(analytic), &Tensor::vector(numeric))
}
