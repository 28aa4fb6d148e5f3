use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfmamba_core::autodiff::relative_error;
use sfmamba_core::objectives::*;
use sfmamba_core::{finite_difference, Graph, Result, Tensor, Var};

fn value(logits: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let y = f(&mut g, x).unwrap();
    g.value(y).item()
}

fn random_logits(rng: &mut ChaCha8Rng, b: usize, c: usize, scale: f64) -> Tensor {
    Tensor::from_fn(&[b, c], |_| rng.random_range(-scale..scale))
}

fn softmax_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let c = t.shape()[1];
    t.data()
        .chunks(c)
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        })
        .collect()
}

#[test]
fn pinned_scalar_values() {
    let l = Tensor::new(vec![1, 2], vec![2.0, 0.0]).unwrap();
    let lce = value(&l, |g, x| label_smoothed_ce(g, x, &[0], 0.1));
    assert!((lce - 0.2269280110429726).abs() < 1e-14);

    let l = Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    assert!((value(&l, entropy_loss) - 1.2683014942100075).abs() < 1e-14);

    let mut g = Graph::new();
    let p = g.constant(
        Tensor::new(
            vec![2, 2],
            vec![0.7f64.ln(), 0.3f64.ln(), 0.7f64.ln(), 0.3f64.ln()],
        )
        .unwrap(),
    );
    let q = g.constant(Tensor::zeros(&[2, 2]));
    let (kl, n) = kl_consistency(&mut g, p, q, &[true, true]).unwrap();
    assert_eq!(n, 2);
    assert!((g.value(kl).item() - 0.08228287850505178).abs() < 1e-14);
}

#[test]
fn uniform_logits_identities() {
    let z = Tensor::zeros(&[5, 4]);
    let log4 = 4f64.ln();
    for alpha in [0.0, 0.1, 0.5] {
        assert!(
            (value(&z, |g, x| label_smoothed_ce(g, x, &[0, 1, 2, 3, 0], alpha)) - log4).abs()
                < 1e-12
        );
    }
    assert!((value(&z, entropy_loss) - log4).abs() < 1e-12);
    assert!((value(&z, diversity_loss) + log4).abs() < 1e-12);
}

#[test]
fn diversity_equals_kl_to_uniform_minus_log_c() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let b = rng.random_range(1..10);
        let c = rng.random_range(2..7);
        let l = random_logits(&mut rng, b, c, 6.0);
        let rows = softmax_rows(&l);
        let mean: Vec<f64> = (0..c)
            .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / b as f64)
            .collect();
        let kl: f64 = mean.iter().map(|p| p * (p * c as f64).ln()).sum();
        let want = kl - (c as f64).ln();
        assert!((value(&l, diversity_loss) - want).abs() < 1e-12);
    }
}

#[test]
fn loss_bounds_on_100_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let b = rng.random_range(1..10);
        let c = rng.random_range(2..7);
        let lc = (c as f64).ln();
        let l = random_logits(&mut rng, b, c, 20.0);
        let ent = value(&l, entropy_loss);
        assert!((-1e-15..=lc + 1e-12).contains(&ent), "entropy {ent}");
        let div = value(&l, diversity_loss);
        assert!((-lc - 1e-12..=1e-15).contains(&div), "diversity {div}");
        let other = random_logits(&mut rng, b, c, 20.0);
        let mask = vec![true; b];
        let mut g = Graph::new();
        let (a, p) = (g.constant(l.clone()), g.constant(other));
        let (kl, _) = kl_consistency(&mut g, a, p, &mask).unwrap();
        assert!(g.value(kl).item() >= -1e-15);
        let (same, _) = kl_consistency(&mut g, a, a, &mask).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
    }
}

#[test]
fn confident_predictions_have_small_losses() {
    let l = Tensor::new(vec![2, 3], vec![50.0, 0.0, 0.0, 0.0, 0.0, 50.0]).unwrap();
    assert!(value(&l, entropy_loss) < 1e-18);
    let ce = value(&l, |g, x| Ok(pseudo_ce(g, x, &[0, 2], &[true, true])?.0));
    assert!(ce < 1e-20);
}

#[test]
fn pseudo_ce_is_a_masked_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let l = random_logits(&mut rng, 5, 3, 2.0);
    let labels = [2, 0, 1, 1, 0];
    let mask = [true, false, true, false, true];
    let rows = softmax_rows(&l);
    let want = -[0, 2, 4]
        .iter()
        .map(|&i| rows[i][labels[i]].ln())
        .sum::<f64>()
        / 3.0;
    let mut g = Graph::new();
    let x = g.constant(l);
    let (ce, n) = pseudo_ce(&mut g, x, &labels, &mask).unwrap();
    assert_eq!(n, 3);
    assert!((g.value(ce).item() - want).abs() < 1e-14);
}

fn fd_check(l: &Tensor, f: impl Fn(&mut Graph, Var) -> Result<Var>) {
    let mut g = Graph::new();
    let x = g.param(l.clone());
    let y = f(&mut g, x).unwrap();
    let analytic = g.backward(y).unwrap().get(x);
    let numeric = finite_difference(
        |p| {
            let mut g = Graph::new();
            let x = g.param(p.clone());
            let y = f(&mut g, x)?;
            Ok(g.value(y).item())
        },
        l,
        1e-5,
    )
    .unwrap();
    let err = relative_error(&analytic, &numeric);
    assert!(err < 1e-5, "relative error {err:e}");
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let l = random_logits(&mut rng, 4, 3, 2.0);
        let other = random_logits(&mut rng, 4, 3, 2.0);
        let labels = [0, 2, 1, 2];
        let mask = [true, false, true, true];
        fd_check(&l, |g, x| label_smoothed_ce(g, x, &labels, 0.1));
        fd_check(&l, entropy_loss);
        fd_check(&l, diversity_loss);
        fd_check(&l, |g, x| Ok(pseudo_ce(g, x, &labels, &mask)?.0));
        // both branches of the consistency term
        fd_check(&l, |g, x| {
            let o = g.constant(other.clone());
            Ok(kl_consistency(g, x, o, &mask)?.0)
        });
        fd_check(&l, |g, x| {
            let o = g.constant(other.clone());
            Ok(kl_consistency(g, o, x, &mask)?.0)
        });
    }
}

fn target_loss(
    g: &mut Graph,
    x: Var,
    labels: &[usize],
    mask: &[bool],
    pert: &Tensor,
) -> Result<Var> {
    let ent = entropy_loss(g, x)?;
    let div = diversity_loss(g, x)?;
    let (ce, _) = pseudo_ce(g, x, labels, mask)?;
    let p = g.constant(pert.clone());
    let (kl, _) = kl_consistency(g, x, p, mask)?;
    total_target_loss(g, ent, div, ce, kl)
}

#[test]
fn total_gradient_is_sum_of_part_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let l = random_logits(&mut rng, 4, 3, 2.0);
    let pert = random_logits(&mut rng, 4, 3, 2.0);
    let labels = [1, 0, 2, 2];
    let mask = [true, true, false, true];
    let grad = |f: &dyn Fn(&mut Graph, Var) -> Result<Var>| {
        let mut g = Graph::new();
        let x = g.param(l.clone());
        let y = f(&mut g, x).unwrap();
        g.backward(y).unwrap().get(x)
    };
    let total = grad(&|g, x| target_loss(g, x, &labels, &mask, &pert));
    let parts = [
        grad(&|g, x| entropy_loss(g, x)),
        grad(&|g, x| diversity_loss(g, x)),
        grad(&|g, x| Ok(pseudo_ce(g, x, &labels, &mask)?.0)),
        grad(&|g, x| {
            let p = g.constant(pert.clone());
            Ok(kl_consistency(g, x, p, &mask)?.0)
        }),
    ];
    let mut sum = Tensor::zeros(&[4, 3]);
    for p in &parts {
        sum.add_assign(p).unwrap();
    }
    assert!(total.max_abs_diff(&sum) < 1e-14);
    fd_check(&l, |g, x| target_loss(g, x, &labels, &mask, &pert));
}

#[test]
fn zero_parts_sum_to_zero() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let t = total_target_loss(&mut g, z, z, z, z).unwrap();
    assert_eq!(g.value(t).item(), 0.0);
}

#[test]
fn breakdown_total_matches_parts() {
    let b = LossBreakdown::target(0, [0.1, 0.2, -1.0, 0.3], 0.1 + 0.2 - 1.0 + 0.3, 8, 3);
    let parts = b.ent.unwrap() + b.div.unwrap() + b.ce.unwrap() + b.kl.unwrap();
    assert!((b.total - parts).abs() < 1e-12);
    assert!(b.lce.is_none());
    let s = LossBreakdown::source(1, 0.5, 8);
    assert_eq!((s.lce, s.ent, s.total), (Some(0.5), None, 0.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn target_loss_ignores_batch_order(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.random_range(2..7);
        let l = random_logits(&mut rng, b, 3, 3.0);
        let pert = random_logits(&mut rng, b, 3, 3.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let mask: Vec<bool> = (0..b).map(|_| rng.random_bool(0.6)).collect();
        let mut order: Vec<usize> = (0..b).collect();
        order.reverse();
        order.rotate_left(rng.random_range(0..b));
        let permute = |t: &Tensor| t.gather_axis(0, &order).unwrap();
        let pl: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        let pm: Vec<bool> = order.iter().map(|&i| mask[i]).collect();
        let a = value(&l, |g, x| target_loss(g, x, &labels, &mask, &pert));
        let c = value(&permute(&l), |g, x| target_loss(g, x, &pl, &pm, &permute(&pert)));
        prop_assert!((a - c).abs() < 1e-12);
    }
}
