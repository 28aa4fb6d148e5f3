//! Background token shuffling guided by class activation maps.
//!
//! Low-activation patches of the pre-pool feature map are treated as
//! background; their embeddings are permuted among themselves to build the
//! perturbed token sequence.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::{BnMode, Model};
use crate::tensor::{save_tnsr, Dtype, Tensor};

/// Per-patch attribution scores on the `h x w` grid, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub h: usize,
    pub w: usize,
    pub scores: Vec<f64>,
    pub target_class: usize,
}

/// Grad-CAM scores from a `[T, D]` feature map and the gradient of the target
/// logit with respect to it.
pub fn cam_from_gradient(
    feature_map: &[f64],
    grad: &[f64],
    h: usize,
    w: usize,
    target_class: usize,
) -> ActivationMap {
    let t = h * w;
    let d = feature_map.len() / t;
    let mut weights = vec![0.0; d];
    for row in grad.chunks(d) {
        for (wd, g) in weights.iter_mut().zip(row) {
            *wd += g / t as f64;
        }
    }
    let scores = feature_map
        .chunks(d)
        .map(|a| {
            a.iter()
                .zip(&weights)
                .map(|(x, w)| x * w)
                .sum::<f64>()
                .max(0.0)
        })
        .collect();
    ActivationMap {
        h,
        w,
        scores,
        target_class,
    }
}

/// Activation maps for a batch of `[B, T, D]` pre-pool feature maps, one
/// target class per sample. Uses the eval-mode head on a throwaway graph.
pub fn grad_cam(
    model: &Model,
    feature_maps: &Tensor,
    targets: &[usize],
) -> Result<Vec<ActivationMap>> {
    let cfg = model.config;
    let (t, d) = (cfg.tokens(), cfg.embed_dim);
    let b = targets.len();
    if feature_maps.shape() != [b, t, d] {
        return Err(Error::shape("grad_cam", feature_maps.shape(), &[b, t, d]));
    }
    if let Some(&bad) = targets.iter().find(|&&c| c >= cfg.n_classes) {
        return Err(Error::invalid(
            "grad_cam",
            format!("target class {bad} out of range"),
        ));
    }
    let mut g = Graph::new();
    let v = model.bind(&mut g, false);
    let a = g.param(feature_maps.clone());
    let (_, logits, _) = model.head(&mut g, &v, a, BnMode::Eval)?;
    // eval-mode rows are independent, so one backward gives every sample's gradient
    let mut pick = Tensor::zeros(&[b, cfg.n_classes]);
    for (i, &c) in targets.iter().enumerate() {
        pick.data_mut()[i * cfg.n_classes + c] = 1.0;
    }
    let pick = g.constant(pick);
    let chosen = g.mul(logits, pick)?;
    let total = g.sum(chosen);
    let grads = g.backward(total)?;
    let grad = grads.get(a);
    Ok((0..b)
        .map(|i| {
            let span = i * t * d..(i + 1) * t * d;
            cam_from_gradient(
                &feature_maps.data()[span.clone()],
                &grad.data()[span],
                cfg.grid_h,
                cfg.grid_w,
                targets[i],
            )
        })
        .collect())
}

/// Number of background patches for a grid of `tokens` cells.
pub fn background_count(tokens: usize, gamma: f64) -> usize {
    ((gamma / 100.0 * tokens as f64) + 1e-9).floor() as usize
}

/// The `gamma` percent lowest-scoring patch indices, ascending.
pub fn select_background(map: &ActivationMap, gamma: f64) -> Result<Vec<usize>> {
    if !(0.0..=100.0).contains(&gamma) {
        return Err(Error::invalid(
            "select_background",
            format!("gamma {gamma} outside [0, 100]"),
        ));
    }
    let mut order: Vec<usize> = (0..map.scores.len()).collect();
    order.sort_by(|&a, &b| map.scores[a].total_cmp(&map.scores[b]).then(a.cmp(&b)));
    order.truncate(background_count(map.scores.len(), gamma));
    order.sort_unstable();
    Ok(order)
}

/// Background positions and the permutation applied to them: position
/// `background[k]` receives the token from `background[perm[k]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShufflePlan {
    pub background: Vec<usize>,
    pub perm: Vec<usize>,
    pub seed: u64,
}

impl ShufflePlan {
    pub fn identity(background: Vec<usize>) -> Self {
        let perm = (0..background.len()).collect();
        Self {
            background,
            perm,
            seed: 0,
        }
    }

    /// Source token for every position of a length-`len` sequence.
    pub fn token_order(&self, len: usize) -> Result<Vec<usize>> {
        if let Some(&bad) = self.background.iter().find(|&&i| i >= len) {
            return Err(Error::invalid(
                "shuffle_background",
                format!("background index {bad} outside sequence of {len}"),
            ));
        }
        let mut order: Vec<usize> = (0..len).collect();
        for (k, &dst) in self.background.iter().enumerate() {
            order[dst] = self.background[self.perm[k]];
        }
        Ok(order)
    }
}

/// Selects the background of `map` and draws a uniform permutation of it.
pub fn make_plan(map: &ActivationMap, gamma: f64, seed: u64) -> Result<ShufflePlan> {
    let background = select_background(map, gamma)?;
    let mut perm: Vec<usize> = (0..background.len()).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(ShufflePlan {
        background,
        perm,
        seed,
    })
}

/// Applies `plan` to a `[T, D]` token sequence, returning a new tensor.
pub fn shuffle_background(tokens: &Tensor, plan: &ShufflePlan) -> Result<Tensor> {
    if tokens.rank() != 2 {
        return Err(Error::invalid(
            "shuffle_background",
            "expected [T, D] tokens",
        ));
    }
    tokens.gather_axis(0, &plan.token_order(tokens.shape()[0])?)
}

/// Row indices into a flattened `[B * T, D]` batch that apply one plan per sample.
pub fn batch_token_order(plans: &[ShufflePlan], len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(plans.len() * len);
    for (b, p) in plans.iter().enumerate() {
        out.extend(p.token_order(len)?.into_iter().map(|i| b * len + i));
    }
    Ok(out)
}

/// `n` per-sample seeds for one step, drawn from a stream keyed by
/// `(seed, step)` so they do not depend on execution order.
pub fn sample_seeds(seed: u64, step: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    (0..n).map(|_| rng.next_u64()).collect()
}

impl ActivationMap {
    /// Scores as an `h x w` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.h, self.w], self.scores.clone()).expect("grid-sized scores")
    }

    /// Plain-text PGM with scores scaled so the maximum maps to 255.
    pub fn to_pgm(&self) -> String {
        let max = self.scores.iter().cloned().fold(0.0, f64::max);
        let mut s = format!("P2\n{} {}\n255\n", self.w, self.h);
        for row in self.scores.chunks(self.w) {
            let line: Vec<String> = row
                .iter()
                .map(|&v| {
                    let q = if max > 0.0 {
                        (v / max * 255.0).round()
                    } else {
                        0.0
                    };
                    (q as u8).to_string()
                })
                .collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    /// Writes `<stem>.tnsr` and `<stem>.pgm`.
    pub fn dump(&self, stem: &Path) -> Result<()> {
        save_tnsr(&stem.with_extension("tnsr"), &self.to_tensor(), Dtype::F64)?;
        std::fs::write(stem.with_extension("pgm"), self.to_pgm())?;
        Ok(())
    }
}
