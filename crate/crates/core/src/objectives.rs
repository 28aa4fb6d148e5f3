//! Loss terms on the autodiff tape. Every `logits` argument is `[B, C]`.

use std::io::Write;

use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn batch_and_classes(g: &Graph, logits: Var, op: &'static str) -> Result<(usize, usize)> {
    match g.shape(logits) {
        &[b, c] => Ok((b, c)),
        s => Err(Error::invalid(
            op,
            format!("expected [B, C] logits, got {s:?}"),
        )),
    }
}

fn one_hot(labels: &[usize], c: usize, op: &'static str) -> Result<Tensor> {
    let mut t = Tensor::zeros(&[labels.len(), c]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::invalid(
                op,
                format!("label {l} out of range for {c} classes"),
            ));
        }
        t.data_mut()[i * c + l] = 1.0;
    }
    Ok(t)
}

/// Cross-entropy against `(1 - alpha) * onehot + alpha / C` targets.
pub fn label_smoothed_ce(g: &mut Graph, logits: Var, labels: &[usize], alpha: f64) -> Result<Var> {
    let (b, c) = batch_and_classes(g, logits, "label_smoothed_ce")?;
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::invalid(
            "label_smoothed_ce",
            format!("alpha {alpha} outside [0, 1)"),
        ));
    }
    if labels.len() != b {
        return Err(Error::shape("label_smoothed_ce", &[b], &[labels.len()]));
    }
    let target =
        one_hot(labels, c, "label_smoothed_ce")?.map(|v| (1.0 - alpha) * v + alpha / c as f64);
    let target = g.constant(target);
    let lp = g.log_softmax(logits)?;
    let prod = g.mul(target, lp)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / b as f64))
}

/// Mean prediction entropy.
pub fn entropy_loss(g: &mut Graph, logits: Var) -> Result<Var> {
    let (b, _) = batch_and_classes(g, logits, "entropy_loss")?;
    let p = g.softmax(logits)?;
    let lp = g.log_softmax(logits)?;
    let prod = g.mul(p, lp)?;
    let s = g.sum(prod);
    Ok(g.scale(s, -1.0 / b as f64))
}

/// `sum_c p̂_c log p̂_c` of the batch-mean prediction `p̂`, with `log p̂`
/// taken as a log-sum-exp of the per-sample log-probabilities.
pub fn diversity_loss(g: &mut Graph, logits: Var) -> Result<Var> {
    let (b, _) = batch_and_classes(g, logits, "diversity_loss")?;
    let lp = g.log_softmax(logits)?;
    // per class: logsumexp_b lp[b, c] = lp[0, c] - log_softmax_b(lp[:, c])[0]
    let cols = g.transpose(lp)?;
    let norm = g.log_softmax(cols)?;
    let first = g.slice(cols, 1, 0, 1)?;
    let first_norm = g.slice(norm, 1, 0, 1)?;
    let lse = g.sub(first, first_norm)?;
    let log_mean = g.add_scalar(lse, -(b as f64).ln());
    let mean = g.exp(log_mean);
    let prod = g.mul(mean, log_mean)?;
    Ok(g.sum(prod))
}

/// Indices of the set entries of `mask`.
pub fn selected_indices(mask: &[bool]) -> Vec<usize> {
    mask.iter()
        .enumerate()
        .filter_map(|(i, &m)| m.then_some(i))
        .collect()
}

/// Masked cross-entropy against hard pseudo-labels. Returns the loss and the
/// number of contributing samples; an empty mask yields a constant zero.
pub fn pseudo_ce(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    mask: &[bool],
) -> Result<(Var, usize)> {
    let (b, c) = batch_and_classes(g, logits, "pseudo_ce")?;
    if labels.len() != b || mask.len() != b {
        return Err(Error::shape("pseudo_ce", &[b], &[labels.len(), mask.len()]));
    }
    let idx = selected_indices(mask);
    if idx.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0)), 0));
    }
    let picked: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
    let target = g.constant(one_hot(&picked, c, "pseudo_ce")?);
    let rows = g.gather(logits, 0, &idx)?;
    let lp = g.log_softmax(rows)?;
    let prod = g.mul(target, lp)?;
    let s = g.sum(prod);
    Ok((g.scale(s, -1.0 / idx.len() as f64), idx.len()))
}

/// Mean `KL(softmax(orig) || softmax(pert))` over the masked rows; gradients
/// reach both branches.
pub fn kl_consistency(g: &mut Graph, orig: Var, pert: Var, mask: &[bool]) -> Result<(Var, usize)> {
    let (b, _) = batch_and_classes(g, orig, "kl_consistency")?;
    if g.shape(orig) != g.shape(pert) {
        let (a, p) = (g.shape(orig).to_vec(), g.shape(pert).to_vec());
        return Err(Error::shape("kl_consistency", &a, &p));
    }
    if mask.len() != b {
        return Err(Error::shape("kl_consistency", &[b], &[mask.len()]));
    }
    let idx = selected_indices(mask);
    if idx.is_empty() {
        return Ok((g.constant(Tensor::scalar(0.0)), 0));
    }
    let o = g.gather(orig, 0, &idx)?;
    let q = g.gather(pert, 0, &idx)?;
    let p = g.softmax(o)?;
    let lp = g.log_softmax(o)?;
    let lq = g.log_softmax(q)?;
    let diff = g.sub(lp, lq)?;
    let prod = g.mul(p, diff)?;
    let s = g.sum(prod);
    Ok((g.scale(s, 1.0 / idx.len() as f64), idx.len()))
}

/// Plain sum of the four target terms.
pub fn total_target_loss(g: &mut Graph, ent: Var, div: Var, ce: Var, kl: Var) -> Result<Var> {
    let a = g.add(ent, div)?;
    let b = g.add(a, ce)?;
    g.add(b, kl)
}

/// Loss values of one optimizer step. Source steps fill `lce`; target steps
/// fill the four adaptation terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub step: usize,
    pub lce: Option<f64>,
    pub ent: Option<f64>,
    pub div: Option<f64>,
    pub ce: Option<f64>,
    pub kl: Option<f64>,
    pub total: f64,
    #[serde(skip)]
    pub batch_size: usize,
    pub n_selected: usize,
}

impl LossBreakdown {
    pub fn source(step: usize, lce: f64, batch_size: usize) -> Self {
        Self {
            step,
            lce: Some(lce),
            total: lce,
            batch_size,
            ..Self::default()
        }
    }

    pub fn target(
        step: usize,
        parts: [f64; 4],
        total: f64,
        batch_size: usize,
        n_selected: usize,
    ) -> Self {
        let [ent, div, ce, kl] = parts;
        Self {
            step,
            lce: None,
            ent: Some(ent),
            div: Some(div),
            ce: Some(ce),
            kl: Some(kl),
            total,
            batch_size,
            n_selected,
        }
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> Result<()> {
        serde_json::to_writer(&mut *w, self).map_err(|e| Error::InvalidData(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    }
}
