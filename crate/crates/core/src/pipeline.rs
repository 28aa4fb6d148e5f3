//! Source training, target adaptation and evaluation loops.
//!
//! Metrics go to any `Write` sink as JSON lines: one `"kind":"step"` record
//! per optimizer step and one `"kind":"epoch"` record per epoch.

use std::collections::BTreeMap;
use std::hash::{DefaultHasher, Hasher};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::Graph;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::exec;
use crate::labeling::argmax;
use crate::labeling::{
    cluster_labels, label_target, FeatureBank, LabelingConfig, PseudoLabel, PseudoLabelTable,
};
use crate::model::{param_group, BnMode, Checkpoint, Model, ModelConfig, ParamGroup, Phase};
use crate::objectives::{
    diversity_loss, entropy_loss, kl_consistency, label_smoothed_ce, pseudo_ce, total_target_loss,
    LossBreakdown,
};
use crate::optim::{cosine_lr, AdamW, GroupLr};
use crate::scs::{batch_token_order, grad_cam, make_plan, sample_seeds};
use crate::tensor::Tensor;

/// Backbone learning rate relative to the neck during adaptation.
pub const BACKBONE_LR_RATIO: f64 = 0.1;

/// Evaluation chunk size for full-dataset passes.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub source_epochs: usize,
    pub adapt_epochs: usize,
    pub batch_size: usize,
    /// Source learning rate.
    pub lr: f64,
    /// Adaptation learning rate of the neck group.
    pub lr_adapt: f64,
    pub weight_decay: f64,
    /// Label smoothing of the source loss.
    pub alpha: f64,
    /// Background percentage for shuffling.
    pub gamma: f64,
    pub labeling: LabelingConfig,
    pub use_scs: bool,
    /// When false every sample is trusted with its clustering label.
    pub use_upa_filter: bool,
    /// Zeroes every gradient before the optimizer step and disables weight
    /// decay, so no parameter moves.
    pub smoke: bool,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            source_epochs: 50,
            adapt_epochs: 15,
            batch_size: 8,
            lr: 3e-4,
            lr_adapt: 5e-5,
            weight_decay: 5e-2,
            alpha: 0.1,
            gamma: 20.0,
            labeling: LabelingConfig::default(),
            use_scs: true,
            use_upa_filter: true,
            smoke: false,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size < 2 {
            return Err(Error::invalid(
                "run_config",
                "batch_size must be at least 2",
            ));
        }
        if !(self.lr >= 0.0 && self.lr_adapt >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::invalid(
                "run_config",
                "learning rates and decay must be non-negative",
            ));
        }
        if !(0.0..=100.0).contains(&self.gamma) {
            return Err(Error::invalid("run_config", "gamma outside [0, 100]"));
        }
        if !(0.0..=1.0).contains(&self.labeling.beta) {
            return Err(Error::invalid("run_config", "beta outside [0, 1]"));
        }
        Ok(())
    }
}

/// One optimizer step as written to the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub kind: &'static str,
    pub phase: &'static str,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub lr_backbone: f64,
    pub lr_neck: f64,
    pub lr_classifier: f64,
    /// Hash of the classifier parameters after the step.
    pub classifier_digest: String,
}

/// End-of-epoch summary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub kind: &'static str,
    pub phase: &'static str,
    pub epoch: usize,
    pub source_acc: Option<f64>,
    pub target_acc: Option<f64>,
    pub mean_total: f64,
    pub mean_lce: Option<f64>,
    pub mean_ent: Option<f64>,
    pub mean_div: Option<f64>,
    pub mean_ce: Option<f64>,
    pub mean_kl: Option<f64>,
    pub pseudo_label_acc: Option<f64>,
    pub selected_acc: Option<f64>,
    pub n_selected: Option<usize>,
}

fn write_json(sink: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *sink, value).map_err(|e| Error::InvalidData(e.to_string()))?;
    sink.write_all(b"\n")?;
    Ok(())
}

/// Bit-level hash of every classifier tensor.
pub fn classifier_digest(model: &Model) -> String {
    let mut h = DefaultHasher::new();
    for (name, t) in &model.tensors {
        if param_group(name) == ParamGroup::Classifier {
            h.write(name.as_bytes());
            for v in t.data() {
                h.write_u64(v.to_bits());
            }
        }
    }
    format!("{:016x}", h.finish())
}

fn check_compatible(model: &Model, data: &Dataset) -> Result<()> {
    let (m, s) = (&model.config, &data.spec);
    if (m.grid_h, m.grid_w, m.patch_dim, m.n_classes)
        != (s.grid_h, s.grid_w, s.patch_dim, s.n_classes)
    {
        return Err(Error::ConfigMismatch(format!(
            "model expects {}x{} grid, patch_dim {}, {} classes; dataset has {}x{}, {}, {}",
            m.grid_h,
            m.grid_w,
            m.patch_dim,
            m.n_classes,
            s.grid_h,
            s.grid_w,
            s.patch_dim,
            s.n_classes
        )));
    }
    Ok(())
}

/// Shuffled minibatches of one epoch; a trailing batch of one sample is
/// dropped because batch statistics need two.
fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    order.shuffle(&mut rng);
    order
        .chunks(batch)
        .filter(|c| c.len() >= 2)
        .map(|c| c.to_vec())
        .collect()
}

fn effective_decay(cfg: &RunConfig) -> f64 {
    if cfg.smoke {
        0.0
    } else {
        cfg.weight_decay
    }
}

fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n / batch + usize::from(n % batch >= 2)
}

fn gradient_map(
    grads: &crate::autodiff::Gradients,
    vars: &crate::model::ModelVars,
    smoke: bool,
) -> BTreeMap<String, Tensor> {
    vars.vars
        .iter()
        .map(|(name, &v)| {
            let g = grads.get(v);
            let g = if smoke { Tensor::zeros(g.shape()) } else { g };
            (name.clone(), g)
        })
        .collect()
}

/// Eval-mode logits and classifier-input features for the whole dataset.
pub fn predict(model: &Model, data: &Dataset) -> Result<(Tensor, Tensor)> {
    check_compatible(model, data)?;
    let n = data.len();
    let (c, d) = (model.config.n_classes, model.config.embed_dim);
    let mut logits = Vec::with_capacity(n * c);
    let mut feats = Vec::with_capacity(n * d);
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let out = model.infer(&data.batch(&idx)?)?;
        logits.extend_from_slice(out.logits.data());
        feats.extend_from_slice(out.features.data());
        start += EVAL_CHUNK;
    }
    Ok((
        Tensor::new(vec![n, c], logits)?,
        Tensor::new(vec![n, d], feats)?,
    ))
}

pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.shape()[1];
    let hits = logits
        .data()
        .chunks(c)
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Top-1 accuracy plus per-class accuracy in eval mode.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    let (logits, _) = predict(model, data)?;
    let c = model.config.n_classes;
    let mut hit = vec![0usize; c];
    let mut count = vec![0usize; c];
    for (row, &l) in logits.data().chunks(c).zip(&data.labels) {
        count[l] += 1;
        if argmax(row) == l {
            hit[l] += 1;
        }
    }
    Ok(Evaluation {
        accuracy: accuracy(&logits, &data.labels),
        per_class: hit
            .iter()
            .zip(&count)
            .map(|(&h, &n)| if n == 0 { 0.0 } else { h as f64 / n as f64 })
            .collect(),
    })
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Trains a fresh model on the labeled source set with the smoothed
/// cross-entropy. Returns a source-phase checkpoint.
pub fn train_source(cfg: &RunConfig, source: &Dataset, sink: &mut dyn Write) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    check_compatible(&model, source)?;
    let mut opt = AdamW::new(effective_decay(cfg));
    let per_epoch = steps_per_epoch(source.len(), cfg.batch_size);
    let total = per_epoch * cfg.source_epochs;
    let mut step = 0;
    for epoch in 0..cfg.source_epochs {
        let mut losses = Vec::new();
        for idx in epoch_batches(source.len(), cfg.batch_size, cfg.seed, epoch) {
            let lr = cosine_lr(cfg.lr, step, total);
            let labels: Vec<usize> = idx.iter().map(|&i| source.labels[i]).collect();
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let x = g.constant(source.batch(&idx)?);
            let (fv, stats) = model.forward(&mut g, &vars, x, BnMode::Train)?;
            let loss = label_smoothed_ce(&mut g, fv.logits, &labels, cfg.alpha)?;
            let value = g.value(loss).item();
            let grads = g.backward(loss)?;
            let grads = gradient_map(&grads, &vars, cfg.smoke);
            drop(g);
            opt.step(&mut model, &grads, GroupLr::uniform(lr))?;
            if let Some(s) = stats {
                model.update_running_stats(&s)?;
            }
            write_json(
                sink,
                &StepRecord {
                    kind: "step",
                    phase: "source",
                    epoch,
                    loss: LossBreakdown::source(step, value, idx.len()),
                    lr_backbone: lr,
                    lr_neck: lr,
                    lr_classifier: lr,
                    classifier_digest: classifier_digest(&model),
                },
            )?;
            losses.push(value);
            step += 1;
        }
        let (logits, _) = predict(&model, source)?;
        write_json(
            sink,
            &MetricsRecord {
                kind: "epoch",
                phase: "source",
                epoch,
                source_acc: Some(accuracy(&logits, &source.labels)),
                target_acc: None,
                mean_total: mean(&losses),
                mean_lce: Some(mean(&losses)),
                mean_ent: None,
                mean_div: None,
                mean_ce: None,
                mean_kl: None,
                pseudo_label_acc: None,
                selected_acc: None,
                n_selected: None,
            },
        )?;
    }
    Ok(Checkpoint::new(model, cfg.seed, Phase::Source))
}

/// Pseudo-labels for the current model: clustering plus neighbor filtering,
/// or clustering alone with every sample trusted.
pub fn pseudo_labels(model: &Model, target: &Dataset, cfg: &RunConfig) -> Result<PseudoLabelTable> {
    let (logits, feats) = predict(model, target)?;
    let probs = logits.softmax_last()?;
    let bank = FeatureBank::new(feats, probs)?;
    if cfg.use_upa_filter {
        label_target(&bank, &cfg.labeling)
    } else {
        let labels = cluster_labels(&bank)?;
        Ok(PseudoLabelTable {
            rows: labels
                .into_iter()
                .map(|l| PseudoLabel {
                    label: l,
                    refined: l,
                    confidence: 1.0,
                    selected: true,
                })
                .collect(),
        })
    }
}

/// Target learning rates at one step: classifier frozen, backbone at a tenth
/// of the neck, both on the cosine schedule.
pub fn adapt_lr(cfg: &RunConfig, step: usize, total: usize) -> GroupLr {
    let neck = cosine_lr(cfg.lr_adapt, step, total);
    GroupLr {
        backbone: BACKBONE_LR_RATIO * neck,
        neck,
        classifier: 0.0,
    }
}

/// Adapts a source checkpoint to the unlabeled target set.
pub fn adapt_target(
    cfg: &RunConfig,
    source_ckpt: &Checkpoint,
    target: &Dataset,
    sink: &mut dyn Write,
) -> Result<Checkpoint> {
    cfg.validate()?;
    if source_ckpt.phase != Phase::Source {
        return Err(Error::InvalidData(format!(
            "expected a source checkpoint, found phase `{}`",
            source_ckpt.phase.name()
        )));
    }
    let mut model = source_ckpt.model.clone();
    check_compatible(&model, target)?;
    let frozen = classifier_digest(&model);
    let mut opt = AdamW::new(effective_decay(cfg));
    let per_epoch = steps_per_epoch(target.len(), cfg.batch_size);
    let total = per_epoch * cfg.adapt_epochs;
    let t = model.config.tokens();
    let d = model.config.embed_dim;
    let mut step = 0;
    for epoch in 0..cfg.adapt_epochs {
        let table = pseudo_labels(&model, target, cfg)?;
        let refined = table.refined();
        let selected = table.selected();
        let mut parts: Vec<[f64; 5]> = Vec::new();
        for idx in epoch_batches(target.len(), cfg.batch_size, cfg.seed, epoch) {
            let lr = adapt_lr(cfg, step, total);
            if lr.classifier != 0.0 || (lr.backbone - BACKBONE_LR_RATIO * lr.neck).abs() > 0.0 {
                return Err(Error::InvalidData(format!(
                    "learning-rate groups violated at step {step}"
                )));
            }
            let b = idx.len();
            let labels: Vec<usize> = idx.iter().map(|&i| refined[i]).collect();
            let mask: Vec<bool> = idx.iter().map(|&i| selected[i]).collect();

            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let x = g.constant(target.batch(&idx)?);
            let tokens = model.patch_embed(&mut g, &vars, x)?;
            let (fv, stats) = model.forward_tokens(&mut g, &vars, tokens, BnMode::Train)?;
            let ent = entropy_loss(&mut g, fv.logits)?;
            let div = diversity_loss(&mut g, fv.logits)?;
            let (ce, n_sel) = pseudo_ce(&mut g, fv.logits, &labels, &mask)?;
            let kl = if cfg.use_scs && n_sel > 0 {
                let maps = grad_cam(&model, g.value(fv.feature_map), &labels)?;
                let seeds = sample_seeds(cfg.seed, step as u64, b);
                let plans = exec::map_indexed(b, |i| make_plan(&maps[i], cfg.gamma, seeds[i]))
                    .into_iter()
                    .collect::<Result<Vec<_>>>()?;
                let order = batch_token_order(&plans, t)?;
                let flat = g.reshape(tokens, &[b * t, d])?;
                let shuffled = g.gather(flat, 0, &order)?;
                let shuffled = g.reshape(shuffled, &[b, t, d])?;
                let (pv, _) = model.forward_tokens(&mut g, &vars, shuffled, BnMode::Train)?;
                kl_consistency(&mut g, fv.logits, pv.logits, &mask)?.0
            } else {
                g.constant(Tensor::scalar(0.0))
            };
            let loss = total_target_loss(&mut g, ent, div, ce, kl)?;
            let values = [ent, div, ce, kl, loss].map(|v| g.value(v).item());
            let grads = g.backward(loss)?;
            let grads = gradient_map(&grads, &vars, cfg.smoke);
            drop(g);
            opt.step(&mut model, &grads, lr)?;
            if let Some(s) = stats {
                model.update_running_stats(&s)?;
            }
            let digest = classifier_digest(&model);
            if digest != frozen {
                return Err(Error::InvalidData(format!(
                    "classifier changed at step {step}"
                )));
            }
            write_json(
                sink,
                &StepRecord {
                    kind: "step",
                    phase: "adapt",
                    epoch,
                    loss: LossBreakdown::target(
                        step,
                        [values[0], values[1], values[2], values[3]],
                        values[4],
                        b,
                        n_sel,
                    ),
                    lr_backbone: lr.backbone,
                    lr_neck: lr.neck,
                    lr_classifier: lr.classifier,
                    classifier_digest: digest,
                },
            )?;
            parts.push(values);
            step += 1;
        }
        let col = |k: usize| mean(&parts.iter().map(|p| p[k]).collect::<Vec<_>>());
        let (logits, _) = predict(&model, target)?;
        let pl_hits = refined
            .iter()
            .zip(&target.labels)
            .filter(|(a, b)| a == b)
            .count();
        write_json(
            sink,
            &MetricsRecord {
                kind: "epoch",
                phase: "adapt",
                epoch,
                source_acc: None,
                target_acc: Some(accuracy(&logits, &target.labels)),
                mean_total: col(4),
                mean_lce: None,
                mean_ent: Some(col(0)),
                mean_div: Some(col(1)),
                mean_ce: Some(col(2)),
                mean_kl: Some(col(3)),
                pseudo_label_acc: Some(pl_hits as f64 / target.len() as f64),
                selected_acc: table.selected_accuracy(&target.labels),
                n_selected: Some(table.n_selected()),
            },
        )?;
    }
    Ok(Checkpoint::new(model, cfg.seed, Phase::Adapted))
}
