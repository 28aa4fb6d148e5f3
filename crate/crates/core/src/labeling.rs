//! Pseudo-labels for the unlabeled target set: two-pass centroid clustering
//! followed by cosine neighbor voting and per-class confidence selection.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec;
use crate::tensor::Tensor;

/// Pooled features `[n, D]` and softmax predictions `[n, C]` of the target set.
#[derive(Clone, Debug)]
pub struct FeatureBank {
    features: Tensor,
    probs: Tensor,
}

impl FeatureBank {
    pub fn new(features: Tensor, probs: Tensor) -> Result<Self> {
        if features.rank() != 2 || probs.rank() != 2 || features.shape()[0] != probs.shape()[0] {
            return Err(Error::shape(
                "feature_bank",
                features.shape(),
                probs.shape(),
            ));
        }
        let c = probs.shape()[1];
        for (i, row) in probs.data().chunks(c).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidData(format!(
                    "prediction {i} is not a distribution (sum {s})"
                )));
            }
        }
        Ok(Self { features, probs })
    }

    pub fn len(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn n_classes(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }
}

fn row(t: &Tensor, i: usize) -> &[f64] {
    let w = t.shape()[1];
    &t.data()[i * w..(i + 1) * w]
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (norm(a) * norm(b))
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Prediction-weighted feature means, `[C, D]`.
pub fn soft_centroids(bank: &FeatureBank) -> Result<Tensor> {
    if bank.is_empty() {
        return Err(Error::invalid("soft_centroids", "empty feature bank"));
    }
    let (c, d) = (bank.n_classes(), bank.dim());
    let mut out = vec![0.0; c * d];
    let mut mass = vec![0.0; c];
    for i in 0..bank.len() {
        let f = row(&bank.features, i);
        for (k, &p) in row(&bank.probs, i).iter().enumerate() {
            mass[k] += p;
            for (o, x) in out[k * d..(k + 1) * d].iter_mut().zip(f) {
                *o += p * x;
            }
        }
    }
    for k in 0..c {
        if mass[k] <= 0.0 {
            return Err(Error::invalid(
                "soft_centroids",
                format!("class {k} has zero mass"),
            ));
        }
        out[k * d..(k + 1) * d]
            .iter_mut()
            .for_each(|v| *v /= mass[k]);
    }
    Tensor::new(vec![c, d], out)
}

/// Nearest centroid by cosine similarity for every feature row.
pub fn assign_by_cosine(features: &Tensor, centroids: &Tensor) -> Result<Vec<usize>> {
    if features.rank() != 2 || centroids.rank() != 2 || features.shape()[1] != centroids.shape()[1]
    {
        return Err(Error::shape(
            "assign_by_cosine",
            features.shape(),
            centroids.shape(),
        ));
    }
    let c = centroids.shape()[0];
    if (0..c).any(|k| norm(row(centroids, k)) == 0.0) {
        return Err(Error::invalid("assign_by_cosine", "zero-norm centroid"));
    }
    let n = features.shape()[0];
    if let Some(i) = (0..n).find(|&i| norm(row(features, i)) == 0.0) {
        return Err(Error::invalid(
            "assign_by_cosine",
            format!("zero-norm feature at {i}"),
        ));
    }
    Ok(exec::map_indexed(n, |i| {
        let f = row(features, i);
        let sims: Vec<f64> = (0..c).map(|k| cosine(f, row(centroids, k))).collect();
        argmax(&sims)
    }))
}

/// Second pass: hard-assignment means, then cosine re-assignment. Classes
/// without members keep their row of `fallback`.
pub fn hard_centroids_and_labels(
    features: &Tensor,
    labels: &[usize],
    fallback: &Tensor,
) -> Result<(Tensor, Vec<usize>)> {
    let (c, d) = (fallback.shape()[0], fallback.shape()[1]);
    if labels.len() != features.shape()[0] {
        return Err(Error::shape(
            "hard_centroids",
            &[labels.len()],
            features.shape(),
        ));
    }
    let mut sums = vec![0.0; c * d];
    let mut counts = vec![0usize; c];
    for (i, &l) in labels.iter().enumerate() {
        if l >= c {
            return Err(Error::invalid(
                "hard_centroids",
                format!("label {l} out of range"),
            ));
        }
        counts[l] += 1;
        for (o, x) in sums[l * d..(l + 1) * d].iter_mut().zip(row(features, i)) {
            *o += x;
        }
    }
    for k in 0..c {
        let dst = &mut sums[k * d..(k + 1) * d];
        if counts[k] == 0 {
            dst.copy_from_slice(row(fallback, k));
        } else {
            dst.iter_mut().for_each(|v| *v /= counts[k] as f64);
        }
    }
    let centroids = Tensor::new(vec![c, d], sums)?;
    let relabeled = assign_by_cosine(features, &centroids)?;
    Ok((centroids, relabeled))
}

/// Both clustering passes: soft centroids, cosine labels, hard centroids,
/// cosine labels again.
pub fn cluster_labels(bank: &FeatureBank) -> Result<Vec<usize>> {
    let mu1 = soft_centroids(bank)?;
    let y1 = assign_by_cosine(bank.features(), &mu1)?;
    Ok(hard_centroids_and_labels(bank.features(), &y1, &mu1)?.1)
}

/// `k` most cosine-similar other samples of every sample, with similarities.
/// Ties go to the lower index.
pub fn cosine_neighbors(features: &Tensor, k: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    let n = features.shape()[0];
    if k >= n {
        return Err(Error::invalid(
            "cosine_neighbors",
            format!("K = {k} must be below the sample count {n}"),
        ));
    }
    Ok(exec::map_indexed(n, |i| {
        let fi = row(features, i);
        let mut sims: Vec<(usize, f64)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (j, cosine(fi, row(features, j))))
            .collect();
        sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        sims.truncate(k);
        sims
    }))
}

/// Neighbor voting refined over `iters` rounds. Returns the refined labels,
/// the last round's posteriors `[n, C]` and the neighbor lists.
pub fn upa_posterior(
    bank: &FeatureBank,
    labels: &[usize],
    k: usize,
    iters: usize,
) -> Result<(Vec<usize>, Tensor, Vec<Vec<(usize, f64)>>)> {
    if iters == 0 {
        return Err(Error::invalid("upa_posterior", "iters must be at least 1"));
    }
    let c = bank.n_classes();
    let neighbors = cosine_neighbors(bank.features(), k)?;
    let mut current = labels.to_vec();
    let mut post = vec![0.0; bank.len() * c];
    for _ in 0..iters {
        for (t, nb) in neighbors.iter().enumerate() {
            let p = &mut post[t * c..(t + 1) * c];
            p.iter_mut().for_each(|v| *v = 0.0);
            for &(j, s) in nb {
                p[current[j]] += s / nb.len() as f64;
            }
        }
        current = post.chunks(c).map(argmax).collect();
    }
    Ok((current, Tensor::new(vec![bank.len(), c], post)?, neighbors))
}

/// Per-sample labeling outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabel {
    pub label: usize,
    pub refined: usize,
    pub confidence: f64,
    pub selected: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelTable {
    pub rows: Vec<PseudoLabel>,
}

/// Largest number selectable from a class of `size` under ratio `beta`.
pub fn class_quota(size: usize, beta: f64) -> usize {
    // guard against products like 0.6 * 5 landing just above an integer
    ((beta * size as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Consensus confidence and per-class top-`beta` selection.
pub fn upa_confidence_and_select(
    labels: &[usize],
    refined: &[usize],
    neighbors: &[Vec<(usize, f64)>],
    n_classes: usize,
    beta: f64,
) -> Result<PseudoLabelTable> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(
            "upa_select",
            format!("beta {beta} outside [0, 1]"),
        ));
    }
    let n = refined.len();
    let confidence: Vec<f64> = (0..n)
        .map(|t| {
            let cons: Vec<f64> = neighbors[t]
                .iter()
                .filter(|(j, _)| refined[*j] == refined[t])
                .map(|&(_, s)| s)
                .collect();
            if cons.is_empty() {
                -1.0
            } else {
                cons.iter().sum::<f64>() / cons.len() as f64
            }
        })
        .collect();
    let mut selected = vec![false; n];
    for class in 0..n_classes {
        let mut members: Vec<usize> = (0..n).filter(|&t| refined[t] == class).collect();
        members.sort_by(|&a, &b| confidence[b].total_cmp(&confidence[a]).then(a.cmp(&b)));
        for &t in members.iter().take(class_quota(members.len(), beta)) {
            selected[t] = true;
        }
    }
    Ok(PseudoLabelTable {
        rows: (0..n)
            .map(|t| PseudoLabel {
                label: labels[t],
                refined: refined[t],
                confidence: confidence[t],
                selected: selected[t],
            })
            .collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelingConfig {
    pub k: usize,
    pub iters: usize,
    pub beta: f64,
}

impl Default for LabelingConfig {
    fn default() -> Self {
        Self {
            k: 4,
            iters: 2,
            beta: 0.6,
        }
    }
}

/// Clustering, voting and selection in one call.
pub fn label_target(bank: &FeatureBank, cfg: &LabelingConfig) -> Result<PseudoLabelTable> {
    let labels = cluster_labels(bank)?;
    let (refined, _, neighbors) = upa_posterior(bank, &labels, cfg.k, cfg.iters)?;
    upa_confidence_and_select(&labels, &refined, &neighbors, bank.n_classes(), cfg.beta)
}

impl PseudoLabelTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn refined(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.refined).collect()
    }

    pub fn selected(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.selected).collect()
    }

    pub fn n_selected(&self) -> usize {
        self.rows.iter().filter(|r| r.selected).count()
    }

    /// Fraction of selected samples whose refined label matches `truth`.
    pub fn selected_accuracy(&self, truth: &[usize]) -> Option<f64> {
        let hits: Vec<bool> = self
            .rows
            .iter()
            .zip(truth)
            .filter(|(r, _)| r.selected)
            .map(|(r, &t)| r.refined == t)
            .collect();
        if hits.is_empty() {
            None
        } else {
            Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,label,refined,confidence,selected\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{i},{},{},{},{}",
                r.label, r.refined, r.confidence, r.selected
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}
