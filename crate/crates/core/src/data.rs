//! Synthetic patch-grid domains with a class-correlated background.
//!
//! Each sample is an `H x W` grid of `patch_dim` vectors. A connected blob of
//! patches carries the class prototype; the rest carries one of the
//! background prototypes, which agrees with the class with probability
//! `spurious_strength`. A per-dimension affine map is applied last.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::exec;
use crate::kv;
use crate::tensor::{load_tnsr, save_tnsr, Dtype, Tensor};

/// Minimum pairwise cosine distance between any two prototypes.
pub const MIN_PROTO_DISTANCE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    pub n_classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_dim: usize,
    /// `[C, patch_dim]`
    pub class_prototypes: Tensor,
    /// `[C, patch_dim]`
    pub background_prototypes: Tensor,
    pub spurious_strength: f64,
    pub noise_std: f64,
    pub shift_scale: Vec<f64>,
    pub shift_offset: Vec<f64>,
    pub blob_min: usize,
    pub blob_max: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DomainSpec,
    /// `[n, H, W, patch_dim]`
    pub patches: Tensor,
    pub labels: Vec<usize>,
    /// `[n, H, W]`, 1 on foreground patches.
    pub masks: Tensor,
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// `count` standard-normal vectors, redrawn until every pair is at least
/// [`MIN_PROTO_DISTANCE`] apart in cosine distance (which also rules out
/// collinear pairs of either sign).
pub fn sample_prototypes(count: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let ok = out.iter().all(|p| {
            let d = cosine_distance(p, &v);
            (MIN_PROTO_DISTANCE..=2.0 - MIN_PROTO_DISTANCE).contains(&d)
        });
        if ok {
            out.push(v);
        }
    }
    out
}

impl DomainSpec {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let (c, p) = (self.n_classes, self.patch_dim);
        if c < 2 || self.grid_h == 0 || self.grid_w == 0 || p == 0 {
            return Err(Error::invalid(
                "domain_spec",
                "need at least 2 classes and a non-empty grid",
            ));
        }
        if self.class_prototypes.shape() != [c, p] || self.background_prototypes.shape() != [c, p] {
            return Err(Error::ConfigMismatch(format!(
                "prototypes must be [{c}, {p}], found {:?} and {:?}",
                self.class_prototypes.shape(),
                self.background_prototypes.shape()
            )));
        }
        if self.shift_scale.len() != p || self.shift_offset.len() != p {
            return Err(Error::ConfigMismatch(
                "shift length differs from patch_dim".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.spurious_strength) {
            return Err(Error::invalid(
                "domain_spec",
                "spurious_strength outside [0, 1]",
            ));
        }
        if self.noise_std < 0.0 {
            return Err(Error::invalid("domain_spec", "negative noise_std"));
        }
        if self.blob_min == 0 || self.blob_min > self.blob_max || self.blob_max >= self.tokens() {
            return Err(Error::invalid(
                "domain_spec",
                format!(
                    "blob size {}..={} infeasible on a {}x{} grid",
                    self.blob_min, self.blob_max, self.grid_h, self.grid_w
                ),
            ));
        }
        Ok(())
    }

    pub fn to_manifest(&self, n_samples: usize) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n_samples = {n_samples}");
        let _ = writeln!(s, "n_classes = {}", self.n_classes);
        let _ = writeln!(s, "grid_h = {}", self.grid_h);
        let _ = writeln!(s, "grid_w = {}", self.grid_w);
        let _ = writeln!(s, "patch_dim = {}", self.patch_dim);
        let _ = writeln!(s, "spurious_strength = {}", self.spurious_strength);
        let _ = writeln!(s, "noise_std = {}", self.noise_std);
        let _ = writeln!(s, "blob_min = {}", self.blob_min);
        let _ = writeln!(s, "blob_max = {}", self.blob_max);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(
            s,
            "class_prototypes = {}",
            kv::join(self.class_prototypes.data())
        );
        let _ = writeln!(
            s,
            "background_prototypes = {}",
            kv::join(self.background_prototypes.data())
        );
        let _ = writeln!(s, "shift_scale = {}", kv::join(&self.shift_scale));
        let _ = writeln!(s, "shift_offset = {}", kv::join(&self.shift_offset));
        s
    }

    /// Parses a manifest, returning the domain and its declared sample count.
    pub fn from_manifest(text: &str) -> Result<(Self, usize)> {
        let m = kv::parse(text)?;
        let n_classes: usize = kv::get(&m, "n_classes")?;
        let patch_dim: usize = kv::get(&m, "patch_dim")?;
        let protos = |key: &str| -> Result<Tensor> {
            let v = kv::get_list(&m, key)?;
            if v.len() != n_classes * patch_dim {
                return Err(Error::ConfigMismatch(format!(
                    "{key} holds {} values, expected {} classes x {patch_dim}",
                    v.len(),
                    n_classes
                )));
            }
            Tensor::new(vec![n_classes, patch_dim], v)
        };
        let spec = Self {
            n_classes,
            grid_h: kv::get(&m, "grid_h")?,
            grid_w: kv::get(&m, "grid_w")?,
            patch_dim,
            class_prototypes: protos("class_prototypes")?,
            background_prototypes: protos("background_prototypes")?,
            spurious_strength: kv::get(&m, "spurious_strength")?,
            noise_std: kv::get(&m, "noise_std")?,
            shift_scale: kv::get_list(&m, "shift_scale")?,
            shift_offset: kv::get_list(&m, "shift_offset")?,
            blob_min: kv::get(&m, "blob_min")?,
            blob_max: kv::get(&m, "blob_max")?,
            seed: kv::get(&m, "seed")?,
        };
        spec.validate()?;
        Ok((spec, kv::get(&m, "n_samples")?))
    }
}

/// Grows a random 4-connected blob of `size` cells on an `h x w` grid.
pub fn grow_blob(h: usize, w: usize, size: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut inside = vec![false; h * w];
    inside[rng.random_range(0..h * w)] = true;
    for _ in 1..size {
        let mut frontier = Vec::new();
        for k in 0..h * w {
            if inside[k] {
                continue;
            }
            let (r, c) = (k / w, k % w);
            let touches = (r > 0 && inside[k - w])
                || (r + 1 < h && inside[k + w])
                || (c > 0 && inside[k - 1])
                || (c + 1 < w && inside[k + 1]);
            if touches {
                frontier.push(k);
            }
        }
        inside[*frontier.choose(rng).expect("blob smaller than grid")] = true;
    }
    inside
}

/// True when the set cells of `mask` form one 4-connected component.
pub fn is_connected(mask: &[bool], h: usize, w: usize) -> bool {
    let Some(start) = mask.iter().position(|&m| m) else {
        return false;
    };
    let mut seen = vec![false; mask.len()];
    let mut stack = vec![start];
    seen[start] = true;
    let mut count = 0;
    while let Some(k) = stack.pop() {
        count += 1;
        let (r, c) = (k / w, k % w);
        let mut push = |j: usize| {
            if mask[j] && !seen[j] {
                seen[j] = true;
                stack.push(j);
            }
        };
        if r > 0 {
            push(k - w);
        }
        if r + 1 < h {
            push(k + w);
        }
        if c > 0 {
            push(k - 1);
        }
        if c + 1 < w {
            push(k + 1);
        }
    }
    count == mask.iter().filter(|&&m| m).count()
}

/// Background prototype for a sample of class `class`.
fn background_class(class: usize, n_classes: usize, rho: f64, rng: &mut impl Rng) -> usize {
    if rng.random::<f64>() < rho {
        class
    } else {
        let k = rng.random_range(0..n_classes - 1);
        if k >= class {
            k + 1
        } else {
            k
        }
    }
}

struct Sample {
    patches: Vec<f64>,
    mask: Vec<bool>,
    background: usize,
}

fn generate_sample(spec: &DomainSpec, class: usize, rng: &mut ChaCha8Rng) -> Sample {
    let (t, p) = (spec.tokens(), spec.patch_dim);
    let size = rng.random_range(spec.blob_min..=spec.blob_max);
    let mask = grow_blob(spec.grid_h, spec.grid_w, size, rng);
    let background = background_class(class, spec.n_classes, spec.spurious_strength, rng);
    let normal = Normal::new(0.0, spec.noise_std).expect("finite noise");
    let fg = &spec.class_prototypes.data()[class * p..(class + 1) * p];
    let bg = &spec.background_prototypes.data()[background * p..(background + 1) * p];
    let mut patches = Vec::with_capacity(t * p);
    for &m in &mask {
        let proto = if m { fg } else { bg };
        for j in 0..p {
            let raw = proto[j] + normal.sample(rng);
            patches.push(raw * spec.shift_scale[j] + spec.shift_offset[j]);
        }
    }
    Sample {
        patches,
        mask,
        background,
    }
}

/// `n` samples drawn from `spec`, a pure function of `(spec, n)`. Labels are
/// a shuffled balanced sequence; each sample uses its own RNG stream.
pub fn generate_domain(spec: &DomainSpec, n: usize) -> Result<Dataset> {
    Ok(generate_with_backgrounds(spec, n)?.0)
}

/// Like [`generate_domain`], also returning each sample's background class.
pub fn generate_with_backgrounds(spec: &DomainSpec, n: usize) -> Result<(Dataset, Vec<usize>)> {
    spec.validate()?;
    if n < spec.n_classes {
        return Err(Error::invalid(
            "generate_domain",
            format!("need at least {} samples, got {n}", spec.n_classes),
        ));
    }
    let mut labels: Vec<usize> = (0..n).map(|i| i % spec.n_classes).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    order_rng.set_stream(u64::MAX);
    labels.shuffle(&mut order_rng);
    let samples = exec::map_indexed(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64);
        generate_sample(spec, labels[i], &mut rng)
    });
    let (t, p) = (spec.tokens(), spec.patch_dim);
    let mut patches = Vec::with_capacity(n * t * p);
    let mut masks = Vec::with_capacity(n * t);
    let mut backgrounds = Vec::with_capacity(n);
    for s in samples {
        patches.extend(s.patches);
        masks.extend(s.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        backgrounds.push(s.background);
    }
    let ds = Dataset {
        spec: spec.clone(),
        patches: Tensor::new(vec![n, spec.grid_h, spec.grid_w, p], patches)?,
        labels,
        masks: Tensor::new(vec![n, spec.grid_h, spec.grid_w], masks)?,
    };
    Ok((ds, backgrounds))
}

/// Knobs of the source/target pair.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub n_classes: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_dim: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub rho_source: f64,
    pub sigma_source: f64,
    pub sigma_target: f64,
    pub blob_min: usize,
    pub blob_max: usize,
    /// Target per-dimension scale is drawn from `[lo, hi)`.
    pub shift_scale: (f64, f64),
    /// Target per-dimension offset is drawn from `[-m, m)`.
    pub shift_offset: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_classes: 4,
            grid_h: 8,
            grid_w: 8,
            patch_dim: 16,
            n_source: 384,
            n_target: 192,
            rho_source: 0.9,
            sigma_source: 0.3,
            sigma_target: 0.5,
            blob_min: 16,
            blob_max: 24,
            shift_scale: (0.5, 1.5),
            shift_offset: 1.0,
        }
    }
}

/// Source and target domains sharing class prototypes. The target has an
/// uncorrelated background, more noise and a random per-dimension affine shift.
pub fn make_benchmark_pair(cfg: &BenchmarkConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let (c, p) = (cfg.n_classes, cfg.patch_dim);
    let (lo, hi) = cfg.shift_scale;
    let m = cfg.shift_offset;
    if !(0.0 < lo && lo < hi && hi.is_finite()) || !(m > 0.0 && m.is_finite()) {
        return Err(Error::invalid(
            "benchmark_config",
            format!(
                "shift needs 0 < scale_lo < scale_hi and offset > 0, found ({lo}, {hi}) and {m}"
            ),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let protos = sample_prototypes(2 * c, p, &mut rng);
    let class_prototypes = Tensor::new(vec![c, p], protos[..c].concat())?;
    let background_prototypes = Tensor::new(vec![c, p], protos[c..].concat())?;
    let shift_scale: Vec<f64> = (0..p).map(|_| rng.random_range(lo..hi)).collect();
    let shift_offset: Vec<f64> = (0..p).map(|_| rng.random_range(-m..m)).collect();
    let source = DomainSpec {
        n_classes: c,
        grid_h: cfg.grid_h,
        grid_w: cfg.grid_w,
        patch_dim: p,
        class_prototypes,
        background_prototypes,
        spurious_strength: cfg.rho_source,
        noise_std: cfg.sigma_source,
        shift_scale: vec![1.0; p],
        shift_offset: vec![0.0; p],
        blob_min: cfg.blob_min,
        blob_max: cfg.blob_max,
        seed: rng.random(),
    };
    let target = DomainSpec {
        spurious_strength: 1.0 / c as f64,
        noise_std: cfg.sigma_target,
        shift_scale,
        shift_offset,
        seed: rng.random(),
        ..source.clone()
    };
    Ok((
        generate_domain(&source, cfg.n_source)?,
        generate_domain(&target, cfg.n_target)?,
    ))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Patches of the listed samples as model input `[b, H*W, patch_dim]`.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let (t, p) = (self.spec.tokens(), self.spec.patch_dim);
        let rows = self
            .patches
            .reshape(&[self.len(), t * p])?
            .gather_axis(0, indices)?;
        rows.reshape(&[indices.len(), t, p])
    }

    pub fn mask(&self, i: usize) -> &[f64] {
        let t = self.spec.tokens();
        &self.masks.data()[i * t..(i + 1) * t]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_tnsr(&dir.join("patches.tnsr"), &self.patches, Dtype::F64)?;
        let labels = Tensor::new(
            vec![self.len()],
            self.labels.iter().map(|&l| l as f64).collect(),
        )?;
        save_tnsr(&dir.join("labels.tnsr"), &labels, Dtype::F64)?;
        save_tnsr(&dir.join("masks.tnsr"), &self.masks, Dtype::F64)?;
        std::fs::write(dir.join("manifest.txt"), self.spec.to_manifest(self.len()))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(manifest_path.clone()),
            _ => Error::Io(e),
        })?;
        let (spec, n) = DomainSpec::from_manifest(&text)?;
        let patches = load_tnsr(&dir.join("patches.tnsr"))?;
        let labels_t = load_tnsr(&dir.join("labels.tnsr"))?;
        let masks = load_tnsr(&dir.join("masks.tnsr"))?;
        let want = [n, spec.grid_h, spec.grid_w, spec.patch_dim];
        if patches.shape() != want {
            return Err(Error::shape("load_dataset", patches.shape(), &want));
        }
        if labels_t.shape() != [n] {
            return Err(Error::shape(
                "load_dataset",
                patches.shape(),
                labels_t.shape(),
            ));
        }
        if masks.shape() != &want[..3] {
            return Err(Error::shape("load_dataset", patches.shape(), masks.shape()));
        }
        let mut labels = Vec::with_capacity(n);
        for &l in labels_t.data() {
            if l < 0.0 || l.fract() != 0.0 || l as usize >= spec.n_classes {
                return Err(Error::ConfigMismatch(format!(
                    "label {l} outside the manifest's {} classes",
                    spec.n_classes
                )));
            }
            labels.push(l as usize);
        }
        Ok(Self {
            spec,
            patches,
            labels,
            masks,
        })
    }
}
