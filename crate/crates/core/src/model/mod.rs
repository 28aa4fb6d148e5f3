//! The desk-scale network: patch embedding, VSS encoder blocks, a channel-wise
//! scan neck, BatchNorm + ReLU and a linear classifier.
//!
//! All activations use the token layout `[batch, H*W, D]`; a `D x H x W`
//! feature map is the transpose of one batch row.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Phase};

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::ssm::cross::{inverse_permutation, route_order, Route, ROUTES};
use crate::ssm::{SsmParams, SsmVars};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_dim: usize,
    pub embed_dim: usize,
    pub n_encoder_blocks: usize,
    pub state_dim: usize,
    /// Number of channel-scan neck blocks (0 removes the neck).
    pub n_chvss: usize,
    pub n_classes: usize,
    /// Channel-grid width for the grouped neck variant; 0 selects the plain
    /// bidirectional channel scan.
    pub chgroup_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            grid_h: 8,
            grid_w: 8,
            patch_dim: 16,
            embed_dim: 32,
            n_encoder_blocks: 2,
            state_dim: 8,
            n_chvss: 2,
            n_classes: 4,
            chgroup_width: 0,
        }
    }
}

impl ModelConfig {
    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("grid_h", self.grid_h),
            ("grid_w", self.grid_w),
            ("patch_dim", self.patch_dim),
            ("embed_dim", self.embed_dim),
            ("state_dim", self.state_dim),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(
                    "model_config",
                    format!("{name} must be positive"),
                ));
            }
        }
        if !self.embed_dim.is_multiple_of(2) {
            return Err(Error::invalid("model_config", "embed_dim must be even"));
        }
        if self.chgroup_width > 0 && !self.embed_dim.is_multiple_of(self.chgroup_width) {
            return Err(Error::invalid(
                "model_config",
                format!(
                    "chgroup_width {} does not divide embed_dim {}",
                    self.chgroup_width, self.embed_dim
                ),
            ));
        }
        Ok(())
    }

    /// Field values in their serialized order.
    pub fn fields(&self) -> [u32; 9] {
        [
            self.grid_h,
            self.grid_w,
            self.patch_dim,
            self.embed_dim,
            self.n_encoder_blocks,
            self.state_dim,
            self.n_chvss,
            self.n_classes,
            self.chgroup_width,
        ]
        .map(|v| v as u32)
    }

    pub fn from_fields(f: [u32; 9]) -> Self {
        let f = f.map(|v| v as usize);
        Self {
            grid_h: f[0],
            grid_w: f[1],
            patch_dim: f[2],
            embed_dim: f[3],
            n_encoder_blocks: f[4],
            state_dim: f[5],
            n_chvss: f[6],
            n_classes: f[7],
            chgroup_width: f[8],
        }
    }
}

/// Optimizer group a named tensor belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Patch embedding and encoder blocks.
    Backbone,
    /// Channel-scan neck and BatchNorm affine parameters.
    Neck,
    Classifier,
    /// BatchNorm running statistics; never trained.
    Buffer,
}

pub fn param_group(name: &str) -> ParamGroup {
    if name.starts_with("bn.running_") {
        ParamGroup::Buffer
    } else if name.starts_with("head.") {
        ParamGroup::Classifier
    } else if name.starts_with("neck.") || name.starts_with("bn.") {
        ParamGroup::Neck
    } else {
        ParamGroup::Backbone
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics.
    Train,
    /// Normalize with the frozen running statistics.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

/// Graph handles for every trainable tensor of a [`Model`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub vars: BTreeMap<String, Var>,
}

impl ModelVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidData(format!("missing parameter {name}")))
    }
}

/// Handles produced by a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// Patch embedding `I: [B, T, D]`.
    pub tokens: Var,
    /// Pre-pool feature map `[B, T, D]` after the neck.
    pub feature_map: Var,
    /// Classifier input `g(x): [B, D]`, after pooling, BatchNorm and ReLU.
    pub features: Var,
    pub logits: Var,
}

/// BatchNorm batch statistics from a train-mode pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
    pub batch: usize,
}

/// Materialized outputs of an eval-mode forward pass.
#[derive(Clone, Debug)]
pub struct Outputs {
    pub logits: Tensor,
    pub feature_map: Tensor,
    pub features: Tensor,
}

fn uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (p, d, n, c, t) = (
            config.patch_dim,
            config.embed_dim,
            config.state_dim,
            config.n_classes,
            config.tokens(),
        );
        let e = d / 2;
        let mut m = BTreeMap::new();
        m.insert("embed.weight".into(), uniform(rng, &[p, d], p));
        m.insert("embed.bias".into(), uniform(rng, &[d], p));
        for i in 0..config.n_encoder_blocks {
            let pre = format!("enc.{i}");
            m.insert(format!("{pre}.norm.weight"), Tensor::ones(&[d]));
            m.insert(format!("{pre}.norm.bias"), Tensor::zeros(&[d]));
            m.insert(format!("{pre}.in_proj.weight"), uniform(rng, &[d, d], d));
            m.insert(format!("{pre}.in_proj.bias"), uniform(rng, &[d], d));
            for r in 0..ROUTES.len() {
                SsmParams::init(e, n, rng).insert_into(&mut m, &format!("{pre}.route{r}"));
            }
            m.insert(format!("{pre}.out_proj.weight"), uniform(rng, &[e, d], e));
            m.insert(format!("{pre}.out_proj.bias"), uniform(rng, &[d], e));
        }
        for j in 0..config.n_chvss {
            let pre = format!("neck.{j}");
            if config.chgroup_width > 0 {
                for r in 0..ROUTES.len() {
                    SsmParams::init(t, n, rng).insert_into(&mut m, &format!("{pre}.route{r}"));
                }
            } else {
                SsmParams::init(t, n, rng).insert_into(&mut m, &format!("{pre}.fwd"));
                SsmParams::init(t, n, rng).insert_into(&mut m, &format!("{pre}.bwd"));
            }
        }
        m.insert("bn.weight".into(), Tensor::ones(&[d]));
        m.insert("bn.bias".into(), Tensor::zeros(&[d]));
        m.insert("bn.running_mean".into(), Tensor::zeros(&[d]));
        m.insert("bn.running_var".into(), Tensor::ones(&[d]));
        m.insert("head.weight".into(), uniform(rng, &[d, c], d));
        m.insert("head.bias".into(), uniform(rng, &[c], d));
        Ok(Self { config, tensors: m })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::InvalidData(format!("missing parameter {name}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::InvalidData(format!("missing parameter {name}")))
    }

    /// Names of trainable tensors (everything except BN buffers), sorted.
    pub fn param_names(&self) -> impl Iterator<Item = &String> {
        self.tensors
            .keys()
            .filter(|k| param_group(k) != ParamGroup::Buffer)
    }

    /// Puts every trainable tensor on `g`, as differentiable leaves when
    /// `trainable`, otherwise as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> ModelVars {
        let vars = self
            .param_names()
            .map(|name| {
                let t = self.tensors[name].clone();
                let v = if trainable { g.param(t) } else { g.constant(t) };
                (name.clone(), v)
            })
            .collect();
        ModelVars { vars }
    }

    /// Per-patch linear map `[B, T, patch_dim] -> [B, T, D]`.
    pub fn patch_embed(&self, g: &mut Graph, v: &ModelVars, patches: Var) -> Result<Var> {
        let c = &self.config;
        let s = g.shape(patches).to_vec();
        if s.len() != 3 || s[1] != c.tokens() || s[2] != c.patch_dim {
            return Err(Error::shape(
                "patch_embed",
                &s,
                &[0, c.tokens(), c.patch_dim],
            ));
        }
        let z = g.matmul(patches, v.get("embed.weight")?)?;
        g.add(z, v.get("embed.bias")?)
    }

    fn routes_and_inverses(h: usize, w: usize) -> Vec<(Route, Vec<usize>, Vec<usize>)> {
        ROUTES
            .iter()
            .map(|&r| {
                let order = route_order(h, w, r);
                let inv = inverse_permutation(&order);
                (r, order, inv)
            })
            .collect()
    }

    /// Sums per-route scans of `u: [B, T, E]` over the four traversals of an
    /// `h x w` grid laid out along axis 1.
    fn cross_scan_merge(
        g: &mut Graph,
        v: &ModelVars,
        prefix: &str,
        u: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let mut merged: Option<Var> = None;
        for (r, (route, order, inv)) in Self::routes_and_inverses(h, w).into_iter().enumerate() {
            let ssm = SsmVars::lookup(&v.vars, &format!("{prefix}.route{r}"))?;
            let y = if route == Route::RowMajor {
                ssm.apply(g, u)?
            } else {
                let xr = g.gather(u, 1, &order)?;
                let yr = ssm.apply(g, xr)?;
                g.gather(yr, 1, &inv)?
            };
            merged = Some(match merged {
                Some(m) => g.add(m, y)?,
                None => y,
            });
        }
        Ok(merged.expect("four routes"))
    }

    /// LayerNorm, in-projection split into signal and gate halves, four-route
    /// selective scan on the signal, SiLU gating, out-projection, residual.
    pub fn vss_block(&self, g: &mut Graph, v: &ModelVars, index: usize, x: Var) -> Result<Var> {
        let pre = format!("enc.{index}");
        let d = self.config.embed_dim;
        let n = g.layer_norm(x, LN_EPS)?;
        let n = g.mul(n, v.get(&format!("{pre}.norm.weight"))?)?;
        let n = g.add(n, v.get(&format!("{pre}.norm.bias"))?)?;
        let z = g.matmul(n, v.get(&format!("{pre}.in_proj.weight"))?)?;
        let z = g.add(z, v.get(&format!("{pre}.in_proj.bias"))?)?;
        let signal = g.slice(z, 2, 0, d / 2)?;
        let gate = g.slice(z, 2, d / 2, d)?;
        let scanned =
            Self::cross_scan_merge(g, v, &pre, signal, self.config.grid_h, self.config.grid_w)?;
        let gate = g.silu(gate)?;
        let gated = g.mul(scanned, gate)?;
        let out = g.matmul(gated, v.get(&format!("{pre}.out_proj.weight"))?)?;
        let out = g.add(out, v.get(&format!("{pre}.out_proj.bias"))?)?;
        g.add(x, out)
    }

    /// Channel-wise block: the `D` channels become a length-`D` sequence of
    /// `H*W`-dimensional tokens, scanned in both directions and added back.
    pub fn chvss_block(&self, g: &mut Graph, v: &ModelVars, index: usize, x: Var) -> Result<Var> {
        let pre = format!("neck.{index}");
        let fwd = SsmVars::lookup(&v.vars, &format!("{pre}.fwd"))?;
        let bwd = SsmVars::lookup(&v.vars, &format!("{pre}.bwd"))?;
        let channels = g.transpose(x)?;
        let y = SsmVars::apply_bidirectional(g, channels, &fwd, &bwd)?;
        let y = g.transpose(y)?;
        g.add(x, y)
    }

    /// Grouped channel variant: the channel sequence is laid out as a
    /// `(D/d) x d` grid and cross-scanned along four routes.
    pub fn chgroup_block(&self, g: &mut Graph, v: &ModelVars, index: usize, x: Var) -> Result<Var> {
        let width = self.config.chgroup_width;
        let d = self.config.embed_dim;
        if width == 0 || !d.is_multiple_of(width) {
            return Err(Error::invalid(
                "chgroup_scan",
                format!("group width {width} does not divide {d} channels"),
            ));
        }
        let channels = g.transpose(x)?;
        let y = Self::cross_scan_merge(g, v, &format!("neck.{index}"), channels, d / width, width)?;
        let y = g.transpose(y)?;
        g.add(x, y)
    }

    /// Embedding output to neck output: `[B, T, D] -> [B, T, D]`.
    pub fn backbone(&self, g: &mut Graph, v: &ModelVars, tokens: Var) -> Result<Var> {
        let mut x = tokens;
        for i in 0..self.config.n_encoder_blocks {
            x = self.vss_block(g, v, i, x)?;
        }
        for j in 0..self.config.n_chvss {
            x = if self.config.chgroup_width > 0 {
                self.chgroup_block(g, v, j, x)?
            } else {
                self.chvss_block(g, v, j, x)?
            };
        }
        Ok(x)
    }

    /// Pooling, BatchNorm, ReLU and classifier on a `[B, T, D]` feature map.
    /// Returns the classifier input, the logits and any batch statistics.
    pub fn head(
        &self,
        g: &mut Graph,
        v: &ModelVars,
        feature_map: Var,
        mode: BnMode,
    ) -> Result<(Var, Var, Option<BatchStats>)> {
        let pooled = g.mean_axis(feature_map, 1)?;
        let (normed, stats) = match mode {
            BnMode::Train => {
                let mu = g.mean_axis(pooled, 0)?;
                let centered = g.sub(pooled, mu)?;
                let sq = g.mul(centered, centered)?;
                let var = g.mean_axis(sq, 0)?;
                let stats = BatchStats {
                    mean: g.value(mu).clone(),
                    var: g.value(var).clone(),
                    batch: g.shape(pooled)[0],
                };
                let var = g.add_scalar(var, BN_EPS);
                let sd = g.sqrt(var)?;
                let inv = g.reciprocal(sd)?;
                (g.mul(centered, inv)?, Some(stats))
            }
            BnMode::Eval => {
                let mean = g.constant(self.tensor("bn.running_mean")?.clone());
                let inv = self
                    .tensor("bn.running_var")?
                    .map(|v| 1.0 / (v + BN_EPS).sqrt());
                let inv = g.constant(inv);
                let centered = g.sub(pooled, mean)?;
                (g.mul(centered, inv)?, None)
            }
        };
        let bn = g.mul(normed, v.get("bn.weight")?)?;
        let bn = g.add(bn, v.get("bn.bias")?)?;
        let act = g.relu(bn);
        let logits = g.matmul(act, v.get("head.weight")?)?;
        let logits = g.add(logits, v.get("head.bias")?)?;
        Ok((act, logits, stats))
    }

    /// Everything after patch embedding.
    pub fn forward_tokens(
        &self,
        g: &mut Graph,
        v: &ModelVars,
        tokens: Var,
        mode: BnMode,
    ) -> Result<(ForwardVars, Option<BatchStats>)> {
        let feature_map = self.backbone(g, v, tokens)?;
        let (features, logits, stats) = self.head(g, v, feature_map, mode)?;
        Ok((
            ForwardVars {
                tokens,
                feature_map,
                features,
                logits,
            },
            stats,
        ))
    }

    /// Full forward from raw patches `[B, T, patch_dim]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        v: &ModelVars,
        patches: Var,
        mode: BnMode,
    ) -> Result<(ForwardVars, Option<BatchStats>)> {
        let tokens = self.patch_embed(g, v, patches)?;
        self.forward_tokens(g, v, tokens, mode)
    }

    /// Eval-mode forward without gradient tracking.
    pub fn infer(&self, patches: &Tensor) -> Result<Outputs> {
        let mut g = Graph::new();
        let v = self.bind(&mut g, false);
        let x = g.constant(patches.clone());
        let (f, _) = self.forward(&mut g, &v, x, BnMode::Eval)?;
        Ok(Outputs {
            logits: g.value(f.logits).clone(),
            feature_map: g.value(f.feature_map).clone(),
            features: g.value(f.features).clone(),
        })
    }

    /// Exponential moving update of the BatchNorm running statistics.
    pub fn update_running_stats(&mut self, stats: &BatchStats) -> Result<()> {
        let n = stats.batch as f64;
        let unbias = if stats.batch > 1 { n / (n - 1.0) } else { 1.0 };
        let mean = self.tensor_mut("bn.running_mean")?;
        for (r, b) in mean.data_mut().iter_mut().zip(stats.mean.data()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
        }
        let var = self.tensor_mut("bn.running_var")?;
        for (r, b) in var.data_mut().iter_mut().zip(stats.var.data()) {
            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b * unbias;
        }
        Ok(())
    }

    /// Expected tensor names and shapes for `config`, used to validate loads.
    pub fn template(config: ModelConfig) -> Result<BTreeMap<String, Vec<usize>>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let m = Model::new(config, &mut rng)?;
        Ok(m.tensors
            .into_iter()
            .map(|(k, t)| (k, t.shape().to_vec()))
            .collect())
    }

    /// Silences every scan read-out and zeroes each VSS out-projection, which
    /// turns all residual blocks into identities.
    pub fn zero_scan_readouts(&mut self) {
        for (name, t) in self.tensors.iter_mut() {
            let zero =
                name.ends_with(".w_c") || name.ends_with(".d_skip") || name.contains(".out_proj.");
            if zero {
                *t = Tensor::zeros(t.shape());
            }
        }
    }
}
