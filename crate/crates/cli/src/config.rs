//! Resolution of `key = value` settings into run and data configurations.
//!
//! Every key can come from the config file, from a `--key-name` flag, and the
//! seed additionally from `SFMAMBA_SEED`. Precedence: file, then environment,
//! then flags.

use std::collections::BTreeMap;
use std::str::FromStr;

use sfmamba_core::data::BenchmarkConfig;
use sfmamba_core::pipeline::RunConfig;

pub const SEED_ENV: &str = "SFMAMBA_SEED";

/// Recognised keys with a one-line description for `--help`.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "run seed"),
    ("source_epochs", "source training epochs"),
    ("adapt_epochs", "adaptation epochs"),
    ("batch_size", "minibatch size"),
    ("lr", "source learning rate"),
    ("lr_adapt", "adaptation learning rate of the neck"),
    ("weight_decay", "decoupled weight decay"),
    ("alpha", "label smoothing"),
    ("gamma", "background percentage shuffled"),
    ("k", "neighbors in label voting"),
    ("iters", "voting rounds"),
    ("beta", "selected fraction per class"),
    ("use_scs", "background shuffling consistency on/off"),
    ("use_upa_filter", "neighbor-vote filtering on/off"),
    ("grid_h", "patch grid height"),
    ("grid_w", "patch grid width"),
    ("patch_dim", "features per patch"),
    ("embed_dim", "token width"),
    ("n_encoder_blocks", "spatial scan blocks"),
    ("state_dim", "state size"),
    ("n_chvss", "channel scan blocks"),
    ("n_classes", "number of classes"),
    (
        "chgroup_width",
        "channel grid width, 0 for the plain channel scan",
    ),
    ("n_source", "source samples"),
    ("n_target", "target samples"),
    ("rho_source", "source background/class agreement"),
    ("sigma_source", "source noise"),
    ("sigma_target", "target noise"),
    ("blob_min", "smallest foreground blob"),
    ("blob_max", "largest foreground blob"),
    (
        "shift_scale_min",
        "lower bound of the target per-dimension scale",
    ),
    (
        "shift_scale_max",
        "upper bound of the target per-dimension scale",
    ),
    ("shift_offset", "target per-dimension offset bound"),
];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {value}")]
    BadValue { key: String, value: String },
}

/// Layered settings.
#[derive(Clone, Debug, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn from_map(values: BTreeMap<String, String>) -> Result<Self, ConfigError> {
        if let Some(k) = values.keys().find(|k| !KEYS.iter().any(|(n, _)| n == k)) {
            return Err(ConfigError::UnknownKey(k.clone()));
        }
        Ok(Self { values })
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    fn apply<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        if let Some(raw) = self.values.get(key) {
            *slot = raw.parse().map_err(|_| ConfigError::BadValue {
                key: key.to_string(),
                value: raw.clone(),
            })?;
        }
        Ok(())
    }

    fn apply_bool(&self, key: &str, slot: &mut bool) -> Result<(), ConfigError> {
        if let Some(raw) = self.values.get(key) {
            *slot = match raw.as_str() {
                "true" | "1" | "on" | "yes" => true,
                "false" | "0" | "off" | "no" => false,
                _ => {
                    return Err(ConfigError::BadValue {
                        key: key.to_string(),
                        value: raw.clone(),
                    })
                }
            };
        }
        Ok(())
    }

    pub fn run_config(&self) -> Result<RunConfig, ConfigError> {
        let mut c = RunConfig::default();
        self.apply("seed", &mut c.seed)?;
        self.apply("source_epochs", &mut c.source_epochs)?;
        self.apply("adapt_epochs", &mut c.adapt_epochs)?;
        self.apply("batch_size", &mut c.batch_size)?;
        self.apply("lr", &mut c.lr)?;
        self.apply("lr_adapt", &mut c.lr_adapt)?;
        self.apply("weight_decay", &mut c.weight_decay)?;
        self.apply("alpha", &mut c.alpha)?;
        self.apply("gamma", &mut c.gamma)?;
        self.apply("k", &mut c.labeling.k)?;
        self.apply("iters", &mut c.labeling.iters)?;
        self.apply("beta", &mut c.labeling.beta)?;
        self.apply_bool("use_scs", &mut c.use_scs)?;
        self.apply_bool("use_upa_filter", &mut c.use_upa_filter)?;
        let m = &mut c.model;
        self.apply("grid_h", &mut m.grid_h)?;
        self.apply("grid_w", &mut m.grid_w)?;
        self.apply("patch_dim", &mut m.patch_dim)?;
        self.apply("embed_dim", &mut m.embed_dim)?;
        self.apply("n_encoder_blocks", &mut m.n_encoder_blocks)?;
        self.apply("state_dim", &mut m.state_dim)?;
        self.apply("n_chvss", &mut m.n_chvss)?;
        self.apply("n_classes", &mut m.n_classes)?;
        self.apply("chgroup_width", &mut m.chgroup_width)?;
        Ok(c)
    }

    pub fn benchmark_config(&self) -> Result<BenchmarkConfig, ConfigError> {
        let mut b = BenchmarkConfig::default();
        self.apply("n_classes", &mut b.n_classes)?;
        self.apply("grid_h", &mut b.grid_h)?;
        self.apply("grid_w", &mut b.grid_w)?;
        self.apply("patch_dim", &mut b.patch_dim)?;
        self.apply("n_source", &mut b.n_source)?;
        self.apply("n_target", &mut b.n_target)?;
        self.apply("rho_source", &mut b.rho_source)?;
        self.apply("sigma_source", &mut b.sigma_source)?;
        self.apply("sigma_target", &mut b.sigma_target)?;
        self.apply("blob_min", &mut b.blob_min)?;
        self.apply("blob_max", &mut b.blob_max)?;
        self.apply("shift_scale_min", &mut b.shift_scale.0)?;
        self.apply("shift_scale_max", &mut b.shift_scale.1)?;
        self.apply("shift_offset", &mut b.shift_offset)?;
        Ok(b)
    }
}
