//! Flat key-value run configuration with typed validation.
//!
//! Format: one `key = value` pair per line, `#` starts a comment. Unknown
//! keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use caflow_core::training::TrainConfig;
use serde::Serialize;

/// Which exit drives inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ExitPolicyConfig {
    Auto,
    Fixed(usize),
}

impl ExitPolicyConfig {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(ExitPolicyConfig::Auto),
            "0" | "1" | "2" | "3" => Ok(ExitPolicyConfig::Fixed(s.parse().unwrap())),
            other => bail!("exit_policy must be auto|0|1|2|3, got {other}"),
        }
    }
}

/// Everything a run needs: training hyperparameters plus paths and
/// inference-side options.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub exit_policy: ExitPolicyConfig,
    pub euler_steps: usize,
    pub tile_size: Option<usize>,
    pub tissue_frac: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data_dir: None,
            val_dir: None,
            out_dir: PathBuf::from("out"),
            exit_policy: ExitPolicyConfig::Auto,
            euler_steps: 1,
            tile_size: None,
            tissue_frac: 0.1,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_str_contents(&text)
    }

    pub fn from_str_contents(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("line {}: expected `key = value`, got `{raw}`", lineno + 1);
            };
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value)
                .with_context(|| format!("line {}: key `{key}`", lineno + 1))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn b(v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                other => bail!("expected bool, got {other}"),
            }
        }
        match key {
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "val_dir" => self.val_dir = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "epochs" => self.train.epochs = value.parse()?,
            "warmup_epochs" => self.train.warmup_epochs = value.parse()?,
            "batch" => self.train.batch = value.parse()?,
            "crop" => self.train.crop = value.parse()?,
            "lr" => self.train.lr = value.parse()?,
            "weight_decay" => self.train.weight_decay = value.parse()?,
            "ema_decay" => self.train.ema_decay = value.parse()?,
            "scale" => self.train.scale = value.parse()?,
            "n_blocks" => self.train.n_blocks = value.parse()?,
            "seed" => self.train.seed = value.parse()?,
            "t0_mixing" => self.train.t0_mixing = b(value)?,
            "consistency" => self.train.consistency = b(value)?,
            "ssim_loss" => self.train.ssim_loss = b(value)?,
            "early_exits" => self.train.early_exits = b(value)?,
            "bin_decay" => self.train.bin_decay = value.parse()?,
            "checkpoint_every" => self.train.checkpoint_every = value.parse()?,
            "exit_policy" => self.exit_policy = ExitPolicyConfig::parse(value)?,
            "euler_steps" => self.euler_steps = value.parse()?,
            "tile_size" => self.tile_size = Some(value.parse()?),
            "tissue_frac" => self.tissue_frac = value.parse()?,
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.euler_steps == 0 {
            bail!("euler_steps must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.tissue_frac) {
            bail!("tissue_frac must lie in [0,1]");
        }
        Ok(())
    }

    /// Applies the `CAFLOW_SEED` environment override, when set.
    pub fn apply_env_seed(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var("CAFLOW_SEED") {
            self.train.seed = v
                .parse()
                .with_context(|| format!("CAFLOW_SEED must be an integer, got `{v}`"))?;
        }
        Ok(())
    }

    /// Hex SHA-256 over the canonical JSON serialization, for provenance.
    pub fn hash(&self) -> String {
        use sha2::Digest;
        let json = serde_json::to_vec(self).expect("config serializes");
        let mut hasher = sha2::Sha256::new();
        hasher.update(&json);
        hex_string(&hasher.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    use sha2::Digest;
    let data = std::fs::read(path)?;
    let mut hasher = sha2::Sha256::new();
    hasher.update(&data);
    Ok(hex_string(&hasher.finalize()))
}
