use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use ncc_core::data::{gen_vmf_mixture, load_csv, make_long_tailed, Dataset, SyntheticSpec};
use ncc_core::trainer::{Method, TrainConfig};
use ncc_core::NccError;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Where the training data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    Synthetic {
        spec: SyntheticSpec,
        #[serde(default)]
        long_tail_ratio: Option<f64>,
    },
    Csv {
        path: PathBuf,
    },
}

impl DataConfig {
    pub fn load(&self) -> ncc_core::Result<Dataset> {
        match self {
            DataConfig::Synthetic { spec, long_tail_ratio } => {
                let ds = gen_vmf_mixture(spec)?;
                match long_tail_ratio {
                    Some(r) => make_long_tailed(&ds, *r, spec.seed),
                    None => Ok(ds),
                }
            }
            DataConfig::Csv { path } => load_csv(path),
        }
    }
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            spec: SyntheticSpec::benchmark(0),
            long_tail_ratio: None,
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub schema_version: u32,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfigFile {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            data: DataConfig::default(),
            train: TrainConfig::default(),
            output_dir: None,
        }
    }
}

impl RunConfigFile {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| NccError::Config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(NccError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                cfg.schema_version
            ))
            .into());
        }
        Ok(cfg)
    }

    /// Pins every derived default so the file alone reproduces the run.
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        let t = &mut self.train;
        t.base_lr = Some(t.base_lr());
        t.warmup_epochs = Some(t.warmup_epochs());
        if let DataConfig::Csv { path } = &mut self.data {
            *path = std::fs::canonicalize(&*path)
                .with_context(|| format!("resolving data path {}", path.display()))?;
        }
        if let Some(dir) = &self.output_dir {
            if dir.as_os_str().is_empty() {
                bail!(NccError::Config("output_dir is empty".into()));
            }
        }
        self.train.validate()?;
        Ok(self)
    }
}

/// Command-line overrides shared by `train` and `sweep`.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Overrides {
    /// Training data CSV (`label,f0,..` or `f0,..`) instead of the built-in benchmark.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<MethodArg>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long = "lambda-pcl")]
    pub lambda_pcl: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub r: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long = "eval-every")]
    pub eval_every: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum MethodArg {
    Ncc,
    Byol,
    SimclrInfonce,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Ncc => Method::Ncc,
            MethodArg::Byol => Method::Byol,
            MethodArg::SimclrInfonce => Method::SimclrInfonce,
        }
    }
}

impl Overrides {
    /// Base config (file or defaults) with the flags applied on top.
    /// `--epochs` and `--batch-size` drop any pinned warmup length and
    /// learning rate so both are re-derived.
    pub fn apply(&self, config: Option<&Path>) -> anyhow::Result<RunConfigFile> {
        let mut cfg = match config {
            Some(p) => RunConfigFile::read(p)?,
            None => RunConfigFile::default(),
        };
        if let Some(path) = &self.data {
            cfg.data = DataConfig::Csv { path: path.clone() };
            if config.is_none() {
                let ds = cfg.data.load()?;
                cfg.train.encoder.input_dim = ds.dim();
                if let Ok(counts) = ds.class_counts() {
                    cfg.train.k = counts.iter().filter(|&&c| c > 0).count();
                }
            }
        }
        let t = &mut cfg.train;
        if let Some(m) = self.method {
            t.method = m.into();
        }
        if let Some(v) = self.sigma {
            t.loss.sigma = v;
        }
        if let Some(v) = self.lambda_pcl {
            t.loss.lambda_pcl = v;
        }
        if let Some(v) = self.tau {
            t.loss.tau = v;
        }
        if let Some(v) = self.k {
            t.k = v;
        }
        if let Some(v) = self.r {
            t.r = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
            t.warmup_epochs = None;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
            t.base_lr = None;
        }
        if let Some(v) = self.eval_every {
            t.eval_every = v;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let ok = serde_json::to_string(&RunConfigFile::default()).unwrap();
        assert!(serde_json::from_str::<RunConfigFile>(&ok).is_ok());
        let bad = ok.replacen("\"schema_version\"", "\"extra\":1,\"schema_version\"", 1);
        assert!(serde_json::from_str::<RunConfigFile>(&bad).is_err());
        let nested = ok.replacen("\"sigma\"", "\"sigmaa\"", 1);
        assert!(serde_json::from_str::<RunConfigFile>(&nested).is_err());
        let data = ok.replacen("\"long_tail_ratio\"", "\"ratio\"", 1);
        assert!(serde_json::from_str::<RunConfigFile>(&data).is_err());
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg: RunConfigFile = serde_json::from_str(r#"{"schema_version": 1, "train": {"epochs": 3}}"#).unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 256);
        assert_eq!(cfg.data, DataConfig::default());
    }

    #[test]
    fn resolve_pins_derived_values() {
        let cfg = RunConfigFile::default().resolve().unwrap();
        assert_eq!(cfg.train.base_lr, Some(0.05));
        assert_eq!(cfg.train.warmup_epochs, Some(10));
    }
}
