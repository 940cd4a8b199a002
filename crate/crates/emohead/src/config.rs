//! TOML run configuration with dotted command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use emohead_core::fusion::FitOptions;
use emohead_core::model::Architecture;
use emohead_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthetic::SyntheticSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Where `gen-data` writes the synthetic dataset.
    pub data_dir: PathBuf,
    pub train_manifest: PathBuf,
    pub dev_manifest: PathBuf,
    /// Manifest scored by `eval`; the dev manifest when unset.
    pub eval_manifest: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Checkpoint read by `eval`; `<output_dir>/checkpoint` when unset.
    pub checkpoint: Option<PathBuf>,
    /// Prediction CSVs combined by `fuse`.
    pub predictions: Vec<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data_dir: "data".into(),
            train_manifest: "data/train.jsonl".into(),
            dev_manifest: "data/dev.jsonl".into(),
            eval_manifest: None,
            output_dir: "runs/default".into(),
            checkpoint: None,
            predictions: Vec::new(),
        }
    }
}

impl Paths {
    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("checkpoint"))
    }

    pub fn eval_manifest(&self) -> &Path {
        self.eval_manifest.as_deref().unwrap_or(&self.dev_manifest)
    }
}

/// Settings of the `gradcheck` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub projection: usize,
    pub text_dim: usize,
    pub batch: usize,
    pub frames: usize,
    pub eps: f64,
    /// Entries probed per parameter tensor.
    pub max_coords: usize,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            num_layers: 4,
            hidden: 32,
            projection: 16,
            text_dim: 384,
            batch: 3,
            frames: 8,
            eps: 1e-6,
            max_coords: 24,
            tolerance: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of every random stream.
    pub seed: u64,
    pub data: SyntheticSpec,
    pub model: Architecture,
    pub train: TrainConfig,
    pub fusion: FitOptions,
    pub gradcheck: GradcheckConfig,
    pub paths: Paths,
}

fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key {:?}", key)));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {}", raw)) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override {:?}: {} is not a section", key, p)))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses `text`, applies `key=value` overrides, then validates.
    pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {:?} is not key=value", o)))?;
            set_dotted(&mut table, k.trim(), v.trim())?;
        }
        let mut cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        cfg.data.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<RunConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        RunConfig::parse(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {}", path.display(), m)),
            other => other,
        })
    }

    /// Canonical TOML form; parses back to an equal config.
    pub fn describe(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    /// Every field-level problem, or `Ok`.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut push = |section: &str, r: std::result::Result<(), String>| {
            if let Err(m) = r {
                problems.push(format!("{}: {}", section, m));
            }
        };
        push("model", self.model.validate().map_err(|e| e.to_string()));
        push("train", self.train.validate().map_err(|e| e.to_string()));
        push("data", self.data.validate().map_err(|e| e.to_string()));
        let f = &self.fusion;
        push(
            "fusion",
            if f.rho_beg > f.rho_end && f.rho_end > 0.0 && f.rho_beg.is_finite() && f.max_evals > 0 {
                Ok(())
            } else {
                Err(format!("need rho_beg > rho_end > 0 and max_evals > 0, got {} {} {}", f.rho_beg, f.rho_end, f.max_evals))
            },
        );
        let g = &self.gradcheck;
        push(
            "gradcheck",
            if g.num_layers > 0
                && g.hidden > 0
                && g.text_dim > 0
                && g.batch > 0
                && g.frames > 0
                && g.eps > 0.0
                && g.max_coords > 0
                && g.tolerance > 0.0
            {
                Ok(())
            } else {
                Err("dimensions, batch, frames, eps, max_coords and tolerance must be positive".into())
            },
        );
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}
