//! Declarative pipeline configuration.
//!
//! One TOML file describes a whole run. Unknown keys are rejected, and any
//! value can be overridden from the environment as
//! `IMVAE_<SECTION>__<KEY>=<toml value>` (nested keys joined by `__`, names
//! case-insensitive), e.g. `IMVAE_MODEL__LAMBDA_A=2e-3` or
//! `IMVAE_MODEL__ABLATION__NO_DN=true`.
//!
//! Every stage output is stamped with a hash chained from the hashes of the
//! stages it depends on, so a downstream artifact can tell when an upstream
//! input changed.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiment::CorpusParams;
use crate::psg::PsgConfig;
use crate::synthetic::SyntheticConfig;
use crate::trainer::RunConfig;

pub const ENV_PREFIX: &str = "IMVAE_";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generate both domains with [`crate::synthetic`].
    #[default]
    Synthetic,
    /// Read `user,item,rating,timestamp` rating files.
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub x: Option<PathBuf>,
    pub y: Option<PathBuf>,
    pub delimiter: char,
    /// Maximum tolerated share of malformed lines per file.
    pub max_malformed: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            x: None,
            y: None,
            delimiter: ',',
            max_malformed: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Training seeds of multi-seed commands (`ablate`, `sweep`).
    pub seeds: Vec<u64>,
    /// Seed of the frozen test negatives, shared by every compared model.
    pub negative_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            negative_seed: 0,
        }
    }
}

/// Values swept by the `sweep` command; each non-empty list is swept on its
/// own with every other setting at its configured value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub density: Vec<f64>,
    pub k_o: Vec<f64>,
    pub t: Vec<usize>,
    pub lambda_a: Vec<f64>,
    pub lambda_t: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub out: PathBuf,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub corpus: CorpusParams,
    pub psg: PsgConfig,
    pub model: RunConfig,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            corpus: CorpusParams::default(),
            psg: PsgConfig::default(),
            model: RunConfig::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

/// Parse an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(doc: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let path: Vec<String> = key.split("__").map(|p| p.to_ascii_lowercase()).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("malformed override key `{ENV_PREFIX}{key}`")));
    }
    let (last, parents) = path.split_last().expect("split yields at least one part");
    let mut table = doc;
    for p in parents {
        let entry = table
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{ENV_PREFIX}{key}`: `{p}` is not a section")))?;
    }
    table.insert(last.clone(), parse_value(raw));
    Ok(())
}

impl PipelineConfig {
    /// Parse TOML text and apply `IMVAE_*` overrides from `env`.
    pub fn from_toml_with_env(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(config_err)?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_string(), v)))
            .collect();
        overrides.sort();
        for (k, v) in &overrides {
            apply_override(&mut doc, k, v)?;
        }
        let cfg: PipelineConfig = doc.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load a config file (or the defaults when `path` is `None`) with
    /// overrides from the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(config_err)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.corpus.t != self.model.t {
            return Err(Error::Config(format!(
                "corpus.t = {} and model.t = {} must agree (the input window is shared)",
                self.corpus.t, self.model.t
            )));
        }
        if self.data.source == DataSource::Files && (self.data.x.is_none() || self.data.y.is_none()) {
            return Err(Error::Config("data.source = \"files\" needs data.x and data.y".into()));
        }
        if self.data.source == DataSource::Synthetic {
            self.synthetic.validate()?;
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// Hash of everything `prepare` reads: data source (file contents for
    /// rating files) and corpus parameters.
    pub fn prepare_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(b"prepare");
        feed(&mut h, &self.corpus)?;
        feed(&mut h, &self.data)?;
        match self.data.source {
            DataSource::Synthetic => feed(&mut h, &self.synthetic)?,
            DataSource::Files => {
                for p in [&self.data.x, &self.data.y].into_iter().flatten() {
                    let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
                    h.update(Sha256::digest(&bytes));
                }
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    pub fn psg_hash(&self) -> Result<String> {
        chain("train-psg", &self.prepare_hash()?, &self.psg)
    }

    pub fn pseudo_hash(&self) -> Result<String> {
        chain("pseudo", &self.psg_hash()?, &self.model.t_prime)
    }

    pub fn train_hash(&self) -> Result<String> {
        chain("train", &self.pseudo_hash()?, &self.model)
    }

    pub fn eval_hash(&self) -> Result<String> {
        chain("evaluate", &self.train_hash()?, &self.eval.negative_seed)
    }
}

fn feed<T: Serialize>(h: &mut Sha256, value: &T) -> Result<()> {
    let bytes = serde_json::to_vec(value)?;
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(&bytes);
    Ok(())
}

/// Hash of a stage: its name, the upstream hash and its own settings.
pub fn chain<T: Serialize>(stage: &str, upstream: &str, value: &T) -> Result<String> {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(upstream.as_bytes());
    feed(&mut h, value)?;
    Ok(hex::encode(h.finalize()))
}
