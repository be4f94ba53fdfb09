//! Training configuration: TOML sections, named presets and `key=value` overrides.
//!
//! A config file is TOML. Every key is optional; missing keys take the value
//! of the preset named by the top-level `preset` key (default `toy2d`).
//!
//! ```toml
//! preset = "toy2d"
//! seed = 7
//!
//! [model]
//! hidden_layers = 3
//! width = 256
//! activation = "tanh"          # tanh | softplus | swish
//! time_embedding = "raw"       # raw | sinusoidal:K
//!
//! [path]
//! sigma1 = 0.01
//! kappa1 = 5000.0
//! # origin = [0.0, 0.0]
//!
//! [loss]
//! ell = 1                      # positive integer
//! divergence = "auto"          # auto | exact | hutchinson:N
//! time_sampling = "uniform"    # uniform | stratified
//! delta_abs = 1e-8
//!
//! [optim]
//! learning_rate = 1e-4
//! batch_size = 1000
//! epochs = 10
//! # max_steps = 5000
//! clip_norm = 100.0
//!
//! [eval]
//! eval_every = 0
//! eval_points = 1000
//! solver = "rk4:100"
//!
//! [run]
//! workers = 1
//! checkpoint_every = 500
//! gradcheck_every = 0
//! # max_seconds = 1800.0
//! ```

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Activation, MlpConfig, TimeEmbedding};
use crate::flow::OdeSolverConfig;
use crate::loss::{DivergenceEstimator, Ell, PpdConfig, TimeSampling};
use crate::manifold::Manifold;

/// Serde adapter for types with `Display` + `FromStr`.
mod text {
    use std::fmt::Display;
    use std::str::FromStr;

    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<T: Display, S: Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(v)
    }

    pub fn deserialize<'de, T, D>(d: D) -> Result<T, D::Error>
    where
        T: FromStr,
        T::Err: Display,
        D: Deserializer<'de>,
    {
        String::deserialize(d)?.parse().map_err(de::Error::custom)
    }
}

/// `auto` picks the exact trace up to [`AUTO_EXACT_MAX_DIM`] ambient coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DivergenceChoice {
    Auto,
    Fixed(DivergenceEstimator),
}

pub const AUTO_EXACT_MAX_DIM: usize = 64;

impl DivergenceChoice {
    pub fn resolve(self, manifold: &Manifold) -> DivergenceEstimator {
        match self {
            DivergenceChoice::Fixed(d) => d,
            DivergenceChoice::Auto if manifold.ambient_dim() <= AUTO_EXACT_MAX_DIM => DivergenceEstimator::Exact,
            DivergenceChoice::Auto => DivergenceEstimator::Hutchinson(1),
        }
    }
}

impl fmt::Display for DivergenceChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DivergenceChoice::Auto => f.write_str("auto"),
            DivergenceChoice::Fixed(d) => d.fmt(f),
        }
    }
}

impl FromStr for DivergenceChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "auto" {
            Ok(DivergenceChoice::Auto)
        } else {
            s.parse().map(DivergenceChoice::Fixed)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_layers: usize,
    pub width: usize,
    #[serde(with = "text")]
    pub activation: Activation,
    #[serde(with = "text")]
    pub time_embedding: TimeEmbedding,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSection {
    pub sigma1: f64,
    pub kappa1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub ell: u32,
    #[serde(with = "text")]
    pub divergence: DivergenceChoice,
    #[serde(with = "text")]
    pub time_sampling: TimeSampling,
    pub delta_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub clip_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub eval_every: u64,
    pub eval_points: usize,
    #[serde(with = "text")]
    pub solver: OdeSolverConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub workers: usize,
    pub checkpoint_every: u64,
    pub gradcheck_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: String,
    pub seed: u64,
    pub model: ModelSection,
    pub path: PathSection,
    pub loss: LossSection,
    pub optim: OptimSection,
    pub eval: EvalSection,
    pub run: RunSection,
}

pub const PRESETS: [&str; 6] = ["toy1d", "toy2d", "sphere", "climate", "s15", "poses"];

impl TrainConfig {
    /// Built-in defaults for an experiment class.
    pub fn preset(name: &str) -> Result<Self> {
        let mut c = Self {
            preset: name.to_string(),
            seed: 0,
            model: ModelSection {
                hidden_layers: 3,
                width: 256,
                activation: Activation::Tanh,
                time_embedding: TimeEmbedding::Raw,
            },
            path: PathSection {
                sigma1: 0.01,
                kappa1: 5000.0,
                origin: None,
            },
            loss: LossSection {
                ell: 1,
                divergence: DivergenceChoice::Auto,
                time_sampling: TimeSampling::Uniform,
                delta_abs: 1e-8,
            },
            optim: OptimSection {
                learning_rate: 1e-4,
                batch_size: 1000,
                epochs: 10,
                max_steps: None,
                clip_norm: 100.0,
            },
            eval: EvalSection {
                eval_every: 0,
                eval_points: 1000,
                solver: OdeSolverConfig::rk4(100),
            },
            run: RunSection {
                workers: 1,
                checkpoint_every: 500,
                gradcheck_every: 0,
                max_seconds: None,
            },
        };
        match name {
            "toy2d" => {}
            "toy1d" => {
                c.model.hidden_layers = 2;
                c.model.width = 32;
                c.path.sigma1 = 0.05;
                c.loss.ell = 2;
                c.optim.learning_rate = 3e-3;
                c.optim.batch_size = 256;
                c.optim.epochs = 1;
                c.optim.max_steps = Some(1500);
            }
            "sphere" => {
                c.model.hidden_layers = 6;
                c.model.width = 512;
                c.path.kappa1 = 5000.0;
            }
            "climate" => {
                c.model.hidden_layers = 6;
                c.model.width = 512;
                c.path.kappa1 = 55_000.0;
                c.loss.ell = 2;
            }
            "s15" => {
                c.model.hidden_layers = 3;
                c.model.width = 64;
                c.path.kappa1 = 5000.0;
                c.loss.ell = 2;
                c.loss.divergence = DivergenceChoice::Fixed(DivergenceEstimator::Hutchinson(1));
                c.optim.learning_rate = 1e-3;
                c.optim.batch_size = 7000;
            }
            "poses" => {
                c.model.hidden_layers = 6;
                c.model.width = 512;
                c.path.kappa1 = 55_000.0;
            }
            other => {
                return Err(Error::Parse(format!(
                    "unknown preset `{other}` (expected one of {})",
                    PRESETS.join(", ")
                )))
            }
        }
        Ok(c)
    }

    /// Parse a config file body, filling absent keys from its preset.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Parse(format!("config: {e}")))?;
        Self::from_table(table)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let preset = match table.get("preset") {
            None => "toy2d".to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(_) => return Err(Error::Parse("config key `preset` must be a string".into())),
        };
        let mut merged = toml::Table::try_from(Self::preset(&preset)?)
            .map_err(|e| Error::Format(format!("config serialization: {e}")))?;
        merge(&mut merged, table, "")?;
        let c: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(format!("config: {}", e.message())))?;
        c.validate()?;
        Ok(c)
    }

    /// Apply `section.key=value` (or `seed=value`). The value is read as a
    /// TOML literal, falling back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("override `{assignment}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut patch = toml::Table::new();
        match key.split_once('.') {
            Some((section, field)) => {
                let mut inner = toml::Table::new();
                inner.insert(field.to_string(), value);
                patch.insert(section.to_string(), toml::Value::Table(inner));
            }
            None => {
                patch.insert(key.to_string(), value);
            }
        }
        let mut current =
            toml::Table::try_from(&*self).map_err(|e| Error::Format(format!("config serialization: {e}")))?;
        if key == "preset" {
            return Err(Error::Parse("`preset` cannot be overridden; put it in the config file".into()));
        }
        merge(&mut current, patch, "")?;
        let c: Self = toml::Value::Table(current)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(format!("override `{key}`: {}", e.message())))?;
        c.validate()?;
        *self = c;
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: &str| Err(Error::Parse(format!("config key `{key}`: {why}")));
        if self.model.hidden_layers == 0 {
            return bad("model.hidden_layers", "must be positive");
        }
        if self.model.width == 0 {
            return bad("model.width", "must be positive");
        }
        if !(self.path.sigma1 > 0.0 && self.path.sigma1.is_finite()) {
            return bad("path.sigma1", "must be positive and finite");
        }
        if !(self.path.kappa1 > 0.0 && self.path.kappa1.is_finite()) {
            return bad("path.kappa1", "must be positive and finite");
        }
        if self.loss.ell == 0 {
            return bad("loss.ell", "must be a positive integer");
        }
        if !(self.loss.delta_abs >= 0.0) {
            return bad("loss.delta_abs", "must be non-negative");
        }
        if !(self.optim.learning_rate > 0.0 && self.optim.learning_rate.is_finite()) {
            return bad("optim.learning_rate", "must be positive and finite");
        }
        if self.optim.batch_size == 0 {
            return bad("optim.batch_size", "must be positive");
        }
        if self.optim.epochs == 0 && self.optim.max_steps.is_none() {
            return bad("optim.epochs", "must be positive unless optim.max_steps is set");
        }
        if !(self.optim.clip_norm > 0.0) {
            return bad("optim.clip_norm", "must be positive");
        }
        if self.run.workers == 0 {
            return bad("run.workers", "must be positive");
        }
        if let Some(s) = self.run.max_seconds {
            if !(s > 0.0) {
                return bad("run.max_seconds", "must be positive");
            }
        }
        Ok(())
    }

    pub fn mlp(&self) -> MlpConfig {
        MlpConfig {
            hidden_layers: self.model.hidden_layers,
            width: self.model.width,
            activation: self.model.activation,
            time_embedding: self.model.time_embedding,
        }
    }

    pub fn ppd(&self, manifold: &Manifold) -> PpdConfig {
        PpdConfig {
            ell: Ell::Finite(self.loss.ell),
            divergence: self.loss.divergence.resolve(manifold),
            time_sampling: self.loss.time_sampling,
            delta_abs: self.loss.delta_abs,
        }
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.optim.batch_size).max(1) as u64
    }

    /// `max_steps` if set, else `epochs * ceil(n / batch)`.
    pub fn total_steps(&self, n_train: usize) -> u64 {
        self.optim
            .max_steps
            .unwrap_or(self.optim.epochs as u64 * self.steps_per_epoch(n_train))
    }
}

/// Recursive table merge; a key present in `base` as a table must stay a table.
fn merge(base: &mut toml::Table, patch: toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in patch {
        let full = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge(b, p, &full)?,
            (Some(toml::Value::Table(_)), _) => {
                return Err(Error::Parse(format!("config key `{full}` must be a section")))
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_roundtrip() {
        for name in PRESETS {
            let c = TrainConfig::preset(name).unwrap();
            c.validate().unwrap();
            let back = TrainConfig::from_toml_str(&c.to_toml_string()).unwrap();
            assert_eq!(back, c);
        }
    }

    #[test]
    fn file_overrides_preset() {
        let c = TrainConfig::from_toml_str("preset = \"s15\"\nseed = 4\n[optim]\nbatch_size = 10\n").unwrap();
        assert_eq!(c.seed, 4);
        assert_eq!(c.optim.batch_size, 10);
        assert_eq!(c.optim.learning_rate, 1e-3);
        assert_eq!(
            c.loss.divergence,
            DivergenceChoice::Fixed(DivergenceEstimator::Hutchinson(1))
        );
    }

    #[test]
    fn errors_name_the_key() {
        let e = TrainConfig::from_toml_str("[optim]\nlearnig_rate = 1.0\n").unwrap_err().to_string();
        assert!(e.contains("learnig_rate"), "{e}");
        let e = TrainConfig::from_toml_str("[optim]\nlearning_rate = -1.0\n").unwrap_err().to_string();
        assert!(e.contains("optim.learning_rate"), "{e}");
        let e = TrainConfig::from_toml_str("[loss]\ndivergence = \"hutch\"\n").unwrap_err().to_string();
        assert!(e.contains("hutch"), "{e}");
        let e = TrainConfig::from_toml_str("preset = \"nope\"").unwrap_err().to_string();
        assert!(e.contains("nope"), "{e}");
    }

    #[test]
    fn overrides() {
        let mut c = TrainConfig::preset("toy2d").unwrap();
        c.apply_override("optim.learning_rate=3e-4").unwrap();
        c.apply_override("eval.solver = dopri5:1e-6:1e-8").unwrap();
        c.apply_override("seed=9").unwrap();
        assert_eq!(c.optim.learning_rate, 3e-4);
        assert_eq!(c.eval.solver, OdeSolverConfig::dopri5(1e-6, 1e-8));
        assert_eq!(c.seed, 9);
        assert!(c.apply_override("optim.nope=1").is_err());
        assert!(c.apply_override("optim=1").is_err());
        assert!(c.apply_override("novalue").is_err());
    }

    #[test]
    fn auto_divergence() {
        let small = Manifold::euclidean(2);
        let big = Manifold::sphere(100);
        assert_eq!(DivergenceChoice::Auto.resolve(&small), DivergenceEstimator::Exact);
        assert_eq!(DivergenceChoice::Auto.resolve(&big), DivergenceEstimator::Hutchinson(1));
    }
}
