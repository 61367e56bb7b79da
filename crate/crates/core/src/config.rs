//! Run configuration in a line-oriented `section.key = value` format.
//!
//! ```text
//! # comments start with '#'
//! world.seed = 3
//! train.tau = 0.07
//! train.prompt_mixture = 0.5, 0.25, 0.25
//! output.dir = runs/a
//! ```
//!
//! Absent keys keep their defaults. Numbers use a decimal point and no
//! thousands separators.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trainer::{AdapterMode, OptimizerKind, TrainConfig};
use crate::world::WorldConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub holdout_fraction: f64,
    pub split_seed: u64,
    pub knn_k: usize,
    /// Cutoff for text-to-audio mAP@K.
    pub map_k: usize,
    pub chance_trials: usize,
    pub baseline_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            holdout_fraction: 0.2,
            split_seed: 0,
            knn_k: 5,
            map_k: 1000,
            chance_trials: 1000,
            baseline_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub mode: AdapterMode,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            mode: AdapterMode::MlpEncoderPlusHead,
            eval: EvalConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

type Setter = fn(&mut RunConfig, &str) -> std::result::Result<(), String>;

fn num<T: FromStr>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|_| format!("cannot parse `{s}` as a number"))
}

fn real(s: &str) -> std::result::Result<f64, String> {
    let v: f64 = num(s)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{s}` is not finite"))
    }
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    let v = real(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("must be positive, got {v}"))
    }
}

fn non_negative(s: &str) -> std::result::Result<f64, String> {
    let v = real(s)?;
    if v >= 0.0 {
        Ok(v)
    } else {
        Err(format!("must be >= 0, got {v}"))
    }
}

fn unit_open_right(s: &str) -> std::result::Result<f64, String> {
    let v = real(s)?;
    if (0.0..1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("must be in [0, 1), got {v}"))
    }
}

fn count(s: &str) -> std::result::Result<usize, String> {
    let v: usize = num(s)?;
    if v > 0 {
        Ok(v)
    } else {
        Err("must be at least 1".into())
    }
}

macro_rules! setters {
    ($( $key:literal => |$c:ident, $v:ident| $body:expr ),* $(,)?) => {
        const SETTERS: &[(&str, Setter)] = &[
            $( ($key, |$c: &mut RunConfig, $v: &str| { $body; Ok(()) }) ),*
        ];
    };
}

setters! {
    "world.seed" => |c, v| c.world.seed = num(v)?,
    "world.n_families" => |c, v| c.world.n_families = count(v)?,
    "world.genera_per_family" => |c, v| c.world.genera_per_family = count(v)?,
    "world.species_per_genus" => |c, v| c.world.species_per_genus = count(v)?,
    "world.d_teacher" => |c, v| c.world.d_teacher = count(v)?,
    "world.d_student_in" => |c, v| c.world.d_student_in = count(v)?,
    "world.d_student" => |c, v| c.world.d_student = count(v)?,
    "world.variant_count" => |c, v| c.world.variant_count = count(v)?,
    "world.audio_per_species" => |c, v| c.world.audio_per_species = count(v)?,
    "world.images_per_species" => |c, v| c.world.images_per_species = count(v)?,
    "world.sigma_family" => |c, v| c.world.sigma_family = positive(v)?,
    "world.sigma_genus" => |c, v| c.world.sigma_genus = non_negative(v)?,
    "world.sigma_species" => |c, v| c.world.sigma_species = non_negative(v)?,
    "world.sigma_image" => |c, v| c.world.sigma_image = non_negative(v)?,
    "world.sigma_audio" => |c, v| c.world.sigma_audio = non_negative(v)?,
    "world.sigma_variant" => |c, v| c.world.sigma_variant = non_negative(v)?,
    "world.sigma_student_text" => |c, v| c.world.sigma_student_text = non_negative(v)?,
    "train.mode" => |c, v| c.mode = AdapterMode::parse(v).ok_or_else(|| format!("unknown adapter mode `{v}`"))?,
    "train.batch_size" => |c, v| {
        let b = count(v)?;
        if b < 2 {
            return Err("must be at least 2".into());
        }
        c.train.batch_size = b
    },
    "train.epochs" => |c, v| c.train.epochs = num(v)?,
    "train.learning_rate" => |c, v| c.train.learning_rate = non_negative(v)?,
    "train.tau" => |c, v| c.train.tau = positive(v)?,
    "train.optimizer" => |c, v| c.train.optimizer = OptimizerKind::parse(v).ok_or_else(|| format!("unknown optimizer `{v}`"))?,
    "train.momentum" => |c, v| c.train.momentum = unit_open_right(v)?,
    "train.beta1" => |c, v| c.train.beta1 = unit_open_right(v)?,
    "train.beta2" => |c, v| c.train.beta2 = unit_open_right(v)?,
    "train.eps" => |c, v| c.train.eps = positive(v)?,
    "train.seed" => |c, v| c.train.seed = num(v)?,
    "train.hidden_dim" => |c, v| c.train.hidden_dim = count(v)?,
    "train.prompt_mixture" => |c, v| {
        c.train.prompt_mixture = if v.is_empty() {
            Vec::new()
        } else {
            v.split(',').map(|p| non_negative(p.trim())).collect::<std::result::Result<_, _>>()?
        }
    },
    "eval.holdout_fraction" => |c, v| {
        let h = real(v)?;
        if !(h > 0.0 && h < 1.0) {
            return Err(format!("must be in (0, 1), got {h}"));
        }
        c.eval.holdout_fraction = h
    },
    "eval.split_seed" => |c, v| c.eval.split_seed = num(v)?,
    "eval.knn_k" => |c, v| c.eval.knn_k = count(v)?,
    "eval.map_k" => |c, v| c.eval.map_k = count(v)?,
    "eval.chance_trials" => |c, v| c.eval.chance_trials = count(v)?,
    "eval.baseline_seed" => |c, v| c.eval.baseline_seed = num(v)?,
    "output.dir" => |c, v| {
        if v.is_empty() {
            return Err("empty path".into());
        }
        c.output_dir = PathBuf::from(v)
    },
}

/// Every recognised key, in canonical order.
pub fn config_keys() -> impl Iterator<Item = &'static str> {
    SETTERS.iter().map(|(k, _)| *k)
}

pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut config = RunConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::TypeError {
                line: line_no,
                key: line.to_string(),
                message: "expected `section.key = value`".into(),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        let setter = SETTERS
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, s)| s)
            .ok_or_else(|| Error::UnknownKey {
                line: line_no,
                key: key.to_string(),
            })?;
        let type_error = |message: String| Error::TypeError {
            line: line_no,
            key: key.to_string(),
            message,
        };
        if !seen.insert(key) {
            return Err(type_error("duplicate key".into()));
        }
        setter(&mut config, value).map_err(type_error)?;
    }
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text)
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        self.train.mixture(self.world.variant_count)?;
        if !(self.eval.holdout_fraction > 0.0 && self.eval.holdout_fraction < 1.0) {
            return Err(Error::InvalidConfig("eval.holdout_fraction must be in (0, 1)".into()));
        }
        if self.eval.knn_k == 0 || self.eval.map_k == 0 {
            return Err(Error::InvalidConfig("eval.knn_k and eval.map_k must be positive".into()));
        }
        Ok(())
    }

    /// Applies a `--seed` override to both the world and the trainer.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.world.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Every key with its current value, one per line, in canonical order.
    /// Parsing this text yields the same config.
    pub fn to_text(&self) -> String {
        let w = &self.world;
        let t = &self.train;
        let e = &self.eval;
        let values: Vec<String> = vec![
            w.seed.to_string(),
            w.n_families.to_string(),
            w.genera_per_family.to_string(),
            w.species_per_genus.to_string(),
            w.d_teacher.to_string(),
            w.d_student_in.to_string(),
            w.d_student.to_string(),
            w.variant_count.to_string(),
            w.audio_per_species.to_string(),
            w.images_per_species.to_string(),
            w.sigma_family.to_string(),
            w.sigma_genus.to_string(),
            w.sigma_species.to_string(),
            w.sigma_image.to_string(),
            w.sigma_audio.to_string(),
            w.sigma_variant.to_string(),
            w.sigma_student_text.to_string(),
            self.mode.name().to_string(),
            t.batch_size.to_string(),
            t.epochs.to_string(),
            t.learning_rate.to_string(),
            t.tau.to_string(),
            t.optimizer.name().to_string(),
            t.momentum.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.eps.to_string(),
            t.seed.to_string(),
            t.hidden_dim.to_string(),
            fmt_list(&t.prompt_mixture),
            e.holdout_fraction.to_string(),
            e.split_seed.to_string(),
            e.knn_k.to_string(),
            e.map_k.to_string(),
            e.chance_trials.to_string(),
            e.baseline_seed.to_string(),
            self.output_dir.display().to_string(),
        ];
        debug_assert_eq!(values.len(), SETTERS.len());
        let mut s = String::new();
        for (key, value) in config_keys().zip(values) {
            writeln!(s, "{key} = {value}").unwrap();
        }
        s
    }

    /// Hex SHA-256 of the canonical text, excluding the output directory so
    /// the same experiment hashes the same wherever it is written.
    pub fn config_hash(&self) -> String {
        let text: String = self
            .to_text()
            .lines()
            .filter(|l| !l.starts_with("output."))
            .map(|l| format!("{l}\n"))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}
