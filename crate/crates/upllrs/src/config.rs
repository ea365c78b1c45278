//! Run configuration: a flat `key = value` file with `data.`, `rs.`, and
//! `train.` prefixes, merged with command-line overrides. Unknown keys
//! are rejected. The effective configuration is echoed into the output
//! directory so a run can be reproduced from that echo alone.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::nn::ModelSpec;
use crate::separation::SeparationConfig;
use crate::trainer::{AugmentSpec, TrainConfig, TrainMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Csv,
}

/// Everything a pipeline run needs, with usable defaults for every key.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // data
    pub source: DataSource,
    pub csv_path: Option<PathBuf>,
    pub label_column: String,
    pub n: usize,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub mu: f64,
    pub eta: f64,
    // recursive separation
    pub rs_beta: usize,
    pub rs_gamma: f64,
    pub rs_patience: usize,
    pub rs_max_steps: Option<usize>,
    pub rs_lr: f64,
    pub rs_batch_size: usize,
    // second stage
    pub mode: TrainMode,
    pub epochs: usize,
    pub train_patience: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub tau: f64,
    pub xi: f64,
    pub pi_max: f64,
    pub t_prime: usize,
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub views: usize,
    pub hidden: Vec<usize>,
    pub use_rs: bool,
    pub use_unreliable: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            source: DataSource::Synthetic,
            csv_path: None,
            label_column: "label".into(),
            n: 6000,
            classes: 10,
            dim: 16,
            separation: 6.0,
            mu: 0.3,
            eta: 0.1,
            rs_beta: 5,
            rs_gamma: 0.03,
            rs_patience: 2,
            rs_max_steps: None,
            rs_lr: 0.1,
            rs_batch_size: 256,
            mode: TrainMode::General,
            epochs: 500,
            train_patience: 25,
            lr: 5e-2,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 256,
            tau: 0.95,
            xi: 2.0,
            pi_max: 1.0,
            t_prime: 100,
            weak_sigma: 0.05,
            strong_sigma: 0.2,
            views: 2,
            hidden: vec![512, 256, 128, 64],
            use_rs: true,
            use_unreliable: true,
        }
    }
}

fn parse_as<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    /// Applies one `key = value` assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_as(key, value)?,
            "data.source" => {
                self.source = match value {
                    "synthetic" => DataSource::Synthetic,
                    "csv" => DataSource::Csv,
                    _ => return Err(Error::Config(format!("unknown data source {value:?}"))),
                }
            }
            "data.path" => self.csv_path = Some(PathBuf::from(value)),
            "data.label_column" => self.label_column = value.to_string(),
            "data.n" => self.n = parse_as(key, value)?,
            "data.classes" => self.classes = parse_as(key, value)?,
            "data.dim" => self.dim = parse_as(key, value)?,
            "data.separation" => self.separation = parse_as(key, value)?,
            "data.mu" => self.mu = parse_as(key, value)?,
            "data.eta" => self.eta = parse_as(key, value)?,
            "rs.beta" => self.rs_beta = parse_as(key, value)?,
            "rs.gamma" => self.rs_gamma = parse_as(key, value)?,
            "rs.patience" => self.rs_patience = parse_as(key, value)?,
            "rs.max_steps" => {
                self.rs_max_steps = if value == "auto" {
                    None
                } else {
                    Some(parse_as(key, value)?)
                }
            }
            "rs.lr" => self.rs_lr = parse_as(key, value)?,
            "rs.batch_size" => self.rs_batch_size = parse_as(key, value)?,
            "train.mode" => self.mode = TrainMode::parse(value)?,
            "train.epochs" => self.epochs = parse_as(key, value)?,
            "train.patience" => self.train_patience = parse_as(key, value)?,
            "train.lr" => self.lr = parse_as(key, value)?,
            "train.momentum" => self.momentum = parse_as(key, value)?,
            "train.weight_decay" => self.weight_decay = parse_as(key, value)?,
            "train.batch_size" => self.batch_size = parse_as(key, value)?,
            "train.tau" => self.tau = parse_as(key, value)?,
            "train.xi" => self.xi = parse_as(key, value)?,
            "train.pi_max" => self.pi_max = parse_as(key, value)?,
            "train.t_prime" => self.t_prime = parse_as(key, value)?,
            "train.weak_sigma" => self.weak_sigma = parse_as(key, value)?,
            "train.strong_sigma" => self.strong_sigma = parse_as(key, value)?,
            "train.views" => self.views = parse_as(key, value)?,
            "train.hidden" => {
                let dims: Result<Vec<usize>> = value
                    .split(',')
                    .map(|tok| parse_as::<usize>(key, tok.trim()))
                    .collect();
                let dims = dims?;
                if dims.is_empty() || dims.contains(&0) {
                    return Err(Error::Config(format!("bad hidden dims {value:?}")));
                }
                self.hidden = dims;
            }
            "train.use_rs" => self.use_rs = parse_bool(key, value)?,
            "train.use_unreliable" => self.use_unreliable = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Reads a key=value file; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {} of {}: expected key = value",
                    line_no + 1,
                    path.display()
                )));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical echo of every key, suitable for `apply_file`.
    pub fn to_echo_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(
            out,
            "data.source = {}",
            match self.source {
                DataSource::Synthetic => "synthetic",
                DataSource::Csv => "csv",
            }
        );
        if let Some(p) = &self.csv_path {
            let _ = writeln!(out, "data.path = {}", p.display());
        }
        let _ = writeln!(out, "data.label_column = {}", self.label_column);
        let _ = writeln!(out, "data.n = {}", self.n);
        let _ = writeln!(out, "data.classes = {}", self.classes);
        let _ = writeln!(out, "data.dim = {}", self.dim);
        let _ = writeln!(out, "data.separation = {}", self.separation);
        let _ = writeln!(out, "data.mu = {}", self.mu);
        let _ = writeln!(out, "data.eta = {}", self.eta);
        let _ = writeln!(out, "rs.beta = {}", self.rs_beta);
        let _ = writeln!(out, "rs.gamma = {}", self.rs_gamma);
        let _ = writeln!(out, "rs.patience = {}", self.rs_patience);
        match self.rs_max_steps {
            Some(m) => {
                let _ = writeln!(out, "rs.max_steps = {m}");
            }
            None => {
                let _ = writeln!(out, "rs.max_steps = auto");
            }
        }
        let _ = writeln!(out, "rs.lr = {}", self.rs_lr);
        let _ = writeln!(out, "rs.batch_size = {}", self.rs_batch_size);
        let _ = writeln!(out, "train.mode = {}", self.mode.as_str());
        let _ = writeln!(out, "train.epochs = {}", self.epochs);
        let _ = writeln!(out, "train.patience = {}", self.train_patience);
        let _ = writeln!(out, "train.lr = {}", self.lr);
        let _ = writeln!(out, "train.momentum = {}", self.momentum);
        let _ = writeln!(out, "train.weight_decay = {}", self.weight_decay);
        let _ = writeln!(out, "train.batch_size = {}", self.batch_size);
        let _ = writeln!(out, "train.tau = {}", self.tau);
        let _ = writeln!(out, "train.xi = {}", self.xi);
        let _ = writeln!(out, "train.pi_max = {}", self.pi_max);
        let _ = writeln!(out, "train.t_prime = {}", self.t_prime);
        let _ = writeln!(out, "train.weak_sigma = {}", self.weak_sigma);
        let _ = writeln!(out, "train.strong_sigma = {}", self.strong_sigma);
        let _ = writeln!(out, "train.views = {}", self.views);
        let hidden: Vec<String> = self.hidden.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "train.hidden = {}", hidden.join(","));
        let _ = writeln!(out, "train.use_rs = {}", self.use_rs);
        let _ = writeln!(out, "train.use_unreliable = {}", self.use_unreliable);
        out
    }

    /// FNV-1a hash of the echo, for naming grid-cell directories.
    pub fn short_hash(&self) -> String {
        let mut hash: u64 = 0xcbf29ce484222325;
        for byte in self.to_echo_string().bytes() {
            hash ^= byte as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        format!("{hash:016x}")
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec { hidden: self.hidden.clone() }
    }

    pub fn separation_config(&self) -> SeparationConfig {
        SeparationConfig {
            beta: self.rs_beta,
            gamma: self.rs_gamma,
            patience: self.rs_patience,
            max_steps: self.rs_max_steps,
            lr: self.rs_lr,
            batch_size: self.rs_batch_size,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_epochs: self.epochs,
            patience: self.train_patience,
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            tau: self.tau,
            xi: self.xi,
            pi_max: self.pi_max,
            t_prime: self.t_prime,
            mode: self.mode,
            augment: AugmentSpec {
                weak_sigma: self.weak_sigma,
                strong_sigma: self.strong_sigma,
                views: self.views,
            },
            use_unreliable: self.use_unreliable,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.source == DataSource::Csv && self.csv_path.is_none() {
            return Err(Error::Config("data.source = csv requires data.path".into()));
        }
        if !(0.0..1.0).contains(&self.mu) {
            return Err(Error::Config(format!("data.mu must be in [0,1), got {}", self.mu)));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::Config(format!("data.eta must be in [0,1), got {}", self.eta)));
        }
        self.separation_config().validate()?;
        self.train_config().validate()?;
        Ok(())
    }
}

#[cfg(test)]
#[allow(clippy::field_reassign_with_default)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips_through_apply_file() {
        let mut config = RunConfig::default();
        config.apply("data.mu", "0.5").unwrap();
        config.apply("rs.gamma", "0.05").unwrap();
        config.apply("train.hidden", "32, 16").unwrap();
        config.apply("train.mode", "augmented").unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.echo");
        std::fs::write(&path, config.to_echo_string()).unwrap();

        let mut reloaded = RunConfig::default();
        reloaded.apply_file(&path).unwrap();
        assert_eq!(reloaded, config);
        assert_eq!(reloaded.short_hash(), config.short_hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut config = RunConfig::default();
        assert!(matches!(
            config.apply("data.unknown", "1"),
            Err(Error::Config(_))
        ));
        assert!(config.apply("train.tau", "not-a-number").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "# comment\n\ndata.mu = 0.4 # inline\n").unwrap();
        let mut config = RunConfig::default();
        config.apply_file(&path).unwrap();
        assert_eq!(config.mu, 0.4);
    }

    #[test]
    fn hash_distinguishes_configs() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.apply("seed", "1").unwrap();
        assert_ne!(a.short_hash(), b.short_hash());
    }

    #[test]
    fn validation_checks_ranges() {
        let mut config = RunConfig::default();
        config.mu = 1.5;
        assert!(config.validate().is_err());
        let mut config = RunConfig::default();
        config.source = DataSource::Csv;
        assert!(config.validate().is_err());
    }
}
