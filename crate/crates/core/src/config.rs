//! `key = value` run configuration.

use std::fmt;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::network::AttentionMode;

/// Which trained models a command uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelChoice {
    Single(AttentionMode),
    Ensemble,
}

impl std::str::FromStr for ModelChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ha" => Ok(Self::Single(AttentionMode::Hard)),
            "sa" => Ok(Self::Single(AttentionMode::Soft)),
            "ens" => Ok(Self::Ensemble),
            _ => Err(Error::Config(format!(
                "attention_mode `{s}` is not ha, sa or ens"
            ))),
        }
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Single(m) => f.write_str(m.tag()),
            Self::Ensemble => f.write_str("ens"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub input_size: usize,
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub n_superpixels: usize,
    pub attention_mode: ModelChoice,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            input_size: 128,
            alpha: 0.7,
            beta: 10.0,
            lr: 3e-3,
            batch: 8,
            epochs: 40,
            patience: 5,
            n_superpixels: 200,
            attention_mode: ModelChoice::Ensemble,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

pub const KEYS: [&str; 12] = [
    "seed",
    "input_size",
    "alpha",
    "beta",
    "lr",
    "batch",
    "epochs",
    "patience",
    "n_superpixels",
    "attention_mode",
    "data_dir",
    "out_dir",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Unknown or repeated
    /// keys are errors; absent keys keep their defaults.
    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = format!("{context}:{}", ln + 1);
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::parse(at, "expected `key = value`"));
            };
            let (k, v) = (k.trim(), v.trim());
            if seen.contains(&k) {
                return Err(Error::parse(at, format!("key `{k}` repeated")));
            }
            seen.push(k);
            cfg.set(k, v).map_err(|e| Error::parse(at, e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = num(key, v)?,
            "input_size" => self.input_size = num(key, v)?,
            "alpha" => self.alpha = num(key, v)?,
            "beta" => self.beta = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "patience" => self.patience = num(key, v)?,
            "n_superpixels" => self.n_superpixels = num(key, v)?,
            "attention_mode" => self.attention_mode = v.parse()?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => {
                return Err(Error::Config(format!(
                    "unknown key `{key}` (known: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(self.beta > 0.0) || !(self.lr > 0.0) {
            return Err(Error::Config(
                "alpha must be in [0,1]; beta and lr positive".into(),
            ));
        }
        if self.batch == 0 || self.patience == 0 || self.n_superpixels == 0 {
            return Err(Error::Config(
                "batch, patience and n_superpixels must be positive".into(),
            ));
        }
        if self.input_size < 16 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a multiple of 16",
                self.input_size
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "seed = {}\ninput_size = {}\nalpha = {}\nbeta = {}\nlr = {}\nbatch = {}\nepochs = {}\npatience = {}\nn_superpixels = {}\nattention_mode = {}\ndata_dir = {}\nout_dir = {}\n",
            self.seed,
            self.input_size,
            self.alpha,
            self.beta,
            self.lr,
            self.batch,
            self.epochs,
            self.patience,
            self.n_superpixels,
            self.attention_mode,
            self.data_dir.display(),
            self.out_dir.display()
        )
    }
}
