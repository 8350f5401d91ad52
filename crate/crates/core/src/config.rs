//! Experiment configuration and its `key=value` text form.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::egraph::{NeighborStrategy, DEFAULT_SPLIT};
use crate::error::{Error, Result};
use crate::losses::{LossConfig, Mode};
use crate::membank::{Weighting, DEFAULT_CAPACITY, DEFAULT_SAMPLE_SIZE};
use crate::parallel::Execution;

/// Cumulative ablation ladder; each rung adds one component to the last.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    /// Encoder plus task head only.
    Backbone,
    /// Adds the deviation loss against a fixed standard-normal reference.
    Dev,
    /// Adds the memory bank, with every entry weighted equally.
    Mem,
    /// Adds time-decay weighting of bank entries.
    Time,
    /// Adds the pseudo-grouped contrastive loss.
    #[default]
    Scl,
}

impl Ablation {
    pub const LADDER: [Ablation; 5] = [
        Ablation::Backbone,
        Ablation::Dev,
        Ablation::Mem,
        Ablation::Time,
        Ablation::Scl,
    ];

    pub fn uses_deviation(self) -> bool {
        self >= Ablation::Dev
    }

    pub fn uses_bank(self) -> bool {
        self >= Ablation::Mem
    }

    pub fn uses_contrastive(self) -> bool {
        self == Ablation::Scl
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Backbone => "backbone",
            Ablation::Dev => "dev",
            Ablation::Mem => "mem",
            Ablation::Time => "time",
            Ablation::Scl => "scl",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::LADDER
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation {s:?} (expected backbone|dev|mem|time|scl)")))
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "anomaly" => Ok(Mode::Anomaly),
            "downstream" => Ok(Mode::Downstream),
            _ => Err(Error::invalid(format!("unknown mode {s:?} (expected anomaly|downstream)"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Anomaly => "anomaly",
            Mode::Downstream => "downstream",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub ablation: Ablation,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub seed: u64,
    pub loss: LossConfig,
    pub bank_capacity: usize,
    pub bank_sample_size: usize,
    pub hops: usize,
    pub per_hop: usize,
    pub neighbor_strategy: NeighborStrategy,
    /// Fraction of training labels hidden before training.
    pub drop_ratio: f64,
    /// Let the classification loss also update the encoder.
    pub sup_to_encoder: bool,
    /// Divide decay-weighted reference sums by the weight total.
    pub normalized_reference: bool,
    pub split: (f64, f64, f64),
    pub execution: Execution,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::Downstream,
            ablation: Ablation::Scl,
            batch_size: 256,
            lr: 0.0005,
            epochs: 10,
            patience: 5,
            seed: 0,
            loss: LossConfig::default(),
            bank_capacity: DEFAULT_CAPACITY,
            bank_sample_size: DEFAULT_SAMPLE_SIZE,
            hops: 2,
            per_hop: 20,
            neighbor_strategy: NeighborStrategy::Recent,
            drop_ratio: 0.0,
            sup_to_encoder: false,
            normalized_reference: false,
            split: DEFAULT_SPLIT,
            execution: Execution::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("{key}: cannot parse {value:?}")))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |m: String| Err(Error::invalid(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.bank_capacity == 0 || self.bank_sample_size == 0 {
            return bad("bank sizes must be positive".into());
        }
        if self.hops == 0 || self.per_hop == 0 {
            return bad("hops and per_hop must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.drop_ratio) {
            return bad(format!("drop_ratio {} outside [0, 1]", self.drop_ratio));
        }
        Ok(())
    }

    /// Reference weighting implied by the ablation rung.
    pub fn weighting(&self) -> Weighting {
        match self.ablation {
            Ablation::Backbone | Ablation::Dev | Ablation::Mem => Weighting::Uniform,
            Ablation::Time | Ablation::Scl if self.normalized_reference => Weighting::NormalizedDecay,
            Ablation::Time | Ablation::Scl => Weighting::Decay,
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "mode" => self.mode = v.parse()?,
            "ablation" => self.ablation = v.parse()?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "margin" => self.loss.margin = parse(key, v)?,
            "temperature" => self.loss.temperature = parse(key, v)?,
            "group_threshold" => self.loss.group_threshold = parse(key, v)?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "beta" => self.loss.beta = parse(key, v)?,
            "raw_dot_product" => self.loss.raw_dot_product = parse(key, v)?,
            "bank_capacity" => self.bank_capacity = parse(key, v)?,
            "bank_sample_size" => self.bank_sample_size = parse(key, v)?,
            "hops" => self.hops = parse(key, v)?,
            "per_hop" => self.per_hop = parse(key, v)?,
            "neighbor_strategy" => {
                self.neighbor_strategy = match v {
                    "recent" => NeighborStrategy::Recent,
                    "uniform" => NeighborStrategy::Uniform,
                    _ => return Err(Error::invalid(format!("neighbor_strategy: unknown value {v:?}"))),
                }
            }
            "drop_ratio" => self.drop_ratio = parse(key, v)?,
            "sup_to_encoder" => self.sup_to_encoder = parse(key, v)?,
            "normalized_reference" => self.normalized_reference = parse(key, v)?,
            "split" => {
                let parts = v.split(',').map(|p| parse(key, p.trim())).collect::<Result<Vec<f64>>>()?;
                let [a, b, c] = parts[..] else {
                    return Err(Error::invalid("split: expected three comma-separated fractions"));
                };
                self.split = (a, b, c);
            }
            "execution" => {
                self.execution = match v {
                    "sequential" => Execution::Sequential,
                    "parallel" => Execution::Parallel,
                    _ => return Err(Error::invalid(format!("execution: unknown value {v:?}"))),
                }
            }
            other => return Err(Error::invalid(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` lines on top of `self`. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            self.set(k, v).map_err(|e| Error::Config { line: i + 1, message: e.to_string() })?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = ExperimentConfig::default();
        assert_eq!((c.batch_size, c.lr, c.hops, c.per_hop), (256, 0.0005, 2, 20));
        assert_eq!((c.bank_capacity, c.bank_sample_size), (4000, 1000));
        assert_eq!((c.loss.alpha, c.loss.beta), (0.1, 0.01));
        c.validate().unwrap();
    }

    #[test]
    fn ladder_is_cumulative() {
        use Ablation::*;
        let dev: Vec<bool> = Ablation::LADDER.iter().map(|a| a.uses_deviation()).collect();
        let bank: Vec<bool> = Ablation::LADDER.iter().map(|a| a.uses_bank()).collect();
        assert_eq!(dev, [false, true, true, true, true]);
        assert_eq!(bank, [false, false, true, true, true]);
        assert!(Scl.uses_contrastive() && !Time.uses_contrastive());
        let mut c = ExperimentConfig { ablation: Mem, ..Default::default() };
        assert_eq!(c.weighting(), Weighting::Uniform);
        c.ablation = Time;
        assert_eq!(c.weighting(), Weighting::Decay);
    }

    #[test]
    fn text_form() {
        let mut c = ExperimentConfig::default();
        c.apply_text("# comment\n\nmode = anomaly\nablation=mem\nalpha=0.5\nsplit=0.6,0.2,0.2\nper_hop=7\n")
            .unwrap();
        assert_eq!(c.mode, Mode::Anomaly);
        assert_eq!(c.ablation, Ablation::Mem);
        assert_eq!(c.loss.alpha, 0.5);
        assert_eq!(c.split, (0.6, 0.2, 0.2));
        assert_eq!(c.per_hop, 7);

        let err = c.apply_text("seed=1\nbogus=3\n").unwrap_err();
        assert!(matches!(err, Error::Config { line: 2, .. }), "{err}");
        assert!(c.apply_text("lr\n").is_err());
        assert!(c.apply_text("lr=fast\n").is_err());
    }
}
