//! Flat key-value run configuration: `key = value` lines, `#` comments,
//! unknown keys rejected. Every command writes its resolved configuration
//! next to its outputs.

use crate::error::{Error, Result};
use crate::quant::{BitSet, QuantMode};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Idx,
    Synthetic,
}

/// Behavior when a command's outputs already exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnExisting {
    Refuse,
    Timestamp,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset_kind: DatasetKind,
    pub dataset_path: Option<PathBuf>,
    pub dataset_mean: f32,
    pub dataset_std: f32,
    pub dataset_classes: usize,
    pub dataset_train_n: usize,
    pub dataset_test_n: usize,
    pub net_bits: BitSet,
    pub net_mode: QuantMode,
    pub train_epochs: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    pub train_k: usize,
    pub train_tau: f64,
    pub train_seed: u64,
    pub agent_alpha: f64,
    pub agent_steps: usize,
    pub agent_epsilon_start: f64,
    pub agent_epsilon_end: f64,
    pub agent_lr: f64,
    pub out_dir: PathBuf,
    pub out_on_existing: OnExisting,
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| Error::Config(format!("bad value `{value}` for key `{key}`")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map: BTreeMap<&str, &str> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)));
            };
            let key = key.trim();
            if map.insert(key, value.trim()).is_some() {
                return Err(Error::Config(format!("duplicate key `{key}`")));
            }
        }

        const KNOWN: &[&str] = &[
            "dataset.kind",
            "dataset.path",
            "dataset.mean",
            "dataset.std",
            "dataset.classes",
            "dataset.train_n",
            "dataset.test_n",
            "net.bits",
            "net.mode",
            "train.epochs",
            "train.batch",
            "train.lr",
            "train.k",
            "train.tau",
            "train.seed",
            "agent.alpha",
            "agent.steps",
            "agent.epsilon_start",
            "agent.epsilon_end",
            "agent.lr",
            "out.dir",
            "out.on_existing",
        ];
        for key in map.keys() {
            if !KNOWN.contains(key) {
                return Err(Error::Config(format!("unknown key `{key}`")));
            }
        }

        let kind = match map.get("dataset.kind") {
            Some(&"idx") => DatasetKind::Idx,
            Some(&"synthetic") => DatasetKind::Synthetic,
            Some(other) => return Err(Error::Config(format!("dataset.kind must be idx|synthetic, got `{other}`"))),
            None => return Err(Error::Config("missing required key `dataset.kind`".into())),
        };
        let dataset_path = map.get("dataset.path").map(PathBuf::from);
        if kind == DatasetKind::Idx && dataset_path.is_none() {
            return Err(Error::Config("dataset.kind = idx requires dataset.path".into()));
        }
        let out_dir = map
            .get("out.dir")
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config("missing required key `out.dir`".into()))?;
        let on_existing = match map.get("out.on_existing") {
            None | Some(&"refuse") => OnExisting::Refuse,
            Some(&"timestamp") => OnExisting::Timestamp,
            Some(other) => {
                return Err(Error::Config(format!("out.on_existing must be refuse|timestamp, got `{other}`")))
            }
        };
        let cfg = RunConfig {
            dataset_kind: kind,
            dataset_path,
            dataset_mean: map.get("dataset.mean").map_or(Ok(0.0), |v| parse_num("dataset.mean", v))?,
            dataset_std: map.get("dataset.std").map_or(Ok(1.0), |v| parse_num("dataset.std", v))?,
            dataset_classes: map.get("dataset.classes").map_or(Ok(10), |v| parse_num("dataset.classes", v))?,
            dataset_train_n: map.get("dataset.train_n").map_or(Ok(3000), |v| parse_num("dataset.train_n", v))?,
            dataset_test_n: map.get("dataset.test_n").map_or(Ok(1000), |v| parse_num("dataset.test_n", v))?,
            net_bits: map.get("net.bits").map_or_else(|| BitSet::new(&[4, 3, 2]), |v| BitSet::parse(v))?,
            net_mode: map.get("net.mode").map_or(Ok(QuantMode::RoundMaster), |v| QuantMode::parse(v))?,
            train_epochs: map.get("train.epochs").map_or(Ok(20), |v| parse_num("train.epochs", v))?,
            train_batch: map.get("train.batch").map_or(Ok(64), |v| parse_num("train.batch", v))?,
            train_lr: map.get("train.lr").map_or(Ok(0.02), |v| parse_num("train.lr", v))?,
            train_k: map.get("train.k").map_or(Ok(2), |v| parse_num("train.k", v))?,
            train_tau: map.get("train.tau").map_or(Ok(0.995), |v| parse_num("train.tau", v))?,
            train_seed: map.get("train.seed").map_or(Ok(1), |v| parse_num("train.seed", v))?,
            agent_alpha: map.get("agent.alpha").map_or(Ok(0.2), |v| parse_num("agent.alpha", v))?,
            agent_steps: map.get("agent.steps").map_or(Ok(8000), |v| parse_num("agent.steps", v))?,
            agent_epsilon_start: map
                .get("agent.epsilon_start")
                .map_or(Ok(1.0), |v| parse_num("agent.epsilon_start", v))?,
            agent_epsilon_end: map.get("agent.epsilon_end").map_or(Ok(0.05), |v| parse_num("agent.epsilon_end", v))?,
            agent_lr: map.get("agent.lr").map_or(Ok(1e-6), |v| parse_num("agent.lr", v))?,
            out_dir,
            out_on_existing: on_existing,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        if self.dataset_classes < 2 {
            return Err(Error::Config("dataset.classes must be at least 2".into()));
        }
        if self.dataset_train_n == 0 || self.dataset_test_n == 0 {
            return Err(Error::Config("dataset sizes must be positive".into()));
        }
        if self.train_batch == 0 {
            return Err(Error::Config("train.batch must be positive".into()));
        }
        if self.train_lr <= 0.0 || self.agent_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if !(0.0 < self.train_tau && self.train_tau < 1.0) {
            return Err(Error::Config("train.tau must be in (0, 1)".into()));
        }
        for e in [self.agent_epsilon_start, self.agent_epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::Config(format!("epsilon {e} outside [0, 1]")));
            }
        }
        if self.agent_alpha < 0.0 {
            return Err(Error::Config("agent.alpha must be non-negative".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Serializes the fully resolved configuration (defaults filled in).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let kind = match self.dataset_kind {
            DatasetKind::Idx => "idx",
            DatasetKind::Synthetic => "synthetic",
        };
        let _ = writeln!(s, "dataset.kind = {kind}");
        if let Some(p) = &self.dataset_path {
            let _ = writeln!(s, "dataset.path = {}", p.display());
        }
        let _ = writeln!(s, "dataset.mean = {}", self.dataset_mean);
        let _ = writeln!(s, "dataset.std = {}", self.dataset_std);
        let _ = writeln!(s, "dataset.classes = {}", self.dataset_classes);
        let _ = writeln!(s, "dataset.train_n = {}", self.dataset_train_n);
        let _ = writeln!(s, "dataset.test_n = {}", self.dataset_test_n);
        let _ = writeln!(s, "net.bits = {}", self.net_bits);
        let _ = writeln!(s, "net.mode = {}", self.net_mode);
        let _ = writeln!(s, "train.epochs = {}", self.train_epochs);
        let _ = writeln!(s, "train.batch = {}", self.train_batch);
        let _ = writeln!(s, "train.lr = {}", self.train_lr);
        let _ = writeln!(s, "train.k = {}", self.train_k);
        let _ = writeln!(s, "train.tau = {}", self.train_tau);
        let _ = writeln!(s, "train.seed = {}", self.train_seed);
        let _ = writeln!(s, "agent.alpha = {}", self.agent_alpha);
        let _ = writeln!(s, "agent.steps = {}", self.agent_steps);
        let _ = writeln!(s, "agent.epsilon_start = {}", self.agent_epsilon_start);
        let _ = writeln!(s, "agent.epsilon_end = {}", self.agent_epsilon_end);
        let _ = writeln!(s, "agent.lr = {}", self.agent_lr);
        let _ = writeln!(s, "out.dir = {}", self.out_dir.display());
        let on = match self.out_on_existing {
            OnExisting::Refuse => "refuse",
            OnExisting::Timestamp => "timestamp",
        };
        let _ = writeln!(s, "out.on_existing = {on}");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "dataset.kind = synthetic\nout.dir = /tmp/run\n";

    #[test]
    fn minimal_config_with_defaults() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        assert_eq!(cfg.dataset_kind, DatasetKind::Synthetic);
        assert_eq!(cfg.train_epochs, 20);
        assert_eq!(cfg.train_k, 2);
        assert_eq!(cfg.net_bits.bits(), &[4, 3, 2]);
        assert_eq!(cfg.out_on_existing, OnExisting::Refuse);
    }

    #[test]
    fn unknown_key_rejected() {
        let text = format!("{MINIMAL}typo.key = 3\n");
        match RunConfig::parse(&text) {
            Err(Error::Config(msg)) => assert!(msg.contains("typo.key")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn idx_requires_path() {
        assert!(RunConfig::parse("dataset.kind = idx\nout.dir = /tmp/x\n").is_err());
        assert!(RunConfig::parse("dataset.kind = idx\ndataset.path = /data\nout.dir = /tmp/x\n").is_ok());
    }

    #[test]
    fn duplicate_key_rejected() {
        let text = format!("{MINIMAL}train.epochs = 3\ntrain.epochs = 4\n");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let text = format!("# a comment\n\n{MINIMAL}");
        assert!(RunConfig::parse(&text).is_ok());
        let text = format!("{MINIMAL}not a kv line\n");
        assert!(RunConfig::parse(&text).is_err());
    }

    #[test]
    fn resolved_text_reparses_identically() {
        let cfg = RunConfig::parse(MINIMAL).unwrap();
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(cfg.to_text(), again.to_text());
    }
}
