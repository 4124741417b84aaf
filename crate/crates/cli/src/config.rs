//! Flat `key = value` run configuration.
//!
//! Resolution order is defaults, then the config file, then command-line
//! overrides. [`RunConfig::to_text`] writes every key, so a saved config
//! re-runs with the same settings.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use sha2::{Digest, Sha256};
use tdag_core::dnode_select::Strategy;
use tdag_core::ingest::Threshold;
use tdag_core::synthgen::StreamSpec;
use tdag_core::traincore::{EvalConfig, PenaltyStep, ToyConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    ScaleFree,
    Uniform,
}

impl Generator {
    fn name(self) -> &'static str {
        match self {
            Generator::ScaleFree => "scale-free",
            Generator::Uniform => "uniform",
        }
    }
}

impl FromStr for Generator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scale-free" => Ok(Generator::ScaleFree),
            "uniform" => Ok(Generator::Uniform),
            other => Err(format!("unknown generator `{other}` (scale-free, uniform)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Event-log CSV; when absent the stream is generated.
    pub input: Option<PathBuf>,
    pub generator: Generator,
    pub n_users: usize,
    pub n_items: usize,
    pub n_events: usize,
    pub attachment_exponent: f64,
    pub feature_dim: usize,
    pub label_cardinality: usize,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
    pub user_threshold: Threshold,
    pub item_threshold: Threshold,
    pub n_batches: usize,
    pub strategy: Strategy,
    /// D-nodes per batch, or parts for cut-by-time.
    pub k: usize,
    /// Values swept by `analyze`.
    pub sweep: Vec<usize>,
    pub dim: usize,
    pub alpha: f64,
    pub lr: f64,
    pub epochs: usize,
    pub n_negatives: usize,
    pub penalty_step: PenaltyStep,
    pub eval_negatives: usize,
    pub evolve_active: bool,
    pub toy_steps: usize,
    pub checkpoint: Option<PathBuf>,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let eval = EvalConfig::default();
        let spec = StreamSpec::default();
        RunConfig {
            seed: 0,
            input: None,
            generator: Generator::ScaleFree,
            n_users: spec.n_users,
            n_items: spec.n_items,
            n_events: spec.n_events,
            attachment_exponent: spec.attachment_exponent,
            feature_dim: spec.feature_dim,
            label_cardinality: spec.label_cardinality,
            split: [0.7, 0.1, 0.2],
            user_threshold: Threshold::Infinite,
            item_threshold: Threshold::Infinite,
            n_batches: 10,
            strategy: Strategy::Greedy,
            k: 10,
            sweep: vec![0, 10, 20, 40],
            dim: train.dim,
            alpha: train.alpha,
            lr: train.lr,
            epochs: train.epochs,
            n_negatives: train.n_negatives,
            penalty_step: train.penalty_step,
            eval_negatives: eval.n_negatives,
            evolve_active: eval.evolve_active,
            toy_steps: ToyConfig::default().steps,
            checkpoint: None,
            threads: 0,
            out: PathBuf::from("out"),
        }
    }
}

/// Keys that never change results and are left out of the config hash.
const UNHASHED: [&str; 2] = ["out", "threads"];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| anyhow!("bad value for `{key}`: {e}"))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_text(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "input" => self.input = optional_path(v),
            "generator" => self.generator = parse(key, v)?,
            "n_users" => self.n_users = parse(key, v)?,
            "n_items" => self.n_items = parse(key, v)?,
            "n_events" => self.n_events = parse(key, v)?,
            "attachment_exponent" => self.attachment_exponent = parse(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "label_cardinality" => self.label_cardinality = parse(key, v)?,
            "split" => {
                let parts: Vec<f64> = v.split(',').map(|x| parse(key, x.trim())).collect::<Result<_>>()?;
                self.split = parts
                    .try_into()
                    .map_err(|_| anyhow!("`split` takes three comma-separated fractions"))?;
            }
            "user_threshold" => self.user_threshold = parse(key, v)?,
            "item_threshold" => self.item_threshold = parse(key, v)?,
            "n_batches" => self.n_batches = parse(key, v)?,
            "strategy" => self.strategy = parse(key, v)?,
            "k" => self.k = parse(key, v)?,
            "sweep" => self.sweep = parse_list(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "n_negatives" => self.n_negatives = parse(key, v)?,
            "penalty_step" => {
                self.penalty_step = match v {
                    "proximal" => PenaltyStep::Proximal,
                    "gradient" => PenaltyStep::Gradient,
                    other => bail!("bad value for `penalty_step`: `{other}` (proximal, gradient)"),
                }
            }
            "eval_negatives" => self.eval_negatives = parse(key, v)?,
            "evolve_active" => self.evolve_active = parse(key, v)?,
            "toy_steps" => self.toy_steps = parse(key, v)?,
            "checkpoint" => self.checkpoint = optional_path(v),
            "threads" => self.threads = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            other => bail!("unknown config key `{other}`"),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn pairs(&self) -> Vec<(&'static str, String)> {
        let penalty = match self.penalty_step {
            PenaltyStep::Proximal => "proximal",
            PenaltyStep::Gradient => "gradient",
        };
        vec![
            ("seed", self.seed.to_string()),
            ("input", path_text(&self.input)),
            ("generator", self.generator.name().to_string()),
            ("n_users", self.n_users.to_string()),
            ("n_items", self.n_items.to_string()),
            ("n_events", self.n_events.to_string()),
            ("attachment_exponent", self.attachment_exponent.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("label_cardinality", self.label_cardinality.to_string()),
            ("split", join(&self.split)),
            ("user_threshold", self.user_threshold.to_string()),
            ("item_threshold", self.item_threshold.to_string()),
            ("n_batches", self.n_batches.to_string()),
            ("strategy", self.strategy.name().to_string()),
            ("k", self.k.to_string()),
            ("sweep", join(&self.sweep)),
            ("dim", self.dim.to_string()),
            ("alpha", self.alpha.to_string()),
            ("lr", self.lr.to_string()),
            ("epochs", self.epochs.to_string()),
            ("n_negatives", self.n_negatives.to_string()),
            ("penalty_step", penalty.to_string()),
            ("eval_negatives", self.eval_negatives.to_string()),
            ("evolve_active", self.evolve_active.to_string()),
            ("toy_steps", self.toy_steps.to_string()),
            ("checkpoint", path_text(&self.checkpoint)),
            ("threads", self.threads.to_string()),
            ("out", self.out.display().to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// SHA-256 over the keys that affect results.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.pairs() {
            if !UNHASHED.contains(&k) {
                h.update(format!("{k} = {v}\n"));
            }
        }
        hex::encode(h.finalize())
    }

    /// Defaults, then `file`, then `overrides` in order.
    pub fn resolve(file: Option<&str>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(text) = file {
            for (k, v) in parse_file(text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn stream_spec(&self) -> StreamSpec {
        StreamSpec {
            n_users: self.n_users,
            n_items: self.n_items,
            n_events: self.n_events,
            attachment_exponent: self.attachment_exponent,
            seed: self.seed,
            feature_dim: self.feature_dim,
            label_cardinality: self.label_cardinality,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            dim: self.dim,
            alpha: self.alpha,
            lr: self.lr,
            epochs: self.epochs,
            n_negatives: self.n_negatives,
            seed: self.seed,
            penalty_step: self.penalty_step,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            n_negatives: self.eval_negatives,
            seed: self.seed,
            evolve_active: self.evolve_active,
        }
    }

    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            alpha: self.alpha,
            lr: self.lr,
            steps: self.toy_steps,
            seed: self.seed,
            ..ToyConfig::default()
        }
    }
}

/// Reads `key = value` lines. Blank lines and `#` comments are skipped; a
/// repeated key keeps its last value.
pub fn parse_file(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .with_context(|| format!("config line {}: expected `key = value`, got `{raw}`", i + 1))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("alpha", "0.3").unwrap();
        cfg.set("sweep", "1, 2,5").unwrap();
        cfg.set("input", "events.csv").unwrap();
        cfg.set("user_threshold", "12").unwrap();
        let back = RunConfig::resolve(Some(&cfg.to_text()), &[]).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn command_line_beats_file_beats_default() {
        let file = "seed = 4\nk = 3 # comment\n\n# whole-line comment\n";
        let cfg = RunConfig::resolve(Some(file), &[("k".into(), "7".into())]).unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.k, 7);
        assert_eq!(cfg.dim, RunConfig::default().dim);
    }

    #[test]
    fn output_location_does_not_change_hash() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("out", "elsewhere").unwrap();
        b.set("threads", "3").unwrap();
        assert_eq!(a.hash(), b.hash());
        b.set("seed", "1").unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn bad_input_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("nope", "1").is_err());
        assert!(cfg.set("k", "-1").is_err());
        assert!(cfg.set("split", "0.5,0.5").is_err());
        assert!(parse_file("just words").is_err());
    }
}
