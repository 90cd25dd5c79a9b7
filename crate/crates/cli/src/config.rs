//! Flat `key=value` run configuration.
//!
//! Every key has a default. Values come from, in increasing precedence: the
//! defaults, a config file (`--config` or `AVPARSE_CONFIG`), and command-line
//! flags. The fully resolved set is written next to each command's outputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

pub struct Key {
    pub name: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

macro_rules! keys {
    ($($name:literal = $default:literal : $help:literal),* $(,)?) => {
        pub const KEYS: &[Key] = &[$(Key { name: $name, default: $default, help: $help }),*];
    };
}

keys! {
    "seed" = "1": "seed for data generation, initialization and shuffling",
    "data" = "": "dataset directory (contains train/ and test/)",
    "out" = "": "output directory",
    "checkpoint" = "": "checkpoint file to load",
    "predictions" = "": "prediction TSV to evaluate",
    "split" = "test": "dataset split used by predict and eval",
    "parallel" = "false": "parallelize synthetic generation and per-video evaluation",

    "num_videos" = "240": "total synthetic videos across both splits",
    "test_videos" = "40": "synthetic videos held out as the test split",
    "num_categories" = "6": "number of event categories",
    "snippets" = "10": "snippets per video",
    "feature_dim" = "64": "synthetic feature dimension",
    "noise_sigma" = "0.1": "standard deviation of synthetic feature noise",
    "min_events" = "1": "minimum events per synthetic video",
    "max_events" = "3": "maximum events per synthetic video",
    "audio_only_prob" = "0.3": "probability that a synthetic event is audio-only",
    "visual_only_prob" = "0.15": "probability that a synthetic event is visual-only",

    "num_heads" = "4": "attention heads in the parser",
    "lambda_g" = "0.6": "weight of the guided loss",
    "lambda_ad" = "0.4": "gradient reversal weight of the adversarial loss",
    "decision_threshold" = "0.5": "probability threshold for snippet decisions",
    "smoothing_eps" = "0.1": "label smoothing of the guided loss targets",
    "skip" = "true": "skip connections around cross-modal attention",
    "adv" = "true": "adversarial modality discriminator",
    "gcaa" = "true": "global context-aware attention",
    "global_from_query" = "true": "take the global context from the query sequence",

    "optimizer" = "adam": "update rule: sgd or adam",
    "lr" = "3e-4": "base learning rate",
    "decay_factor" = "0.5": "learning-rate decay factor",
    "decay_every" = "5": "epochs between learning-rate decays",
    "epochs" = "40": "training epochs",
    "batch_size" = "64": "videos per training batch",

    "variant" = "multi": "grounding objective: uni, cross or multi",
    "pretrain_layers" = "2": "transformer layers in the grounding encoder",
    "pretrain_model_dim" = "256": "width of the grounding encoder",
    "pretrain_heads" = "4": "attention heads in the grounding encoder",
    "pretrain_ff_dim" = "512": "feed-forward width of the grounding encoder",
    "pairs_per_anchor" = "4": "positive and negative pairs sampled per anchor snippet",
    "pretrain_steps" = "200": "pretraining steps",
    "pretrain_batch_size" = "16": "videos per pretraining step",
    "pretrain_lr" = "1e-3": "pretraining learning rate",
    "margin_pos" = "0.9": "positive-pair similarity margin",
    "margin_neg" = "0.1": "negative-pair similarity margin",
    "v_threshold" = "0.8": "visual similarity threshold for grounding edges",
    "a_threshold" = "0.8": "audio similarity threshold for grounding edges",
    "export_mode" = "substitute": "exported features: substitute or concat",

    "iou_threshold" = "0.5": "temporal IoU required for an event match",

    "gradcheck_seeds" = "10": "seeds per gradient-check suite",
    "gradcheck_picks" = "60": "sampled entries per gradient check on large models",
    "inject_fault" = "none": "corrupt one op's backward rule (test hook)",
}

pub fn lookup(name: &str) -> Option<&'static Key> {
    let norm = name.replace('-', "_");
    KEYS.iter().find(|k| k.name == norm)
}

/// Resolved configuration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS
                .iter()
                .map(|k| (k.name.to_string(), k.default.to_string()))
                .collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let k = lookup(key).ok_or_else(|| CliError::config(format!("unknown config key `{key}`")))?;
        self.values.insert(k.name.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Applies a `key=value` file; `#` starts a comment line.
    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CliError::config(format!("{}:{}: expected key=value", path.display(), i + 1))
            })?;
            self.set(k.trim(), v)
                .map_err(|e| CliError::config(format!("{}:{}: {}", path.display(), i + 1, e.message)))?;
        }
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .unwrap_or_else(|| panic!("config key `{key}` is not registered"))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::config(format!("invalid value `{raw}` for {key}: {e}")))
    }

    pub fn usize(&self, key: &str) -> Result<usize, CliError> {
        self.parse(key)
    }

    pub fn u64(&self, key: &str) -> Result<u64, CliError> {
        self.parse(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64, CliError> {
        let v: f64 = self.parse(key)?;
        if !v.is_finite() {
            return Err(CliError::config(format!("{key} must be finite")));
        }
        Ok(v)
    }

    pub fn bool(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(CliError::config(format!("invalid boolean `{other}` for {key}"))),
        }
    }

    /// A non-empty path value.
    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        match self.raw(key) {
            "" => Err(CliError::config(format!("missing required --{}", key.replace('_', "-")))),
            p => Ok(PathBuf::from(p)),
        }
    }

    /// Sorted `key=value` lines.
    pub fn render(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, dir: &Path, name: &str) -> Result<(), CliError> {
        let path = dir.join(name);
        std::fs::write(&path, self.render()).map_err(|e| CliError::io(&path, e))
    }
}
