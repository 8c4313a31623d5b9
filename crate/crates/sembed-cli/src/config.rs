//! Flat `key = value` run configuration with flag overrides.
//!
//! Every knob is a scalar or a path, so the file format is one assignment
//! per line with `#` comments. Unknown keys are rejected. Command-line flags
//! loaded after the file win over file values, and the effective
//! configuration is echoed into each run's log header.

use sembed::model::{EncoderInputMode, ModelConfig};
use sembed::noise::{DiscreteStrategy, NoiseConfig};
use sembed::train::TrainConfig;
use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    /// Validation / usage problems; exit code 2, all reported at once.
    Usage(Vec<String>),
    /// Runtime or I/O failure; exit code 1.
    Runtime(String),
}

impl From<sembed::Error> for CliError {
    fn from(e: sembed::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// The union of model, noise, and training knobs plus file paths, tracked as
/// an ordered key -> value map so the effective config can be echoed and
/// diffed deterministically.
#[derive(Debug, Clone)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

const KNOWN_KEYS: &[&str] = &[
    // paths
    "corpus",
    "vocab",
    "paraphrase_table",
    "synonyms",
    "sts_dev",
    "sts_test",
    "checkpoint",
    "metrics_log",
    "report",
    // model
    "d",
    "enc_layers",
    "dec_layers",
    "enc_heads",
    "dec_heads",
    "ffn_mult",
    "max_len",
    "internal_dropout",
    "encoder_input_mode",
    // noise
    "discrete_strategy",
    "dropout_rate",
    "rule_swap_prob",
    "rule_synonym_prob",
    // training
    "batch_size",
    "steps",
    "lr",
    "tau",
    "w_contrastive",
    "w_denoising",
    "seed",
    "eval_every",
    "weight_decay",
    "grad_clip",
    "warmup_steps",
    // vocabulary construction
    "min_count",
    "max_size",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self::new()
    }
}

impl RunConfig {
    pub fn new() -> Self {
        RunConfig { values: BTreeMap::new() }
    }

    /// Parse a config file; unknown keys are all reported together.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        let mut cfg = RunConfig::new();
        let mut problems = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            match line.split_once('=') {
                Some((k, v)) => {
                    let key = k.trim();
                    if !KNOWN_KEYS.contains(&key) {
                        problems.push(format!(
                            "{}:{}: unknown config key {key:?}",
                            path.display(),
                            i + 1
                        ));
                    } else {
                        cfg.values.insert(key.to_string(), v.trim().to_string());
                    }
                }
                None => problems.push(format!(
                    "{}:{}: expected key = value, got {line:?}",
                    path.display(),
                    i + 1
                )),
            }
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Usage(problems))
        }
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        debug_assert!(KNOWN_KEYS.contains(&key), "unknown key {key}");
        self.values.insert(key.to_string(), value.to_string());
    }

    pub fn set_opt<V: Display>(&mut self, key: &str, value: &Option<V>) {
        if let Some(v) = value {
            self.set(key, v);
        }
    }

    pub fn remove(&mut self, key: &str) {
        self.values.remove(key);
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).map(PathBuf::from)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, problems: &mut Vec<String>) -> Option<T> {
        match self.get(key) {
            None => None,
            Some(raw) => match raw.parse() {
                Ok(v) => Some(v),
                Err(_) => {
                    problems.push(format!("bad value for {key}: {raw:?}"));
                    None
                }
            },
        }
    }

    /// Model config from the map over desk-scale defaults.
    pub fn model_config(&self, vocab_size: usize, problems: &mut Vec<String>) -> ModelConfig {
        let mut cfg = ModelConfig::desk_default(vocab_size);
        if let Some(v) = self.parse("d", problems) {
            cfg.d = v;
        }
        if let Some(v) = self.parse("enc_layers", problems) {
            cfg.enc_layers = v;
        }
        if let Some(v) = self.parse("dec_layers", problems) {
            cfg.dec_layers = v;
        }
        if let Some(v) = self.parse("enc_heads", problems) {
            cfg.enc_heads = v;
        }
        if let Some(v) = self.parse("dec_heads", problems) {
            cfg.dec_heads = v;
        }
        if let Some(v) = self.parse("ffn_mult", problems) {
            cfg.ffn_mult = v;
        }
        if let Some(v) = self.parse("max_len", problems) {
            cfg.max_len = v;
        }
        if let Some(v) = self.parse("internal_dropout", problems) {
            cfg.internal_dropout = v;
        }
        if let Some(raw) = self.get("encoder_input_mode") {
            match EncoderInputMode::parse(raw) {
                Ok(m) => cfg.encoder_input_mode = m,
                Err(e) => problems.push(e.to_string()),
            }
        }
        if let Err(e) = cfg.validate() {
            problems.push(e.to_string());
        }
        cfg
    }

    pub fn noise_config(&self, problems: &mut Vec<String>) -> NoiseConfig {
        let mut cfg = NoiseConfig::default();
        if let Some(raw) = self.get("discrete_strategy") {
            match DiscreteStrategy::parse(raw) {
                Ok(s) => cfg.discrete_strategy = s,
                Err(e) => problems.push(e.to_string()),
            }
        }
        if let Some(v) = self.parse("dropout_rate", problems) {
            cfg.continuous_rate = v;
        }
        if let Some(v) = self.parse("rule_swap_prob", problems) {
            cfg.rule_swap_prob = v;
        }
        if let Some(v) = self.parse("rule_synonym_prob", problems) {
            cfg.rule_synonym_prob = v;
        }
        if let Err(e) = cfg.validate() {
            problems.push(e.to_string());
        }
        cfg
    }

    pub fn train_config(&self, problems: &mut Vec<String>) -> TrainConfig {
        let mut cfg = TrainConfig::default();
        if let Some(v) = self.parse("batch_size", problems) {
            cfg.batch_size = v;
        }
        if let Some(v) = self.parse("steps", problems) {
            cfg.steps = v;
        }
        if let Some(v) = self.parse("lr", problems) {
            cfg.lr = v;
        }
        if let Some(v) = self.parse("tau", problems) {
            cfg.tau = v;
        }
        if let Some(v) = self.parse("dropout_rate", problems) {
            cfg.dropout_rate = v;
        }
        if let Some(v) = self.parse("w_contrastive", problems) {
            cfg.w_contrastive = v;
        }
        if let Some(v) = self.parse("w_denoising", problems) {
            cfg.w_denoising = v;
        }
        if let Some(v) = self.parse("seed", problems) {
            cfg.seed = v;
        }
        if let Some(v) = self.parse("eval_every", problems) {
            cfg.eval_every = v;
        }
        if let Some(v) = self.parse("weight_decay", problems) {
            cfg.weight_decay = v;
        }
        if let Some(v) = self.parse::<f64>("grad_clip", problems) {
            cfg.grad_clip = if v == 0.0 { None } else { Some(v) };
        }
        if let Some(v) = self.parse("warmup_steps", problems) {
            cfg.warmup_steps = v;
        }
        cfg.checkpoint_path = self.path("checkpoint");
        problems.extend(cfg.problems());
        cfg
    }

    /// `# key = value` lines for the run's log header, sorted by key.
    pub fn echo_header(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        out
    }

    pub fn require_input_paths(&self, keys: &[&str], problems: &mut Vec<String>) {
        for key in keys {
            match self.path(key) {
                None => problems.push(format!("missing required path: {key}")),
                Some(p) => {
                    if !p.exists() {
                        problems.push(format!("{key} path does not exist: {}", p.display()));
                    }
                }
            }
        }
    }
}
