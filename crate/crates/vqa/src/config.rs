//! Training configuration: the default recipe plus every ablation knob,
//! serialized as `key = value` lines.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Full training/model recipe. Defaults are the reference configuration;
/// every field doubles as an ablation knob.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub l0: f64,
    pub decay_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub dropout_rate: f64,
    pub seed: u64,
    pub milestone_steps: Vec<u64>,
    /// Divides every milestone for toy runs while keeping the column layout.
    pub milestone_divisor: u64,
    /// Optional global gradient-norm clip; off by default.
    pub grad_clip: Option<f64>,
    pub l2_norm: bool,
    pub dropout_fc_conv: bool,
    pub dropout_lstm: bool,
    pub attention_enabled: bool,
    pub sampled_loss: bool,
    pub positional_features: bool,
    pub bidirectional: bool,
    pub embedding_d: usize,
    pub lstm_state: usize,
    pub lstm_layers: usize,
    pub attention_hidden: usize,
    pub glimpse_count: usize,
    /// Hidden widths before the output layer; empty = linear classifier.
    pub classifier_sizes: Vec<usize>,
    pub m: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            total_steps: 100_000,
            l0: 0.001,
            decay_steps: 50_000,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            dropout_rate: 0.5,
            seed: 0,
            milestone_steps: vec![
                1_000, 3_000, 6_000, 12_000, 25_000, 50_000, 100_000, 200_000,
            ],
            milestone_divisor: 1,
            grad_clip: None,
            l2_norm: true,
            dropout_fc_conv: true,
            dropout_lstm: true,
            attention_enabled: true,
            sampled_loss: false,
            positional_features: false,
            bidirectional: false,
            embedding_d: 300,
            lstm_state: 1024,
            lstm_layers: 1,
            attention_hidden: 512,
            glimpse_count: 2,
            classifier_sizes: vec![1024],
            m: 3000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("embedding_d", self.embedding_d),
            ("lstm_state", self.lstm_state),
            ("lstm_layers", self.lstm_layers),
            ("attention_hidden", self.attention_hidden),
            ("glimpse_count", self.glimpse_count),
            ("m", self.m),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.decay_steps == 0 {
            return Err(Error::Config("decay_steps must be positive".into()));
        }
        if self.milestone_divisor == 0 {
            return Err(Error::Config("milestone_divisor must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        if self.l0 <= 0.0 {
            return Err(Error::Config("l0 must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.adam_epsilon <= 0.0 {
            return Err(Error::Config("adam_epsilon must be positive".into()));
        }
        if self.classifier_sizes.contains(&0) {
            return Err(Error::Config(
                "classifier_sizes entries must be positive".into(),
            ));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::Config("grad_clip must be positive when set".into()));
            }
        }
        Ok(())
    }

    /// Milestones scaled by the divisor, floored at 1, deduplicated.
    pub fn effective_milestones(&self) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::new();
        for &m in &self.milestone_steps {
            let scaled = (m / self.milestone_divisor).max(1);
            if out.last() != Some(&scaled) {
                out.push(scaled);
            }
        }
        out
    }

    pub fn serialize(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "l0 = {}", self.l0);
        let _ = writeln!(s, "decay_steps = {}", self.decay_steps);
        let _ = writeln!(s, "beta1 = {}", self.beta1);
        let _ = writeln!(s, "beta2 = {}", self.beta2);
        let _ = writeln!(s, "adam_epsilon = {}", self.adam_epsilon);
        let _ = writeln!(s, "dropout_rate = {}", self.dropout_rate);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "milestone_steps = {}", join(&self.milestone_steps));
        let _ = writeln!(s, "milestone_divisor = {}", self.milestone_divisor);
        let _ = writeln!(
            s,
            "grad_clip = {}",
            self.grad_clip
                .map_or_else(|| "none".to_string(), |c| c.to_string())
        );
        let _ = writeln!(s, "l2_norm = {}", self.l2_norm);
        let _ = writeln!(s, "dropout_fc_conv = {}", self.dropout_fc_conv);
        let _ = writeln!(s, "dropout_lstm = {}", self.dropout_lstm);
        let _ = writeln!(s, "attention_enabled = {}", self.attention_enabled);
        let _ = writeln!(s, "sampled_loss = {}", self.sampled_loss);
        let _ = writeln!(s, "positional_features = {}", self.positional_features);
        let _ = writeln!(s, "bidirectional = {}", self.bidirectional);
        let _ = writeln!(s, "embedding_d = {}", self.embedding_d);
        let _ = writeln!(s, "lstm_state = {}", self.lstm_state);
        let _ = writeln!(s, "lstm_layers = {}", self.lstm_layers);
        let _ = writeln!(s, "attention_hidden = {}", self.attention_hidden);
        let _ = writeln!(s, "glimpse_count = {}", self.glimpse_count);
        let _ = writeln!(s, "classifier_sizes = {}", join(&self.classifier_sizes));
        let _ = writeln!(s, "m = {}", self.m);
        s
    }

    /// Parse `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are allowed; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {}: expected `key = value`, got {line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "total_steps" => self.total_steps = parse_num(key, value)?,
            "l0" => self.l0 = parse_num(key, value)?,
            "decay_steps" => self.decay_steps = parse_num(key, value)?,
            "beta1" => self.beta1 = parse_num(key, value)?,
            "beta2" => self.beta2 = parse_num(key, value)?,
            "adam_epsilon" => self.adam_epsilon = parse_num(key, value)?,
            "dropout_rate" => self.dropout_rate = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "milestone_steps" => self.milestone_steps = parse_list(key, value)?,
            "milestone_divisor" => self.milestone_divisor = parse_num(key, value)?,
            "grad_clip" => {
                self.grad_clip = match value {
                    "none" | "" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "l2_norm" => self.l2_norm = parse_bool(key, value)?,
            "dropout_fc_conv" => self.dropout_fc_conv = parse_bool(key, value)?,
            "dropout_lstm" => self.dropout_lstm = parse_bool(key, value)?,
            "attention_enabled" => self.attention_enabled = parse_bool(key, value)?,
            "sampled_loss" => self.sampled_loss = parse_bool(key, value)?,
            "positional_features" => self.positional_features = parse_bool(key, value)?,
            "bidirectional" => self.bidirectional = parse_bool(key, value)?,
            "embedding_d" => self.embedding_d = parse_num(key, value)?,
            "lstm_state" => self.lstm_state = parse_num(key, value)?,
            "lstm_layers" => self.lstm_layers = parse_num(key, value)?,
            "attention_hidden" => self.attention_hidden = parse_num(key, value)?,
            "glimpse_count" => self.glimpse_count = parse_num(key, value)?,
            "classifier_sizes" => self.classifier_sizes = parse_list(key, value)?,
            "m" => self.m = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.serialize())?)
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "invalid value {value:?} for {key}, want true/false"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v.trim())).collect()
}
