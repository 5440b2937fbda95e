//! The model-mutation sweep: every ablation row as a named, constructible
//! configuration, a runner that trains each one, and the milestone table.

use std::fmt::Write as _;

use crate::config::TrainConfig;
use crate::dataset::QuestionRecord;
use crate::error::{Error, Result};
use crate::features::{self, FeatureSet};
use crate::model::Model;
use crate::tensor::Real;
use crate::trainer::{self, AdamState};

/// One sweep row. Size rows are expressed as ratios to the reference recipe,
/// so applying them to the default configuration reproduces the canonical
/// sizes while a scaled-down base yields the same mutation at toy scale. The
/// rows marked "(default)" in the source table repeat the baseline under
/// their section; they apply as identity mutations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Default,
    NoL2Norm,
    NoDropoutFcConv,
    NoDropoutLstm,
    NoAttention,
    SampledLoss,
    PositionalFeatures,
    BidirectionalLstm,
    Embedding100,
    Embedding300,
    Embedding500,
    Lstm512,
    Lstm1024,
    Lstm2048,
    Lstm1024x2,
    Attention512x1,
    Attention512x2,
    Attention512x3,
    Attention1024x1,
    Attention1024x2,
    Classifier3000,
    Classifier1024_3000,
    Classifier2048_3000,
    Classifier1024_1024_3000,
}

impl Variant {
    pub const ALL: [Variant; 24] = [
        Variant::Default,
        Variant::NoL2Norm,
        Variant::NoDropoutFcConv,
        Variant::NoDropoutLstm,
        Variant::NoAttention,
        Variant::SampledLoss,
        Variant::PositionalFeatures,
        Variant::BidirectionalLstm,
        Variant::Embedding100,
        Variant::Embedding300,
        Variant::Embedding500,
        Variant::Lstm512,
        Variant::Lstm1024,
        Variant::Lstm2048,
        Variant::Lstm1024x2,
        Variant::Attention512x1,
        Variant::Attention512x2,
        Variant::Attention512x3,
        Variant::Attention1024x1,
        Variant::Attention1024x2,
        Variant::Classifier3000,
        Variant::Classifier1024_3000,
        Variant::Classifier2048_3000,
        Variant::Classifier1024_1024_3000,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Default => "default",
            Variant::NoL2Norm => "no-l2-norm",
            Variant::NoDropoutFcConv => "no-dropout-fc-conv",
            Variant::NoDropoutLstm => "no-dropout-lstm",
            Variant::NoAttention => "no-attention",
            Variant::SampledLoss => "sampled-loss",
            Variant::PositionalFeatures => "positional-features",
            Variant::BidirectionalLstm => "bidirectional-lstm",
            Variant::Embedding100 => "embedding-100",
            Variant::Embedding300 => "embedding-300",
            Variant::Embedding500 => "embedding-500",
            Variant::Lstm512 => "lstm-512",
            Variant::Lstm1024 => "lstm-1024",
            Variant::Lstm2048 => "lstm-2048",
            Variant::Lstm1024x2 => "lstm-1024-1024",
            Variant::Attention512x1 => "attention-512-1",
            Variant::Attention512x2 => "attention-512-2",
            Variant::Attention512x3 => "attention-512-3",
            Variant::Attention1024x1 => "attention-1024-1",
            Variant::Attention1024x2 => "attention-1024-2",
            Variant::Classifier3000 => "classifier-3000",
            Variant::Classifier1024_3000 => "classifier-1024-3000",
            Variant::Classifier2048_3000 => "classifier-2048-3000",
            Variant::Classifier1024_1024_3000 => "classifier-1024-1024-3000",
        }
    }

    pub fn parse(name: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == name)
    }

    /// The mutated configuration. Architectural flags toggle; sizes rescale
    /// the base by the row's ratio to the reference recipe (300/1024/512-wide
    /// hidden), rounded half up with a floor of 1.
    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        // Width the classifier rows rescale; a linear base falls back to the
        // LSTM state so the deeper/wider rows stay constructible.
        let cls = base
            .classifier_sizes
            .first()
            .copied()
            .unwrap_or(base.lstm_state);
        match self {
            Variant::Default
            | Variant::Embedding300
            | Variant::Lstm1024
            | Variant::Attention512x2
            | Variant::Classifier1024_3000 => {}
            Variant::NoL2Norm => cfg.l2_norm = false,
            Variant::NoDropoutFcConv => cfg.dropout_fc_conv = false,
            Variant::NoDropoutLstm => cfg.dropout_lstm = false,
            Variant::NoAttention => cfg.attention_enabled = false,
            Variant::SampledLoss => cfg.sampled_loss = true,
            Variant::PositionalFeatures => cfg.positional_features = true,
            Variant::BidirectionalLstm => cfg.bidirectional = true,
            Variant::Embedding100 => cfg.embedding_d = scaled(base.embedding_d, 1, 3),
            Variant::Embedding500 => cfg.embedding_d = scaled(base.embedding_d, 5, 3),
            Variant::Lstm512 => cfg.lstm_state = scaled(base.lstm_state, 1, 2),
            Variant::Lstm2048 => cfg.lstm_state = scaled(base.lstm_state, 2, 1),
            Variant::Lstm1024x2 => cfg.lstm_layers = 2,
            Variant::Attention512x1 => cfg.glimpse_count = 1,
            Variant::Attention512x3 => cfg.glimpse_count = 3,
            Variant::Attention1024x1 => {
                cfg.attention_hidden = scaled(base.attention_hidden, 2, 1);
                cfg.glimpse_count = 1;
            }
            Variant::Attention1024x2 => {
                cfg.attention_hidden = scaled(base.attention_hidden, 2, 1);
                cfg.glimpse_count = 2;
            }
            Variant::Classifier3000 => cfg.classifier_sizes = vec![],
            Variant::Classifier2048_3000 => cfg.classifier_sizes = vec![scaled(cls, 2, 1)],
            Variant::Classifier1024_1024_3000 => cfg.classifier_sizes = vec![cls, cls],
        }
        cfg
    }
}

fn scaled(base: usize, numer: usize, denom: usize) -> usize {
    ((base * numer + denom / 2) / denom).max(1)
}

/// A base recipe plus the rows to sweep over it.
#[derive(Debug, Clone)]
pub struct AblationSuite {
    pub base: TrainConfig,
    pub variants: Vec<Variant>,
}

impl AblationSuite {
    /// All 24 rows.
    pub fn full(base: TrainConfig) -> Self {
        Self {
            base,
            variants: Variant::ALL.to_vec(),
        }
    }

    /// A subset selected by name; unknown names are configuration errors.
    pub fn from_names(base: TrainConfig, names: &[String]) -> Result<Self> {
        let variants = names
            .iter()
            .map(|n| {
                Variant::parse(n).ok_or_else(|| {
                    Error::Config(format!(
                        "unknown ablation variant {n:?}; valid names: {}",
                        Variant::ALL.map(Variant::name).join(", ")
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self { base, variants }.validated()
    }

    fn validated(self) -> Result<Self> {
        for (name, cfg) in self.configs() {
            cfg.validate()
                .map_err(|e| Error::Config(format!("variant {name}: {e}")))?;
        }
        Ok(self)
    }

    pub fn configs(&self) -> Vec<(&'static str, TrainConfig)> {
        self.variants
            .iter()
            .map(|v| (v.name(), v.apply(&self.base)))
            .collect()
    }
}

/// One trained row: milestone accuracies in column order, or the error that
/// stopped it.
#[derive(Debug, Clone)]
pub struct MilestoneRow {
    pub name: &'static str,
    pub accuracies: Vec<Option<f64>>,
    pub error: Option<String>,
}

/// Accuracy-by-milestone for every row of a sweep. Cells stay empty for
/// milestones past `total_steps` (the table keeps its column layout even when
/// a run stops earlier) and for rows that failed.
#[derive(Debug, Clone)]
pub struct MilestoneTable {
    pub milestones: Vec<u64>,
    pub rows: Vec<MilestoneRow>,
}

impl MilestoneTable {
    /// CSV in the table's shape: one row per variant, one column per
    /// milestone, accuracies as percentages.
    pub fn csv(&self) -> String {
        let mut out = String::from("variant");
        for m in &self.milestones {
            write!(out, ",{m}").expect("string write");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(row.name);
            for acc in &row.accuracies {
                match acc {
                    Some(a) => write!(out, ",{:.2}", a * 100.0).expect("string write"),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Messages from rows that failed, prefixed with the row name.
    pub fn failures(&self) -> Vec<String> {
        self.rows
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| format!("{}: {e}", r.name)))
            .collect()
    }
}

/// Train every row of the suite and collect its milestone accuracies. A row
/// that fails is recorded with its error and the sweep continues; only an
/// unusable feature set aborts the whole run.
pub fn run_suite<T: Real>(
    suite: &AblationSuite,
    train_records: &[QuestionRecord],
    eval_records: &[QuestionRecord],
    raw_features: &FeatureSet<T>,
) -> Result<MilestoneTable> {
    let raw_depth = features::feature_depth(raw_features)?;
    let milestones = suite.base.effective_milestones();
    let mut rows = Vec::with_capacity(suite.variants.len());
    for (name, cfg) in suite.configs() {
        let row = run_variant(&cfg, train_records, eval_records, raw_features, raw_depth).map(
            |by_step| {
                milestones
                    .iter()
                    .map(|m| by_step.get(m).copied().flatten())
                    .collect()
            },
        );
        rows.push(match row {
            Ok(accuracies) => MilestoneRow {
                name,
                accuracies,
                error: None,
            },
            Err(e) => MilestoneRow {
                name,
                accuracies: vec![None; milestones.len()],
                error: Some(e.to_string()),
            },
        });
    }
    Ok(MilestoneTable { milestones, rows })
}

fn run_variant<T: Real>(
    cfg: &TrainConfig,
    train_records: &[QuestionRecord],
    eval_records: &[QuestionRecord],
    raw_features: &FeatureSet<T>,
    raw_depth: usize,
) -> Result<std::collections::BTreeMap<u64, Option<f64>>> {
    let mut model = Model::<T>::build(cfg.clone(), train_records, raw_depth)?;
    let features = model.preprocess_set(raw_features)?;
    let mut adam = AdamState::new();
    let rows = trainer::train(
        &mut model,
        &mut adam,
        train_records,
        eval_records,
        &features,
        0,
        None,
    )?;
    Ok(rows
        .into_iter()
        .filter(|r| r.eval_accuracy.is_some())
        .map(|r| (r.step, r.eval_accuracy))
        .collect())
}
