//! Whole-model assembly: owns the parameter store and wires encoder,
//! attention, and classifier according to a [`TrainConfig`].

use crate::attention::{forward_attention, AttentionParams, AttentionResult};
use crate::classifier::{classify, AnswerDistribution, ClassifierParams};
use crate::config::TrainConfig;
use crate::dataset::QuestionRecord;
use crate::encoder::{
    build_question_vocab, encode_question, LstmParams, QuestionVocab, TokenSequence,
    EMBEDDING_PARAM,
};
use crate::error::{Error, Result};
use crate::evaluator::{build_answer_vocab, AnswerVocabulary};
use crate::features::{augment_positions, normalize_depth, spatial_mean, FeatureMap, FeatureSet};
use crate::rng::SeedStream;
use crate::tensor::graph::{Graph, Var};
use crate::tensor::store::ParamStore;
use crate::tensor::Real;

/// A model instance: vocabularies, layer shapes, and the live parameters.
/// Vocabularies are rebuilt deterministically from the training records, so
/// only the store needs to round-trip through checkpoints.
#[derive(Clone)]
pub struct Model<T: Real> {
    pub config: TrainConfig,
    pub question_vocab: QuestionVocab<T>,
    pub answer_vocab: AnswerVocabulary,
    pub raw_feature_depth: usize,
    pub lstm: LstmParams,
    pub attention: Option<AttentionParams>,
    pub classifier: ClassifierParams,
    pub store: ParamStore<T>,
}

/// One forward pass: question summary, attention artifacts (absent for the
/// mean-pool ablation), and the answer distribution.
pub struct ModelOutput {
    pub s: Var,
    pub attention: Option<AttentionResult>,
    pub dist: AnswerDistribution,
}

impl<T: Real> Model<T> {
    pub fn build(
        config: TrainConfig,
        train_records: &[QuestionRecord],
        raw_feature_depth: usize,
    ) -> Result<Self> {
        config.validate()?;
        if raw_feature_depth == 0 {
            return Err(Error::InvalidArgument(
                "feature depth must be positive".into(),
            ));
        }
        let question_vocab = build_question_vocab(train_records, config.embedding_d, config.seed)?;
        let answer_vocab = build_answer_vocab(train_records, config.m)?;
        let lstm = LstmParams::new(
            config.embedding_d,
            config.lstm_state,
            config.lstm_layers,
            config.bidirectional,
        )?;
        let state_size = lstm.output_size();
        let depth = raw_feature_depth + if config.positional_features { 2 } else { 0 };
        let attention = if config.attention_enabled {
            Some(AttentionParams::new(
                depth,
                state_size,
                config.attention_hidden,
                config.glimpse_count,
            )?)
        } else {
            None
        };
        let classifier_input = match &attention {
            Some(a) => a.glimpses * depth + state_size,
            None => depth + state_size,
        };
        let classifier = ClassifierParams::new(
            classifier_input,
            config.classifier_sizes.clone(),
            answer_vocab.len(),
        )?;

        let mut store = ParamStore::new();
        store.insert(EMBEDDING_PARAM, question_vocab.embedding.clone())?;
        lstm.register(&mut store, config.seed)?;
        if let Some(a) = &attention {
            a.register(&mut store, config.seed)?;
        }
        classifier.register(&mut store, config.seed)?;

        Ok(Self {
            config,
            question_vocab,
            answer_vocab,
            raw_feature_depth,
            lstm,
            attention,
            classifier,
            store,
        })
    }

    /// Feature depth after optional positional augmentation.
    pub fn model_feature_depth(&self) -> usize {
        self.raw_feature_depth
            + if self.config.positional_features {
                2
            } else {
                0
            }
    }

    /// Width of the question summary `s` (doubled when bidirectional).
    pub fn state_size(&self) -> usize {
        self.lstm.output_size()
    }

    pub fn param_count(&self) -> usize {
        self.store.total_elements()
    }

    /// L2 depth normalization then positional augmentation, per config.
    /// Feeding an already-normalized map back in is an error.
    pub fn preprocess(&self, fm: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        if fm.depth() != self.raw_feature_depth {
            return Err(Error::InvalidShape(format!(
                "feature map {} has depth {}, model expects {}",
                fm.image_id(),
                fm.depth(),
                self.raw_feature_depth
            )));
        }
        let fm = if self.config.l2_norm {
            normalize_depth(fm)?
        } else {
            fm.clone()
        };
        Ok(if self.config.positional_features {
            augment_positions(&fm)
        } else {
            fm
        })
    }

    /// Preprocess every map in a raw feature set.
    pub fn preprocess_set(&self, raw: &FeatureSet<T>) -> Result<FeatureSet<T>> {
        raw.iter()
            .map(|(&id, fm)| Ok((id, self.preprocess(fm)?)))
            .collect()
    }

    pub fn tokenize_question(&self, text: &str) -> Result<TokenSequence> {
        TokenSequence::from_text(text, &self.question_vocab)
    }

    /// Ids of the in-vocabulary answers, duplicates preserved.
    pub fn answer_ids(&self, record: &QuestionRecord) -> Vec<usize> {
        self.answer_vocab.answer_ids(&record.answers)
    }

    /// Forward pass over one preprocessed feature map.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        seq: &TokenSequence,
        features: &FeatureMap<T>,
        training: bool,
        seeds: &mut SeedStream,
    ) -> Result<ModelOutput> {
        if features.depth() != self.model_feature_depth() {
            return Err(Error::InvalidShape(format!(
                "feature map {} has depth {}, model expects {} after preprocessing",
                features.image_id(),
                features.depth(),
                self.model_feature_depth()
            )));
        }
        let lstm_rate = if self.config.dropout_lstm {
            self.config.dropout_rate
        } else {
            0.0
        };
        let fc_rate = if self.config.dropout_fc_conv {
            self.config.dropout_rate
        } else {
            0.0
        };

        let enc = encode_question(g, &self.store, seq, &self.lstm, lstm_rate, training, seeds)?;
        let (x, attention) = match &self.attention {
            Some(params) => {
                let locations = g.input(&features.location_matrix());
                let result = forward_attention(
                    g,
                    &self.store,
                    enc.s,
                    locations,
                    params,
                    fc_rate,
                    training,
                    seeds,
                )?;
                (result.x, Some(result))
            }
            None => (g.input(&spatial_mean(features)), None),
        };
        let dist = classify(
            g,
            &self.store,
            x,
            enc.s,
            &self.classifier,
            fc_rate,
            training,
            seeds,
        )?;
        Ok(ModelOutput {
            s: enc.s,
            attention,
            dist,
        })
    }
}
