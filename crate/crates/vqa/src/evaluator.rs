//! Answer vocabulary, consensus accuracy, and evaluation reports.
//!
//! Accuracy bookkeeping is integer-exact: each record contributes
//! `30·score = Σ_k min(count_k, 3)` (an integer in 0..=30), so aggregation is
//! independent of record order and parallel scheduling.

use std::collections::HashMap;

use serde::Serialize;

use crate::dataset::{AnswerType, QuestionRecord, ANSWERS_PER_QUESTION};
use crate::error::{Error, Result};

/// Lowercase, trim, and collapse internal whitespace. Nothing else: no
/// numeral/word unification, no punctuation rules.
pub fn normalize_answer(s: &str) -> String {
    s.to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// The M most frequent training answers, most frequent first, frequency ties
/// broken lexicographically.
#[derive(Debug, Clone)]
pub struct AnswerVocabulary {
    answers: Vec<String>,
    index: HashMap<String, usize>,
    coverage: Option<f64>,
}

impl AnswerVocabulary {
    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answer(&self, id: usize) -> Option<&str> {
        self.answers.get(id).map(String::as_str)
    }

    /// Index of a normalized answer string.
    pub fn id_of(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    /// In-vocabulary ids for a record's answers; out-of-vocabulary answers
    /// are dropped (they never contribute to the loss).
    pub fn answer_ids(&self, answers: &[String]) -> Vec<usize> {
        answers
            .iter()
            .filter_map(|a| self.id_of(&normalize_answer(a)))
            .collect()
    }

    /// Fraction of `val` answers covered by the vocabulary.
    pub fn coverage_against(&self, val: &[QuestionRecord]) -> f64 {
        let mut total = 0usize;
        let mut hit = 0usize;
        for record in val {
            for answer in &record.answers {
                total += 1;
                if self.index.contains_key(&normalize_answer(answer)) {
                    hit += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            hit as f64 / total as f64
        }
    }

    pub fn with_coverage(mut self, val: &[QuestionRecord]) -> Self {
        self.coverage = Some(self.coverage_against(val));
        self
    }

    pub fn coverage(&self) -> Option<f64> {
        self.coverage
    }
}

/// Count every (normalized) answer over all training records and keep the
/// top `m`.
pub fn build_answer_vocab(train: &[QuestionRecord], m: usize) -> Result<AnswerVocabulary> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "answer vocabulary size must be positive".into(),
        ));
    }
    let mut counts: HashMap<String, u64> = HashMap::new();
    for record in train {
        for answer in &record.answers {
            *counts.entry(normalize_answer(answer)).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::Config(
            "no training answers to build a vocabulary from".into(),
        ));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(m);
    let answers: Vec<String> = ranked.into_iter().map(|(a, _)| a).collect();
    let index = answers
        .iter()
        .enumerate()
        .map(|(i, a)| (a.clone(), i))
        .collect();
    Ok(AnswerVocabulary {
        answers,
        index,
        coverage: None,
    })
}

/// Thirty times the consensus score: `Σ_k min(count_k, 3)` over the ten
/// leave-one-out subsets, where `count_k` is the number of matches among the
/// other nine answers. Exact integer in 0..=30.
pub fn vqa_accuracy_thirtieths(predicted: &str, gt: &[String]) -> Result<u32> {
    if gt.len() != ANSWERS_PER_QUESTION {
        return Err(Error::InvalidRecord(format!(
            "ground truth must hold {ANSWERS_PER_QUESTION} answers, got {}",
            gt.len()
        )));
    }
    let matches = gt.iter().filter(|a| a.as_str() == predicted).count() as u32;
    let mut total = 0u32;
    for held_out in gt {
        let count = if held_out == predicted {
            matches - 1
        } else {
            matches
        };
        total += count.min(3);
    }
    Ok(total)
}

/// Consensus accuracy in [0,1]: average over all leave-one-out subsets of
/// `min(matches/3, 1)`. Inputs must be pre-normalized.
pub fn vqa_accuracy(predicted: &str, gt: &[String]) -> Result<f64> {
    Ok(vqa_accuracy_thirtieths(predicted, gt)? as f64 / 30.0)
}

/// Answer type for reporting: the record's own label when present, otherwise
/// inferred from the consensus answer ("yes"/"no" → yes/no, all digits →
/// number, else other).
pub fn answer_type_of(record: &QuestionRecord) -> AnswerType {
    if let Some(t) = record.answer_type {
        return t;
    }
    let mut counts: HashMap<String, (usize, String)> = HashMap::new();
    for answer in &record.answers {
        let norm = normalize_answer(answer);
        let entry = counts.entry(norm.clone()).or_insert((0, norm));
        entry.0 += 1;
    }
    let mode = counts
        .into_values()
        .max_by(|a, b| a.0.cmp(&b.0).then_with(|| b.1.cmp(&a.1)))
        .map(|(_, s)| s)
        .unwrap_or_default();
    if mode == "yes" || mode == "no" {
        AnswerType::YesNo
    } else if !mode.is_empty() && mode.chars().all(|c| c.is_ascii_digit()) {
        AnswerType::Number
    } else {
        AnswerType::Other
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct TypeAccuracy {
    pub examples: usize,
    pub accuracy: f64,
}

/// Accuracy report broken down by answer type.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub overall: f64,
    pub yes_no: TypeAccuracy,
    pub number: TypeAccuracy,
    pub other: TypeAccuracy,
    pub examples: usize,
    pub skipped: usize,
    /// Matching convention applied to all answer strings.
    pub normalization: String,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

impl EvalReport {
    /// Human-readable table, Table-2 layout, percentages with 2 decimals.
    pub fn table(&self) -> String {
        let pct = |a: f64| format!("{:.2}", a * 100.0);
        let mut out = String::new();
        out.push_str("  Y/N   |  Num   | Other  |  All\n");
        out.push_str(&format!(
            " {:>6} | {:>6} | {:>6} | {:>6}\n",
            pct(self.yes_no.accuracy),
            pct(self.number.accuracy),
            pct(self.other.accuracy),
            pct(self.overall)
        ));
        out.push_str(&format!(
            "examples: {} (yes/no {}, number {}, other {}), skipped: {}\n",
            self.examples,
            self.yes_no.examples,
            self.number.examples,
            self.other.examples,
            self.skipped
        ));
        out.push_str(&format!("normalization: {}\n", self.normalization));
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Integer accumulator for one answer type.
#[derive(Default, Clone, Copy)]
struct TypeTally {
    thirtieths: u64,
    count: usize,
}

impl TypeTally {
    fn accuracy(self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.thirtieths as f64 / (30.0 * self.count as f64)
        }
    }
}

/// Score of one record under a predictor. `Err` from the predictor marks the
/// record skipped rather than failing the run.
pub struct RecordScore {
    pub answer_type: AnswerType,
    pub thirtieths: u32,
}

/// Score `records` with an arbitrary predictor (a closure from record to
/// predicted answer string). Unlabelled records and predictor errors count as
/// skipped.
pub fn evaluate_with<F>(records: &[QuestionRecord], mut predict: F) -> Result<EvalReport>
where
    F: FnMut(&QuestionRecord) -> Result<String>,
{
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty record list".into(),
        ));
    }
    let mut scores: Vec<std::result::Result<RecordScore, String>> =
        Vec::with_capacity(records.len());
    for record in records {
        if !record.is_labelled() {
            scores.push(Err(format!(
                "question {} has no answers",
                record.question_id
            )));
            continue;
        }
        match predict(record) {
            Ok(prediction) => {
                let gt: Vec<String> = record.answers.iter().map(|a| normalize_answer(a)).collect();
                let thirtieths = vqa_accuracy_thirtieths(&normalize_answer(&prediction), &gt)?;
                scores.push(Ok(RecordScore {
                    answer_type: answer_type_of(record),
                    thirtieths,
                }));
            }
            Err(e) => scores.push(Err(format!("question {}: {e}", record.question_id))),
        }
    }
    Ok(aggregate_scores(scores))
}

/// Score every record against a trained model, dropout off, in parallel.
/// Missing features, untokenizable questions, and unlabelled records are
/// skipped with a collected message, never fatal.
pub fn evaluate<T: crate::tensor::Real>(
    model: &crate::model::Model<T>,
    records: &[QuestionRecord],
    features: &crate::features::FeatureSet<T>,
) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty record list".into(),
        ));
    }
    let scores = crate::par::map_indexed(records.len(), |i| {
        score_record(model, &records[i], features)
    });
    Ok(aggregate_scores(scores))
}

fn score_record<T: crate::tensor::Real>(
    model: &crate::model::Model<T>,
    record: &QuestionRecord,
    features: &crate::features::FeatureSet<T>,
) -> std::result::Result<RecordScore, String> {
    let qid = record.question_id;
    if !record.is_labelled() {
        return Err(format!("question {qid} has no answers"));
    }
    let prediction =
        predict_record(model, record, features).map_err(|e| format!("question {qid}: {e}"))?;
    let gt: Vec<String> = record.answers.iter().map(|a| normalize_answer(a)).collect();
    let thirtieths = vqa_accuracy_thirtieths(&normalize_answer(&prediction), &gt)
        .map_err(|e| format!("question {qid}: {e}"))?;
    Ok(RecordScore {
        answer_type: answer_type_of(record),
        thirtieths,
    })
}

/// One record's predicted answer string (dropout off).
pub fn predict_record<T: crate::tensor::Real>(
    model: &crate::model::Model<T>,
    record: &QuestionRecord,
    features: &crate::features::FeatureSet<T>,
) -> Result<String> {
    let fm = features.get(&record.image_id).ok_or_else(|| {
        Error::InvalidArgument(format!("no feature map for image {}", record.image_id))
    })?;
    let seq = model.tokenize_question(&record.text)?;
    let mut g = crate::tensor::graph::Graph::new();
    let mut seeds = crate::rng::SeedStream::new(model.config.seed, &[crate::rng::tag::DROPOUT]);
    let out = model.forward(&mut g, &seq, fm, false, &mut seeds)?;
    crate::classifier::predict(&g, &out.dist, &model.answer_vocab)
}

/// Fold per-record scores into a report. Order-insensitive by construction.
pub fn aggregate_scores(scores: Vec<std::result::Result<RecordScore, String>>) -> EvalReport {
    let mut yes_no = TypeTally::default();
    let mut number = TypeTally::default();
    let mut other = TypeTally::default();
    let mut skipped = 0usize;
    let mut errors = Vec::new();
    for score in scores {
        match score {
            Ok(s) => {
                let tally = match s.answer_type {
                    AnswerType::YesNo => &mut yes_no,
                    AnswerType::Number => &mut number,
                    AnswerType::Other => &mut other,
                };
                tally.thirtieths += s.thirtieths as u64;
                tally.count += 1;
            }
            Err(e) => {
                skipped += 1;
                errors.push(e);
            }
        }
    }
    let examples = yes_no.count + number.count + other.count;
    let total_thirtieths = yes_no.thirtieths + number.thirtieths + other.thirtieths;
    let overall = if examples == 0 {
        0.0
    } else {
        total_thirtieths as f64 / (30.0 * examples as f64)
    };
    EvalReport {
        overall,
        yes_no: TypeAccuracy {
            examples: yes_no.count,
            accuracy: yes_no.accuracy(),
        },
        number: TypeAccuracy {
            examples: number.count,
            accuracy: number.accuracy(),
        },
        other: TypeAccuracy {
            examples: other.count,
            accuracy: other.accuracy(),
        },
        examples,
        skipped,
        normalization: "lowercase, trim, collapse whitespace".into(),
        errors,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(qid: u64, text: &str, answers: &[&str]) -> QuestionRecord {
        QuestionRecord {
            question_id: qid,
            image_id: qid,
            text: text.into(),
            answers: answers.iter().map(|s| s.to_string()).collect(),
            answer_type: None,
        }
    }

    fn ten(main: &str, count: usize, filler: &str) -> Vec<String> {
        let mut v = vec![main.to_string(); count];
        v.extend(std::iter::repeat_n(filler.to_string(), 10 - count));
        v
    }

    #[test]
    fn normalize_answer_examples() {
        assert_eq!(normalize_answer(" Yes "), "yes");
        assert_eq!(normalize_answer("TWO   people"), "two people");
        assert_eq!(normalize_answer("2"), "2");
    }

    #[test]
    fn vocab_keeps_top_m_by_frequency() {
        let records = vec![rec(
            1,
            "q",
            &[
                "yes", "yes", "yes", "yes", "yes", "no", "no", "no", "cat", "yes",
            ],
        )];
        let vocab = build_answer_vocab(&records, 2).unwrap();
        assert_eq!(vocab.len(), 2);
        assert_eq!(vocab.answer(0), Some("yes"));
        assert_eq!(vocab.answer(1), Some("no"));
        assert_eq!(vocab.id_of("cat"), None);
    }

    #[test]
    fn vocab_handles_m_larger_than_distinct() {
        let records = vec![rec(
            1,
            "q",
            &["a", "b", "a", "b", "a", "b", "a", "b", "a", "b"],
        )];
        let vocab = build_answer_vocab(&records, 100).unwrap();
        assert_eq!(vocab.len(), 2);
    }

    #[test]
    fn vocab_breaks_frequency_ties_lexicographically() {
        let records = vec![rec(
            1,
            "q",
            &[
                "dog", "cat", "dog", "cat", "dog", "cat", "dog", "cat", "dog", "cat",
            ],
        )];
        let vocab = build_answer_vocab(&records, 1).unwrap();
        assert_eq!(vocab.answer(0), Some("cat"));
    }

    #[test]
    fn vocab_requires_answers() {
        assert!(build_answer_vocab(&[rec(1, "q", &[])], 5).is_err());
    }

    #[test]
    fn coverage_counts_val_answers_in_vocab() {
        let train = vec![rec(1, "q", &["a"; 10])];
        let val = vec![rec(
            2,
            "q",
            &["a", "a", "b", "b", "b", "b", "b", "b", "b", "b"],
        )];
        let vocab = build_answer_vocab(&train, 5).unwrap().with_coverage(&val);
        assert_eq!(vocab.coverage(), Some(0.2));
    }

    /// Brute force: enumerate the ten leave-one-out subsets directly.
    fn enumeration_oracle(pred: &str, gt: &[String]) -> f64 {
        let mut total = 0.0;
        for k in 0..10 {
            let matches = gt
                .iter()
                .enumerate()
                .filter(|(j, a)| *j != k && a.as_str() == pred)
                .count() as f64;
            total += (matches / 3.0).min(1.0);
        }
        total / 10.0
    }

    #[test]
    fn accuracy_matches_enumeration_oracle_for_all_match_counts() {
        for m in 0..=10usize {
            let gt = ten("yes", m, "no");
            let got = vqa_accuracy("yes", &gt).unwrap();
            let want = enumeration_oracle("yes", &gt);
            assert!(
                (got - want).abs() < 1e-12,
                "m={m}: got {got}, oracle {want}"
            );
        }
    }

    #[test]
    fn accuracy_known_values() {
        assert_eq!(vqa_accuracy("yes", &ten("yes", 0, "no")).unwrap(), 0.0);
        assert_eq!(vqa_accuracy("yes", &ten("yes", 10, "no")).unwrap(), 1.0);
        assert!((vqa_accuracy("yes", &ten("yes", 1, "no")).unwrap() - 0.3).abs() < 1e-12);
        assert!((vqa_accuracy("yes", &ten("yes", 2, "no")).unwrap() - 0.6).abs() < 1e-12);
        assert!((vqa_accuracy("yes", &ten("yes", 3, "no")).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn accuracy_closed_form_matches_for_all_m() {
        for m in 0..=10u32 {
            let gt = ten("x", m as usize, "y");
            let got = vqa_accuracy("x", &gt).unwrap();
            let mf = m as f64;
            let closed =
                ((mf * ((mf - 1.0) / 3.0).min(1.0)) + (10.0 - mf) * (mf / 3.0).min(1.0)) / 10.0;
            assert!((got - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn accuracy_is_permutation_invariant_and_monotone() {
        use rand::seq::SliceRandom;
        let mut gt = ten("a", 4, "b");
        let base = vqa_accuracy("a", &gt).unwrap();
        let mut rng = crate::rng::seeded_rng(3);
        for _ in 0..10 {
            gt.shuffle(&mut rng);
            assert_eq!(vqa_accuracy("a", &gt).unwrap(), base);
        }
        let mut prev = -1.0;
        for m in 0..=10 {
            let acc = vqa_accuracy("a", &ten("a", m, "b")).unwrap();
            assert!(acc >= prev);
            prev = acc;
        }
    }

    #[test]
    fn accuracy_rejects_wrong_gt_length() {
        assert!(vqa_accuracy("a", &vec!["a".to_string(); 9]).is_err());
    }

    #[test]
    fn answer_type_inference_rule() {
        assert_eq!(
            answer_type_of(&rec(
                1,
                "q",
                &ten("yes", 8, "no")
                    .iter()
                    .map(String::as_str)
                    .collect::<Vec<_>>()
            )),
            AnswerType::YesNo
        );
        assert_eq!(answer_type_of(&rec(1, "q", &["3"; 10])), AnswerType::Number);
        assert_eq!(
            answer_type_of(&rec(1, "q", &["red"; 10])),
            AnswerType::Other
        );
        let mut labelled = rec(1, "q", &["red"; 10]);
        labelled.answer_type = Some(AnswerType::Number);
        assert_eq!(answer_type_of(&labelled), AnswerType::Number);
    }

    #[test]
    fn evaluate_with_oracle_predictor_hits_ceiling() {
        let records = vec![
            rec(
                1,
                "is it sunny",
                &[
                    "yes", "yes", "yes", "yes", "yes", "yes", "no", "no", "no", "no",
                ],
            ),
            rec(
                2,
                "how many",
                &["2", "2", "2", "3", "3", "3", "3", "3", "3", "3"],
            ),
            rec(3, "what color", &["red"; 10]),
        ];
        // Oracle: most frequent answer per record (ties lexicographic).
        let report = evaluate_with(&records, |r| {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for a in &r.answers {
                *counts.entry(a.as_str()).or_insert(0) += 1;
            }
            let mut best: Vec<(&str, usize)> = counts.into_iter().collect();
            best.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
            Ok(best[0].0.to_string())
        })
        .unwrap();
        // Independent ceiling: 6 matches -> 1.0, 7 matches -> 1.0, 10 -> 1.0.
        let ceil1 = enumeration_oracle("yes", &ten("yes", 6, "no"));
        let ceil2 = enumeration_oracle(
            "3",
            &["2", "2", "2", "3", "3", "3", "3", "3", "3", "3"].map(String::from),
        );
        let ceil3 = 1.0;
        let want = (ceil1 + ceil2 + ceil3) / 3.0;
        assert!((report.overall - want).abs() < 1e-12);
        assert_eq!(report.examples, 3);
        assert_eq!(report.skipped, 0);
        assert_eq!(report.yes_no.examples, 1);
        assert_eq!(report.number.examples, 1);
        assert_eq!(report.other.examples, 1);
    }

    #[test]
    fn evaluate_with_rejects_empty_input_and_counts_skips() {
        assert!(evaluate_with(&[], |_| Ok("x".into())).is_err());
        let records = vec![rec(1, "q", &["a"; 10]), rec(2, "q", &[])];
        let report = evaluate_with(&records, |r| {
            if r.question_id == 1 {
                Ok("a".into())
            } else {
                Err(Error::InvalidArgument("boom".into()))
            }
        })
        .unwrap();
        assert_eq!(report.examples, 1);
        assert_eq!(report.skipped, 1);
        assert_eq!(report.overall, 1.0);
    }

    #[test]
    fn overall_is_weighted_mean_of_types() {
        let records = vec![
            rec(
                1,
                "q",
                &ten("yes", 3, "maybe")
                    .iter()
                    .map(String::as_str)
                    .collect::<Vec<_>>(),
            ),
            rec(2, "q", &["5"; 10]),
            rec(3, "q", &["red"; 10]),
            rec(4, "q", &["blue"; 10]),
        ];
        let report = evaluate_with(&records, |r| Ok(r.answers[0].clone())).unwrap();
        let weighted = (report.yes_no.accuracy * report.yes_no.examples as f64
            + report.number.accuracy * report.number.examples as f64
            + report.other.accuracy * report.other.examples as f64)
            / report.examples as f64;
        assert!((report.overall - weighted).abs() < 1e-9);
    }

    #[test]
    fn report_renders_table_and_json() {
        let records = vec![rec(1, "q", &["yes"; 10])];
        let report = evaluate_with(&records, |_| Ok("yes".into())).unwrap();
        let table = report.table();
        assert!(table.contains("Y/N"));
        assert!(table.contains("100.00"));
        let json = report.to_json().unwrap();
        assert!(json.contains("\"overall\": 1.0"));
    }
}
