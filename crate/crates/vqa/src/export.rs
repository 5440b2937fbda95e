//! Attention-map export: per-glimpse spatial grids as CSV and PGM images plus
//! the model's top answers, for inspecting what a trained model attends to.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::classifier;
use crate::dataset::QuestionRecord;
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::model::Model;
use crate::rng::{tag, SeedStream};
use crate::tensor::graph::Graph;
use crate::tensor::Real;

/// Top answers for one question, serialized next to its grids.
#[derive(Debug, Serialize)]
pub struct TopAnswers {
    pub question_id: u64,
    /// The argmax answer.
    pub answer: String,
    /// Up to five (answer, probability) pairs, probability non-increasing.
    pub top5: Vec<TopEntry>,
}

#[derive(Debug, Serialize)]
pub struct TopEntry {
    pub answer: String,
    pub prob: f64,
}

/// Attention weights for one question: one `height x width` grid per glimpse,
/// each summing to 1, plus the answer distribution's head.
#[derive(Debug)]
pub struct QuestionAttention {
    pub question_id: u64,
    pub height: usize,
    pub width: usize,
    /// `glimpses[c][y * width + x]` is glimpse `c`'s weight on cell (y, x).
    pub glimpses: Vec<Vec<f64>>,
    pub top: TopAnswers,
}

/// Run the model on one record (dropout off) and pull out its attention maps.
/// Errors if the model was built without attention — there is nothing to show.
pub fn question_attention<T: Real>(
    model: &Model<T>,
    record: &QuestionRecord,
    features: &FeatureSet<T>,
) -> Result<QuestionAttention> {
    let fm = features.get(&record.image_id).ok_or_else(|| {
        Error::InvalidArgument(format!("no feature map for image {}", record.image_id))
    })?;
    let seq = model.tokenize_question(&record.text)?;
    let mut g = Graph::new();
    let mut seeds = SeedStream::new(model.config.seed, &[tag::DROPOUT]);
    let out = model.forward(&mut g, &seq, fm, false, &mut seeds)?;
    let attention = out.attention.ok_or_else(|| {
        Error::InvalidState("model has attention disabled; no maps to export".into())
    })?;

    let (h, w) = (fm.height(), fm.width());
    let c = model.config.glimpse_count;
    let weights = g.value(attention.weights); // L x C, row-major
    let glimpses = (0..c)
        .map(|gi| (0..h * w).map(|l| weights[l * c + gi].to_f64s()).collect())
        .collect();

    let top5 = classifier::top_k(&g, &out.dist, &model.answer_vocab, 5)?
        .into_iter()
        .map(|(answer, prob)| TopEntry { answer, prob })
        .collect::<Vec<_>>();
    let answer = classifier::predict(&g, &out.dist, &model.answer_vocab)?;
    Ok(QuestionAttention {
        question_id: record.question_id,
        height: h,
        width: w,
        glimpses,
        top: TopAnswers {
            question_id: record.question_id,
            answer,
            top5,
        },
    })
}

/// Grid as CSV, one row per grid row, cells with six significant digits.
pub fn grid_csv(grid: &[f64], height: usize, width: usize) -> String {
    let mut out = String::new();
    for y in 0..height {
        for x in 0..width {
            if x > 0 {
                out.push(',');
            }
            write!(out, "{:.5e}", grid[y * width + x]).expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Grid as an ASCII PGM image, min-max normalized to 0..255 so the hottest
/// cell is white. A constant grid renders all black.
pub fn grid_pgm(grid: &[f64], height: usize, width: usize) -> String {
    let min = grid.iter().copied().fold(f64::INFINITY, f64::min);
    let max = grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale = if max > min { 255.0 / (max - min) } else { 0.0 };
    let mut out = format!("P2\n{width} {height}\n255\n");
    for y in 0..height {
        for x in 0..width {
            if x > 0 {
                out.push(' ');
            }
            let v = ((grid[y * width + x] - min) * scale).round() as u32;
            write!(out, "{v}").expect("string write");
        }
        out.push('\n');
    }
    out
}

/// Write one question's artifacts into `out_dir`: per glimpse
/// `<qid>_g<c>.csv` and `<qid>_g<c>.pgm` (c is 1-based), plus
/// `<qid>_top5.json`. Returns the written paths.
pub fn write_question<T: Real>(
    model: &Model<T>,
    record: &QuestionRecord,
    features: &FeatureSet<T>,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let qa = question_attention(model, record, features)?;
    let mut written = Vec::new();
    for (gi, grid) in qa.glimpses.iter().enumerate() {
        let csv = out_dir.join(format!("{}_g{}.csv", qa.question_id, gi + 1));
        std::fs::write(&csv, grid_csv(grid, qa.height, qa.width))?;
        written.push(csv);
        let pgm = out_dir.join(format!("{}_g{}.pgm", qa.question_id, gi + 1));
        std::fs::write(&pgm, grid_pgm(grid, qa.height, qa.width))?;
        written.push(pgm);
    }
    let json = out_dir.join(format!("{}_top5.json", qa.question_id));
    std::fs::write(&json, serde_json::to_string_pretty(&qa.top)?)?;
    written.push(json);
    Ok(written)
}

/// Everything one export run produced and everything it could not.
#[derive(Debug)]
pub struct ExportOutcome {
    pub written: Vec<PathBuf>,
    /// (question id, reason) for every id that produced nothing.
    pub failures: Vec<(u64, String)>,
}

/// Export attention for each requested question id. Unknown ids and
/// per-question failures are collected, not fatal.
pub fn export_attention<T: Real>(
    model: &Model<T>,
    records: &[QuestionRecord],
    question_ids: &[u64],
    features: &FeatureSet<T>,
    out_dir: &Path,
) -> Result<ExportOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let mut outcome = ExportOutcome {
        written: Vec::new(),
        failures: Vec::new(),
    };
    for &qid in question_ids {
        let Some(record) = records.iter().find(|r| r.question_id == qid) else {
            outcome
                .failures
                .push((qid, "question id not in dataset".into()));
            continue;
        };
        match write_question(model, record, features, out_dir) {
            Ok(mut paths) => outcome.written.append(&mut paths),
            Err(e) => outcome.failures.push((qid, e.to_string())),
        }
    }
    Ok(outcome)
}
