//! Question/answer records and their JSON-lines serialization.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ground-truth answers per question in train/val splits.
pub const ANSWERS_PER_QUESTION: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnswerType {
    #[serde(rename = "yes/no")]
    YesNo,
    #[serde(rename = "number")]
    Number,
    #[serde(rename = "other")]
    Other,
}

impl std::fmt::Display for AnswerType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AnswerType::YesNo => "yes/no",
            AnswerType::Number => "number",
            AnswerType::Other => "other",
        })
    }
}

/// One dataset row: a question about an image, with ten reference answers on
/// labelled splits and none on test.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub question_id: u64,
    pub image_id: u64,
    #[serde(rename = "question")]
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_type: Option<AnswerType>,
}

impl QuestionRecord {
    pub fn validate(&self) -> Result<()> {
        if self.text.is_empty() {
            return Err(Error::InvalidRecord(format!(
                "question {} has empty text",
                self.question_id
            )));
        }
        if !(self.answers.is_empty() || self.answers.len() == ANSWERS_PER_QUESTION) {
            return Err(Error::InvalidRecord(format!(
                "question {} has {} answers; expected 0 or {ANSWERS_PER_QUESTION}",
                self.question_id,
                self.answers.len()
            )));
        }
        Ok(())
    }

    pub fn is_labelled(&self) -> bool {
        !self.answers.is_empty()
    }
}

/// Read and validate a JSONL file of records; errors carry the line number.
pub fn read_records(path: &Path) -> Result<Vec<QuestionRecord>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QuestionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidRecord(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        record
            .validate()
            .map_err(|e| Error::InvalidRecord(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[QuestionRecord]) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut writer, record)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
