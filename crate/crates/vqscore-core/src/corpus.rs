//! Embedding corpus I/O: the boundary where upstream encoders hand off.
//!
//! A corpus is a UTF-8 file with one JSON record per line. Records carry the
//! frozen-encoder outputs for one video (text embedding, per-frame
//! embeddings, two cover embeddings) plus an optional quality grade. Loading
//! validates every record and enforces dimension homogeneity; saving refuses
//! records that would not survive a lossless roundtrip.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

/// Hard cap on frames per video; longer videos are subsampled upstream.
pub const MAX_FRAMES: usize = 20;

/// Number of cover embeddings per record.
pub const COVER_FRAMES: usize = 2;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus I/O failed")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed record")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: record {id:?} invalid: {reason}")]
    Invalid {
        line: usize,
        id: String,
        reason: String,
    },
    #[error(
        "line {line}: record {id:?} has dims (d_t={got_dt}, d_f={got_df}), corpus has (d_t={want_dt}, d_f={want_df})"
    )]
    Inhomogeneous {
        line: usize,
        id: String,
        want_dt: usize,
        want_df: usize,
        got_dt: usize,
        got_df: usize,
    },
    #[error("line {line}: record {id:?} has no grade but grades are required")]
    MissingGrade { line: usize, id: String },
}

/// Four-level ordinal quality grade with its fixed soft label.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum QualityGrade {
    Bad,
    Fair,
    Good,
    Excellent,
}

impl QualityGrade {
    pub const ALL: [QualityGrade; 4] = [
        QualityGrade::Bad,
        QualityGrade::Fair,
        QualityGrade::Good,
        QualityGrade::Excellent,
    ];

    /// Regression target for this grade.
    pub fn soft_label(self) -> f32 {
        match self {
            QualityGrade::Bad => 0.0,
            QualityGrade::Fair => 0.3,
            QualityGrade::Good => 0.6,
            QualityGrade::Excellent => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QualityGrade::Bad => "bad",
            QualityGrade::Fair => "fair",
            QualityGrade::Good => "good",
            QualityGrade::Excellent => "excellent",
        }
    }
}

/// One video's precomputed embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoRecord {
    pub id: String,
    pub text_embedding: Vec<f32>,
    pub frame_embeddings: Vec<Vec<f32>>,
    pub cover_embeddings: [Vec<f32>; COVER_FRAMES],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grade: Option<QualityGrade>,
}

impl VideoRecord {
    pub fn frame_count(&self) -> usize {
        self.frame_embeddings.len()
    }

    /// `(d_t, d_f)` for this record, taking d_f from the first frame row.
    pub fn dims(&self) -> (usize, usize) {
        let df = self.frame_embeddings.first().map_or(0, Vec::len);
        (self.text_embedding.len(), df)
    }

    /// Structural validity of this record in isolation: frame count bounds,
    /// internally consistent dimensions, and finite values throughout.
    pub fn validate(&self) -> Result<(), String> {
        let m = self.frame_embeddings.len();
        if m == 0 {
            return Err("no frame embeddings".into());
        }
        if m > MAX_FRAMES {
            return Err(format!("{m} frames exceeds the maximum of {MAX_FRAMES}"));
        }
        if self.text_embedding.is_empty() {
            return Err("empty text embedding".into());
        }
        let df = self.frame_embeddings[0].len();
        if df == 0 {
            return Err("empty frame embedding".into());
        }
        for (i, row) in self.frame_embeddings.iter().enumerate() {
            if row.len() != df {
                return Err(format!(
                    "frame {i} has dim {} but frame 0 has dim {df}",
                    row.len()
                ));
            }
        }
        for (i, row) in self.cover_embeddings.iter().enumerate() {
            if row.len() != df {
                return Err(format!(
                    "cover {i} has dim {} but frames have dim {df}",
                    row.len()
                ));
            }
        }
        let all_rows = self
            .frame_embeddings
            .iter()
            .chain(self.cover_embeddings.iter())
            .chain(std::iter::once(&self.text_embedding));
        for row in all_rows {
            if row.iter().any(|v| !v.is_finite()) {
                return Err("non-finite embedding value".into());
            }
        }
        Ok(())
    }

    /// Text embedding as a `[1, d_t]` tensor.
    pub fn text_tensor<F: Scalar>(&self) -> Tensor<F> {
        row_matrix(std::slice::from_ref(&self.text_embedding))
    }

    /// Frame embeddings as an `[m, d_f]` tensor.
    pub fn frames_tensor<F: Scalar>(&self) -> Tensor<F> {
        row_matrix(&self.frame_embeddings)
    }

    /// Cover embeddings as a `[2, d_f]` tensor.
    pub fn covers_tensor<F: Scalar>(&self) -> Tensor<F> {
        row_matrix(&self.cover_embeddings)
    }
}

fn row_matrix<F: Scalar>(rows: &[Vec<f32>]) -> Tensor<F> {
    let cols = rows.first().map_or(0, Vec::len);
    let data = rows
        .iter()
        .flat_map(|r| r.iter().map(|&v| F::from_f64(v as f64)))
        .collect();
    Tensor::from_parts(vec![rows.len(), cols], data)
}

/// Loads and validates a line-delimited corpus. With `require_grades`, every
/// record must carry a grade (training and evaluation); without, ungraded
/// records pass through (scoring).
pub fn load_corpus(
    path: impl AsRef<Path>,
    require_grades: bool,
) -> Result<Vec<VideoRecord>, CorpusError> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut corpus_dims: Option<(usize, usize)> = None;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: VideoRecord = serde_json::from_str(&line).map_err(|source| {
            CorpusError::Parse {
                line: line_no,
                source,
            }
        })?;
        record.validate().map_err(|reason| CorpusError::Invalid {
            line: line_no,
            id: record.id.clone(),
            reason,
        })?;
        if require_grades && record.grade.is_none() {
            return Err(CorpusError::MissingGrade {
                line: line_no,
                id: record.id,
            });
        }
        let dims = record.dims();
        match corpus_dims {
            None => corpus_dims = Some(dims),
            Some(want) if want != dims => {
                return Err(CorpusError::Inhomogeneous {
                    line: line_no,
                    id: record.id,
                    want_dt: want.0,
                    want_df: want.1,
                    got_dt: dims.0,
                    got_df: dims.1,
                });
            }
            Some(_) => {}
        }
        records.push(record);
    }
    Ok(records)
}

/// Writes records as one JSON object per line. Every record is validated
/// first; nothing is written if any record is invalid.
pub fn save_corpus(
    records: &[VideoRecord],
    path: impl AsRef<Path>,
) -> Result<(), CorpusError> {
    for (idx, record) in records.iter().enumerate() {
        record.validate().map_err(|reason| CorpusError::Invalid {
            line: idx + 1,
            id: record.id.clone(),
            reason,
        })?;
    }
    let file = File::create(path.as_ref())?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let json = serde_json::to_string(record).map_err(|source| CorpusError::Parse {
            line: 0,
            source,
        })?;
        writer.write_all(json.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}
