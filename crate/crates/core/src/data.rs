//! Requests and JSONL exposure logs.
//!
//! One line per request:
//! `{"request_id":..,"user_id":..,"candidates":[{"item_id":..,"features":[..]}],"exposed":[..],"feedback":{"click":[..]}}`.
//! `exposed` and `feedback` are present on logged exposures and absent on
//! requests that still need a slate.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::FeedbackMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub item_id: u64,
    pub features: Vec<f64>,
}

/// One user request: candidate features plus, for logged traffic, the
/// exposed slate and its feedback.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestBatch {
    pub request_id: u64,
    pub user_id: u64,
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exposed: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<FeedbackMatrix>,
}

impl RequestBatch {
    pub fn n(&self) -> usize {
        self.candidates.len()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.candidates.first().map(|c| c.features.len())
    }

    /// Exposed slate and feedback, or an error for unlabeled requests.
    pub fn label(&self) -> Result<(&[usize], &FeedbackMatrix)> {
        match (&self.exposed, &self.feedback) {
            (Some(e), Some(f)) => Ok((e, f)),
            _ => Err(Error::InvalidSlate(format!(
                "request {} carries no exposure label",
                self.request_id
            ))),
        }
    }

    /// Checks feature widths, finiteness, and the label when present.
    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim().ok_or(Error::EmptyCandidates)?;
        for c in &self.candidates {
            if c.features.len() != d {
                return Err(Error::Dimension {
                    what: "candidate feature width",
                    expected: d,
                    got: c.features.len(),
                });
            }
            if c.features.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidSlate(format!(
                    "non-finite feature on item {}",
                    c.item_id
                )));
            }
        }
        if let Some(exposed) = &self.exposed {
            crate::decoding::validate_indices(exposed, self.n())?;
            if let Some(fb) = &self.feedback {
                if fb.m() != exposed.len() {
                    return Err(Error::Dimension {
                        what: "feedback columns",
                        expected: exposed.len(),
                        got: fb.m(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// A logged request whose `exposed` and `feedback` fields are populated.
pub type ExposureLog = RequestBatch;

pub fn write_jsonl<W: Write>(mut w: W, requests: &[RequestBatch]) -> Result<()> {
    for r in requests {
        let line = serde_json::to_string(r).map_err(|e| Error::Data {
            line: 0,
            msg: e.to_string(),
        })?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses a JSONL log; errors carry the 1-based line number.
pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<RequestBatch>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let req: RequestBatch = serde_json::from_str(&line).map_err(|e| Error::Data {
            line: i + 1,
            msg: e.to_string(),
        })?;
        req.validate().map_err(|e| Error::Data {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(req);
    }
    Ok(out)
}

pub fn to_jsonl_string(requests: &[RequestBatch]) -> String {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, requests).expect("writing to memory");
    String::from_utf8(buf).expect("json is utf-8")
}
