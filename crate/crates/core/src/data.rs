//! Prompt records, success scores, deterministic splits and JSONL ingestion.
//!
//! Wire format, one prompt per line:
//!
//! ```text
//! {"id": str, "signals": {"<signal_id>": number, ...},
//!  "candidates": [{"score": number, "correct": 0|1, "answer": str?}, ...],
//!  "group": int?}
//! ```
//!
//! Unknown fields are kept on the record and written back unchanged.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::error::{CfcError, Result};
use crate::features::answer_entropy;

pub const SIGNAL_DIFFICULTY: &str = "difficulty";
pub const SIGNAL_MEAN_LOSS: &str = "mean_verifier_loss";
pub const SIGNAL_MAX_LOSS: &str = "max_verifier_loss";
pub const SIGNAL_ENTROPY: &str = "answer_entropy";

#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    /// Position in sample order.
    pub index: usize,
    /// Verifier score in [0,1]; smaller is better.
    pub score: f64,
    pub correct: bool,
    pub answer: Option<String>,
    pub extra: Map<String, Value>,
}

impl Candidate {
    pub fn new(index: usize, score: f64, correct: bool) -> Self {
        Candidate {
            index,
            score,
            correct,
            answer: None,
            extra: Map::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptRecord {
    pub id: String,
    pub candidates: Vec<Candidate>,
    pub raw_signals: BTreeMap<String, f64>,
    pub group_label: Option<i64>,
    pub extra: Map<String, Value>,
}

impl PromptRecord {
    pub fn new(id: impl Into<String>, candidates: Vec<Candidate>) -> Self {
        PromptRecord {
            id: id.into(),
            candidates,
            raw_signals: BTreeMap::new(),
            group_label: None,
            extra: Map::new(),
        }
    }

    /// Builds a record from (score, correct) pairs in sample order.
    pub fn from_scores(id: impl Into<String>, scored: &[(f64, bool)]) -> Self {
        let candidates = scored
            .iter()
            .enumerate()
            .map(|(i, &(s, c))| Candidate::new(i, s, c))
            .collect();
        let mut rec = PromptRecord::new(id, candidates);
        rec.derive_signals();
        rec
    }

    pub fn signal(&self, name: &str) -> Result<f64> {
        self.raw_signals
            .get(name)
            .copied()
            .ok_or_else(|| CfcError::MissingField {
                id: self.id.clone(),
                field: format!("signals.{name}"),
            })
    }

    pub fn scores(&self) -> impl Iterator<Item = f64> + '_ {
        self.candidates.iter().map(|c| c.score)
    }

    /// Recomputes the candidate-derived signals (mean/max verifier loss, and
    /// answer entropy when every candidate carries an answer).
    pub fn derive_signals(&mut self) {
        if self.candidates.is_empty() {
            return;
        }
        let m = self.candidates.len() as f64;
        let mean = self.candidates.iter().map(|c| c.score).sum::<f64>() / m;
        let max = self
            .candidates
            .iter()
            .map(|c| c.score)
            .fold(f64::NEG_INFINITY, f64::max);
        self.raw_signals.insert(SIGNAL_MEAN_LOSS.into(), mean);
        self.raw_signals.insert(SIGNAL_MAX_LOSS.into(), max);
        let answers: Option<Vec<&str>> = self
            .candidates
            .iter()
            .map(|c| c.answer.as_deref())
            .collect();
        if let Some(answers) = answers {
            self.raw_signals
                .insert(SIGNAL_ENTROPY.into(), answer_entropy(&answers));
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuccessScore {
    pub value: f64,
    /// True iff some candidate is correct.
    pub covered_possible: bool,
}

/// S(X): the smallest verifier score among correct candidates, or 1 when
/// no candidate is correct.
pub fn success_score(record: &PromptRecord) -> SuccessScore {
    let best = record
        .candidates
        .iter()
        .filter(|c| c.correct)
        .map(|c| c.score)
        .min_by(f64::total_cmp);
    match best {
        Some(value) => SuccessScore {
            value,
            covered_possible: true,
        },
        None => SuccessScore {
            value: 1.0,
            covered_possible: false,
        },
    }
}

/// Keeps the first `n_keep` candidates in sample order and recomputes the
/// candidate-derived signals.
pub fn truncate_candidates(record: &PromptRecord, n_keep: usize) -> Result<PromptRecord> {
    if n_keep == 0 {
        return Err(CfcError::domain("n_keep must be at least 1"));
    }
    if n_keep >= record.candidates.len() {
        return Ok(record.clone());
    }
    let mut out = record.clone();
    out.candidates.truncate(n_keep);
    out.derive_signals();
    Ok(out)
}

/// Seeded shuffle, then the first round(frac_cal·n) records form the
/// calibration side.
pub fn split_records(
    records: &[PromptRecord],
    seed: u64,
    frac_cal: f64,
) -> Result<(Vec<PromptRecord>, Vec<PromptRecord>)> {
    let n = records.len();
    if n < 2 {
        return Err(CfcError::domain("splitting needs at least two records"));
    }
    if !(frac_cal > 0.0 && frac_cal < 1.0) {
        return Err(CfcError::domain(format!("frac_cal {frac_cal} outside (0,1)")));
    }
    let n_cal = (frac_cal * n as f64).round() as usize;
    if n_cal == 0 || n_cal == n {
        return Err(CfcError::domain(format!(
            "frac_cal {frac_cal} leaves an empty side for {n} records"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let cal = order[..n_cal].iter().map(|&i| records[i].clone()).collect();
    let test = order[n_cal..].iter().map(|&i| records[i].clone()).collect();
    Ok((cal, test))
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IngestReport {
    /// Scores outside [0,1] that were clamped.
    pub clamped_scores: usize,
    /// Records whose candidate-derived signals were filled in.
    pub derived_signals: usize,
}

#[derive(Clone, Debug)]
pub struct Ingested {
    pub records: Vec<PromptRecord>,
    pub report: IngestReport,
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Ingested> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CfcError::io(path, e))?;
    read_jsonl(BufReader::new(file)).map_err(|e| match e {
        CfcError::Io { source, .. } => CfcError::io(path, source),
        other => other,
    })
}

pub fn read_jsonl<R: Read>(reader: R) -> Result<Ingested> {
    let mut records = Vec::new();
    let mut report = IngestReport::default();
    let reader = BufReader::new(reader);
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| CfcError::io("<input>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| CfcError::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let record = parse_record(value, line_no, &mut report)?;
        records.push(record);
    }
    if report.clamped_scores > 0 {
        log::warn!("clamped {} verifier scores into [0,1]", report.clamped_scores);
    }
    Ok(Ingested { records, report })
}

fn parse_record(value: Value, line_no: usize, report: &mut IngestReport) -> Result<PromptRecord> {
    let Value::Object(mut obj) = value else {
        return Err(CfcError::MalformedLine {
            line: line_no,
            message: "expected a JSON object".into(),
        });
    };
    let id = match obj.remove("id") {
        Some(Value::String(s)) => s,
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => {
            return Err(CfcError::MalformedLine {
                line: line_no,
                message: "`id` must be a string".into(),
            })
        }
        None => {
            return Err(CfcError::MissingField {
                id: format!("<line {line_no}>"),
                field: "id".into(),
            })
        }
    };
    let invalid = |message: String| CfcError::InvalidRecord {
        id: id.clone(),
        message,
    };

    let candidates_raw = match obj.remove("candidates") {
        Some(Value::Array(a)) => a,
        Some(_) => return Err(invalid("`candidates` must be an array".into())),
        None => {
            return Err(CfcError::MissingField {
                id,
                field: "candidates".into(),
            })
        }
    };
    if candidates_raw.is_empty() {
        return Err(invalid("empty candidates array".into()));
    }
    let mut candidates = Vec::with_capacity(candidates_raw.len());
    for (index, c) in candidates_raw.into_iter().enumerate() {
        let Value::Object(mut c) = c else {
            return Err(invalid(format!("candidate {index} is not an object")));
        };
        let score = match c.remove("score") {
            Some(Value::Number(n)) => n.as_f64().unwrap_or(f64::NAN),
            Some(_) => return Err(invalid(format!("candidate {index}: `score` must be a number"))),
            None => {
                return Err(CfcError::MissingField {
                    id,
                    field: format!("candidates[{index}].score"),
                })
            }
        };
        if !score.is_finite() {
            return Err(invalid(format!("candidate {index}: non-finite score")));
        }
        let clamped = score.clamp(0.0, 1.0);
        if clamped != score {
            report.clamped_scores += 1;
        }
        let correct = match c.remove("correct") {
            Some(Value::Number(n)) if n.as_u64() == Some(0) => false,
            Some(Value::Number(n)) if n.as_u64() == Some(1) => true,
            Some(Value::Bool(b)) => b,
            Some(_) => return Err(invalid(format!("candidate {index}: `correct` must be 0 or 1"))),
            None => {
                return Err(CfcError::MissingField {
                    id,
                    field: format!("candidates[{index}].correct"),
                })
            }
        };
        let answer = match c.remove("answer") {
            Some(Value::String(s)) => Some(s),
            Some(Value::Null) | None => None,
            Some(_) => return Err(invalid(format!("candidate {index}: `answer` must be a string"))),
        };
        candidates.push(Candidate {
            index,
            score: clamped,
            correct,
            answer,
            extra: c,
        });
    }

    let mut raw_signals = BTreeMap::new();
    match obj.remove("signals") {
        Some(Value::Object(sig)) => {
            for (k, v) in sig {
                let v = v
                    .as_f64()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| invalid(format!("signal `{k}` must be a finite number")))?;
                raw_signals.insert(k, v);
            }
        }
        Some(Value::Null) | None => {}
        Some(_) => return Err(invalid("`signals` must be an object".into())),
    }
    let group_label = match obj.remove("group") {
        Some(Value::Number(n)) => Some(
            n.as_i64()
                .ok_or_else(|| invalid("`group` must be an integer".into()))?,
        ),
        Some(Value::Null) | None => None,
        Some(_) => return Err(invalid("`group` must be an integer".into())),
    };

    let mut record = PromptRecord {
        id,
        candidates,
        raw_signals,
        group_label,
        extra: obj,
    };
    let missing_derived = !record.raw_signals.contains_key(SIGNAL_MEAN_LOSS)
        || !record.raw_signals.contains_key(SIGNAL_MAX_LOSS);
    if missing_derived {
        let provided = record.raw_signals.clone();
        record.derive_signals();
        // signals present in the file win over derived ones
        record.raw_signals.extend(provided);
        report.derived_signals += 1;
    }
    Ok(record)
}

pub fn record_to_json(record: &PromptRecord) -> Value {
    let mut obj = Map::new();
    obj.insert("id".into(), Value::String(record.id.clone()));
    let signals: Map<String, Value> = record
        .raw_signals
        .iter()
        .map(|(k, v)| (k.clone(), Value::from(*v)))
        .collect();
    obj.insert("signals".into(), Value::Object(signals));
    let candidates = record
        .candidates
        .iter()
        .map(|c| {
            let mut m = Map::new();
            m.insert("score".into(), Value::from(c.score));
            m.insert("correct".into(), Value::from(u8::from(c.correct)));
            if let Some(a) = &c.answer {
                m.insert("answer".into(), Value::String(a.clone()));
            }
            for (k, v) in &c.extra {
                m.insert(k.clone(), v.clone());
            }
            Value::Object(m)
        })
        .collect();
    obj.insert("candidates".into(), Value::Array(candidates));
    if let Some(g) = record.group_label {
        obj.insert("group".into(), Value::from(g));
    }
    for (k, v) in &record.extra {
        obj.insert(k.clone(), v.clone());
    }
    Value::Object(obj)
}

pub fn write_jsonl<W: Write>(writer: W, records: &[PromptRecord]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for r in records {
        serde_json::to_writer(&mut w, &record_to_json(r))?;
        w.write_all(b"\n").map_err(|e| CfcError::io("<output>", e))?;
    }
    w.flush().map_err(|e| CfcError::io("<output>", e))?;
    Ok(())
}

pub fn save_jsonl(path: impl AsRef<Path>, records: &[PromptRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CfcError::io(path, e))?;
    write_jsonl(file, records).map_err(|e| match e {
        CfcError::Io { source, .. } => CfcError::io(path, source),
        other => other,
    })
}
