//! Perception-error audits of reasoning transcripts and response-length reports.

use serde::{Deserialize, Serialize};

use crate::clients::{generate_batch, GenRequest, TextClient};
use crate::exec::{derive_seed, label_seed};
use crate::types::Sample;

pub const SENTINEL: &str = "PERCEPTION_ERROR:";

pub const DEFAULT_JUDGE_TEMPLATE: &str = "\
You are auditing a vision-language model's reasoning.

Question: {question}
Reference answer: {gold}

Model response:
{transcript}

Decide whether the response misreads or misdescribes the visual content (a perception \
error), as opposed to an error in reasoning or arithmetic. Finish with exactly one line:
PERCEPTION_ERROR: YES
or
PERCEPTION_ERROR: NO
";

#[derive(Debug, thiserror::Error)]
pub enum AuditError {
    #[error("empty transcript for {0}")]
    EmptyTranscript(String),
    #[error("judge template must contain {0}")]
    Template(&'static str),
    #[error("{0}")]
    Batch(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditVerdict {
    pub sample_id: String,
    /// `None` exactly when `parse_ok` is false.
    pub has_perception_error: Option<bool>,
    pub judge_raw: String,
    pub parse_ok: bool,
}

impl AuditVerdict {
    fn from_raw(sample_id: &str, raw: String) -> Self {
        let judgment = parse_judgment(&raw);
        AuditVerdict {
            sample_id: sample_id.to_string(),
            has_perception_error: judgment,
            parse_ok: judgment.is_some(),
            judge_raw: raw,
        }
    }

    fn failed(sample_id: &str, raw: String) -> Self {
        AuditVerdict {
            sample_id: sample_id.to_string(),
            has_perception_error: None,
            judge_raw: raw,
            parse_ok: false,
        }
    }
}

/// Reads the sentinel line. Conflicting or missing sentinels are a parse failure.
pub fn parse_judgment(text: &str) -> Option<bool> {
    let mut found = None;
    for line in text.lines() {
        let line = line.trim().trim_matches('*').trim();
        let Some(rest) = line.strip_prefix(SENTINEL) else {
            continue;
        };
        let value = match rest.trim().to_ascii_uppercase().as_str() {
            "YES" => true,
            "NO" => false,
            _ => return None,
        };
        match found {
            Some(v) if v != value => return None,
            _ => found = Some(value),
        }
    }
    found
}

/// A transcript to audit together with the sample it answers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub sample_id: String,
    pub question: String,
    pub answer: String,
    pub transcript: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl TranscriptRecord {
    pub fn from_sample(sample: &Sample, transcript: impl Into<String>) -> Self {
        TranscriptRecord {
            sample_id: sample.id.clone(),
            question: sample.question.clone(),
            answer: sample.answer.clone(),
            transcript: transcript.into(),
            label: None,
        }
    }
}

pub fn judge_request(record: &TranscriptRecord, template: &str, seed: u64) -> Result<GenRequest, AuditError> {
    if record.transcript.trim().is_empty() {
        return Err(AuditError::EmptyTranscript(record.sample_id.clone()));
    }
    if !template.contains("{transcript}") {
        return Err(AuditError::Template("{transcript}"));
    }
    let prompt = template
        .replace("{question}", &record.question)
        .replace("{gold}", &record.answer)
        .replace("{transcript}", &record.transcript);
    Ok(GenRequest::new(prompt)
        .with_temperature(0.0)
        .with_seed(derive_seed(seed, &[label_seed(&record.sample_id)])))
}

/// Asks the judge about one transcript; client failures yield `parse_ok = false`.
pub fn judge_transcript(
    record: &TranscriptRecord,
    judge: &dyn TextClient,
    template: &str,
    seed: u64,
) -> Result<AuditVerdict, AuditError> {
    let req = judge_request(record, template, seed)?;
    Ok(match judge.generate(&req) {
        Ok(resp) => AuditVerdict::from_raw(&record.sample_id, resp.text),
        Err(e) => AuditVerdict::failed(&record.sample_id, format!("error: {e}")),
    })
}

/// Judges many transcripts with at most `max_in_flight` concurrent requests.
pub fn judge_all(
    records: &[TranscriptRecord],
    judge: &dyn TextClient,
    template: &str,
    seed: u64,
    max_in_flight: usize,
) -> Result<Vec<AuditVerdict>, AuditError> {
    let reqs = records
        .iter()
        .map(|r| judge_request(r, template, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let responses = generate_batch(judge, &reqs, max_in_flight).map_err(|e| AuditError::Batch(e.to_string()))?;
    Ok(records
        .iter()
        .zip(responses)
        .map(|(r, resp)| match resp {
            Ok(resp) => AuditVerdict::from_raw(&r.sample_id, resp.text),
            Err(e) => AuditVerdict::failed(&r.sample_id, format!("error: {e}")),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthStats {
    pub label: String,
    pub count: usize,
    pub mean: f64,
    pub median: f64,
}

/// `(reference − candidate) / reference`, in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reduction {
    pub reference: String,
    pub candidate: String,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub judged: usize,
    pub parsed: usize,
    pub parse_failures: usize,
    pub perception_errors: usize,
    /// Percent of parsed verdicts flagged; 0 when nothing parsed.
    pub error_rate: f64,
    pub lengths: Vec<LengthStats>,
    pub reductions: Vec<Reduction>,
}

pub fn percent_reduction(reference: f64, candidate: f64) -> f64 {
    100.0 * (reference - candidate) / reference
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Pure aggregation of verdicts and labelled length samples.
pub fn audit_report(verdicts: &[AuditVerdict], lengths: &[(String, Vec<f64>)]) -> AuditReport {
    let parsed: Vec<bool> = verdicts.iter().filter_map(|v| v.has_perception_error).collect();
    let errors = parsed.iter().filter(|x| **x).count();
    let stats: Vec<LengthStats> = lengths
        .iter()
        .map(|(label, xs)| LengthStats {
            label: label.clone(),
            count: xs.len(),
            mean: if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 },
            median: median(xs),
        })
        .collect();
    let mut reductions = Vec::new();
    for a in &stats {
        for b in &stats {
            if a.label != b.label {
                reductions.push(Reduction {
                    reference: a.label.clone(),
                    candidate: b.label.clone(),
                    percent: percent_reduction(a.mean, b.mean),
                });
            }
        }
    }
    AuditReport {
        judged: verdicts.len(),
        parsed: parsed.len(),
        parse_failures: verdicts.len() - parsed.len(),
        perception_errors: errors,
        error_rate: if parsed.is_empty() { 0.0 } else { 100.0 * errors as f64 / parsed.len() as f64 },
        lengths: stats,
        reductions,
    }
}

impl AuditReport {
    pub fn reduction(&self, reference: &str, candidate: &str) -> Option<f64> {
        self.reductions
            .iter()
            .find(|r| r.reference == reference && r.candidate == candidate)
            .map(|r| r.percent)
    }

    /// Long-format CSV: `section,key,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,key,value\n");
        let mut row = |s: &str, k: &str, v: String| out.push_str(&format!("{s},{k},{v}\n"));
        row("verdicts", "judged", self.judged.to_string());
        row("verdicts", "parsed", self.parsed.to_string());
        row("verdicts", "parse_failures", self.parse_failures.to_string());
        row("verdicts", "perception_errors", self.perception_errors.to_string());
        row("verdicts", "error_rate_pct", format!("{:.4}", self.error_rate));
        for l in &self.lengths {
            row("length_count", &l.label, l.count.to_string());
            row("length_mean", &l.label, format!("{:.4}", l.mean));
            row("length_median", &l.label, format!("{:.4}", l.median));
        }
        for r in &self.reductions {
            row("reduction_pct", &format!("{}->{}", r.reference, r.candidate), format!("{:.4}", r.percent));
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "perception errors: {}/{} parsed ({:.2}%), {} unparsed\n",
            self.perception_errors, self.parsed, self.error_rate, self.parse_failures
        );
        for l in &self.lengths {
            s.push_str(&format!(
                "length {:<16} n={:<6} mean={:>10.2} median={:>10.2}\n",
                l.label, l.count, l.mean, l.median
            ));
        }
        for r in &self.reductions {
            s.push_str(&format!(
                "{} vs {}: {:.2}% shorter\n",
                r.candidate, r.reference, r.percent
            ));
        }
        s
    }
}
