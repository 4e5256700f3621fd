//! Domain types shared across the pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Functional capability a sample trains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapabilityTag {
    Perception,
    TextReasoning,
    VisualReasoning,
}

impl CapabilityTag {
    pub const ALL: [CapabilityTag; 3] = [
        CapabilityTag::Perception,
        CapabilityTag::TextReasoning,
        CapabilityTag::VisualReasoning,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CapabilityTag::Perception => "perception",
            CapabilityTag::TextReasoning => "text_reasoning",
            CapabilityTag::VisualReasoning => "visual_reasoning",
        }
    }

    /// Position in the canonical stage order (perception, text, visual).
    pub fn index(self) -> usize {
        match self {
            CapabilityTag::Perception => 0,
            CapabilityTag::TextReasoning => 1,
            CapabilityTag::VisualReasoning => 2,
        }
    }

    /// Inverse of [`CapabilityTag::index`], accepting the 1-based stage number.
    pub fn from_stage_number(n: usize) -> Option<Self> {
        match n {
            1 => Some(CapabilityTag::Perception),
            2 => Some(CapabilityTag::TextReasoning),
            3 => Some(CapabilityTag::VisualReasoning),
            _ => None,
        }
    }

    pub fn is_reasoning(self) -> bool {
        !matches!(self, CapabilityTag::Perception)
    }
}

impl fmt::Display for CapabilityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CapabilityTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "perception" | "perc" => Ok(CapabilityTag::Perception),
            "text_reasoning" | "text" => Ok(CapabilityTag::TextReasoning),
            "visual_reasoning" | "vis" => Ok(CapabilityTag::VisualReasoning),
            other => Err(format!("unknown capability `{other}`")),
        }
    }
}

/// One training item.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Sample {
    pub id: String,
    pub capability: CapabilityTag,
    pub question: String,
    pub answer: String,
    pub caption: Option<String>,
    pub image_ref: Option<String>,
    pub features: Option<Vec<f64>>,
    pub difficulty: Option<f64>,
    pub meta: BTreeMap<String, String>,
}

impl Sample {
    pub fn new(
        id: impl Into<String>,
        capability: CapabilityTag,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        Sample {
            id: id.into(),
            capability,
            question: question.into(),
            answer: answer.into(),
            caption: None,
            image_ref: None,
            features: None,
            difficulty: None,
            meta: BTreeMap::new(),
        }
    }

    /// Checks the record-level invariants; returns a description of the first violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.id.is_empty() {
            return Err("id must be nonempty".into());
        }
        if self.answer.is_empty() {
            return Err(format!("sample {}: answer must be nonempty", self.id));
        }
        if let Some(d) = self.difficulty {
            if !(0.0..=1.0).contains(&d) {
                return Err(format!("sample {}: difficulty {d} outside [0,1]", self.id));
            }
        }
        if let Some(feats) = &self.features {
            if feats.iter().any(|v| !v.is_finite()) {
                return Err(format!("sample {}: non-finite feature", self.id));
            }
        }
        Ok(())
    }
}

const SAMPLE_KEYS: [&str; 9] = [
    "id",
    "capability",
    "question",
    "answer",
    "caption",
    "image_ref",
    "features",
    "difficulty",
    "meta",
];

// Unknown top-level keys are folded into `meta` rather than rejected.
impl<'de> Deserialize<'de> for Sample {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        use serde::de::Error;

        #[derive(Deserialize)]
        struct Known {
            id: String,
            capability: CapabilityTag,
            question: String,
            answer: String,
            #[serde(default)]
            caption: Option<String>,
            #[serde(default)]
            image_ref: Option<String>,
            #[serde(default)]
            features: Option<Vec<f64>>,
            #[serde(default)]
            difficulty: Option<f64>,
            #[serde(default)]
            meta: Option<BTreeMap<String, String>>,
        }

        let mut map = serde_json::Map::<String, serde_json::Value>::deserialize(deserializer)?;
        let extras: Vec<(String, serde_json::Value)> = map
            .iter()
            .filter(|(k, _)| !SAMPLE_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (k, _) in &extras {
            map.remove(k);
        }
        let known: Known =
            serde_json::from_value(serde_json::Value::Object(map)).map_err(D::Error::custom)?;
        let mut meta = known.meta.unwrap_or_default();
        for (k, v) in extras {
            let text = match v {
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            meta.entry(k).or_insert(text);
        }
        Ok(Sample {
            id: known.id,
            capability: known.capability,
            question: known.question,
            answer: known.answer,
            caption: known.caption,
            image_ref: known.image_ref,
            features: known.features,
            difficulty: known.difficulty,
            meta,
        })
    }
}

/// One sampled trajectory of the toy policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub sample_id: String,
    pub tokens: Vec<u32>,
    /// Natural-log probability of each token; one entry per token.
    pub step_logprobs: Vec<f64>,
    pub transcript: String,
    pub answer_text: String,
    pub length: usize,
    /// Seed of the observation stream; required to replay log-probabilities.
    pub obs_seed: Option<u64>,
    /// True when the final answer was forced by the length cap.
    pub truncated: bool,
}

impl Rollout {
    pub fn total_logprob(&self) -> f64 {
        self.step_logprobs.iter().sum()
    }

    pub fn check_invariants(&self, max_len: usize) -> Result<(), String> {
        if self.length != self.tokens.len() || self.length != self.step_logprobs.len() {
            return Err(format!(
                "length {} disagrees with {} tokens / {} logprobs",
                self.length,
                self.tokens.len(),
                self.step_logprobs.len()
            ));
        }
        if self.length > max_len {
            return Err(format!("length {} exceeds maximum {max_len}", self.length));
        }
        if let Some(lp) = self.step_logprobs.iter().find(|lp| **lp > 0.0 || lp.is_nan()) {
            return Err(format!("step logprob {lp} is not a log-probability"));
        }
        Ok(())
    }
}

/// Accuracy and format components of the composite verifiable reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_format: f64,
    pub total: f64,
}

impl RewardBreakdown {
    pub fn new(r_acc: f64, r_format: f64) -> Self {
        RewardBreakdown {
            r_acc,
            r_format,
            total: r_acc + r_format,
        }
    }
}
