//! Training plans: merged, capability-staged, difficulty-ordered and combined
//! curricula, plus pass-rate difficulty scoring.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasynth::{Answerer, Pathway};
use crate::exec::{derive_seed, label_seed, Execution};
use crate::rewards::accuracy_reward;
use crate::types::{CapabilityTag, Sample};

/// Answers drawn per question when scoring difficulty.
pub const DEFAULT_DIFFICULTY_DRAWS: usize = 16;
pub const DEFAULT_DIFFICULTY_TEMPERATURE: f64 = 1.0;

#[derive(Debug, thiserror::Error)]
pub enum CurriculumError {
    #[error("sample {0} has no difficulty score")]
    MissingDifficulty(String),
    #[error("budget mismatch: {0}")]
    BudgetMismatch(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("stage order required for {0:?} plans")]
    MissingOrder(PlanMode),
    #[error("difficulty draw {draw} for {sample} failed: {message}")]
    Answerer {
        sample: String,
        draw: usize,
        message: String,
    },
    #[error("k must be >= 1")]
    NoDraws,
    #[error("plan file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanMode {
    Merged,
    Capability,
    Difficulty,
    CapabilityDifficulty,
}

impl PlanMode {
    pub fn is_staged(self) -> bool {
        matches!(self, PlanMode::Capability | PlanMode::CapabilityDifficulty)
    }

    pub fn uses_difficulty(self) -> bool {
        matches!(self, PlanMode::Difficulty | PlanMode::CapabilityDifficulty)
    }
}

impl std::str::FromStr for PlanMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "merged" => Ok(PlanMode::Merged),
            "capability" | "staged" => Ok(PlanMode::Capability),
            "difficulty" => Ok(PlanMode::Difficulty),
            "capability_difficulty" | "capability+difficulty" => Ok(PlanMode::CapabilityDifficulty),
            other => Err(format!("unknown plan mode `{other}`")),
        }
    }
}

/// How a segment's samples are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentOrder {
    /// Fresh seeded permutation every epoch.
    Shuffled,
    /// The listed order, repeated each epoch.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capability: Option<CapabilityTag>,
    pub order: SegmentOrder,
    pub steps: usize,
    pub sample_ids: Vec<String>,
}

pub type StageOrder = [CapabilityTag; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPlan {
    pub mode: PlanMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage_order: Option<StageOrder>,
    pub seed: u64,
    pub total_steps: usize,
    pub segments: Vec<Segment>,
}

impl TrainingPlan {
    pub fn validate(&self) -> Result<(), CurriculumError> {
        if self.segments.is_empty() {
            return Err(CurriculumError::InvalidPlan("no segments".into()));
        }
        let sum: usize = self.segments.iter().map(|s| s.steps).sum();
        if sum != self.total_steps {
            return Err(CurriculumError::BudgetMismatch(format!(
                "total_steps {} != segment sum {sum}",
                self.total_steps
            )));
        }
        for s in &self.segments {
            if s.steps == 0 || s.sample_ids.is_empty() {
                return Err(CurriculumError::InvalidPlan(format!(
                    "segment `{}` needs positive steps and samples",
                    s.label
                )));
            }
        }
        if self.mode.is_staged() {
            let order = self.stage_order.ok_or(CurriculumError::MissingOrder(self.mode))?;
            if !is_permutation(&order) {
                return Err(CurriculumError::InvalidPlan("stage order is not a permutation".into()));
            }
            let caps: Vec<_> = self.segments.iter().map(|s| s.capability).collect();
            if caps != order.iter().map(|c| Some(*c)).collect::<Vec<_>>() {
                return Err(CurriculumError::InvalidPlan("segments do not follow stage order".into()));
            }
        }
        Ok(())
    }

    /// Checks staged segments hold only their capability and every id is known.
    pub fn check_against(&self, datasets: &BTreeMap<CapabilityTag, Vec<Sample>>) -> Result<(), CurriculumError> {
        let lookup: BTreeMap<&str, CapabilityTag> = datasets
            .iter()
            .flat_map(|(c, v)| v.iter().map(move |s| (s.id.as_str(), *c)))
            .collect();
        for seg in &self.segments {
            for id in &seg.sample_ids {
                let cap = lookup
                    .get(id.as_str())
                    .ok_or_else(|| CurriculumError::InvalidPlan(format!("unknown sample id {id}")))?;
                if seg.capability.is_some_and(|c| c != *cap) {
                    return Err(CurriculumError::InvalidPlan(format!(
                        "sample {id} ({cap}) in segment `{}`",
                        seg.label
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plans serialize") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, CurriculumError> {
        let plan: TrainingPlan = serde_json::from_str(text).map_err(|e| CurriculumError::InvalidPlan(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<(), CurriculumError> {
        std::fs::write(path, self.to_json()).map_err(|e| CurriculumError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, CurriculumError> {
        let text = std::fs::read_to_string(path).map_err(|e| CurriculumError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json(&text)
    }

    /// `(segment index, step within segment)` for a global step.
    pub fn locate(&self, step: usize) -> Option<(usize, usize)> {
        let mut start = 0;
        for (i, s) in self.segments.iter().enumerate() {
            if step < start + s.steps {
                return Some((i, step - start));
            }
            start += s.steps;
        }
        None
    }

    /// Global step at which segment `index` starts.
    pub fn segment_start(&self, index: usize) -> usize {
        self.segments[..index].iter().map(|s| s.steps).sum()
    }

    /// Sample ids for one optimizer step. Stateless in the step index, so resuming
    /// mid-plan reproduces the same batches.
    pub fn batch_ids(&self, segment: usize, step_in_segment: usize, batch_size: usize) -> Vec<&str> {
        let seg = &self.segments[segment];
        let n = seg.sample_ids.len();
        let mut cache: Option<(usize, Vec<usize>)> = None;
        (0..batch_size)
            .map(|k| {
                let pos = step_in_segment * batch_size + k;
                let (epoch, idx) = (pos / n, pos % n);
                let j = match seg.order {
                    SegmentOrder::Fixed => idx,
                    SegmentOrder::Shuffled => {
                        if cache.as_ref().map(|c| c.0) != Some(epoch) {
                            cache = Some((epoch, epoch_permutation(n, self.seed, segment, epoch)));
                        }
                        cache.as_ref().expect("set above").1[idx]
                    }
                };
                seg.sample_ids[j].as_str()
            })
            .collect()
    }
}

fn epoch_permutation(n: usize, seed: u64, segment: usize, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xE90C, segment as u64, epoch as u64]));
    idx.shuffle(&mut rng);
    idx
}

fn is_permutation(order: &[CapabilityTag]) -> bool {
    order.len() == 3 && order.iter().collect::<HashSet<_>>().len() == 3
}

/// Optimizer steps needed to pass over `samples` `epochs` times.
pub fn steps_for_epochs(samples: usize, batch_size: usize, epochs: usize) -> usize {
    assert!(batch_size > 0, "batch_size must be positive");
    (samples * epochs).div_ceil(batch_size)
}

/// Pass rate of `k` sampled answers, stored on the sample's `difficulty`.
pub fn difficulty_score(
    sample: &Sample,
    answerer: &dyn Answerer,
    k: usize,
    temperature: f64,
) -> Result<f64, CurriculumError> {
    if k == 0 {
        return Err(CurriculumError::NoDraws);
    }
    let mut passes = 0usize;
    for draw in 0..k {
        let ans = answerer
            .answer(sample, Pathway::Image, temperature, draw as u64)
            .map_err(|message| CurriculumError::Answerer {
                sample: sample.id.clone(),
                draw,
                message,
            })?;
        passes += (accuracy_reward(&ans, &sample.answer) == 1.0) as usize;
    }
    Ok(passes as f64 / k as f64)
}

/// Scores every sample in place; the first failure aborts.
pub fn score_difficulties(
    samples: &mut [Sample],
    answerer: &dyn Answerer,
    k: usize,
    temperature: f64,
    exec: Execution,
) -> Result<(), CurriculumError> {
    let scores = exec.map(samples, |_, s| difficulty_score(s, answerer, k, temperature));
    for (s, d) in samples.iter_mut().zip(scores) {
        s.difficulty = Some(d?);
    }
    Ok(())
}

/// Sorts easy (high pass rate) to hard; ties fall back to a seeded shuffle.
pub fn sort_easy_to_hard(samples: &[&Sample], seed: u64) -> Result<Vec<String>, CurriculumError> {
    let mut keyed: Vec<(f64, &str)> = samples
        .iter()
        .map(|s| {
            s.difficulty
                .map(|d| (d, s.id.as_str()))
                .ok_or_else(|| CurriculumError::MissingDifficulty(s.id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0xD1FF]));
    keyed.shuffle(&mut rng);
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
    Ok(keyed.into_iter().map(|(_, id)| id.to_string()).collect())
}

fn shuffled_ids(samples: &[&Sample], seed: u64, stream: u64) -> Vec<String> {
    let mut ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream]));
    ids.shuffle(&mut rng);
    ids
}

pub fn build_plan(
    datasets: &BTreeMap<CapabilityTag, Vec<Sample>>,
    mode: PlanMode,
    stage_order: Option<StageOrder>,
    budgets: &BTreeMap<CapabilityTag, usize>,
    seed: u64,
) -> Result<TrainingPlan, CurriculumError> {
    for c in CapabilityTag::ALL {
        match budgets.get(&c) {
            Some(0) | None => {
                return Err(CurriculumError::BudgetMismatch(format!("{c} needs a positive step budget")))
            }
            _ => {}
        }
        if datasets.get(&c).map_or(true, |v| v.is_empty()) {
            return Err(CurriculumError::BudgetMismatch(format!("{c} has a budget but no samples")));
        }
    }
    if let Some(extra) = budgets.keys().find(|c| !CapabilityTag::ALL.contains(c)) {
        return Err(CurriculumError::BudgetMismatch(format!("unexpected budget for {extra}")));
    }
    let mut seen = HashSet::new();
    for s in datasets.values().flatten() {
        if !seen.insert(s.id.as_str()) {
            return Err(CurriculumError::InvalidPlan(format!("duplicate sample id {}", s.id)));
        }
    }
    let total: usize = budgets.values().sum();
    let all: Vec<&Sample> = CapabilityTag::ALL
        .iter()
        .flat_map(|c| datasets[c].iter())
        .collect();

    let segments = match mode {
        PlanMode::Merged => vec![Segment {
            label: "merged".into(),
            capability: None,
            order: SegmentOrder::Shuffled,
            steps: total,
            sample_ids: shuffled_ids(&all, seed, label_seed("merged")),
        }],
        PlanMode::Difficulty => vec![Segment {
            label: "difficulty".into(),
            capability: None,
            order: SegmentOrder::Fixed,
            steps: total,
            sample_ids: sort_easy_to_hard(&all, seed)?,
        }],
        PlanMode::Capability | PlanMode::CapabilityDifficulty => {
            let order = stage_order.ok_or(CurriculumError::MissingOrder(mode))?;
            if !is_permutation(&order) {
                return Err(CurriculumError::InvalidPlan("stage order is not a permutation".into()));
            }
            order
                .iter()
                .map(|&c| {
                    let samples: Vec<&Sample> = datasets[&c].iter().collect();
                    let (order, ids) = if mode == PlanMode::CapabilityDifficulty {
                        (SegmentOrder::Fixed, sort_easy_to_hard(&samples, derive_seed(seed, &[c.index() as u64]))?)
                    } else {
                        (SegmentOrder::Shuffled, shuffled_ids(&samples, seed, c.index() as u64))
                    };
                    Ok(Segment {
                        label: c.as_str().into(),
                        capability: Some(c),
                        order,
                        steps: budgets[&c],
                        sample_ids: ids,
                    })
                })
                .collect::<Result<_, CurriculumError>>()?
        }
    };
    let plan = TrainingPlan {
        mode,
        stage_order: if mode.is_staged() { stage_order } else { None },
        seed,
        total_steps: total,
        segments,
    };
    plan.validate()?;
    Ok(plan)
}

/// A stage order with an optional preset name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NamedOrder {
    pub order: StageOrder,
    pub preset: Option<&'static str>,
}

pub fn preset(name: &str) -> Option<StageOrder> {
    use CapabilityTag::*;
    match name {
        "paper-default" => Some([Perception, TextReasoning, VisualReasoning]),
        "text-first" => Some([TextReasoning, Perception, VisualReasoning]),
        "reversed" => Some([VisualReasoning, TextReasoning, Perception]),
        _ => None,
    }
}

/// All six stage orders in lexicographic stage-number order.
pub fn stage_permutations() -> Vec<NamedOrder> {
    let names = ["paper-default", "text-first", "reversed"];
    let mut out = Vec::new();
    for a in 1..=3 {
        for b in 1..=3 {
            for c in 1..=3 {
                if a == b || b == c || a == c {
                    continue;
                }
                let order = [a, b, c].map(|n| CapabilityTag::from_stage_number(n).expect("1..=3"));
                let preset = names.iter().copied().find(|n| preset(n) == Some(order));
                out.push(NamedOrder { order, preset });
            }
        }
    }
    out
}

/// Parses `1,2,3`, `perception,text,vis` or a preset name.
pub fn parse_stage_order(s: &str) -> Result<StageOrder, String> {
    if let Some(o) = preset(s) {
        return Ok(o);
    }
    let parts: Vec<&str> = s.split([',', '>', ' ']).filter(|p| !p.is_empty()).collect();
    if parts.len() != 3 {
        return Err(format!("stage order `{s}` must name three stages"));
    }
    let mut order = Vec::with_capacity(3);
    for p in parts {
        let c = match p.parse::<usize>() {
            Ok(n) => CapabilityTag::from_stage_number(n).ok_or_else(|| format!("stage number {n} not in 1..=3"))?,
            Err(_) => p.parse::<CapabilityTag>()?,
        };
        order.push(c);
    }
    let order: StageOrder = order.try_into().expect("three entries");
    if !is_permutation(&order) {
        return Err(format!("stage order `{s}` repeats a stage"));
    }
    Ok(order)
}

/// Parses `90,375,465` as per-capability budgets in stage-number order
/// (perception, text reasoning, visual reasoning).
pub fn parse_budgets(s: &str) -> Result<BTreeMap<CapabilityTag, usize>, String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("budget `{p}` is not an integer")))
        .collect::<Result<_, _>>()?;
    if parts.len() != 3 {
        return Err(format!("expected three budgets, got {}", parts.len()));
    }
    Ok(CapabilityTag::ALL.into_iter().zip(parts).collect())
}

/// Per-stage steps used throughout the staged experiments.
pub fn paper_budgets() -> BTreeMap<CapabilityTag, usize> {
    CapabilityTag::ALL.into_iter().zip([90, 375, 465]).collect()
}
