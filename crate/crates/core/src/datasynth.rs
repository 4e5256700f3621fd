//! Perception-data synthesis: caption → question/answer generation and the
//! perception-difficulty filter.
//!
//! A generated sample is kept only if every evaluator answers it wrongly from the
//! image and correctly from the caption, i.e. the information is present but the
//! evaluator fails to perceive it.

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clients::{generate_batch, ClientError, FinishReason, GenRequest, TextClient};
use crate::env::{SceneTask, Token, TokenTable};
use crate::exec::{derive_seed, label_seed, Execution};
use crate::policy::{rollout_rng, sample_rollout, PolicyParams};
use crate::rewards::{extract_answer, normalize_answer, FormatSpec};
use crate::types::{CapabilityTag, Sample};

pub const DEFAULT_QA_TEMPLATE: &str = "\
Below is a detailed description of an image.

{caption}

Write up to {max_pairs} perception-focused question-answer pairs about visual details \
or spatial relations in the image. Each answer must be a single word, number or short \
phrase that can be checked by exact match. Use this format:
Q1: <question>
A1: <answer>
";

pub const DEFAULT_CAPTION_ANSWER_TEMPLATE: &str = "\
Image description: {caption}

Question: {question}
Reply with the final answer only.";

pub const DEFAULT_IMAGE_ANSWER_TEMPLATE: &str = "\
[image: {image_ref}]

Question: {question}
Reply with the final answer only.";

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid input: {0}")]
    Precondition(String),
    #[error("generation failed for {image_ref}: {source}")]
    GenerationFailed {
        image_ref: String,
        #[source]
        source: ClientError,
    },
    #[error("no parseable question/answer pairs for {image_ref} ({skipped} malformed)")]
    EmptyOutput { image_ref: String, skipped: usize },
    #[error("{pathway} pathway failed for {sample}: {message}")]
    Evaluator {
        sample: String,
        pathway: Pathway,
        message: String,
    },
}

/// One image with its reference caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub image_ref: String,
    pub caption: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QaConfig {
    pub template: String,
    pub max_pairs: usize,
    pub temperature: f64,
    pub seed: Option<u64>,
    pub max_tokens: u32,
    /// Drop repeated (image, normalized question) pairs.
    pub dedup: bool,
}

impl Default for QaConfig {
    fn default() -> Self {
        QaConfig {
            template: DEFAULT_QA_TEMPLATE.to_string(),
            max_pairs: 5,
            temperature: 0.7,
            seed: Some(0),
            max_tokens: 1024,
            dedup: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QaOutput {
    pub samples: Vec<Sample>,
    pub skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Question,
    Answer,
}

/// Recognizes `Q:`, `Q1:`, `Question 2:`, `1. Q:` and the answer equivalents.
fn classify_line(line: &str) -> Option<(Field, &str)> {
    let s = line.trim_start();
    let s = s.trim_start_matches(|c: char| c.is_ascii_digit());
    let s = s.trim_start_matches(['.', ')', '-', '*']).trim_start();
    let lower = s.to_ascii_lowercase();
    for (field, words) in [
        (Field::Question, ["question", "q"]),
        (Field::Answer, ["answer", "a"]),
    ] {
        for w in words {
            if let Some(rest) = lower.strip_prefix(w) {
                let digits = rest.trim_start().trim_start_matches(|c: char| c.is_ascii_digit());
                if let Some(after) = digits.trim_start().strip_prefix(':') {
                    let offset = s.len() - after.len();
                    return Some((field, s[offset..].trim()));
                }
            }
        }
    }
    None
}

/// Parses generator output into `(question, answer)` pairs and a malformed count.
pub fn parse_qa_pairs(text: &str) -> (Vec<(String, String)>, usize) {
    let mut pairs = Vec::new();
    let mut skipped = 0;
    let mut question: Option<String> = None;
    let mut answer: Option<String> = None;
    let flush = |q: &mut Option<String>, a: &mut Option<String>, pairs: &mut Vec<_>, skipped: &mut usize| {
        match (q.take(), a.take()) {
            (Some(q), Some(a)) if !q.trim().is_empty() && !a.trim().is_empty() => {
                pairs.push((q.trim().to_string(), a.trim().to_string()))
            }
            (None, None) => {}
            _ => *skipped += 1,
        }
    };
    for line in text.lines() {
        match classify_line(line) {
            Some((Field::Question, rest)) => {
                flush(&mut question, &mut answer, &mut pairs, &mut skipped);
                question = Some(rest.to_string());
            }
            Some((Field::Answer, rest)) => {
                if answer.is_some() || question.is_none() {
                    flush(&mut question, &mut answer, &mut pairs, &mut skipped);
                }
                answer = Some(rest.to_string());
            }
            None if line.trim().is_empty() => {}
            None => {
                // continuation of the open field
                let open = if answer.is_some() { &mut answer } else { &mut question };
                if let Some(f) = open {
                    f.push(' ');
                    f.push_str(line.trim());
                }
            }
        }
    }
    flush(&mut question, &mut answer, &mut pairs, &mut skipped);
    (pairs, skipped)
}

fn qa_prompt(record: &CaptionRecord, cfg: &QaConfig) -> Result<GenRequest, SynthError> {
    if record.caption.trim().is_empty() {
        return Err(SynthError::Precondition(format!("empty caption for {}", record.image_ref)));
    }
    if !cfg.template.contains("{caption}") {
        return Err(SynthError::Precondition("template lacks a {caption} placeholder".into()));
    }
    if cfg.max_pairs == 0 {
        return Err(SynthError::Precondition("max_pairs must be >= 1".into()));
    }
    let prompt = cfg
        .template
        .replace("{caption}", &record.caption)
        .replace("{max_pairs}", &cfg.max_pairs.to_string());
    let mut req = GenRequest::new(prompt)
        .with_temperature(cfg.temperature)
        .with_max_tokens(cfg.max_tokens);
    if let Some(seed) = cfg.seed {
        req = req.with_seed(derive_seed(seed, &[label_seed(&record.image_ref)]));
    }
    Ok(req)
}

fn samples_from_text(record: &CaptionRecord, text: &str, cfg: &QaConfig) -> Result<QaOutput, SynthError> {
    let (pairs, mut skipped) = parse_qa_pairs(text);
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    for (q, a) in pairs {
        if samples.len() == cfg.max_pairs {
            break;
        }
        if cfg.dedup && !seen.insert(normalize_answer(&q)) {
            skipped += 1;
            continue;
        }
        let mut s = Sample::new(
            format!("{}-q{}", record.image_ref, samples.len()),
            CapabilityTag::Perception,
            q,
            a,
        );
        s.caption = Some(record.caption.clone());
        s.image_ref = Some(record.image_ref.clone());
        samples.push(s);
    }
    if samples.is_empty() {
        return Err(SynthError::EmptyOutput {
            image_ref: record.image_ref.clone(),
            skipped,
        });
    }
    Ok(QaOutput { samples, skipped })
}

/// Generates perception QA samples from one caption.
pub fn generate_qa(
    record: &CaptionRecord,
    generator: &dyn TextClient,
    cfg: &QaConfig,
) -> Result<QaOutput, SynthError> {
    let req = qa_prompt(record, cfg)?;
    let resp = generator
        .generate(&req)
        .map_err(|source| SynthError::GenerationFailed {
            image_ref: record.image_ref.clone(),
            source,
        })?;
    samples_from_text(record, &resp.text, cfg)
}

#[derive(Debug, Default)]
pub struct SynthReport {
    pub samples: Vec<Sample>,
    pub skipped_pairs: usize,
    /// `(image_ref, error)` for captions that yielded nothing.
    pub failures: Vec<(String, String)>,
}

/// Runs [`generate_qa`] over many captions with bounded concurrency; output order
/// follows input order. With `cfg.dedup` the check also spans captions sharing an image.
pub fn synthesize(
    records: &[CaptionRecord],
    generator: &dyn TextClient,
    cfg: &QaConfig,
    max_in_flight: usize,
) -> Result<SynthReport, SynthError> {
    let reqs = records
        .iter()
        .map(|r| qa_prompt(r, cfg))
        .collect::<Result<Vec<_>, _>>()?;
    let responses = generate_batch(generator, &reqs, max_in_flight)
        .map_err(|e| SynthError::Precondition(e.to_string()))?;
    let mut report = SynthReport::default();
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut ids: HashSet<String> = HashSet::new();
    for (record, resp) in records.iter().zip(responses) {
        let out = resp
            .map_err(|source| SynthError::GenerationFailed {
                image_ref: record.image_ref.clone(),
                source,
            })
            .and_then(|r| samples_from_text(record, &r.text, cfg));
        match out {
            Ok(out) => {
                report.skipped_pairs += out.skipped;
                for mut s in out.samples {
                    if cfg.dedup && !seen.insert((record.image_ref.clone(), normalize_answer(&s.question))) {
                        report.skipped_pairs += 1;
                        continue;
                    }
                    let mut k = 0;
                    let base = s.id.clone();
                    while !ids.insert(s.id.clone()) {
                        k += 1;
                        s.id = format!("{base}-{k}");
                    }
                    report.samples.push(s);
                }
            }
            Err(e) => report.failures.push((record.image_ref.clone(), e.to_string())),
        }
    }
    Ok(report)
}

/// Which input an evaluator conditions its answer on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    Image,
    Caption,
}

impl Pathway {
    fn index(self) -> u64 {
        match self {
            Pathway::Image => 0,
            Pathway::Caption => 1,
        }
    }
}

impl std::fmt::Display for Pathway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Pathway::Image => "image",
            Pathway::Caption => "caption",
        })
    }
}

/// A model that answers a sample's question from the image or from its caption.
/// `draw` numbers repeated queries; equal arguments must give equal answers.
pub trait Answerer: Send + Sync {
    fn answer(&self, sample: &Sample, pathway: Pathway, temperature: f64, draw: u64) -> Result<String, String>;

    fn name(&self) -> String {
        "answerer".into()
    }
}

impl<A: Answerer + ?Sized> Answerer for Arc<A> {
    fn answer(&self, sample: &Sample, pathway: Pathway, temperature: f64, draw: u64) -> Result<String, String> {
        (**self).answer(sample, pathway, temperature, draw)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

impl<A: Answerer + ?Sized> Answerer for &A {
    fn answer(&self, sample: &Sample, pathway: Pathway, temperature: f64, draw: u64) -> Result<String, String> {
        (**self).answer(sample, pathway, temperature, draw)
    }

    fn name(&self) -> String {
        (**self).name()
    }
}

/// Answers through a text client. The image pathway sends the image reference for an
/// external adapter to resolve; the caption pathway inlines the caption.
pub struct ClientAnswerer<C> {
    pub client: C,
    pub caption_template: String,
    pub image_template: String,
    pub seed: u64,
    pub max_tokens: u32,
    pub label: String,
}

impl<C: TextClient> ClientAnswerer<C> {
    pub fn new(client: C, seed: u64) -> Self {
        ClientAnswerer {
            client,
            caption_template: DEFAULT_CAPTION_ANSWER_TEMPLATE.into(),
            image_template: DEFAULT_IMAGE_ANSWER_TEMPLATE.into(),
            seed,
            max_tokens: 256,
            label: "client".into(),
        }
    }

    pub fn request(&self, sample: &Sample, pathway: Pathway, temperature: f64, draw: u64) -> Result<GenRequest, String> {
        let template = match pathway {
            Pathway::Image => &self.image_template,
            Pathway::Caption => &self.caption_template,
        };
        let caption = sample.caption.as_deref().unwrap_or("");
        if pathway == Pathway::Caption && caption.is_empty() {
            return Err("sample has no caption".into());
        }
        let prompt = template
            .replace("{caption}", caption)
            .replace("{image_ref}", sample.image_ref.as_deref().unwrap_or(&sample.id))
            .replace("{question}", &sample.question);
        let seed = derive_seed(self.seed, &[label_seed(&sample.id), pathway.index(), draw]);
        Ok(GenRequest::new(prompt)
            .with_temperature(temperature)
            .with_seed(seed)
            .with_max_tokens(self.max_tokens))
    }
}

impl<C: TextClient> Answerer for ClientAnswerer<C> {
    fn answer(&self, sample: &Sample, pathway: Pathway, temperature: f64, draw: u64) -> Result<String, String> {
        let req = self.request(sample, pathway, temperature, draw)?;
        let resp = self.client.generate(&req).map_err(|e| e.to_string())?;
        if resp.finish_reason == FinishReason::Error {
            return Err(format!("generation error: {}", resp.text));
        }
        Ok(extract_answer(&resp.text, &FormatSpec::default()).to_string())
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// Answers scene tasks with the toy policy. The image pathway observes the noisy
/// scene; the caption states the attributes exactly, so that pathway observes a
/// noiseless copy. The policy has no temperature; the argument is ignored.
pub struct PolicyAnswerer {
    pub params: PolicyParams,
    pub max_len: usize,
    pub seed: u64,
    pub label: String,
}

impl PolicyAnswerer {
    pub fn new(params: PolicyParams, max_len: usize, seed: u64) -> Self {
        PolicyAnswerer {
            params,
            max_len,
            seed,
            label: "policy".into(),
        }
    }
}

impl Answerer for PolicyAnswerer {
    fn answer(&self, sample: &Sample, pathway: Pathway, _temperature: f64, draw: u64) -> Result<String, String> {
        let mut task = SceneTask::from_sample(sample).map_err(|e| e.to_string())?;
        if pathway == Pathway::Caption {
            task.noise_eta = 0.0;
        }
        let mut rng = rollout_rng(derive_seed(self.seed, &[label_seed(&sample.id), pathway.index(), draw]));
        let rollout = sample_rollout(&self.params, &task, self.max_len, &mut rng);
        let table = TokenTable::new(self.params.vocab);
        match rollout.tokens.last().and_then(|t| table.decode(*t)) {
            Some(Token::Answer(a)) => Ok(a.to_string()),
            _ => Err("policy produced no answer".into()),
        }
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// Replays fixed answers keyed by `(sample id, pathway)`; draw `d` gets entry
/// `d mod len`. Unscripted queries fail.
#[derive(Debug, Default, Clone)]
pub struct ScriptedAnswerer {
    script: BTreeMap<(String, u8), Vec<Result<String, String>>>,
    pub label: String,
}

impl ScriptedAnswerer {
    pub fn new() -> Self {
        Self {
            label: "scripted".into(),
            ..Self::default()
        }
    }

    pub fn script(&mut self, sample_id: &str, pathway: Pathway, answers: Vec<String>) -> &mut Self {
        self.script
            .insert((sample_id.to_string(), pathway.index() as u8), answers.into_iter().map(Ok).collect());
        self
    }

    pub fn script_failure(&mut self, sample_id: &str, pathway: Pathway, message: &str) -> &mut Self {
        self.script
            .insert((sample_id.to_string(), pathway.index() as u8), vec![Err(message.to_string())]);
        self
    }
}

impl Answerer for ScriptedAnswerer {
    fn answer(&self, sample: &Sample, pathway: Pathway, _temperature: f64, draw: u64) -> Result<String, String> {
        let answers = self
            .script
            .get(&(sample.id.clone(), pathway.index() as u8))
            .filter(|v| !v.is_empty())
            .ok_or_else(|| format!("no scripted {pathway} answer for {}", sample.id))?;
        answers[(draw % answers.len() as u64) as usize].clone()
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// Both answers for one sample and whether each matches the gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathwayVerdict {
    pub evaluator: String,
    pub answer_via_image: String,
    pub answer_via_caption: String,
    pub image_correct: bool,
    pub caption_correct: bool,
}

impl PathwayVerdict {
    /// Information present in the caption but missed from the image.
    pub fn perception_deficient(&self) -> bool {
        !self.image_correct && self.caption_correct
    }
}

pub const FILTER_TEMPERATURE: f64 = 0.0;

pub fn evaluate_pathways(sample: &Sample, evaluator: &dyn Answerer) -> Result<PathwayVerdict, SynthError> {
    if sample.caption.as_deref().map_or(true, |c| c.trim().is_empty()) {
        return Err(SynthError::Precondition(format!("sample {} has no caption", sample.id)));
    }
    let ask = |pathway| {
        evaluator
            .answer(sample, pathway, FILTER_TEMPERATURE, 0)
            .map_err(|message| SynthError::Evaluator {
                sample: sample.id.clone(),
                pathway,
                message,
            })
    };
    let img = ask(Pathway::Image)?;
    let cap = ask(Pathway::Caption)?;
    let gold = normalize_answer(&sample.answer);
    Ok(PathwayVerdict {
        evaluator: evaluator.name(),
        image_correct: normalize_answer(&img) == gold,
        caption_correct: normalize_answer(&cap) == gold,
        answer_via_image: img,
        answer_via_caption: cap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterDecision {
    pub sample_id: String,
    pub retained: bool,
    pub verdicts: Vec<PathwayVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct FilterOutput {
    pub retained: Vec<Sample>,
    pub decisions: Vec<FilterDecision>,
}

impl FilterOutput {
    pub fn errors(&self) -> usize {
        self.decisions.iter().filter(|d| d.error.is_some()).count()
    }
}

/// Keeps exactly the samples every evaluator finds perception-deficient.
/// An evaluator failure drops the sample and records the error on its decision.
pub fn perception_filter(
    samples: &[Sample],
    evaluators: &[&dyn Answerer],
    exec: Execution,
) -> Result<FilterOutput, SynthError> {
    if evaluators.is_empty() {
        return Err(SynthError::Precondition("at least one evaluator is required".into()));
    }
    if let Some(s) = samples.iter().find(|s| s.caption.is_none()) {
        return Err(SynthError::Precondition(format!("sample {} has no caption", s.id)));
    }
    let decisions: Vec<FilterDecision> = exec.map(samples, |_, sample| {
        let mut verdicts = Vec::with_capacity(evaluators.len());
        for ev in evaluators {
            match evaluate_pathways(sample, *ev) {
                Ok(v) => verdicts.push(v),
                Err(e) => {
                    return FilterDecision {
                        sample_id: sample.id.clone(),
                        retained: false,
                        verdicts,
                        error: Some(e.to_string()),
                    }
                }
            }
        }
        FilterDecision {
            sample_id: sample.id.clone(),
            retained: verdicts.iter().all(PathwayVerdict::perception_deficient),
            verdicts,
            error: None,
        }
    });
    let retained = samples
        .iter()
        .zip(&decisions)
        .filter(|(_, d)| d.retained)
        .map(|(s, _)| s.clone())
        .collect();
    Ok(FilterOutput { retained, decisions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::MockClient;
    use proptest::prelude::*;

    fn record() -> CaptionRecord {
        CaptionRecord {
            image_ref: "img-1".into(),
            caption: "A red ball sits left of a blue cube.".into(),
        }
    }

    fn mock_for(text: &str) -> MockClient {
        let cfg = QaConfig::default();
        let req = qa_prompt(&record(), &cfg).unwrap();
        let mut m = MockClient::new();
        m.insert(&req.prompt, req.temperature, req.seed, text);
        m
    }

    #[test]
    fn two_well_formed_blocks() {
        let m = mock_for("Q1: What color is the ball?\nA1: red\n\nQ2: Where is the cube?\nA2: right of the ball\n");
        let out = generate_qa(&record(), &m, &QaConfig::default()).unwrap();
        assert_eq!(out.samples.len(), 2);
        assert_eq!(out.skipped, 0);
        for s in &out.samples {
            assert_eq!(s.capability, CapabilityTag::Perception);
            assert_eq!(s.caption.as_deref(), Some(record().caption.as_str()));
            assert!(!s.answer.is_empty());
        }
        assert_eq!(out.samples[0].answer, "red");
        assert_eq!(out.samples[1].id, "img-1-q1");
    }

    #[test]
    fn malformed_block_is_skipped() {
        let m = mock_for("Q: What color is the ball?\nA: red\nQ: How many cubes?\n");
        let out = generate_qa(&record(), &m, &QaConfig::default()).unwrap();
        assert_eq!((out.samples.len(), out.skipped), (1, 1));
    }

    #[test]
    fn empty_caption_and_output() {
        let m = MockClient::new();
        let empty = CaptionRecord {
            image_ref: "x".into(),
            caption: "  ".into(),
        };
        assert!(matches!(
            generate_qa(&empty, &m, &QaConfig::default()),
            Err(SynthError::Precondition(_))
        ));
        let m = mock_for("I cannot see anything.");
        assert!(matches!(
            generate_qa(&record(), &m, &QaConfig::default()),
            Err(SynthError::EmptyOutput { skipped: 0, .. })
        ));
        let m = MockClient::new();
        assert!(matches!(
            generate_qa(&record(), &m, &QaConfig::default()),
            Err(SynthError::GenerationFailed { .. })
        ));
    }

    #[test]
    fn parser_variants() {
        let text = "1. Question: Is the ball red?\nAnswer: yes\n2) q 2 : What is\n  on the left?\n a2: the ball\nA: orphan\n";
        let (pairs, skipped) = parse_qa_pairs(text);
        assert_eq!(
            pairs,
            vec![
                ("Is the ball red?".to_string(), "yes".to_string()),
                ("What is on the left?".to_string(), "the ball".to_string()),
            ]
        );
        assert_eq!(skipped, 1);
    }

    #[test]
    fn max_pairs_and_dedup() {
        let text = "Q: a?\nA: 1\nQ: A?\nA: 2\nQ: b?\nA: 3\n";
        let cfg = QaConfig {
            max_pairs: 2,
            ..QaConfig::default()
        };
        let out = samples_from_text(&record(), text, &cfg).unwrap();
        assert_eq!(out.samples.len(), 2);
        let cfg = QaConfig {
            dedup: true,
            ..QaConfig::default()
        };
        let out = samples_from_text(&record(), text, &cfg).unwrap();
        assert_eq!(out.samples.len(), 2);
        assert_eq!(out.skipped, 1);
    }

    #[test]
    fn synthesize_keeps_order_and_records_failures() {
        let cfg = QaConfig::default();
        let records: Vec<CaptionRecord> = (0..4)
            .map(|i| CaptionRecord {
                image_ref: format!("img-{i}"),
                caption: format!("caption {i}"),
            })
            .collect();
        let mut m = MockClient::new();
        for r in &records[..3] {
            let req = qa_prompt(r, &cfg).unwrap();
            m.insert(&req.prompt, req.temperature, req.seed, &format!("Q: what is {}?\nA: {}", r.image_ref, r.image_ref));
        }
        let report = synthesize(&records, &m, &cfg, 2).unwrap();
        let refs: Vec<_> = report.samples.iter().map(|s| s.image_ref.clone().unwrap()).collect();
        assert_eq!(refs, vec!["img-0", "img-1", "img-2"]);
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].0, "img-3");
    }

    fn captioned(id: &str, answer: &str) -> Sample {
        let mut s = Sample::new(id, CapabilityTag::Perception, "q?", answer);
        s.caption = Some("c".into());
        s
    }

    fn verdict_answerer(id: &str, image_right: bool, caption_right: bool) -> ScriptedAnswerer {
        let mut a = ScriptedAnswerer::new();
        let pick = |right: bool| if right { "gold".to_string() } else { "wrong".to_string() };
        a.script(id, Pathway::Image, vec![pick(image_right)]);
        a.script(id, Pathway::Caption, vec![pick(caption_right)]);
        a
    }

    #[test]
    fn pathway_definitions() {
        let s = captioned("s", "Gold.");
        for (img, cap) in [(true, true), (false, true), (false, false)] {
            let a = verdict_answerer("s", img, cap);
            let v = evaluate_pathways(&s, &a).unwrap();
            assert_eq!((v.image_correct, v.caption_correct), (img, cap));
        }
    }

    #[test]
    fn single_evaluator_truth_table() {
        let s = captioned("s", "gold");
        for (img, cap, keep) in [(false, true, true), (false, false, false), (true, true, false), (true, false, false)] {
            let a = verdict_answerer("s", img, cap);
            let out = perception_filter(std::slice::from_ref(&s), &[&a], Execution::Sequential).unwrap();
            assert_eq!(out.decisions[0].retained, keep);
            assert_eq!(out.retained.len(), keep as usize);
        }
    }

    #[test]
    fn conjunction_over_evaluators() {
        let s = captioned("s", "gold");
        let e1 = verdict_answerer("s", false, true);
        let e2 = verdict_answerer("s", false, false);
        let out = perception_filter(std::slice::from_ref(&s), &[&e1, &e2], Execution::Sequential).unwrap();
        assert!(!out.decisions[0].retained);
        assert_eq!(out.decisions[0].verdicts.len(), 2);
    }

    #[test]
    fn evaluator_failure_drops_sample() {
        let s = captioned("s", "gold");
        let mut a = verdict_answerer("s", false, true);
        a.script_failure("s", Pathway::Caption, "timeout");
        let out = perception_filter(std::slice::from_ref(&s), &[&a], Execution::Sequential).unwrap();
        assert!(!out.decisions[0].retained);
        assert!(out.decisions[0].error.as_deref().unwrap().contains("timeout"));
        assert_eq!(out.errors(), 1);
    }

    #[test]
    fn filter_preconditions() {
        let s = captioned("s", "gold");
        assert!(perception_filter(std::slice::from_ref(&s), &[], Execution::Sequential).is_err());
        let bare = Sample::new("b", CapabilityTag::Perception, "q", "a");
        let a = ScriptedAnswerer::new();
        assert!(perception_filter(&[bare], &[&a], Execution::Sequential).is_err());
    }

    proptest! {
        #[test]
        fn filter_matches_predicate(flags in prop::collection::vec((any::<bool>(), any::<bool>(), any::<bool>(), any::<bool>()), 1..40)) {
            let samples: Vec<Sample> = (0..flags.len()).map(|i| captioned(&format!("s{i}"), "gold")).collect();
            let mut e1 = ScriptedAnswerer::new();
            let mut e2 = ScriptedAnswerer::new();
            for (i, (a, b, c, d)) in flags.iter().enumerate() {
                let pick = |r: bool| vec![if r { "gold".to_string() } else { "no".to_string() }];
                let id = format!("s{i}");
                e1.script(&id, Pathway::Image, pick(*a));
                e1.script(&id, Pathway::Caption, pick(*b));
                e2.script(&id, Pathway::Image, pick(*c));
                e2.script(&id, Pathway::Caption, pick(*d));
            }
            let out = perception_filter(&samples, &[&e1, &e2], Execution::Parallel).unwrap();
            let expected: Vec<String> = flags
                .iter()
                .enumerate()
                .filter(|(_, (a, b, c, d))| !a && *b && !c && *d)
                .map(|(i, _)| format!("s{i}"))
                .collect();
            let got: Vec<String> = out.retained.iter().map(|s| s.id.clone()).collect();
            prop_assert_eq!(got, expected);
        }
    }

    #[test]
    fn policy_answerer_is_deterministic() {
        use crate::env::{make_dataset, EnvParams};
        let tasks = make_dataset(CapabilityTag::Perception, 3, &EnvParams::default(), 1).unwrap();
        let a = PolicyAnswerer::new(PolicyParams::random(5, 1.0, &mut rollout_rng(2)), 8, 3);
        for t in &tasks {
            let x = a.answer(&t.sample, Pathway::Image, 1.0, 4).unwrap();
            assert_eq!(x, a.answer(&t.sample, Pathway::Image, 1.0, 4).unwrap());
            assert!(x.parse::<u32>().unwrap() < 5);
        }
    }

    #[test]
    fn client_answerer_uses_pathway_templates() {
        let s = captioned("s", "gold");
        let mut m = MockClient::new();
        let ca = ClientAnswerer::new(MockClient::new(), 9);
        let img = ca.request(&s, Pathway::Image, 0.0, 0).unwrap();
        let cap = ca.request(&s, Pathway::Caption, 0.0, 0).unwrap();
        assert!(img.prompt.contains("[image: s]"));
        assert!(cap.prompt.contains("Image description: c"));
        m.insert(&img.prompt, 0.0, img.seed, "wrong");
        m.insert(&cap.prompt, 0.0, cap.seed, "<think>x</think><answer>Gold</answer>");
        let ca = ClientAnswerer { client: m, ..ca };
        let v = evaluate_pathways(&s, &ca).unwrap();
        assert!(v.perception_deficient());
    }
}
