//! Synthetic compositional scene tasks.
//!
//! A scene is `D` latent attributes over an alphabet of `V` symbols. Perception tasks
//! ask for one attribute through a noisy channel; reasoning tasks combine two
//! attributes with an operator. Text reasoning sees clean symbols; visual
//! reasoning sees them through the same noisy channel as perception, so perception
//! skill bounds visual-reasoning accuracy.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::exec::{derive_seed, Execution};
use crate::rewards::FormatSpec;
use crate::types::{CapabilityTag, Sample};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    InvalidConfig(String),
    #[error("malformed trajectory: {0}")]
    MalformedTrajectory(String),
    #[error("sample {id} is not a scene task: {reason}")]
    NotSceneTask { id: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpCode {
    Add,
    Sub,
    Max,
}

impl OpCode {
    pub const ALL: [OpCode; 3] = [OpCode::Add, OpCode::Sub, OpCode::Max];

    pub fn index(self) -> usize {
        match self {
            OpCode::Add => 0,
            OpCode::Sub => 1,
            OpCode::Max => 2,
        }
    }

    /// Applies the operator; Add and Sub wrap modulo `vocab`.
    pub fn apply(self, a: u32, b: u32, vocab: u32) -> u32 {
        match self {
            OpCode::Add => (a + b) % vocab,
            OpCode::Sub => (a as i64 - b as i64).rem_euclid(vocab as i64) as u32,
            OpCode::Max => a.max(b),
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            OpCode::Add => "add",
            OpCode::Sub => "sub",
            OpCode::Max => "max",
        }
    }
}

impl fmt::Display for OpCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpCode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "add" => Ok(OpCode::Add),
            "sub" => Ok(OpCode::Sub),
            "max" => Ok(OpCode::Max),
            o => Err(format!("unknown op `{o}`")),
        }
    }
}

/// Scene-family parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvParams {
    pub vocab: usize,
    pub attributes: usize,
    pub eta: f64,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            vocab: 5,
            attributes: 4,
            eta: 0.25,
        }
    }
}

impl EnvParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.vocab < 2 {
            return Err(EnvError::InvalidConfig(format!("V = {} < 2", self.vocab)));
        }
        if self.attributes < 1 {
            return Err(EnvError::InvalidConfig("D must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.eta) {
            return Err(EnvError::InvalidConfig(format!("eta {} outside [0, 0.5)", self.eta)));
        }
        Ok(())
    }
}

/// A sample together with its latent scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTask {
    pub sample: Sample,
    pub scene: Vec<u32>,
    pub op: Option<OpCode>,
    pub query_slots: Vec<usize>,
    pub noise_eta: f64,
    pub vocab: usize,
}

impl SceneTask {
    pub fn capability(&self) -> CapabilityTag {
        self.sample.capability
    }

    pub fn gold(&self) -> u32 {
        gold_answer(&self.scene, &self.query_slots, self.op, self.vocab as u32)
    }

    /// Rebuilds a task from a persisted sample (scene in `features`, the rest in `meta`).
    pub fn from_sample(sample: &Sample) -> Result<Self, EnvError> {
        let bad = |reason: &str| EnvError::NotSceneTask {
            id: sample.id.clone(),
            reason: reason.to_string(),
        };
        let features = sample.features.as_ref().ok_or_else(|| bad("no features"))?;
        let scene: Vec<u32> = features
            .iter()
            .map(|v| {
                if *v >= 0.0 && v.fract() == 0.0 {
                    Ok(*v as u32)
                } else {
                    Err(bad("scene features must be nonnegative integers"))
                }
            })
            .collect::<Result<_, _>>()?;
        let get = |k: &str| sample.meta.get(k).ok_or_else(|| bad(&format!("meta.{k} missing")));
        let vocab: usize = get("vocab")?.parse().map_err(|_| bad("meta.vocab"))?;
        let noise_eta: f64 = get("eta")?.parse().map_err(|_| bad("meta.eta"))?;
        let query_slots: Vec<usize> = get("slots")?
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<_, _>>()
            .map_err(|_| bad("meta.slots"))?;
        let op = match sample.meta.get("op") {
            Some(s) => Some(s.parse::<OpCode>().map_err(|e| bad(&e))?),
            None => None,
        };
        let task = SceneTask {
            sample: sample.clone(),
            scene,
            op,
            query_slots,
            noise_eta,
            vocab,
        };
        task.validate().map_err(|e| bad(&e))?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.vocab < 2 || self.scene.is_empty() {
            return Err("V >= 2 and D >= 1 required".into());
        }
        if self.scene.iter().any(|&v| v as usize >= self.vocab) {
            return Err("scene value out of alphabet".into());
        }
        if self.query_slots.iter().any(|&s| s >= self.scene.len()) {
            return Err("query slot out of range".into());
        }
        let reasoning = self.capability().is_reasoning();
        match (reasoning, self.query_slots.len(), self.op) {
            (false, 1, None) | (true, 2, Some(_)) => {}
            _ => return Err("slot/op shape does not match capability".into()),
        }
        if self.capability() == CapabilityTag::TextReasoning && self.noise_eta != 0.0 {
            return Err("text reasoning observations must be clean".into());
        }
        if self.sample.answer != self.gold().to_string() {
            return Err("stored answer disagrees with scene".into());
        }
        Ok(())
    }

    /// Per-block true symbols in query order.
    pub fn queried_values(&self) -> Vec<u32> {
        self.query_slots.iter().map(|&s| self.scene[s]).collect()
    }
}

pub fn gold_answer(scene: &[u32], slots: &[usize], op: Option<OpCode>, vocab: u32) -> u32 {
    match op {
        None => scene[slots[0]],
        Some(op) => op.apply(scene[slots[0]], scene[slots[1]], vocab),
    }
}

fn capability_prefix(c: CapabilityTag) -> &'static str {
    match c {
        CapabilityTag::Perception => "perc",
        CapabilityTag::TextReasoning => "text",
        CapabilityTag::VisualReasoning => "vis",
    }
}

fn make_task(capability: CapabilityTag, index: usize, env: &EnvParams, seed: u64) -> SceneTask {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[capability.index() as u64, index as u64]));
    let v = env.vocab as u32;
    let scene: Vec<u32> = (0..env.attributes).map(|_| rng.gen_range(0..v)).collect();
    let first = rng.gen_range(0..env.attributes);
    let (slots, op) = if capability.is_reasoning() {
        let second = if env.attributes > 1 {
            let s = rng.gen_range(0..env.attributes - 1);
            if s >= first {
                s + 1
            } else {
                s
            }
        } else {
            first
        };
        let op = OpCode::ALL[rng.gen_range(0..OpCode::ALL.len())];
        (vec![first, second], Some(op))
    } else {
        (vec![first], None)
    };
    let noise_eta = match capability {
        CapabilityTag::TextReasoning => 0.0,
        _ => env.eta,
    };
    let answer = gold_answer(&scene, &slots, op, v);
    let question = match (capability, op) {
        (CapabilityTag::Perception, _) => format!("What is the value of attribute {}?", slots[0]),
        (CapabilityTag::TextReasoning, Some(op)) => format!(
            "Attribute {} is {} and attribute {} is {}. What is {op} of the two (mod {v})?",
            slots[0], scene[slots[0]], slots[1], scene[slots[1]]
        ),
        (_, Some(op)) => format!(
            "Looking at the scene, what is {op} of attributes {} and {} (mod {v})?",
            slots[0], slots[1]
        ),
        (_, None) => unreachable!("reasoning tasks always carry an op"),
    };
    let mut meta = BTreeMap::new();
    meta.insert("vocab".to_string(), env.vocab.to_string());
    meta.insert("eta".to_string(), noise_eta.to_string());
    meta.insert(
        "slots".to_string(),
        slots.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","),
    );
    if let Some(op) = op {
        meta.insert("op".to_string(), op.to_string());
    }
    let sample = Sample {
        id: format!("{}-{index:05}", capability_prefix(capability)),
        capability,
        question,
        answer: answer.to_string(),
        caption: Some(format!(
            "Scene attributes: {}",
            scene.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
        )),
        image_ref: Some(format!("scene-{seed}-{}-{index}", capability_prefix(capability))),
        features: Some(scene.iter().map(|&x| x as f64).collect()),
        difficulty: None,
        meta,
    };
    SceneTask {
        sample,
        scene,
        op,
        query_slots: slots,
        noise_eta,
        vocab: env.vocab,
    }
}

/// Deterministic dataset of `count` tasks; each task draws from its own derived seed.
pub fn make_dataset(
    capability: CapabilityTag,
    count: usize,
    env: &EnvParams,
    seed: u64,
) -> Result<Vec<SceneTask>, EnvError> {
    make_dataset_with(Execution::default(), capability, count, env, seed)
}

pub fn make_dataset_with(
    exec: Execution,
    capability: CapabilityTag,
    count: usize,
    env: &EnvParams,
    seed: u64,
) -> Result<Vec<SceneTask>, EnvError> {
    env.validate()?;
    if count == 0 {
        return Err(EnvError::InvalidConfig("count must be >= 1".into()));
    }
    Ok(exec.map_range(count, |i| make_task(capability, i, env, seed)))
}

/// Averaged observation of the queried attributes after some number of looks.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub blocks: Vec<Vec<f64>>,
    pub op_onehot: Vec<f64>,
    pub looks_used: usize,
}

/// Incremental noisy channel: each call to [`ObservationStream::look`] adds one
/// independent corrupted one-hot per queried attribute.
#[derive(Debug, Clone)]
pub struct ObservationStream {
    rng: ChaCha8Rng,
    truth: Vec<u32>,
    vocab: usize,
    eta: f64,
    counts: Vec<Vec<u32>>,
    looks: usize,
}

impl ObservationStream {
    pub fn new(task: &SceneTask, seed: u64) -> Self {
        Self::from_rng(task, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng(task: &SceneTask, rng: ChaCha8Rng) -> Self {
        let truth = task.queried_values();
        ObservationStream {
            rng,
            counts: vec![vec![0; task.vocab]; truth.len()],
            truth,
            vocab: task.vocab,
            eta: task.noise_eta,
            looks: 0,
        }
    }

    pub fn look(&mut self) {
        for (b, &t) in self.truth.iter().enumerate() {
            // Both draws happen every look so the stream consumption is fixed.
            let u: f64 = self.rng.gen();
            let w = self.rng.gen_range(0..self.vocab as u32 - 1);
            let seen = if u < self.eta {
                if w >= t {
                    w + 1
                } else {
                    w
                }
            } else {
                t
            };
            self.counts[b][seen as usize] += 1;
        }
        self.looks += 1;
    }

    pub fn looks(&self) -> usize {
        self.looks
    }

    /// Per-block symbol counts so far.
    pub fn counts(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|c| c.iter().map(|&n| n as f64).collect())
            .collect()
    }

    /// Current averaged blocks; each sums to 1 once at least one look was taken.
    pub fn blocks(&self) -> Vec<Vec<f64>> {
        let denom = self.looks.max(1) as f64;
        self.counts
            .iter()
            .map(|c| c.iter().map(|&n| n as f64 / denom).collect())
            .collect()
    }
}

fn op_onehot(op: Option<OpCode>) -> Vec<f64> {
    let mut v = vec![0.0; OpCode::ALL.len()];
    if let Some(op) = op {
        v[op.index()] = 1.0;
    }
    v
}

/// Takes `looks` noisy looks at the task's queried attributes and averages them.
pub fn observe(task: &SceneTask, looks: usize, rng: &mut ChaCha8Rng) -> Observation {
    let looks = looks.max(1);
    let mut stream = ObservationStream::from_rng(task, ChaCha8Rng::from_seed(rng.gen()));
    for _ in 0..looks {
        stream.look();
    }
    Observation {
        blocks: stream.blocks(),
        op_onehot: op_onehot(task.op),
        looks_used: looks,
    }
}

/// Token ids: `0` is LOOK, `1 + a` answers symbol `a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenTable {
    pub answers: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Token {
    Look,
    Answer(u32),
}

impl TokenTable {
    pub const LOOK: u32 = 0;

    pub fn new(answers: usize) -> Self {
        TokenTable { answers }
    }

    pub fn answer(&self, symbol: u32) -> u32 {
        symbol + 1
    }

    pub fn decode(&self, token: u32) -> Option<Token> {
        match token {
            0 => Some(Token::Look),
            t if (t as usize) <= self.answers => Some(Token::Answer(t - 1)),
            _ => None,
        }
    }
}

/// Renders LOOK tokens inside the think block and the answer symbol inside the answer block.
pub fn render_transcript(
    tokens: &[u32],
    spec: &FormatSpec,
    vocab: &TokenTable,
) -> Result<String, EnvError> {
    let (last, prefix) = tokens
        .split_last()
        .ok_or_else(|| EnvError::MalformedTrajectory("empty trajectory".into()))?;
    let answer = match vocab.decode(*last) {
        Some(Token::Answer(a)) => a,
        _ => {
            return Err(EnvError::MalformedTrajectory(
                "trajectory does not end with an answer token".into(),
            ))
        }
    };
    if prefix.iter().any(|&t| vocab.decode(t) != Some(Token::Look)) {
        return Err(EnvError::MalformedTrajectory(
            "only LOOK tokens may precede the answer".into(),
        ));
    }
    let think = vec!["look"; prefix.len()].join(" ");
    Ok(format!(
        "{}{think}{}{}{answer}{}",
        spec.think_open, spec.think_close, spec.answer_open, spec.answer_close
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rewards::composite_reward;

    fn env(eta: f64) -> EnvParams {
        EnvParams {
            vocab: 5,
            attributes: 4,
            eta,
        }
    }

    fn task_with(cap: CapabilityTag, scene: Vec<u32>, slots: Vec<usize>, op: Option<OpCode>, eta: f64) -> SceneTask {
        let answer = gold_answer(&scene, &slots, op, 5);
        SceneTask {
            sample: Sample::new("t", cap, "q", answer.to_string()),
            scene,
            op,
            query_slots: slots,
            noise_eta: eta,
            vocab: 5,
        }
    }

    #[test]
    fn perception_gold_is_attribute_value() {
        let t = task_with(CapabilityTag::Perception, vec![0, 3, 1, 2], vec![1], None, 0.25);
        assert_eq!(t.gold(), 3);
        assert!(t.validate().is_ok());
    }

    #[test]
    fn modular_ops() {
        // oracle: walk around the cycle one symbol at a time
        let walk = |start: u32, steps: u32, forward: bool| {
            let mut x = start;
            for _ in 0..steps {
                x = if forward { (x + 1) % 5 } else if x == 0 { 4 } else { x - 1 };
            }
            x
        };
        for a in 0..5u32 {
            for b in 0..5u32 {
                assert_eq!(OpCode::Add.apply(a, b, 5), walk(a, b, true));
                assert_eq!(OpCode::Sub.apply(a, b, 5), walk(a, b, false));
                assert_eq!(OpCode::Max.apply(a, b, 5), if a > b { a } else { b });
            }
        }
        let t = task_with(CapabilityTag::TextReasoning, vec![2, 4, 0, 0], vec![0, 1], Some(OpCode::Add), 0.0);
        assert_eq!(t.gold(), 1);
    }

    #[test]
    fn datasets_are_deterministic_and_valid() {
        for cap in CapabilityTag::ALL {
            let a = make_dataset(cap, 50, &env(0.25), 11).unwrap();
            let b = make_dataset_with(Execution::Sequential, cap, 50, &env(0.25), 11).unwrap();
            assert_eq!(a, b);
            for t in &a {
                t.validate().unwrap();
                assert_eq!(t.capability(), cap);
                let back = SceneTask::from_sample(&t.sample).unwrap();
                assert_eq!(&back, t);
            }
            let c = make_dataset(cap, 50, &env(0.25), 12).unwrap();
            assert_ne!(a, c);
        }
        let text = make_dataset(CapabilityTag::TextReasoning, 10, &env(0.25), 1).unwrap();
        assert!(text.iter().all(|t| t.noise_eta == 0.0));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(make_dataset(CapabilityTag::Perception, 0, &env(0.1), 1).is_err());
        assert!(make_dataset(CapabilityTag::Perception, 1, &env(0.5), 1).is_err());
        let mut e = env(0.1);
        e.vocab = 1;
        assert!(make_dataset(CapabilityTag::Perception, 1, &e, 1).is_err());
    }

    #[test]
    fn clean_observation_is_exact_onehot() {
        let t = task_with(CapabilityTag::VisualReasoning, vec![1, 4, 2, 0], vec![1, 2], Some(OpCode::Max), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for looks in [1, 2, 7] {
            let o = observe(&t, looks, &mut rng);
            assert_eq!(o.blocks[0], vec![0.0, 0.0, 0.0, 0.0, 1.0]);
            assert_eq!(o.blocks[1], vec![0.0, 0.0, 1.0, 0.0, 0.0]);
            assert_eq!(o.looks_used, looks);
            assert_eq!(o.op_onehot, vec![0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn noisy_observation_reproducible() {
        let t = task_with(CapabilityTag::Perception, vec![3, 0, 0, 0], vec![0], None, 0.3);
        let a = observe(&t, 1, &mut ChaCha8Rng::seed_from_u64(9));
        let b = observe(&t, 1, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        for o in [a, observe(&t, 5, &mut ChaCha8Rng::seed_from_u64(1))] {
            let s: f64 = o.blocks[0].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(o.blocks[0].iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn many_looks_recover_truth() {
        let t = task_with(CapabilityTag::Perception, vec![2, 0, 0, 0], vec![0], None, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut hits = 0;
        for _ in 0..1000 {
            let o = observe(&t, 64, &mut rng);
            let arg = o.blocks[0]
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            hits += (arg == 2) as usize;
        }
        assert!(hits as f64 / 1000.0 >= 0.99, "{hits}");
    }

    #[test]
    fn corruption_rate_matches_eta() {
        let t = task_with(CapabilityTag::Perception, vec![4, 0, 0, 0], vec![0], None, 0.25);
        let mut stream = ObservationStream::new(&t, 77);
        let n = 40_000;
        for _ in 0..n {
            stream.look();
        }
        let wrong = 1.0 - stream.blocks()[0][4];
        // 4 sigma binomial band
        let sd = (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((wrong - 0.25).abs() < 4.0 * sd, "{wrong}");
    }

    fn bayes_accuracy(tasks: &[SceneTask], seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hits = 0usize;
        for t in tasks {
            let o = observe(t, 1, &mut rng);
            let v = t.vocab;
            let eta = t.noise_eta;
            let post = |obs: &Vec<f64>, a: usize| if obs[a] > 0.5 { 1.0 - eta } else { eta / (v as f64 - 1.0) };
            let best = (0..v as u32)
                .map(|c| {
                    let p: f64 = match t.op {
                        None => post(&o.blocks[0], c as usize),
                        Some(op) => (0..v as u32)
                            .flat_map(|a| (0..v as u32).map(move |b| (a, b)))
                            .filter(|&(a, b)| op.apply(a, b, v as u32) == c)
                            .map(|(a, b)| post(&o.blocks[0], a as usize) * post(&o.blocks[1], b as usize))
                            .sum(),
                    };
                    (c, p)
                })
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .unwrap()
                .0;
            hits += (best == t.gold()) as usize;
        }
        hits as f64 / tasks.len() as f64
    }

    #[test]
    fn perception_bounds_visual_reasoning() {
        for seed in 0..5 {
            let perc = make_dataset(CapabilityTag::Perception, 2000, &env(0.25), seed).unwrap();
            let vis = make_dataset(CapabilityTag::VisualReasoning, 2000, &env(0.25), seed).unwrap();
            let clean = make_dataset(CapabilityTag::Perception, 200, &env(0.0), seed).unwrap();
            assert_eq!(bayes_accuracy(&clean, seed), 1.0);
            let p = bayes_accuracy(&perc, seed + 100);
            let r = bayes_accuracy(&vis, seed + 200);
            assert!(r <= p, "seed {seed}: vis {r} > perc {p}");
        }
    }

    #[test]
    fn render_examples() {
        let spec = FormatSpec::default();
        let tt = TokenTable::new(5);
        let look = TokenTable::LOOK;
        assert_eq!(
            render_transcript(&[look, look, tt.answer(3)], &spec, &tt).unwrap(),
            "<think>look look</think><answer>3</answer>"
        );
        assert_eq!(
            render_transcript(&[tt.answer(0)], &spec, &tt).unwrap(),
            "<think></think><answer>0</answer>"
        );
        assert!(matches!(
            render_transcript(&[look], &spec, &tt),
            Err(EnvError::MalformedTrajectory(_))
        ));
        assert!(render_transcript(&[tt.answer(1), tt.answer(2)], &spec, &tt).is_err());
    }

    #[test]
    fn rendered_gold_earns_accuracy() {
        let spec = FormatSpec::default();
        let tt = TokenTable::new(5);
        for t in make_dataset(CapabilityTag::VisualReasoning, 20, &env(0.25), 5).unwrap() {
            let text = render_transcript(&[TokenTable::LOOK, tt.answer(t.gold())], &spec, &tt).unwrap();
            let r = composite_reward(&text, &t.sample.answer, &spec);
            assert_eq!(r.r_acc, 1.0);
            assert_eq!(r.r_format, spec.format_bonus);
        }
    }
}
