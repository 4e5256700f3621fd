//! Closed-form stochastic policy over the scene tasks.
//!
//! Three parameter blocks:
//! - `perception` (V×V): decodes an averaged observation block into a symbol
//!   distribution `q = softmax(W_p · o)`. Shared by perception and visual reasoning.
//! - `reasoning` (V × V·V·|ops|): answer logits from the bilinear interaction
//!   `q1 ⊗ q2 ⊗ onehot(op)`. Text reasoning feeds clean one-hots straight in.
//! - `halt` (4): logistic LOOK-vs-ANSWER head over `[task one-hot, confidence]`,
//!   where confidence is the mean collision probability `Σ q_i²` of the decoded blocks.
//!
//! A trajectory is `LOOK* ANSWER`. The first observation is free; each LOOK takes
//! one more look before the next decision. Observations are drawn from a seed stored
//! in the rollout, so log-probabilities and gradients replay exactly.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{render_transcript, ObservationStream, OpCode, SceneTask, Token, TokenTable};
use crate::rewards::FormatSpec;
use crate::types::{CapabilityTag, Rollout};

pub const HALT_FEATURES: usize = 4;
const CONFIDENCE: usize = 3;
const NUM_OPS: usize = OpCode::ALL.len();

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PolicyError {
    #[error("cannot replay rollout: {0}")]
    ReplayMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub vocab: usize,
    /// Row-major `[decoded symbol][observed symbol]`.
    pub perception: Vec<f64>,
    /// Row-major `[answer][(i * V + j) * ops + op]`.
    pub reasoning: Vec<f64>,
    pub halt: Vec<f64>,
    pub version: u64,
}

/// Starting point for a policy: a weak identity decoder, no reasoning table, and a
/// halting prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyInit {
    pub perception_scale: f64,
    pub reasoning_scale: f64,
    pub halt_bias: [f64; 3],
    pub confidence_weight: f64,
}

impl Default for PolicyInit {
    fn default() -> Self {
        PolicyInit {
            perception_scale: 1.0,
            reasoning_scale: 0.0,
            halt_bias: [0.0; 3],
            confidence_weight: 0.0,
        }
    }
}

impl PolicyParams {
    pub fn zeros(vocab: usize) -> Self {
        PolicyParams {
            vocab,
            perception: vec![0.0; vocab * vocab],
            reasoning: vec![0.0; vocab * reasoning_width(vocab)],
            halt: vec![0.0; HALT_FEATURES],
            version: 0,
        }
    }

    pub fn init(vocab: usize, init: &PolicyInit) -> Self {
        let mut p = Self::zeros(vocab);
        for i in 0..vocab {
            p.perception[i * vocab + i] = init.perception_scale;
        }
        if init.reasoning_scale != 0.0 {
            // answer table of the true operators, scaled
            let width = reasoning_width(vocab);
            for op in OpCode::ALL {
                for i in 0..vocab {
                    for j in 0..vocab {
                        let a = op.apply(i as u32, j as u32, vocab as u32) as usize;
                        p.reasoning[a * width + (i * vocab + j) * NUM_OPS + op.index()] =
                            init.reasoning_scale;
                    }
                }
            }
        }
        p.halt[..3].copy_from_slice(&init.halt_bias);
        p.halt[CONFIDENCE] = init.confidence_weight;
        p
    }

    /// Gaussian-ish random parameters for tests and property sweeps.
    pub fn random(vocab: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(vocab);
        p.for_each_block_mut(|block| {
            for x in block.iter_mut() {
                *x = scale * (rng.gen::<f64>() * 2.0 - 1.0);
            }
        });
        p
    }

    fn for_each_block_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(&mut self.perception);
        f(&mut self.reasoning);
        f(&mut self.halt);
    }

    pub fn check_shapes(&self) -> Result<(), PolicyError> {
        let v = self.vocab;
        if self.perception.len() != v * v
            || self.reasoning.len() != v * reasoning_width(v)
            || self.halt.len() != HALT_FEATURES
        {
            return Err(PolicyError::ShapeMismatch(format!(
                "params for V={v} have blocks {}/{}/{}",
                self.perception.len(),
                self.reasoning.len(),
                self.halt.len()
            )));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.perception
            .iter()
            .chain(&self.reasoning)
            .chain(&self.halt)
            .all(|x| x.is_finite())
    }

    pub fn zero_grad(&self) -> GradBlocks {
        GradBlocks {
            perception: vec![0.0; self.perception.len()],
            reasoning: vec![0.0; self.reasoning.len()],
            halt: vec![0.0; self.halt.len()],
        }
    }

    /// Flat view over all coordinates, perception first.
    pub fn flat(&self) -> Vec<f64> {
        self.perception
            .iter()
            .chain(&self.reasoning)
            .chain(&self.halt)
            .copied()
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.perception.len() + self.reasoning.len() + self.halt.len()
    }

    /// Mutable access to coordinate `k` of [`PolicyParams::flat`].
    pub fn coord_mut(&mut self, k: usize) -> &mut f64 {
        let (np, nr) = (self.perception.len(), self.reasoning.len());
        if k < np {
            &mut self.perception[k]
        } else if k < np + nr {
            &mut self.reasoning[k - np]
        } else {
            &mut self.halt[k - np - nr]
        }
    }
}

pub fn reasoning_width(vocab: usize) -> usize {
    vocab * vocab * NUM_OPS
}

/// Gradient- or update-shaped blocks matching [`PolicyParams`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradBlocks {
    pub perception: Vec<f64>,
    pub reasoning: Vec<f64>,
    pub halt: Vec<f64>,
}

impl GradBlocks {
    pub fn add_scaled(&mut self, other: &GradBlocks, c: f64) {
        for (a, b) in [
            (&mut self.perception, &other.perception),
            (&mut self.reasoning, &other.reasoning),
            (&mut self.halt, &other.halt),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x += c * y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for x in self
            .perception
            .iter_mut()
            .chain(self.reasoning.iter_mut())
            .chain(self.halt.iter_mut())
        {
            *x *= c;
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.perception
            .iter()
            .chain(&self.reasoning)
            .chain(&self.halt)
            .copied()
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|x| x.is_finite())
    }
}

/// `∇ log π(y|x)` for one trajectory, with the log-probability itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryGrad {
    pub grad: GradBlocks,
    pub logprob: f64,
}

/// `params + lr · delta`, with the version bumped. Inputs are left untouched.
pub fn apply_update(
    params: &PolicyParams,
    delta: &GradBlocks,
    lr: f64,
) -> Result<PolicyParams, PolicyError> {
    if delta.perception.len() != params.perception.len()
        || delta.reasoning.len() != params.reasoning.len()
        || delta.halt.len() != params.halt.len()
    {
        return Err(PolicyError::ShapeMismatch("update does not match params".into()));
    }
    if !delta.is_finite() {
        return Err(PolicyError::NonFinite("update".into()));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(PolicyError::NonFinite(format!("learning rate {lr}")));
    }
    let mut next = params.clone();
    for (p, d) in [
        (&mut next.perception, &delta.perception),
        (&mut next.reasoning, &delta.reasoning),
        (&mut next.halt, &delta.halt),
    ] {
        for (x, y) in p.iter_mut().zip(d) {
            *x += lr * y;
        }
    }
    if !next.is_finite() {
        return Err(PolicyError::NonFinite("updated params".into()));
    }
    next.version = params.version + 1;
    Ok(next)
}

fn log_sigmoid(x: f64) -> f64 {
    // log σ(x) = -softplus(-x)
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

fn matvec(mat: &[f64], rows: usize, x: &[f64]) -> Vec<f64> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            mat[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect()
}

fn task_onehot(c: CapabilityTag) -> [f64; 3] {
    let mut v = [0.0; 3];
    v[c.index()] = 1.0;
    v
}

/// Everything computed at one decision point.
#[derive(Debug, Clone)]
struct StateTrace {
    obs: Vec<Vec<f64>>,
    decoded: Vec<Vec<f64>>,
    /// Pre-softmax decoder output per block (perception-path tasks only).
    decoder_logits: Vec<Vec<f64>>,
    phi: [f64; HALT_FEATURES],
    halt_logit: f64,
}

#[derive(Debug, Clone)]
struct AnswerTrace {
    log_probs: Vec<f64>,
    features: Option<Vec<f64>>,
}

fn uses_decoder(c: CapabilityTag) -> bool {
    c != CapabilityTag::TextReasoning
}

/// Decoder input: symbol counts, so an identity decoder of scale
/// `ln((1 − η)(V − 1) / η)` yields the exact posterior over each attribute. Text
/// tasks read their clean one-hots directly.
fn evidence(task: &SceneTask, stream: &ObservationStream) -> Vec<Vec<f64>> {
    if uses_decoder(task.capability()) {
        stream.counts()
    } else {
        stream.blocks()
    }
}

fn state_forward(params: &PolicyParams, task: &SceneTask, obs: Vec<Vec<f64>>) -> StateTrace {
    let v = params.vocab;
    let (decoded, decoder_logits): (Vec<Vec<f64>>, Vec<Vec<f64>>) = if uses_decoder(task.capability()) {
        obs.iter()
            .map(|o| {
                let u = matvec(&params.perception, v, o);
                let q: Vec<f64> = log_softmax(&u).into_iter().map(f64::exp).collect();
                (q, u)
            })
            .unzip()
    } else {
        (obs.clone(), Vec::new())
    };
    let confidence = decoded
        .iter()
        .map(|q| q.iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        / decoded.len() as f64;
    let onehot = task_onehot(task.capability());
    let phi = [onehot[0], onehot[1], onehot[2], confidence];
    let halt_logit = phi.iter().zip(&params.halt).map(|(a, b)| a * b).sum();
    StateTrace {
        obs,
        decoded,
        decoder_logits,
        phi,
        halt_logit,
    }
}

fn interaction_features(q1: &[f64], q2: &[f64], op: OpCode) -> Vec<f64> {
    let v = q1.len();
    let mut f = vec![0.0; v * v * NUM_OPS];
    for i in 0..v {
        for j in 0..v {
            f[(i * v + j) * NUM_OPS + op.index()] = q1[i] * q2[j];
        }
    }
    f
}

fn answer_forward(params: &PolicyParams, task: &SceneTask, state: &StateTrace) -> AnswerTrace {
    match task.op {
        None => AnswerTrace {
            log_probs: log_softmax(&state.decoder_logits[0]),
            features: None,
        },
        Some(op) => {
            let f = interaction_features(&state.decoded[0], &state.decoded[1], op);
            let z = matvec(&params.reasoning, params.vocab, &f);
            AnswerTrace {
                log_probs: log_softmax(&z),
                features: Some(f),
            }
        }
    }
}

/// Answer distribution for an arbitrary averaged observation.
pub fn answer_distribution(params: &PolicyParams, task: &SceneTask, obs: Vec<Vec<f64>>) -> Vec<f64> {
    let state = state_forward(params, task, obs);
    answer_forward(params, task, &state)
        .log_probs
        .into_iter()
        .map(f64::exp)
        .collect()
}

/// Probability of LOOK for an arbitrary averaged observation.
pub fn look_probability(params: &PolicyParams, task: &SceneTask, obs: Vec<Vec<f64>>) -> f64 {
    sigmoid(state_forward(params, task, obs).halt_logit)
}

/// How halting decisions are made while sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HaltMode {
    Sample,
    /// LOOK iff its probability exceeds one half.
    Greedy,
}

fn sample_categorical(log_probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, lp) in log_probs.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    log_probs.len() - 1
}

/// Samples one trajectory. The observation seed is drawn first from `rng`.
pub fn sample_rollout(
    params: &PolicyParams,
    task: &SceneTask,
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Rollout {
    sample_rollout_with(params, task, max_len, rng, HaltMode::Sample, &FormatSpec::default())
}

pub fn sample_rollout_with(
    params: &PolicyParams,
    task: &SceneTask,
    max_len: usize,
    rng: &mut ChaCha8Rng,
    halt: HaltMode,
    format: &FormatSpec,
) -> Rollout {
    let max_len = max_len.max(1);
    let table = TokenTable::new(params.vocab);
    let obs_seed = rng.next_u64();
    let mut stream = ObservationStream::new(task, obs_seed);
    stream.look();
    let mut tokens = Vec::new();
    let mut step_logprobs = Vec::new();
    let mut truncated = false;
    loop {
        let state = state_forward(params, task, evidence(task, &stream));
        let halt_lp = if tokens.len() + 1 < max_len {
            let p_look = sigmoid(state.halt_logit);
            let look = match halt {
                HaltMode::Sample => rng.gen::<f64>() < p_look,
                HaltMode::Greedy => p_look > 0.5,
            };
            if look {
                tokens.push(TokenTable::LOOK);
                step_logprobs.push(log_sigmoid(state.halt_logit));
                stream.look();
                continue;
            }
            log_sigmoid(-state.halt_logit)
        } else {
            truncated = true;
            0.0
        };
        let answer = answer_forward(params, task, &state);
        let a = sample_categorical(&answer.log_probs, rng);
        tokens.push(table.answer(a as u32));
        step_logprobs.push(halt_lp + answer.log_probs[a]);
        break;
    }
    let transcript =
        render_transcript(&tokens, format, &table).expect("sampled trajectories end in an answer");
    let length = tokens.len();
    Rollout {
        sample_id: task.sample.id.clone(),
        answer_text: (tokens[length - 1] - 1).to_string(),
        transcript,
        tokens,
        step_logprobs,
        length,
        obs_seed: Some(obs_seed),
        truncated,
    }
}

/// Replayed forward pass over a recorded trajectory.
struct Replay {
    states: Vec<StateTrace>,
    answer: AnswerTrace,
    answer_symbol: usize,
    truncated: bool,
}

fn replay(params: &PolicyParams, task: &SceneTask, rollout: &Rollout) -> Result<Replay, PolicyError> {
    params.check_shapes()?;
    if params.vocab != task.vocab {
        return Err(PolicyError::ShapeMismatch(format!(
            "policy V={} but task V={}",
            params.vocab, task.vocab
        )));
    }
    let seed = rollout
        .obs_seed
        .ok_or_else(|| PolicyError::ReplayMismatch("rollout has no observation seed".into()))?;
    let table = TokenTable::new(params.vocab);
    let (last, prefix) = rollout
        .tokens
        .split_last()
        .ok_or_else(|| PolicyError::ReplayMismatch("empty rollout".into()))?;
    let answer_symbol = match table.decode(*last) {
        Some(Token::Answer(a)) => a as usize,
        _ => return Err(PolicyError::ReplayMismatch("rollout does not end in an answer".into())),
    };
    if prefix.iter().any(|&t| t != TokenTable::LOOK) {
        return Err(PolicyError::ReplayMismatch("non-LOOK token before the answer".into()));
    }
    let mut stream = ObservationStream::new(task, seed);
    stream.look();
    let mut states = Vec::with_capacity(rollout.tokens.len());
    for step in 0..rollout.tokens.len() {
        if step > 0 {
            stream.look();
        }
        states.push(state_forward(params, task, evidence(task, &stream)));
    }
    let answer = answer_forward(params, task, states.last().expect("nonempty"));
    Ok(Replay {
        states,
        answer,
        answer_symbol,
        truncated: rollout.truncated,
    })
}

impl Replay {
    fn step_logprobs(&self) -> Vec<f64> {
        let n = self.states.len();
        let mut out = Vec::with_capacity(n);
        for s in &self.states[..n - 1] {
            out.push(log_sigmoid(s.halt_logit));
        }
        let halt_lp = if self.truncated {
            0.0
        } else {
            log_sigmoid(-self.states[n - 1].halt_logit)
        };
        out.push(halt_lp + self.answer.log_probs[self.answer_symbol]);
        out
    }

    fn logprob_upstream(&self) -> Upstream {
        let n = self.states.len();
        let mut dh: Vec<f64> = self.states[..n - 1]
            .iter()
            .map(|s| 1.0 - sigmoid(s.halt_logit))
            .collect();
        dh.push(if self.truncated {
            0.0
        } else {
            -sigmoid(self.states[n - 1].halt_logit)
        });
        let dz = self
            .answer
            .log_probs
            .iter()
            .enumerate()
            .map(|(m, lp)| (m == self.answer_symbol) as u8 as f64 - lp.exp())
            .collect();
        Upstream { dh, dz }
    }
}

/// Gradients of a scalar with respect to each halt logit and the answer logits.
struct Upstream {
    dh: Vec<f64>,
    dz: Vec<f64>,
}

/// Backpropagates `g_q` through `q = softmax(u)`, `u = W_p o` into `g_wp`.
fn decoder_backward(q: &[f64], o: &[f64], g_q: &[f64], g_wp: &mut [f64]) {
    let v = q.len();
    let dot: f64 = q.iter().zip(g_q).map(|(a, b)| a * b).sum();
    for m in 0..v {
        let g_u = q[m] * (g_q[m] - dot);
        if g_u != 0.0 {
            for n in 0..v {
                g_wp[m * v + n] += g_u * o[n];
            }
        }
    }
}

fn backward(params: &PolicyParams, task: &SceneTask, replay: &Replay, up: &Upstream) -> GradBlocks {
    let v = params.vocab;
    let mut g = params.zero_grad();
    let decoder = uses_decoder(task.capability());
    for (state, &dh) in replay.states.iter().zip(&up.dh) {
        if dh == 0.0 {
            continue;
        }
        for (gh, phi) in g.halt.iter_mut().zip(&state.phi) {
            *gh += dh * phi;
        }
        if decoder {
            let g_c = dh * params.halt[CONFIDENCE];
            let nb = state.decoded.len() as f64;
            for (q, o) in state.decoded.iter().zip(&state.obs) {
                let g_q: Vec<f64> = q.iter().map(|x| g_c * 2.0 * x / nb).collect();
                decoder_backward(q, o, &g_q, &mut g.perception);
            }
        }
    }
    let last = replay.states.last().expect("nonempty");
    match (task.op, &replay.answer.features) {
        (None, _) => {
            // answer logits are the decoder logits of the single block
            let o = &last.obs[0];
            for m in 0..v {
                for n in 0..v {
                    g.perception[m * v + n] += up.dz[m] * o[n];
                }
            }
        }
        (Some(op), Some(f)) => {
            let width = f.len();
            let mut g_f = vec![0.0; width];
            for a in 0..v {
                let dz = up.dz[a];
                let row = &params.reasoning[a * width..(a + 1) * width];
                let g_row = &mut g.reasoning[a * width..(a + 1) * width];
                for k in 0..width {
                    g_row[k] += dz * f[k];
                    g_f[k] += dz * row[k];
                }
            }
            if decoder {
                let (q1, q2) = (&last.decoded[0], &last.decoded[1]);
                let mut g_q1 = vec![0.0; v];
                let mut g_q2 = vec![0.0; v];
                for i in 0..v {
                    for j in 0..v {
                        let gf = g_f[(i * v + j) * NUM_OPS + op.index()];
                        g_q1[i] += gf * q2[j];
                        g_q2[j] += gf * q1[i];
                    }
                }
                decoder_backward(q1, &last.obs[0], &g_q1, &mut g.perception);
                decoder_backward(q2, &last.obs[1], &g_q2, &mut g.perception);
            }
        }
        (Some(_), None) => unreachable!("reasoning answers carry features"),
    }
    g
}

/// Log-probability of a recorded rollout under `params`.
pub fn logprob(params: &PolicyParams, task: &SceneTask, rollout: &Rollout) -> Result<f64, PolicyError> {
    Ok(replay(params, task, rollout)?.step_logprobs().iter().sum())
}

/// Per-token log-probabilities of a recorded rollout under `params`.
pub fn step_logprobs(
    params: &PolicyParams,
    task: &SceneTask,
    rollout: &Rollout,
) -> Result<Vec<f64>, PolicyError> {
    Ok(replay(params, task, rollout)?.step_logprobs())
}

/// Exact analytic `∇ log π(rollout)`.
pub fn grad_logprob(
    params: &PolicyParams,
    task: &SceneTask,
    rollout: &Rollout,
) -> Result<TrajectoryGrad, PolicyError> {
    let r = replay(params, task, rollout)?;
    let logprob = r.step_logprobs().iter().sum();
    let grad = backward(params, task, &r, &r.logprob_upstream());
    Ok(TrajectoryGrad { grad, logprob })
}

/// Sum over visited states of the exact per-state KL(π_θ(·|s) ‖ π_ref(·|s)),
/// with its gradient in θ.
pub fn stepwise_kl(
    params: &PolicyParams,
    reference: &PolicyParams,
    task: &SceneTask,
    rollout: &Rollout,
) -> Result<(f64, GradBlocks), PolicyError> {
    let cur = replay(params, task, rollout)?;
    let rf = replay(reference, task, rollout)?;
    let n = cur.states.len();
    let mut kl = 0.0;
    let mut dh = vec![0.0; n];
    for s in 0..n {
        if s == n - 1 && cur.truncated {
            continue;
        }
        let (h, hr) = (cur.states[s].halt_logit, rf.states[s].halt_logit);
        let p = sigmoid(h);
        // KL(Bern(p) ‖ Bern(pr)) in a numerically stable log form
        let kl_b = p * (log_sigmoid(h) - log_sigmoid(hr)) + (1.0 - p) * (log_sigmoid(-h) - log_sigmoid(-hr));
        kl += kl_b;
        dh[s] = p * (1.0 - p) * (h - hr);
    }
    let lp = &cur.answer.log_probs;
    let lq = &rf.answer.log_probs;
    let kl_c: f64 = lp.iter().zip(lq).map(|(a, b)| a.exp() * (a - b)).sum();
    kl += kl_c;
    let dz = lp
        .iter()
        .zip(lq)
        .map(|(a, b)| a.exp() * (a - b - kl_c))
        .collect();
    let grad = backward(params, task, &cur, &Upstream { dh, dz });
    Ok((kl, grad))
}

/// Builds a trajectory that looks `looks` times and then answers `answer`,
/// with log-probabilities filled in under `params`.
pub fn scripted_rollout(
    params: &PolicyParams,
    task: &SceneTask,
    looks: usize,
    answer: u32,
    obs_seed: u64,
    format: &FormatSpec,
) -> Result<Rollout, PolicyError> {
    let table = TokenTable::new(params.vocab);
    let mut tokens = vec![TokenTable::LOOK; looks];
    tokens.push(table.answer(answer));
    let transcript = render_transcript(&tokens, format, &table)
        .map_err(|e| PolicyError::ReplayMismatch(e.to_string()))?;
    let mut r = Rollout {
        sample_id: task.sample.id.clone(),
        length: tokens.len(),
        step_logprobs: vec![0.0; tokens.len()],
        tokens,
        transcript,
        answer_text: answer.to_string(),
        obs_seed: Some(obs_seed),
        truncated: false,
    };
    r.step_logprobs = step_logprobs(params, task, &r)?;
    Ok(r)
}

/// Convenience: a fresh stream seeded from `seed` for [`sample_rollout`].
pub fn rollout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_dataset, EnvParams};

    fn tasks(seed: u64) -> Vec<SceneTask> {
        let env = EnvParams::default();
        CapabilityTag::ALL
            .iter()
            .flat_map(|&c| make_dataset(c, 12, &env, seed).unwrap())
            .collect()
    }

    fn fd_grad(params: &PolicyParams, f: impl Fn(&PolicyParams) -> f64, h: f64) -> Vec<f64> {
        let mut p = params.clone();
        (0..params.num_params())
            .map(|k| {
                let x = *p.coord_mut(k);
                *p.coord_mut(k) = x + h;
                let up = f(&p);
                *p.coord_mut(k) = x - h;
                let down = f(&p);
                *p.coord_mut(k) = x;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    /// Largest per-block `‖a − f‖∞ / max(‖f‖∞, 1e-2)`.
    fn block_rel_error(params: &PolicyParams, analytic: &[f64], fd: &[f64]) -> f64 {
        let np = params.perception.len();
        let nr = params.reasoning.len();
        let ranges = [(0, np), (np, np + nr), (np + nr, analytic.len())];
        ranges
            .iter()
            .map(|&(a, b)| {
                let diff = (a..b).map(|k| (analytic[k] - fd[k]).abs()).fold(0.0, f64::max);
                let scale = (a..b).map(|k| fd[k].abs()).fold(0.0, f64::max).max(1e-2);
                diff / scale
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn immediate_answer_when_halt_says_stop() {
        let mut params = PolicyParams::init(5, &PolicyInit::default());
        params.halt = vec![-50.0, -50.0, -50.0, 0.0];
        let mut rng = rollout_rng(1);
        for t in tasks(2) {
            let r = sample_rollout(&params, &t, 10, &mut rng);
            assert_eq!(r.length, 1);
            assert!(!r.truncated);
        }
    }

    #[test]
    fn always_look_truncates_at_max_len() {
        let mut params = PolicyParams::init(5, &PolicyInit::default());
        params.halt = vec![50.0, 50.0, 50.0, 0.0];
        let mut rng = rollout_rng(1);
        for t in tasks(3) {
            let r = sample_rollout(&params, &t, 3, &mut rng);
            assert_eq!(r.length, 3);
            assert_eq!(&r.tokens[..2], &[TokenTable::LOOK, TokenTable::LOOK]);
            assert_ne!(r.tokens[2], TokenTable::LOOK);
            assert!(r.truncated);
            assert!(r.transcript.starts_with("<think>look look</think><answer>"));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let params = PolicyParams::random(5, 1.0, &mut rollout_rng(4));
        for t in tasks(5) {
            let a = sample_rollout(&params, &t, 8, &mut rollout_rng(99));
            let b = sample_rollout(&params, &t, 8, &mut rollout_rng(99));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn replay_matches_recorded_logprobs() {
        let mut rng = rollout_rng(6);
        for trial in 0..20 {
            let params = PolicyParams::random(5, 2.0, &mut rng);
            for t in tasks(trial) {
                let r = sample_rollout(&params, &t, 6, &mut rng);
                r.check_invariants(6).unwrap();
                let lp = logprob(&params, &t, &r).unwrap();
                assert!((lp - r.total_logprob()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn replay_requires_seed() {
        let params = PolicyParams::zeros(5);
        let t = &tasks(1)[0];
        let mut r = sample_rollout(&params, t, 4, &mut rollout_rng(1));
        r.obs_seed = None;
        assert!(matches!(logprob(&params, t, &r), Err(PolicyError::ReplayMismatch(_))));
        assert!(matches!(grad_logprob(&params, t, &r), Err(PolicyError::ReplayMismatch(_))));
    }

    #[test]
    fn uniform_params_closed_form() {
        // zero params: uniform answers over 5 symbols, halt probability 1/2
        let params = PolicyParams::zeros(5);
        for t in tasks(7) {
            let r = scripted_rollout(&params, &t, 0, 2, 11, &FormatSpec::default()).unwrap();
            let expected = (1.0f64 / 5.0).ln() + 0.5f64.ln();
            assert!((logprob(&params, &t, &r).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn answer_distribution_normalized_and_finite() {
        let mut rng = rollout_rng(8);
        for _ in 0..200 {
            let params = PolicyParams::random(5, 5.0, &mut rng);
            for t in tasks(rng.gen_range(0..1000)).iter().step_by(5) {
                let obs: Vec<Vec<f64>> = t
                    .query_slots
                    .iter()
                    .map(|_| {
                        let raw: Vec<f64> = (0..5).map(|_| rng.gen::<f64>()).collect();
                        let s: f64 = raw.iter().sum();
                        raw.iter().map(|x| x / s).collect()
                    })
                    .collect();
                let p = answer_distribution(&params, t, obs.clone());
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-10);
                let pl = look_probability(&params, t, obs);
                assert!((0.0..=1.0).contains(&pl));
            }
        }
    }

    #[test]
    fn logprob_continuous_under_perturbation() {
        let mut rng = rollout_rng(9);
        let params = PolicyParams::random(5, 1.0, &mut rng);
        for t in tasks(10) {
            let r = sample_rollout(&params, &t, 5, &mut rng);
            let base = logprob(&params, &t, &r).unwrap();
            for scale in [1e-3, 1e-1, 1.0, 10.0] {
                let noise = PolicyParams::random(5, scale, &mut rng);
                let delta = GradBlocks {
                    perception: noise.perception,
                    reasoning: noise.reasoning,
                    halt: noise.halt,
                };
                let p2 = apply_update(&params, &delta, 1.0).unwrap();
                let lp = logprob(&p2, &t, &r).unwrap();
                assert!(lp.is_finite() && lp <= 0.0);
                if scale == 1e-3 {
                    assert!((lp - base).abs() < 0.1);
                }
            }
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = rollout_rng(10);
        let mut checked = 0;
        let mut worst: f64 = 0.0;
        while checked < 120 {
            let params = PolicyParams::random(5, 1.5, &mut rng);
            for t in tasks(rng.gen_range(0..10_000)).iter().step_by(4) {
                let r = sample_rollout(&params, t, 5, &mut rng);
                let g = grad_logprob(&params, t, &r).unwrap();
                let fd = fd_grad(&params, |p| logprob(p, t, &r).unwrap(), 1e-5);
                worst = worst.max(block_rel_error(&params, &g.grad.flat(), &fd));
                checked += 1;
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn directional_derivative() {
        let mut rng = rollout_rng(11);
        for t in tasks(12).iter().step_by(3) {
            let params = PolicyParams::random(5, 1.0, &mut rng);
            let r = sample_rollout(&params, t, 5, &mut rng);
            let g = grad_logprob(&params, t, &r).unwrap().grad;
            let d = PolicyParams::random(5, 1.0, &mut rng);
            let dir = GradBlocks {
                perception: d.perception,
                reasoning: d.reasoning,
                halt: d.halt,
            };
            let analytic: f64 = g.flat().iter().zip(dir.flat()).map(|(a, b)| a * b).sum();
            let h = 1e-5;
            let up = apply_update(&params, &dir, h).unwrap();
            let down = apply_update(&params, &dir, -h);
            // apply_update refuses non-positive lr, so step down by negating the direction
            assert!(down.is_err());
            let mut neg = dir.clone();
            neg.scale(-1.0);
            let down = apply_update(&params, &neg, h).unwrap();
            let fd = (logprob(&up, t, &r).unwrap() - logprob(&down, t, &r).unwrap()) / (2.0 * h);
            assert!((analytic - fd).abs() <= 1e-5 * analytic.abs().max(1.0), "{analytic} vs {fd}");
        }
    }

    #[test]
    fn zero_look_rollout_touches_one_halt_decision() {
        let mut params = PolicyParams::random(5, 1.0, &mut rollout_rng(12));
        params.halt[CONFIDENCE] = 0.0;
        let t = tasks(13).into_iter().find(|t| t.capability() == CapabilityTag::Perception).unwrap();
        let r = scripted_rollout(&params, &t, 0, 1, 5, &FormatSpec::default()).unwrap();
        let g = grad_logprob(&params, &t, &r).unwrap().grad;
        let p = sigmoid(params.halt[0]);
        // d/dh log(1 - σ(h)) = -σ(h) times the features [1, 0, 0, confidence]
        assert!((g.halt[0] + p).abs() < 1e-12);
        assert_eq!(&g.halt[1..3], &[0.0, 0.0]);
        assert!(g.halt[CONFIDENCE] < 0.0 && g.halt[CONFIDENCE] >= -p);
        assert!(g.reasoning.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn stepwise_kl_gradient_and_zero_at_reference() {
        let mut rng = rollout_rng(13);
        for t in tasks(14).iter().step_by(3) {
            let params = PolicyParams::random(5, 1.0, &mut rng);
            let reference = PolicyParams::random(5, 1.0, &mut rng);
            let r = sample_rollout(&params, t, 5, &mut rng);
            let (kl, g) = stepwise_kl(&params, &reference, t, &r).unwrap();
            assert!(kl >= 0.0);
            let fd = fd_grad(&params, |p| stepwise_kl(p, &reference, t, &r).unwrap().0, 1e-5);
            assert!(block_rel_error(&params, &g.flat(), &fd) < 1e-4);
            let (kl0, g0) = stepwise_kl(&params, &params, t, &r).unwrap();
            assert!(kl0.abs() < 1e-15);
            assert!(g0.norm() < 1e-12);
        }
    }

    #[test]
    fn update_semantics() {
        let params = PolicyParams::random(5, 1.0, &mut rollout_rng(14));
        let zero = params.zero_grad();
        let same = apply_update(&params, &zero, 0.1).unwrap();
        assert_eq!(same.flat(), params.flat());
        assert_eq!(same.version, params.version + 1);

        let d = PolicyParams::random(5, 1.0, &mut rollout_rng(15));
        let delta = GradBlocks {
            perception: d.perception,
            reasoning: d.reasoning,
            halt: d.halt,
        };
        let twice = apply_update(&apply_update(&params, &delta, 0.5).unwrap(), &delta, 0.5).unwrap();
        let once = apply_update(&params, &delta, 1.0).unwrap();
        for (a, b) in twice.flat().iter().zip(once.flat()) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut bad = delta.clone();
        bad.halt[0] = f64::NAN;
        assert!(matches!(apply_update(&params, &bad, 0.1), Err(PolicyError::NonFinite(_))));
        let mut short = delta;
        short.halt.pop();
        assert!(matches!(apply_update(&params, &short, 0.1), Err(PolicyError::ShapeMismatch(_))));
        // snapshot is untouched
        assert_eq!(params.version, 0);
    }

    #[test]
    fn checkpoint_json_roundtrip_is_exact() {
        let params = PolicyParams::random(5, 3.0, &mut rollout_rng(16));
        let text = serde_json::to_string(&params).unwrap();
        let back: PolicyParams = serde_json::from_str(&text).unwrap();
        assert_eq!(back, params);
        assert_eq!(serde_json::to_string(&back).unwrap(), text);
    }
}
