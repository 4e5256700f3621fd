//! The global TOML configuration and the client specs used by `filter`,
//! `difficulty` and `audit`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Deserialize;

use capcur_core::clients::{HttpClient, MockClient, TextClient, ENDPOINT_ENV};
use capcur_core::curriculum::{parse_stage_order, PlanMode, StageOrder};
use capcur_core::datasynth::{Answerer, ClientAnswerer, PolicyAnswerer, QaConfig};
use capcur_core::env::EnvParams;
use capcur_core::grpo::GrpoConfig;
use capcur_core::policy::PolicyParams;
use capcur_core::rewards::FormatSpec;
use capcur_core::trainer::TrainerConfig;
use capcur_core::Execution;

pub const SEED_ENV: &str = "CAPCUR_SEED";

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    pub grpo: GrpoConfig,
    pub stages: StagesConfig,
    pub env: EnvParams,
    pub clients: ClientsConfig,
    pub rewards: FormatSpec,
    pub trainer: TrainerConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagesConfig {
    pub mode: PlanMode,
    /// Preset name or stage numbers, e.g. `1,2,3`.
    pub order: String,
    /// Steps for perception, text reasoning, visual reasoning.
    pub budgets: [usize; 3],
    /// Generated training samples per capability when no dataset is given.
    pub samples_per_capability: usize,
    pub difficulty_draws: usize,
    pub difficulty_temperature: f64,
}

impl Default for StagesConfig {
    fn default() -> Self {
        StagesConfig {
            mode: PlanMode::Capability,
            order: "paper-default".into(),
            budgets: [90, 375, 465],
            samples_per_capability: 600,
            difficulty_draws: capcur_core::curriculum::DEFAULT_DIFFICULTY_DRAWS,
            difficulty_temperature: capcur_core::curriculum::DEFAULT_DIFFICULTY_TEMPERATURE,
        }
    }
}

impl StagesConfig {
    pub fn stage_order(&self) -> Result<StageOrder> {
        parse_stage_order(&self.order).map_err(anyhow::Error::msg)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientsConfig {
    /// Question generator used by `synth`.
    pub generator: ClientSpec,
    pub qa: QaConfig,
}

/// A text client: offline fixtures, or an HTTP endpoint.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClientSpec {
    /// JSONL fixture file; when set the client never touches the network.
    pub fixtures: Option<PathBuf>,
    /// Replaced by `CAPCUR_CLIENT_ENDPOINT` when that is set.
    pub endpoint: String,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    pub seed: u64,
}

impl Default for ClientSpec {
    fn default() -> Self {
        ClientSpec {
            fixtures: None,
            endpoint: String::new(),
            timeout_secs: 60,
            max_in_flight: 4,
            seed: 0,
        }
    }
}

impl ClientSpec {
    fn resolve(&mut self, base: &Path) {
        if let Some(f) = &self.fixtures {
            if f.is_relative() {
                self.fixtures = Some(base.join(f));
            }
        }
    }

    pub fn build(&self) -> Result<Arc<dyn TextClient>> {
        if self.max_in_flight == 0 {
            bail!("max_in_flight must be >= 1");
        }
        if let Some(path) = &self.fixtures {
            return Ok(Arc::new(MockClient::load(path)?));
        }
        let endpoint = std::env::var(ENDPOINT_ENV).unwrap_or_else(|_| self.endpoint.clone());
        if endpoint.is_empty() {
            bail!("no client configured: set `fixtures`, `endpoint` or {ENDPOINT_ENV}");
        }
        Ok(Arc::new(HttpClient::new(endpoint, Duration::from_secs(self.timeout_secs))?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswererKind {
    Client,
    Policy,
}

/// One evaluator (filter) or answerer (difficulty).
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswererSpec {
    pub name: String,
    pub kind: AnswererKind,
    #[serde(default)]
    pub client: ClientSpec,
    /// Policy parameters (JSON); the configured initial policy when absent.
    #[serde(default)]
    pub params: Option<PathBuf>,
    #[serde(default = "default_answer_len")]
    pub max_len: usize,
}

fn default_answer_len() -> usize {
    16
}

impl AnswererSpec {
    fn resolve(&mut self, base: &Path) {
        self.client.resolve(base);
        if let Some(p) = &self.params {
            if p.is_relative() {
                self.params = Some(base.join(p));
            }
        }
    }

    pub fn build(&self, global: &GlobalConfig) -> Result<Box<dyn Answerer>> {
        Ok(match self.kind {
            AnswererKind::Client => {
                let mut a = ClientAnswerer::new(self.client.build()?, self.client.seed);
                a.label = self.name.clone();
                Box::new(a)
            }
            AnswererKind::Policy => {
                let params = match &self.params {
                    Some(p) => load_params(p)?,
                    None => PolicyParams::init(global.env.vocab, &global.trainer.init),
                };
                let mut a = PolicyAnswerer::new(params, self.max_len, self.client.seed);
                a.label = self.name.clone();
                Box::new(a)
            }
        })
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatorsFile {
    pub evaluator: Vec<AnswererSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeFile {
    pub client: ClientSpec,
    /// Prompt template file; the built-in template when absent.
    #[serde(default)]
    pub template: Option<PathBuf>,
}

impl JudgeFile {
    pub fn template(&self) -> Result<String> {
        match &self.template {
            Some(p) => fs::read_to_string(p).with_context(|| format!("reading template {}", p.display())),
            None => Ok(capcur_core::audit::DEFAULT_JUDGE_TEMPLATE.to_string()),
        }
    }
}

/// Parses TOML, naming the offending key path on failure.
pub fn parse_toml<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    let de = toml::Deserializer::new(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let mut path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.message().trim().to_string();
        // unknown keys are reported at their parent table
        if let Some(field) = msg
            .strip_prefix("unknown field `")
            .and_then(|r| r.split('`').next())
        {
            path = if path == "." { field.to_string() } else { format!("{path}.{field}") };
        }
        if path == "." || path.is_empty() {
            anyhow::anyhow!("{}: {msg}", origin.display())
        } else {
            anyhow::anyhow!("{}: at `{path}`: {msg}", origin.display())
        }
    })
}

fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_toml(&text, path)
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

impl GlobalConfig {
    /// Loads `path` (defaults when `None`) and applies environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg: GlobalConfig = match path {
            Some(p) => read_toml(p)?,
            None => GlobalConfig::default(),
        };
        if let Some(p) = path {
            cfg.clients.generator.resolve(&base_dir(p));
        }
        if let Ok(s) = std::env::var(SEED_ENV) {
            cfg.trainer.seed = s
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}=`{s}` is not an unsigned integer"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grpo.validate()?;
        self.env.validate()?;
        self.rewards.validate().map_err(anyhow::Error::msg)?;
        self.stages.stage_order()?;
        if self.stages.samples_per_capability == 0 {
            bail!("stages.samples_per_capability must be >= 1");
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.trainer.seed
    }

    pub fn execution(&self) -> Execution {
        self.grpo.execution
    }
}

pub fn load_evaluators(path: &Path) -> Result<Vec<AnswererSpec>> {
    let mut f: EvaluatorsFile = read_toml(path)?;
    if f.evaluator.is_empty() {
        bail!("{}: no [[evaluator]] entries", path.display());
    }
    for e in &mut f.evaluator {
        e.resolve(&base_dir(path));
    }
    Ok(f.evaluator)
}

pub fn load_answerer(path: &Path) -> Result<AnswererSpec> {
    let mut a: AnswererSpec = read_toml(path)?;
    a.resolve(&base_dir(path));
    Ok(a)
}

pub fn load_judge(path: &Path) -> Result<JudgeFile> {
    let mut j: JudgeFile = read_toml(path)?;
    let base = base_dir(path);
    j.client.resolve(&base);
    if let Some(t) = &j.template {
        if t.is_relative() {
            j.template = Some(base.join(t));
        }
    }
    Ok(j)
}

pub fn load_params(path: &Path) -> Result<PolicyParams> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let p: PolicyParams =
        serde_json::from_str(&text).with_context(|| format!("parsing policy parameters {}", path.display()))?;
    p.check_shapes()?;
    Ok(p)
}
