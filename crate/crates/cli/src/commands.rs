use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use capcur_core::audit::{audit_report, judge_all, TranscriptRecord};
use capcur_core::curriculum::{build_plan, score_difficulties, TrainingPlan};
use capcur_core::datasynth::{perception_filter, synthesize, Answerer, CaptionRecord, PolicyAnswerer};
use capcur_core::env::SceneTask;
use capcur_core::exec::derive_seed;
use capcur_core::policy::{rollout_rng, sample_rollout_with, HaltMode, PolicyParams};
use capcur_core::trainer::{evaluate_with, metrics_csv, Checkpoint, EnvData, EvalResult, Trainer};
use capcur_core::{read_dataset, write_dataset, CapabilityTag, Sample};

use crate::config::{load_answerer, load_evaluators, load_judge, load_params, GlobalConfig};
use crate::{AuditArgs, DifficultyArgs, EvalArgs, FilterArgs, PlanArgs, SynthArgs, TrainArgs};

const TRANSCRIPT_STREAM: u64 = 0x7A5C;

pub struct Ctx {
    pub workdir: PathBuf,
    pub cfg: GlobalConfig,
}

impl Ctx {
    pub fn new(workdir: PathBuf, cfg: GlobalConfig) -> Result<Self> {
        fs::create_dir_all(&workdir).with_context(|| format!("creating workdir {}", workdir.display()))?;
        Ok(Ctx { workdir, cfg })
    }

    /// Output path: relative paths resolve under the workdir; parents are created.
    pub fn out(&self, path: &Path) -> Result<PathBuf> {
        let p = if path.is_absolute() { path.to_path_buf() } else { self.workdir.join(path) };
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    pub fn write(&self, path: &Path, contents: &str) -> Result<PathBuf> {
        let p = self.out(path)?;
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    fn checkpoints(&self) -> PathBuf {
        self.workdir.join("checkpoints")
    }

    fn env_data(&self) -> Result<EnvData> {
        let c = &self.cfg;
        Ok(EnvData::generate(
            &c.env,
            c.stages.samples_per_capability,
            c.trainer.eval_set_size,
            c.seed(),
            c.execution(),
        )?)
    }

    fn eval_sets(&self) -> Result<BTreeMap<CapabilityTag, Vec<SceneTask>>> {
        let c = &self.cfg;
        Ok(EnvData::eval_sets(&c.env, c.trainer.eval_set_size, c.seed(), c.execution())?)
    }

    fn init_params(&self) -> PolicyParams {
        PolicyParams::init(self.cfg.env.vocab, &self.cfg.trainer.init)
    }
}

fn write_jsonl<T: Serialize>(ctx: &Ctx, path: &Path, rows: &[T]) -> Result<PathBuf> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    ctx.write(path, &text)
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}:{}", path.display(), i + 1)))
        .collect()
}

fn stats_csv(rows: &[(String, String)]) -> String {
    let mut s = String::from("key,value\n");
    for (k, v) in rows {
        writeln!(s, "{k},{v}").expect("string write");
    }
    s
}

fn by_capability(samples: Vec<Sample>) -> BTreeMap<CapabilityTag, Vec<Sample>> {
    let mut m: BTreeMap<CapabilityTag, Vec<Sample>> = BTreeMap::new();
    for s in samples {
        m.entry(s.capability).or_default().push(s);
    }
    m
}

pub fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let records: Vec<CaptionRecord> = read_jsonl(&a.captions)?;
    let mut qa = ctx.cfg.clients.qa.clone();
    if let Some(n) = a.max_pairs {
        qa.max_pairs = n;
    }
    if let Some(t) = &a.template {
        qa.template = fs::read_to_string(t).with_context(|| format!("reading template {}", t.display()))?;
    }
    qa.dedup |= a.dedup;
    let spec = &ctx.cfg.clients.generator;
    let client = spec.build()?;
    let report = synthesize(&records, client.as_ref(), &qa, spec.max_in_flight)?;
    let out = ctx.out(&a.out)?;
    write_dataset(&report.samples, &out)?;
    for (image, err) in &report.failures {
        log::warn!("{image}: {err}");
    }
    let stats = vec![
        ("captions".to_string(), records.len().to_string()),
        ("samples".to_string(), report.samples.len().to_string()),
        ("skipped_pairs".to_string(), report.skipped_pairs.to_string()),
        ("failed_captions".to_string(), report.failures.len().to_string()),
    ];
    ctx.write(Path::new("synth_stats.csv"), &stats_csv(&stats))?;
    println!(
        "synth: {} captions -> {} samples, {} pairs skipped, {} captions failed; wrote {}",
        records.len(),
        report.samples.len(),
        report.skipped_pairs,
        report.failures.len(),
        out.display()
    );
    Ok(())
}

pub fn filter(ctx: &Ctx, a: FilterArgs) -> Result<()> {
    let samples = read_dataset(&a.input)?;
    let specs = load_evaluators(&a.evaluators)?;
    let owned: Vec<Box<dyn Answerer>> = specs.iter().map(|s| s.build(&ctx.cfg)).collect::<Result<_>>()?;
    let evaluators: Vec<&dyn Answerer> = owned.iter().map(|b| b.as_ref()).collect();
    let out = perception_filter(&samples, &evaluators, ctx.cfg.execution())?;
    let path = ctx.out(&a.out)?;
    write_dataset(&out.retained, &path)?;
    write_jsonl(ctx, Path::new("filter_decisions.jsonl"), &out.decisions)?;
    let mut stats = vec![
        ("input".to_string(), samples.len().to_string()),
        ("retained".to_string(), out.retained.len().to_string()),
        ("dropped".to_string(), (samples.len() - out.retained.len()).to_string()),
        ("errors".to_string(), out.errors().to_string()),
    ];
    for spec in &specs {
        let deficient = out
            .decisions
            .iter()
            .flat_map(|d| &d.verdicts)
            .filter(|v| v.evaluator == spec.name && v.perception_deficient())
            .count();
        stats.push((format!("deficient_{}", spec.name), deficient.to_string()));
    }
    ctx.write(Path::new("filter_stats.csv"), &stats_csv(&stats))?;
    println!(
        "filter: {} samples, {} retained, {} dropped, {} evaluator errors; wrote {}",
        samples.len(),
        out.retained.len(),
        samples.len() - out.retained.len(),
        out.errors(),
        path.display()
    );
    Ok(())
}

pub fn difficulty(ctx: &Ctx, a: DifficultyArgs) -> Result<()> {
    let mut samples = read_dataset(&a.input)?;
    let answerer: Box<dyn Answerer> = match &a.answerer {
        Some(p) => load_answerer(p)?.build(&ctx.cfg)?,
        None => Box::new(default_answerer(ctx)),
    };
    let k = a.k.unwrap_or(ctx.cfg.stages.difficulty_draws);
    let t = a.temperature.unwrap_or(ctx.cfg.stages.difficulty_temperature);
    score_difficulties(&mut samples, answerer.as_ref(), k, t, ctx.cfg.execution())?;
    let path = ctx.out(&a.out)?;
    write_dataset(&samples, &path)?;
    let mean = samples.iter().filter_map(|s| s.difficulty).sum::<f64>() / samples.len().max(1) as f64;
    println!(
        "difficulty: scored {} samples with k={k} ({}), mean pass rate {mean:.4}; wrote {}",
        samples.len(),
        answerer.name(),
        path.display()
    );
    Ok(())
}

fn default_answerer(ctx: &Ctx) -> PolicyAnswerer {
    PolicyAnswerer::new(
        ctx.init_params(),
        ctx.cfg.grpo.max_response_len,
        derive_seed(ctx.cfg.seed(), &[0xD1F]),
    )
}

/// Datasets for planning: a file, or generated scene samples (scored with the
/// initial policy when the mode needs difficulty).
fn plan_datasets(ctx: &Ctx, data: Option<&Path>, needs_difficulty: bool) -> Result<BTreeMap<CapabilityTag, Vec<Sample>>> {
    if let Some(p) = data {
        return Ok(by_capability(read_dataset(p)?));
    }
    let mut sets = ctx.env_data()?.samples();
    if needs_difficulty {
        let answerer = default_answerer(ctx);
        let st = &ctx.cfg.stages;
        for v in sets.values_mut() {
            score_difficulties(v, &answerer, st.difficulty_draws, st.difficulty_temperature, ctx.cfg.execution())?;
        }
    }
    Ok(sets)
}

fn make_plan(ctx: &Ctx, a: &PlanArgs) -> Result<TrainingPlan> {
    let st = &ctx.cfg.stages;
    let mode = a.mode.unwrap_or(st.mode);
    let order = match a.order {
        Some(o) => o,
        None => st.stage_order()?,
    };
    let budgets = a.budgets.unwrap_or(st.budgets);
    let datasets = plan_datasets(ctx, a.data.as_deref(), mode.uses_difficulty())?;
    let budgets = CapabilityTag::ALL.into_iter().zip(budgets).collect();
    let plan = build_plan(&datasets, mode, mode.is_staged().then_some(order), &budgets, ctx.cfg.seed())
        .context("building plan")?;
    Ok(plan)
}

pub fn plan(ctx: &Ctx, a: PlanArgs) -> Result<()> {
    let plan = make_plan(ctx, &a)?;
    let path = ctx.out(&a.out)?;
    plan.save(&path)?;
    let segs: Vec<String> = plan.segments.iter().map(|s| format!("{}:{}", s.label, s.steps)).collect();
    println!(
        "plan: {} steps in {} segments [{}]; wrote {}",
        plan.total_steps,
        plan.segments.len(),
        segs.join(", "),
        path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    finished: bool,
    steps: usize,
    mode: capcur_core::curriculum::PlanMode,
    final_eval: Option<BTreeMap<CapabilityTag, EvalResult>>,
}

pub fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let train_sets: BTreeMap<CapabilityTag, Vec<SceneTask>> = match &a.data {
        Some(p) => {
            let mut m: BTreeMap<CapabilityTag, Vec<SceneTask>> = BTreeMap::new();
            for s in read_dataset(p)? {
                let t = SceneTask::from_sample(&s).with_context(|| format!("sample {}", s.id))?;
                m.entry(s.capability).or_default().push(t);
            }
            m
        }
        None => ctx.env_data()?.train,
    };
    let plan = match &a.plan {
        Some(p) => TrainingPlan::load(p)?,
        None => make_plan(
            ctx,
            &PlanArgs {
                mode: None,
                order: None,
                budgets: None,
                data: a.data.clone(),
                out: PathBuf::new(),
            },
        )?,
    };
    let eval_sets = ctx.eval_sets()?;
    let mut tc = cfg.trainer.clone();
    tc.checkpoint_dir = Some(ctx.checkpoints());
    if let Some(m) = a.max_steps {
        tc.max_steps = Some(m);
    }
    if let Some(m) = a.train_mode {
        tc.mode = m;
    }
    let init = ctx.init_params();
    let trainer = Trainer::new(cfg.grpo.clone(), tc, &plan, &train_sets, &eval_sets)?.with_format(cfg.rewards.clone())?;
    let resume = if a.resume {
        match Checkpoint::latest(&ctx.checkpoints())? {
            Some((dir, c)) => {
                if c.next_step > plan.total_steps {
                    bail!("checkpoint {} is past the end of this plan", dir.display());
                }
                log::info!("resuming from {} at step {}", dir.display(), c.next_step);
                Some(c)
            }
            None => {
                log::info!("no checkpoint under {}; starting fresh", ctx.checkpoints().display());
                None
            }
        }
    } else {
        None
    };
    let out = trainer.run(&init, resume)?;
    ctx.write(Path::new("metrics.csv"), &metrics_csv(&out.rows))?;
    ctx.write(Path::new("params.json"), &serde_json::to_string_pretty(&out.params)?)?;
    let final_eval = out.rows.last().and_then(|r| r.eval.clone()).filter(|_| out.finished);
    let summary = RunSummary {
        finished: out.finished,
        steps: out.rows.len(),
        mode: plan.mode,
        final_eval: final_eval.clone(),
    };
    ctx.write(Path::new("run.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    match final_eval {
        Some(e) => {
            let mut line = format!("train: {} steps finished;", out.rows.len());
            for (c, r) in &e {
                write!(line, " {c} acc={:.4} len={:.3};", r.accuracy, r.mean_len).expect("string write");
            }
            println!("{line} wrote {}", ctx.workdir.display());
        }
        None => println!(
            "train: stopped after {} of {} steps; resume with --resume",
            out.rows.len(),
            plan.total_steps
        ),
    }
    Ok(())
}

pub fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    if a.n_rollouts == 0 {
        bail!("--n-rollouts must be >= 1");
    }
    let params = load_params(&a.params)?;
    if params.vocab != ctx.cfg.env.vocab {
        bail!("parameters are for V={}, config has V={}", params.vocab, ctx.cfg.env.vocab);
    }
    let sets = ctx.eval_sets()?;
    let seed = derive_seed(ctx.cfg.seed(), &[0xE7A1, u64::MAX]);
    let max_len = ctx.cfg.grpo.max_response_len;
    let exec = ctx.cfg.execution();
    let results = evaluate_with(&params, &sets, a.n_rollouts, seed, max_len, exec, &ctx.cfg.rewards);
    let mut csv = String::from("capability,accuracy,mean_len\n");
    for (c, r) in &results {
        writeln!(csv, "{c},{},{}", r.accuracy, r.mean_len).expect("string write");
        println!("eval: {c:<16} acc={:.4} len={:.3}", r.accuracy, r.mean_len);
    }
    let path = ctx.write(&a.out, &csv)?;
    if let Some(t) = &a.transcripts {
        let mut records = Vec::new();
        for (c, tasks) in &sets {
            let rows = exec.map(tasks, |i, task| {
                let mut rng = rollout_rng(derive_seed(seed, &[TRANSCRIPT_STREAM, c.index() as u64, i as u64]));
                let y = sample_rollout_with(&params, task, max_len, &mut rng, HaltMode::Greedy, &ctx.cfg.rewards);
                let mut r = TranscriptRecord::from_sample(&task.sample, y.transcript);
                r.label = Some(a.label.clone());
                r
            });
            records.extend(rows);
        }
        let p = write_jsonl(ctx, t, &records)?;
        println!("eval: wrote {} transcripts to {}", records.len(), p.display());
    }
    println!("eval: wrote {}", path.display());
    Ok(())
}

fn read_lengths(path: &Path) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut m: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        let (Some(label), Some(len)) = (rec.get(0), rec.get(1)) else {
            bail!("{}: row {} needs label,length", path.display(), i + 1);
        };
        let len: f64 = len
            .trim()
            .parse()
            .with_context(|| format!("{}: row {}: length `{len}`", path.display(), i + 1))?;
        m.entry(label.to_string()).or_default().push(len);
    }
    Ok(m.into_iter().collect())
}

pub fn audit(ctx: &Ctx, a: AuditArgs) -> Result<()> {
    let records: Vec<TranscriptRecord> = read_jsonl(&a.transcripts)?;
    if records.is_empty() {
        bail!("{} has no transcripts", a.transcripts.display());
    }
    let judge = load_judge(&a.judge)?;
    let template = judge.template()?;
    let client = judge.client.build()?;
    let verdicts = judge_all(&records, client.as_ref(), &template, judge.client.seed, judge.client.max_in_flight)?;
    let lengths = match &a.lengths {
        Some(p) => read_lengths(p)?,
        None => {
            let mut m: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            for r in records.iter().filter(|r| r.label.is_some()) {
                let words = r.transcript.split_whitespace().count() as f64;
                m.entry(r.label.clone().unwrap_or_default()).or_default().push(words);
            }
            m.into_iter().collect()
        }
    };
    let report = audit_report(&verdicts, &lengths);
    write_jsonl(ctx, Path::new("audit_verdicts.jsonl"), &verdicts)?;
    let path = ctx.write(&a.out, &report.to_csv())?;
    print!("{}", report.summary());
    println!("audit: wrote {}", path.display());
    Ok(())
}
