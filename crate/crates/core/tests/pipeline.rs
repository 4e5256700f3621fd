//! End-to-end runs through the library: plan, train, checkpoint, resume.

use capcur_core::curriculum::{build_plan, paper_budgets, preset, PlanMode};
use capcur_core::env::EnvParams;
use capcur_core::grpo::GrpoConfig;
use capcur_core::policy::{PolicyInit, PolicyParams};
use capcur_core::trainer::{metrics_csv, Checkpoint, EnvData, Trainer, TrainerConfig};
use capcur_core::{CapabilityTag, Execution};

fn budgets() -> std::collections::BTreeMap<CapabilityTag, usize> {
    CapabilityTag::ALL.into_iter().zip([6, 10, 12]).collect()
}

fn run(exec: Execution, max_steps: Option<usize>, dir: Option<&std::path::Path>, resume: Option<Checkpoint>) -> (String, PolicyParams) {
    let data = EnvData::generate(&EnvParams::default(), 40, 20, 5, exec).unwrap();
    let plan = build_plan(&data.samples(), PlanMode::Capability, preset("paper-default"), &budgets(), 5).unwrap();
    let grpo = GrpoConfig {
        lr: 1.0,
        max_response_len: 6,
        execution: exec,
        ..GrpoConfig::default()
    };
    let cfg = TrainerConfig {
        batch_size: 4,
        eval_every: 7,
        eval_set_size: 20,
        look_cost_lambda: 0.01,
        seed: 5,
        max_steps,
        checkpoint_dir: dir.map(|d| d.to_path_buf()),
        ..TrainerConfig::default()
    };
    let t = Trainer::new(grpo, cfg, &plan, &data.train, &data.eval).unwrap();
    let init = PolicyParams::init(5, &PolicyInit { halt_bias: [1.0; 3], ..PolicyInit::default() });
    let out = t.run(&init, resume).unwrap();
    (metrics_csv(&out.rows), out.params)
}

#[test]
fn sequential_and_parallel_runs_are_identical() {
    let (a, pa) = run(Execution::Sequential, None, None, None);
    let (b, pb) = run(Execution::Parallel, None, None, None);
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.lines().count(), 29);
}

#[test]
fn interrupted_runs_resume_from_any_checkpoint() {
    let (full, pfull) = run(Execution::default(), None, None, None);
    for stop in [3, 6, 11, 20] {
        let dir = tempfile::tempdir().unwrap();
        let _ = run(Execution::default(), Some(stop), Some(dir.path()), None);
        let (_, ck) = Checkpoint::latest(dir.path()).unwrap().expect("a checkpoint");
        assert_eq!(ck.next_step, stop);
        let (resumed, p) = run(Execution::default(), None, Some(dir.path()), Some(ck));
        assert_eq!(resumed, full, "stop at {stop}");
        assert_eq!(p, pfull);
    }
}

#[test]
fn paper_budgets_are_the_default_schedule() {
    let data = EnvData::generate(&EnvParams::default(), 20, 5, 0, Execution::default()).unwrap();
    let plan = build_plan(&data.samples(), PlanMode::Capability, preset("paper-default"), &paper_budgets(), 0).unwrap();
    let steps: Vec<usize> = plan.segments.iter().map(|s| s.steps).collect();
    assert_eq!(steps, [90, 375, 465]);
    assert_eq!(plan.total_steps, 930);
}
