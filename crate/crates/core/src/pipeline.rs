//! Stage orchestration shared by the command line and the tests: checkpoint
//! stage rules, resuming, and the final reports.

use crate::config::RunConfig;
use crate::data::{Split, Suite};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelBundle};
use crate::numeric::Real;
use crate::pretrain::Pretrainer;
use crate::session::{MetricsSink, SessionState, TokenCache};
use crate::trainer::{adapt_unseen, evaluate_split, AdaptReport, EvalReport, Trainer};

/// Result of running (part of) one stage.
pub struct StageRun<T> {
    pub checkpoint: Checkpoint,
    pub bundle: ModelBundle<T>,
    pub losses: Vec<f64>,
    pub complete: bool,
}

fn state_of(ck: &Checkpoint) -> Result<SessionState> {
    SessionState::from_json(&ck.state)
}

/// Fresh bundle for `cfg`, with parameters from `ck` when given.
pub fn load_bundle<T: Real>(cfg: &RunConfig, ck: Option<&Checkpoint>) -> Result<ModelBundle<T>> {
    let mut b = ModelBundle::new(cfg.model.clone(), cfg.registry()?, cfg.seed)?;
    if let Some(ck) = ck {
        b.read_records(ck)?;
    }
    Ok(b)
}

enum Start<'c> {
    /// Begin the stage from these parameters (none: fresh init).
    From(Option<&'c Checkpoint>),
    Resume(&'c Checkpoint),
}

/// Checks the stage tag of an input checkpoint. Stage `s` starts from a
/// complete stage `s - 1` checkpoint or resumes an incomplete stage `s` one.
fn start(stage: u32, input: Option<&Checkpoint>, cold: bool) -> Result<Start<'_>> {
    let Some(ck) = input else {
        return if stage == 1 || cold {
            Ok(Start::From(None))
        } else {
            Err(Error::Checkpoint(format!("stage {stage} needs a complete stage-{} checkpoint", stage - 1)))
        };
    };
    let state = state_of(ck)?;
    if ck.stage == stage && !state.complete {
        return Ok(Start::Resume(ck));
    }
    if ck.stage + 1 == stage && state.complete && !cold {
        return Ok(Start::From(Some(ck)));
    }
    let what = if state.complete { "a complete" } else { "an in-progress" };
    Err(Error::Checkpoint(format!("stage {stage} cannot start from {what} stage-{} checkpoint", ck.stage)))
}

fn finished<T: Real>(stage: u32, cfg: &RunConfig, bundle: &ModelBundle<T>, steps: u64) -> Result<Checkpoint> {
    let mut ck = Checkpoint { stage, config: cfg.to_toml()?, state: String::new(), records: Vec::new() };
    bundle.write_records(&mut ck);
    ck.state = SessionState { stage, step: steps, complete: true, ..SessionState::default() }.to_json()?;
    Ok(ck)
}

/// Stage 1 or 2. `stop_after` ends the run early with an in-progress
/// checkpoint.
pub fn pretrain<T: Real>(
    stage: u32,
    cfg: &RunConfig,
    suite: &Suite,
    input: Option<&Checkpoint>,
    metrics: &mut MetricsSink,
    stop_after: Option<u64>,
) -> Result<StageRun<T>> {
    let start = start(stage, input, false)?;
    let mut bundle = match start {
        Start::From(ck) => load_bundle::<T>(cfg, ck)?,
        Start::Resume(_) => load_bundle::<T>(cfg, None)?,
    };
    let cache = TokenCache::build(&mut bundle, suite)?;
    let mut p = match stage {
        1 => Pretrainer::stage1(bundle, suite, &cache, &cfg.stage1, &cfg.masking, &cfg.optimizer, cfg.seed)?,
        2 => Pretrainer::stage2(bundle, suite, &cache, &cfg.stage2, &cfg.masking, &cfg.optimizer, cfg.seed)?,
        s => return Err(Error::Invalid(format!("stage {s} is not a pretraining stage"))),
    };
    if let Start::Resume(ck) = start {
        p.restore(ck)?;
    }
    let losses = p.run(metrics, stop_after)?;
    if p.done() {
        let steps = p.state.step;
        let bundle = p.finish();
        let checkpoint = finished(stage, cfg, &bundle, steps)?;
        Ok(StageRun { checkpoint, bundle, losses, complete: true })
    } else {
        let checkpoint = p.checkpoint(&cfg.to_toml()?)?;
        Ok(StageRun { checkpoint, bundle: p.finish(), losses, complete: false })
    }
}

/// Stage 3. `cold` starts from fresh parameters instead of a stage-2
/// checkpoint.
pub fn train<T: Real>(
    cfg: &RunConfig,
    suite: &Suite,
    input: Option<&Checkpoint>,
    cold: bool,
    metrics: &mut MetricsSink,
    stop_after: Option<u64>,
) -> Result<StageRun<T>> {
    let start = start(3, input, cold)?;
    let mut bundle = match start {
        Start::From(ck) => load_bundle::<T>(cfg, ck)?,
        Start::Resume(_) => load_bundle::<T>(cfg, None)?,
    };
    let cache = TokenCache::build(&mut bundle, suite)?;
    let mut t = Trainer::new(bundle, suite, &cache, &cfg.stage3, &cfg.balancer, &cfg.optimizer, cfg.seed)?;
    if let Start::Resume(ck) = start {
        t.restore(ck)?;
    }
    let losses = t.run(metrics, stop_after)?.into_iter().map(|s| s.total).collect();
    if t.done() {
        let steps = t.state.step;
        let bundle = t.finish();
        let checkpoint = finished(3, cfg, &bundle, steps)?;
        Ok(StageRun { checkpoint, bundle, losses, complete: true })
    } else {
        let checkpoint = t.checkpoint(&cfg.to_toml()?)?;
        Ok(StageRun { checkpoint, bundle: t.finish(), losses, complete: false })
    }
}

/// Bundle from a complete checkpoint of any stage.
pub fn trained_bundle<T: Real>(cfg: &RunConfig, ck: &Checkpoint) -> Result<ModelBundle<T>> {
    if !state_of(ck)?.complete {
        return Err(Error::Checkpoint(format!("stage-{} checkpoint is still in progress", ck.stage)));
    }
    load_bundle(cfg, Some(ck))
}

/// Reports for every registered task on one split.
pub fn evaluate_all<T: Real>(bundle: &mut ModelBundle<T>, suite: &Suite, split: Split) -> Result<Vec<EvalReport>> {
    let cache = TokenCache::build(bundle, suite)?;
    let mut out = Vec::new();
    for t in 0..bundle.registry.tasks.len() {
        out.extend(evaluate_split(bundle, &cache, suite, t, split)?);
    }
    Ok(out)
}

/// Adapters for every adaptation task, with the bundle checksum before
/// and after.
pub fn adapt_all<T: Real>(cfg: &RunConfig, bundle: &ModelBundle<T>, suite: &Suite) -> Result<(Vec<AdaptReport>, u64, u64)> {
    let before = bundle.store.checksum();
    let mut reports = Vec::new();
    for task in cfg.adapt_registry()? {
        let ds = suite.dataset(task.modality_index);
        let (_, report) = adapt_unseen(bundle, ds, &task, &cfg.adapt, cfg.seed)?;
        reports.push(report);
    }
    Ok((reports, before, bundle.store.checksum()))
}
