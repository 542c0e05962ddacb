//! Supervised multitask training over random modality pairs, with
//! convergence-rate loss balancing, evaluation and frozen adaptation.

mod adapt;
mod balance;
mod eval;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{stream_rng, Cursor, Split, Suite};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelBundle, Registry};
use crate::numeric::{Optimizer, OptimizerConfig, ParamId, Real, Tape};
use crate::pretrain::{finite, sample_two};
use crate::session::{read_optimizer, write_optimizer, MetricsSink, SessionState, TokenCache};

pub use adapt::{adapt_unseen, frozen_embeddings, AdaptConfig, AdaptReport, Adapter};
pub use balance::{balance_weights, BalancerConfig, BalancerState};
pub use eval::{accuracy, evaluate, mean_iou, EvalReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage3Config {
    pub steps: usize,
    /// Total batch; each sampled task gets half.
    pub batch: usize,
    pub lr: f64,
    /// Steps per balancing epoch.
    pub balance_every: usize,
    /// `false` sums the two losses without weights.
    pub balanced: bool,
    /// Share of steps whose two half-batches run the single-stream
    /// inference path instead of the paired one.
    pub single_stream: f64,
    /// Share of each training split whose labels are used.
    pub label_fraction: f64,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Stage3Config { steps: 3000, batch: 16, lr: 1e-3, balance_every: 50, balanced: true, single_stream: 0.5, label_fraction: 1.0 }
    }
}

impl Stage3Config {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 2 || self.batch % 2 != 0 {
            return Err(Error::config("stage3.batch", format!("{} is not an even size of at least 2", self.batch)));
        }
        if self.balance_every == 0 {
            return Err(Error::config("stage3.balance_every", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("stage3.lr", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.single_stream) {
            return Err(Error::config("stage3.single_stream", "must lie in [0, 1]"));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::config("stage3.label_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Draws a uniform unordered pair of trained modalities, then a uniform
/// task within each. Returns `(q, r)` task indices.
pub fn sample_pair(rng: &mut impl Rng, registry: &Registry) -> Result<(usize, usize)> {
    let mods = registry.trained_modalities();
    let (i, j) = sample_two(&mods, rng)?;
    let pick = |m: usize, rng: &mut dyn rand::RngCore| {
        let ts = registry.tasks_of(m);
        ts[rng.random_range(0..ts.len())]
    };
    let q = pick(i, rng);
    let r = pick(j, rng);
    Ok((q, r))
}

/// Half-batches of sample indices for tasks `q` and `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub q: usize,
    pub r: usize,
    pub half_q: Vec<usize>,
    pub half_r: Vec<usize>,
    /// Run each half through `h(g(f(x)))` alone.
    pub single_stream: bool,
}

/// One cursor per task over the labelled head of its modality's training
/// split (`fraction` of it, at least one sample).
pub fn task_cursors(suite: &Suite, seed: u64, fraction: f64) -> Result<Vec<Cursor>> {
    suite
        .registry
        .tasks
        .iter()
        .enumerate()
        .map(|(t, spec)| {
            let train = suite.dataset(spec.modality_index).indices(Split::Train);
            let n = ((train.len() as f64 * fraction).round() as usize).clamp(1, train.len().max(1));
            Cursor::new(seed, 300 + t as u64, train.start..train.start + n)
        })
        .collect()
}

/// `batch / 2` samples per task, without replacement until a task's
/// training split is exhausted.
pub fn compose_batch(q: usize, r: usize, cursors: &mut [Cursor], batch: usize) -> Result<PairBatch> {
    if batch < 2 || batch % 2 != 0 {
        return Err(Error::config("stage3.batch", format!("{batch} is not an even size of at least 2")));
    }
    if q == r || q >= cursors.len() || r >= cursors.len() {
        return Err(Error::Invalid(format!("bad task pair ({q}, {r})")));
    }
    let half_q = cursors[q].take(batch / 2);
    let half_r = cursors[r].take(batch / 2);
    Ok(PairBatch { q, r, half_q, half_r, single_stream: false })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub loss_q: f64,
    pub loss_r: f64,
    pub w_q: f64,
    pub w_r: f64,
    pub total: f64,
}

/// Parameters one stage-3 step updates. Single-stream steps leave the
/// cross-attention modules out.
pub fn stage3_params<T: Real>(bundle: &ModelBundle<T>, batch: &PairBatch) -> Result<Vec<ParamId>> {
    let (i, j) = (bundle.task(batch.q)?.modality_index, bundle.task(batch.r)?.modality_index);
    let mut v = if batch.single_stream {
        let mut v = bundle.f.params();
        v.extend(bundle.g.params());
        v
    } else {
        bundle.trunk_params()
    };
    v.extend(bundle.tokenizer_params(i));
    v.extend(bundle.tokenizer_params(j));
    v.extend(bundle.head_params(batch.q));
    v.extend(bundle.head_params(batch.r));
    Ok(v)
}

/// Builds the weighted pair loss on `tape`. Returns `(total, loss_q, loss_r)`.
/// Without weights the two losses are summed directly.
pub fn stage3_loss<T: Real>(
    bundle: &ModelBundle<T>,
    tape: &mut Tape<T>,
    cache: &TokenCache<T>,
    suite: &Suite,
    batch: &PairBatch,
    weights: Option<(f64, f64)>,
) -> Result<(crate::numeric::Var, crate::numeric::Var, crate::numeric::Var)> {
    if batch.half_q.len() != batch.half_r.len() || batch.half_q.is_empty() {
        return Err(Error::Invalid("half-batches must be equal and non-empty".into()));
    }
    let (i, j) = (bundle.task(batch.q)?.modality_index, bundle.task(batch.r)?.modality_index);
    let (labels_q, labels_r) = (suite.labels(batch.q)?, suite.labels(batch.r)?);
    let mut preds_q = Vec::with_capacity(batch.half_q.len());
    let mut preds_r = Vec::with_capacity(batch.half_r.len());
    for (&a, &b) in batch.half_q.iter().zip(&batch.half_r) {
        let (x_i, x_j) = (&cache.seqs[i][a], &cache.seqs[j][b]);
        if batch.single_stream {
            preds_q.push(bundle.forward_inference(tape, x_i, batch.q)?);
            preds_r.push(bundle.forward_inference(tape, x_j, batch.r)?);
        } else {
            let fp = bundle.forward_pair(tape, x_i, x_j, batch.q, batch.r)?;
            preds_q.push(fp.pred_i);
            preds_r.push(fp.pred_j);
        }
    }
    let yq: Vec<_> = batch.half_q.iter().map(|&a| &labels_q[a]).collect();
    let yr: Vec<_> = batch.half_r.iter().map(|&b| &labels_r[b]).collect();
    let lq = bundle.task_loss(tape, batch.q, &preds_q, &yq)?;
    let lr = bundle.task_loss(tape, batch.r, &preds_r, &yr)?;
    let total = match weights {
        Some((wq, wr)) => {
            let a = tape.scale(lq, T::lit(wq));
            let b = tape.scale(lr, T::lit(wr));
            tape.add(a, b)?
        }
        None => tape.add(lq, lr)?,
    };
    Ok((total, lq, lr))
}

/// One optimizer step on a pair batch. Weights come from the balancer when
/// `balanced`; both step losses are recorded in its current epoch.
pub fn train_step<T: Real>(
    bundle: &mut ModelBundle<T>,
    cache: &TokenCache<T>,
    suite: &Suite,
    batch: &PairBatch,
    balancer: &mut BalancerState,
    balanced: bool,
    opt: &mut Optimizer<T>,
) -> Result<StepLosses> {
    let weights = if balanced { Some(balancer.weights(batch.q, batch.r)?) } else { None };
    let mut tape = Tape::new();
    let (total, lq, lr) = stage3_loss(bundle, &mut tape, cache, suite, batch, weights)?;
    let out = StepLosses {
        loss_q: finite(tape.value(lq).item().as_f64(), "stage-3 loss")?,
        loss_r: finite(tape.value(lr).item().as_f64(), "stage-3 loss")?,
        w_q: weights.map_or(1.0, |w| w.0),
        w_r: weights.map_or(1.0, |w| w.1),
        total: finite(tape.value(total).item().as_f64(), "stage-3 loss")?,
    };
    tape.backward(total, &mut bundle.store)?;
    let params = stage3_params(bundle, batch)?;
    opt.apply(&mut bundle.store, &params)?;
    balancer.record(batch.q, out.loss_q);
    balancer.record(batch.r, out.loss_r);
    Ok(out)
}

/// Evaluates task `t` on one split of its dataset.
pub fn evaluate_split<T: Real>(bundle: &ModelBundle<T>, cache: &TokenCache<T>, suite: &Suite, t: usize, split: Split) -> Result<Vec<EvalReport>> {
    let m = bundle.task(t)?.modality_index;
    evaluate(bundle, t, &cache.seqs[m], suite.labels(t)?, suite.dataset(m).indices(split))
}

/// Stage-3 run state.
pub struct Trainer<'a, T> {
    pub bundle: ModelBundle<T>,
    pub opt: Optimizer<T>,
    pub state: SessionState,
    pub config: Stage3Config,
    pub seed: u64,
    cache: &'a TokenCache<T>,
    suite: &'a Suite,
}

impl<'a, T: Real> Trainer<'a, T> {
    pub fn new(
        mut bundle: ModelBundle<T>,
        suite: &'a Suite,
        cache: &'a TokenCache<T>,
        config: &Stage3Config,
        balancer: &BalancerConfig,
        optim: &OptimizerConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if bundle.registry.trained_modalities().len() < 2 {
            return Err(Error::config("tasks", "stage 3 needs tasks on at least two modalities"));
        }
        bundle.discard_aux();
        let state = SessionState {
            stage: 3,
            cursors: task_cursors(suite, seed, config.label_fraction)?,
            balancer: Some(BalancerState::new(balancer.clone(), bundle.registry.tasks.len())?),
            ..SessionState::default()
        };
        Ok(Trainer {
            bundle,
            opt: Optimizer::new(optim.clone(), config.lr)?,
            state,
            config: config.clone(),
            seed,
            cache,
            suite,
        })
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.config.steps as u64
    }

    pub fn balancer(&self) -> &BalancerState {
        self.state.balancer.as_ref().expect("stage-3 state carries a balancer")
    }

    pub fn step(&mut self, metrics: &mut MetricsSink) -> Result<StepLosses> {
        let step = self.state.step;
        let mut rng = stream_rng(self.seed, &[3, step]);
        let (q, r) = sample_pair(&mut rng, &self.bundle.registry)?;
        let mut batch = compose_batch(q, r, &mut self.state.cursors, self.config.batch)?;
        batch.single_stream = self.config.single_stream > 0.0 && rng.random_bool(self.config.single_stream);
        let balancer = self.state.balancer.as_mut().expect("stage-3 state carries a balancer");
        let out = train_step(&mut self.bundle, self.cache, self.suite, &batch, balancer, self.config.balanced, &mut self.opt)?;
        let (tq, tr) = (&self.bundle.registry.tasks[q], &self.bundle.registry.tasks[r]);
        metrics.emit(json!({
            "stage": 3, "step": step,
            "mod_i": tq.modality, "task_q": tq.name, "mod_j": tr.modality, "task_r": tr.name,
            "single_stream": batch.single_stream, "loss_q": out.loss_q, "loss_r": out.loss_r, "w_q": out.w_q, "w_r": out.w_r, "total": out.total
        }))?;
        self.state.step += 1;
        if self.state.step % self.config.balance_every as u64 == 0 {
            balancer.end_epoch();
        }
        Ok(out)
    }

    pub fn run(&mut self, metrics: &mut MetricsSink, until: Option<u64>) -> Result<Vec<StepLosses>> {
        let end = until.map_or(self.config.steps as u64, |u| u.min(self.config.steps as u64));
        let mut out = Vec::new();
        while self.state.step < end {
            out.push(self.step(metrics)?);
        }
        metrics.flush()?;
        Ok(out)
    }

    pub fn checkpoint(&self, config: &str) -> Result<Checkpoint> {
        let mut ck = Checkpoint { stage: 3, config: config.to_string(), state: String::new(), records: Vec::new() };
        self.bundle.write_records(&mut ck);
        let mut state = self.state.clone();
        state.optimizer_step = self.opt.step;
        state.moment_steps = write_optimizer(&mut ck, &self.opt, &self.bundle.store)?;
        state.complete = self.done();
        ck.state = state.to_json()?;
        Ok(ck)
    }

    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let state = SessionState::from_json(&ck.state)?;
        if ck.stage != 3 || state.stage != 3 {
            return Err(Error::Checkpoint(format!("checkpoint is from stage {}, resuming stage 3", ck.stage)));
        }
        if state.cursors.len() != self.state.cursors.len() || state.balancer.is_none() {
            return Err(Error::Checkpoint("stage-3 state does not match the task registry".into()));
        }
        self.bundle.read_records(ck)?;
        read_optimizer(ck, &mut self.opt, &self.bundle.store, &state)?;
        self.state = state;
        Ok(())
    }

    pub fn finish(self) -> ModelBundle<T> {
        self.bundle
    }
}

#[cfg(test)]
mod tests;
