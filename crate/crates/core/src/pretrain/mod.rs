//! Masked pretraining: unimodal reconstruction through `f`'s transformer
//! (stage 1) and pairwise reconstruction through the full trunk (stage 2).
//! Decoders exist only for the duration of a stage.

mod decoder;
mod mask;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::data::{stream_rng, Cursor, Split, Suite};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Embedded, ModelBundle};
use crate::numeric::{Optimizer, OptimizerConfig, ParamId, Real, Tape, Var};
use crate::session::{read_optimizer, write_optimizer, MetricsSink, SessionState, TokenCache};
use crate::tokenizers::TokenSequence;

pub use decoder::Decoder;
pub use mask::{apply_plan, corruption_counts, mask_count, plan_mask, Corruption, MaskPlan, MaskRatios, MaskStyle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    /// Each epoch takes one batch from every modality in turn.
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config { epochs: 50, batch: 16, lr: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub steps: usize,
    /// Samples per modality in each step.
    pub batch: usize,
    pub lr: f64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config { steps: 200, batch: 8, lr: 1e-3 }
    }
}

/// A token sequence with its mask plan applied.
#[derive(Clone, Debug)]
pub struct MaskedSample<T> {
    pub seq: TokenSequence<T>,
    pub plan: MaskPlan,
}

/// Plans a mask for `seq` with the ratio of its family and applies it.
pub fn prepare<T: Real>(bundle: &ModelBundle<T>, seq: &TokenSequence<T>, ratios: &MaskRatios, rng: &mut impl Rng) -> Result<MaskedSample<T>> {
    let tok = bundle.tokenizer(seq.modality)?;
    let (ratio, style) = ratios.for_config(&tok.config)?;
    let plan = plan_mask(seq.len(), ratio, style, rng)?;
    if plan.masked.is_empty() {
        return Err(Error::Invalid(format!("nothing to reconstruct in a {}-token `{}` sample", seq.len(), tok.name)));
    }
    let seq = apply_plan(seq, &plan, tok.mask_symbol(), rng)?;
    Ok(MaskedSample { seq, plan })
}

/// Embeds a masked sample. Returns the encoder input (visible rows only
/// when reconstructing) and the full-sequence positions.
fn encoder_input<T: Real>(bundle: &ModelBundle<T>, tape: &mut Tape<T>, s: &MaskedSample<T>) -> Result<(Embedded, Var)> {
    let e = bundle.embed(tape, &s.seq)?;
    if !s.plan.corruption.is_empty() {
        return Ok((e, e.positions));
    }
    let tokens = tape.gather_rows(e.tokens, &s.plan.visible)?;
    let positions = tape.gather_rows(e.positions, &s.plan.visible)?;
    Ok((Embedded { tokens, positions }, e.positions))
}

fn targets<T: Real>(s: &MaskedSample<T>) -> Result<&crate::tokenizers::Targets<T>> {
    s.seq.targets.as_ref().ok_or_else(|| Error::Invalid("masked sample without targets".into()))
}

fn mean_of<T: Real>(tape: &mut Tape<T>, parts: &[Var]) -> Result<Var> {
    let (&first, rest) = parts.split_first().ok_or_else(|| Error::Invalid("empty batch".into()))?;
    let mut acc = first;
    for &p in rest {
        acc = tape.add(acc, p)?;
    }
    Ok(if parts.len() == 1 { acc } else { tape.scale(acc, T::lit(1.0 / parts.len() as f64)) })
}

/// Stage-1 loss of one sample: `f`'s transformer encodes, the decoder
/// reconstructs the masked positions.
pub fn stage1_loss<T: Real>(bundle: &ModelBundle<T>, dec: &Decoder, tape: &mut Tape<T>, s: &MaskedSample<T>) -> Result<Var> {
    if s.seq.modality != dec.modality {
        return Err(Error::ModalityMismatch {
            expected: bundle.registry.modalities[dec.modality].name.clone(),
            got: bundle.registry.modalities[s.seq.modality].name.clone(),
        });
    }
    let (input, positions) = encoder_input(bundle, tape, s)?;
    let enc = bundle.f_encode(tape, input)?;
    let preds = dec.forward(tape, &bundle.store, enc, positions, &s.plan)?;
    decoder::reconstruction_loss(tape, preds, targets(s)?)
}

pub fn stage1_batch_loss<T: Real>(bundle: &ModelBundle<T>, dec: &Decoder, tape: &mut Tape<T>, batch: &[MaskedSample<T>]) -> Result<Var> {
    let parts = batch.iter().map(|s| stage1_loss(bundle, dec, tape, s)).collect::<Result<Vec<_>>>()?;
    mean_of(tape, &parts)
}

/// Parameters stage 1 updates for one modality.
pub fn stage1_params<T: Real>(bundle: &ModelBundle<T>, dec: &Decoder) -> Vec<ParamId> {
    let mut v = bundle.f.stack.params();
    v.extend(bundle.tokenizer_params(dec.modality));
    v.extend(dec.params());
    v
}

pub fn stage1_step<T: Real>(bundle: &mut ModelBundle<T>, dec: &Decoder, batch: &[MaskedSample<T>], opt: &mut Optimizer<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = stage1_batch_loss(bundle, dec, &mut tape, batch)?;
    let value = finite(tape.value(loss).item().as_f64(), "stage-1 loss")?;
    tape.backward(loss, &mut bundle.store)?;
    let params = stage1_params(bundle, dec);
    opt.apply(&mut bundle.store, &params)?;
    Ok(value)
}

/// Stage-2 losses of one sample pair through `f`, mid fusion, `g` and
/// output fusion, each stream decoded by its modality's decoder.
pub fn stage2_pair_loss<T: Real>(
    bundle: &ModelBundle<T>,
    dec_i: &Decoder,
    dec_j: &Decoder,
    tape: &mut Tape<T>,
    s_i: &MaskedSample<T>,
    s_j: &MaskedSample<T>,
) -> Result<(Var, Var)> {
    if s_i.seq.modality == s_j.seq.modality {
        return Err(Error::Invalid("stage 2 pairs two distinct modalities".into()));
    }
    if s_i.seq.modality != dec_i.modality || s_j.seq.modality != dec_j.modality {
        return Err(Error::Invalid("decoder does not match its stream".into()));
    }
    let (in_i, pos_i) = encoder_input(bundle, tape, s_i)?;
    let (in_j, pos_j) = encoder_input(bundle, tape, s_j)?;
    let u_i = bundle.f_embedded(tape, in_i)?;
    let u_j = bundle.f_embedded(tape, in_j)?;
    let (_, _, _, out_i, out_j) = bundle.pair_trunk(tape, u_i, in_i.tokens, u_j, in_j.tokens)?;
    let p_i = dec_i.forward(tape, &bundle.store, out_i, pos_i, &s_i.plan)?;
    let p_j = dec_j.forward(tape, &bundle.store, out_j, pos_j, &s_j.plan)?;
    let l_i = decoder::reconstruction_loss(tape, p_i, targets(s_i)?)?;
    let l_j = decoder::reconstruction_loss(tape, p_j, targets(s_j)?)?;
    Ok((l_i, l_j))
}

/// `(total, loss_i, loss_j)` with `total = loss_i + loss_j`; each part is
/// the batch mean.
pub fn stage2_batch_loss<T: Real>(
    bundle: &ModelBundle<T>,
    dec_i: &Decoder,
    dec_j: &Decoder,
    tape: &mut Tape<T>,
    batch_i: &[MaskedSample<T>],
    batch_j: &[MaskedSample<T>],
) -> Result<(Var, Var, Var)> {
    if batch_i.len() != batch_j.len() {
        return Err(Error::Invalid(format!("half batches of {} and {}", batch_i.len(), batch_j.len())));
    }
    let mut li = Vec::with_capacity(batch_i.len());
    let mut lj = Vec::with_capacity(batch_j.len());
    for (a, b) in batch_i.iter().zip(batch_j) {
        let (x, y) = stage2_pair_loss(bundle, dec_i, dec_j, tape, a, b)?;
        li.push(x);
        lj.push(y);
    }
    let l_i = mean_of(tape, &li)?;
    let l_j = mean_of(tape, &lj)?;
    Ok((tape.add(l_i, l_j)?, l_i, l_j))
}

/// Parameters stage 2 updates: the whole trunk, both tokenizers and both
/// decoders. Heads are never touched.
pub fn stage2_params<T: Real>(bundle: &ModelBundle<T>, dec_i: &Decoder, dec_j: &Decoder) -> Vec<ParamId> {
    let mut v = bundle.trunk_params();
    v.extend(bundle.tokenizer_params(dec_i.modality));
    v.extend(bundle.tokenizer_params(dec_j.modality));
    v.extend(dec_i.params());
    v.extend(dec_j.params());
    v
}

pub fn stage2_step<T: Real>(
    bundle: &mut ModelBundle<T>,
    dec_i: &Decoder,
    dec_j: &Decoder,
    batch_i: &[MaskedSample<T>],
    batch_j: &[MaskedSample<T>],
    opt: &mut Optimizer<T>,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let (total, l_i, l_j) = stage2_batch_loss(bundle, dec_i, dec_j, &mut tape, batch_i, batch_j)?;
    let value = finite(tape.value(total).item().as_f64(), "stage-2 loss")?;
    let (a, b) = (tape.value(l_i).item().as_f64(), tape.value(l_j).item().as_f64());
    tape.backward(total, &mut bundle.store)?;
    let params = stage2_params(bundle, dec_i, dec_j);
    opt.apply(&mut bundle.store, &params)?;
    Ok((value, a, b))
}

pub(crate) fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} diverged ({v})")))
    }
}

/// Uniform unordered pair of distinct entries of `items`, in random order.
pub fn sample_two(items: &[usize], rng: &mut impl Rng) -> Result<(usize, usize)> {
    if items.len() < 2 {
        return Err(Error::Invalid(format!("need at least 2 modalities, have {}", items.len())));
    }
    let a = rng.random_range(0..items.len());
    let mut b = rng.random_range(0..items.len() - 1);
    if b >= a {
        b += 1;
    }
    Ok((items[a], items[b]))
}

/// Stage 1 or 2 run state: the bundle with decoders attached, optimizer,
/// sampling cursors and step counter.
pub struct Pretrainer<'a, T> {
    pub stage: u32,
    pub bundle: ModelBundle<T>,
    pub decoders: Vec<Option<Decoder>>,
    pub opt: Optimizer<T>,
    pub state: SessionState,
    pub ratios: MaskRatios,
    pub modalities: Vec<usize>,
    pub batch: usize,
    pub total_steps: u64,
    pub seed: u64,
    cache: &'a TokenCache<T>,
}

impl<'a, T: Real> Pretrainer<'a, T> {
    pub fn stage1(
        bundle: ModelBundle<T>,
        suite: &Suite,
        cache: &'a TokenCache<T>,
        cfg: &Stage1Config,
        ratios: &MaskRatios,
        optim: &OptimizerConfig,
        seed: u64,
    ) -> Result<Self> {
        let mods = bundle.registry.pretrain_modalities();
        if mods.is_empty() {
            return Err(Error::config("modalities", "stage 1 needs at least one pretrainable modality"));
        }
        let total = (cfg.epochs * mods.len()) as u64;
        Self::new(1, bundle, suite, cache, mods, cfg.batch, total, cfg.lr, ratios, optim, seed)
    }

    pub fn stage2(
        bundle: ModelBundle<T>,
        suite: &Suite,
        cache: &'a TokenCache<T>,
        cfg: &Stage2Config,
        ratios: &MaskRatios,
        optim: &OptimizerConfig,
        seed: u64,
    ) -> Result<Self> {
        let mods = bundle.registry.pretrain_modalities();
        if mods.len() < 2 {
            return Err(Error::config("modalities", "stage 2 needs at least two pretrainable modalities"));
        }
        Self::new(2, bundle, suite, cache, mods, cfg.batch, cfg.steps as u64, cfg.lr, ratios, optim, seed)
    }

    #[allow(clippy::too_many_arguments)]
    fn new(
        stage: u32,
        mut bundle: ModelBundle<T>,
        suite: &Suite,
        cache: &'a TokenCache<T>,
        modalities: Vec<usize>,
        batch: usize,
        total_steps: u64,
        lr: f64,
        ratios: &MaskRatios,
        optim: &OptimizerConfig,
        seed: u64,
    ) -> Result<Self> {
        ratios.validate()?;
        if batch == 0 {
            return Err(Error::config(format!("stage{stage}.batch"), "must be positive"));
        }
        if bundle.has_aux() {
            bundle.discard_aux();
        }
        let in_width = if stage == 1 { bundle.dims.d_tok } else { bundle.dims.d_red };
        let mut decoders = vec![None; bundle.registry.modalities.len()];
        for &m in &modalities {
            decoders[m] = Some(Decoder::build(&mut bundle, stage, m, in_width, seed)?);
        }
        let cursors = modalities
            .iter()
            .map(|&m| Cursor::new(seed, 100 * stage as u64 + m as u64, suite.dataset(m).indices(Split::Train)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Pretrainer {
            stage,
            bundle,
            decoders,
            opt: Optimizer::new(optim.clone(), lr)?,
            state: SessionState { stage, cursors, ..SessionState::default() },
            ratios: ratios.clone(),
            modalities,
            batch,
            total_steps,
            seed,
            cache,
        })
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.total_steps
    }

    fn draw(&mut self, m: usize, rng: &mut impl Rng) -> Result<Vec<MaskedSample<T>>> {
        let slot = self.modalities.iter().position(|&x| x == m).expect("registered pretraining modality");
        let idx = self.state.cursors[slot].take(self.batch);
        idx.iter().map(|&i| prepare(&self.bundle, &self.cache.seqs[m][i], &self.ratios, rng)).collect()
    }

    /// One optimizer step; returns the step's total loss.
    pub fn step(&mut self, metrics: &mut MetricsSink) -> Result<f64> {
        let step = self.state.step;
        let mut rng = stream_rng(self.seed, &[self.stage as u64, step]);
        let loss = if self.stage == 1 {
            let m = self.modalities[(step % self.modalities.len() as u64) as usize];
            let batch = self.draw(m, &mut rng)?;
            let dec = self.decoders[m].clone().expect("decoder per modality");
            let loss = stage1_step(&mut self.bundle, &dec, &batch, &mut self.opt)?;
            metrics.emit(json!({
                "stage": 1, "step": step, "modality": self.bundle.registry.modalities[m].name, "loss": loss
            }))?;
            loss
        } else {
            let (i, j) = sample_two(&self.modalities, &mut rng)?;
            let b_i = self.draw(i, &mut rng)?;
            let b_j = self.draw(j, &mut rng)?;
            let d_i = self.decoders[i].clone().expect("decoder per modality");
            let d_j = self.decoders[j].clone().expect("decoder per modality");
            let (loss, l_i, l_j) = stage2_step(&mut self.bundle, &d_i, &d_j, &b_i, &b_j, &mut self.opt)?;
            let names = &self.bundle.registry.modalities;
            metrics.emit(json!({
                "stage": 2, "step": step, "pair": [names[i].name, names[j].name],
                "loss": loss, "loss_i": l_i, "loss_j": l_j
            }))?;
            loss
        };
        self.state.step += 1;
        Ok(loss)
    }

    /// Runs until the stage budget (or `until`, if earlier) is reached.
    pub fn run(&mut self, metrics: &mut MetricsSink, until: Option<u64>) -> Result<Vec<f64>> {
        let end = until.map_or(self.total_steps, |u| u.min(self.total_steps));
        let mut losses = Vec::new();
        while self.state.step < end {
            losses.push(self.step(metrics)?);
        }
        metrics.flush()?;
        Ok(losses)
    }

    /// Mid-stage checkpoint: parameters, decoders, optimizer and progress.
    pub fn checkpoint(&self, config: &str) -> Result<Checkpoint> {
        let mut ck = Checkpoint { stage: self.stage, config: config.to_string(), state: String::new(), records: Vec::new() };
        self.bundle.write_records(&mut ck);
        let mut state = self.state.clone();
        state.optimizer_step = self.opt.step;
        state.moment_steps = write_optimizer(&mut ck, &self.opt, &self.bundle.store)?;
        state.complete = self.done();
        ck.state = state.to_json()?;
        Ok(ck)
    }

    /// Restores a mid-stage checkpoint written by [`Pretrainer::checkpoint`].
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        let state = SessionState::from_json(&ck.state)?;
        if ck.stage != self.stage || state.stage != self.stage {
            return Err(Error::Checkpoint(format!("checkpoint is from stage {}, resuming stage {}", ck.stage, self.stage)));
        }
        if state.cursors.len() != self.state.cursors.len() {
            return Err(Error::Checkpoint("cursor count does not match the modality registry".into()));
        }
        self.bundle.read_records(ck)?;
        read_optimizer(ck, &mut self.opt, &self.bundle.store, &state)?;
        self.state = state;
        Ok(())
    }

    /// Drops the decoders and returns the trained bundle.
    pub fn finish(mut self) -> ModelBundle<T> {
        self.bundle.discard_aux();
        self.bundle
    }
}

#[cfg(test)]
mod tests;
