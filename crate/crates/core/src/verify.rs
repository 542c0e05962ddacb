//! Finite-difference verification of the stage-1, stage-2 and stage-3
//! losses on a miniature model.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::stream_rng;
use crate::error::Result;
use crate::model::ModelBundle;
use crate::numeric::{finite_diff_grad, rel_err, OpKind, ParamId, Tape, Var};
use crate::pretrain::{prepare, stage1_batch_loss, stage1_params, stage2_batch_loss, stage2_params, Decoder};
use crate::session::TokenCache;
use crate::trainer::{stage3_loss, stage3_params, PairBatch};

#[derive(Clone, Debug, Serialize)]
pub struct GroupCheck {
    pub stage: u32,
    pub group: String,
    pub max_rel_err: f64,
    pub probes: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.tolerance)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug)]
pub struct GradOptions {
    pub tolerance: f64,
    pub step: f64,
    /// Relative-error denominator floor.
    pub floor: f64,
    /// Coordinates probed per parameter tensor.
    pub coords: usize,
    /// Corrupts one backward rule in the analytic pass.
    pub fault: Option<OpKind>,
}

impl Default for GradOptions {
    fn default() -> Self {
        GradOptions { tolerance: 1e-3, step: 1e-5, floor: 1e-6, coords: 4, fault: None }
    }
}

struct Checker<'a> {
    opts: &'a GradOptions,
    worst: BTreeMap<(u32, String), (f64, usize)>,
}

impl Checker<'_> {
    /// Compares tape gradients of `loss` with central differences over
    /// `params`, folding errors into named groups.
    fn check(
        &mut self,
        stage: u32,
        bundle: &ModelBundle<f64>,
        groups: &[(String, Vec<ParamId>)],
        params: &[ParamId],
        loss: impl Fn(&ModelBundle<f64>, &mut Tape<f64>) -> Result<Var>,
    ) -> Result<()> {
        let mut b = bundle.clone();
        let mut tape = Tape::new();
        if let Some(kind) = self.opts.fault {
            tape.inject_fault(kind);
        }
        let l = loss(&b, &mut tape)?;
        b.store.zero_grads();
        tape.backward(l, &mut b.store)?;
        let analytic: Vec<Vec<f64>> = params
            .iter()
            .map(|&id| b.store.get(id).grad.clone().unwrap_or_else(|| vec![0.0; b.store.get(id).numel()]))
            .collect();
        let probe = b.clone();
        let est = finite_diff_grad(
            |store| {
                let mut bb = probe.clone();
                bb.store = store.clone();
                let mut tape = Tape::new();
                let l = loss(&bb, &mut tape)?;
                Ok(tape.value(l).item())
            },
            &mut b.store,
            params,
            self.opts.step,
            Some(self.opts.coords),
        )?;
        for ((&id, a), (idx, n)) in params.iter().zip(&analytic).zip(&est) {
            let group = groups
                .iter()
                .find(|(_, ids)| ids.contains(&id))
                .map_or_else(|| b.store.name(id).to_string(), |(g, _)| g.clone());
            let err = idx.iter().zip(n).map(|(&i, &e)| rel_err(a[i], e, self.opts.floor)).fold(0.0, f64::max);
            let slot = self.worst.entry((stage, group)).or_insert((0.0, 0));
            slot.0 = slot.0.max(err);
            slot.1 += idx.len();
        }
        Ok(())
    }
}

fn decoder_group(bundle: &ModelBundle<f64>, stage: u32, d: &Decoder) -> (String, Vec<ParamId>) {
    (format!("dec{stage}.{}", bundle.registry.modalities[d.modality].name), d.params())
}

/// Runs all three checks on `cfg.mini()` in 64-bit arithmetic.
pub fn gradcheck(cfg: &RunConfig, opts: &GradOptions) -> Result<GradReport> {
    let mini = cfg.mini();
    mini.validate()?;
    let suite = mini.suite()?;
    let mut bundle = ModelBundle::<f64>::new(mini.model.clone(), mini.registry()?, mini.seed)?;
    let cache = TokenCache::build(&mut bundle, &suite)?;
    let mut checker = Checker { opts, worst: BTreeMap::new() };
    let mut rng = stream_rng(mini.seed, &[0x9c]);
    let pre = bundle.registry.pretrain_modalities();

    for &m in &pre {
        let mut b = bundle.clone();
        let dec = Decoder::build(&mut b, 1, m, mini.model.d_tok, mini.seed)?;
        let s = prepare(&b, &cache.seqs[m][0], &mini.masking, &mut rng)?;
        let mut groups = b.param_groups();
        groups.push(decoder_group(&b, 1, &dec));
        let params = stage1_params(&b, &dec);
        checker.check(1, &b, &groups, &params, |bb, tape| stage1_batch_loss(bb, &dec, tape, std::slice::from_ref(&s)))?;
    }

    if pre.len() >= 2 {
        for k in 0..pre.len() {
            let (i, j) = (pre[k], pre[(k + 1) % pre.len()]);
            if pre.len() == 2 && k == 1 {
                break;
            }
            let mut b = bundle.clone();
            let d_i = Decoder::build(&mut b, 2, i, mini.model.d_red, mini.seed)?;
            let d_j = Decoder::build(&mut b, 2, j, mini.model.d_red, mini.seed)?;
            let s_i = prepare(&b, &cache.seqs[i][0], &mini.masking, &mut rng)?;
            let s_j = prepare(&b, &cache.seqs[j][1], &mini.masking, &mut rng)?;
            let mut groups = b.param_groups();
            groups.push(decoder_group(&b, 2, &d_i));
            groups.push(decoder_group(&b, 2, &d_j));
            let params = stage2_params(&b, &d_i, &d_j);
            checker.check(2, &b, &groups, &params, |bb, tape| {
                Ok(stage2_batch_loss(bb, &d_i, &d_j, tape, std::slice::from_ref(&s_i), std::slice::from_ref(&s_j))?.0)
            })?;
        }
    }

    let reg = bundle.registry.clone();
    let groups = bundle.param_groups();
    for q in 0..reg.tasks.len() {
        let i = reg.tasks[q].modality_index;
        let Some(r) = (0..reg.tasks.len()).find(|&r| reg.tasks[r].modality_index != i) else {
            continue;
        };
        let batch = PairBatch { q, r, half_q: vec![0], half_r: vec![1], single_stream: false };
        let params = stage3_params(&bundle, &batch)?;
        checker.check(3, &bundle, &groups, &params, |bb, tape| {
            Ok(stage3_loss(bb, tape, &cache, &suite, &batch, Some((1.25, 0.75)))?.0)
        })?;
    }

    let groups = checker
        .worst
        .into_iter()
        .map(|((stage, group), (max_rel_err, probes))| GroupCheck { stage, group, max_rel_err, probes })
        .collect();
    Ok(GradReport { tolerance: opts.tolerance, groups })
}
