use rand::Rng;

use crate::data::stream_rng;
use crate::error::{Error, Result};
use crate::model::{Init, Linear, ModelBundle, TransformerStack};
use crate::numeric::{ParamId, ParamStore, Real, Tape, Var};
use crate::tokenizers::TokenizerConfig;

use super::MaskPlan;

/// Per-modality reconstruction decoder. Works at `d_tok`; stage-2 decoders
/// first lift the `d_red` cross-attention output with `input`.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub modality: usize,
    pub input: Option<Linear>,
    /// Fills dropped slots; symbolic inputs keep their corrupted symbols
    /// in place and have none.
    pub mask_token: Option<ParamId>,
    pub stack: TransformerStack,
    pub out: Linear,
    pub symbolic: bool,
}

impl Decoder {
    /// Appends a decoder for modality `m` to the bundle's store under
    /// `dec<stage>.<name>`.
    pub fn build<T: Real>(bundle: &mut ModelBundle<T>, stage: u32, m: usize, in_width: usize, seed: u64) -> Result<Self> {
        let spec = bundle
            .registry
            .modalities
            .get(m)
            .ok_or_else(|| Error::Unregistered { what: "modality", name: format!("#{m}") })?;
        let (target, symbolic) = match spec.tokenizer {
            TokenizerConfig::Sequence { vocab: Some(v), .. } => (v, true),
            TokenizerConfig::Table { .. } => {
                return Err(Error::Invalid(format!("modality `{}` has no reconstruction target", spec.name)))
            }
            ref cfg => (cfg.input_width(), false),
        };
        let p = format!("dec{stage}.{}", spec.name);
        if bundle.store.ids_with_prefix(&format!("{p}.")).next().is_some() {
            return Err(Error::Invalid(format!("decoder `{p}` already exists")));
        }
        let d = bundle.dims.clone();
        let mut init = Init::new(stream_rng(seed, &[0xdec, stage as u64, m as u64]).random());
        let store: &mut ParamStore<T> = &mut bundle.store;
        let input = (in_width != d.d_tok).then(|| Linear::new(store, &mut init, &format!("{p}.input"), in_width, d.d_tok));
        let mask_token = (!symbolic).then(|| store.add(format!("{p}.mask_token"), init.normal(&[1, d.d_tok], 0.02), true));
        let stack = TransformerStack::new(store, &mut init, &format!("{p}.stack"), d.d_tok, d.heads, d.decoder_layers, d.mlp_ratio, d.ln_eps)?;
        let out = Linear::new(store, &mut init, &format!("{p}.out"), d.d_tok, target);
        Ok(Decoder { modality: m, input, mask_token, stack, out, symbolic })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.input.iter().flat_map(|l| l.params()).collect();
        v.extend(self.mask_token);
        v.extend(self.stack.params());
        v.extend(self.out.params());
        v
    }

    /// Predictions at the masked positions, in plan order.
    ///
    /// `encoded` holds one row per visible token (reconstruct style) or per
    /// token (corrupt style); `positions` covers the full sequence.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        encoded: Var,
        positions: Var,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let h = match &self.input {
            Some(l) => l.forward(tape, store, encoded)?,
            None => encoded,
        };
        let full = if self.symbolic {
            h
        } else {
            // scatter visible rows back; masked slots read the mask token
            let n = plan.masked.len() + plan.visible.len();
            let slot = plan.visible.len();
            let mut index = vec![slot; n];
            for (k, &i) in plan.visible.iter().enumerate() {
                index[i] = k;
            }
            let mt = tape.param(store, self.mask_token.expect("dense decoders carry a mask token"));
            let pool = tape.concat_rows(&[h, mt])?;
            tape.gather_rows(pool, &index)?
        };
        let x = tape.add(full, positions)?;
        let y = self.stack.forward(tape, store, x)?;
        let y = tape.gather_rows(y, &plan.masked)?;
        self.out.forward(tape, store, y)
    }
}

/// Reconstruction loss against the masked targets: ℓ2 for dense targets,
/// cross-entropy for symbols.
pub(crate) fn reconstruction_loss<T: Real>(
    tape: &mut Tape<T>,
    preds: Var,
    targets: &crate::tokenizers::Targets<T>,
) -> Result<Var> {
    match targets {
        crate::tokenizers::Targets::Dense(t) => {
            let tv = tape.constant(t.clone());
            tape.l2_loss(preds, tv)
        }
        crate::tokenizers::Targets::Symbols(ids) => tape.cross_entropy(preds, ids),
    }
}

