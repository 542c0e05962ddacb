//! The two-transformer network: feature transformation `f` (transformer plus
//! a three-layer FC reduction), mid-level cross-attention fusion, the shared
//! transformer `g`, output cross-attention back onto the raw modality tokens,
//! and per-task heads.
//!
//! Training uses the two-stream topology ([`ModelBundle::forward_pair`]);
//! prediction uses a single stream with both cross-attention modules removed
//! ([`ModelBundle::forward_inference`]).

mod checkpoint;
mod layers;
mod registry;

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::tokenizers::{TokenSequence, Tokenizer};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::{Attention, Block, CrossAttention, Init, Linear, Norm, TransformerStack};
pub use registry::{Label, LossKind, ModalitySpec, ModelDims, Registry, TaskKind, TaskSpec};

/// `f`: transformer over tokens + positions, then three FC layers with ReLU
/// reducing `d_tok` to `d_red`.
#[derive(Clone, Debug)]
pub struct FeatureTransform {
    pub stack: TransformerStack,
    pub fc: [Linear; 3],
}

impl FeatureTransform {
    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.stack.params();
        v.extend(self.fc_params());
        v
    }

    pub fn fc_params(&self) -> Vec<ParamId> {
        self.fc.iter().flat_map(|l| l.params()).collect()
    }
}

/// A task head: a small transformer over `d_red` features, then mean-pool
/// and a linear classifier, or a per-token linear map for dense tasks.
#[derive(Clone, Debug)]
pub struct Head {
    pub task: usize,
    pub stack: TransformerStack,
    pub out: Linear,
}

impl Head {
    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.stack.params();
        v.extend(self.out.params());
        v
    }
}

/// Embedded input stream: projected tokens and their additive positions.
#[derive(Clone, Copy, Debug)]
pub struct Embedded {
    pub tokens: Var,
    pub positions: Var,
}

/// Intermediate values of one two-stream forward.
#[derive(Clone, Debug)]
pub struct PairForward {
    pub pred_i: Var,
    pub pred_j: Var,
    pub fused: Var,
    pub backbone_i: Var,
    pub backbone_j: Var,
    pub head_in_i: Var,
    pub head_in_j: Var,
}

#[derive(Clone, Debug)]
pub struct ModelBundle<T> {
    pub dims: ModelDims,
    pub registry: Registry,
    pub store: ParamStore<T>,
    pub tokenizers: Vec<Tokenizer>,
    pub f: FeatureTransform,
    pub a_mid: CrossAttention,
    pub a_out: CrossAttention,
    pub g: TransformerStack,
    pub heads: Vec<Head>,
    base_len: usize,
}

impl<T: Real> ModelBundle<T> {
    pub fn new(dims: ModelDims, registry: Registry, seed: u64) -> Result<Self> {
        dims.validate()?;
        registry.validate(dims.d_tok)?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let d = &dims;
        let tokenizers = registry
            .modalities
            .iter()
            .enumerate()
            .map(|(i, m)| Tokenizer::build(&mut store, i, &m.name, m.tokenizer.clone(), d.d_tok, &mut init))
            .collect::<Result<Vec<_>>>()?;
        let f = FeatureTransform {
            stack: TransformerStack::new(&mut store, &mut init, "f.stack", d.d_tok, d.heads, d.f_layers, d.mlp_ratio, d.ln_eps)?,
            fc: [
                Linear::new(&mut store, &mut init, "f.fc0", d.d_tok, d.d_tok),
                Linear::new(&mut store, &mut init, "f.fc1", d.d_tok, d.d_red),
                Linear::new(&mut store, &mut init, "f.fc2", d.d_red, d.d_red),
            ],
        };
        let a_mid = CrossAttention::new(&mut store, &mut init, "a_mid", d.d_red, d.d_red, d.heads)?;
        let g = TransformerStack::new(&mut store, &mut init, "g", d.d_red, d.heads, d.g_layers, d.mlp_ratio, d.ln_eps)?;
        let a_out = CrossAttention::new(&mut store, &mut init, "a_out", d.d_red, d.d_tok, d.heads)?;
        let heads = registry
            .tasks
            .iter()
            .enumerate()
            .map(|(t, spec)| {
                let p = format!("head.{}.{}", spec.modality, spec.name);
                Ok(Head {
                    task: t,
                    stack: TransformerStack::new(&mut store, &mut init, &format!("{p}.stack"), d.d_red, d.heads, d.head_layers, d.mlp_ratio, d.ln_eps)?,
                    out: Linear::new(&mut store, &mut init, &format!("{p}.out"), d.d_red, spec.outputs),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let base_len = store.len();
        Ok(ModelBundle {
            dims,
            registry,
            store,
            tokenizers,
            f,
            a_mid,
            a_out,
            g,
            heads,
            base_len,
        })
    }

    /// Same structure with values converted to another precision. Auxiliary
    /// (decoder) entries are carried over.
    pub fn cast<U: Real>(&self) -> ModelBundle<U> {
        ModelBundle {
            dims: self.dims.clone(),
            registry: self.registry.clone(),
            store: self.store.cast(),
            tokenizers: self.tokenizers.clone(),
            f: self.f.clone(),
            a_mid: self.a_mid.clone(),
            a_out: self.a_out.clone(),
            g: self.g.clone(),
            heads: self.heads.clone(),
            base_len: self.base_len,
        }
    }

    /// Number of store entries that belong to the network proper.
    pub fn base_len(&self) -> usize {
        self.base_len
    }

    /// Drops every auxiliary entry (pretraining decoders).
    pub fn discard_aux(&mut self) {
        self.store.truncate(self.base_len);
    }

    pub fn has_aux(&self) -> bool {
        self.store.len() > self.base_len
    }

    pub fn task(&self, t: usize) -> Result<&TaskSpec> {
        self.registry.tasks.get(t).ok_or_else(|| Error::Unregistered {
            what: "task",
            name: format!("#{t}"),
        })
    }

    pub fn tokenizer(&self, m: usize) -> Result<&Tokenizer> {
        self.tokenizers.get(m).ok_or_else(|| Error::Unregistered {
            what: "modality",
            name: format!("#{m}"),
        })
    }

    pub fn tokenize(&self, m: usize, sample: &crate::tokenizers::Sample) -> Result<TokenSequence<T>> {
        self.tokenizer(m)?.tokenize(&self.store, sample)
    }

    pub fn embed(&self, tape: &mut Tape<T>, x: &TokenSequence<T>) -> Result<Embedded> {
        let (tokens, positions) = self.tokenizer(x.modality)?.embed(tape, &self.store, x)?;
        Ok(Embedded { tokens, positions })
    }

    /// Transformer part of `f` over `tokens + positions`.
    pub fn f_encode(&self, tape: &mut Tape<T>, e: Embedded) -> Result<Var> {
        let x = tape.add(e.tokens, e.positions)?;
        self.f.stack.forward(tape, &self.store, x)
    }

    /// FC reduction part of `f`.
    pub fn f_reduce(&self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let [l0, l1, l2] = &self.f.fc;
        let h = l0.forward(tape, &self.store, h)?;
        let h = tape.relu(h);
        let h = l1.forward(tape, &self.store, h)?;
        let h = tape.relu(h);
        l2.forward(tape, &self.store, h)
    }

    pub fn f_embedded(&self, tape: &mut Tape<T>, e: Embedded) -> Result<Var> {
        let h = self.f_encode(tape, e)?;
        self.f_reduce(tape, h)
    }

    /// `f(x)`: `n x d_red`.
    pub fn f_transform(&self, tape: &mut Tape<T>, x: &TokenSequence<T>) -> Result<Var> {
        let e = self.embed(tape, x)?;
        self.f_embedded(tape, e)
    }

    pub fn cross_attend(&self, tape: &mut Tape<T>, params: &CrossAttention, query: Var, kv: Var) -> Result<Var> {
        params.forward(tape, &self.store, query, kv)
    }

    /// Shared two-stream trunk: bidirectional mid fusion of `u_i`, `u_j`,
    /// `g` over the concatenated streams, split back by token count, then
    /// output fusion against the raw tokens of each stream.
    pub fn pair_trunk(&self, tape: &mut Tape<T>, u_i: Var, raw_i: Var, u_j: Var, raw_j: Var) -> Result<(Var, Var, Var, Var, Var)> {
        let n_i = tape.value(u_i).rows();
        let n_j = tape.value(u_j).rows();
        let mid_i = self.a_mid.forward(tape, &self.store, u_i, u_j)?;
        let mid_j = self.a_mid.forward(tape, &self.store, u_j, u_i)?;
        let fused = tape.concat_rows(&[mid_i, mid_j])?;
        let xh = self.g.forward(tape, &self.store, fused)?;
        let xh_i = tape.slice_rows(xh, 0, n_i)?;
        let xh_j = tape.slice_rows(xh, n_i, n_j)?;
        let out_i = self.a_out.forward(tape, &self.store, xh_i, raw_i)?;
        let out_j = self.a_out.forward(tape, &self.store, xh_j, raw_j)?;
        Ok((fused, xh_i, xh_j, out_i, out_j))
    }

    /// Two-stream training forward for task `q` on `x_i` and task `r` on
    /// `x_j`.
    pub fn forward_pair(&self, tape: &mut Tape<T>, x_i: &TokenSequence<T>, x_j: &TokenSequence<T>, q: usize, r: usize) -> Result<PairForward> {
        for (x, t) in [(x_i, q), (x_j, r)] {
            let spec = self.task(t)?;
            if spec.modality_index != x.modality {
                return Err(Error::ModalityMismatch {
                    expected: spec.modality.clone(),
                    got: self.registry.modalities.get(x.modality).map(|m| m.name.clone()).unwrap_or_default(),
                });
            }
        }
        let e_i = self.embed(tape, x_i)?;
        let e_j = self.embed(tape, x_j)?;
        let u_i = self.f_embedded(tape, e_i)?;
        let u_j = self.f_embedded(tape, e_j)?;
        let (fused, backbone_i, backbone_j, head_in_i, head_in_j) = self.pair_trunk(tape, u_i, e_i.tokens, u_j, e_j.tokens)?;
        let pred_i = self.head_forward(tape, head_in_i, q)?;
        let pred_j = self.head_forward(tape, head_in_j, r)?;
        Ok(PairForward {
            pred_i,
            pred_j,
            fused,
            backbone_i,
            backbone_j,
            head_in_i,
            head_in_j,
        })
    }

    /// Single-stream prediction `h(g(f(x)))`.
    pub fn forward_inference(&self, tape: &mut Tape<T>, x: &TokenSequence<T>, t: usize) -> Result<Var> {
        let spec = self.task(t)?;
        if spec.modality_index != x.modality {
            return Err(Error::ModalityMismatch {
                expected: spec.modality.clone(),
                got: self.registry.modalities.get(x.modality).map(|m| m.name.clone()).unwrap_or_default(),
            });
        }
        let u = self.f_transform(tape, x)?;
        let z = self.g.forward(tape, &self.store, u)?;
        self.head_forward(tape, z, t)
    }

    /// Mean-pooled `g(f(x))`, `1 x d_red`: the frozen embedding used for
    /// adaptation.
    pub fn embedding(&self, tape: &mut Tape<T>, x: &TokenSequence<T>) -> Result<Var> {
        let u = self.f_transform(tape, x)?;
        let z = self.g.forward(tape, &self.store, u)?;
        Ok(tape.mean_rows(z))
    }

    /// Evaluated prediction without keeping the graph.
    pub fn predict(&self, x: &TokenSequence<T>, t: usize) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.forward_inference(&mut tape, x, t)?;
        Ok(tape.value(p).clone())
    }

    /// Classification: `[K]` logits from mean-pooled features.
    /// Dense: `n x outputs`.
    pub fn head_forward(&self, tape: &mut Tape<T>, features: Var, t: usize) -> Result<Var> {
        let spec = self.task(t)?;
        let head = &self.heads[t];
        let h = head.stack.forward(tape, &self.store, features)?;
        match spec.kind {
            TaskKind::Classification => {
                let pooled = tape.mean_rows(h);
                let logits = head.out.forward(tape, &self.store, pooled)?;
                tape.reshape(logits, vec![spec.outputs])
            }
            TaskKind::Dense => head.out.forward(tape, &self.store, h),
        }
    }

    /// Mean task loss over per-sample predictions.
    pub fn task_loss(&self, tape: &mut Tape<T>, t: usize, preds: &[Var], labels: &[&Label]) -> Result<Var> {
        let spec = self.task(t)?;
        if preds.is_empty() || preds.len() != labels.len() {
            return Err(Error::Invalid(format!("{} predictions for {} labels", preds.len(), labels.len())));
        }
        match spec.kind {
            TaskKind::Classification => {
                let ys = labels
                    .iter()
                    .map(|l| match l {
                        Label::Class(c) => Ok(*c),
                        Label::Dense(_) => Err(Error::Invalid(format!("task `{}` expects class labels", spec.name))),
                    })
                    .collect::<Result<Vec<_>>>()?;
                let logits = tape.concat_rows(preds)?;
                tape.cross_entropy(logits, &ys)
            }
            TaskKind::Dense => {
                let mut parts = Vec::with_capacity(preds.len());
                for (&p, l) in preds.iter().zip(labels) {
                    let Label::Dense(map) = l else {
                        return Err(Error::Invalid(format!("task `{}` expects per-token labels", spec.name)));
                    };
                    let target = one_hot::<T>(map, spec.outputs)?;
                    let tv = tape.constant(target);
                    parts.push(tape.l2_loss(p, tv)?);
                }
                if parts.len() == 1 {
                    return Ok(parts[0]);
                }
                let cat = tape.concat_rows(&parts)?;
                Ok(tape.mean(cat))
            }
        }
    }

    pub fn tokenizer_params(&self, m: usize) -> Vec<ParamId> {
        self.tokenizers.get(m).map(Tokenizer::param_ids).unwrap_or_default()
    }

    /// Parameters of `f`, both cross-attention modules and `g`.
    pub fn trunk_params(&self) -> Vec<ParamId> {
        let mut v = self.f.params();
        v.extend(self.a_mid.params());
        v.extend(self.g.params());
        v.extend(self.a_out.params());
        v
    }

    pub fn head_params(&self, t: usize) -> Vec<ParamId> {
        self.heads.get(t).map(Head::params).unwrap_or_default()
    }

    /// Appends one record per store entry, auxiliary entries included.
    pub fn write_records(&self, ckpt: &mut Checkpoint) {
        for (_, name, t) in self.store.iter() {
            ckpt.record(name, t);
        }
    }

    /// Restores every store entry from the record of the same name. A
    /// missing record or a shape conflict means the checkpoint was written
    /// for a different configuration.
    pub fn read_records(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let ids: Vec<ParamId> = self.store.ids().collect();
        for id in ids {
            let name = self.store.name(id).to_string();
            let rec = ckpt
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("no record for parameter `{name}`")))?;
            if rec.shape() != self.store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint but {:?} in the config",
                    rec.shape(),
                    self.store.get(id).shape()
                )));
            }
            self.store.set_values(id, rec.cast())?;
        }
        Ok(())
    }

    /// Named parameter groups in network order, for reports.
    pub fn param_groups(&self) -> Vec<(String, Vec<ParamId>)> {
        let mut groups = Vec::new();
        for (m, tok) in self.tokenizers.iter().enumerate() {
            groups.push((format!("tok.{}", tok.name), self.tokenizer_params(m)));
        }
        groups.push(("f.stack".into(), self.f.stack.params()));
        groups.push(("f.fc".into(), self.f.fc_params()));
        groups.push(("a_mid".into(), self.a_mid.params()));
        groups.push(("g".into(), self.g.params()));
        groups.push(("a_out".into(), self.a_out.params()));
        for (t, spec) in self.registry.tasks.iter().enumerate() {
            groups.push((format!("head.{}.{}", spec.modality, spec.name), self.head_params(t)));
        }
        groups
    }
}

/// One-hot rows for per-token labels.
pub fn one_hot<T: Real>(labels: &[usize], width: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); labels.len() * width];
    for (i, &l) in labels.iter().enumerate() {
        if l >= width {
            return Err(Error::Label { label: l, classes: width });
        }
        data[i * width + l] = T::one();
    }
    Tensor::matrix(labels.len(), width, data)
}

#[cfg(test)]
mod tests;
