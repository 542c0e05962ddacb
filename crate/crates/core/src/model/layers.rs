use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Real, Tape, Tensor, Var};

/// Seeded parameter initializer. Values are drawn in `f64` and cast, so an
/// `f32` and an `f64` model built from one seed hold the same numbers up to
/// rounding.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal<T: Real>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("positive extents")
    }

    /// Glorot-normal `fan_in x fan_out` weight.
    pub fn xavier<T: Real>(&mut self, fan_in: usize, fan_out: usize) -> Tensor<T> {
        self.normal(&[fan_in, fan_out], (2.0 / (fan_in + fan_out) as f64).sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), init.xavier(fan_in, fan_out), true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, fan_out]), true),
            fan_in,
            fan_out,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let h = tape.matmul(x, w)?;
        tape.add_row(h, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl Norm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize, eps: f64) -> Self {
        Norm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[1, width]), true),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1, width]), true),
            eps,
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, T::lit(self.eps))
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.gain, self.bias]
    }
}

/// Multi-head scaled dot-product attention. Queries are projected from the
/// first input, keys and values from the second.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
    pub width: usize,
}

impl Attention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        width: usize,
        kv_width: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return Err(Error::config("model.heads", format!("{heads} heads do not divide width {width}")));
        }
        Ok(Attention {
            q: Linear::new(store, init, &format!("{name}.q"), width, width),
            k: Linear::new(store, init, &format!("{name}.k"), kv_width, width),
            v: Linear::new(store, init, &format!("{name}.v"), kv_width, width),
            o: Linear::new(store, init, &format!("{name}.o"), width, width),
            heads,
            width,
        })
    }

    /// Returns the projected output and the per-head attention weights
    /// (`n_q x n_k` each).
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Var,
        kv: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let qw = tape.shape(query).last().copied().unwrap_or(0);
        let kw = tape.shape(kv).last().copied().unwrap_or(0);
        if qw != self.q.fan_in || kw != self.k.fan_in {
            return Err(Error::Shape {
                op: "attention",
                lhs: vec![qw, kw],
                rhs: vec![self.q.fan_in, self.k.fan_in],
            });
        }
        let q = self.q.forward(tape, store, query)?;
        let k = self.k.forward(tape, store, kv)?;
        let v = self.v.forward(tape, store, kv)?;
        let dh = self.width / self.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice_cols(q, h * dh, dh)?,
                    tape.slice_cols(k, h * dh, dh)?,
                    tape.slice_cols(v, h * dh, dh)?,
                )
            };
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1)?;
            weights.push(attn);
            outs.push(tape.matmul(attn, vh)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        Ok((self.o.forward(tape, store, cat)?, weights))
    }

    pub fn params(&self) -> Vec<ParamId> {
        [&self.q, &self.k, &self.v, &self.o].iter().flat_map(|l| l.params()).collect()
    }
}

/// Pre-norm transformer block: self-attention then a GeLU MLP, each with a
/// residual connection.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: Norm,
    pub attn: Attention,
    pub ln2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct TransformerStack {
    pub blocks: Vec<Block>,
    pub ln_f: Norm,
    pub width: usize,
    pub heads: usize,
}

impl TransformerStack {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        width: usize,
        heads: usize,
        layers: usize,
        mlp_ratio: usize,
        eps: f64,
    ) -> Result<Self> {
        let hidden = width * mlp_ratio.max(1);
        let blocks = (0..layers)
            .map(|i| {
                let p = format!("{name}.{i}");
                Ok(Block {
                    ln1: Norm::new(store, &format!("{p}.ln1"), width, eps),
                    attn: Attention::new(store, init, &format!("{p}.attn"), width, width, heads)?,
                    ln2: Norm::new(store, &format!("{p}.ln2"), width, eps),
                    fc1: Linear::new(store, init, &format!("{p}.fc1"), width, hidden),
                    fc2: Linear::new(store, init, &format!("{p}.fc2"), hidden, width),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TransformerStack {
            blocks,
            ln_f: Norm::new(store, &format!("{name}.ln_f"), width, eps),
            width,
            heads,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.shape(x).last().copied().unwrap_or(0);
        if w != self.width {
            return Err(Error::Shape {
                op: "transformer input width",
                lhs: tape.shape(x).to_vec(),
                rhs: vec![self.width],
            });
        }
        let mut h = x;
        for b in &self.blocks {
            let n = b.ln1.forward(tape, store, h)?;
            let (a, _) = b.attn.forward(tape, store, n, n)?;
            h = tape.add(h, a)?;
            let n = b.ln2.forward(tape, store, h)?;
            let m = b.fc1.forward(tape, store, n)?;
            let m = tape.gelu(m);
            let m = b.fc2.forward(tape, store, m)?;
            h = tape.add(h, m)?;
        }
        self.ln_f.forward(tape, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend(b.ln1.params());
            v.extend(b.attn.params());
            v.extend(b.ln2.params());
            v.extend(b.fc1.params());
            v.extend(b.fc2.params());
        }
        v.extend(self.ln_f.params());
        v
    }
}

/// Cross-attention with a residual connection to the query stream; the
/// output has the query's shape.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub attn: Attention,
}

impl CrossAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        query_width: usize,
        kv_width: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(CrossAttention {
            attn: Attention::new(store, init, name, query_width, kv_width, heads)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, query: Var, kv: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, store, query, kv)?.0)
    }

    pub fn forward_with_weights<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query: Var,
        kv: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let (a, w) = self.attn.forward(tape, store, query, kv)?;
        Ok((tape.add(query, a)?, w))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.attn.params()
    }
}
