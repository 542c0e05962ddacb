//! Modality-specific tokenizers.
//!
//! Tokenization has a fixed part and a learnable part. The fixed part
//! (normalization, patching, grouping, vocabulary checks, position codes)
//! runs once per sample and produces a [`TokenSequence`]. The learnable
//! projection to `d_tok` lives in the model's parameter store and is applied
//! on the tape by [`Tokenizer::embed`], so tokenizer weights train with the
//! rest of the network.

mod dump;
mod grid;
mod positions;
mod sequence;
mod set;
mod table;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{ParamId, ParamStore, Real, Tape, Tensor, Var};

pub use dump::{read_token_dump, write_token_dump, TOKEN_MAGIC, TOKEN_VERSION};
pub use grid::tokenize_grid;
pub use positions::{sinusoidal_1d, sinusoidal_2d};
pub use sequence::{tokenize_sequence, tokenize_symbols};
pub use set::{farthest_point_sampling, k_nearest, tokenize_set};
pub use table::{tokenize_table, TableStats};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Grid,
    Sequence,
    Set,
    Table,
}

/// Per-family tokenizer settings. The token width `d_tok` is shared by all
/// modalities and lives in the model dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TokenizerConfig {
    /// Images, depth maps, spectrograms: `height x width x channels` grids
    /// cut into square patches.
    Grid {
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
    },
    /// Text (when `vocab` is set) or real-valued series cut into windows.
    Sequence {
        length: usize,
        #[serde(default)]
        vocab: Option<usize>,
        #[serde(default = "one")]
        window: usize,
    },
    /// Point clouds with `3 + features` values per point.
    Set {
        points: usize,
        #[serde(default)]
        features: usize,
        groups: usize,
        group_size: usize,
    },
    /// One row of `numeric` real fields followed by categorical fields with
    /// the given cardinalities.
    Table {
        numeric: usize,
        categorical: Vec<usize>,
    },
}

fn one() -> usize {
    1
}

impl TokenizerConfig {
    pub fn family(&self) -> Family {
        match self {
            TokenizerConfig::Grid { .. } => Family::Grid,
            TokenizerConfig::Sequence { .. } => Family::Sequence,
            TokenizerConfig::Set { .. } => Family::Set,
            TokenizerConfig::Table { .. } => Family::Table,
        }
    }

    pub fn is_symbolic(&self) -> bool {
        matches!(self, TokenizerConfig::Sequence { vocab: Some(_), .. })
    }

    pub fn token_count(&self) -> usize {
        match *self {
            TokenizerConfig::Grid { height, width, patch, .. } => (height / patch) * (width / patch),
            TokenizerConfig::Sequence { length, vocab: Some(_), .. } => length,
            TokenizerConfig::Sequence { length, window, .. } => length / window,
            TokenizerConfig::Set { groups, .. } => groups,
            TokenizerConfig::Table { numeric, ref categorical } => numeric + categorical.len(),
        }
    }

    /// Width of one raw token row (the reconstruction target width of the
    /// dense families).
    pub fn input_width(&self) -> usize {
        match *self {
            TokenizerConfig::Grid { channels, patch, .. } => patch * patch * channels,
            TokenizerConfig::Sequence { vocab: Some(_), .. } => 1,
            TokenizerConfig::Sequence { window, .. } => window,
            TokenizerConfig::Set { features, group_size, .. } => group_size * (3 + features),
            TokenizerConfig::Table { .. } => 1,
        }
    }

    pub fn validate(&self, path: &str, d_tok: usize) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::config(format!("{path}.{field}"), msg));
        match *self {
            TokenizerConfig::Grid { height, width, channels, patch } => {
                if height == 0 || width == 0 || channels == 0 || patch == 0 {
                    return bad("patch", "grid extents and patch must be positive".into());
                }
                if height % patch != 0 || width % patch != 0 {
                    return bad("patch", format!("patch {patch} does not divide {height}x{width}"));
                }
                if d_tok % 4 != 0 {
                    return bad("d_tok", format!("2-D positions need d_tok divisible by 4, got {d_tok}"));
                }
            }
            TokenizerConfig::Sequence { length, vocab, window } => {
                if length == 0 || window == 0 {
                    return bad("length", "length and window must be positive".into());
                }
                if vocab == Some(0) {
                    return bad("vocab", "vocabulary must be non-empty".into());
                }
                if vocab.is_none() && length % window != 0 {
                    return bad("window", format!("window {window} does not divide length {length}"));
                }
            }
            TokenizerConfig::Set { points, groups, group_size, .. } => {
                if groups == 0 || group_size == 0 {
                    return bad("groups", "group count and size must be positive".into());
                }
                if points < groups * group_size {
                    return bad("points", format!("{points} points < {groups} groups x {group_size}"));
                }
            }
            TokenizerConfig::Table { numeric, ref categorical } => {
                if numeric + categorical.len() == 0 {
                    return bad("numeric", "table needs at least one field".into());
                }
                if categorical.iter().any(|&c| c == 0) {
                    return bad("categorical", "cardinalities must be positive".into());
                }
            }
        }
        if d_tok % 2 != 0 {
            return bad("d_tok", format!("sinusoidal positions need an even width, got {d_tok}"));
        }
        Ok(())
    }
}

/// A raw sample in one of the four structural families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Sample {
    /// Row-major `height x width x channels` values.
    Grid(Vec<f32>),
    Symbols(Vec<usize>),
    Series(Vec<f32>),
    /// Row-major `points x (3 + features)` values.
    Points(Vec<f32>),
    Row { numeric: Vec<f32>, categorical: Vec<usize> },
}

/// Pre-projection token content.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenInput<T> {
    /// One row per token: normalized patches, windows or recentered groups.
    Dense(Tensor<T>),
    Symbols(Vec<usize>),
    Fields { numeric: Vec<T>, categorical: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Positions<T> {
    /// Fixed additive codes, `n x d_tok`.
    Fixed(Tensor<T>),
    /// Per-token coordinates (`n x 3`) projected by learnable weights.
    Coordinates(Tensor<T>),
}

/// Reconstruction targets at the masked positions, in mask order.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets<T> {
    Dense(Tensor<T>),
    Symbols(Vec<usize>),
}

/// Tokenized form of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub modality: usize,
    pub input: TokenInput<T>,
    pub positions: Positions<T>,
    pub mask: Option<Vec<bool>>,
    pub targets: Option<Targets<T>>,
}

impl<T: Real> TokenSequence<T> {
    pub fn len(&self) -> usize {
        match &self.input {
            TokenInput::Dense(t) => t.rows(),
            TokenInput::Symbols(s) => s.len(),
            TokenInput::Fields { numeric, categorical } => numeric.len() + categorical.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Attaches a mask and gathers the reconstruction targets at the masked
    /// positions (the uncorrupted input rows or symbol ids).
    pub fn with_mask(mut self, masked: &[usize]) -> Result<Self> {
        let n = self.len();
        let mut mask = vec![false; n];
        for &i in masked {
            if i >= n {
                return Err(Error::Invalid(format!("mask index {i} out of {n} tokens")));
            }
            mask[i] = true;
        }
        let targets = if masked.is_empty() {
            None
        } else {
            match &self.input {
                TokenInput::Dense(t) => Some(Targets::Dense(t.gather_rows(masked))),
                TokenInput::Symbols(s) => Some(Targets::Symbols(masked.iter().map(|&i| s[i]).collect())),
                TokenInput::Fields { .. } => {
                    return Err(Error::Invalid("table tokens have no reconstruction target".into()))
                }
            }
        };
        self.mask = Some(mask);
        self.targets = targets;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        let input_ok = match &self.input {
            TokenInput::Dense(t) => t.all_finite(),
            TokenInput::Fields { numeric, .. } => numeric.iter().all(|v| v.is_finite()),
            TokenInput::Symbols(_) => true,
        };
        let pos_ok = match &self.positions {
            Positions::Fixed(t) | Positions::Coordinates(t) => t.all_finite(),
        };
        input_ok && pos_ok
    }
}

/// Parameter handles of one modality's learnable projection.
#[derive(Clone, Debug)]
pub enum TokenizerParams {
    Linear { w: ParamId, b: ParamId },
    Embedding { table: ParamId },
    Set { w: ParamId, b: ParamId, pos_w: ParamId, pos_b: ParamId },
    Table { num_w: ParamId, num_b: ParamId, cat: Vec<ParamId>, mu: ParamId, sigma: ParamId },
}

/// A registered modality's tokenizer: fixed configuration plus handles to
/// its learnable projection.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    pub modality: usize,
    pub name: String,
    pub config: TokenizerConfig,
    pub d_tok: usize,
    pub params: TokenizerParams,
}

impl Tokenizer {
    /// Registers projection parameters for a modality in `store`.
    pub fn build<T: Real>(
        store: &mut ParamStore<T>,
        modality: usize,
        name: &str,
        config: TokenizerConfig,
        d_tok: usize,
        init: &mut crate::model::Init,
    ) -> Result<Self> {
        config.validate(&format!("modalities.{name}"), d_tok)?;
        let p = format!("tok.{name}");
        let params = match &config {
            TokenizerConfig::Sequence { vocab: Some(v), .. } => {
                // one extra row: the [MASK] symbol used by corruption
                let table = store.add(format!("{p}.embed"), init.normal(&[v + 1, d_tok], 1.0), true);
                TokenizerParams::Embedding { table }
            }
            TokenizerConfig::Set { .. } => {
                let inw = config.input_width();
                TokenizerParams::Set {
                    w: store.add(format!("{p}.w"), init.xavier(inw, d_tok), true),
                    b: store.add(format!("{p}.b"), Tensor::zeros(&[1, d_tok]), true),
                    pos_w: store.add(format!("{p}.pos_w"), init.xavier(3, d_tok), true),
                    pos_b: store.add(format!("{p}.pos_b"), Tensor::zeros(&[1, d_tok]), true),
                }
            }
            TokenizerConfig::Table { numeric, categorical } => {
                let nf = (*numeric).max(1);
                let num_w = store.add(format!("{p}.num_w"), init.normal(&[nf, d_tok], 1.0), true);
                let num_b = store.add(format!("{p}.num_b"), init.normal(&[nf, d_tok], 1.0), true);
                let cat = categorical
                    .iter()
                    .enumerate()
                    .map(|(i, &card)| store.add(format!("{p}.cat{i}"), init.normal(&[card, d_tok], 1.0), true))
                    .collect();
                let mu = store.add(format!("{p}.mu"), Tensor::zeros(&[1, nf]), false);
                let sigma = store.add(format!("{p}.sigma"), Tensor::ones(&[1, nf]), false);
                TokenizerParams::Table { num_w, num_b, cat, mu, sigma }
            }
            _ => {
                let inw = config.input_width();
                TokenizerParams::Linear {
                    w: store.add(format!("{p}.w"), init.xavier(inw, d_tok), true),
                    b: store.add(format!("{p}.b"), Tensor::zeros(&[1, d_tok]), true),
                }
            }
        };
        Ok(Tokenizer {
            modality,
            name: name.to_string(),
            config,
            d_tok,
            params,
        })
    }

    pub fn family(&self) -> Family {
        self.config.family()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match &self.params {
            TokenizerParams::Linear { w, b } => vec![*w, *b],
            TokenizerParams::Embedding { table } => vec![*table],
            TokenizerParams::Set { w, b, pos_w, pos_b } => vec![*w, *b, *pos_w, *pos_b],
            TokenizerParams::Table { num_w, num_b, cat, .. } => {
                let mut v = vec![*num_w, *num_b];
                v.extend(cat);
                v
            }
        }
    }

    /// Id of the `[MASK]` symbol (symbolic sequences only).
    pub fn mask_symbol(&self) -> Option<usize> {
        match self.config {
            TokenizerConfig::Sequence { vocab: Some(v), .. } => Some(v),
            _ => None,
        }
    }

    /// Fixed part of tokenization.
    pub fn tokenize<T: Real>(&self, store: &ParamStore<T>, sample: &Sample) -> Result<TokenSequence<T>> {
        let mut seq = match (&self.config, sample) {
            (TokenizerConfig::Grid { .. }, Sample::Grid(data)) => tokenize_grid(data, &self.config, self.d_tok)?,
            (TokenizerConfig::Sequence { .. }, Sample::Symbols(ids)) => tokenize_symbols(ids, &self.config, self.d_tok)?,
            (TokenizerConfig::Sequence { .. }, Sample::Series(xs)) => tokenize_sequence(xs, &self.config, self.d_tok)?,
            (TokenizerConfig::Set { .. }, Sample::Points(p)) => tokenize_set(p, &self.config)?,
            (TokenizerConfig::Table { .. }, Sample::Row { numeric, categorical }) => {
                let stats = self.table_stats(store)?;
                tokenize_table(numeric, categorical, &self.config, &stats, self.d_tok)?
            }
            _ => {
                return Err(Error::ModalityMismatch {
                    expected: format!("{:?} sample", self.family()),
                    got: sample_kind(sample).into(),
                })
            }
        };
        seq.modality = self.modality;
        Ok(seq)
    }

    pub fn table_stats<T: Real>(&self, store: &ParamStore<T>) -> Result<TableStats> {
        match &self.params {
            TokenizerParams::Table { mu, sigma, .. } => Ok(TableStats {
                mean: store.get(*mu).data().iter().map(|v| v.as_f64()).collect(),
                std: store.get(*sigma).data().iter().map(|v| v.as_f64()).collect(),
            }),
            _ => Err(Error::Invalid(format!("modality `{}` is not tabular", self.name))),
        }
    }

    /// Stores fitted numeric-field statistics (table family only).
    pub fn set_table_stats<T: Real>(&self, store: &mut ParamStore<T>, stats: &TableStats) -> Result<()> {
        let TokenizerParams::Table { mu, sigma, .. } = &self.params else {
            return Err(Error::Invalid(format!("modality `{}` is not tabular", self.name)));
        };
        let n = store.get(*mu).numel();
        let pad = |v: &[f64], fill: f64| -> Vec<T> {
            (0..n).map(|i| T::lit(v.get(i).copied().unwrap_or(fill))).collect()
        };
        store.set_values(*mu, Tensor::matrix(1, n, pad(&stats.mean, 0.0))?)?;
        store.set_values(*sigma, Tensor::matrix(1, n, pad(&stats.std, 1.0))?)?;
        Ok(())
    }

    /// Learnable projection on the tape: returns `(tokens, positions)`, both
    /// `n x d_tok`.
    pub fn embed<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, seq: &TokenSequence<T>) -> Result<(Var, Var)> {
        if seq.modality != self.modality {
            return Err(Error::ModalityMismatch {
                expected: self.name.clone(),
                got: format!("modality #{}", seq.modality),
            });
        }
        let tokens = match (&self.params, &seq.input) {
            (TokenizerParams::Linear { w, b }, TokenInput::Dense(x)) | (TokenizerParams::Set { w, b, .. }, TokenInput::Dense(x)) => {
                let xv = tape.constant(x.clone());
                let wv = tape.param(store, *w);
                let bv = tape.param(store, *b);
                let h = tape.matmul(xv, wv)?;
                tape.add_row(h, bv)?
            }
            (TokenizerParams::Embedding { table }, TokenInput::Symbols(ids)) => {
                let tv = tape.param(store, *table);
                tape.gather_rows(tv, ids)?
            }
            (TokenizerParams::Table { num_w, num_b, cat, .. }, TokenInput::Fields { numeric, categorical }) => {
                let mut rows = Vec::new();
                if !numeric.is_empty() {
                    let nf = numeric.len();
                    let wv = tape.param(store, *num_w);
                    let bv = tape.param(store, *num_b);
                    let wv = tape.slice_rows(wv, 0, nf)?;
                    let bv = tape.slice_rows(bv, 0, nf)?;
                    // token_f = z_f * w_f + b_f
                    let d = self.d_tok;
                    let mut z = Vec::with_capacity(nf * d);
                    for &v in numeric {
                        z.extend(std::iter::repeat_n(v, d));
                    }
                    let zv = tape.constant(Tensor::matrix(nf, d, z)?);
                    let scaled = tape.mul(zv, wv)?;
                    rows.push(tape.add(scaled, bv)?);
                }
                for (&c, &table) in categorical.iter().zip(cat) {
                    let tv = tape.param(store, table);
                    rows.push(tape.gather_rows(tv, &[c])?);
                }
                tape.concat_rows(&rows)?
            }
            _ => return Err(Error::Invalid(format!("token input does not match tokenizer `{}`", self.name))),
        };
        let positions = match (&self.params, &seq.positions) {
            (_, Positions::Fixed(p)) => tape.constant(p.clone()),
            (TokenizerParams::Set { pos_w, pos_b, .. }, Positions::Coordinates(c)) => {
                let cv = tape.constant(c.clone());
                let wv = tape.param(store, *pos_w);
                let bv = tape.param(store, *pos_b);
                let h = tape.matmul(cv, wv)?;
                tape.add_row(h, bv)?
            }
            _ => return Err(Error::Invalid("coordinate positions need a set tokenizer".into())),
        };
        Ok((tokens, positions))
    }

    /// Evaluated token rows (`n x d_tok`) under the current parameters.
    pub fn materialize<T: Real>(&self, store: &ParamStore<T>, seq: &TokenSequence<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let (t, p) = self.embed(&mut tape, store, seq)?;
        Ok((tape.value(t).clone(), tape.value(p).clone()))
    }
}

fn sample_kind(s: &Sample) -> &'static str {
    match s {
        Sample::Grid(_) => "grid sample",
        Sample::Symbols(_) => "symbol sample",
        Sample::Series(_) => "series sample",
        Sample::Points(_) => "point sample",
        Sample::Row { .. } => "table row",
    }
}
