use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Real;
use crate::tokenizers::{TokenInput, TokenSequence, TokenizerConfig};

/// Mask ratios per family and the prediction fraction of symbolic
/// sequences.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskRatios {
    pub grid: f64,
    /// Real-valued series.
    pub series: f64,
    pub set: f64,
    /// Share of symbols selected for prediction in symbolic sequences.
    pub fraction: f64,
}

impl Default for MaskRatios {
    fn default() -> Self {
        MaskRatios {
            grid: 0.95,
            series: 0.95,
            set: 0.90,
            fraction: 0.05,
        }
    }
}

impl MaskRatios {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("grid", self.grid), ("series", self.series), ("set", self.set)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(format!("masking.{name}"), format!("ratio {v} outside [0, 1)")));
            }
        }
        if !(self.fraction > 0.0 && self.fraction < 1.0) {
            return Err(Error::config("masking.fraction", format!("{} outside (0, 1)", self.fraction)));
        }
        Ok(())
    }

    /// Ratio and masking style for a modality.
    pub fn for_config(&self, cfg: &TokenizerConfig) -> Result<(f64, MaskStyle)> {
        match cfg {
            TokenizerConfig::Grid { .. } => Ok((self.grid, MaskStyle::Reconstruct)),
            TokenizerConfig::Sequence { vocab: Some(_), .. } => Ok((self.fraction, MaskStyle::Corrupt)),
            TokenizerConfig::Sequence { .. } => Ok((self.series, MaskStyle::Reconstruct)),
            TokenizerConfig::Set { .. } => Ok((self.set, MaskStyle::Reconstruct)),
            TokenizerConfig::Table { .. } => Err(Error::Invalid("table rows have no masked-pretraining target".into())),
        }
    }
}

/// How selected tokens are hidden.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStyle {
    /// Dropped from the encoder input; the decoder reconstructs them.
    Reconstruct,
    /// Symbols corrupted in place with the 8:1:1 rule and predicted.
    Corrupt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Corruption {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    /// Sorted.
    pub masked: Vec<usize>,
    /// Sorted complement of `masked`.
    pub visible: Vec<usize>,
    /// One entry per masked index (corrupt style only).
    pub corruption: Vec<Corruption>,
}

/// `round(ratio * n)` clamped to `[1, n - 1]` when `0 < ratio < 1`; zero
/// when `ratio == 0` or `n < 2`.
pub fn mask_count(n: usize, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Invalid(format!("mask ratio {ratio} outside [0, 1)")));
    }
    if ratio == 0.0 || n < 2 {
        return Ok(0);
    }
    Ok(((ratio * n as f64).round() as usize).clamp(1, n - 1))
}

/// `(mask, random, keep)` counts for `selected` tokens: random and keep
/// each take `round(selected / 10)`, the remainder is masked.
pub fn corruption_counts(selected: usize) -> (usize, usize, usize) {
    let tenth = (selected as f64 * 0.1).round() as usize;
    let random = tenth.min(selected);
    let keep = tenth.min(selected - random);
    (selected - random - keep, random, keep)
}

pub fn plan_mask(n: usize, ratio: f64, style: MaskStyle, rng: &mut impl Rng) -> Result<MaskPlan> {
    let count = mask_count(n, ratio)?;
    let mut masked = index::sample(rng, n, count).into_vec();
    masked.sort_unstable();
    let mut is_masked = vec![false; n];
    for &i in &masked {
        is_masked[i] = true;
    }
    let visible = (0..n).filter(|&i| !is_masked[i]).collect();
    let corruption = match style {
        MaskStyle::Reconstruct => Vec::new(),
        MaskStyle::Corrupt => {
            let (m, r, k) = corruption_counts(count);
            let mut c: Vec<Corruption> = std::iter::repeat_n(Corruption::Mask, m)
                .chain(std::iter::repeat_n(Corruption::Random, r))
                .chain(std::iter::repeat_n(Corruption::Keep, k))
                .collect();
            c.shuffle(rng);
            c
        }
    };
    Ok(MaskPlan { masked, visible, corruption })
}

/// Attaches the plan to a sequence: targets are gathered from the clean
/// input, then symbols are corrupted per the plan.
pub fn apply_plan<T: Real>(
    seq: &TokenSequence<T>,
    plan: &MaskPlan,
    vocab: Option<usize>,
    rng: &mut impl Rng,
) -> Result<TokenSequence<T>> {
    let mut out = seq.clone().with_mask(&plan.masked)?;
    if !plan.corruption.is_empty() {
        let v = vocab.ok_or_else(|| Error::Invalid("corruption needs a vocabulary".into()))?;
        let TokenInput::Symbols(ids) = &mut out.input else {
            return Err(Error::Invalid("only symbol sequences are corrupted".into()));
        };
        for (&i, c) in plan.masked.iter().zip(&plan.corruption) {
            match c {
                Corruption::Mask => ids[i] = v,
                Corruption::Random => ids[i] = rng.random_range(0..v),
                Corruption::Keep => {}
            }
        }
    }
    Ok(out)
}
