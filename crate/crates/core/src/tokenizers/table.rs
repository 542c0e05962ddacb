use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::Real;

use super::{sinusoidal_1d, Positions, TokenInput, TokenSequence, TokenizerConfig};

/// Per-field mean and standard deviation of the numeric columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl TableStats {
    /// Fits statistics on the rows of a training split. Constant columns get
    /// unit deviation.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let rows: Vec<&[f32]> = rows.into_iter().collect();
        let first = rows.first().ok_or_else(|| Error::Invalid("no rows to fit table statistics".into()))?;
        let f = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; f];
        for r in &rows {
            for (m, &v) in mean.iter_mut().zip(*r) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut std = vec![0.0; f];
        for r in &rows {
            for ((s, &v), m) in std.iter_mut().zip(*r).zip(&mean) {
                *s += (v as f64 - m).powi(2);
            }
        }
        for s in &mut std {
            *s = (*s / n).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Ok(TableStats { mean, std })
    }
}

/// One token per field: numeric fields z-scored with `stats`, categorical
/// fields kept as codes for their embedding tables. Field index is the
/// position.
pub fn tokenize_table<T: Real>(
    numeric: &[f32],
    categorical: &[usize],
    cfg: &TokenizerConfig,
    stats: &TableStats,
    d_tok: usize,
) -> Result<TokenSequence<T>> {
    let TokenizerConfig::Table { numeric: nf, categorical: ref cards } = *cfg else {
        return Err(Error::Invalid("table tokenization needs a table config".into()));
    };
    if numeric.len() != nf || categorical.len() != cards.len() {
        return Err(Error::Invalid(format!(
            "row has {} numeric and {} categorical fields, schema expects {nf} and {}",
            numeric.len(),
            categorical.len(),
            cards.len()
        )));
    }
    for (i, (&c, &card)) in categorical.iter().zip(cards).enumerate() {
        if c >= card {
            return Err(Error::Invalid(format!("categorical field {i}: code {c} >= cardinality {card}")));
        }
    }
    let z: Vec<T> = numeric
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let m = stats.mean.get(i).copied().unwrap_or(0.0);
            let s = stats.std.get(i).copied().unwrap_or(1.0);
            T::lit((v as f64 - m) / s)
        })
        .collect();
    Ok(TokenSequence {
        modality: 0,
        input: TokenInput::Fields {
            numeric: z,
            categorical: categorical.to_vec(),
        },
        positions: Positions::Fixed(sinusoidal_1d(nf + cards.len(), d_tok)),
        mask: None,
        targets: None,
    })
}
