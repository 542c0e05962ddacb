use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

use super::{sinusoidal_2d, Positions, TokenInput, TokenSequence, TokenizerConfig};

/// Cuts a row-major `H x W x C` grid into `p x p` patches after per-sample
/// normalization to zero mean and unit variance. A constant grid normalizes
/// to all zeros.
pub fn tokenize_grid<T: Real>(data: &[f32], cfg: &TokenizerConfig, d_tok: usize) -> Result<TokenSequence<T>> {
    let TokenizerConfig::Grid { height, width, channels, patch } = *cfg else {
        return Err(Error::Invalid("grid tokenizer needs a grid config".into()));
    };
    if patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::config(
            "tokenizer.patch",
            format!("patch {patch} does not divide {height}x{width}"),
        ));
    }
    if data.len() != height * width * channels {
        return Err(Error::Invalid(format!(
            "grid sample has {} values, expected {height}x{width}x{channels}",
            data.len()
        )));
    }
    let n = data.len() as f64;
    let mean = data.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let norm: Vec<f64> = if var < 1e-12 {
        vec![0.0; data.len()]
    } else {
        let inv = 1.0 / var.sqrt();
        data.iter().map(|&v| (v as f64 - mean) * inv).collect()
    };

    let (pr, pc) = (height / patch, width / patch);
    let pw = patch * patch * channels;
    let mut rows = Vec::with_capacity(pr * pc * pw);
    for i in 0..pr {
        for j in 0..pc {
            for dy in 0..patch {
                for dx in 0..patch {
                    let y = i * patch + dy;
                    let x = j * patch + dx;
                    let base = (y * width + x) * channels;
                    rows.extend(norm[base..base + channels].iter().map(|&v| T::lit(v)));
                }
            }
        }
    }
    Ok(TokenSequence {
        modality: 0,
        input: TokenInput::Dense(Tensor::matrix(pr * pc, pw, rows)?),
        positions: Positions::Fixed(sinusoidal_2d(pr, pc, d_tok)),
        mask: None,
        targets: None,
    })
}
