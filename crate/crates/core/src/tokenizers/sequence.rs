use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

use super::{sinusoidal_1d, Positions, TokenInput, TokenSequence, TokenizerConfig};

/// One token per symbol; ids must lie in the vocabulary.
pub fn tokenize_symbols<T: Real>(ids: &[usize], cfg: &TokenizerConfig, d_tok: usize) -> Result<TokenSequence<T>> {
    let TokenizerConfig::Sequence { vocab: Some(vocab), .. } = *cfg else {
        return Err(Error::Invalid("symbol tokenization needs a vocabulary".into()));
    };
    if ids.is_empty() {
        return Err(Error::Invalid("empty symbol sequence".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
        return Err(Error::UnknownSymbol(bad));
    }
    Ok(TokenSequence {
        modality: 0,
        input: TokenInput::Symbols(ids.to_vec()),
        positions: Positions::Fixed(sinusoidal_1d(ids.len(), d_tok)),
        mask: None,
        targets: None,
    })
}

/// One token per length-`window` slice of a real series, after per-sample
/// normalization.
pub fn tokenize_sequence<T: Real>(series: &[f32], cfg: &TokenizerConfig, d_tok: usize) -> Result<TokenSequence<T>> {
    let TokenizerConfig::Sequence { window, .. } = *cfg else {
        return Err(Error::Invalid("series tokenization needs a sequence config".into()));
    };
    if series.is_empty() || window == 0 || series.len() % window != 0 {
        return Err(Error::config(
            "tokenizer.window",
            format!("window {window} does not divide series length {}", series.len()),
        ));
    }
    let n = series.len() as f64;
    let mean = series.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = series.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let data: Vec<T> = if var < 1e-12 {
        vec![T::zero(); series.len()]
    } else {
        series.iter().map(|&v| T::lit((v as f64 - mean) / var.sqrt())).collect()
    };
    let tokens = series.len() / window;
    Ok(TokenSequence {
        modality: 0,
        input: TokenInput::Dense(Tensor::matrix(tokens, window, data)?),
        positions: Positions::Fixed(sinusoidal_1d(tokens, d_tok)),
        mask: None,
        targets: None,
    })
}
