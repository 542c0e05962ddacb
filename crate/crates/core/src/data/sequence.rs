use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Label, ModalitySpec, TaskSpec};
use crate::tokenizers::{Sample, TokenizerConfig};

use super::{assemble, check_tasks, GenOptions, SyntheticDataset};

/// Symbol sequences over `[0, V)` with exactly one reserved symbol
/// `k < K` planted at a random position; all other symbols are drawn from
/// `[K, V)`. Label = `k`; the `half` task labels whether the planted symbol
/// lies in the first (0) or second (1) half.
pub fn gen_sequence_dataset(
    modality: &ModalitySpec,
    tasks: &[TaskSpec],
    classes: usize,
    opts: &GenOptions,
    seed: u64,
) -> Result<SyntheticDataset> {
    let TokenizerConfig::Sequence { length, vocab: Some(vocab), .. } = modality.tokenizer else {
        return Err(Error::Invalid("symbol generator needs a vocabulary".into()));
    };
    if vocab <= classes {
        return Err(Error::config(
            format!("modalities.{}.vocab", modality.name),
            format!("vocabulary {vocab} must exceed the {classes} motif symbols"),
        ));
    }
    if length < 2 {
        return Err(Error::config(format!("modalities.{}.length", modality.name), "need at least 2 symbols"));
    }
    check_tasks(modality, tasks, classes, false, true)?;
    assemble(modality, tasks, classes, opts, seed, |class, rng| {
        let at = rng.random_range(0..length);
        let ids: Vec<usize> = (0..length)
            .map(|i| if i == at { class } else { rng.random_range(classes..vocab) })
            .collect();
        let labels = tasks
            .iter()
            .map(|t| {
                if t.name == "half" {
                    Label::Class(usize::from(at >= length / 2))
                } else {
                    Label::Class(class)
                }
            })
            .collect();
        Ok((Sample::Symbols(ids), labels))
    })
}

/// Real series `sin(2 pi (k+1) t / L + phase)` plus noise; label = `k`.
pub fn gen_series_dataset(
    modality: &ModalitySpec,
    tasks: &[TaskSpec],
    classes: usize,
    opts: &GenOptions,
    seed: u64,
) -> Result<SyntheticDataset> {
    let TokenizerConfig::Sequence { length, .. } = modality.tokenizer else {
        return Err(Error::Invalid("series generator needs a sequence config".into()));
    };
    if 2 * classes >= length {
        return Err(Error::config(
            format!("modalities.{}.length", modality.name),
            format!("{classes} frequencies alias at length {length}"),
        ));
    }
    check_tasks(modality, tasks, classes, false, false)?;
    let noise = Normal::new(0.0, opts.noise.max(1e-300)).expect("finite std");
    let sigma = opts.noise;
    assemble(modality, tasks, classes, opts, seed, |class, rng| {
        let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let freq = (class + 1) as f64;
        let xs = (0..length)
            .map(|t| {
                let v = (std::f64::consts::TAU * freq * t as f64 / length as f64 + phase).sin();
                (v + if sigma > 0.0 { noise.sample(rng) } else { 0.0 }) as f32
            })
            .collect();
        Ok((Sample::Series(xs), vec![Label::Class(class); tasks.len()]))
    })
}
