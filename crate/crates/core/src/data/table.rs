use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Label, ModalitySpec, TaskKind, TaskSpec};
use crate::tokenizers::{Sample, TokenizerConfig};

use super::{assemble, GenOptions, SyntheticDataset};

/// Fixed linear score of a row: numeric field `f` weighs `(-1)^f (f + 1)`,
/// categorical field `i` adds `(-1)^(code + i)`.
pub fn table_score(numeric: &[f32], categorical: &[usize]) -> f64 {
    let num: f64 = numeric
        .iter()
        .enumerate()
        .map(|(f, &v)| if f % 2 == 0 { 1.0 } else { -1.0 } * (f + 1) as f64 * v as f64)
        .sum();
    let cat: f64 = categorical
        .iter()
        .enumerate()
        .map(|(i, &c)| if (c + i) % 2 == 0 { 1.0 } else { -1.0 })
        .sum();
    num + cat
}

/// Uniform numeric fields in `[-1, 1]` and uniform categorical codes.
/// Binary label = `score > 0`; rows with `|score| < 0.25` are redrawn so the
/// classes keep a margin.
pub fn gen_table_dataset(modality: &ModalitySpec, tasks: &[TaskSpec], opts: &GenOptions, seed: u64) -> Result<SyntheticDataset> {
    let TokenizerConfig::Table { numeric, ref categorical } = modality.tokenizer else {
        return Err(Error::Invalid("table generator needs a table config".into()));
    };
    for t in tasks {
        if t.kind != TaskKind::Classification || t.outputs != 2 {
            return Err(Error::config(format!("tasks.{}", t.key()), "table rows carry one binary label"));
        }
    }
    let cards = categorical.clone();
    assemble(modality, tasks, 2, opts, seed, |_, rng| loop {
        let num: Vec<f32> = (0..numeric).map(|_| rng.random_range(-1.0..1.0)).collect();
        let cat: Vec<usize> = cards.iter().map(|&c| rng.random_range(0..c)).collect();
        let s = table_score(&num, &cat);
        if s.abs() >= 0.25 {
            let label = Label::Class(usize::from(s > 0.0));
            return Ok((Sample::Row { numeric: num, categorical: cat }, vec![label; tasks.len()]));
        }
    })
}
