use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModalitySpec;
use crate::numeric::Tensor;
use crate::tokenizers::{read_token_dump, write_token_dump, Sample, TokenizerConfig};

use super::{SyntheticDataset, TaskLabels};

#[derive(Serialize, Deserialize)]
struct Sidecar {
    modality: ModalitySpec,
    tasks: Vec<TaskLabels>,
    seed: u64,
    split: usize,
}

fn flatten(s: &Sample) -> Vec<f32> {
    match s {
        Sample::Grid(v) | Sample::Series(v) | Sample::Points(v) => v.clone(),
        Sample::Symbols(ids) => ids.iter().map(|&i| i as f32).collect(),
        Sample::Row { numeric, categorical } => numeric.iter().copied().chain(categorical.iter().map(|&c| c as f32)).collect(),
    }
}

fn unflatten(cfg: &TokenizerConfig, row: &[f32]) -> Sample {
    match cfg {
        TokenizerConfig::Grid { .. } => Sample::Grid(row.to_vec()),
        TokenizerConfig::Sequence { vocab: Some(_), .. } => Sample::Symbols(row.iter().map(|&v| v as usize).collect()),
        TokenizerConfig::Sequence { .. } => Sample::Series(row.to_vec()),
        TokenizerConfig::Set { .. } => Sample::Points(row.to_vec()),
        TokenizerConfig::Table { numeric, .. } => Sample::Row {
            numeric: row[..*numeric].to_vec(),
            categorical: row[*numeric..].iter().map(|&v| v as usize).collect(),
        },
    }
}

/// Writes `<stem>.owtk` (one flattened sample per row) and `<stem>.json`
/// (modality, task specs, labels, seed, split).
pub fn save_dataset(ds: &SyntheticDataset, stem: &Path) -> Result<()> {
    let rows: Vec<Vec<f32>> = ds.samples.iter().map(flatten).collect();
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(Error::Invalid("samples must share one non-zero flat width".into()));
    }
    let t = Tensor::matrix(rows.len(), width, rows.concat())?;
    let mut w = BufWriter::new(File::create(stem.with_extension("owtk"))?);
    write_token_dump(&mut w, &t)?;
    let side = Sidecar {
        modality: ds.modality.clone(),
        tasks: ds.tasks.clone(),
        seed: ds.seed,
        split: ds.split,
    };
    serde_json::to_writer_pretty(BufWriter::new(File::create(stem.with_extension("json"))?), &side)?;
    Ok(())
}

pub fn load_dataset(stem: &Path) -> Result<SyntheticDataset> {
    let rows = read_token_dump(&mut BufReader::new(File::open(stem.with_extension("owtk"))?))?;
    let side: Sidecar = serde_json::from_reader(BufReader::new(File::open(stem.with_extension("json"))?))?;
    let samples: Vec<Sample> = (0..rows.rows()).map(|r| unflatten(&side.modality.tokenizer, rows.row(r))).collect();
    if side.tasks.iter().any(|t| t.labels.len() != samples.len()) || side.split > samples.len() {
        return Err(Error::Invalid(format!("sidecar does not match {} samples", samples.len())));
    }
    Ok(SyntheticDataset {
        modality: side.modality,
        samples,
        tasks: side.tasks,
        seed: side.seed,
        split: side.split,
    })
}
