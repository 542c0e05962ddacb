//! State shared by the stage loops: metrics stream, resumable training
//! state, optimizer persistence and the per-run token cache.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{Cursor, Suite};
use crate::error::{Error, Result};
use crate::model::{Checkpoint, ModelBundle};
use crate::numeric::{Moments, Optimizer, ParamStore, Real, Tensor};
use crate::tokenizers::{TableStats, TokenSequence, TokenizerConfig};
use crate::trainer::BalancerState;

/// Append-only JSON-lines metrics. Records are also kept in memory.
#[derive(Default)]
pub struct MetricsSink {
    writer: Option<BufWriter<File>>,
    pub records: Vec<Value>,
}

impl MetricsSink {
    pub fn memory() -> Self {
        Self::default()
    }

    pub fn append(path: &Path) -> Result<Self> {
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(MetricsSink {
            writer: Some(BufWriter::new(f)),
            records: Vec::new(),
        })
    }

    pub fn emit(&mut self, record: Value) -> Result<()> {
        if let Some(w) = &mut self.writer {
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        self.records.push(record);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.flush()?;
        }
        Ok(())
    }
}

/// Progress of a stage, stored as JSON in checkpoints.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub stage: u32,
    pub step: u64,
    pub complete: bool,
    pub cursors: Vec<Cursor>,
    #[serde(default)]
    pub balancer: Option<BalancerState>,
    pub optimizer_step: u64,
    /// Adam bias-correction counts by parameter name.
    pub moment_steps: BTreeMap<String, u64>,
}

impl SessionState {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        if text.trim().is_empty() {
            return Ok(SessionState::default());
        }
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("bad state section: {e}")))
    }
}

/// Appends `optim.m/<name>` and `optim.v/<name>` records and returns the
/// per-parameter step counts.
pub fn write_optimizer<T: Real>(ck: &mut Checkpoint, opt: &Optimizer<T>, store: &ParamStore<T>) -> Result<BTreeMap<String, u64>> {
    let mut steps = BTreeMap::new();
    for (id, m) in opt.state() {
        let name = store.name(id);
        let shape = store.get(id).shape().to_vec();
        ck.record(format!("optim.m/{name}"), &Tensor::new(shape.clone(), m.first.clone())?);
        if !m.second.is_empty() {
            ck.record(format!("optim.v/{name}"), &Tensor::new(shape, m.second.clone())?);
        }
        steps.insert(name.to_string(), m.steps);
    }
    Ok(steps)
}

pub fn read_optimizer<T: Real>(
    ck: &Checkpoint,
    opt: &mut Optimizer<T>,
    store: &ParamStore<T>,
    state: &SessionState,
) -> Result<()> {
    opt.step = state.optimizer_step;
    for (name, &steps) in &state.moment_steps {
        let id = store
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state for unknown parameter `{name}`")))?;
        let first = ck
            .find(&format!("optim.m/{name}"))
            .ok_or_else(|| Error::Checkpoint(format!("missing optimizer moments for `{name}`")))?;
        if first.shape() != store.get(id).shape() {
            return Err(Error::Checkpoint(format!("optimizer moments for `{name}` have the wrong shape")));
        }
        let second = ck.find(&format!("optim.v/{name}")).map(|t| t.cast::<T>().into_data()).unwrap_or_default();
        opt.set_moments(
            id,
            Moments {
                first: first.cast::<T>().into_data(),
                second,
                steps,
            },
        );
    }
    Ok(())
}

/// Tokenized samples per modality (empty for held-out modalities).
#[derive(Clone, Debug)]
pub struct TokenCache<T> {
    pub seqs: Vec<Vec<TokenSequence<T>>>,
}

impl<T: Real> TokenCache<T> {
    /// Tokenizes every sample of every trained modality. Tabular
    /// modalities first get their field statistics fitted on the training
    /// split.
    pub fn build(bundle: &mut ModelBundle<T>, suite: &Suite) -> Result<Self> {
        let mut seqs = Vec::with_capacity(suite.datasets.len());
        for (m, ds) in suite.datasets.iter().enumerate() {
            if bundle.registry.modalities[m].unseen {
                seqs.push(Vec::new());
                continue;
            }
            if let TokenizerConfig::Table { .. } = ds.modality.tokenizer {
                let stats = fit_table_stats(ds, ds.indices(crate::data::Split::Train))?;
                let tok = bundle.tokenizer(m)?.clone();
                tok.set_table_stats(&mut bundle.store, &stats)?;
            }
            let toks = ds.samples.iter().map(|s| bundle.tokenize(m, s)).collect::<Result<Vec<_>>>()?;
            seqs.push(toks);
        }
        Ok(TokenCache { seqs })
    }
}

pub(crate) fn fit_table_stats(ds: &crate::data::SyntheticDataset, rows: impl Iterator<Item = usize>) -> Result<TableStats> {
    let numeric: Vec<&[f32]> = rows
        .filter_map(|i| match &ds.samples[i] {
            crate::tokenizers::Sample::Row { numeric, .. } => Some(numeric.as_slice()),
            _ => None,
        })
        .collect();
    TableStats::fit(numeric)
}
