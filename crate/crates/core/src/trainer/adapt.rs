use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::data::{stream_rng, Split, SyntheticDataset};
use crate::error::{Error, Result};
use crate::model::{Init, Label, Linear, ModelBundle, TaskKind, TaskSpec};
use crate::numeric::{Optimizer, ParamStore, Real, Tape, Tensor, Var};
use crate::session::fit_table_stats;
use crate::tokenizers::{tokenize_table, Sample, TokenizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    /// Share of the training split the adapter sees.
    pub fraction: f64,
    pub hidden: usize,
    pub steps: usize,
    pub lr: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig { fraction: 0.1, hidden: 32, steps: 300, lr: 1e-2 }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::config("adapt.fraction", format!("{} is outside (0, 1]", self.fraction)));
        }
        if self.hidden == 0 {
            return Err(Error::config("adapt.hidden", "must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("adapt.lr", "must be positive"));
        }
        Ok(())
    }
}

/// Two fully connected layers on frozen embeddings, in its own store.
pub struct Adapter {
    pub store: ParamStore<f64>,
    pub hidden: Linear,
    pub out: Linear,
}

impl Adapter {
    pub fn new(input: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let h = Linear::new(&mut store, &mut init, "adapter.hidden", input, hidden);
        let out = Linear::new(&mut store, &mut init, "adapter.out", hidden, classes);
        Adapter { store, hidden: h, out }
    }

    pub fn forward(&self, tape: &mut Tape<f64>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, &self.store, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, &self.store, h)
    }

    pub fn logits(&self, x: &Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub task: String,
    pub sampled: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub n_test: usize,
    pub final_loss: f64,
}

/// Mean-pooled `g(f(x))` rows for `indices`. Table rows are z-scored with
/// statistics fitted here on the training split, so the bundle is only
/// read.
pub fn frozen_embeddings<T: Real>(bundle: &ModelBundle<T>, ds: &SyntheticDataset, indices: &[usize]) -> Result<Tensor<f64>> {
    let m = bundle
        .registry
        .modality_index(&ds.modality.name)
        .ok_or_else(|| Error::Unregistered { what: "modality", name: ds.modality.name.clone() })?;
    let tok = bundle.tokenizer(m)?;
    if tok.config.family() != ds.modality.tokenizer.family() {
        return Err(Error::ModalityMismatch {
            expected: format!("{:?}", tok.config.family()),
            got: format!("{:?}", ds.modality.tokenizer.family()),
        });
    }
    let stats = match tok.config {
        TokenizerConfig::Table { .. } => Some(fit_table_stats(ds, ds.indices(Split::Train))?),
        _ => None,
    };
    let mut rows = Vec::with_capacity(indices.len());
    for &i in indices {
        let seq = match (&ds.samples[i], &stats) {
            (Sample::Row { numeric, categorical }, Some(stats)) => {
                let mut s = tokenize_table::<T>(numeric, categorical, &tok.config, stats, tok.d_tok)?;
                s.modality = m;
                s
            }
            (s, _) => bundle.tokenize(m, s)?,
        };
        let mut tape = Tape::new();
        let e = bundle.embedding(&mut tape, &seq)?;
        rows.push(tape.value(e).data().iter().map(|v| v.as_f64()).collect::<Vec<f64>>());
    }
    Tensor::from_rows(&rows)
}

fn class_labels(ds: &SyntheticDataset, task: &TaskSpec, indices: &[usize]) -> Result<Vec<usize>> {
    let labels = ds.labels(&task.name)?;
    indices
        .iter()
        .map(|&i| match labels[i] {
            Label::Class(c) if c < task.outputs => Ok(c),
            _ => Err(Error::Invalid(format!("task `{}` needs class labels below {}", task.key(), task.outputs))),
        })
        .collect()
}

fn hits(logits: &Tensor<f64>, labels: &[usize]) -> f64 {
    let n = labels.iter().enumerate().filter(|&(r, &y)| logits.gather_rows(&[r]).argmax() == y).count();
    n as f64 / labels.len().max(1) as f64
}

/// Trains a 2-layer adapter on frozen embeddings of a random `fraction` of
/// the training split and reports train and test accuracy.
pub fn adapt_unseen<T: Real>(
    bundle: &ModelBundle<T>,
    ds: &SyntheticDataset,
    task: &TaskSpec,
    cfg: &AdaptConfig,
    seed: u64,
) -> Result<(Adapter, AdaptReport)> {
    cfg.validate()?;
    if task.kind != TaskKind::Classification {
        return Err(Error::Invalid(format!("adaptation supports classification, `{}` is dense", task.key())));
    }
    let train = ds.indices(Split::Train);
    let n = ((cfg.fraction * train.len() as f64).round() as usize).clamp(1, train.len().max(1));
    if train.is_empty() {
        return Err(Error::Invalid(format!("dataset `{}` has no training samples", ds.modality.name)));
    }
    let mut rng = stream_rng(seed, &[0xada]);
    let mut picked: Vec<usize> = sample(&mut rng, train.len(), n).into_iter().map(|k| train.start + k).collect();
    picked.sort_unstable();
    let test: Vec<usize> = ds.indices(Split::Test).collect();

    let x_train = frozen_embeddings(bundle, ds, &picked)?;
    let y_train = class_labels(ds, task, &picked)?;
    let mut adapter = Adapter::new(x_train.cols(), cfg.hidden, task.outputs, seed ^ 0xada);
    let mut opt = Optimizer::adam(cfg.lr)?;
    let ids: Vec<_> = adapter.store.ids().collect();
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let x = tape.constant(x_train.clone());
        let logits = adapter.forward(&mut tape, x)?;
        let loss = tape.cross_entropy(logits, &y_train)?;
        final_loss = crate::pretrain::finite(tape.value(loss).item(), "adapter loss")?;
        tape.backward(loss, &mut adapter.store)?;
        opt.apply(&mut adapter.store, &ids)?;
    }

    let train_accuracy = hits(&adapter.logits(&x_train)?, &y_train);
    let test_accuracy = if test.is_empty() {
        f64::NAN
    } else {
        let x_test = frozen_embeddings(bundle, ds, &test)?;
        hits(&adapter.logits(&x_test)?, &class_labels(ds, task, &test)?)
    };
    let report = AdaptReport {
        task: task.key(),
        sampled: n,
        train_accuracy,
        test_accuracy,
        n_test: test.len(),
        final_loss,
    };
    Ok((adapter, report))
}
