//! Synthetic, learnable datasets for each structural family, deterministic
//! splits, and seeded sampling.
//!
//! Every label is a closed-form function of its sample:
//!
//! | family   | task kind      | rule                                          |
//! |----------|----------------|-----------------------------------------------|
//! | grid     | classification | which patch block carries the bright blob     |
//! | grid     | dense          | per-patch blob occupancy (2 labels)           |
//! | symbols  | classification | which reserved symbol `0..K` is planted       |
//! | symbols  | `half`         | whether the planted symbol sits in the first or second half |
//! | series   | classification | frequency index of the dominant sinusoid      |
//! | set      | classification | sphere / cube / plane surface                 |
//! | table    | classification | sign of a fixed linear score                  |

mod dump;
mod grid;
mod sequence;
mod set;
mod table;

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Label, ModalitySpec, Registry, TaskKind, TaskSpec};
use crate::tokenizers::{Sample, TokenizerConfig};

pub use dump::{load_dataset, save_dataset};
pub use grid::{blob_blocks, gen_grid_dataset};
pub use sequence::{gen_sequence_dataset, gen_series_dataset};
pub use set::{gen_set_dataset, SHAPES};
pub use table::{gen_table_dataset, table_score};

/// Independent RNG stream for `(seed, parts...)`.
pub fn stream_rng(seed: u64, parts: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed ^ 0x6f6d_6e69_7765_6176);
    for &p in parts {
        h = splitmix(h ^ p);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator settings shared by all families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenOptions {
    pub samples: usize,
    pub train_fraction: f64,
    /// Additive noise (grid, series) or jitter (set) standard deviation.
    pub noise: f64,
    /// Random rotations of point clouds.
    pub rotate: bool,
}

impl Default for GenOptions {
    fn default() -> Self {
        GenOptions {
            samples: 512,
            train_fraction: 0.75,
            noise: 0.3,
            rotate: true,
        }
    }
}

impl GenOptions {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::config("data.samples", "need at least 2 samples"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::config("data.train_fraction", "must lie in (0, 1)"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::config("data.noise", "must be a finite non-negative number"));
        }
        Ok(())
    }

    fn split_at(&self) -> usize {
        ((self.samples as f64 * self.train_fraction).round() as usize).clamp(1, self.samples - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskLabels {
    pub spec: TaskSpec,
    pub labels: Vec<Label>,
}

/// Samples of one modality with labels for each of its tasks. Samples
/// `0..split` form the training split, the rest the test split.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub modality: ModalitySpec,
    pub samples: Vec<Sample>,
    pub tasks: Vec<TaskLabels>,
    pub seed: u64,
    pub split: usize,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn indices(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.split,
            Split::Test => self.split..self.samples.len(),
        }
    }

    pub fn task(&self, name: &str) -> Option<&TaskLabels> {
        self.tasks.iter().find(|t| t.spec.name == name)
    }

    pub fn labels(&self, name: &str) -> Result<&[Label]> {
        self.task(name).map(|t| t.labels.as_slice()).ok_or_else(|| Error::Unregistered {
            what: "task",
            name: format!("{}/{name}", self.modality.name),
        })
    }
}

/// Generates the dataset for one modality and the tasks registered on it.
pub fn generate(modality: &ModalitySpec, tasks: &[TaskSpec], opts: &GenOptions, seed: u64) -> Result<SyntheticDataset> {
    opts.validate()?;
    let path = format!("modalities.{}", modality.name);
    let classes = |fallback: usize| {
        tasks
            .iter()
            .find(|t| t.kind == TaskKind::Classification && t.name != "half")
            .map_or(fallback, |t| t.outputs)
    };
    let ds = match &modality.tokenizer {
        TokenizerConfig::Grid { .. } => gen_grid_dataset(modality, tasks, classes(4), opts, seed)?,
        TokenizerConfig::Sequence { vocab: Some(_), .. } => gen_sequence_dataset(modality, tasks, classes(4), opts, seed)?,
        TokenizerConfig::Sequence { .. } => gen_series_dataset(modality, tasks, classes(4), opts, seed)?,
        TokenizerConfig::Set { .. } => gen_set_dataset(modality, tasks, classes(SHAPES), opts, seed)?,
        TokenizerConfig::Table { .. } => gen_table_dataset(modality, tasks, opts, seed)?,
    };
    for t in tasks {
        if ds.task(&t.name).is_none() {
            return Err(Error::config(format!("{path}.tasks"), format!("no label rule for task `{}`", t.key())));
        }
    }
    Ok(ds)
}

/// Checks that every classification task on a modality shares `classes`.
fn check_tasks(modality: &ModalitySpec, tasks: &[TaskSpec], classes: usize, allow_dense: bool, allow_half: bool) -> Result<()> {
    for t in tasks {
        let path = format!("tasks.{}", t.key());
        match t.kind {
            TaskKind::Dense if !allow_dense => {
                return Err(Error::config(path, format!("{:?} data has no dense labels", modality.tokenizer.family())))
            }
            TaskKind::Dense if t.outputs != 2 => return Err(Error::config(path, "occupancy maps have 2 labels")),
            TaskKind::Classification if allow_half && t.name == "half" => {
                if t.outputs != 2 {
                    return Err(Error::config(path, "`half` has 2 classes"));
                }
            }
            TaskKind::Classification if t.outputs != classes => {
                return Err(Error::config(path, format!("expected {classes} classes")));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Assigns generated samples to a dataset: labels are drawn uniformly, then
/// `make(label, rng)` builds each sample and its per-task labels.
fn assemble(
    modality: &ModalitySpec,
    tasks: &[TaskSpec],
    classes: usize,
    opts: &GenOptions,
    seed: u64,
    mut make: impl FnMut(usize, &mut ChaCha8Rng) -> Result<(Sample, Vec<Label>)>,
) -> Result<SyntheticDataset> {
    use rand::Rng;
    let mut rng = stream_rng(seed, &[fnv(&modality.name)]);
    let mut samples = Vec::with_capacity(opts.samples);
    let mut labels: Vec<Vec<Label>> = vec![Vec::with_capacity(opts.samples); tasks.len()];
    for _ in 0..opts.samples {
        let class = rng.random_range(0..classes);
        let (s, ls) = make(class, &mut rng)?;
        samples.push(s);
        for (col, l) in labels.iter_mut().zip(ls) {
            col.push(l);
        }
    }
    Ok(SyntheticDataset {
        modality: modality.clone(),
        samples,
        tasks: tasks
            .iter()
            .cloned()
            .zip(labels)
            .map(|(spec, labels)| TaskLabels { spec, labels })
            .collect(),
        seed,
        split: opts.split_at(),
    })
}

fn fnv(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// One dataset per registry modality, in registry order.
#[derive(Clone, Debug)]
pub struct Suite {
    pub registry: Registry,
    pub datasets: Vec<SyntheticDataset>,
}

impl Suite {
    /// Generates data for every modality; held-out modalities get labels
    /// for `extra` tasks (adaptation targets).
    pub fn generate(registry: &Registry, extra: &[TaskSpec], opts: &GenOptions, seed: u64) -> Result<Self> {
        let datasets = registry
            .modalities
            .iter()
            .enumerate()
            .map(|(m, spec)| {
                let mut tasks: Vec<TaskSpec> = registry.tasks_of(m).into_iter().map(|t| registry.tasks[t].clone()).collect();
                tasks.extend(extra.iter().filter(|t| t.modality == spec.name).cloned());
                generate(spec, &tasks, opts, seed)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Suite { registry: registry.clone(), datasets })
    }

    pub fn dataset(&self, m: usize) -> &SyntheticDataset {
        &self.datasets[m]
    }

    /// Labels of registered task `t` (registry index).
    pub fn labels(&self, t: usize) -> Result<&[Label]> {
        let spec = &self.registry.tasks[t];
        self.datasets[spec.modality_index].labels(&spec.name)
    }
}

/// Without-replacement draws over a split, reshuffled each epoch with a
/// permutation seeded by `(seed, stream, epoch)`. The position is all the
/// state; the permutation is recomputed on demand.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cursor {
    pub seed: u64,
    pub stream: u64,
    pub start: usize,
    pub len: usize,
    pub epoch: u64,
    pub pos: usize,
    #[serde(skip)]
    perm: Vec<usize>,
}

impl Cursor {
    pub fn new(seed: u64, stream: u64, range: Range<usize>) -> Result<Self> {
        if range.is_empty() {
            return Err(Error::Invalid("cursor over an empty split".into()));
        }
        Ok(Cursor {
            seed,
            stream,
            start: range.start,
            len: range.len(),
            epoch: 0,
            pos: 0,
            perm: Vec::new(),
        })
    }

    pub fn permutation(seed: u64, stream: u64, epoch: u64, start: usize, len: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (start..start + len).collect();
        p.shuffle(&mut stream_rng(seed, &[stream, epoch]));
        p
    }

    pub fn next_index(&mut self) -> usize {
        if self.pos == self.len {
            self.epoch += 1;
            self.pos = 0;
            self.perm.clear();
        }
        if self.perm.is_empty() {
            self.perm = Self::permutation(self.seed, self.stream, self.epoch, self.start, self.len);
        }
        let i = self.perm[self.pos];
        self.pos += 1;
        i
    }

    pub fn take(&mut self, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.next_index()).collect()
    }
}

/// Endless epoch-shuffled batches over a split. Each epoch visits every
/// sample once; the final batch of an epoch may be short.
pub struct Batches {
    seed: u64,
    stream: u64,
    range: Range<usize>,
    batch: usize,
    epoch: u64,
    perm: Vec<usize>,
    pos: usize,
}

impl Batches {
    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for Batches {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.pos >= self.perm.len() {
            if !self.perm.is_empty() {
                self.epoch += 1;
            }
            self.perm = Cursor::permutation(self.seed, self.stream, self.epoch, self.range.start, self.range.len());
            self.pos = 0;
        }
        let end = (self.pos + self.batch).min(self.perm.len());
        let b = self.perm[self.pos..end].to_vec();
        self.pos = end;
        Some(b)
    }
}

pub fn iterate(dataset: &SyntheticDataset, split: Split, batch: usize, seed: u64) -> Result<Batches> {
    let range = dataset.indices(split);
    if batch == 0 || batch > range.len() {
        return Err(Error::config("batch", format!("batch {batch} does not fit a split of {}", range.len())));
    }
    Ok(Batches {
        seed,
        stream: fnv(&dataset.modality.name) ^ (split as u64),
        range,
        batch,
        epoch: 0,
        perm: Vec::new(),
        pos: 0,
    })
}
