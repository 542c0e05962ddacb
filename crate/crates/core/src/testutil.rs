//! Small fixtures shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{Label, ModalitySpec, ModelBundle, ModelDims, Registry, TaskKind, TaskSpec};
use crate::numeric::Real;
use crate::tokenizers::{Sample, TokenSequence, TokenizerConfig};

pub fn mini_dims() -> ModelDims {
    ModelDims {
        d_tok: 8,
        d_red: 4,
        heads: 2,
        f_layers: 1,
        g_layers: 1,
        head_layers: 1,
        decoder_layers: 1,
        mlp_ratio: 2,
        ln_eps: 1e-5,
    }
}

pub fn modality(name: &str, tokenizer: TokenizerConfig) -> ModalitySpec {
    ModalitySpec { name: name.into(), unseen: false, tokenizer }
}

/// img (grid, 4 tokens), txt (symbols, 6 tokens), pts (set, 2 tokens), and a
/// held-out tab (table).
pub fn mini_registry() -> Registry {
    let mut tab = modality("tab", TokenizerConfig::Table { numeric: 2, categorical: vec![3] });
    tab.unseen = true;
    Registry::new(
        vec![
            modality("img", TokenizerConfig::Grid { height: 8, width: 8, channels: 1, patch: 4 }),
            modality("txt", TokenizerConfig::Sequence { length: 6, vocab: Some(5), window: 1 }),
            modality("pts", TokenizerConfig::Set { points: 16, features: 0, groups: 2, group_size: 4 }),
            tab,
        ],
        vec![
            TaskSpec::new("cls", "img", TaskKind::Classification, 3),
            TaskSpec::new("seg", "img", TaskKind::Dense, 2),
            TaskSpec::new("cls", "txt", TaskKind::Classification, 2),
            TaskSpec::new("cls", "pts", TaskKind::Classification, 3),
        ],
    )
    .unwrap()
}

pub fn mini_bundle<T: Real>(seed: u64) -> ModelBundle<T> {
    ModelBundle::new(mini_dims(), mini_registry(), seed).unwrap()
}

pub fn random_sample(cfg: &TokenizerConfig, rng: &mut ChaCha8Rng) -> Sample {
    match cfg {
        TokenizerConfig::Grid { height, width, channels, .. } => {
            Sample::Grid((0..height * width * channels).map(|_| rng.random_range(-1.0..1.0)).collect())
        }
        TokenizerConfig::Sequence { length, vocab: Some(v), .. } => {
            Sample::Symbols((0..*length).map(|_| rng.random_range(0..*v)).collect())
        }
        TokenizerConfig::Sequence { length, .. } => Sample::Series((0..*length).map(|_| rng.random_range(-1.0..1.0)).collect()),
        TokenizerConfig::Set { points, features, .. } => {
            Sample::Points((0..points * (3 + features)).map(|_| rng.random_range(-1.0..1.0)).collect())
        }
        TokenizerConfig::Table { numeric, categorical } => Sample::Row {
            numeric: (0..*numeric).map(|_| rng.random_range(-1.0..1.0)).collect(),
            categorical: categorical.iter().map(|&c| rng.random_range(0..c)).collect(),
        },
    }
}

pub fn random_tokens<T: Real>(bundle: &ModelBundle<T>, m: usize, seed: u64) -> TokenSequence<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = random_sample(&bundle.registry.modalities[m].tokenizer, &mut rng);
    bundle.tokenize(m, &s).unwrap()
}

pub fn random_label(spec: &TaskSpec, tokens: usize, rng: &mut ChaCha8Rng) -> Label {
    match spec.kind {
        TaskKind::Classification => Label::Class(rng.random_range(0..spec.outputs)),
        TaskKind::Dense => Label::Dense((0..tokens).map(|_| rng.random_range(0..spec.outputs)).collect()),
    }
}
