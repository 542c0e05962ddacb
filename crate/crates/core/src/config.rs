//! Run configuration: every constant of a run in one TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{GenOptions, Suite};
use crate::error::{Error, Result};
use crate::model::{ModalitySpec, ModelDims, Registry, TaskKind, TaskSpec};
use crate::numeric::{OptimizerConfig, OptimizerKind};
use crate::pretrain::{MaskRatios, Stage1Config, Stage2Config};
use crate::tokenizers::TokenizerConfig;
use crate::trainer::{AdaptConfig, BalancerConfig, Stage3Config};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub metrics: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelDims,
    pub data: GenOptions,
    pub masking: MaskRatios,
    pub optimizer: OptimizerConfig,
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub stage3: Stage3Config,
    pub balancer: BalancerConfig,
    pub adapt: AdaptConfig,
    pub paths: Paths,
    pub modalities: Vec<ModalitySpec>,
    pub tasks: Vec<TaskSpec>,
    /// Tasks on held-out modalities, used only by adaptation.
    pub adapt_tasks: Vec<TaskSpec>,
}

fn modality(name: &str, unseen: bool, tokenizer: TokenizerConfig) -> ModalitySpec {
    ModalitySpec { name: name.into(), unseen, tokenizer }
}

impl Default for RunConfig {
    /// The synthetic suite: image grids, symbol sequences and point sets
    /// for training, tables held out for adaptation.
    fn default() -> Self {
        RunConfig {
            seed: 7,
            model: ModelDims::default(),
            data: GenOptions::default(),
            masking: MaskRatios::default(),
            optimizer: OptimizerConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            stage3: Stage3Config::default(),
            balancer: BalancerConfig::default(),
            adapt: AdaptConfig::default(),
            paths: Paths::default(),
            modalities: vec![
                modality("image", false, TokenizerConfig::Grid { height: 16, width: 16, channels: 2, patch: 4 }),
                modality("text", false, TokenizerConfig::Sequence { length: 16, vocab: Some(16), window: 1 }),
                modality("points", false, TokenizerConfig::Set { points: 64, features: 0, groups: 8, group_size: 8 }),
                modality("table", true, TokenizerConfig::Table { numeric: 3, categorical: vec![3, 4] }),
            ],
            tasks: vec![
                TaskSpec::new("quadrant", "image", TaskKind::Classification, 4),
                TaskSpec::new("occupancy", "image", TaskKind::Dense, 2),
                TaskSpec::new("motif", "text", TaskKind::Classification, 4),
                TaskSpec::new("half", "text", TaskKind::Classification, 2),
                TaskSpec::new("shape", "points", TaskKind::Classification, 3),
            ],
            adapt_tasks: vec![TaskSpec::new("rule", "table", TaskKind::Classification, 2)],
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let span = e.span().map(|s| format!(" at bytes {}..{}", s.start, s.end)).unwrap_or_default();
            Error::config("<config>", format!("{}{span}", e.message()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("<config>", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Registry of trained modalities and their tasks.
    pub fn registry(&self) -> Result<Registry> {
        let reg = Registry::new(self.modalities.clone(), self.tasks.clone())?;
        reg.validate(self.model.d_tok)?;
        Ok(reg)
    }

    /// Adaptation tasks with their modality resolved.
    pub fn adapt_registry(&self) -> Result<Vec<TaskSpec>> {
        let reg = Registry::new(self.modalities.clone(), self.adapt_tasks.clone())
            .map_err(|e| rename_path(e, "tasks", "adapt_tasks"))?;
        for (i, t) in reg.tasks.iter().enumerate() {
            if !self.modalities[t.modality_index].unseen {
                return Err(Error::config(format!("adapt_tasks[{i}].modality"), format!("`{}` is not held out", t.modality)));
            }
            if t.kind != TaskKind::Classification || t.outputs < 2 {
                return Err(Error::config(format!("adapt_tasks[{i}].kind"), "adaptation tasks are classification with at least 2 classes"));
            }
        }
        Ok(reg.tasks)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.registry()?;
        self.adapt_registry()?;
        self.data.validate()?;
        self.masking.validate()?;
        for (path, batch, lr) in [("stage1", self.stage1.batch, self.stage1.lr), ("stage2", self.stage2.batch, self.stage2.lr)] {
            if batch == 0 {
                return Err(Error::config(format!("{path}.batch"), "must be positive"));
            }
            if !(lr > 0.0) {
                return Err(Error::config(format!("{path}.lr"), "must be positive"));
            }
        }
        self.stage3.validate()?;
        self.balancer.validate()?;
        self.adapt.validate()?;
        let o = &self.optimizer;
        if o.kind == OptimizerKind::Adam && !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return Err(Error::config("optimizer.beta1", "betas must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Generates every dataset of the run, adaptation ones included.
    pub fn suite(&self) -> Result<Suite> {
        Suite::generate(&self.registry()?, &self.adapt_registry()?, &self.data, self.seed)
    }

    /// The miniature configuration used for gradient checks: same
    /// modalities and tasks, 16/8 widths, one layer everywhere.
    pub fn mini(&self) -> RunConfig {
        let mut c = self.clone();
        c.model = ModelDims {
            d_tok: 16,
            d_red: 8,
            heads: 2,
            f_layers: 1,
            g_layers: 1,
            head_layers: 1,
            decoder_layers: 1,
            ..self.model.clone()
        };
        c.data.samples = 8;
        c
    }
}

fn rename_path(e: Error, from: &str, to: &str) -> Error {
    match e {
        Error::Config { path, msg } => Error::Config { path: path.replacen(from, to, 1), msg },
        e => e,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml("seed = 3\n[stage3]\nsteps = 10\n").unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.stage3.steps, 10);
        assert_eq!(cfg.stage3.batch, 16);
        assert_eq!(cfg.tasks.len(), 5);
    }

    #[test]
    fn errors_name_the_field() {
        let path = |text: &str| match RunConfig::from_toml(text) {
            Err(Error::Config { path, .. }) => path,
            other => panic!("expected a config error, got {other:?}"),
        };
        assert_eq!(path("[stage3]\nbatch = 7\n"), "stage3.batch");
        assert_eq!(path("[masking]\ngrid = 1.0\n"), "masking.grid");
        assert_eq!(path("[masking]\nfraction = 0.0\n"), "masking.fraction");
        assert_eq!(path("[balancer]\nfloor = 0.0\n"), "balancer.floor");
        assert_eq!(path("[adapt]\nfraction = 1.5\n"), "adapt.fraction");
        assert_eq!(path("[model]\nheads = 3\n"), "model.heads");
        assert_eq!(path("[stage1]\nbogus = 1\n"), "<config>");
    }

    #[test]
    fn task_on_unknown_modality_is_rejected() {
        let mut cfg = RunConfig::default();
        cfg.tasks.push(TaskSpec::new("x", "audio", TaskKind::Classification, 2));
        assert!(matches!(cfg.validate(), Err(Error::Config { path, .. }) if path == "tasks[5].modality"));
    }

    #[test]
    fn adapt_task_must_be_held_out() {
        let mut cfg = RunConfig::default();
        cfg.adapt_tasks[0].modality = "image".into();
        assert!(matches!(cfg.validate(), Err(Error::Config { path, .. }) if path == "adapt_tasks[0].modality"));
    }
}
