use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizers::TokenizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub d_tok: usize,
    /// Width after the FC reduction of `f`; also the width of `g` and heads.
    pub d_red: usize,
    pub heads: usize,
    pub f_layers: usize,
    pub g_layers: usize,
    pub head_layers: usize,
    pub decoder_layers: usize,
    pub mlp_ratio: usize,
    pub ln_eps: f64,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            d_tok: 32,
            d_red: 16,
            heads: 2,
            f_layers: 1,
            g_layers: 1,
            head_layers: 2,
            decoder_layers: 2,
            mlp_ratio: 2,
            ln_eps: 1e-5,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d_tok == 0 || self.d_red == 0 {
            return Err(Error::config("model.d_tok", "widths must be positive"));
        }
        if self.heads == 0 || self.d_tok % self.heads != 0 {
            return Err(Error::config("model.heads", format!("{} heads do not divide d_tok {}", self.heads, self.d_tok)));
        }
        if self.d_red % self.heads != 0 {
            return Err(Error::config("model.heads", format!("{} heads do not divide d_red {}", self.heads, self.d_red)));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("model.ln_eps", "must be positive"));
        }
        Ok(())
    }
}

/// A registered modality: name, tokenizer family settings, and whether it
/// is held out from all training stages (used only for adaptation).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    #[serde(default)]
    pub unseen: bool,
    #[serde(flatten)]
    pub tokenizer: TokenizerConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classification,
    /// Per-token label maps (segmentation analogue).
    Dense,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub modality: String,
    pub kind: TaskKind,
    /// Class count, or the per-token label count of a dense task.
    pub outputs: usize,
    #[serde(skip)]
    pub modality_index: usize,
}

impl TaskSpec {
    pub fn new(name: &str, modality: &str, kind: TaskKind, outputs: usize) -> Self {
        TaskSpec {
            name: name.into(),
            modality: modality.into(),
            kind,
            outputs,
            modality_index: 0,
        }
    }

    pub fn loss(&self) -> LossKind {
        match self.kind {
            TaskKind::Classification => LossKind::CrossEntropy,
            TaskKind::Dense => LossKind::L2,
        }
    }

    /// `modality/name`.
    pub fn key(&self) -> String {
        format!("{}/{}", self.modality, self.name)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Dense(Vec<usize>),
}

/// The modalities and tasks a model is built for.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Registry {
    pub modalities: Vec<ModalitySpec>,
    pub tasks: Vec<TaskSpec>,
}

impl Registry {
    /// Builds a registry, resolving each task's modality by name.
    pub fn new(modalities: Vec<ModalitySpec>, mut tasks: Vec<TaskSpec>) -> Result<Self> {
        for (i, t) in tasks.iter_mut().enumerate() {
            t.modality_index = modalities.iter().position(|m| m.name == t.modality).ok_or_else(|| {
                Error::config(format!("tasks[{i}].modality"), format!("unknown modality `{}`", t.modality))
            })?;
        }
        Ok(Registry { modalities, tasks })
    }

    pub fn validate(&self, d_tok: usize) -> Result<()> {
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return Err(Error::config(format!("modalities[{i}].name"), format!("duplicate `{}`", m.name)));
            }
            m.tokenizer.validate(&format!("modalities[{i}]"), d_tok)?;
        }
        for (i, t) in self.tasks.iter().enumerate() {
            let path = format!("tasks[{i}]");
            let m = self
                .modalities
                .get(t.modality_index)
                .filter(|m| m.name == t.modality)
                .ok_or_else(|| Error::config(format!("{path}.modality"), format!("unknown modality `{}`", t.modality)))?;
            if m.unseen {
                return Err(Error::config(format!("{path}.modality"), format!("`{}` is held out from training", m.name)));
            }
            let min = if t.kind == TaskKind::Classification { 2 } else { 1 };
            if t.outputs < min {
                return Err(Error::config(format!("{path}.outputs"), format!("need at least {min}")));
            }
            if self.tasks[..i].iter().any(|o| o.name == t.name && o.modality == t.modality) {
                return Err(Error::config(format!("{path}.name"), format!("duplicate task `{}`", t.key())));
            }
        }
        Ok(())
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m.name == name)
    }

    pub fn task_index(&self, modality: &str, name: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t.modality == modality && t.name == name)
    }

    pub fn tasks_of(&self, m: usize) -> Vec<usize> {
        (0..self.tasks.len()).filter(|&t| self.tasks[t].modality_index == m).collect()
    }

    /// Modalities that take part in masked pretraining: not held out and
    /// with a reconstruction target (every family but tables).
    pub fn pretrain_modalities(&self) -> Vec<usize> {
        (0..self.modalities.len())
            .filter(|&m| {
                let spec = &self.modalities[m];
                !spec.unseen && spec.tokenizer.family() != crate::tokenizers::Family::Table
            })
            .collect()
    }

    /// Modalities that take part in supervised training: not held out and
    /// with at least one registered task.
    pub fn trained_modalities(&self) -> Vec<usize> {
        (0..self.modalities.len())
            .filter(|&m| !self.modalities[m].unseen && !self.tasks_of(m).is_empty())
            .collect()
    }
}
