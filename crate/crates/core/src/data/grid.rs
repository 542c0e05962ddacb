use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::model::{Label, ModalitySpec, TaskKind, TaskSpec};
use crate::tokenizers::TokenizerConfig;

use super::{assemble, check_tasks, GenOptions, SyntheticDataset};

/// Patch cells `(row, col)` of each class's blob. Up to four classes use the
/// quadrants of the patch grid; more classes use single patches in
/// row-major order.
pub fn blob_blocks(cfg: &TokenizerConfig, classes: usize) -> Result<Vec<Vec<(usize, usize)>>> {
    let TokenizerConfig::Grid { height, width, patch, .. } = *cfg else {
        return Err(Error::Invalid("blob layout needs a grid config".into()));
    };
    if classes < 2 {
        return Err(Error::config("tasks.outputs", "grid classification needs K >= 2"));
    }
    let (pr, pc) = (height / patch, width / patch);
    if classes <= 4 && pr >= 2 && pc >= 2 {
        let (bh, bw) = (pr / 2, pc / 2);
        let quads = [(0, 0), (0, bw), (bh, 0), (bh, bw)];
        return Ok(quads[..classes]
            .iter()
            .map(|&(r0, c0)| (r0..r0 + bh).flat_map(|r| (c0..c0 + bw).map(move |c| (r, c))).collect())
            .collect());
    }
    if classes > pr * pc {
        return Err(Error::config(
            "tasks.outputs",
            format!("{classes} classes exceed the {pr}x{pc} patch grid"),
        ));
    }
    Ok((0..classes).map(|k| vec![(k / pc, k % pc)]).collect())
}

/// Noise plus one bright patch-aligned blob per sample. Classification
/// label = blob id; dense label = per-patch occupancy.
pub fn gen_grid_dataset(
    modality: &ModalitySpec,
    tasks: &[TaskSpec],
    classes: usize,
    opts: &GenOptions,
    seed: u64,
) -> Result<SyntheticDataset> {
    let cfg = &modality.tokenizer;
    let TokenizerConfig::Grid { height, width, channels, patch } = *cfg else {
        return Err(Error::Invalid("grid generator needs a grid config".into()));
    };
    if height == 0 || width == 0 || channels == 0 || patch == 0 || height % patch != 0 || width % patch != 0 {
        return Err(Error::config(format!("modalities.{}", modality.name), "degenerate grid dimensions"));
    }
    check_tasks(modality, tasks, classes, true, false)?;
    let blocks = blob_blocks(cfg, classes)?;
    let pc = width / patch;
    let cells = (height / patch) * pc;
    let noise = Normal::new(0.0, opts.noise.max(1e-300)).expect("finite std");
    let sigma = opts.noise;
    assemble(modality, tasks, classes, opts, seed, |class, rng| {
        let amp: f32 = rng.random_range(0.8..1.2);
        let mut data: Vec<f32> = (0..height * width * channels)
            .map(|_| if sigma > 0.0 { noise.sample(rng) as f32 } else { 0.0 })
            .collect();
        let mut occupied = vec![0usize; cells];
        for &(r, c) in &blocks[class] {
            occupied[r * pc + c] = 1;
            for y in r * patch..(r + 1) * patch {
                for x in c * patch..(c + 1) * patch {
                    for ch in 0..channels {
                        data[(y * width + x) * channels + ch] += amp;
                    }
                }
            }
        }
        let labels = tasks
            .iter()
            .map(|t| match t.kind {
                TaskKind::Classification => Label::Class(class),
                TaskKind::Dense => Label::Dense(occupied.clone()),
            })
            .collect();
        Ok((crate::tokenizers::Sample::Grid(data), labels))
    })
}
