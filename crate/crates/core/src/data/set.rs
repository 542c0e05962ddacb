use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{Label, ModalitySpec, TaskSpec};
use crate::tokenizers::{Sample, TokenizerConfig};

use super::{assemble, check_tasks, GenOptions, SyntheticDataset};

/// Shape templates: 0 = unit sphere, 1 = surface of the cube `[-1, 1]^3`,
/// 2 = the square `[-1, 1]^2` in the plane `z = 0`.
pub const SHAPES: usize = 3;

fn surface_point(shape: usize, rng: &mut impl Rng) -> [f64; 3] {
    match shape {
        0 => {
            let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
            let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
            [v[0] / n, v[1] / n, v[2] / n]
        }
        1 => {
            let face = rng.random_range(0..6);
            let mut p = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            p[face % 3] = if face < 3 { 1.0 } else { -1.0 };
            p
        }
        _ => [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0],
    }
}

/// Uniform random rotation from a normalized Gaussian quaternion.
pub(crate) fn random_rotation(rng: &mut impl Rng) -> [[f64; 3]; 3] {
    let mut q: [f64; 4] = [0.0; 4];
    for v in &mut q {
        *v = rng.sample(StandardNormal);
    }
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Point clouds sampled from a shape surface, rotated, then jittered;
/// label = shape id. Extra feature columns are zero.
pub fn gen_set_dataset(
    modality: &ModalitySpec,
    tasks: &[TaskSpec],
    classes: usize,
    opts: &GenOptions,
    seed: u64,
) -> Result<SyntheticDataset> {
    let TokenizerConfig::Set { points, features, .. } = modality.tokenizer else {
        return Err(Error::Invalid("set generator needs a set config".into()));
    };
    if !(2..=SHAPES).contains(&classes) {
        return Err(Error::config("tasks.outputs", format!("set data has 2..={SHAPES} shape classes")));
    }
    check_tasks(modality, tasks, classes, false, false)?;
    let jitter = Normal::new(0.0, opts.noise.max(1e-300)).expect("finite std");
    let (sigma, rotate) = (opts.noise, opts.rotate);
    let dim = 3 + features;
    assemble(modality, tasks, classes, opts, seed, |class, rng| {
        let rot = if rotate {
            random_rotation(rng)
        } else {
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        };
        let mut data = vec![0.0f32; points * dim];
        for i in 0..points {
            let p = surface_point(class, rng);
            for a in 0..3 {
                let mut v = rot[a][0] * p[0] + rot[a][1] * p[1] + rot[a][2] * p[2];
                if sigma > 0.0 {
                    v += jitter.sample(rng);
                }
                data[i * dim + a] = v as f32;
            }
        }
        Ok((Sample::Points(data), vec![Label::Class(class); tasks.len()]))
    })
}
