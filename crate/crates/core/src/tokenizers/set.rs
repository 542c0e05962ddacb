use crate::error::{Error, Result};
use crate::numeric::{Real, Tensor};

use super::{Positions, TokenInput, TokenSequence, TokenizerConfig};

fn dist2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Farthest-point sampling over the xyz part of `dim`-wide point rows.
/// Starts at point 0; ties go to the lowest index.
pub fn farthest_point_sampling(points: &[f32], dim: usize, count: usize) -> Vec<usize> {
    let n = points.len() / dim;
    let xyz = |i: usize| &points[i * dim..i * dim + 3];
    let mut chosen = Vec::with_capacity(count);
    if n == 0 || count == 0 {
        return chosen;
    }
    let mut nearest = vec![f64::INFINITY; n];
    let mut current = 0;
    for _ in 0..count {
        chosen.push(current);
        let c = xyz(current);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(xyz(i), c));
        }
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        current = best;
    }
    chosen
}

/// The `k` points nearest to `center` (by xyz), closest first, ties to the
/// lowest index. Includes the center itself.
pub fn k_nearest(points: &[f32], dim: usize, center: usize, k: usize) -> Vec<usize> {
    let n = points.len() / dim;
    let c = &points[center * dim..center * dim + 3];
    let mut order: Vec<(f64, usize)> = (0..n).map(|i| (dist2(&points[i * dim..i * dim + 3], c), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Groups a point cloud around farthest-point centroids. Each token is the
/// flattened group with coordinates recentered on its centroid; centroid
/// coordinates become the (learnably projected) position.
pub fn tokenize_set<T: Real>(points: &[f32], cfg: &TokenizerConfig) -> Result<TokenSequence<T>> {
    let TokenizerConfig::Set { features, groups, group_size, .. } = *cfg else {
        return Err(Error::Invalid("set tokenization needs a set config".into()));
    };
    let dim = 3 + features;
    if points.len() % dim != 0 {
        return Err(Error::Invalid(format!("point buffer of {} values is not a multiple of {dim}", points.len())));
    }
    let n = points.len() / dim;
    if n < groups * group_size {
        return Err(Error::Invalid(format!(
            "{n} points cannot fill {groups} groups of {group_size}"
        )));
    }
    let centers = farthest_point_sampling(points, dim, groups);
    let mut rows = Vec::with_capacity(groups * group_size * dim);
    let mut coords = Vec::with_capacity(groups * 3);
    for &c in &centers {
        let cxyz = &points[c * dim..c * dim + 3];
        coords.extend(cxyz.iter().map(|&v| T::lit(v as f64)));
        for j in k_nearest(points, dim, c, group_size) {
            let p = &points[j * dim..(j + 1) * dim];
            for a in 0..3 {
                rows.push(T::lit(p[a] as f64 - cxyz[a] as f64));
            }
            rows.extend(p[3..].iter().map(|&v| T::lit(v as f64)));
        }
    }
    Ok(TokenSequence {
        modality: 0,
        input: TokenInput::Dense(Tensor::matrix(groups, group_size * dim, rows)?),
        positions: Positions::Coordinates(Tensor::matrix(groups, 3, coords)?),
        mask: None,
        targets: None,
    })
}
