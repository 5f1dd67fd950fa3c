//! Lloyd's k-means for building vector-quantization dictionaries.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct KMeansParams {
    pub k: usize,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 16,
            iterations: 25,
            seed: 0,
        }
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Clusters `points` (row-major, `dim` columns) and returns `k` centers.
///
/// Centers start at `k` distinct randomly chosen points. A center that loses
/// all its points keeps its previous position.
pub fn lloyd(points: &[f64], dim: usize, params: KMeansParams) -> Result<Vec<Vec<f64>>> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::InvalidInput("point buffer not a multiple of dim".into()));
    }
    let n = points.len() / dim;
    if params.k == 0 {
        return Err(Error::InvalidInput("k must be positive".into()));
    }
    if n < params.k {
        return Err(Error::InvalidInput(format!(
            "{n} points cannot seed {} centers",
            params.k
        )));
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centers: Vec<Vec<f64>> = sample(&mut rng, n, params.k)
        .into_iter()
        .map(|i| row(i).to_vec())
        .collect();

    let mut assign = vec![usize::MAX; n];
    for _ in 0..params.iterations {
        let mut changed = false;
        for (i, a) in assign.iter_mut().enumerate() {
            let p = row(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let d = sq_dist(p, center);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if *a != best {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; params.k];
        let mut counts = vec![0usize; params.k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for ((center, sum), &count) in centers.iter_mut().zip(sums).zip(&counts) {
            if count > 0 {
                for (c, s) in center.iter_mut().zip(sum) {
                    *c = s / count as f64;
                }
            }
        }
    }
    Ok(centers)
}
