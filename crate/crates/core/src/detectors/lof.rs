//! Local Outlier Factor in novelty mode: neighborhoods are always taken
//! from the fitted reference set.

use serde::{Deserialize, Serialize};

use crate::linalg::sq_dist;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lof {
    pub k: usize,
    pub points: Vec<Vec<f64>>,
    /// Distance from each reference point to its k-th neighbor.
    pub k_distance: Vec<f64>,
    /// Local reachability density of each reference point.
    pub lrd: Vec<f64>,
}

/// Indices and distances of the `k` nearest reference points to `x`,
/// skipping index `skip`.
fn neighbors(points: &[Vec<f64>], x: &[f64], k: usize, skip: Option<usize>) -> Vec<(usize, f64)> {
    let mut d: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(i, p)| (i, sq_dist(p, x).sqrt()))
        .collect();
    d.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    d.truncate(k);
    d
}

fn lrd_from(nbrs: &[(usize, f64)], k_distance: &[f64]) -> f64 {
    let mean_reach = nbrs.iter().map(|&(j, d)| d.max(k_distance[j])).sum::<f64>() / nbrs.len() as f64;
    // Duplicate points give zero reachability; cap the density.
    1.0 / mean_reach.max(1e-10)
}

impl Lof {
    pub fn fit(points: &[Vec<f64>], k: usize) -> Self {
        let k = k.clamp(1, points.len().saturating_sub(1).max(1));
        let nbrs: Vec<Vec<(usize, f64)>> = (0..points.len())
            .map(|i| neighbors(points, &points[i], k, Some(i)))
            .collect();
        let k_distance: Vec<f64> = nbrs.iter().map(|n| n.last().map_or(0.0, |x| x.1)).collect();
        let lrd = nbrs.iter().map(|n| lrd_from(n, &k_distance)).collect();
        Self {
            k,
            points: points.to_vec(),
            k_distance,
            lrd,
        }
    }

    fn factor(&self, x: &[f64], skip: Option<usize>) -> f64 {
        let nbrs = neighbors(&self.points, x, self.k, skip);
        let own = lrd_from(&nbrs, &self.k_distance);
        nbrs.iter().map(|&(j, _)| self.lrd[j]).sum::<f64>() / (nbrs.len() as f64 * own)
    }

    /// LOF of a new point; about 1 inside the reference cloud. A point equal
    /// to a reference point is scored with that point left out, as in
    /// [`Lof::training_scores`].
    pub fn score(&self, x: &[f64]) -> f64 {
        let own = self.points.iter().position(|p| sq_dist(p, x) == 0.0);
        self.factor(x, own)
    }

    /// LOF of each reference point with itself excluded.
    pub fn training_scores(&self) -> Vec<f64> {
        (0..self.points.len()).map(|i| self.factor(&self.points[i], Some(i))).collect()
    }
}
