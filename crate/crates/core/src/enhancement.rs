//! Coherence feature from local modality samples and the K-means cluster vote.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::detectors::{FeaturePoint, Standardizer};
use crate::error::{Result, UmidError};
use crate::linalg::sq_dist;
use crate::rng::{derive_seed, stream};

pub const DEFAULT_EXTRACTOR_DIM: usize = 32;
pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITERS: usize = 300;
/// Batches smaller than this get an unreliable-vote warning.
pub const MIN_RELIABLE_BATCH: usize = 10;

/// Feature map applied to raw modality vectors, independent of the target model.
pub trait ExternalExtractor: Send + Sync {
    fn input_dim(&self) -> usize;
    fn extract(&self, x: ArrayView1<f64>) -> Result<Vec<f64>>;
}

/// Fixed Gaussian projection followed by l2 normalization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomProjection {
    pub matrix: Array2<f64>,
}

impl RandomProjection {
    pub fn new(input_dim: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "enhancement/extractor", 0);
        let matrix = Array2::from_shape_simple_fn((output_dim, input_dim), || rng.sample(StandardNormal));
        Self { matrix }
    }
}

impl ExternalExtractor for RandomProjection {
    fn input_dim(&self) -> usize {
        self.matrix.ncols()
    }

    fn extract(&self, x: ArrayView1<f64>) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(UmidError::Shape {
                expected: self.input_dim(),
                actual: x.len(),
                context: "extractor input",
            });
        }
        Ok(crate::linalg::normalized(self.matrix.dot(&x).view()).to_vec())
    }
}

/// Mean distance between extracted local samples and extracted optimized inputs.
pub fn coherence<F: ExternalExtractor + ?Sized>(
    extractor: &F,
    local_samples: ArrayView2<f64>,
    optimized_inputs: ArrayView2<f64>,
) -> Result<f64> {
    if local_samples.nrows() == 0 || optimized_inputs.nrows() == 0 {
        return Err(UmidError::Argument(
            "coherence needs at least one local sample and one optimized input".into(),
        ));
    }
    let extract = |m: ArrayView2<f64>| -> Result<Vec<Vec<f64>>> { m.rows().into_iter().map(|r| extractor.extract(r)).collect() };
    let local = extract(local_samples)?;
    let optimized = extract(optimized_inputs)?;
    let mut total = 0.0;
    for a in &local {
        for b in &optimized {
            total += sq_dist(a, b).sqrt();
        }
    }
    Ok(total / (local.len() * optimized.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoherenceRecord {
    pub text: String,
    pub local_samples: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub coherence: f64,
}

#[derive(Serialize, Deserialize)]
struct LocalSampleLine {
    text: String,
    samples: Vec<Vec<f64>>,
}

/// Local samples keyed by query text, from JSONL `{text, samples}` lines.
pub fn read_local_samples(path: &Path) -> Result<BTreeMap<String, Array2<f64>>> {
    let lines: Vec<LocalSampleLine> = crate::io::read_jsonl(path)?;
    let mut out = BTreeMap::new();
    for line in lines {
        out.insert(line.text.clone(), rows_to_array(&line.samples, &line.text)?);
    }
    Ok(out)
}

pub fn write_local_samples(path: &Path, samples: &BTreeMap<String, Array2<f64>>) -> Result<()> {
    let lines: Vec<LocalSampleLine> = samples
        .iter()
        .map(|(text, m)| LocalSampleLine {
            text: text.clone(),
            samples: m.rows().into_iter().map(|r| r.to_vec()).collect(),
        })
        .collect();
    crate::io::write_jsonl(path, &lines)
}

pub(crate) fn rows_to_array(rows: &[Vec<f64>], what: &str) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(UmidError::Argument(format!("no local samples for {what:?}")));
    }
    if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
        return Err(UmidError::Shape {
            expected: cols,
            actual: bad.len(),
            context: "local sample",
        });
    }
    Ok(Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub inertia: f64,
}

fn nearest(centroids: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    centroids
        .iter()
        .enumerate()
        .map(|(j, c)| (j, sq_dist(c, x)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("k >= 1")
}

fn kmeans_once<R: Rng + ?Sized>(points: &[Vec<f64>], k: usize, rng: &mut R) -> KMeans {
    // k-means++ seeding
    let mut centroids = vec![points[rng.random_range(0..points.len())].clone()];
    while centroids.len() < k {
        let d2: Vec<f64> = points.iter().map(|p| nearest(&centroids, p).1).collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = points.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if u < *d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        } else {
            rng.random_range(0..points.len())
        };
        centroids.push(points[next].clone());
    }
    let dims = points[0].len();
    let mut labels = vec![usize::MAX; points.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (j, _) = nearest(&centroids, p);
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dims]; k];
        let mut counts = vec![0usize; k];
        for (p, &l) in points.iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // re-seed an empty cluster at the worst-fit point
                let far = points
                    .iter()
                    .enumerate()
                    .map(|(i, p)| (i, sq_dist(p, &centroids[labels[i]])))
                    .max_by(|a, b| a.1.total_cmp(&b.1))
                    .expect("non-empty")
                    .0;
                centroids[j] = points[far].clone();
                labels[far] = j;
            } else {
                centroids[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
    }
    let inertia = points.iter().zip(&labels).map(|(p, &l)| sq_dist(p, &centroids[l])).sum();
    KMeans {
        centroids,
        labels,
        inertia,
    }
}

/// Lloyd's algorithm with k-means++ seeding; best of `restarts` by inertia.
pub fn kmeans(points: &[Vec<f64>], k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || points.len() < k {
        return Err(UmidError::Argument(format!("k-means with k={k} needs at least {k} points, got {}", points.len())));
    }
    if points.iter().all(|p| p == &points[0]) {
        return Err(UmidError::Degenerate("all points identical; clusters are undefined".into()));
    }
    let mut best: Option<KMeans> = None;
    for r in 0..restarts.max(1) {
        let fit = kmeans_once(points, k, &mut stream(seed, "enhancement/kmeans", r as u64));
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterVotes {
    pub votes: Vec<bool>,
    pub member_cluster: usize,
    pub warnings: Vec<String>,
}

/// Cluster the standardized batch into two groups; the group with the
/// higher mean similarity is the member cluster.
pub fn kmeans_votes(batch: &[FeaturePoint], seed: u64) -> Result<ClusterVotes> {
    if batch.len() < 2 {
        return Err(UmidError::Argument("cluster vote needs at least 2 points".into()));
    }
    let mut warnings = Vec::new();
    if batch.len() < MIN_RELIABLE_BATCH {
        warnings.push(format!(
            "batch of {} points (< {MIN_RELIABLE_BATCH}); cluster vote is unreliable",
            batch.len()
        ));
        log::warn!("{}", warnings[0]);
    }
    let rows: Vec<Vec<f64>> = batch.iter().map(FeaturePoint::to_vec).collect();
    let z: Vec<Vec<f64>> = {
        let s = Standardizer::fit(&rows);
        rows.iter().map(|r| s.transform(r)).collect()
    };
    let fit = kmeans(&z, 2, KMEANS_RESTARTS, derive_seed(seed, "enhancement/kmeans", 0))?;
    let mean_s = |c: usize| {
        let members: Vec<f64> = batch
            .iter()
            .zip(&fit.labels)
            .filter(|(_, &l)| l == c)
            .map(|(p, _)| p.similarity)
            .collect();
        crate::linalg::mean(&members)
    };
    let member_cluster = if mean_s(1) > mean_s(0) { 1 } else { 0 };
    Ok(ClusterVotes {
        votes: fit.labels.iter().map(|&l| l == member_cluster).collect(),
        member_cluster,
        warnings,
    })
}

pub fn kmeans_vote(batch: &[FeaturePoint], query_index: usize, seed: u64) -> Result<bool> {
    if query_index >= batch.len() {
        return Err(UmidError::Argument(format!(
            "query index {query_index} outside batch of {}",
            batch.len()
        )));
    }
    Ok(kmeans_votes(batch, seed)?.votes[query_index])
}
