//! Latent inversion: `n` independent fixed-step gradient-ascent runs that
//! push a random modality input toward a text embedding, summarized by the
//! similarity and variability statistics of the optimized embeddings.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UmidError};
use crate::linalg::gaussian_vec;
use crate::rng::{derive_seed, fnv1a, stream};
use crate::testbed::{DualEncoder, Embedding};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub runs: usize,
    pub iters: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub record_embeddings: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            runs: 100,
            iters: 1000,
            learning_rate: 3e-2,
            seed: 0,
            record_embeddings: false,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.iters == 0 {
            return Err(UmidError::Config("runs and iters must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(UmidError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Similarity `S_n` and variability `D_n^2` of a set of optimized embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Statistics {
    pub similarity: f64,
    pub variability: f64,
}

/// `S_n = v_t . mean(v_i)` with the raw (unnormalized) mean, and
/// `D_n^2 = mean ||v_i - mean||^2`.
pub fn compute_stats(v_t: ArrayView1<f64>, embeddings: ArrayView2<f64>) -> Result<Statistics> {
    let n = embeddings.nrows();
    if n == 0 {
        return Err(UmidError::Argument("compute_stats needs at least one embedding".into()));
    }
    if embeddings.ncols() != v_t.len() {
        return Err(UmidError::Shape {
            expected: v_t.len(),
            actual: embeddings.ncols(),
            context: "embedding dimension",
        });
    }
    let mean = embeddings.mean_axis(Axis(0)).expect("non-empty");
    let similarity = v_t.dot(&mean);
    let variability = embeddings
        .rows()
        .into_iter()
        .map(|r| r.iter().zip(mean.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    Ok(Statistics { similarity, variability })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InversionStats {
    pub query_text: String,
    pub similarity: f64,
    pub variability: f64,
    pub mean_embedding: Embedding,
    /// Cosine of each run's starting point with the text embedding.
    pub initial_cosines: Vec<f64>,
    /// Cosine of each run's optimized embedding with the text embedding.
    pub final_cosines: Vec<f64>,
    /// Optimized embeddings `v^(i)`, kept when `record_embeddings` is set.
    pub embeddings: Option<Array2<f64>>,
    /// Optimized inputs `x_m`, kept when `record_embeddings` is set.
    pub optimized_inputs: Option<Array2<f64>>,
    /// Runs that needed the halved-step retry.
    pub retried_runs: Vec<usize>,
}

impl InversionStats {
    pub fn statistics(&self) -> Statistics {
        Statistics {
            similarity: self.similarity,
            variability: self.variability,
        }
    }
}

/// Starting point of run `run`: standard Gaussian keyed by `(seed, run)`.
pub fn initial_point(seed: u64, run: usize, dim: usize) -> Vec<f64> {
    gaussian_vec(&mut stream(seed, "inversion/run", run as u64), dim)
}

/// Plain fixed-step ascent `x <- x + lr * grad` on all rows at once. Returns
/// the indices of rows that became non-finite; those rows are zeroed.
fn ascend<E: DualEncoder + ?Sized>(
    enc: &E,
    xs: &mut Array2<f64>,
    v_t: ArrayView1<f64>,
    iters: usize,
    lr: f64,
) -> Result<Vec<usize>> {
    let mut dead = vec![false; xs.nrows()];
    for _ in 0..iters {
        let (_, grad) = enc.grad_cosine(xs.view(), v_t)?;
        xs.scaled_add(lr, &grad);
        for (i, mut row) in xs.rows_mut().into_iter().enumerate() {
            if !dead[i] && !row.iter().all(|v| v.is_finite()) {
                dead[i] = true;
                row.fill(0.0);
            }
        }
    }
    Ok(dead.iter().enumerate().filter(|(_, d)| **d).map(|(i, _)| i).collect())
}

/// Run the `n` randomized inversions for `text` and summarize them.
pub fn latent_inversion<E: DualEncoder + ?Sized>(enc: &E, text: &str, cfg: &InversionConfig) -> Result<InversionStats> {
    cfg.validate()?;
    let view = enc.query_view(derive_seed(cfg.seed, "inversion/query", fnv1a(text.as_bytes())));
    let enc: &dyn DualEncoder = match &view {
        Some(v) => v.as_ref(),
        None => &enc,
    };
    let v_t = enc.embed_text(text)?;
    let p = enc.input_dim();
    let mut xs = Array2::zeros((cfg.runs, p));
    for (i, mut row) in xs.rows_mut().into_iter().enumerate() {
        row.assign(&Array1::from(initial_point(cfg.seed, i, p)));
    }
    let initial_cosines = enc.embed_modality(xs.view())?.dot(&v_t).to_vec();
    let x0 = xs.clone();

    let failed = ascend(enc, &mut xs, v_t.view(), cfg.iters, cfg.learning_rate)?;
    for &run in &failed {
        let mut single = x0.slice(ndarray::s![run..run + 1, ..]).to_owned();
        let again = ascend(enc, &mut single, v_t.view(), cfg.iters, cfg.learning_rate / 2.0)?;
        if !again.is_empty() {
            return Err(UmidError::Inversion {
                text: text.to_string(),
                run,
                reason: "non-finite value during ascent, also with halved step".into(),
            });
        }
        xs.row_mut(run).assign(&single.row(0));
    }

    let embeddings = enc.embed_modality(xs.view())?;
    let stats = compute_stats(v_t.view(), embeddings.view())?;
    let final_cosines = embeddings.dot(&v_t).to_vec();
    let mean_embedding = embeddings.mean_axis(Axis(0)).expect("runs >= 1");
    let (embeddings, optimized_inputs) = if cfg.record_embeddings {
        (Some(embeddings), Some(xs))
    } else {
        (None, None)
    };
    Ok(InversionStats {
        query_text: text.to_string(),
        similarity: stats.similarity,
        variability: stats.variability,
        mean_embedding,
        initial_cosines,
        final_cosines,
        embeddings,
        optimized_inputs,
        retried_runs: failed,
    })
}

/// Invert many texts in parallel; output order follows `texts`.
pub fn invert_all<E: DualEncoder + ?Sized>(
    enc: &E,
    texts: &[String],
    cfg: &InversionConfig,
) -> Result<Vec<InversionStats>> {
    texts.par_iter().map(|t| latent_inversion(enc, t, cfg)).collect()
}

/// JSONL feature record for one inverted query.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub text: String,
    #[serde(rename = "S_n")]
    pub similarity: f64,
    #[serde(rename = "D_n2")]
    pub variability: f64,
    pub n: usize,
    pub m: usize,
    pub eta: f64,
    pub seed: u64,
}

impl FeatureRecord {
    pub fn new(stats: &InversionStats, cfg: &InversionConfig) -> Self {
        Self {
            text: stats.query_text.clone(),
            similarity: stats.similarity,
            variability: stats.variability,
            n: cfg.runs,
            m: cfg.iters,
            eta: cfg.learning_rate,
            seed: cfg.seed,
        }
    }
}
