//! One-class detectors fit on semantic-null baseline features. Every
//! detector standardizes its input, reports a score where larger means
//! more anomalous, and votes by comparing against a threshold calibrated
//! on the baseline scores.

pub mod autoencoder;
pub mod iforest;
pub mod lof;
pub mod ocsvm;
mod standardize;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use autoencoder::{AeTraining, AutoEncoder};
pub use iforest::IsolationForest;
pub use lof::Lof;
pub use ocsvm::OneClassSvm;
pub use standardize::Standardizer;

use crate::error::{Result, UmidError};
use crate::inversion::Statistics;
use crate::linalg::quantile;
use crate::rng::derive_seed;

/// Baselines smaller than this still fit, with a recorded warning.
pub const MIN_RELIABLE_BASELINE: usize = 20;

/// Detector input: similarity, variability and, when local samples are
/// available, coherence.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePoint {
    #[serde(rename = "S_n")]
    pub similarity: f64,
    #[serde(rename = "D_n2")]
    pub variability: f64,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub coherence: Option<f64>,
}

impl FeaturePoint {
    pub fn new(similarity: f64, variability: f64) -> Self {
        Self {
            similarity,
            variability,
            coherence: None,
        }
    }

    pub fn with_coherence(self, r: f64) -> Self {
        Self {
            coherence: Some(r),
            ..self
        }
    }

    pub fn dims(&self) -> usize {
        2 + self.coherence.is_some() as usize
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![self.similarity, self.variability];
        v.extend(self.coherence);
        v
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

impl From<Statistics> for FeaturePoint {
    fn from(s: Statistics) -> Self {
        Self::new(s.similarity, s.variability)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DetectorKind {
    #[serde(rename = "lof")]
    LocalOutlierFactor,
    #[serde(rename = "iforest")]
    IsolationForest,
    #[serde(rename = "ocsvm")]
    OneClassSvm,
    #[serde(rename = "autoencoder")]
    AutoEncoder,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [
        DetectorKind::LocalOutlierFactor,
        DetectorKind::IsolationForest,
        DetectorKind::OneClassSvm,
        DetectorKind::AutoEncoder,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::LocalOutlierFactor => "lof",
            DetectorKind::IsolationForest => "iforest",
            DetectorKind::OneClassSvm => "ocsvm",
            DetectorKind::AutoEncoder => "autoencoder",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = UmidError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| UmidError::Argument(format!("unknown detector kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorParams {
    pub contamination: f64,
    pub lof_k: usize,
    pub forest_trees: usize,
    pub forest_subsample: usize,
    pub svm_nu: f64,
    pub autoencoder: AeTraining,
    pub seed: u64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            contamination: 0.1,
            lof_k: 20,
            forest_trees: 100,
            forest_subsample: 256,
            svm_nu: 0.1,
            autoencoder: AeTraining::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fitted {
    Lof(Lof),
    IsolationForest(IsolationForest),
    OneClassSvm(OneClassSvm),
    AutoEncoder(AutoEncoder),
}

impl Fitted {
    fn raw_score(&self, z: &[f64]) -> f64 {
        match self {
            Fitted::Lof(m) => m.score(z),
            Fitted::IsolationForest(m) => m.score(z),
            Fitted::OneClassSvm(m) => m.score(z),
            Fitted::AutoEncoder(m) => m.score(z),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub kind: DetectorKind,
    pub params: DetectorParams,
    pub standardizer: Option<Standardizer>,
    pub fitted: Option<Fitted>,
    pub threshold: f64,
    pub warnings: Vec<String>,
}

impl DetectorModel {
    pub fn new(kind: DetectorKind, params: DetectorParams) -> Self {
        Self {
            kind,
            params,
            standardizer: None,
            fitted: None,
            threshold: f64::NAN,
            warnings: Vec::new(),
        }
    }

    pub fn is_fitted(&self) -> bool {
        self.fitted.is_some() && self.standardizer.is_some()
    }

    pub fn fit(&mut self, baseline: &[FeaturePoint]) -> Result<()> {
        let points = validate_baseline(baseline)?;
        self.warnings.clear();
        if baseline.len() < MIN_RELIABLE_BASELINE {
            let msg = format!(
                "baseline has {} points (< {MIN_RELIABLE_BASELINE}); detector boundary is unreliable",
                baseline.len()
            );
            log::warn!("{}: {msg}", self.kind);
            self.warnings.push(msg);
        }
        let standardizer = Standardizer::fit(&points);
        let z: Vec<Vec<f64>> = points.iter().map(|p| standardizer.transform(p)).collect();
        let dims = z[0].len();
        let seed = derive_seed(self.params.seed, self.kind.name(), 0);
        let (fitted, train_scores) = match self.kind {
            DetectorKind::LocalOutlierFactor => {
                let m = Lof::fit(&z, self.params.lof_k);
                let s = m.training_scores();
                (Fitted::Lof(m), s)
            }
            DetectorKind::IsolationForest => {
                let m = IsolationForest::fit(&z, self.params.forest_trees, self.params.forest_subsample, seed);
                let s = z.iter().map(|p| m.score(p)).collect();
                (Fitted::IsolationForest(m), s)
            }
            DetectorKind::OneClassSvm => {
                // Standardized inputs have unit variance, so 1 / (dims * var) = 1 / dims.
                let var = z.iter().flatten().map(|v| v * v).sum::<f64>() / (z.len() * dims) as f64;
                let gamma = 1.0 / (dims as f64 * var.max(1e-12));
                let m = OneClassSvm::fit(&z, self.params.svm_nu, gamma);
                let s = z.iter().map(|p| m.score(p)).collect();
                (Fitted::OneClassSvm(m), s)
            }
            DetectorKind::AutoEncoder => {
                let m = AutoEncoder::fit(&z, self.params.autoencoder, seed);
                let s = z.iter().map(|p| m.score(p)).collect();
                (Fitted::AutoEncoder(m), s)
            }
        };
        self.threshold = quantile(&train_scores, 1.0 - self.params.contamination);
        self.standardizer = Some(standardizer);
        self.fitted = Some(fitted);
        Ok(())
    }

    pub fn score(&self, x: &FeaturePoint) -> Result<f64> {
        let (Some(std), Some(fitted)) = (&self.standardizer, &self.fitted) else {
            return Err(UmidError::State(format!("{} detector has not been fit", self.kind)));
        };
        if x.dims() != std.mean.len() {
            return Err(UmidError::Shape {
                expected: std.mean.len(),
                actual: x.dims(),
                context: "feature point",
            });
        }
        Ok(fitted.raw_score(&std.transform(&x.to_vec())))
    }

    /// Anomaly vote: strictly above the calibrated threshold.
    pub fn vote(&self, x: &FeaturePoint) -> Result<bool> {
        Ok(self.score(x)? > self.threshold)
    }
}

fn validate_baseline(baseline: &[FeaturePoint]) -> Result<Vec<Vec<f64>>> {
    if baseline.len() < 2 {
        return Err(UmidError::Fit(format!("baseline needs at least 2 points, got {}", baseline.len())));
    }
    let dims = baseline[0].dims();
    if baseline.iter().any(|p| p.dims() != dims) {
        return Err(UmidError::Fit("baseline points have mixed dimensionality".into()));
    }
    if baseline.iter().any(|p| !p.is_finite()) {
        return Err(UmidError::Fit("baseline contains non-finite features".into()));
    }
    let points: Vec<Vec<f64>> = baseline.iter().map(FeaturePoint::to_vec).collect();
    if points.iter().all(|p| p == &points[0]) {
        return Err(UmidError::Fit("degenerate baseline: all points identical".into()));
    }
    Ok(points)
}

/// Fit a single detector.
pub fn fit(kind: DetectorKind, baseline: &[FeaturePoint], params: &DetectorParams) -> Result<DetectorModel> {
    let mut m = DetectorModel::new(kind, params.clone());
    m.fit(baseline)?;
    Ok(m)
}

pub const ENSEMBLE_FORMAT: &str = "umid-ensemble";
pub const ENSEMBLE_VERSION: u32 = 1;

/// Fitted detectors plus the baseline they were calibrated on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    pub format: String,
    pub version: u32,
    pub detectors: Vec<DetectorModel>,
}

impl Ensemble {
    pub fn fit(kinds: &[DetectorKind], baseline: &[FeaturePoint], params: &DetectorParams) -> Result<Self> {
        let detectors = kinds.iter().map(|&k| fit(k, baseline, params)).collect::<Result<_>>()?;
        Ok(Self {
            format: ENSEMBLE_FORMAT.into(),
            version: ENSEMBLE_VERSION,
            detectors,
        })
    }

    pub fn len(&self) -> usize {
        self.detectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.detectors.is_empty()
    }

    pub fn feature_dims(&self) -> Option<usize> {
        self.detectors.first()?.standardizer.as_ref().map(|s| s.mean.len())
    }

    pub fn votes(&self, x: &FeaturePoint) -> Result<Vec<bool>> {
        self.detectors.iter().map(|d| d.vote(x)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let e: Ensemble = serde_json::from_slice(&std::fs::read(path)?)?;
        if e.format != ENSEMBLE_FORMAT || e.version != ENSEMBLE_VERSION {
            return Err(UmidError::Format(format!("unsupported ensemble file {} v{}", e.format, e.version)));
        }
        Ok(e)
    }
}
