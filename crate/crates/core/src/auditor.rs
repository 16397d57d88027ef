//! Online membership decisions from ensemble votes, and audit metrics.

use std::path::Path;
use std::time::Instant;

use ndarray::ArrayView2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baseline::build_baseline_features;
use crate::detectors::{DetectorKind, DetectorParams, Ensemble, FeaturePoint};
use crate::enhancement::{coherence, kmeans_votes, ExternalExtractor};
use crate::error::{Result, UmidError};
use crate::inversion::{latent_inversion, InversionConfig, InversionStats};
use crate::linalg::{mean, std_dev};
use crate::rng::derive_seed;
use crate::testbed::DualEncoder;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    /// Votes needed for a member decision.
    pub threshold: usize,
    /// Votes needed once the cluster voter is added.
    pub enhanced_threshold: usize,
    pub detectors: Vec<DetectorKind>,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            threshold: 3,
            enhanced_threshold: 4,
            detectors: DetectorKind::ALL.to_vec(),
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        let voters = self.detectors.len();
        if voters == 0 {
            return Err(UmidError::Config("at least one detector must be enabled".into()));
        }
        if self.threshold == 0 || self.threshold > voters {
            return Err(UmidError::Config(format!(
                "threshold {} must be in 1..={voters} (number of detectors)",
                self.threshold
            )));
        }
        if self.enhanced_threshold == 0 || self.enhanced_threshold > voters + 1 {
            return Err(UmidError::Config(format!(
                "enhanced_threshold {} must be in 1..={}",
                self.enhanced_threshold,
                voters + 1
            )));
        }
        Ok(())
    }

    pub fn active_threshold(&self, enhanced: bool) -> usize {
        if enhanced {
            self.enhanced_threshold
        } else {
            self.threshold
        }
    }

    fn check_ensemble(&self, ens: &Ensemble) -> Result<()> {
        self.validate()?;
        if ens.len() != self.detectors.len() {
            return Err(UmidError::Config(format!(
                "ensemble has {} detectors, config enables {}",
                ens.len(),
                self.detectors.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Membership {
    Member,
    NonMember,
}

impl Membership {
    pub fn from_member(is_member: bool) -> Self {
        if is_member {
            Self::Member
        } else {
            Self::NonMember
        }
    }

    pub fn is_member(self) -> bool {
        self == Self::Member
    }
}

impl std::str::FromStr for Membership {
    type Err = UmidError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "member" | "m" | "true" | "1" => Ok(Self::Member),
            "non-member" | "nonmember" | "n" | "false" | "0" => Ok(Self::NonMember),
            other => Err(UmidError::Format(format!("unknown membership label {other:?}"))),
        }
    }
}

/// Decision for a vote vector.
pub fn decide(votes: &[bool], threshold: usize) -> Membership {
    Membership::from_member(votes.iter().filter(|&&v| v).count() >= threshold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditDecision {
    pub text: String,
    #[serde(flatten)]
    pub feature: FeaturePoint,
    pub votes: Vec<bool>,
    pub vote_count: usize,
    pub decision: Membership,
    pub latency_ms: f64,
}

impl AuditDecision {
    fn new(text: &str, feature: FeaturePoint, votes: Vec<bool>, threshold: usize, latency_ms: f64) -> Self {
        let vote_count = votes.iter().filter(|&&v| v).count();
        Self {
            text: text.to_string(),
            feature,
            decision: decide(&votes, threshold),
            votes,
            vote_count,
            latency_ms: latency_ms.max(f64::MIN_POSITIVE),
        }
    }
}

fn elapsed_ms(start: Instant) -> f64 {
    start.elapsed().as_secs_f64() * 1e3
}

/// Invert `text`, collect one vote per detector, threshold.
pub fn audit<E: DualEncoder + ?Sized>(
    enc: &E,
    ensemble: &Ensemble,
    text: &str,
    inv_cfg: &InversionConfig,
    ens_cfg: &EnsembleConfig,
) -> Result<AuditDecision> {
    ens_cfg.check_ensemble(ensemble)?;
    let start = Instant::now();
    let stats = latent_inversion(enc, text, inv_cfg)?;
    let feature = FeaturePoint::from(stats.statistics());
    let votes = ensemble.votes(&feature)?;
    Ok(AuditDecision::new(text, feature, votes, ens_cfg.threshold, elapsed_ms(start)))
}

/// Local evidence for the enhanced audit.
pub struct Enhancement<'a> {
    pub extractor: &'a dyn ExternalExtractor,
    /// One sample matrix per query, aligned with the query list.
    pub local_samples: Vec<ArrayView2<'a, f64>>,
    pub seed: u64,
}

/// Online-phase output for one query, before voting.
#[derive(Clone, Debug)]
pub struct InvertedQuery {
    pub stats: InversionStats,
    pub latency_ms: f64,
}

/// Invert every query (in parallel), timing each one.
pub fn invert_queries<E: DualEncoder + ?Sized>(
    enc: &E,
    queries: &[String],
    inv_cfg: &InversionConfig,
) -> Result<Vec<InvertedQuery>> {
    queries
        .par_iter()
        .map(|q| {
            let start = Instant::now();
            let stats = latent_inversion(enc, q, inv_cfg)?;
            Ok(InvertedQuery {
                stats,
                latency_ms: elapsed_ms(start),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchOutcome {
    pub decisions: Vec<AuditDecision>,
    pub metrics: Option<MetricsReport>,
    pub warnings: Vec<String>,
}

/// Votes and decisions for already inverted queries. With `enhancement`,
/// the coherence feature and the cluster vote are added and the enhanced
/// threshold applies; the inversions must then carry optimized inputs.
pub fn decide_batch(
    ensemble: &Ensemble,
    inverted: &[InvertedQuery],
    ens_cfg: &EnsembleConfig,
    enhancement: Option<&Enhancement<'_>>,
) -> Result<(Vec<AuditDecision>, Vec<String>)> {
    ens_cfg.check_ensemble(ensemble)?;
    let mut rows = Vec::with_capacity(inverted.len());
    for q in inverted {
        let start = Instant::now();
        let feature = FeaturePoint::from(q.stats.statistics());
        let votes = ensemble.votes(&feature)?;
        rows.push((feature, votes, q.latency_ms + elapsed_ms(start)));
    }
    let texts = inverted.iter().map(|q| q.stats.query_text.as_str());
    let Some(enh) = enhancement else {
        let decisions = texts
            .zip(rows)
            .map(|(t, (f, v, ms))| AuditDecision::new(t, f, v, ens_cfg.threshold, ms))
            .collect();
        return Ok((decisions, Vec::new()));
    };
    if enh.local_samples.len() != inverted.len() {
        return Err(UmidError::Argument(format!(
            "{} local sample sets for {} queries",
            enh.local_samples.len(),
            inverted.len()
        )));
    }
    for ((feature, _, ms), (q, local)) in rows.iter_mut().zip(inverted.iter().zip(&enh.local_samples)) {
        let start = Instant::now();
        let optimized = q.stats.optimized_inputs.as_ref().ok_or_else(|| {
            UmidError::Argument("enhanced audit needs inversions that record optimized inputs".into())
        })?;
        *feature = feature.with_coherence(coherence(enh.extractor, *local, optimized.view())?);
        *ms += elapsed_ms(start);
    }
    let start = Instant::now();
    let augmented: Vec<FeaturePoint> = rows.iter().map(|r| r.0).collect();
    let cluster = kmeans_votes(&augmented, enh.seed)?;
    let shared_ms = elapsed_ms(start) / inverted.len() as f64;
    let threshold = ens_cfg.active_threshold(true);
    let decisions = texts
        .zip(rows)
        .zip(&cluster.votes)
        .map(|((t, (f, mut v, ms)), &kv)| {
            v.push(kv);
            AuditDecision::new(t, f, v, threshold, ms + shared_ms)
        })
        .collect();
    Ok((decisions, cluster.warnings))
}

/// Audit every query; metrics when ground truth is supplied.
pub fn audit_batch<E: DualEncoder + ?Sized>(
    enc: &E,
    ensemble: &Ensemble,
    queries: &[String],
    truth: Option<&[bool]>,
    inv_cfg: &InversionConfig,
    ens_cfg: &EnsembleConfig,
    enhancement: Option<&Enhancement<'_>>,
) -> Result<BatchOutcome> {
    ens_cfg.check_ensemble(ensemble)?;
    if let Some(t) = truth {
        if t.len() != queries.len() {
            return Err(UmidError::Argument(format!(
                "{} truth labels for {} queries",
                t.len(),
                queries.len()
            )));
        }
    }
    let cfg = InversionConfig {
        record_embeddings: inv_cfg.record_embeddings || enhancement.is_some(),
        ..inv_cfg.clone()
    };
    let inverted = invert_queries(enc, queries, &cfg)?;
    let (decisions, warnings) = decide_batch(ensemble, &inverted, ens_cfg, enhancement)?;
    let metrics = truth.map(|t| MetricsReport::from_decisions(&decisions, t));
    Ok(BatchOutcome {
        decisions,
        metrics,
        warnings,
    })
}

/// Seeds and settings for one complete audit (baseline, ensemble, queries).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuditPlan {
    pub baseline_inversion: InversionConfig,
    pub query_inversion: InversionConfig,
    pub detectors: DetectorParams,
    pub ensemble: EnsembleConfig,
}

impl AuditPlan {
    /// Baseline, query and detector seeds drawn from disjoint namespaces of `root`.
    pub fn from_seed(root: u64, inversion: &InversionConfig) -> Self {
        Self {
            baseline_inversion: InversionConfig {
                seed: derive_seed(root, "audit/baseline", 0),
                ..inversion.clone()
            },
            query_inversion: InversionConfig {
                seed: derive_seed(root, "audit/query", 0),
                ..inversion.clone()
            },
            detectors: DetectorParams {
                seed: derive_seed(root, "audit/detectors", 0),
                ..DetectorParams::default()
            },
            ensemble: EnsembleConfig::default(),
        }
    }
}

/// Phase one: invert the baseline strings and fit the enabled detectors.
pub fn fit_baseline<E: DualEncoder + ?Sized>(
    enc: &E,
    baseline: &[String],
    plan: &AuditPlan,
) -> Result<(Vec<FeaturePoint>, Ensemble)> {
    plan.ensemble.validate()?;
    let features = build_baseline_features(enc, baseline, &plan.baseline_inversion)?;
    let ensemble = Ensemble::fit(&plan.ensemble.detectors, &features, &plan.detectors)?;
    Ok((features, ensemble))
}

/// Both phases end to end.
pub fn run_audit<E: DualEncoder + ?Sized>(
    enc: &E,
    baseline: &[String],
    queries: &[String],
    truth: Option<&[bool]>,
    plan: &AuditPlan,
) -> Result<BatchOutcome> {
    let (_, ensemble) = fit_baseline(enc, baseline, plan)?;
    audit_batch(enc, &ensemble, queries, truth, &plan.query_inversion, &plan.ensemble, None)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub mean_latency_ms: f64,
}

impl MetricsReport {
    /// Member is the positive class. Undefined precision or recall is 0.
    pub fn from_predictions(predicted: &[bool], truth: &[bool], latencies_ms: &[f64]) -> Self {
        let mut m = Self::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (p, t) {
                (true, true) => m.tp += 1,
                (true, false) => m.fp += 1,
                (false, false) => m.tn += 1,
                (false, true) => m.fn_ += 1,
            }
        }
        let ratio = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
        m.precision = ratio(m.tp, m.tp + m.fp);
        m.recall = ratio(m.tp, m.tp + m.fn_);
        m.accuracy = ratio(m.tp + m.tn, m.tp + m.fp + m.tn + m.fn_);
        m.mean_latency_ms = if latencies_ms.is_empty() { 0.0 } else { mean(latencies_ms) };
        m
    }

    pub fn from_decisions(decisions: &[AuditDecision], truth: &[bool]) -> Self {
        let predicted: Vec<bool> = decisions.iter().map(|d| d.decision.is_member()).collect();
        let latencies: Vec<f64> = decisions.iter().map(|d| d.latency_ms).collect();
        Self::from_predictions(&predicted, truth, &latencies)
    }

    /// Metrics after re-thresholding recorded vote vectors.
    pub fn rethreshold(decisions: &[AuditDecision], truth: &[bool], threshold: usize) -> Self {
        let predicted: Vec<bool> = decisions.iter().map(|d| decide(&d.votes, threshold).is_member()).collect();
        let latencies: Vec<f64> = decisions.iter().map(|d| d.latency_ms).collect();
        Self::from_predictions(&predicted, truth, &latencies)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        Self {
            mean: mean(values),
            std: if values.len() > 1 { std_dev(values) } else { 0.0 },
        }
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepeatedMetrics {
    pub runs: Vec<(u64, MetricsReport)>,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub accuracy: MeanStd,
    pub mean_latency_ms: MeanStd,
}

impl RepeatedMetrics {
    pub fn new(runs: Vec<(u64, MetricsReport)>) -> Self {
        let col = |f: fn(&MetricsReport) -> f64| MeanStd::of(&runs.iter().map(|(_, m)| f(m)).collect::<Vec<_>>());
        Self {
            precision: col(|m| m.precision),
            recall: col(|m| m.recall),
            accuracy: col(|m| m.accuracy),
            mean_latency_ms: col(|m| m.mean_latency_ms),
            runs,
        }
    }

    /// CSV with one row per run and a final mean±std row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("run_seed,precision,recall,accuracy,mean_latency_ms\n");
        for (seed, m) in &self.runs {
            out.push_str(&format!(
                "{seed},{:.6},{:.6},{:.6},{:.3}\n",
                m.precision, m.recall, m.accuracy, m.mean_latency_ms
            ));
        }
        out.push_str(&format!(
            "mean±std,{},{},{},{}\n",
            self.precision, self.recall, self.accuracy, self.mean_latency_ms
        ));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

pub fn write_decisions(path: &Path, decisions: &[AuditDecision]) -> Result<()> {
    crate::io::write_jsonl(path, decisions)
}

pub fn read_decisions(path: &Path) -> Result<Vec<AuditDecision>> {
    crate::io::read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn threshold_rule() {
        assert_eq!(decide(&[true; 4], 3), Membership::Member);
        assert_eq!(decide(&[true, true, false, false], 3), Membership::NonMember);
        assert_eq!(decide(&[true, true, true, false], 3), Membership::Member);
    }

    #[test]
    fn config_validation() {
        assert!(EnsembleConfig::default().validate().is_ok());
        let bad = EnsembleConfig {
            threshold: 5,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(UmidError::Config(_))));
        let zero = EnsembleConfig {
            threshold: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
        let enh = EnsembleConfig {
            enhanced_threshold: 6,
            ..Default::default()
        };
        assert!(enh.validate().is_err());
    }

    #[test]
    fn metrics_hand_confusion() {
        let all = MetricsReport::from_predictions(&[true; 4], &[true; 4], &[]);
        assert_eq!((all.precision, all.recall, all.accuracy), (1.0, 1.0, 1.0));
        let m = MetricsReport::from_predictions(&[true, false, true, false], &[true, true, false, false], &[1.0, 3.0]);
        assert_eq!((m.precision, m.recall, m.accuracy), (0.5, 0.5, 0.5));
        assert_eq!((m.tp, m.fp, m.tn, m.fn_), (1, 1, 1, 1));
        assert_eq!(m.mean_latency_ms, 2.0);
    }

    #[test]
    fn membership_labels_roundtrip() {
        for m in [Membership::Member, Membership::NonMember] {
            let s = serde_json::to_string(&m).unwrap();
            assert_eq!(serde_json::from_str::<Membership>(&s).unwrap(), m);
            assert_eq!(s.trim_matches('"').parse::<Membership>().unwrap(), m);
        }
    }

    #[test]
    fn repeated_csv_has_summary_row() {
        let m = MetricsReport::from_predictions(&[true, false], &[true, false], &[1.0]);
        let runs = (0..5).map(|s| (s, m)).collect();
        let csv = RepeatedMetrics::new(runs).to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert!(lines[6].starts_with("mean±std,1.0000±0.0000"));
    }

    fn fake(votes: Vec<bool>) -> AuditDecision {
        AuditDecision::new("q", FeaturePoint::new(0.0, 0.0), votes, 3, 1.0)
    }

    proptest! {
        #[test]
        fn adding_a_vote_never_demotes(votes in prop::collection::vec(any::<bool>(), 4), n in 1usize..=4) {
            let before = decide(&votes, n);
            for i in 0..votes.len() {
                let mut more = votes.clone();
                more[i] = true;
                if before == Membership::Member {
                    prop_assert_eq!(decide(&more, n), Membership::Member);
                }
            }
        }

        #[test]
        fn raising_threshold_lowers_recall(
            rows in prop::collection::vec((prop::collection::vec(any::<bool>(), 4), any::<bool>()), 1..40),
        ) {
            let decisions: Vec<AuditDecision> = rows.iter().map(|(v, _)| fake(v.clone())).collect();
            let truth: Vec<bool> = rows.iter().map(|(_, t)| *t).collect();
            for n in 1..4 {
                let lo = MetricsReport::rethreshold(&decisions, &truth, n);
                let hi = MetricsReport::rethreshold(&decisions, &truth, n + 1);
                prop_assert!(hi.recall <= lo.recall + 1e-12);
                prop_assert!(hi.tp + hi.fp <= lo.tp + lo.fp);
            }
        }
    }
}
