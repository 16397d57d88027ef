//! Gaussian output noise and an input plausibility filter, plus the
//! harness comparing audit accuracy with and without them.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::auditor::{run_audit, AuditPlan, BatchOutcome, MetricsReport};
use crate::baseline::builtin_lexicon;
use crate::error::{Result, UmidError};
use crate::linalg::random_unit;
use crate::rng::{derive_seed, fnv1a, stream, StreamRng};
use crate::testbed::{DualEncoder, Embedding, HeadFn};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    pub epsilon: f64,
    pub delta: f64,
    /// l2 sensitivity of a unit embedding; 2 is the sphere's diameter.
    pub sensitivity: f64,
    /// Use this noise scale directly instead of the (epsilon, delta) formula.
    pub sigma_override: Option<f64>,
    pub seed: u64,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            delta: 1e-5,
            sensitivity: 2.0,
            sigma_override: None,
            seed: 0,
        }
    }
}

/// Gaussian-mechanism noise scale `sensitivity * sqrt(2 ln(1.25 / delta)) / epsilon`.
pub fn sigma_for(epsilon: f64, delta: f64, sensitivity: f64) -> f64 {
    sensitivity * (2.0 * (1.25 / delta).ln()).sqrt() / epsilon
}

impl DpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || self.epsilon.is_nan() {
            return Err(UmidError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(UmidError::Config(format!("delta must be in (0, 1), got {}", self.delta)));
        }
        if !(self.sensitivity > 0.0 && self.sensitivity.is_finite()) {
            return Err(UmidError::Config(format!("sensitivity must be positive, got {}", self.sensitivity)));
        }
        if let Some(s) = self.sigma_override {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(UmidError::Config(format!("sigma must be non-negative, got {s}")));
            }
        }
        Ok(())
    }

    pub fn sigma(&self) -> f64 {
        self.sigma_override
            .unwrap_or_else(|| sigma_for(self.epsilon, self.delta, self.sensitivity))
    }
}

fn add_noise(rng: &mut StreamRng, m: &mut Array2<f64>, sigma: f64) -> Array1<f64> {
    if sigma > 0.0 {
        m.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
    }
    let norms = m.map_axis(ndarray::Axis(1), |r| r.dot(&r).sqrt());
    for (mut row, &n) in m.rows_mut().into_iter().zip(norms.iter()) {
        if n > 0.0 {
            row /= n;
        }
    }
    norms
}

/// Adds fresh `N(0, sigma^2 I)` noise to every returned embedding and
/// renormalizes. Gradients are taken through the noisy forward pass.
pub struct DpEncoder<E> {
    inner: E,
    sigma: f64,
    seed: u64,
    /// Calls made outside a query view each draw a fresh stream.
    calls: AtomicU64,
}

pub fn dp_wrap<E: DualEncoder>(inner: E, cfg: &DpConfig) -> Result<DpEncoder<E>> {
    cfg.validate()?;
    Ok(DpEncoder {
        inner,
        sigma: cfg.sigma(),
        seed: cfg.seed,
        calls: AtomicU64::new(0),
    })
}

impl<E: DualEncoder> DpEncoder<E> {
    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn inner(&self) -> &E {
        &self.inner
    }

    fn with_rng<T>(&self, f: impl FnOnce(&mut StreamRng) -> T) -> T {
        let call = self.calls.fetch_add(1, Ordering::Relaxed);
        f(&mut stream(self.seed, "defense/dp", call))
    }
}

struct DpView<'a, E> {
    inner: &'a E,
    sigma: f64,
    rng: Mutex<StreamRng>,
}

fn noisy_embed(rng: &mut StreamRng, mut m: Array2<f64>, sigma: f64) -> Array2<f64> {
    add_noise(rng, &mut m, sigma);
    m
}

fn noisy_grad<E: DualEncoder + ?Sized>(
    inner: &E,
    xs: ArrayView2<f64>,
    v_t: ArrayView1<f64>,
    sigma: f64,
    rng: &mut StreamRng,
) -> Result<(Array1<f64>, Array2<f64>)> {
    if v_t.len() != inner.embed_dim() {
        return Err(UmidError::Shape {
            expected: inner.embed_dim(),
            actual: v_t.len(),
            context: "text embedding",
        });
    }
    let mut head = |unit: ArrayView2<f64>| -> Result<(Array1<f64>, Array2<f64>)> {
        let mut noisy = unit.to_owned();
        let norms = add_noise(rng, &mut noisy, sigma);
        let cos = noisy.dot(&v_t);
        // d/du of (u + noise)/|u + noise| . v
        let mut up = noisy;
        for ((mut row, &c), &n) in up.rows_mut().into_iter().zip(cos.iter()).zip(norms.iter()) {
            row.zip_mut_with(&v_t, |u, &v| *u = (v - c * *u) / n);
        }
        Ok((cos, up))
    };
    inner.grad_through(xs, &mut head)
}

fn noisy_text<E: DualEncoder + ?Sized>(inner: &E, text: &str, sigma: f64, rng: &mut StreamRng) -> Result<Embedding> {
    let v = inner.embed_text(text)?;
    let mut m = v.insert_axis(ndarray::Axis(0));
    add_noise(rng, &mut m, sigma);
    Ok(m.row(0).to_owned())
}

impl<E: DualEncoder> DualEncoder for DpEncoder<E> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }
    fn embed_text(&self, text: &str) -> Result<Embedding> {
        self.with_rng(|rng| noisy_text(&self.inner, text, self.sigma, rng))
    }
    fn embed_modality(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let clean = self.inner.embed_modality(xs)?;
        Ok(self.with_rng(|rng| noisy_embed(rng, clean, self.sigma)))
    }
    fn grad_cosine(&self, xs: ArrayView2<f64>, v_t: ArrayView1<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.with_rng(|rng| noisy_grad(&self.inner, xs, v_t, self.sigma, rng))
    }
    fn query_view(&self, stream_id: u64) -> Option<Box<dyn DualEncoder + '_>> {
        Some(Box::new(DpView {
            inner: &self.inner,
            sigma: self.sigma,
            rng: Mutex::new(stream(self.seed, "defense/dp-query", stream_id)),
        }))
    }
}

impl<E: DualEncoder> DualEncoder for DpView<'_, E> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }
    fn embed_text(&self, text: &str) -> Result<Embedding> {
        noisy_text(self.inner, text, self.sigma, &mut self.rng.lock().expect("noise stream poisoned"))
    }
    fn embed_modality(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        let clean = self.inner.embed_modality(xs)?;
        Ok(noisy_embed(&mut self.rng.lock().expect("noise stream poisoned"), clean, self.sigma))
    }
    fn grad_cosine(&self, xs: ArrayView2<f64>, v_t: ArrayView1<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        noisy_grad(self.inner, xs, v_t, self.sigma, &mut self.rng.lock().expect("noise stream poisoned"))
    }
}

const BOUNDARY: usize = 26;
const OTHER: usize = 27;
const SYMBOLS: usize = 28;
/// Additive smoothing for unseen bigrams.
const SMOOTHING: f64 = 0.1;
/// Minimum share of ASCII letters among non-space characters.
pub const MIN_LETTER_FRACTION: f64 = 0.8;
/// Share of lexicon names the calibrated threshold lets through.
pub const CALIBRATION_PASS_RATE: f64 = 0.95;

fn symbol(c: char) -> usize {
    match c {
        'a'..='z' => c as usize - 'a' as usize,
        _ => OTHER,
    }
}

/// Letter-bigram log-likelihood model over words padded with boundaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BigramModel {
    /// `log_prob[a * SYMBOLS + b]` is `ln P(b | a)`.
    pub log_prob: Vec<f64>,
}

fn symbols_of(text: &str) -> Vec<usize> {
    let lower = text.to_lowercase();
    let mut out = vec![BOUNDARY];
    for word in lower.split_whitespace() {
        if out.len() > 1 {
            out.push(BOUNDARY);
        }
        out.extend(word.chars().map(symbol));
    }
    out.push(BOUNDARY);
    out
}

impl BigramModel {
    pub fn fit<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts = vec![0.0; SYMBOLS * SYMBOLS];
        for w in words {
            for pair in symbols_of(w).windows(2) {
                counts[pair[0] * SYMBOLS + pair[1]] += 1.0;
            }
        }
        let mut log_prob = vec![0.0; SYMBOLS * SYMBOLS];
        for a in 0..SYMBOLS {
            let row = &counts[a * SYMBOLS..(a + 1) * SYMBOLS];
            let total: f64 = row.iter().sum::<f64>() + SMOOTHING * SYMBOLS as f64;
            for b in 0..SYMBOLS {
                log_prob[a * SYMBOLS + b] = ((row[b] + SMOOTHING) / total).ln();
            }
        }
        Self { log_prob }
    }

    /// Mean log-probability per bigram; `-inf` for empty text.
    pub fn score(&self, text: &str) -> f64 {
        let syms = symbols_of(text);
        if syms.len() <= 2 {
            return f64::NEG_INFINITY;
        }
        let total: f64 = syms.windows(2).map(|p| self.log_prob[p[0] * SYMBOLS + p[1]]).sum();
        total / (syms.len() - 1) as f64
    }
}

pub fn letter_fraction(text: &str) -> f64 {
    let chars: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
    if chars.is_empty() {
        return 0.0;
    }
    chars.iter().filter(|c| c.is_ascii_alphabetic()).count() as f64 / chars.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterVerdict {
    Pass,
    Flagged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub threshold: f64,
    pub model: BigramModel,
}

impl FilterConfig {
    /// Fit on `lexicon` and set the threshold so at least 95% of it passes.
    pub fn calibrate<'a>(lexicon: impl IntoIterator<Item = &'a str> + Clone) -> Result<Self> {
        let model = BigramModel::fit(lexicon.clone());
        let mut scores: Vec<f64> = lexicon.into_iter().map(|w| model.score(w)).collect();
        if scores.is_empty() {
            return Err(UmidError::Config("filter lexicon is empty".into()));
        }
        scores.sort_by(f64::total_cmp);
        let k = ((1.0 - CALIBRATION_PASS_RATE) * scores.len() as f64).floor() as usize;
        Ok(Self {
            threshold: scores[k.min(scores.len() - 1)],
            model,
        })
    }

    /// Calibrated on the built-in first-name lexicon.
    pub fn default_filter() -> Self {
        Self::calibrate(builtin_lexicon().iter().map(String::as_str)).expect("lexicon is non-empty")
    }
}

pub fn filter_query(cfg: &FilterConfig, text: &str) -> FilterVerdict {
    if text.trim().is_empty() || letter_fraction(text) < MIN_LETTER_FRACTION || cfg.model.score(text) < cfg.threshold {
        FilterVerdict::Flagged
    } else {
        FilterVerdict::Pass
    }
}

/// Answers flagged text queries with a random unit embedding keyed by the text.
pub struct FilteredEncoder<E> {
    pub inner: E,
    pub filter: FilterConfig,
    pub seed: u64,
}

impl<E: DualEncoder> DualEncoder for FilteredEncoder<E> {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }
    fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }
    fn embed_text(&self, text: &str) -> Result<Embedding> {
        match filter_query(&self.filter, text) {
            FilterVerdict::Pass => self.inner.embed_text(text),
            FilterVerdict::Flagged => {
                let mut rng = stream(derive_seed(self.seed, "defense/filter", 0), "defense/decoy", fnv1a(text.as_bytes()));
                Ok(Array1::from(random_unit(&mut rng, self.embed_dim())))
            }
        }
    }
    fn embed_modality(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.inner.embed_modality(xs)
    }
    fn grad_cosine(&self, xs: ArrayView2<f64>, v_t: ArrayView1<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.inner.grad_cosine(xs, v_t)
    }
    fn grad_through(&self, xs: ArrayView2<f64>, head: &mut HeadFn<'_>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.inner.grad_through(xs, head)
    }
    fn query_view(&self, stream_id: u64) -> Option<Box<dyn DualEncoder + '_>> {
        let view = self.inner.query_view(stream_id)?;
        Some(Box::new(FilteredEncoder {
            inner: view,
            filter: self.filter.clone(),
            seed: self.seed,
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "defense", rename_all = "lowercase")]
pub enum DefenseScenario {
    Dp(DpConfig),
    Filter {
        /// Build the defended baseline from covert rather than plain gibberish.
        covert: bool,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseReport {
    pub scenario: DefenseScenario,
    pub sigma: Option<f64>,
    pub clean: MetricsReport,
    pub defended: MetricsReport,
    pub accuracy_drop: f64,
    pub latency_ratio: f64,
    /// Share of defended-baseline strings the filter flagged.
    pub flagged_baseline_fraction: Option<f64>,
}

impl DefenseReport {
    fn new(scenario: DefenseScenario, clean: MetricsReport, defended: MetricsReport) -> Self {
        let sigma = match &scenario {
            DefenseScenario::Dp(cfg) => Some(cfg.sigma()),
            DefenseScenario::Filter { .. } => None,
        };
        Self {
            scenario,
            sigma,
            accuracy_drop: clean.accuracy - defended.accuracy,
            latency_ratio: defended.mean_latency_ms / clean.mean_latency_ms,
            clean,
            defended,
            flagged_baseline_fraction: None,
        }
    }

    pub fn defended_label(&self) -> &'static str {
        match self.scenario {
            DefenseScenario::Dp(_) => "dp",
            DefenseScenario::Filter { covert: true, .. } => "cg",
            DefenseScenario::Filter { covert: false, .. } => "filter",
        }
    }

    /// Two rows: no defense, then defended.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("condition,accuracy,precision,recall,mean_latency_ms\n");
        for (label, m) in [("without", &self.clean), (self.defended_label(), &self.defended)] {
            out.push_str(&format!(
                "{label},{:.6},{:.6},{:.6},{:.3}\n",
                m.accuracy, m.precision, m.recall, m.mean_latency_ms
            ));
        }
        out
    }
}

/// Audit inputs shared by the clean and defended runs.
pub struct DefenseInputs<'a> {
    pub queries: &'a [String],
    pub truth: &'a [bool],
    pub plain_baseline: &'a [String],
    pub covert_baseline: &'a [String],
    pub plan: &'a AuditPlan,
}

fn metrics_of(outcome: BatchOutcome) -> MetricsReport {
    outcome.metrics.expect("truth supplied")
}

/// Audit with and without the defense. `clean` reuses an earlier
/// undefended result (plain baseline, same plan) when given.
pub fn eval_defense<E: DualEncoder>(
    enc: &E,
    scenario: &DefenseScenario,
    inputs: &DefenseInputs<'_>,
    clean: Option<MetricsReport>,
) -> Result<DefenseReport> {
    let clean = match clean {
        Some(m) => m,
        None => metrics_of(run_audit(enc, inputs.plain_baseline, inputs.queries, Some(inputs.truth), inputs.plan)?),
    };
    match scenario {
        DefenseScenario::Dp(cfg) => {
            let noisy = dp_wrap(enc, cfg)?;
            let defended = run_audit(&noisy, inputs.plain_baseline, inputs.queries, Some(inputs.truth), inputs.plan)?;
            Ok(DefenseReport::new(scenario.clone(), clean, metrics_of(defended)))
        }
        DefenseScenario::Filter { covert, seed } => {
            let filtered = FilteredEncoder {
                inner: enc,
                filter: FilterConfig::default_filter(),
                seed: *seed,
            };
            let baseline = if *covert { inputs.covert_baseline } else { inputs.plain_baseline };
            let flagged = baseline
                .iter()
                .filter(|s| filter_query(&filtered.filter, s) == FilterVerdict::Flagged)
                .count();
            let defended = run_audit(&filtered, baseline, inputs.queries, Some(inputs.truth), inputs.plan)?;
            let mut report = DefenseReport::new(scenario.clone(), clean, metrics_of(defended));
            report.flagged_baseline_fraction = Some(flagged as f64 / baseline.len() as f64);
            Ok(report)
        }
    }
}
