//! Semantic-null reference strings: plain character gibberish and covert,
//! name-like syllable compositions that stay out of a real-name lexicon.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detectors::FeaturePoint;
use crate::error::{Result, UmidError};
use crate::inversion::{invert_all, InversionConfig};
use crate::rng::stream;
use crate::testbed::DualEncoder;

static FIRST_NAMES: &str = include_str!("../data/first_names.txt");

/// The embedded lexicon of common first names, lowercased.
pub fn builtin_lexicon() -> &'static BTreeSet<String> {
    static LEX: OnceLock<BTreeSet<String>> = OnceLock::new();
    LEX.get_or_init(|| {
        FIRST_NAMES
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_lowercase)
            .collect()
    })
}

pub const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";
pub const DIGITS: &str = "0123456789";
pub const PUNCTUATION: &str = "!#$%&*+-=?@_~";

pub const ONSETS: &[&str] = &[
    "Ka", "Ma", "Da", "Ja", "La", "Ra", "Sa", "Ta", "Ca", "Be", "De", "Le", "Me", "Re", "Ke", "Jo", "Lo", "Ro",
    "Mo", "Do", "Li", "Mi", "Ri", "Ni", "Al", "El", "An", "Bra", "Cha", "Sha", "Tre", "Ste", "Chri", "Ge",
];
pub const MIDDLES: &[&str] = &[
    "ri", "le", "na", "ma", "li", "sa", "de", "ra", "ni", "to", "be", "ka", "mi", "ro", "la", "ne", "ta", "ve",
    "lo", "ren",
];
pub const CODAS: &[&str] = &[
    "nix", "ra", "dor", "lin", "mar", "sia", "bel", "ly", "ria", "na", "ne", "sa", "ton", "lan", "ber", "rick",
    "son", "den", "ley", "nna", "ssa", "tte", "ndra", "lie", "rin", "ro",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GibberishMode {
    Plain,
    Covert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibberishConfig {
    pub count: usize,
    pub mode: GibberishMode,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    /// Forbidden real names (compared case-insensitively). Defaults to the
    /// built-in lexicon.
    #[serde(skip)]
    pub lexicon: Option<BTreeSet<String>>,
}

impl Default for GibberishConfig {
    fn default() -> Self {
        Self {
            count: 100,
            mode: GibberishMode::Plain,
            min_len: 12,
            max_len: 20,
            seed: 0,
            lexicon: None,
        }
    }
}

impl GibberishConfig {
    pub fn plain(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            ..Self::default()
        }
    }

    pub fn covert(count: usize, seed: u64) -> Self {
        Self {
            count,
            seed,
            mode: GibberishMode::Covert,
            ..Self::default()
        }
    }

    fn lexicon(&self) -> &BTreeSet<String> {
        self.lexicon.as_ref().unwrap_or_else(|| builtin_lexicon())
    }

    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(UmidError::Config("gibberish count must be at least 1".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(UmidError::Config(format!(
                "invalid length bounds [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Dispatch on `cfg.mode`.
pub fn generate(cfg: &GibberishConfig) -> Result<Vec<String>> {
    match cfg.mode {
        GibberishMode::Plain => generate_gibberish(cfg),
        GibberishMode::Covert => generate_covert_gibberish(cfg),
    }
}

/// Uniform strings over letters, digits and punctuation.
pub fn generate_gibberish(cfg: &GibberishConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let alphabet: Vec<char> = LETTERS.chars().chain(DIGITS.chars()).chain(PUNCTUATION.chars()).collect();
    let space: f64 = (cfg.min_len..=cfg.max_len)
        .map(|l| (alphabet.len() as f64).powi(l as i32))
        .sum();
    if cfg.count as f64 > space {
        return Err(UmidError::Generation(format!(
            "{} distinct strings requested but only {space} exist for lengths [{}, {}]",
            cfg.count, cfg.min_len, cfg.max_len
        )));
    }
    let mut rng = stream(cfg.seed, "baseline/plain", 0);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(cfg.count);
    let max_attempts = 1000 * cfg.count + 10_000;
    for _ in 0..max_attempts {
        if out.len() == cfg.count {
            break;
        }
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let s: String = (0..len).map(|_| *alphabet.choose(&mut rng).expect("non-empty")).collect();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    if out.len() < cfg.count {
        return Err(UmidError::Generation(format!(
            "only {} of {} distinct strings generated",
            out.len(),
            cfg.count
        )));
    }
    Ok(out)
}

/// Capitalized 2-4 syllable pseudo-names absent from the lexicon.
pub fn generate_covert_gibberish(cfg: &GibberishConfig) -> Result<Vec<String>> {
    if cfg.count == 0 {
        return Err(UmidError::Config("gibberish count must be at least 1".into()));
    }
    let lexicon = cfg.lexicon();
    let space = ONSETS.len() * (1 + MIDDLES.len() + MIDDLES.len() * MIDDLES.len()) * CODAS.len();
    if cfg.count > space {
        return Err(UmidError::Generation(format!(
            "syllable pools allow {space} compositions, {} requested",
            cfg.count
        )));
    }
    let mut rng = stream(cfg.seed, "baseline/covert", 0);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(cfg.count);
    let max_attempts = 1000 * cfg.count + 10_000;
    for _ in 0..max_attempts {
        if out.len() == cfg.count {
            break;
        }
        let middles = rng.random_range(0..=2);
        let mut s = String::from(*ONSETS.choose(&mut rng).expect("non-empty"));
        for _ in 0..middles {
            s.push_str(MIDDLES.choose(&mut rng).expect("non-empty"));
        }
        s.push_str(CODAS.choose(&mut rng).expect("non-empty"));
        let lower = s.to_lowercase();
        if lexicon.contains(&lower) || !seen.insert(lower) {
            continue;
        }
        out.push(s);
    }
    if out.len() < cfg.count {
        return Err(UmidError::Generation(format!(
            "syllable pools exhausted after {} novel names ({} requested)",
            out.len(),
            cfg.count
        )));
    }
    Ok(out)
}

/// Invert every baseline string; one feature point per string, in order.
pub fn build_baseline_features<E: DualEncoder + ?Sized>(
    enc: &E,
    strings: &[String],
    inv_cfg: &InversionConfig,
) -> Result<Vec<FeaturePoint>> {
    if strings.is_empty() {
        return Err(UmidError::Argument("baseline string list is empty".into()));
    }
    Ok(invert_all(enc, strings, inv_cfg)?
        .iter()
        .map(|s| FeaturePoint::from(s.statistics()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineHeader {
    /// Modality input and embedding sizes of the encoder the baseline was built on.
    pub input_dim: usize,
    pub embed_dim: usize,
    pub inversion: InversionConfig,
    pub generator: GibberishConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineEntry {
    pub string: String,
    #[serde(rename = "S_n")]
    pub similarity: f64,
    #[serde(rename = "D_n2")]
    pub variability: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineFile {
    pub header: BaselineHeader,
    pub entries: Vec<BaselineEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: BaselineHeader,
}

impl BaselineFile {
    pub fn new(header: BaselineHeader, strings: &[String], features: &[FeaturePoint]) -> Self {
        let entries = strings
            .iter()
            .zip(features)
            .map(|(s, f)| BaselineEntry {
                string: s.clone(),
                similarity: f.similarity,
                variability: f.variability,
            })
            .collect();
        Self { header, entries }
    }

    pub fn features(&self) -> Vec<FeaturePoint> {
        self.entries
            .iter()
            .map(|e| FeaturePoint::new(e.similarity, e.variability))
            .collect()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut text = serde_json::to_string(&HeaderLine {
            header: self.header.clone(),
        })?;
        text.push('\n');
        for e in &self.entries {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        Ok(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_jsonl()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'));
        let first = lines
            .next()
            .ok_or_else(|| UmidError::Format(format!("{}: empty baseline file", path.display())))?;
        let HeaderLine { header } = serde_json::from_str(first)
            .map_err(|e| UmidError::Format(format!("{}: bad header: {e}", path.display())))?;
        let entries = lines.map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        Ok(Self { header, entries })
    }
}
