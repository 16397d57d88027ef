//! Synthetic identity-paired dataset and a small dual-encoder contrastive
//! model trained on its members. The trained pair is the audit target.

mod encoder;
pub mod io;
mod mlp;
mod text;
mod train;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use encoder::{grad_cosine_wrt_input, DualEncoder, Embedding, EncoderPair, HeadFn};
pub use mlp::Mlp;
pub use text::TrigramFeaturizer;
pub use train::{info_nce, train_contrastive, TrainReport, MOMENTUM};

use crate::error::{Result, UmidError};
use crate::rng::stream;

/// Standard deviation of a sample around its identity latent.
pub const SAMPLE_NOISE_STD: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestbedConfig {
    pub num_members: usize,
    pub num_nonmembers: usize,
    pub samples_per_identity: usize,
    pub identity_latent_dim: usize,
    pub text_feature_dim: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// First-layer initialization scale of the text tower.
    pub text_init_gain: f64,
    /// First-layer initialization scale of the modality tower.
    pub modality_init_gain: f64,
    pub seed: u64,
}

impl Default for TestbedConfig {
    fn default() -> Self {
        Self {
            num_members: 100,
            num_nonmembers: 100,
            samples_per_identity: 1,
            identity_latent_dim: 8,
            text_feature_dim: 256,
            embed_dim: 128,
            hidden_dim: 128,
            temperature: 0.07,
            epochs: 1000,
            batch_size: 50,
            learning_rate: 0.05,
            text_init_gain: 4.0,
            modality_init_gain: 0.5,
            seed: 0,
        }
    }
}

impl TestbedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(UmidError::Config(m.to_string()));
        if self.num_members + self.num_nonmembers == 0 {
            return bad("num_members + num_nonmembers must be positive");
        }
        if self.samples_per_identity == 0 {
            return bad("samples_per_identity must be at least 1");
        }
        for (name, v) in [
            ("identity_latent_dim", self.identity_latent_dim),
            ("text_feature_dim", self.text_feature_dim),
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v < 2 {
                return Err(UmidError::Config(format!("{name} must be at least 2, got {v}")));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        for (name, v) in [("text_init_gain", self.text_init_gain), ("modality_init_gain", self.modality_init_gain)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(UmidError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        Ok(())
    }

    /// Stable hash of the full configuration, recorded in model files.
    pub fn hash(&self) -> String {
        crate::io::sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub id: usize,
    pub text: String,
    #[serde(rename = "samples")]
    pub modality_samples: Vec<Vec<f64>>,
    pub is_member: bool,
}

const GIVEN_PARTS: &[&str] = &[
    "vel", "tor", "mar", "sen", "dri", "kal", "ost", "bre", "lum", "fen", "qua", "ris", "dov", "hal", "zen",
    "pav", "our", "gil", "nor", "tes",
];
const FAMILY_PARTS: &[&str] = &[
    "or", "ane", "ick", "ova", "est", "ur", "ell", "ant", "omb", "ith", "ax", "ey", "und", "ier", "aro",
];

/// Two-word pseudo-name, e.g. `Velor Tesdriane`.
fn pseudo_name<R: Rng + ?Sized>(rng: &mut R) -> String {
    let mut part = |pools: &[&[&str]]| {
        let raw: String = pools.iter().map(|p| *p.choose(rng).expect("non-empty")).collect();
        let mut c = raw.chars();
        let first = c.next().expect("non-empty").to_ascii_uppercase();
        std::iter::once(first).chain(c).collect::<String>()
    };
    let given = part(&[GIVEN_PARTS, FAMILY_PARTS]);
    let family = part(&[GIVEN_PARTS, GIVEN_PARTS, FAMILY_PARTS]);
    format!("{given} {family}")
}

/// The latent `z_i` of identity `id`.
pub fn identity_latent(cfg: &TestbedConfig, id: usize) -> Vec<f64> {
    let mut rng = stream(cfg.seed, "testbed/latent", id as u64);
    (0..cfg.identity_latent_dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn samples_around<R: Rng + ?Sized>(latent: &[f64], count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            latent
                .iter()
                .map(|z| z + SAMPLE_NOISE_STD * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// Fresh samples of identity `id` held by the auditor, never used in training.
pub fn local_samples(cfg: &TestbedConfig, id: usize, count: usize) -> Vec<Vec<f64>> {
    let latent = identity_latent(cfg, id);
    samples_around(&latent, count, &mut stream(cfg.seed, "testbed/local", id as u64))
}

/// Members come first (ids `0..num_members`), then non-members.
pub fn generate_dataset(cfg: &TestbedConfig) -> Result<Vec<IdentityRecord>> {
    cfg.validate()?;
    let total = cfg.num_members + cfg.num_nonmembers;
    let mut out = Vec::with_capacity(total);
    let mut names = std::collections::BTreeSet::new();
    for id in 0..total {
        let mut name_rng = stream(cfg.seed, "testbed/name", id as u64);
        let mut text = pseudo_name(&mut name_rng);
        while !names.insert(text.clone()) {
            text = pseudo_name(&mut name_rng);
        }
        let latent = identity_latent(cfg, id);
        let mut noise = stream(cfg.seed, "testbed/samples", id as u64);
        out.push(IdentityRecord {
            id,
            text,
            modality_samples: samples_around(&latent, cfg.samples_per_identity, &mut noise),
            is_member: id < cfg.num_members,
        });
    }
    Ok(out)
}
