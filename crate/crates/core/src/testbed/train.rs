use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::encoder::{normalize_rows, EncoderPair};
use super::mlp::{momentum_step, Mlp, MlpGrads};
use super::text::TrigramFeaturizer;
use super::{IdentityRecord, TestbedConfig};
use crate::error::{Result, UmidError};
use crate::rng::stream;

pub const MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Symmetric InfoNCE loss over a batch and its gradients with respect to
/// the unit text and modality embeddings.
pub fn info_nce(text: &Array2<f64>, modality: &Array2<f64>, temperature: f64) -> (f64, Array2<f64>, Array2<f64>) {
    let b = text.nrows();
    let logits = text.dot(&modality.t()) / temperature;
    let row_sm = softmax_rows(&logits);
    let col_sm = softmax_rows(&logits.t().to_owned()).reversed_axes();
    let mut loss = 0.0;
    for i in 0..b {
        loss -= row_sm[[i, i]].ln() + col_sm[[i, i]].ln();
    }
    loss /= 2.0 * b as f64;
    let mut g = (&row_sm + &col_sm) / (2.0 * b as f64);
    for i in 0..b {
        g[[i, i]] -= 1.0 / b as f64;
    }
    let d_text = g.dot(modality) / temperature;
    let d_mod = g.t().dot(text) / temperature;
    (loss, d_text, d_mod)
}

fn softmax_rows(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Back through row normalization: given unit rows `u` of raw rows with
/// norms `n`, map d/du to d/draw.
fn through_normalize(d_unit: &Array2<f64>, unit: &Array2<f64>, norms: &ndarray::Array1<f64>) -> Array2<f64> {
    let mut out = d_unit.clone();
    for ((mut row, u), &n) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms.iter()) {
        let proj = row.dot(&u);
        row.zip_mut_with(&u, |d, &uu| *d = (*d - proj * uu) / n);
    }
    out
}

/// Fit both towers on the member pairs with symmetric InfoNCE.
pub fn train_contrastive(records: &[IdentityRecord], cfg: &TestbedConfig) -> Result<(EncoderPair, TrainReport)> {
    cfg.validate()?;
    let members: Vec<&IdentityRecord> = records.iter().filter(|r| r.is_member).collect();
    if members.len() < 2 {
        return Err(UmidError::Training(format!(
            "contrastive training needs at least 2 member identities, got {}",
            members.len()
        )));
    }
    let mut init_rng = stream(cfg.seed, "testbed/init", 0);
    let featurizer = TrigramFeaturizer::new(cfg.text_feature_dim);
    let mut enc = EncoderPair {
        featurizer,
        text_tower: Mlp::init(&mut init_rng, cfg.text_feature_dim, cfg.hidden_dim, cfg.embed_dim, cfg.text_init_gain),
        modality_tower: Mlp::init(&mut init_rng, cfg.identity_latent_dim, cfg.hidden_dim, cfg.embed_dim, cfg.modality_init_gain),
    };
    let mut vel_text = MlpGrads::zeros_like(&enc.text_tower);
    let mut vel_mod = MlpGrads::zeros_like(&enc.modality_tower);

    let texts: Vec<&str> = members.iter().map(|r| r.text.as_str()).collect();
    let all_text_feats = enc.text_features(&texts);
    let p = cfg.identity_latent_dim;
    let batch = cfg.batch_size.clamp(2, members.len());

    let mut order: Vec<usize> = (0..members.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = stream(cfg.seed, "testbed/epoch", epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue;
            }
            let xt = all_text_feats.select(Axis(0), chunk);
            let mut xm = Array2::zeros((chunk.len(), p));
            for (mut row, &i) in xm.rows_mut().into_iter().zip(chunk) {
                let samples = &members[i].modality_samples;
                let s = &samples[rng.random_range(0..samples.len())];
                row.assign(&ndarray::ArrayView1::from(s.as_slice()));
            }
            let ct = enc.text_tower.forward(xt.view());
            let cm = enc.modality_tower.forward(xm.view());
            let mut ut = ct.out.clone();
            let nt = normalize_rows(&mut ut);
            let mut um = cm.out.clone();
            let nm = normalize_rows(&mut um);
            let (loss, d_ut, d_um) = info_nce(&ut, &um, cfg.temperature);
            if !loss.is_finite() {
                return Err(UmidError::Divergence { epoch, loss });
            }
            let g_text = enc
                .text_tower
                .backward_params(xt.view(), &ct, through_normalize(&d_ut, &ut, &nt).view());
            let g_mod = enc
                .modality_tower
                .backward_params(xm.view(), &cm, through_normalize(&d_um, &um, &nm).view());
            if !g_text.is_finite() || !g_mod.is_finite() {
                return Err(UmidError::Divergence { epoch, loss });
            }
            momentum_step(&mut enc.text_tower, &mut vel_text, &g_text, cfg.learning_rate, MOMENTUM);
            momentum_step(&mut enc.modality_tower, &mut vel_mod, &g_mod, cfg.learning_rate, MOMENTUM);
            total += loss;
            batches += 1;
        }
        let epoch_loss = total / batches.max(1) as f64;
        if !epoch_loss.is_finite() {
            return Err(UmidError::Divergence { epoch, loss: epoch_loss });
        }
        epoch_losses.push(epoch_loss);
    }
    let final_loss = epoch_losses.last().copied().unwrap_or(f64::NAN);
    Ok((enc, TrainReport { final_loss, epoch_losses }))
}
