use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::mlp::{Mlp, MlpCache};
use super::text::TrigramFeaturizer;
use crate::error::{Result, UmidError};

/// A vector in the shared contrastive space.
pub type Embedding = Array1<f64>;

/// Objective head used by [`DualEncoder::grad_through`].
pub type HeadFn<'a> = dyn FnMut(ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> + 'a;

/// Query and gradient access to a frozen text/modality encoder pair.
///
/// Modality inputs are passed batch-major (one row per input) so that the
/// inversion runs of a query can share one matrix product per step.
pub trait DualEncoder: Send + Sync {
    fn input_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn embed_text(&self, text: &str) -> Result<Embedding>;
    /// Unit-norm embeddings, one row per input row.
    fn embed_modality(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>>;
    /// Cosine of each row's embedding with `v_t` and its gradient with
    /// respect to that row.
    fn grad_cosine(&self, xs: ArrayView2<f64>, v_t: ArrayView1<f64>) -> Result<(Array1<f64>, Array2<f64>)>;

    /// Gradient through a caller-supplied head on the unit embeddings.
    /// `head` maps the unit embeddings to a per-row objective and its
    /// gradient with respect to those embeddings; the result carries that
    /// objective and its gradient with respect to each input row.
    fn grad_through(&self, xs: ArrayView2<f64>, head: &mut HeadFn<'_>) -> Result<(Array1<f64>, Array2<f64>)> {
        let unit = self.embed_modality(xs)?;
        let (obj, upstream) = head(unit.view())?;
        let mut grad = Array2::zeros(xs.raw_dim());
        for (i, w) in upstream.rows().into_iter().enumerate() {
            let scale = w.dot(&w).sqrt();
            if scale > 0.0 {
                let x = xs.slice(ndarray::s![i..i + 1, ..]);
                let (_, g) = self.grad_cosine(x, (&w / scale).view())?;
                grad.row_mut(i).assign(&(&g.row(0) * scale));
            }
        }
        Ok((obj, grad))
    }

    /// A per-query view with its own randomness stream. Deterministic
    /// encoders return `None` and are used directly.
    fn query_view(&self, _stream: u64) -> Option<Box<dyn DualEncoder + '_>> {
        None
    }
}

impl<T: DualEncoder + ?Sized> DualEncoder for &T {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn embed_dim(&self) -> usize {
        (**self).embed_dim()
    }
    fn embed_text(&self, text: &str) -> Result<Embedding> {
        (**self).embed_text(text)
    }
    fn embed_modality(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        (**self).embed_modality(xs)
    }
    fn grad_cosine(&self, xs: ArrayView2<f64>, v_t: ArrayView1<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        (**self).grad_cosine(xs, v_t)
    }
    fn grad_through(&self, xs: ArrayView2<f64>, head: &mut HeadFn<'_>) -> Result<(Array1<f64>, Array2<f64>)> {
        (**self).grad_through(xs, head)
    }
    fn query_view(&self, stream: u64) -> Option<Box<dyn DualEncoder + '_>> {
        (**self).query_view(stream)
    }
}

impl<T: DualEncoder + ?Sized> DualEncoder for Box<T> {
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn embed_dim(&self) -> usize {
        (**self).embed_dim()
    }
    fn embed_text(&self, text: &str) -> Result<Embedding> {
        (**self).embed_text(text)
    }
    fn embed_modality(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        (**self).embed_modality(xs)
    }
    fn grad_cosine(&self, xs: ArrayView2<f64>, v_t: ArrayView1<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        (**self).grad_cosine(xs, v_t)
    }
    fn grad_through(&self, xs: ArrayView2<f64>, head: &mut HeadFn<'_>) -> Result<(Array1<f64>, Array2<f64>)> {
        (**self).grad_through(xs, head)
    }
    fn query_view(&self, stream: u64) -> Option<Box<dyn DualEncoder + '_>> {
        (**self).query_view(stream)
    }
}

/// Convenience single-input form of [`DualEncoder::grad_cosine`].
pub fn grad_cosine_wrt_input<E: DualEncoder + ?Sized>(enc: &E, x: &[f64], v_t: &[f64]) -> Result<(f64, Vec<f64>)> {
    let xs = ArrayView2::from_shape((1, x.len()), x).map_err(|e| UmidError::Argument(e.to_string()))?;
    let (cos, grad) = enc.grad_cosine(xs, ArrayView1::from(v_t))?;
    Ok((cos[0], grad.row(0).to_vec()))
}

/// Divide each row by its norm in place; returns the norms.
pub(crate) fn normalize_rows(m: &mut Array2<f64>) -> Array1<f64> {
    let norms = m.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    for (mut row, &n) in m.rows_mut().into_iter().zip(norms.iter()) {
        if n > 0.0 {
            row /= n;
        }
    }
    norms
}

/// Cosine with `v_t` of each normalized row of `raw`, and the gradient of
/// that cosine with respect to the raw (pre-normalization) row.
pub(crate) fn cosine_head(raw: &Array2<f64>, v_t: ArrayView1<f64>) -> (Array1<f64>, Array2<f64>) {
    let mut unit = raw.clone();
    let norms = normalize_rows(&mut unit);
    let cos = unit.dot(&v_t);
    let mut d_raw = unit;
    for ((mut row, &c), &n) in d_raw.rows_mut().into_iter().zip(cos.iter()).zip(norms.iter()) {
        // d/dy (y/|y|) . v = (v - cos * u) / |y|
        row.zip_mut_with(&v_t, |u, &v| *u = (v - c * *u) / n);
    }
    (cos, d_raw)
}

/// The frozen target model: trigram featurizer plus two perceptron towers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderPair {
    pub featurizer: TrigramFeaturizer,
    pub text_tower: Mlp,
    pub modality_tower: Mlp,
}

impl EncoderPair {
    pub fn text_features(&self, texts: &[&str]) -> Array2<f64> {
        let q = self.featurizer.buckets;
        let mut m = Array2::zeros((texts.len(), q));
        for (mut row, t) in m.rows_mut().into_iter().zip(texts) {
            row.assign(&Array1::from(self.featurizer.features(t)));
        }
        m
    }

    pub fn embed_texts(&self, texts: &[&str]) -> Array2<f64> {
        let feats = self.text_features(texts);
        let mut out = self.text_tower.forward(feats.view()).out;
        normalize_rows(&mut out);
        out
    }

    pub(crate) fn modality_forward(&self, xs: ArrayView2<f64>) -> MlpCache {
        self.modality_tower.forward(xs)
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(UmidError::Shape {
                expected: self.input_dim(),
                actual: cols,
                context: "modality input",
            });
        }
        Ok(())
    }
}

impl DualEncoder for EncoderPair {
    fn input_dim(&self) -> usize {
        self.modality_tower.input_dim()
    }

    fn embed_dim(&self) -> usize {
        self.modality_tower.output_dim()
    }

    fn embed_text(&self, text: &str) -> Result<Embedding> {
        Ok(self.embed_texts(&[text]).row(0).to_owned())
    }

    fn embed_modality(&self, xs: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(xs.ncols())?;
        let mut out = self.modality_forward(xs).out;
        normalize_rows(&mut out);
        Ok(out)
    }

    fn grad_cosine(&self, xs: ArrayView2<f64>, v_t: ArrayView1<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.check_input(xs.ncols())?;
        if v_t.len() != self.embed_dim() {
            return Err(UmidError::Shape {
                expected: self.embed_dim(),
                actual: v_t.len(),
                context: "text embedding",
            });
        }
        let cache = self.modality_forward(xs);
        let (cos, d_out) = cosine_head(&cache.out, v_t);
        let grad = self.modality_tower.backward_input(&cache, d_out.view());
        Ok((cos, grad))
    }

    fn grad_through(&self, xs: ArrayView2<f64>, head: &mut HeadFn<'_>) -> Result<(Array1<f64>, Array2<f64>)> {
        self.check_input(xs.ncols())?;
        let cache = self.modality_forward(xs);
        let mut unit = cache.out.clone();
        let norms = normalize_rows(&mut unit);
        let (obj, upstream) = head(unit.view())?;
        if upstream.dim() != unit.dim() {
            return Err(UmidError::Shape {
                expected: unit.ncols(),
                actual: upstream.ncols(),
                context: "head gradient",
            });
        }
        // d/dy (y/|y|)^T w = (w - (u.w) u) / |y|
        let mut d_raw = upstream;
        for ((mut w, u), &n) in d_raw.rows_mut().into_iter().zip(unit.rows()).zip(norms.iter()) {
            let uw = u.dot(&w);
            w.zip_mut_with(&u, |wv, &uv| *wv = (*wv - uw * uv) / n);
        }
        Ok((obj, self.modality_tower.backward_input(&cache, d_raw.view())))
    }
}
