//! Tiny reconstruction autoencoder `dims -> 4 -> 2 -> 4 -> dims` with tanh
//! hidden layers; anomaly score is the reconstruction MSE.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::rng::stream;

pub const HIDDEN: [usize; 3] = [4, 2, 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoEncoder {
    pub layers: Vec<Layer>,
    pub final_loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeTraining {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for AeTraining {
    fn default() -> Self {
        Self {
            epochs: 3000,
            learning_rate: 0.01,
        }
    }
}

struct Adam {
    m: Vec<(Array2<f64>, Array1<f64>)>,
    v: Vec<(Array2<f64>, Array1<f64>)>,
    t: i32,
}

impl AutoEncoder {
    fn forward(&self, x: &Array2<f64>) -> Vec<Array2<f64>> {
        let mut acts = vec![x.clone()];
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = acts[l].dot(&layer.w.t()) + &layer.b;
            if l < last {
                z.mapv_inplace(f64::tanh);
            }
            acts.push(z);
        }
        acts
    }

    pub fn fit(points: &[Vec<f64>], cfg: AeTraining, seed: u64) -> Self {
        let dims = points[0].len();
        let n = points.len();
        let mut rng = stream(seed, "autoencoder/init", 0);
        let sizes: Vec<usize> = std::iter::once(dims).chain(HIDDEN).chain(std::iter::once(dims)).collect();
        let layers: Vec<Layer> = sizes
            .windows(2)
            .map(|w| {
                let s = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    w: Array2::from_shape_fn((w[1], w[0]), |_| s * rng.sample::<f64, _>(StandardNormal)),
                    b: Array1::zeros(w[1]),
                }
            })
            .collect();
        let mut ae = Self { layers, final_loss: f64::NAN };
        let x = Array2::from_shape_fn((n, dims), |(i, j)| points[i][j]);
        let mut adam = Adam {
            m: ae.layers.iter().map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim()))).collect(),
            v: ae.layers.iter().map(|l| (Array2::zeros(l.w.raw_dim()), Array1::zeros(l.b.raw_dim()))).collect(),
            t: 0,
        };
        let last = ae.layers.len() - 1;
        for _ in 0..cfg.epochs {
            let acts = ae.forward(&x);
            let out = &acts[acts.len() - 1];
            let diff = out - &x;
            ae.final_loss = diff.iter().map(|d| d * d).sum::<f64>() / (n * dims) as f64;
            let mut delta = diff * (2.0 / (n * dims) as f64);
            let mut grads = Vec::with_capacity(ae.layers.len());
            for l in (0..ae.layers.len()).rev() {
                if l < last {
                    let a = &acts[l + 1];
                    ndarray::Zip::from(&mut delta).and(a).for_each(|d, &h| *d *= 1.0 - h * h);
                }
                let gw = delta.t().dot(&acts[l]);
                let gb = delta.sum_axis(Axis(0));
                let next = delta.dot(&ae.layers[l].w);
                grads.push((gw, gb));
                delta = next;
            }
            grads.reverse();
            adam.t += 1;
            let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
            let c1 = 1.0 - b1.powi(adam.t);
            let c2 = 1.0 - b2.powi(adam.t);
            for (l, (gw, gb)) in grads.iter().enumerate() {
                let (mw, mb) = &mut adam.m[l];
                let (vw, vb) = &mut adam.v[l];
                let layer = &mut ae.layers[l];
                ndarray::Zip::from(&mut layer.w).and(mw).and(vw).and(gw).for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
                ndarray::Zip::from(&mut layer.b).and(mb).and(vb).and(gb).for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
            }
        }
        ae
    }

    pub fn reconstruct(&self, x: &[f64]) -> Vec<f64> {
        let m = Array2::from_shape_vec((1, x.len()), x.to_vec()).expect("row");
        self.forward(&m).pop().expect("output").row(0).to_vec()
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        let r = self.reconstruct(x);
        r.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
    }
}
