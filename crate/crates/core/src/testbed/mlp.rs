use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Two-layer perceptron `out = W2 tanh(W1 x + b1) + b2`, batch-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Activations kept for the backward pass.
pub struct MlpCache {
    pub hidden: Array2<f64>,
    pub out: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, output: usize, gain: f64) -> Self {
        let s1 = gain / (input as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Self {
            w1: Array2::from_shape_fn((hidden, input), |_| s1 * rng.sample::<f64, _>(StandardNormal)),
            b1: Array1::zeros(hidden),
            w2: Array2::from_shape_fn((output, hidden), |_| s2 * rng.sample::<f64, _>(StandardNormal)),
            b2: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.nrows()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> MlpCache {
        let mut hidden = x.dot(&self.w1.t());
        hidden += &self.b1;
        hidden.mapv_inplace(f64::tanh);
        let mut out = hidden.dot(&self.w2.t());
        out += &self.b2;
        MlpCache { hidden, out }
    }

    /// Gradient with respect to the input only.
    pub fn backward_input(&self, cache: &MlpCache, d_out: ArrayView2<f64>) -> Array2<f64> {
        let d_hidden = self.hidden_delta(cache, d_out);
        d_hidden.dot(&self.w1)
    }

    /// Gradients with respect to all parameters.
    pub fn backward_params(&self, x: ArrayView2<f64>, cache: &MlpCache, d_out: ArrayView2<f64>) -> MlpGrads {
        let d_hidden = self.hidden_delta(cache, d_out);
        MlpGrads {
            w2: d_out.t().dot(&cache.hidden),
            b2: d_out.sum_axis(Axis(0)),
            w1: d_hidden.t().dot(&x),
            b1: d_hidden.sum_axis(Axis(0)),
        }
    }

    fn hidden_delta(&self, cache: &MlpCache, d_out: ArrayView2<f64>) -> Array2<f64> {
        let mut d_hidden = d_out.dot(&self.w2);
        ndarray::Zip::from(&mut d_hidden)
            .and(&cache.hidden)
            .for_each(|d, &h| *d *= 1.0 - h * h);
        d_hidden
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }
}

impl MlpGrads {
    pub fn zeros_like(m: &Mlp) -> Self {
        Self {
            w1: Array2::zeros(m.w1.raw_dim()),
            b1: Array1::zeros(m.b1.raw_dim()),
            w2: Array2::zeros(m.w2.raw_dim()),
            b2: Array1::zeros(m.b2.raw_dim()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
    }
}

/// Heavy-ball momentum step: `vel = momentum * vel + grad; param -= lr * vel`.
pub fn momentum_step(params: &mut Mlp, vel: &mut MlpGrads, grads: &MlpGrads, lr: f64, momentum: f64) {
    fn step<D: ndarray::Dimension>(
        p: &mut ndarray::Array<f64, D>,
        v: &mut ndarray::Array<f64, D>,
        g: &ndarray::Array<f64, D>,
        lr: f64,
        mu: f64,
    ) {
        ndarray::Zip::from(p).and(v).and(g).for_each(|p, v, &g| {
            *v = mu * *v + g;
            *p -= lr * *v;
        });
    }
    step(&mut params.w1, &mut vel.w1, &grads.w1, lr, momentum);
    step(&mut params.b1, &mut vel.b1, &grads.b1, lr, momentum);
    step(&mut params.w2, &mut vel.w2, &grads.w2, lr, momentum);
    step(&mut params.b2, &mut vel.b2, &grads.b2, lr, momentum);
}
