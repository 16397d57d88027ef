use serde::{Deserialize, Serialize};

/// Per-dimension z-scoring fit on the baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Zero-variance dimensions get a unit scale.
    pub fn fit(points: &[Vec<f64>]) -> Self {
        let dims = points.first().map_or(0, Vec::len);
        let n = points.len() as f64;
        let mut mean = vec![0.0; dims];
        for p in points {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v / n;
            }
        }
        let mut std = vec![0.0; dims];
        for p in points {
            for ((s, v), m) in std.iter_mut().zip(p).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut std {
            *s = s.sqrt();
            if !(*s > 0.0) || !s.is_finite() {
                *s = 1.0;
            }
        }
        Self { mean, std }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn inverse(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| v * s + m).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn constant_dimension_gets_unit_scale() {
        let s = Standardizer::fit(&[vec![1.0, 2.0], vec![1.0, 4.0]]);
        assert_eq!(s.std[0], 1.0);
        assert_eq!(s.std[1], 1.0);
        assert_eq!(s.mean, vec![1.0, 3.0]);
    }

    proptest! {
        #[test]
        fn inverse_undoes_transform(
            pts in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 3), 2..30),
            x in prop::collection::vec(-50.0f64..50.0, 3),
        ) {
            let s = Standardizer::fit(&pts);
            let back = s.inverse(&s.transform(&x));
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
