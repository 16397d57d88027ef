//! Shared fixtures for the benchmarks.

use ndarray::{Array1, Array2};
use umid_core::detectors::FeaturePoint;
use umid_core::linalg::random_unit;
use umid_core::rng::stream;
use umid_core::testbed::{generate_dataset, train_contrastive};
use umid_core::{EncoderPair, TestbedConfig};

/// A small trained encoder pair; dimensions match the default testbed.
pub fn encoder(epochs: usize) -> EncoderPair {
    let cfg = TestbedConfig {
        num_members: 20,
        num_nonmembers: 20,
        batch_size: 20,
        epochs,
        ..TestbedConfig::default()
    };
    let records = generate_dataset(&cfg).expect("valid config");
    train_contrastive(&records, &cfg).expect("training converges").0
}

pub fn unit_rows(n: usize, d: usize, seed: u64) -> (Array1<f64>, Array2<f64>) {
    let mut rng = stream(seed, "bench/rows", 0);
    let t = Array1::from(random_unit(&mut rng, d));
    let mut m = Array2::zeros((n, d));
    for mut row in m.rows_mut() {
        row.assign(&Array1::from(random_unit(&mut rng, d)));
    }
    (t, m)
}

pub fn blob(n: usize, seed: u64) -> Vec<FeaturePoint> {
    let mut rng = stream(seed, "bench/blob", 0);
    (0..n)
        .map(|_| {
            let g = umid_core::linalg::gaussian_vec(&mut rng, 2);
            FeaturePoint::new(0.6 + 0.05 * g[0], 0.3 + 0.05 * g[1])
        })
        .collect()
}
