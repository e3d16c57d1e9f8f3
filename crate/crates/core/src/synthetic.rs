//! Small built-in datasets for tests, self-checks and demos.

use crate::matrix::Matrix;
use crate::mlp::Dataset;
use crate::rng::Rng;

/// Two classes split by a random hyperplane through the origin, with no
/// sample closer than `margin` to it. Classes alternate so both are always
/// present.
pub fn linearly_separable(n_samples: usize, n_features: usize, margin: f64, rng: &mut Rng) -> Dataset {
    let normal: Vec<f64> = (0..n_features).map(|_| rng.normal()).collect();
    let len = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
    let normal: Vec<f64> = normal.iter().map(|v| v / len).collect();
    let mut x = Matrix::zeros(n_features, n_samples);
    let mut y = Matrix::zeros(2, n_samples);
    for j in 0..n_samples {
        let want = j % 2;
        loop {
            let p: Vec<f64> = (0..n_features).map(|_| rng.normal()).collect();
            let side: f64 = p.iter().zip(&normal).map(|(a, b)| a * b).sum();
            if side.abs() < margin || usize::from(side > 0.0) != want {
                continue;
            }
            for (i, v) in p.iter().enumerate() {
                x.set(i, j, *v);
            }
            y.set(want, j, 1.0);
            break;
        }
    }
    Dataset::new(x, y).expect("consistent shapes")
}

/// The standard small task: 50 samples, 4 features, margin 0.5, trained
/// with layers 4-8-2.
pub fn separable_task(seed: u64) -> Dataset {
    linearly_separable(50, 4, 0.5, &mut Rng::new(seed))
}

pub const SEPARABLE_LAYERS: [usize; 3] = [4, 8, 2];
