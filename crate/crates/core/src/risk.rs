//! Risk functions on the output layer.
//!
//! A risk scores output scores against targets sample by sample. The MLP
//! keeps samples as columns; the GCN keeps nodes as rows and only counts the
//! nodes in its training mask.

use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RiskKind {
    /// Softmax followed by cross-entropy against a one-hot (or any
    /// probability) target.
    CrossEntropy,
    /// Half the squared Euclidean distance to the target.
    Squared,
}

/// How per-sample losses are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Which axis indexes samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    Columns,
    Rows,
}

#[derive(Clone, Copy, Debug)]
pub struct Risk<'a> {
    pub kind: RiskKind,
    pub reduction: Reduction,
    pub layout: Layout,
    pub mask: Option<&'a [bool]>,
}

impl<'a> Risk<'a> {
    pub fn new(kind: RiskKind, reduction: Reduction) -> Self {
        Risk {
            kind,
            reduction,
            layout: Layout::Columns,
            mask: None,
        }
    }

    pub fn with_layout(mut self, layout: Layout) -> Self {
        self.layout = layout;
        self
    }

    pub fn with_mask(mut self, mask: &'a [bool]) -> Self {
        self.mask = Some(mask);
        self
    }

    fn n_samples(&self, z: &Matrix) -> usize {
        match self.layout {
            Layout::Columns => z.cols(),
            Layout::Rows => z.rows(),
        }
    }

    fn n_outputs(&self, z: &Matrix) -> usize {
        match self.layout {
            Layout::Columns => z.rows(),
            Layout::Rows => z.cols(),
        }
    }

    fn active(&self, s: usize) -> bool {
        self.mask.map_or(true, |m| m[s])
    }

    /// Factor applied to every per-sample loss.
    pub fn weight(&self, z: &Matrix) -> f64 {
        match self.reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean => {
                let n = (0..self.n_samples(z)).filter(|&s| self.active(s)).count();
                if n == 0 {
                    0.0
                } else {
                    1.0 / n as f64
                }
            }
        }
    }

    /// A priori Lipschitz constant of the gradient. The softmax Hessian
    /// `diag(p) - p p^T` has spectral norm at most 1/2.
    pub fn lipschitz(&self, z: &Matrix) -> f64 {
        let per_sample = match self.kind {
            RiskKind::CrossEntropy => 0.5,
            RiskKind::Squared => 1.0,
        };
        per_sample * self.weight(z)
    }

    #[inline]
    fn idx(&self, z: &Matrix, s: usize, k: usize) -> usize {
        match self.layout {
            Layout::Columns => k * z.cols() + s,
            Layout::Rows => s * z.cols() + k,
        }
    }

    pub fn value(&self, z: &Matrix, y: &Matrix) -> f64 {
        assert!(z.same_shape(y), "risk: shape mismatch");
        let w = self.weight(z);
        let (zs, ys) = (z.as_slice(), y.as_slice());
        let k_out = self.n_outputs(z);
        let mut total = 0.0;
        for s in 0..self.n_samples(z) {
            if !self.active(s) {
                continue;
            }
            total += match self.kind {
                RiskKind::Squared => (0..k_out)
                    .map(|k| {
                        let i = self.idx(z, s, k);
                        0.5 * (zs[i] - ys[i]) * (zs[i] - ys[i])
                    })
                    .sum::<f64>(),
                RiskKind::CrossEntropy => {
                    let mx = (0..k_out)
                        .map(|k| zs[self.idx(z, s, k)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx
                        + (0..k_out)
                            .map(|k| (zs[self.idx(z, s, k)] - mx).exp())
                            .sum::<f64>()
                            .ln();
                    (0..k_out)
                        .map(|k| {
                            let i = self.idx(z, s, k);
                            ys[i] * (lse - zs[i])
                        })
                        .sum::<f64>()
                }
            };
        }
        w * total
    }

    pub fn gradient(&self, z: &Matrix, y: &Matrix) -> Matrix {
        assert!(z.same_shape(y), "risk: shape mismatch");
        let w = self.weight(z);
        let k_out = self.n_outputs(z);
        let (zs, ys) = (z.as_slice(), y.as_slice());
        let mut g = Matrix::zeros(z.rows(), z.cols());
        let gs = g.as_mut_slice();
        for s in 0..self.n_samples(z) {
            if !self.active(s) {
                continue;
            }
            match self.kind {
                RiskKind::Squared => {
                    for k in 0..k_out {
                        let i = self.idx(z, s, k);
                        gs[i] = w * (zs[i] - ys[i]);
                    }
                }
                RiskKind::CrossEntropy => {
                    let mx = (0..k_out)
                        .map(|k| zs[self.idx(z, s, k)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = (0..k_out).map(|k| (zs[self.idx(z, s, k)] - mx).exp()).sum();
                    let ysum: f64 = (0..k_out).map(|k| ys[self.idx(z, s, k)]).sum();
                    for k in 0..k_out {
                        let i = self.idx(z, s, k);
                        let p = (zs[i] - mx).exp() / denom;
                        gs[i] = w * (ysum * p - ys[i]);
                    }
                }
            }
        }
        g
    }
}

/// Column-wise softmax.
pub fn softmax_columns(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for j in 0..z.cols() {
        let mx = (0..z.rows()).map(|i| z.get(i, j)).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..z.rows()).map(|i| (z.get(i, j) - mx).exp()).sum();
        for i in 0..z.rows() {
            out.set(i, j, (z.get(i, j) - mx).exp() / denom);
        }
    }
    out
}

/// Fraction of samples whose argmax prediction matches the argmax target.
pub fn accuracy(scores: &Matrix, y: &Matrix, layout: Layout, mask: Option<&[bool]>) -> f64 {
    let (pred, truth) = match layout {
        Layout::Columns => (scores.argmax_cols(), y.argmax_cols()),
        Layout::Rows => (scores.argmax_rows(), y.argmax_rows()),
    };
    let mut hit = 0usize;
    let mut n = 0usize;
    for (s, (p, t)) in pred.iter().zip(&truth).enumerate() {
        if mask.map_or(true, |m| m[s]) {
            n += 1;
            if p == t {
                hit += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}
