//! Runtime checks of the convergence theory: per-iteration sufficient
//! descent, the output-layer stationarity identity, the running minimum
//! `c_k` of the block movement, and boundedness of the iterates.

use crate::matrix::Matrix;
use crate::risk::{Risk, RiskKind};

/// Slack on the sufficient-descent verdict.
pub const DESCENT_SLACK: f64 = 1e-8;

/// A priori Lipschitz bound on the risk gradient used by the theory.
pub fn risk_lipschitz_bound(kind: RiskKind) -> f64 {
    match kind {
        RiskKind::CrossEntropy | RiskKind::Squared => 1.0,
    }
}

/// `C1 = rho/2 - H/2 - H^2/rho`; positive exactly when `rho > 2H`.
pub fn c1(rho: f64, h: f64) -> f64 {
    rho / 2.0 - h / 2.0 - h * h / rho
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DescentReport {
    pub iter: usize,
    /// `L_rho` before minus `L_rho` after the iteration.
    pub lhs: f64,
    /// Sum of squared block moves of the iteration.
    pub block_move_sq_sum: f64,
    pub c1: f64,
    pub c2: f64,
    /// False when `C1 <= 0`, in which case `satisfied` is not a claim of the
    /// theory and is reported only for information.
    pub hypothesis_met: bool,
    pub satisfied: bool,
}

/// Compares the Lagrangian drop with `C2` times the block movement, where
/// `C2 = min(nu/2, C1, min_step/2)` and `min_step` is the smallest accepted
/// backtracking step of the iteration. Each backtracked block decreases the
/// Lagrangian by at least half its step times its squared move.
pub fn check_sufficient_descent(
    iter: usize,
    lagrangian_before: f64,
    lagrangian_after: f64,
    block_move_sq_sum: f64,
    min_step: f64,
    rho: f64,
    nu: f64,
    h: f64,
) -> DescentReport {
    let c1 = c1(rho, h);
    let c2 = (nu / 2.0).min(c1).min(min_step / 2.0);
    let lhs = lagrangian_before - lagrangian_after;
    DescentReport {
        iter,
        lhs,
        block_move_sq_sum,
        c1,
        c2,
        hypothesis_met: c1 > 0.0,
        satisfied: lhs >= c2 * block_move_sq_sum - DESCENT_SLACK,
    }
}

/// `|grad R(z_L) + u|_inf`.
pub fn stationarity_residual(risk: &Risk, z_last: &Matrix, y: &Matrix, u: &Matrix) -> f64 {
    let mut g = risk.gradient(z_last, y);
    g.axpy(1.0, u);
    g.max_abs()
}

/// Running minimum of the per-iteration block movement.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CkSeries {
    pub values: Vec<f64>,
}

impl CkSeries {
    pub fn last(&self) -> Option<f64> {
        self.values.last().copied()
    }

    /// True when the series never increases and never goes negative.
    pub fn is_valid(&self) -> bool {
        self.values.iter().all(|&v| v >= 0.0) && self.values.windows(2).all(|w| w[1] <= w[0])
    }

    /// Whether `k * c_k` (1-based `k`) ends the last `window` entries below
    /// where it started them.
    pub fn scaled_decreasing_tail(&self, window: usize) -> bool {
        let n = self.values.len();
        if window < 2 || n < window {
            return false;
        }
        let scaled: Vec<f64> = (n - window..n).map(|i| (i + 1) as f64 * self.values[i]).collect();
        scaled.last() < scaled.first()
    }
}

/// Appends `min(previous, move_sq_sum)`.
pub fn ck_update(series: &mut CkSeries, move_sq_sum: f64) {
    let next = match series.last() {
        Some(prev) => prev.min(move_sq_sum),
        None => move_sq_sum,
    };
    series.values.push(next);
}

/// Running maximum of the Frobenius norms of every variable group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoundednessMonitor {
    pub history: Vec<f64>,
}

impl BoundednessMonitor {
    pub fn observe<'a>(&mut self, blocks: impl IntoIterator<Item = &'a Matrix>) {
        let cur = blocks.into_iter().map(Matrix::frob).fold(0.0, f64::max);
        let prev = self.history.last().copied().unwrap_or(0.0);
        self.history.push(prev.max(cur));
    }

    /// The running max after `late` has not grown past `factor` times its
    /// value at `early` (both 1-based iteration counts).
    pub fn plateaued(&self, early: usize, late: usize, factor: f64) -> bool {
        if self.history.len() < late || early == 0 {
            return false;
        }
        let base = self.history[early - 1];
        self.history[late - 1..].iter().all(|&v| v.is_finite() && v <= factor * base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk::Reduction;

    #[test]
    fn zero_move_iteration_is_satisfied() {
        let r = check_sufficient_descent(1, 3.0, 3.0, 0.0, 1.0, 4.0, 1.0, 1.0);
        assert_eq!((r.lhs, r.block_move_sq_sum), (0.0, 0.0));
        assert!(r.satisfied && r.hypothesis_met);
    }

    #[test]
    fn small_rho_flags_hypothesis() {
        let r = check_sufficient_descent(1, 1.0, 0.5, 1.0, 1.0, 2.0, 1.0, 1.0);
        assert!(r.c1 <= 0.0);
        assert!(!r.hypothesis_met);
    }

    #[test]
    fn c2_takes_half_the_smallest_step() {
        let r = check_sufficient_descent(1, 1.0, 0.0, 1.0, 0.4, 4.0, 1.0, 1.0);
        assert_eq!(r.c2, 0.2);
    }

    #[test]
    fn ck_running_min() {
        let mut s = CkSeries::default();
        for m in [4.0, 1.0, 3.0] {
            ck_update(&mut s, m);
        }
        assert_eq!(s.values, vec![4.0, 1.0, 1.0]);
        assert!(s.is_valid());
        let mut z = CkSeries::default();
        for _ in 0..3 {
            ck_update(&mut z, 0.0);
        }
        assert_eq!(z.values, vec![0.0; 3]);
    }

    #[test]
    fn stationarity_residual_is_linear_in_u() {
        let z = Matrix::from_rows(&[[0.2, -0.1], [0.4, 1.0]]);
        let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let risk = Risk::new(RiskKind::CrossEntropy, Reduction::Sum);
        let mut u = risk.gradient(&z, &y).scale(-1.0);
        assert!(stationarity_residual(&risk, &z, &y, &u) < 1e-15);
        let eps = 1e-3;
        u.set(1, 0, u.get(1, 0) + eps);
        assert!((stationarity_residual(&risk, &z, &y, &u) - eps).abs() < 1e-15);
    }

    #[test]
    fn boundedness_plateau() {
        let mut m = BoundednessMonitor::default();
        for k in 0..60 {
            let v = Matrix::filled(1, 1, 1.0 + (k as f64).min(20.0) * 0.1);
            m.observe([&v]);
        }
        assert!(m.plateaued(10, 50, 10.0));
    }
}
