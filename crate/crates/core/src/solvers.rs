//! Block subproblem solvers.
//!
//! Quadratic-model steps with backtracking, the closed-form bias and
//! activation-layer updates, the accelerated solve for the output scores and
//! the proximal map of the weight regularizer.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mlp::Regularizer;
use crate::risk::Risk;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BacktrackOptions {
    /// Factor applied to the step parameter after a failed trial.
    pub growth: f64,
    pub max_trials: usize,
    /// Absolute slack on the acceptance test, to absorb rounding when the
    /// model and the true increment agree exactly.
    pub tol: f64,
}

impl Default for BacktrackOptions {
    fn default() -> Self {
        BacktrackOptions {
            growth: 2.0,
            max_trials: 60,
            tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BacktrackResult {
    pub step: f64,
    pub candidate: Matrix,
    pub trials: usize,
    /// `phi(candidate) - phi(anchor)` as computed by the caller.
    pub phi_increment: f64,
    /// `Q(candidate; step) - phi(anchor)`.
    pub model_increment: f64,
}

impl BacktrackResult {
    /// `phi(candidate) - Q(candidate; step)`; non-positive up to the slack.
    pub fn gap(&self) -> f64 {
        self.phi_increment - self.model_increment
    }
}

/// `Q(anchor + delta; t) - phi(anchor) = <g, delta> + t/2 |delta|^2`.
pub fn model_increment(grad: &Matrix, delta: &Matrix, step: f64) -> f64 {
    grad.dot(delta) + 0.5 * step * delta.frob_sq()
}

/// Grows the step parameter from `seed_step` until the quadratic model at the
/// candidate `anchor - grad/step` majorizes `phi`.
///
/// `increment(candidate, delta, step)` must return
/// `phi(candidate) - phi(anchor)` with every other block held fixed, where
/// `delta = candidate - anchor`. Computing the difference directly (rather
/// than two full evaluations) keeps the test meaningful when the step is tiny.
pub fn backtrack_quadratic<F>(
    increment: F,
    grad: &Matrix,
    anchor: &Matrix,
    seed_step: f64,
    opts: &BacktrackOptions,
) -> Result<BacktrackResult>
where
    F: FnMut(&Matrix, &Matrix, f64) -> f64,
{
    backtrack_with(increment, grad, anchor, seed_step, opts, |v, _| v)
}

/// As [`backtrack_quadratic`], with the candidate passed through the
/// proximal map of `reg` at each trial.
pub fn backtrack_proximal<F>(
    increment: F,
    grad: &Matrix,
    anchor: &Matrix,
    seed_step: f64,
    reg: Regularizer,
    opts: &BacktrackOptions,
) -> Result<BacktrackResult>
where
    F: FnMut(&Matrix, &Matrix, f64) -> f64,
{
    backtrack_with(increment, grad, anchor, seed_step, opts, |v, t| {
        prox_regularizer(&v, reg, reg.lambda() / t)
    })
}

/// Convenience form taking a full evaluation of `phi` at a trial block.
pub fn backtrack_eval<F>(
    mut eval_phi: F,
    grad: &Matrix,
    anchor: &Matrix,
    seed_step: f64,
    opts: &BacktrackOptions,
) -> Result<BacktrackResult>
where
    F: FnMut(&Matrix) -> f64,
{
    let base = eval_phi(anchor);
    backtrack_quadratic(|c, _, _| eval_phi(c) - base, grad, anchor, seed_step, opts)
}

fn backtrack_with<F, P>(
    mut increment: F,
    grad: &Matrix,
    anchor: &Matrix,
    seed_step: f64,
    opts: &BacktrackOptions,
    map: P,
) -> Result<BacktrackResult>
where
    F: FnMut(&Matrix, &Matrix, f64) -> f64,
    P: Fn(Matrix, f64) -> Matrix,
{
    if !(opts.growth > 1.0) {
        return Err(Error::Argument(format!("growth {} must exceed 1", opts.growth)));
    }
    if !(seed_step > 0.0 && seed_step.is_finite()) {
        return Err(Error::Argument(format!("seed step {seed_step} must be positive")));
    }
    let mut t = seed_step;
    for trial in 1..=opts.max_trials {
        let mut v = anchor.clone();
        v.axpy(-1.0 / t, grad);
        let candidate = map(v, t);
        let delta = candidate.sub(anchor);
        let phi_inc = increment(&candidate, &delta, t);
        let model_inc = model_increment(grad, &delta, t);
        if phi_inc <= model_inc + opts.tol {
            return Ok(BacktrackResult {
                step: t,
                candidate,
                trials: trial,
                phi_increment: phi_inc,
                model_increment: model_inc,
            });
        }
        t *= opts.growth;
    }
    Err(Error::Nonconvergence {
        trials: opts.max_trials,
        step: t / opts.growth,
    })
}

/// Warm-start step values carried between outer iterations, one per
/// (layer, slot).
#[derive(Clone, Debug, PartialEq)]
pub struct StepSeeds {
    seeds: Vec<[f64; 4]>,
    floor: f64,
}

/// Which backtracked update a seed belongs to. The GCN uses the activation
/// slots for its `Z` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeedSlot {
    BackwardAct = 0,
    BackwardWeight = 1,
    ForwardAct = 2,
    ForwardWeight = 3,
}

impl StepSeeds {
    pub fn new(n_layers: usize, initial: f64) -> Self {
        StepSeeds {
            seeds: vec![[initial; 4]; n_layers],
            floor: 1e-8,
        }
    }

    pub fn get(&self, layer: usize, slot: SeedSlot) -> f64 {
        self.seeds[layer][slot as usize]
    }

    /// Next seed is the accepted step shrunk by one growth factor.
    pub fn record(&mut self, layer: usize, slot: SeedSlot, accepted: f64, growth: f64) {
        self.seeds[layer][slot as usize] = (accepted / growth).max(self.floor);
    }
}

/// Closed-form bias update. The model curvature is the penalty weight
/// (`nu` for hidden layers, `rho` for the last) times the number of sample
/// columns sharing the bias; with one column this is a plain gradient step
/// of length `1/nu` or `1/rho`.
pub fn update_b(
    anchor: &Matrix,
    grad: &Matrix,
    layer: usize,
    n_layers: usize,
    nu: f64,
    rho: f64,
    n_samples: usize,
) -> Matrix {
    let c = if layer + 1 == n_layers { rho } else { nu };
    let mut b = anchor.clone();
    b.axpy(-1.0 / (c * n_samples.max(1) as f64), grad);
    b
}

/// Weights of the two terms in the activation-layer subproblem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZWeights {
    pub w_lin: f64,
    pub w_act: f64,
}

impl ZWeights {
    pub fn equal(w: f64) -> Self {
        ZWeights { w_lin: w, w_act: w }
    }
}

/// Objective of the scalar activation subproblem.
pub fn z_objective(z: f64, m: f64, t: f64, slope: f64, w: ZWeights) -> f64 {
    let fz = if z >= 0.0 { z } else { slope * z };
    w.w_lin * (z - m) * (z - m) + w.w_act * (t - fz) * (t - fz)
}

/// Minimizes `w_lin (z - m)^2 + w_act (t - g(z))^2` over scalar `z` where
/// `g` is the (leaky) ReLU with the given negative slope.
pub fn solve_z_scalar(m: f64, t: f64, slope: f64, w: ZWeights) -> f64 {
    let pos = ((w.w_lin * m + w.w_act * t) / (w.w_lin + w.w_act)).max(0.0);
    let neg = ((w.w_lin * m + w.w_act * slope * t) / (w.w_lin + w.w_act * slope * slope)).min(0.0);
    if z_objective(pos, m, t, slope, w) <= z_objective(neg, m, t, slope, w) {
        pos
    } else {
        neg
    }
}

/// Elementwise solution of the ReLU activation subproblem.
pub fn solve_z_relu(linear_in: &Matrix, a_target: &Matrix, w: ZWeights) -> Matrix {
    linear_in.zip_map(a_target, |m, t| solve_z_scalar(m, t, 0.0, w))
}

pub fn solve_z_leaky_relu(linear_in: &Matrix, a_target: &Matrix, slope: f64, w: ZWeights) -> Matrix {
    linear_in.zip_map(a_target, |m, t| solve_z_scalar(m, t, slope, w))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FistaOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FistaOptions {
    fn default() -> Self {
        FistaOptions {
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FistaResult {
    pub z: Matrix,
    pub iterations: usize,
    /// Infinity norm of the gradient at `z`.
    pub grad_norm: f64,
    pub converged: bool,
    /// Objective at the retained iterate, starting with the anchor.
    pub objective_trace: Vec<f64>,
}

/// The output-score subproblem `R(z) + <u, z - w> + rho/2 |z - w|^2`.
#[derive(Clone, Copy, Debug)]
pub struct LastLayerProblem<'a> {
    pub risk: Risk<'a>,
    pub y: &'a Matrix,
    pub w_aff: &'a Matrix,
    pub u: &'a Matrix,
    pub rho: f64,
}

impl LastLayerProblem<'_> {
    pub fn value(&self, z: &Matrix) -> f64 {
        let d = z.sub(self.w_aff);
        self.risk.value(z, self.y) + self.u.dot(&d) + 0.5 * self.rho * d.frob_sq()
    }

    pub fn gradient(&self, z: &Matrix) -> Matrix {
        let mut g = self.risk.gradient(z, self.y);
        g.axpy(1.0, self.u);
        g.axpy(self.rho, z);
        g.axpy(-self.rho, self.w_aff);
        g
    }
}

/// Solves the output-score subproblem. Squared loss is solved in closed
/// form; cross-entropy runs monotone FISTA from `anchor` with step
/// `1/(H + rho)`, stopping once the gradient's infinity norm is at most
/// `tol`. A solve that runs out of iterations is returned with
/// `converged == false`.
pub fn solve_z_last(problem: &LastLayerProblem, anchor: &Matrix, opts: &FistaOptions) -> FistaResult {
    use crate::risk::RiskKind;
    if problem.risk.kind == RiskKind::Squared {
        return closed_form_squared(problem);
    }
    let lip = problem.risk.lipschitz(anchor) + problem.rho;
    let mut x = anchor.clone();
    let mut hx = problem.value(&x);
    let mut trace = vec![hx];
    let mut gx = problem.gradient(&x).max_abs();
    let mut yk = x.clone();
    let mut t = 1.0f64;
    let mut it = 0;
    while gx > opts.tol && it < opts.max_iter {
        it += 1;
        let mut cand = yk.clone();
        cand.axpy(-1.0 / lip, &problem.gradient(&yk));
        let hc = problem.value(&cand);
        let x_prev = x;
        let accepted = hc <= hx;
        x = if accepted { cand.clone() } else { x_prev.clone() };
        if accepted {
            hx = hc;
        }
        trace.push(hx);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        // y = x + (t/t') (cand - x) + ((t-1)/t') (x - x_prev)
        yk = x.clone();
        yk.axpy(t / t_next, &cand.sub(&x));
        yk.axpy((t - 1.0) / t_next, &x.sub(&x_prev));
        t = t_next;
        gx = problem.gradient(&x).max_abs();
    }
    FistaResult {
        z: x,
        iterations: it,
        grad_norm: gx,
        converged: gx <= opts.tol,
        objective_trace: trace,
    }
}

fn closed_form_squared(p: &LastLayerProblem) -> FistaResult {
    let w = p.risk.weight(p.w_aff);
    let z = Matrix::from_fn(p.w_aff.rows(), p.w_aff.cols(), |i, j| {
        let sample = match p.risk.layout {
            crate::risk::Layout::Columns => j,
            crate::risk::Layout::Rows => i,
        };
        let s = if p.risk.mask.map_or(true, |m| m[sample]) { w } else { 0.0 };
        (s * p.y.get(i, j) + p.rho * p.w_aff.get(i, j) - p.u.get(i, j)) / (s + p.rho)
    });
    let grad_norm = p.gradient(&z).max_abs();
    let h = p.value(&z);
    FistaResult {
        z,
        iterations: 0,
        grad_norm,
        converged: true,
        objective_trace: vec![h],
    }
}

/// Proximal map of the weight regularizer with threshold
/// `lambda_over_step`.
pub fn prox_regularizer(v: &Matrix, reg: Regularizer, lambda_over_step: f64) -> Matrix {
    match reg {
        Regularizer::None => v.clone(),
        _ if lambda_over_step == 0.0 => v.clone(),
        Regularizer::L2(_) => v.scale(1.0 / (1.0 + 2.0 * lambda_over_step)),
        Regularizer::L1(_) => v.map(|x| x.signum() * (x.abs() - lambda_over_step).max(0.0)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::risk::{Reduction, RiskKind};
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn quad_increment(c: f64, anchor: f64) -> impl FnMut(&Matrix, &Matrix, f64) -> f64 {
        // phi(x) = c/2 x^2 evaluated elementwise.
        move |cand: &Matrix, _d: &Matrix, _t: f64| {
            let x = cand.get(0, 0);
            0.5 * c * x * x - 0.5 * c * anchor * anchor
        }
    }

    #[test]
    fn zero_gradient_accepts_first_trial() {
        let anchor = Matrix::column(&[1.5, -2.0]);
        let g = Matrix::zeros(2, 1);
        let r = backtrack_quadratic(|_, _, _| 0.0, &g, &anchor, 1e-3, &Default::default()).unwrap();
        assert_eq!(r.trials, 1);
        assert_eq!(r.candidate, anchor);
    }

    #[test]
    fn seed_above_curvature_accepted_immediately() {
        let a0 = 3.0;
        let c = 5.0;
        let g = Matrix::column(&[c * a0]);
        let r = backtrack_quadratic(quad_increment(c, a0), &g, &Matrix::column(&[a0]), 6.0, &Default::default())
            .unwrap();
        assert_eq!(r.trials, 1);
        assert_eq!(r.step, 6.0);
    }

    #[test]
    fn curvature_eight_from_seed_one() {
        // Loop simulation: t = 1, 2, 4 fail (t < 8), t = 8 is exact.
        let a0 = 1.0;
        let g = Matrix::column(&[8.0 * a0]);
        let r = backtrack_quadratic(quad_increment(8.0, a0), &g, &Matrix::column(&[a0]), 1.0, &Default::default())
            .unwrap();
        assert_eq!((r.step, r.trials), (8.0, 4));
        assert!(r.gap() <= 1e-10);
    }

    #[test]
    fn nan_increment_hits_trial_cap() {
        let g = Matrix::column(&[1.0]);
        let err = backtrack_quadratic(|_, _, _| f64::NAN, &g, &Matrix::column(&[0.0]), 1.0, &Default::default())
            .unwrap_err();
        assert!(matches!(err, Error::Nonconvergence { trials: 60, .. }));
    }

    #[test]
    fn anchor_tangency() {
        let mut rng = Rng::new(2);
        let g = rng.normal_matrix(3, 2, 1.0);
        for t in [1e-3, 1.0, 17.0] {
            assert_eq!(model_increment(&g, &Matrix::zeros(3, 2), t), 0.0);
        }
    }

    #[test]
    fn warm_start_seeds_shrink_and_floor() {
        let mut s = StepSeeds::new(2, 1.0);
        s.record(1, SeedSlot::ForwardWeight, 8.0, 2.0);
        assert_eq!(s.get(1, SeedSlot::ForwardWeight), 4.0);
        s.record(0, SeedSlot::BackwardAct, 1e-12, 2.0);
        assert_eq!(s.get(0, SeedSlot::BackwardAct), 1e-8);
        assert_eq!(s.get(0, SeedSlot::ForwardAct), 1.0);
    }

    #[test]
    fn update_b_examples() {
        let b = Matrix::column(&[0.0]);
        assert_eq!(update_b(&b, &Matrix::column(&[0.0]), 0, 3, 2.0, 1.0, 1), b);
        let nb = update_b(&b, &Matrix::column(&[4.0]), 0, 3, 2.0, 1.0, 1);
        assert_eq!(nb.get(0, 0), -2.0);
        let last = update_b(&b, &Matrix::column(&[4.0]), 2, 3, 2.0, 8.0, 1);
        assert_eq!(last.get(0, 0), -0.5);
    }

    #[test]
    fn relu_solver_examples() {
        let w = ZWeights::equal(1.0);
        assert_eq!(solve_z_scalar(2.0, 2.0, 0.0, w), 2.0);
        assert_eq!(solve_z_scalar(-1.0, 0.5, 0.0, w), -1.0);
        assert!((z_objective(-1.0, -1.0, 0.5, 0.0, w) - 0.25).abs() < 1e-15);
        assert_eq!(solve_z_scalar(-1.0, -0.5, 0.0, w), -1.0);
    }

    #[test]
    fn leaky_solver_examples() {
        let w = ZWeights::equal(1.0);
        assert_eq!(solve_z_scalar(1.3, 1.3, 0.2, w), 1.3);
        let z = solve_z_scalar(-2.0, -1.0, 0.5, w);
        assert!((z - (-2.0 + 0.5 * -1.0) / 1.25).abs() < 1e-15);
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=10_000 {
            let g = -5.0 + k as f64 * 1e-3;
            let o = z_objective(g, -2.0, -1.0, 0.5, w);
            if o < best.0 {
                best = (o, g);
            }
        }
        assert!(z_objective(z, -2.0, -1.0, 0.5, w) <= best.0 + 1e-12);
    }

    #[test]
    fn leaky_limit_matches_relu() {
        let mut rng = Rng::new(9);
        let m = rng.normal_matrix(20, 20, 2.0);
        let t = rng.normal_matrix(20, 20, 2.0);
        let w = ZWeights::equal(0.5);
        let a = solve_z_relu(&m, &t, w);
        let b = solve_z_leaky_relu(&m, &t, 1e-9, w);
        assert!(a.sub(&b).max_abs() < 1e-6);
    }

    fn ce_problem<'a>(y: &'a Matrix, w: &'a Matrix, u: &'a Matrix, rho: f64) -> LastLayerProblem<'a> {
        LastLayerProblem {
            risk: Risk::new(RiskKind::CrossEntropy, Reduction::Sum),
            y,
            w_aff: w,
            u,
            rho,
        }
    }

    #[test]
    fn squared_closed_form() {
        let mut rng = Rng::new(1);
        let y = rng.normal_matrix(3, 4, 1.0);
        let w = rng.normal_matrix(3, 4, 1.0);
        let u = rng.normal_matrix(3, 4, 1.0);
        let rho = 0.7;
        let p = LastLayerProblem {
            risk: Risk::new(RiskKind::Squared, Reduction::Sum),
            y: &y,
            w_aff: &w,
            u: &u,
            rho,
        };
        let r = solve_z_last(&p, &w, &Default::default());
        let expect = y.add(&w.scale(rho)).sub(&u).scale(1.0 / (1.0 + rho));
        assert!(r.z.sub(&expect).max_abs() < 1e-12);
        assert!(r.grad_norm < 1e-12);
    }

    #[test]
    fn stationary_multiplier_returns_affine_target() {
        let mut rng = Rng::new(3);
        let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]);
        let w = rng.normal_matrix(3, 2, 1.0);
        let risk = Risk::new(RiskKind::CrossEntropy, Reduction::Sum);
        let u = risk.gradient(&w, &y).scale(-1.0);
        let p = ce_problem(&y, &w, &u, 2.5);
        let r = solve_z_last(&p, &rng.normal_matrix(3, 2, 1.0), &Default::default());
        assert!(r.converged);
        assert!(r.z.sub(&w).max_abs() < 1e-8);
    }

    #[test]
    fn cross_entropy_first_order_condition() {
        let mut rng = Rng::new(4);
        let y = Matrix::from_rows(&[[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0]]);
        let w = rng.normal_matrix(3, 4, 1.0);
        let u = rng.normal_matrix(3, 4, 0.3);
        let p = ce_problem(&y, &w, &u, 1.0);
        let r = solve_z_last(&p, &w, &Default::default());
        let res = crate::risk::softmax_columns(&r.z).sub(&y).add(&u).add(&r.z.sub(&w).scale(1.0));
        assert!(res.max_abs() < 1e-6);
        assert!(r.objective_trace.windows(2).all(|p| p[1] <= p[0]));
    }

    #[test]
    fn prox_examples() {
        let v = Matrix::column(&[3.0, -0.5]);
        assert_eq!(prox_regularizer(&v, Regularizer::L1(0.0), 0.0), v);
        assert_eq!(prox_regularizer(&v, Regularizer::None, 4.0), v);
        assert_eq!(prox_regularizer(&v, Regularizer::L1(1.0), 1.0), Matrix::column(&[2.0, 0.0]));
        let l2 = prox_regularizer(&v, Regularizer::L2(1.0), 0.5);
        assert_eq!(l2, Matrix::column(&[1.5, -0.25]));
    }

    proptest! {
        #[test]
        fn relu_solution_beats_grid(m in -4.0f64..4.0, t in -4.0f64..4.0, wl in 0.1f64..3.0, wa in 0.1f64..3.0) {
            let w = ZWeights { w_lin: wl, w_act: wa };
            let z = solve_z_scalar(m, t, 0.0, w);
            let best = (0..=10_000)
                .map(|k| z_objective(-5.0 + k as f64 * 1e-3, m, t, 0.0, w))
                .fold(f64::INFINITY, f64::min);
            prop_assert!(z_objective(z, m, t, 0.0, w) <= best + 1e-12);
        }

        #[test]
        fn fista_objective_never_increases(seed in 0u64..50, rho in 0.01f64..5.0) {
            let mut rng = Rng::new(seed);
            let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]);
            let w = rng.normal_matrix(3, 2, 2.0);
            let u = rng.normal_matrix(3, 2, 0.5);
            let p = ce_problem(&y, &w, &u, rho);
            let r = solve_z_last(&p, &rng.normal_matrix(3, 2, 2.0), &Default::default());
            prop_assert!(r.objective_trace.windows(2).all(|p| p[1] <= p[0]));
        }
    }
}
