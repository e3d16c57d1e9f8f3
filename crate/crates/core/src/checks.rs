//! Numerical self-checks: finite-difference gradient checks, brute-force
//! oracles for the closed-form subproblems and a short descent run. Shared
//! by the `selfcheck` command and the test suites.

use std::time::Instant;

use crate::admm::{train, AdmmConfig};
use crate::baselines::backprop_grads;
use crate::diagnostics::stationarity_residual;
use crate::error::Result;
use crate::gcn::{self, GcnBlock, GcnConfig, GcnState, Graph};
use crate::matrix::Matrix;
use crate::mlp::{self, Activation, Block, Dataset, MlpArchitecture, MlpState, Regularizer};
use crate::risk::{Reduction, RiskKind};
use crate::rng::Rng;
use crate::solvers::{
    prox_regularizer, solve_z_last, solve_z_relu, update_b, z_objective, FistaOptions,
    LastLayerProblem, ZWeights,
};
use crate::synthetic;

pub type MlpGradFn = dyn Fn(&MlpState, Activation, &Matrix, Block) -> Result<Matrix>;
pub type GcnGradFn = dyn Fn(&GcnState, Activation, &Matrix, GcnBlock) -> Result<Matrix>;

const FD_STEP: f64 = 1e-5;

/// Keeps entries at least `gap` away from the activation kink.
fn off_kink(m: &Matrix, gap: f64) -> Matrix {
    m.map(|v| if v.abs() < gap { v + gap.copysign(v) } else { v })
}

fn one_hot_cols(k: usize, m: usize, rng: &mut Rng) -> Matrix {
    let mut y = Matrix::zeros(k, m);
    for j in 0..m {
        y.set(rng.below(k), j, 1.0);
    }
    y
}

/// A random 3-layer problem with dimensions at most 8 and an arbitrary
/// (infeasible) state.
pub fn random_mlp_problem(seed: u64, kind: RiskKind) -> (MlpArchitecture, Dataset, MlpState) {
    let mut rng = Rng::new(seed);
    let dims: Vec<usize> = (0..4).map(|_| 2 + rng.below(7)).collect();
    let m = 2 + rng.below(5);
    let mut arch = MlpArchitecture::new(dims.clone());
    arch.risk = kind;
    let x = rng.normal_matrix(dims[0], m, 1.0);
    let y = match kind {
        RiskKind::CrossEntropy => one_hot_cols(dims[3], m, &mut rng),
        RiskKind::Squared => rng.normal_matrix(dims[3], m, 1.0),
    };
    let n = 3;
    let w = (0..n).map(|i| rng.normal_matrix(dims[i + 1], dims[i], 1.0)).collect();
    let b = (0..n).map(|i| rng.normal_matrix(dims[i + 1], 1, 1.0)).collect();
    let z = (0..n).map(|i| off_kink(&rng.normal_matrix(dims[i + 1], m, 1.0), 0.05)).collect();
    let a = (0..n - 1).map(|i| rng.normal_matrix(dims[i + 1], m, 1.0)).collect();
    let u = rng.normal_matrix(dims[3], m, 1.0);
    let rho = rng.uniform(0.5, 2.0);
    let nu = rng.uniform(0.5, 2.0);
    let data = Dataset::new(x, y).expect("matching columns");
    (arch, data, MlpState { w, b, z, a, u, rho, nu })
}

fn lagrangian_block_grad(
    arch: &MlpArchitecture,
    data: &Dataset,
    state: &MlpState,
    block: Block,
    grad: &MlpGradFn,
) -> Result<Matrix> {
    let mut g = grad(state, arch.activation, &data.x, block)?;
    if block == Block::Z(state.n_layers() - 1) {
        g.axpy(1.0, &arch.risk_fn().gradient(&state.z[state.n_layers() - 1], &data.y));
    }
    Ok(g)
}

fn rel_err(g: &Matrix, fd: &Matrix) -> f64 {
    let scale = g.frob().max(fd.frob()).max(1e-8);
    g.sub(fd).frob() / scale
}

fn central_difference(x: &Matrix, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut fd = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let v = x.get(r, c);
            probe.set(r, c, v + FD_STEP);
            let up = f(&probe);
            probe.set(r, c, v - FD_STEP);
            let down = f(&probe);
            probe.set(r, c, v);
            fd.set(r, c, (up - down) / (2.0 * FD_STEP));
        }
    }
    fd
}

/// Worst relative error between `grad` (plus the risk gradient on the
/// output block) and central differences of `L_rho`, over every block.
pub fn mlp_gradient_error(seed: u64, kind: RiskKind, grad: &MlpGradFn) -> Result<f64> {
    let (arch, data, state) = random_mlp_problem(seed, kind);
    let n = state.n_layers();
    let mut blocks = Vec::new();
    for i in 0..n {
        blocks.extend([Block::W(i), Block::B(i), Block::Z(i)]);
        if i + 1 < n {
            blocks.push(Block::A(i));
        }
    }
    let mut worst: f64 = 0.0;
    for block in blocks {
        let g = lagrangian_block_grad(&arch, &data, &state, block, grad)?;
        let mut probe = state.clone();
        let fd = central_difference(state.block(block)?, |v| {
            *probe.block_mut(block).expect("valid block") = v.clone();
            mlp::lagrangian(&probe, &arch, &data)
        });
        worst = worst.max(rel_err(&g, &fd));
    }
    Ok(worst)
}

/// A random graph with at most 12 nodes and an arbitrary GCN state.
pub fn random_gcn_problem(seed: u64) -> (Graph, GcnConfig, GcnState) {
    let mut rng = Rng::new(seed);
    loop {
        let n = 4 + rng.below(9);
        let c0 = 2 + rng.below(3);
        let hidden = 2 + rng.below(4);
        let k = 2 + rng.below(2);
        let mut adj = Matrix::zeros(n, n);
        for i in 0..n {
            for j in i + 1..n {
                if rng.bernoulli(0.3) {
                    adj.set(i, j, 1.0);
                    adj.set(j, i, 1.0);
                }
            }
        }
        let features = rng.normal_matrix(n, c0, 1.0);
        let mut labels = Matrix::zeros(n, k);
        for i in 0..n {
            labels.set(i, rng.below(k), 1.0);
        }
        let train: Vec<bool> = (0..n).map(|i| i == 0 || rng.bernoulli(0.5)).collect();
        let test = train.iter().map(|t| !t).collect();
        let graph = Graph::new(adj, features, labels, train, test).expect("valid random graph");
        let cfg = GcnConfig {
            hidden_dims: vec![hidden],
            rho: rng.uniform(0.5, 2.0),
            mu: rng.uniform(0.5, 2.0),
            ..GcnConfig::default()
        };
        let a_norm = gcn::normalize_adjacency(&graph.adjacency);
        let w = vec![rng.normal_matrix(c0, hidden, 1.0), rng.normal_matrix(hidden, k, 1.0)];
        let z = vec![rng.normal_matrix(n, hidden, 1.0), rng.normal_matrix(n, k, 1.0)];
        let u = rng.normal_matrix(n, k, 1.0);
        let state = GcnState { w, z, u, a_norm, rho: cfg.rho, mu: cfg.mu };
        // central differences are meaningless across the ReLU kink
        if state.pre(0, &graph.features).as_slice().iter().all(|v| v.abs() > 1e-3) {
            return (graph, cfg, state);
        }
    }
}

/// Worst relative error of `grad` (plus the masked risk gradient on the
/// output block) against central differences of the GCN Lagrangian.
pub fn gcn_gradient_error(seed: u64, grad: &GcnGradFn) -> Result<f64> {
    let (graph, cfg, state) = random_gcn_problem(seed);
    let risk = cfg.risk(&graph);
    let x = &graph.features;
    let act = cfg.activation;
    let last = state.n_layers() - 1;
    let lag = |s: &GcnState| risk.value(&s.z[last], &graph.labels) + gcn::psi(s, act, x);
    let mut worst: f64 = 0.0;
    for l in 0..state.n_layers() {
        for block in [GcnBlock::W(l), GcnBlock::Z(l)] {
            let mut g = grad(&state, act, x, block)?;
            if block == GcnBlock::Z(last) {
                g.axpy(1.0, &risk.gradient(&state.z[last], &graph.labels));
            }
            let mut probe = state.clone();
            let fd = central_difference(state.block(block)?, |v| {
                *probe.block_mut(block).expect("valid block") = v.clone();
                lag(&probe)
            });
            worst = worst.max(rel_err(&g, &fd));
        }
    }
    Ok(worst)
}

/// Worst relative error of the backpropagation gradients (weights and
/// biases) against central differences of the plain training loss.
pub fn backprop_gradient_error(seed: u64, kind: RiskKind) -> f64 {
    let (arch, data, state) = random_mlp_problem(seed, kind);
    let (_, _, gw, gb) = backprop_grads(&state.w, &state.b, &arch, &data);
    let loss = |w: &[Matrix], b: &[Matrix]| backprop_grads(w, b, &arch, &data).0;
    let mut worst: f64 = 0.0;
    for i in 0..state.w.len() {
        let mut w = state.w.clone();
        let fd = central_difference(&state.w[i], |v| {
            w[i] = v.clone();
            loss(&w, &state.b)
        });
        worst = worst.max(rel_err(&gw[i], &fd));
        let mut b = state.b.clone();
        let fd = central_difference(&state.b[i], |v| {
            b[i] = v.clone();
            loss(&state.w, &b)
        });
        worst = worst.max(rel_err(&gb[i], &fd));
    }
    worst
}

fn grid(lo: f64, hi: f64, h: f64) -> impl Iterator<Item = f64> {
    let n = ((hi - lo) / h).round() as usize;
    (0..=n).map(move |k| lo + k as f64 * h)
}

/// Largest amount by which the exact ReLU subproblem solution loses to a
/// 1e-3 grid over `[-5, 5]` (negative means the solver always wins).
pub fn relu_grid_shortfall(instances: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..instances {
        let m = rng.uniform(-4.0, 4.0);
        let t = rng.uniform(-4.0, 4.0);
        let w = ZWeights { w_lin: rng.uniform(0.1, 3.0), w_act: rng.uniform(0.1, 3.0) };
        let z = solve_z_relu(&Matrix::column(&[m]), &Matrix::column(&[t]), w).get(0, 0);
        let mine = z_objective(z, m, t, 0.0, w);
        let best = grid(-5.0, 5.0, 1e-3).map(|g| z_objective(g, m, t, 0.0, w)).fold(f64::INFINITY, f64::min);
        worst = worst.max(mine - best);
    }
    worst
}

/// Largest amount by which the closed-form bias update loses to a 1e-3 grid
/// search of `L_rho` over a scalar bias, for hidden and output layers.
pub fn bias_grid_shortfall(instances: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..instances {
        let mut dims = vec![3, 1, 2, 1];
        let layer = k % 3;
        dims[layer + 1] = 1;
        let mut arch = MlpArchitecture::new(dims.clone());
        arch.risk = RiskKind::Squared;
        let m = 2 + rng.below(5);
        let data = Dataset::new(rng.normal_matrix(dims[0], m, 1.0), rng.normal_matrix(dims[3], m, 1.0)).expect("columns");
        let state = MlpState {
            w: (0..3).map(|i| rng.normal_matrix(dims[i + 1], dims[i], 1.0)).collect(),
            b: (0..3).map(|i| rng.normal_matrix(dims[i + 1], 1, 1.0)).collect(),
            z: (0..3).map(|i| rng.normal_matrix(dims[i + 1], m, 1.0)).collect(),
            a: (0..2).map(|i| rng.normal_matrix(dims[i + 1], m, 1.0)).collect(),
            u: rng.normal_matrix(dims[3], m, 1.0),
            rho: rng.uniform(0.5, 2.0),
            nu: rng.uniform(0.5, 2.0),
        };
        let g = mlp::grad_phi_block(&state, arch.activation, &data.x, Block::B(layer)).expect("valid block");
        let anchor = state.b[layer].clone();
        let nb = update_b(&anchor, &g, layer, 3, state.nu, state.rho, m);
        let eval = |v: f64| {
            let mut s = state.clone();
            s.b[layer].set(0, 0, v);
            mlp::lagrangian(&s, &arch, &data)
        };
        let mine = eval(nb.get(0, 0));
        let c = anchor.get(0, 0);
        let best = grid(c - 5.0, c + 5.0, 1e-3).map(eval).fold(f64::INFINITY, f64::min);
        worst = worst.max(mine - best);
    }
    worst
}

/// Largest amount by which the proximal map loses to a 1e-3 grid over
/// `[-6, 6]`, for both regularizers.
pub fn prox_grid_shortfall(instances: usize, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut worst = f64::NEG_INFINITY;
    for k in 0..instances {
        let v = rng.uniform(-4.0, 4.0);
        let s = rng.uniform(0.0, 2.0);
        let (reg, pen): (Regularizer, Box<dyn Fn(f64) -> f64>) = if k % 2 == 0 {
            (Regularizer::L1(1.0), Box::new(move |x: f64| s * x.abs()))
        } else {
            (Regularizer::L2(1.0), Box::new(move |x: f64| s * x * x))
        };
        let obj = |x: f64| 0.5 * (x - v) * (x - v) + pen(x);
        let p = prox_regularizer(&Matrix::column(&[v]), reg, s).get(0, 0);
        let best = grid(-6.0, 6.0, 1e-3).map(&obj).fold(f64::INFINITY, f64::min);
        worst = worst.max(obj(p) - best);
    }
    worst
}

/// `|grad R(z) + u|_inf` after solving a random output-score subproblem
/// from scratch, where `u` is the multiplier the dual step would produce.
pub fn last_layer_stationarity(seed: u64, kind: RiskKind) -> f64 {
    let mut rng = Rng::new(seed);
    let (k, m) = (2 + rng.below(4), 2 + rng.below(6));
    let y = match kind {
        RiskKind::CrossEntropy => one_hot_cols(k, m, &mut rng),
        RiskKind::Squared => rng.normal_matrix(k, m, 1.0),
    };
    let risk = crate::risk::Risk::new(kind, Reduction::Sum);
    let w_aff = rng.normal_matrix(k, m, 1.0);
    let u = rng.normal_matrix(k, m, 1.0);
    let rho = rng.uniform(0.5, 4.0);
    let problem = LastLayerProblem { risk, y: &y, w_aff: &w_aff, u: &u, rho };
    let z = solve_z_last(&problem, &w_aff, &FistaOptions { tol: 1e-10, max_iter: 10_000 }).z;
    let mut next_u = u.clone();
    next_u.axpy(rho, &z.sub(&w_aff));
    stationarity_residual(&risk, &z, &y, &next_u)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales every block gradient by `1 + 1e-3`.
    Gradient,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn outcome(name: &'static str, start: Instant, value: f64, limit: f64, what: &str) -> CheckOutcome {
    CheckOutcome {
        name,
        passed: value.is_finite() && value < limit,
        detail: format!("{what} {value:.3e} (limit {limit:.0e})"),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Runs the built-in suite. `quick` trims instance counts and run lengths
/// so the whole table finishes in well under a second in release builds.
pub fn run_selfcheck(quick: bool, fault: Option<Fault>) -> Vec<CheckOutcome> {
    let faulty = move |s: &MlpState, act: Activation, x: &Matrix, b: Block| {
        let g = mlp::grad_phi_block(s, act, x, b)?;
        Ok(if fault == Some(Fault::Gradient) { g.scale(1.0 + 1e-3) } else { g })
    };
    let faulty_gcn = move |s: &GcnState, act: Activation, x: &Matrix, b: GcnBlock| {
        let g = gcn::grad_psi_block(s, act, x, b)?;
        Ok(if fault == Some(Fault::Gradient) { g.scale(1.0 + 1e-3) } else { g })
    };
    let (n_mlp, n_gcn, n_grid, epochs) = if quick { (4, 2, 50, 30) } else { (20, 10, 1000, 200) };
    let mut out = Vec::new();

    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for s in 0..n_mlp {
        let kind = if s % 2 == 0 { RiskKind::CrossEntropy } else { RiskKind::Squared };
        worst = worst.max(mlp_gradient_error(s as u64, kind, &faulty).unwrap_or(f64::INFINITY));
    }
    out.push(outcome("mlp block gradients", t, worst, 1e-5, "max rel err"));

    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for s in 0..n_gcn {
        worst = worst.max(gcn_gradient_error(s as u64, &faulty_gcn).unwrap_or(f64::INFINITY));
    }
    out.push(outcome("gcn block gradients", t, worst, 1e-5, "max rel err"));

    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for s in 0..n_mlp.min(6) {
        worst = worst.max(backprop_gradient_error(s as u64, RiskKind::CrossEntropy));
    }
    out.push(outcome("backprop gradients", t, worst, 1e-5, "max rel err"));

    let t = Instant::now();
    out.push(outcome("relu subproblem", t, relu_grid_shortfall(n_grid, 11), 1e-4, "worst loss to grid"));
    let t = Instant::now();
    out.push(outcome("bias update", t, bias_grid_shortfall(n_grid.min(30), 12), 1e-4, "worst loss to grid"));
    let t = Instant::now();
    out.push(outcome("proximal map", t, prox_grid_shortfall(n_grid, 13), 1e-4, "worst loss to grid"));

    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for s in 0..n_mlp {
        worst = worst.max(last_layer_stationarity(s as u64, RiskKind::CrossEntropy));
    }
    out.push(outcome("output stationarity", t, worst, 1e-5, "max |grad R + u|"));

    let t = Instant::now();
    out.push(descent_check(epochs, t));
    out
}

fn descent_check(epochs: usize, start: Instant) -> CheckOutcome {
    let data = synthetic::separable_task(1);
    let arch = MlpArchitecture::new(synthetic::SEPARABLE_LAYERS.to_vec());
    let cfg = AdmmConfig { rho: 4.0, nu: 1.0, epochs, seed: 0, audit: true, ..Default::default() };
    let (passed, detail) = match train(&arch, &data, None, &cfg, &mut |_| {}) {
        Ok(run) => {
            let mut prev = run.initial_lagrangian;
            let mut rises = 0;
            let mut unmet = 0;
            let mut violations = 0;
            for t in &run.traces {
                rises += usize::from(t.lagrangian > prev + 1e-9);
                unmet += usize::from(!t.descent.satisfied);
                violations += t.certificate_violations(1e-10);
                prev = t.lagrangian;
            }
            let ok = run.aborted.is_none() && rises == 0 && unmet == 0 && violations == 0 && run.ck.is_valid();
            (ok, format!("{rises} rises, {unmet} unmet, {violations} certificate violations"))
        }
        Err(e) => (false, e.to_string()),
    };
    CheckOutcome { name: "sufficient descent", passed, detail, seconds: start.elapsed().as_secs_f64() }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_fault_is_caught() {
        let ok = run_selfcheck(true, None);
        assert!(ok.iter().all(|c| c.passed), "{ok:#?}");
        let bad = run_selfcheck(true, Some(Fault::Gradient));
        assert!(!bad[0].passed && !bad[1].passed);
    }

    #[test]
    fn squared_output_stationarity_is_exact() {
        for s in 0..5 {
            assert!(last_layer_stationarity(s, RiskKind::Squared) < 1e-12);
        }
    }
}
