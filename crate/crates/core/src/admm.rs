//! The dlADMM iteration for MLPs.
//!
//! Each iteration runs a backward sweep over the layers (last to first,
//! updating `a`, `z`, `b`, `W` in that order), then a forward sweep (first to
//! last, `W`, `b`, `z`, `a`), then the dual step `u += rho * r`. Every update
//! sees the newest value of every other block, and the forward sweep anchors
//! its quadratic models at the values left by the backward sweep.
//!
//! The output layer has no activation block; its scores are solved by
//! [`solve_z_last`] and its bias uses the `rho`-weighted closed form.

use std::time::Instant;

use crate::diagnostics::{self, CkSeries, DescentReport};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mlp::{self, Block, Dataset, MlpArchitecture, MlpState};
use crate::risk::{accuracy, Layout};
use crate::rng::Rng;
use crate::solvers::{
    backtrack_proximal, backtrack_quadratic, solve_z_last, update_b, BacktrackOptions,
    BacktrackResult, FistaOptions, LastLayerProblem, SeedSlot, StepSeeds, ZWeights,
};

#[derive(Clone, Debug, PartialEq)]
pub struct AdmmConfig {
    pub rho: f64,
    pub nu: f64,
    pub epochs: usize,
    pub seed: u64,
    pub backtrack: BacktrackOptions,
    pub fista: FistaOptions,
    /// Step parameter tried first at each backtracked block in iteration 1.
    pub initial_step: f64,
    /// Re-check every accepted certificate with full evaluations of `phi`.
    pub audit: bool,
    /// Stop once `|r| < 1e-6` and the Lagrangian drop is below `1e-10` for
    /// five consecutive iterations.
    pub early_stop: bool,
    /// Fill `wall_time_s` in the traces. Off by default so that traces are
    /// reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig {
            rho: 1.0,
            nu: 1.0,
            epochs: 200,
            seed: 0,
            backtrack: BacktrackOptions::default(),
            fista: FistaOptions::default(),
            initial_step: 1.0,
            audit: false,
            early_stop: false,
            record_wall_time: false,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.nu > 0.0) {
            return Err(Error::Argument("rho and nu must be positive".into()));
        }
        if !(self.initial_step > 0.0) {
            return Err(Error::Argument("initial step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Backward,
    Forward,
}

/// Callback run immediately before each block update with the working state.
pub type Observer<'o> = dyn FnMut(Phase, Block, &MlpState) + 'o;

/// One accepted backtracking step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub phase: Phase,
    pub block: Block,
    pub step: f64,
    pub trials: usize,
    /// `phi(candidate) - Q(candidate; step)` from the fast increment.
    pub gap: f64,
    /// The same gap from two full evaluations of `phi`, when auditing.
    pub audited_gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationTrace {
    pub iter: usize,
    pub objective: f64,
    pub lagrangian: f64,
    pub residual_l2: f64,
    pub descent: DescentReport,
    pub ck: f64,
    pub stationarity_residual: f64,
    pub fista_converged: bool,
    pub steps: Vec<StepRecord>,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    pub wall_time_s: f64,
}

impl IterationTrace {
    /// Accepted certificates whose audited gap exceeds `tol`.
    pub fn certificate_violations(&self, tol: f64) -> usize {
        self.steps
            .iter()
            .filter(|s| s.audited_gap.map_or(s.gap, |g| g.max(s.gap)) > tol)
            .count()
    }
}

#[derive(Debug)]
pub struct TrainRun {
    pub state: MlpState,
    pub traces: Vec<IterationTrace>,
    pub ck: CkSeries,
    /// Set when training stopped early on an error; the traces up to that
    /// point are kept.
    pub aborted: Option<Error>,
    /// `L_rho` at the initial point.
    pub initial_lagrangian: f64,
}

/// Squared moves of the blocks that enter the sufficient-descent bound.
#[derive(Clone, Copy, Debug, Default)]
struct Moves {
    sum: f64,
}

/// The working state of one iteration plus cached affine maps
/// `lin[i] = W_i a_{i-1} + b_i`.
pub struct Sweeper<'s> {
    pub arch: &'s MlpArchitecture,
    pub data: &'s Dataset,
    pub cfg: &'s AdmmConfig,
    pub state: MlpState,
    lin: Vec<Matrix>,
    pub seeds: StepSeeds,
    moves: Moves,
    steps: Vec<StepRecord>,
    fista_converged: bool,
}

impl<'s> Sweeper<'s> {
    pub fn new(arch: &'s MlpArchitecture, data: &'s Dataset, cfg: &'s AdmmConfig, state: MlpState) -> Self {
        let lin = (0..state.n_layers()).map(|i| state.affine(i, &data.x)).collect();
        let seeds = StepSeeds::new(state.n_layers(), cfg.initial_step);
        Sweeper {
            arch,
            data,
            cfg,
            state,
            lin,
            seeds,
            moves: Moves::default(),
            steps: Vec::new(),
            fista_converged: true,
        }
    }

    fn last(&self) -> usize {
        self.state.n_layers() - 1
    }

    fn input(&self, i: usize) -> &Matrix {
        self.state.input(i, &self.data.x)
    }

    /// Penalty weight of layer `i`'s affine residual.
    fn weight(&self, i: usize) -> f64 {
        if i == self.last() {
            self.state.rho
        } else {
            self.state.nu
        }
    }

    /// `nu * p_i` for hidden layers, `u + rho * r` for the last.
    fn pull(&self, i: usize) -> Matrix {
        let p = self.state.z[i].sub(&self.lin[i]);
        if i == self.last() {
            let mut e = self.state.u.clone();
            e.axpy(self.state.rho, &p);
            e
        } else {
            p.scale(self.state.nu)
        }
    }

    fn audit(&self, block: Block, candidate: &Matrix) -> Option<f64> {
        if !self.cfg.audit {
            return None;
        }
        let act = self.arch.activation;
        let mut trial = self.state.clone();
        *trial.block_mut(block).expect("valid block") = candidate.clone();
        let before = mlp::phi(&self.state, act, &self.data.x);
        let after = mlp::phi(&trial, act, &self.data.x);
        Some(after - before)
    }

    fn record(&mut self, phase: Phase, block: Block, res: &BacktrackResult, full_inc: Option<f64>) {
        self.steps.push(StepRecord {
            phase,
            block,
            step: res.step,
            trials: res.trials,
            gap: res.gap(),
            audited_gap: full_inc.map(|inc| inc - res.model_increment),
        });
    }

    /// Backtracked update of the hidden activation `a_i`.
    pub fn update_a(&mut self, i: usize, phase: Phase) -> Result<()> {
        let nu = self.state.nu;
        let c_next = self.weight(i + 1);
        let e_next = self.pull(i + 1);
        let q = self.state.a[i].sub(&self.arch.activation.forward(&self.state.z[i]));
        let mut g = q.scale(nu);
        g.axpy(-1.0, &self.state.w[i + 1].t_matmul(&e_next)?);
        let wg = self.state.w[i + 1].matmul(&g)?;
        let ew = e_next.dot(&wg);
        let ww = wg.frob_sq();
        let slot = match phase {
            Phase::Backward => SeedSlot::BackwardAct,
            Phase::Forward => SeedSlot::ForwardAct,
        };
        let res = backtrack_quadratic(
            |_, d, t| {
                // own penalty moves by delta; the next layer's residual by -W g / t
                nu * q.dot(d) + 0.5 * nu * d.frob_sq() + ew / t + 0.5 * c_next * ww / (t * t)
            },
            &g,
            &self.state.a[i],
            self.seeds.get(i, slot),
            &self.cfg.backtrack,
        )?;
        self.seeds.record(i, slot, res.step, self.cfg.backtrack.growth);
        let full = self.audit(Block::A(i), &res.candidate);
        self.record(phase, Block::A(i), &res, full);
        self.moves.sum += res.candidate.dist_sq(&self.state.a[i]);
        self.lin[i + 1].axpy(-1.0 / res.step, &wg);
        self.state.a[i] = res.candidate;
        Ok(())
    }

    /// Exact update of a hidden pre-activation `z_i`.
    pub fn update_z_hidden(&mut self, i: usize) {
        let w = ZWeights::equal(self.state.nu / 2.0);
        let slope = match self.arch.activation {
            mlp::Activation::Relu => 0.0,
            mlp::Activation::LeakyRelu(s) => s,
        };
        self.state.z[i] = self.lin[i].zip_map(&self.state.a[i], |m, t| {
            crate::solvers::solve_z_scalar(m, t, slope, w)
        });
    }

    /// Output-score update by the accelerated solver.
    pub fn update_z_last(&mut self) {
        let last = self.last();
        let risk = self.arch.risk_fn();
        let problem = LastLayerProblem {
            risk,
            y: &self.data.y,
            w_aff: &self.lin[last],
            u: &self.state.u,
            rho: self.state.rho,
        };
        let sol = solve_z_last(&problem, &self.state.z[last], &self.cfg.fista);
        self.fista_converged &= sol.converged;
        self.moves.sum += sol.z.dist_sq(&self.state.z[last]);
        self.state.z[last] = sol.z;
    }

    pub fn update_bias(&mut self, i: usize) {
        let grad = self.pull(i).row_sums().scale(-1.0);
        let n = self.state.n_layers();
        let m = self.data.n_samples();
        let nb = update_b(&self.state.b[i], &grad, i, n, self.state.nu, self.state.rho, m);
        let db = nb.sub(&self.state.b[i]);
        self.moves.sum += db.frob_sq();
        self.lin[i] = self.lin[i].add_column(&db);
        self.state.b[i] = nb;
    }

    /// Backtracked (proximal, when a regularizer is set) update of `W_i`.
    pub fn update_w(&mut self, i: usize, phase: Phase) -> Result<()> {
        let c = self.weight(i);
        let e = self.pull(i);
        let g = e.matmul_t(self.input(i))?.scale(-1.0);
        let slot = match phase {
            Phase::Backward => SeedSlot::BackwardWeight,
            Phase::Forward => SeedSlot::ForwardWeight,
        };
        let seed = self.seeds.get(i, slot);
        let reg = self.arch.regularizer;
        let input = self.state.input(i, &self.data.x);
        let anchor = &self.state.w[i];
        let (res, shift) = if reg.is_zero() {
            let ga = g.matmul(input)?;
            let eg = e.dot(&ga);
            let gg = ga.frob_sq();
            let res = backtrack_quadratic(
                |_, _, t| eg / t + 0.5 * c * gg / (t * t),
                &g,
                anchor,
                seed,
                &self.cfg.backtrack,
            )?;
            let shift = ga.scale(-1.0 / res.step);
            (res, shift)
        } else {
            let res = backtrack_proximal(
                |_, d, _| {
                    let da = d.matmul(input).expect("shapes chain");
                    -e.dot(&da) + 0.5 * c * da.frob_sq()
                },
                &g,
                anchor,
                seed,
                reg,
                &self.cfg.backtrack,
            )?;
            let shift = res.candidate.sub(anchor).matmul(input)?;
            (res, shift)
        };
        self.seeds.record(i, slot, res.step, self.cfg.backtrack.growth);
        let full = self.audit(Block::W(i), &res.candidate);
        self.record(phase, Block::W(i), &res, full);
        self.moves.sum += res.candidate.dist_sq(&self.state.w[i]);
        self.lin[i].axpy(1.0, &shift);
        self.state.w[i] = res.candidate;
        Ok(())
    }

    /// Layers from last to first: `a`, `z`, `b`, `W`.
    pub fn backward_sweep(&mut self, mut observer: Option<&mut Observer<'_>>) -> Result<()> {
        let last = self.last();
        for i in (0..=last).rev() {
            let mut notify = |s: &Self, b: Block| {
                if let Some(o) = observer.as_mut() {
                    o(Phase::Backward, b, &s.state);
                }
            };
            if i == last {
                notify(self, Block::Z(i));
                self.update_z_last();
            } else {
                notify(self, Block::A(i));
                self.update_a(i, Phase::Backward)?;
                notify(self, Block::Z(i));
                self.update_z_hidden(i);
            }
            notify(self, Block::B(i));
            self.update_bias(i);
            notify(self, Block::W(i));
            self.update_w(i, Phase::Backward)?;
        }
        Ok(())
    }

    /// Layers from first to last: `W`, `b`, `z`, `a`.
    pub fn forward_sweep(&mut self, mut observer: Option<&mut Observer<'_>>) -> Result<()> {
        let last = self.last();
        for i in 0..=last {
            let mut notify = |s: &Self, b: Block| {
                if let Some(o) = observer.as_mut() {
                    o(Phase::Forward, b, &s.state);
                }
            };
            notify(self, Block::W(i));
            self.update_w(i, Phase::Forward)?;
            notify(self, Block::B(i));
            self.update_bias(i);
            notify(self, Block::Z(i));
            if i == last {
                self.update_z_last();
            } else {
                self.update_z_hidden(i);
                notify(self, Block::A(i));
                self.update_a(i, Phase::Forward)?;
            }
        }
        Ok(())
    }

    /// Recomputes the cached affine maps exactly from the current blocks.
    pub fn refresh(&mut self) {
        for i in 0..self.state.n_layers() {
            self.lin[i] = self.state.affine(i, &self.data.x);
        }
    }

    /// `r = z_L - W_L a_{L-1} - b_L` from the cache, then `u += rho r`.
    pub fn dual_step(&mut self) -> Matrix {
        let last = self.last();
        let r = self.state.z[last].sub(&self.lin[last]);
        self.state.u = dual_update(&self.state.u, &r, self.state.rho);
        r
    }

    /// `L_rho` and `F` from the cached affine maps.
    pub fn values(&self) -> (f64, f64) {
        let st = &self.state;
        let last = self.last();
        let mut hidden = 0.0;
        for i in 0..last {
            hidden += st.z[i].dist_sq(&self.lin[i])
                + st.a[i].dist_sq(&self.arch.activation.forward(&st.z[i]));
        }
        let r = st.z[last].sub(&self.lin[last]);
        let base = mlp::risk(self.arch, &st.z[last], &self.data.y)
            + mlp::regularization(self.arch, st)
            + 0.5 * st.nu * hidden;
        (base + st.u.dot(&r) + 0.5 * st.rho * r.frob_sq(), base)
    }

    fn take_iteration_stats(&mut self) -> (f64, Vec<StepRecord>, bool) {
        let m = std::mem::take(&mut self.moves).sum;
        let s = std::mem::take(&mut self.steps);
        let f = std::mem::replace(&mut self.fista_converged, true);
        (m, s, f)
    }
}

/// `u + rho r`.
pub fn dual_update(u: &Matrix, r: &Matrix, rho: f64) -> Matrix {
    let mut out = u.clone();
    out.axpy(rho, r);
    out
}

/// Initializes by a forward pass and trains for `cfg.epochs` iterations.
pub fn train(
    arch: &MlpArchitecture,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &AdmmConfig,
    sink: &mut dyn FnMut(&IterationTrace),
) -> Result<TrainRun> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let state = mlp::forward_init(arch, data, cfg.rho, cfg.nu, &mut rng)?;
    train_from(arch, data, test, cfg, state, sink, None)
}

/// Trains from a given state. The observer, if any, sees every block update.
pub fn train_from(
    arch: &MlpArchitecture,
    data: &Dataset,
    test: Option<&Dataset>,
    cfg: &AdmmConfig,
    state: MlpState,
    sink: &mut dyn FnMut(&IterationTrace),
    mut observer: Option<&mut Observer<'_>>,
) -> Result<TrainRun> {
    cfg.validate()?;
    let mut sw = Sweeper::new(arch, data, cfg, state);
    let (l0, _) = sw.values();
    let h = diagnostics::risk_lipschitz_bound(arch.risk);
    let risk = arch.risk_fn();
    let mut prev_l = l0;
    let mut traces = Vec::with_capacity(cfg.epochs);
    let mut ck = CkSeries::default();
    let mut quiet = 0usize;
    let start = Instant::now();
    let mut aborted = None;
    for iter in 1..=cfg.epochs {
        let swept = sw
            .backward_sweep(observer.as_deref_mut())
            .and_then(|_| sw.forward_sweep(observer.as_deref_mut()));
        if let Err(e) = swept {
            aborted = Some(e);
            break;
        }
        sw.refresh();
        let r = sw.dual_step();
        let (lag, obj) = sw.values();
        if !lag.is_finite() || !sw.state.is_finite() {
            aborted = Some(Error::Divergence {
                iter,
                quantity: "augmented Lagrangian",
            });
            break;
        }
        let (moves, steps, fista_ok) = sw.take_iteration_stats();
        let min_step = steps.iter().map(|s| s.step).fold(f64::INFINITY, f64::min);
        let descent = diagnostics::check_sufficient_descent(
            iter, prev_l, lag, moves, min_step, cfg.rho, cfg.nu, h,
        );
        diagnostics::ck_update(&mut ck, moves);
        let last = sw.state.n_layers() - 1;
        let stationarity = diagnostics::stationarity_residual(&risk, &sw.state.z[last], &data.y, &sw.state.u);
        let act = arch.activation;
        let train_acc = accuracy(&sw.state.predict(act, &data.x), &data.y, Layout::Columns, None);
        let test_acc = test.map(|t| accuracy(&sw.state.predict(act, &t.x), &t.y, Layout::Columns, None));
        let residual_l2 = r.frob();
        let trace = IterationTrace {
            iter,
            objective: obj,
            lagrangian: lag,
            residual_l2,
            descent,
            ck: ck.last().unwrap_or(0.0),
            stationarity_residual: stationarity,
            fista_converged: fista_ok,
            steps,
            train_acc,
            test_acc,
            wall_time_s: if cfg.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        sink(&trace);
        traces.push(trace);
        if cfg.early_stop {
            if residual_l2 < 1e-6 && (prev_l - lag).abs() < 1e-10 {
                quiet += 1;
            } else {
                quiet = 0;
            }
        }
        prev_l = lag;
        if quiet >= 5 {
            break;
        }
    }
    Ok(TrainRun {
        state: sw.state,
        traces,
        ck,
        aborted,
        initial_lagrangian: l0,
    })
}
