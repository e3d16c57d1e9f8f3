//! dlADMM for graph convolutional networks.
//!
//! Layer `l` (0-based) maps `Z_{l-1}` to `M_l = A_norm Z_{l-1} W_l`, with
//! `Z_{-1}` the node features. Hidden layers keep `Z_l ~ f(M_l)` as a
//! `mu`-weighted penalty; the last layer enforces `Z_L = M_L` through the
//! multiplier `U` and penalty `rho`:
//!
//! ```text
//! psi = mu/2 sum_{l<L} |Z_l - f(M_l)|^2 + <U, Z_L - M_L> + rho/2 |Z_L - M_L|^2
//! ```
//!
//! Rows are nodes. The risk is cross-entropy over the training nodes only.
//! There are no biases and no weight regularizer.

use std::time::Instant;

use crate::diagnostics::{self, CkSeries, DescentReport};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mlp::Activation;
use crate::risk::{accuracy, Layout, Reduction, Risk, RiskKind};
use crate::rng::Rng;
use crate::solvers::{
    backtrack_quadratic, solve_z_last, BacktrackOptions, BacktrackResult, FistaOptions,
    LastLayerProblem, SeedSlot, StepSeeds,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Graph {
    /// Symmetric 0/1 matrix with zero diagonal.
    pub adjacency: Matrix,
    /// `N x C_0`.
    pub features: Matrix,
    /// One-hot `N x K`.
    pub labels: Matrix,
    pub train_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

impl Graph {
    pub fn new(
        adjacency: Matrix,
        features: Matrix,
        labels: Matrix,
        train_mask: Vec<bool>,
        test_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = adjacency.rows();
        if adjacency.cols() != n || features.rows() != n || labels.rows() != n {
            return Err(Error::Shape {
                op: "graph",
                left: adjacency.shape(),
                right: (features.rows(), labels.rows()),
            });
        }
        if train_mask.len() != n || test_mask.len() != n {
            return Err(Error::Data(format!("masks must have {n} entries")));
        }
        for i in 0..n {
            if adjacency.get(i, i) != 0.0 {
                return Err(Error::Data(format!("node {i} has a self-loop")));
            }
            for j in 0..n {
                let v = adjacency.get(i, j);
                if (v != 0.0 && v != 1.0) || v != adjacency.get(j, i) {
                    return Err(Error::Data(format!("adjacency entry ({i}, {j}) is not symmetric 0/1")));
                }
            }
            if train_mask[i] && test_mask[i] {
                return Err(Error::Data(format!("node {i} is in both masks")));
            }
        }
        if !train_mask.iter().any(|&t| t) {
            return Err(Error::Data("no training nodes".into()));
        }
        Ok(Graph {
            adjacency,
            features,
            labels,
            train_mask,
            test_mask,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.rows()
    }

    pub fn n_classes(&self) -> usize {
        self.labels.cols()
    }
}

/// `(D + I)^{-1/2} (A + I) (D + I)^{-1/2}`.
pub fn normalize_adjacency(adjacency: &Matrix) -> Matrix {
    let n = adjacency.rows();
    let deg: Vec<f64> = (0..n).map(|i| adjacency.row(i).iter().sum::<f64>() + 1.0).collect();
    Matrix::from_fn(n, n, |i, j| {
        let a = adjacency.get(i, j) + if i == j { 1.0 } else { 0.0 };
        if a == 0.0 {
            0.0
        } else {
            a / (deg[i] * deg[j]).sqrt()
        }
    })
}

/// Largest eigenvalue magnitude of a symmetric matrix by power iteration.
pub fn spectral_radius(m: &Matrix, iters: usize) -> f64 {
    let n = m.rows();
    let mut v = Matrix::from_fn(n, 1, |i, _| 1.0 + (i % 7) as f64 * 0.1);
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w = m.matmul(&v).expect("square");
        let norm = w.frob();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm / v.frob();
        v = w.scale(1.0 / norm);
    }
    lambda
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnState {
    /// `W[l]` is `C_{l-1} x C_l`.
    pub w: Vec<Matrix>,
    /// `Z[l]` is `N x C_l`.
    pub z: Vec<Matrix>,
    pub u: Matrix,
    pub a_norm: Matrix,
    pub rho: f64,
    pub mu: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GcnBlock {
    W(usize),
    Z(usize),
}

impl GcnState {
    pub fn n_layers(&self) -> usize {
        self.w.len()
    }

    pub fn input<'a>(&'a self, l: usize, x: &'a Matrix) -> &'a Matrix {
        if l == 0 {
            x
        } else {
            &self.z[l - 1]
        }
    }

    /// `A_norm Z_{l-1}`.
    pub fn propagated(&self, l: usize, x: &Matrix) -> Matrix {
        self.a_norm.matmul(self.input(l, x)).expect("shapes chain")
    }

    /// `M_l = A_norm Z_{l-1} W_l`.
    pub fn pre(&self, l: usize, x: &Matrix) -> Matrix {
        self.propagated(l, x).matmul(&self.w[l]).expect("shapes chain")
    }

    pub fn residual(&self, x: &Matrix) -> Matrix {
        let last = self.n_layers() - 1;
        self.z[last].sub(&self.pre(last, x))
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.z).all(Matrix::is_finite) && self.u.is_finite()
    }

    pub fn block(&self, b: GcnBlock) -> Result<&Matrix> {
        let (list, i, what) = match b {
            GcnBlock::W(i) => (&self.w, i, "W"),
            GcnBlock::Z(i) => (&self.z, i, "Z"),
        };
        list.get(i).ok_or(Error::Index {
            what,
            index: i,
            limit: list.len(),
        })
    }

    pub fn block_mut(&mut self, b: GcnBlock) -> Result<&mut Matrix> {
        let (list, i, what) = match b {
            GcnBlock::W(i) => (&mut self.w, i, "W"),
            GcnBlock::Z(i) => (&mut self.z, i, "Z"),
        };
        let limit = list.len();
        list.get_mut(i).ok_or(Error::Index { what, index: i, limit })
    }
}

/// Plain forward pass: output scores `N x K`.
pub fn predict(w: &[Matrix], a_norm: &Matrix, activation: Activation, x: &Matrix) -> Matrix {
    let mut h = x.clone();
    for (l, wl) in w.iter().enumerate() {
        h = a_norm.matmul(&h).expect("square").matmul(wl).expect("shapes chain");
        if l + 1 < w.len() {
            h.map_inplace(|v| activation.apply(v));
        }
    }
    h
}

pub fn psi(state: &GcnState, activation: Activation, x: &Matrix) -> f64 {
    let last = state.n_layers() - 1;
    let mut hidden = 0.0;
    for l in 0..last {
        hidden += state.z[l].dist_sq(&activation.forward(&state.pre(l, x)));
    }
    let e = state.residual(x);
    0.5 * state.mu * hidden + state.u.dot(&e) + 0.5 * state.rho * e.frob_sq()
}

/// `d psi / d M_l`.
fn pre_gradient(state: &GcnState, activation: Activation, l: usize, m: &Matrix) -> Matrix {
    let z = &state.z[l];
    if l + 1 == state.n_layers() {
        let mut g = state.u.clone();
        g.axpy(state.rho, &z.sub(m));
        g.scale(-1.0)
    } else {
        let mu = state.mu;
        Matrix::from_fn(m.rows(), m.cols(), |i, j| {
            let mv = m.get(i, j);
            -mu * (z.get(i, j) - activation.apply(mv)) * activation.derivative(mv)
        })
    }
}

pub fn grad_psi_block(state: &GcnState, activation: Activation, x: &Matrix, block: GcnBlock) -> Result<Matrix> {
    state.block(block)?;
    let last = state.n_layers() - 1;
    Ok(match block {
        GcnBlock::W(l) => {
            let p = state.propagated(l, x);
            let back = pre_gradient(state, activation, l, &p.matmul(&state.w[l])?);
            p.t_matmul(&back)?
        }
        GcnBlock::Z(l) if l == last => {
            let mut g = state.u.clone();
            g.axpy(state.rho, &state.residual(x));
            g
        }
        GcnBlock::Z(l) => {
            let own = state.z[l].sub(&activation.forward(&state.pre(l, x))).scale(state.mu);
            let back = pre_gradient(state, activation, l + 1, &state.pre(l + 1, x));
            let through = state.a_norm.t_matmul(&back)?.matmul_t(&state.w[l + 1])?;
            own.add(&through)
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnConfig {
    pub hidden_dims: Vec<usize>,
    pub rho: f64,
    pub mu: f64,
    pub epochs: usize,
    pub seed: u64,
    pub activation: Activation,
    pub reduction: Reduction,
    pub backtrack: BacktrackOptions,
    pub fista: FistaOptions,
    pub initial_step: f64,
    pub audit: bool,
    pub record_wall_time: bool,
}

impl Default for GcnConfig {
    fn default() -> Self {
        GcnConfig {
            hidden_dims: vec![32],
            rho: 1.0,
            mu: 1.0,
            epochs: 200,
            seed: 0,
            activation: Activation::Relu,
            reduction: Reduction::Sum,
            backtrack: BacktrackOptions::default(),
            fista: FistaOptions::default(),
            initial_step: 1.0,
            audit: false,
            record_wall_time: false,
        }
    }
}

impl GcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if !(self.rho > 0.0 && self.mu > 0.0) {
            return Err(Error::Argument("rho and mu must be positive".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Argument("need at least one hidden layer of positive width".into()));
        }
        Ok(())
    }

    pub fn risk<'g>(&self, graph: &'g Graph) -> Risk<'g> {
        Risk::new(RiskKind::CrossEntropy, self.reduction)
            .with_layout(Layout::Rows)
            .with_mask(&graph.train_mask)
    }
}

/// Random weights and an exact forward pass; `U = 0`.
pub fn gcn_init(graph: &Graph, cfg: &GcnConfig, rng: &mut Rng) -> Result<GcnState> {
    cfg.validate()?;
    let mut dims = vec![graph.features.cols()];
    dims.extend_from_slice(&cfg.hidden_dims);
    dims.push(graph.n_classes());
    let a_norm = normalize_adjacency(&graph.adjacency);
    let n_layers = dims.len() - 1;
    let mut w = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let s = (6.0 / (dims[l] + dims[l + 1]) as f64).sqrt();
        w.push(rng.uniform_matrix(dims[l], dims[l + 1], -s, s));
    }
    let mut z = Vec::with_capacity(n_layers);
    let mut h = graph.features.clone();
    for (l, wl) in w.iter().enumerate() {
        let mut m = a_norm.matmul(&h)?.matmul(wl)?;
        if l + 1 < n_layers {
            m.map_inplace(|v| cfg.activation.apply(v));
        }
        h = m.clone();
        z.push(m);
    }
    let u = Matrix::zeros(graph.n_nodes(), graph.n_classes());
    Ok(GcnState {
        w,
        z,
        u,
        a_norm,
        rho: cfg.rho,
        mu: cfg.mu,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GcnTrace {
    pub iter: usize,
    pub objective: f64,
    pub lagrangian: f64,
    pub residual_fro: f64,
    pub descent: DescentReport,
    pub ck: f64,
    pub stationarity_residual: f64,
    pub fista_converged: bool,
    pub train_acc: f64,
    pub test_acc: f64,
    /// Largest `phi(candidate) - Q(candidate; step)` among accepted steps,
    /// from full evaluations when auditing.
    pub max_certificate_gap: f64,
    pub min_step: f64,
    pub wall_time_s: f64,
}

#[derive(Debug)]
pub struct GcnRun {
    pub state: GcnState,
    pub traces: Vec<GcnTrace>,
    pub ck: CkSeries,
    pub aborted: Option<Error>,
    pub initial_lagrangian: f64,
}

/// Working state with cached `P_l = A_norm Z_{l-1}` and `M_l = P_l W_l`.
pub struct GcnSweeper<'s> {
    pub graph: &'s Graph,
    pub cfg: &'s GcnConfig,
    pub state: GcnState,
    p: Vec<Matrix>,
    m: Vec<Matrix>,
    seeds: StepSeeds,
    moves: f64,
    min_step: f64,
    max_gap: f64,
    fista_ok: bool,
}

impl<'s> GcnSweeper<'s> {
    pub fn new(graph: &'s Graph, cfg: &'s GcnConfig, state: GcnState) -> Self {
        let n = state.n_layers();
        let mut sw = GcnSweeper {
            graph,
            cfg,
            state,
            p: Vec::with_capacity(n),
            m: Vec::with_capacity(n),
            seeds: StepSeeds::new(n, cfg.initial_step),
            moves: 0.0,
            min_step: f64::INFINITY,
            max_gap: f64::NEG_INFINITY,
            fista_ok: true,
        };
        sw.refresh();
        sw
    }

    pub fn refresh(&mut self) {
        let x = &self.graph.features;
        self.p = (0..self.state.n_layers()).map(|l| self.state.propagated(l, x)).collect();
        self.m = self
            .p
            .iter()
            .zip(&self.state.w)
            .map(|(p, w)| p.matmul(w).expect("shapes chain"))
            .collect();
    }

    fn last(&self) -> usize {
        self.state.n_layers() - 1
    }

    fn act(&self) -> Activation {
        self.cfg.activation
    }

    /// Change of layer `l`'s penalty when `M_l` moves by `-k / t`.
    fn pre_increment(&self, l: usize, k: &Matrix, t: f64) -> f64 {
        let z = &self.state.z[l];
        let m = &self.m[l];
        if l == self.last() {
            // epsilon moves by +k/t
            let e = z.sub(m);
            (self.state.u.dot(k) + self.state.rho * e.dot(k)) / t + 0.5 * self.state.rho * k.frob_sq() / (t * t)
        } else {
            let act = self.act();
            let (zs, ms, ks) = (z.as_slice(), m.as_slice(), k.as_slice());
            let mut s = 0.0;
            for i in 0..zs.len() {
                let f0 = act.apply(ms[i]);
                let f1 = act.apply(ms[i] - ks[i] / t);
                s += (f0 - f1) * (2.0 * zs[i] - f0 - f1);
            }
            0.5 * self.state.mu * s
        }
    }

    fn note(&mut self, block: GcnBlock, res: &BacktrackResult) {
        self.min_step = self.min_step.min(res.step);
        let gap = if self.cfg.audit {
            let x = &self.graph.features;
            let mut trial = self.state.clone();
            *trial.block_mut(block).expect("valid block") = res.candidate.clone();
            let inc = psi(&trial, self.act(), x) - psi(&self.state, self.act(), x);
            (inc - res.model_increment).max(res.gap())
        } else {
            res.gap()
        };
        self.max_gap = self.max_gap.max(gap);
    }

    fn slot(backward: bool, weight: bool) -> SeedSlot {
        match (backward, weight) {
            (true, false) => SeedSlot::BackwardAct,
            (true, true) => SeedSlot::BackwardWeight,
            (false, false) => SeedSlot::ForwardAct,
            (false, true) => SeedSlot::ForwardWeight,
        }
    }

    pub fn update_z_hidden(&mut self, l: usize, backward: bool) -> Result<()> {
        let act = self.act();
        let mu = self.state.mu;
        let own = self.state.z[l].sub(&act.forward(&self.m[l]));
        let back = pre_gradient(&self.state, act, l + 1, &self.m[l + 1]);
        let mut g = own.scale(mu);
        g.axpy(1.0, &self.state.a_norm.t_matmul(&back)?.matmul_t(&self.state.w[l + 1])?);
        let ag = self.state.a_norm.matmul(&g)?;
        let k = ag.matmul(&self.state.w[l + 1])?;
        let slot = Self::slot(backward, false);
        let res = backtrack_quadratic(
            |_, d, t| mu * own.dot(d) + 0.5 * mu * d.frob_sq() + self.pre_increment(l + 1, &k, t),
            &g,
            &self.state.z[l],
            self.seeds.get(l, slot),
            &self.cfg.backtrack,
        )?;
        self.seeds.record(l, slot, res.step, self.cfg.backtrack.growth);
        self.note(GcnBlock::Z(l), &res);
        self.moves += res.candidate.dist_sq(&self.state.z[l]);
        self.p[l + 1].axpy(-1.0 / res.step, &ag);
        self.m[l + 1].axpy(-1.0 / res.step, &k);
        self.state.z[l] = res.candidate;
        Ok(())
    }

    pub fn update_w(&mut self, l: usize, backward: bool) -> Result<()> {
        let back = pre_gradient(&self.state, self.act(), l, &self.m[l]);
        let g = self.p[l].t_matmul(&back)?;
        let pg = self.p[l].matmul(&g)?;
        let slot = Self::slot(backward, true);
        let res = backtrack_quadratic(
            |_, _, t| self.pre_increment(l, &pg, t),
            &g,
            &self.state.w[l],
            self.seeds.get(l, slot),
            &self.cfg.backtrack,
        )?;
        self.seeds.record(l, slot, res.step, self.cfg.backtrack.growth);
        self.note(GcnBlock::W(l), &res);
        self.moves += res.candidate.dist_sq(&self.state.w[l]);
        self.m[l].axpy(-1.0 / res.step, &pg);
        self.state.w[l] = res.candidate;
        Ok(())
    }

    pub fn update_z_last(&mut self) {
        let last = self.last();
        let problem = LastLayerProblem {
            risk: self.cfg.risk(self.graph),
            y: &self.graph.labels,
            w_aff: &self.m[last],
            u: &self.state.u,
            rho: self.state.rho,
        };
        let sol = solve_z_last(&problem, &self.state.z[last], &self.cfg.fista);
        self.fista_ok &= sol.converged;
        self.moves += sol.z.dist_sq(&self.state.z[last]);
        self.state.z[last] = sol.z;
    }

    /// Backward sweep then forward sweep.
    pub fn sweep(&mut self) -> Result<()> {
        let last = self.last();
        for l in (0..=last).rev() {
            if l == last {
                self.update_z_last();
            } else {
                self.update_z_hidden(l, true)?;
            }
            self.update_w(l, true)?;
        }
        for l in 0..=last {
            self.update_w(l, false)?;
            if l == last {
                self.update_z_last();
            } else {
                self.update_z_hidden(l, false)?;
            }
        }
        Ok(())
    }

    /// `eps = Z_L - M_L`, then `U += rho eps`.
    pub fn dual_step(&mut self) -> Matrix {
        let last = self.last();
        let e = self.state.z[last].sub(&self.m[last]);
        self.state.u.axpy(self.state.rho, &e);
        e
    }

    /// `(L_rho, objective)` from the caches.
    pub fn values(&self) -> (f64, f64) {
        let last = self.last();
        let mut hidden = 0.0;
        for l in 0..last {
            hidden += self.state.z[l].dist_sq(&self.act().forward(&self.m[l]));
        }
        let e = self.state.z[last].sub(&self.m[last]);
        let risk = self.cfg.risk(self.graph).value(&self.state.z[last], &self.graph.labels);
        let obj = risk + 0.5 * self.state.mu * hidden;
        (obj + self.state.u.dot(&e) + 0.5 * self.state.rho * e.frob_sq(), obj)
    }

    /// Scores `A_norm Z_{L-1} W_L` from the cache.
    pub fn scores(&self) -> &Matrix {
        &self.m[self.last()]
    }
}

pub fn gcn_train(graph: &Graph, cfg: &GcnConfig, sink: &mut dyn FnMut(&GcnTrace)) -> Result<GcnRun> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let state = gcn_init(graph, cfg, &mut rng)?;
    let mut sw = GcnSweeper::new(graph, cfg, state);
    let (l0, _) = sw.values();
    let risk = cfg.risk(graph);
    let h = diagnostics::risk_lipschitz_bound(RiskKind::CrossEntropy);
    let mut prev = l0;
    let mut traces = Vec::with_capacity(cfg.epochs);
    let mut ck = CkSeries::default();
    let mut aborted = None;
    let start = Instant::now();
    for iter in 1..=cfg.epochs {
        if let Err(e) = sw.sweep() {
            aborted = Some(e);
            break;
        }
        sw.refresh();
        let e = sw.dual_step();
        let (lag, obj) = sw.values();
        if !lag.is_finite() || !sw.state.is_finite() {
            aborted = Some(Error::Divergence {
                iter,
                quantity: "augmented Lagrangian",
            });
            break;
        }
        let moves = std::mem::take(&mut sw.moves);
        let min_step = std::mem::replace(&mut sw.min_step, f64::INFINITY);
        let max_gap = std::mem::replace(&mut sw.max_gap, f64::NEG_INFINITY);
        let fista_ok = std::mem::replace(&mut sw.fista_ok, true);
        let descent = diagnostics::check_sufficient_descent(iter, prev, lag, moves, min_step, cfg.rho, cfg.mu, h);
        diagnostics::ck_update(&mut ck, moves);
        let last = sw.state.n_layers() - 1;
        let stationarity = diagnostics::stationarity_residual(&risk, &sw.state.z[last], &graph.labels, &sw.state.u);
        let scores = sw.scores();
        let trace = GcnTrace {
            iter,
            objective: obj,
            lagrangian: lag,
            residual_fro: e.frob(),
            descent,
            ck: ck.last().unwrap_or(0.0),
            stationarity_residual: stationarity,
            fista_converged: fista_ok,
            train_acc: accuracy(scores, &graph.labels, Layout::Rows, Some(&graph.train_mask)),
            test_acc: accuracy(scores, &graph.labels, Layout::Rows, Some(&graph.test_mask)),
            max_certificate_gap: max_gap,
            min_step,
            wall_time_s: if cfg.record_wall_time {
                start.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        sink(&trace);
        traces.push(trace);
        prev = lag;
    }
    Ok(GcnRun {
        state: sw.state,
        traces,
        ck,
        aborted,
        initial_lagrangian: l0,
    })
}

/// Parameters of a two-block stochastic block model with Gaussian features
/// whose means depend on the block.
#[derive(Clone, Debug, PartialEq)]
pub struct SbmSpec {
    pub n_nodes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feature_dim: usize,
    /// Distance between the two class means along each informative axis.
    pub separation: f64,
    pub noise: f64,
    pub train_fraction: f64,
}

impl Default for SbmSpec {
    fn default() -> Self {
        SbmSpec {
            n_nodes: 200,
            p_in: 0.1,
            p_out: 0.01,
            feature_dim: 2,
            separation: 1.0,
            noise: 1.0,
            train_fraction: 0.2,
        }
    }
}

/// Nodes alternate between the two blocks. Class `c` has feature mean
/// `separation` on axis `c` and 0 elsewhere. Training nodes are the first
/// `train_fraction` of each class after a seeded shuffle; the rest are test.
pub fn sbm_graph(spec: &SbmSpec, rng: &mut Rng) -> Result<Graph> {
    let n = spec.n_nodes;
    if n < 4 || spec.feature_dim < 2 {
        return Err(Error::Argument("SBM needs at least 4 nodes and 2 features".into()));
    }
    let class: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut adjacency = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let p = if class[i] == class[j] { spec.p_in } else { spec.p_out };
            if rng.bernoulli(p) {
                adjacency.set(i, j, 1.0);
                adjacency.set(j, i, 1.0);
            }
        }
    }
    let features = Matrix::from_fn(n, spec.feature_dim, |i, k| {
        let mean = if k == class[i] { spec.separation } else { 0.0 };
        mean + spec.noise * rng.normal()
    });
    let labels = Matrix::from_fn(n, 2, |i, c| if class[i] == c { 1.0 } else { 0.0 });
    let mut train = vec![false; n];
    for c in 0..2 {
        let mut idx: Vec<usize> = (0..n).filter(|&i| class[i] == c).collect();
        rng.shuffle(&mut idx);
        let k = ((idx.len() as f64 * spec.train_fraction).round() as usize).clamp(1, idx.len() - 1);
        for &i in &idx[..k] {
            train[i] = true;
        }
    }
    let test = train.iter().map(|t| !t).collect();
    Graph::new(adjacency, features, labels, train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_examples() {
        assert_eq!(normalize_adjacency(&Matrix::zeros(3, 3)), Matrix::identity(3));
        let a = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(normalize_adjacency(&a), Matrix::filled(2, 2, 0.5));
    }

    #[test]
    fn normalized_sbm_adjacency_is_contractive() {
        let g = sbm_graph(&SbmSpec::default(), &mut Rng::new(1)).unwrap();
        let an = normalize_adjacency(&g.adjacency);
        assert_eq!(an, an.transpose());
        assert!(spectral_radius(&an, 200) <= 1.0 + 1e-6);
    }

    #[test]
    fn consistent_state_has_zero_psi() {
        let g = sbm_graph(
            &SbmSpec {
                n_nodes: 20,
                ..Default::default()
            },
            &mut Rng::new(2),
        )
        .unwrap();
        let cfg = GcnConfig::default();
        let st = gcn_init(&g, &cfg, &mut Rng::new(3)).unwrap();
        assert!(psi(&st, cfg.activation, &g.features).abs() < 1e-12);
        assert_eq!(st.z[0].shape(), (20, 32));
    }

    #[test]
    fn scalar_graph_hand_value() {
        // N = 1, A_norm = [[1]], x = 2, W0 = 0.5, W1 = 3.
        let st = GcnState {
            w: vec![Matrix::column(&[0.5]), Matrix::column(&[3.0])],
            z: vec![Matrix::column(&[2.0]), Matrix::column(&[1.0])],
            u: Matrix::column(&[0.5]),
            a_norm: Matrix::identity(1),
            rho: 2.0,
            mu: 4.0,
        };
        let x = Matrix::column(&[2.0]);
        // mu/2 (2 - 1)^2 + 0.5 (1 - 6) + rho/2 (1 - 6)^2
        let expect = 2.0 * 1.0 + 0.5 * -5.0 + 1.0 * 25.0;
        assert!((psi(&st, Activation::Relu, &x) - expect).abs() < 1e-12);
    }

    #[test]
    fn bad_graphs_rejected() {
        let a = Matrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]);
        let f = Matrix::zeros(2, 1);
        let y = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(Graph::new(a, f.clone(), y.clone(), vec![true, false], vec![false, true]).is_err());
        let a = Matrix::zeros(2, 2);
        assert!(Graph::new(a.clone(), f.clone(), y.clone(), vec![false, false], vec![true, true]).is_err());
        assert!(Graph::new(a, f, y, vec![true, false], vec![true, false]).is_err());
    }

    #[test]
    fn iteration_keeps_shapes_and_dual_identity() {
        let g = sbm_graph(
            &SbmSpec {
                n_nodes: 30,
                ..Default::default()
            },
            &mut Rng::new(4),
        )
        .unwrap();
        let cfg = GcnConfig {
            hidden_dims: vec![6],
            ..Default::default()
        };
        let st = gcn_init(&g, &cfg, &mut Rng::new(5)).unwrap();
        let mut sw = GcnSweeper::new(&g, &cfg, st);
        sw.sweep().unwrap();
        sw.refresh();
        let u0 = sw.state.u.clone();
        let e = sw.dual_step();
        let mut expect = u0;
        expect.axpy(cfg.rho, &e);
        assert_eq!(sw.state.u, expect);
        assert_eq!(sw.state.z[0].shape(), (30, 6));
        assert_eq!(sw.state.z[1].shape(), (30, 2));
    }
}
