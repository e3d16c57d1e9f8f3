//! Full-batch gradient baselines trained by backpropagation on the same
//! forward models as the ADMM trainers.

use crate::error::{Error, Result};
use crate::gcn::{self, GcnConfig, Graph};
use crate::matrix::Matrix;
use crate::mlp::{self, Activation, Dataset, MlpArchitecture, Regularizer};
use crate::risk::{accuracy, Layout, Risk};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Gd,
    /// `eps` is added to the root of the accumulated squared gradients.
    Adagrad { eps: f64 },
    /// `decay` is the running-average factor; the learning rate scales the
    /// unit-corrected step (1.0 recovers the original method).
    Adadelta { decay: f64, eps: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adagrad() -> Self {
        OptimizerKind::Adagrad { eps: 1e-8 }
    }

    pub fn adadelta() -> Self {
        OptimizerKind::Adadelta { decay: 0.95, eps: 1e-6 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Learning rate used when none is given.
    pub fn default_learning_rate(self) -> f64 {
        match self {
            OptimizerKind::Gd => 1e-2,
            OptimizerKind::Adagrad { .. } => 1e-2,
            OptimizerKind::Adadelta { .. } => 1.0,
            OptimizerKind::Adam { .. } => 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl BaselineConfig {
    pub fn new(optimizer: OptimizerKind, epochs: usize, seed: u64) -> Self {
        BaselineConfig {
            optimizer,
            learning_rate: optimizer.default_learning_rate(),
            epochs,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Argument("epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument("learning rate must be non-negative".into()));
        }
        match self.optimizer {
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if !(0.0 < beta1 && beta1 < 1.0 && 0.0 < beta2 && beta2 < 1.0 && eps > 0.0) {
                    return Err(Error::Argument("Adam betas must lie in (0, 1)".into()));
                }
            }
            OptimizerKind::Adadelta { decay, eps } => {
                if !(0.0 < decay && decay < 1.0 && eps > 0.0) {
                    return Err(Error::Argument("Adadelta decay must lie in (0, 1)".into()));
                }
            }
            OptimizerKind::Adagrad { eps } => {
                if !(eps > 0.0) {
                    return Err(Error::Argument("Adagrad eps must be positive".into()));
                }
            }
            OptimizerKind::Gd => {}
        }
        Ok(())
    }
}

/// Per-parameter optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Optimizer {
            kind,
            lr,
            t: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step(&mut self, params: &mut [Matrix], grads: &[Matrix]) {
        self.t += 1;
        let lr = self.lr;
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (ps, gs) = (p.as_mut_slice(), g.as_slice());
            let m = self.first[k].as_mut_slice();
            let v = self.second[k].as_mut_slice();
            match self.kind {
                OptimizerKind::Gd => {
                    for i in 0..ps.len() {
                        ps[i] -= lr * gs[i];
                    }
                }
                OptimizerKind::Adagrad { eps } => {
                    for i in 0..ps.len() {
                        v[i] += gs[i] * gs[i];
                        ps[i] -= lr * gs[i] / (v[i].sqrt() + eps);
                    }
                }
                OptimizerKind::Adadelta { decay, eps } => {
                    // v: running mean of g^2, m: running mean of update^2
                    for i in 0..ps.len() {
                        v[i] = decay * v[i] + (1.0 - decay) * gs[i] * gs[i];
                        let d = -((m[i] + eps).sqrt() / (v[i] + eps).sqrt()) * gs[i];
                        m[i] = decay * m[i] + (1.0 - decay) * d * d;
                        ps[i] += lr * d;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(self.t as i32);
                    let c2 = 1.0 - beta2.powi(self.t as i32);
                    for i in 0..ps.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * gs[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * gs[i] * gs[i];
                        ps[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

fn reg_grad(reg: Regularizer, w: &Matrix) -> Option<Matrix> {
    match reg {
        Regularizer::None => None,
        Regularizer::L2(l) => Some(w.scale(2.0 * l)),
        Regularizer::L1(l) => Some(w.map(|x| if x == 0.0 { 0.0 } else { l * x.signum() })),
    }
}

/// Loss, output scores and gradients `(dW, db)` of the MLP at `(w, b)`.
pub fn backprop_grads(
    w: &[Matrix],
    b: &[Matrix],
    arch: &MlpArchitecture,
    data: &Dataset,
) -> (f64, Matrix, Vec<Matrix>, Vec<Matrix>) {
    let n = w.len();
    let act = arch.activation;
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut h = data.x.clone();
    for i in 0..n {
        let z = w[i].matmul(&h).expect("shapes chain").add_column(&b[i]);
        inputs.push(h);
        h = if i + 1 < n { act.forward(&z) } else { z.clone() };
        pre.push(z);
    }
    let risk = arch.risk_fn();
    let out = &pre[n - 1];
    let loss = risk.value(out, &data.y) + w.iter().map(|wi| arch.regularizer.value(wi)).sum::<f64>();
    let mut delta = risk.gradient(out, &data.y);
    let mut gw = vec![Matrix::zeros(0, 0); n];
    let mut gb = vec![Matrix::zeros(0, 0); n];
    for i in (0..n).rev() {
        let mut g = delta.matmul_t(&inputs[i]).expect("shapes chain");
        if let Some(r) = reg_grad(arch.regularizer, &w[i]) {
            g.axpy(1.0, &r);
        }
        gw[i] = g;
        gb[i] = delta.row_sums();
        if i > 0 {
            let back = w[i].t_matmul(&delta).expect("shapes chain");
            let zp = &pre[i - 1];
            delta = back.zip_map(zp, |d, z| d * act.derivative(z));
        }
    }
    (loss, pre.pop().expect("at least one layer"), gw, gb)
}

/// Loss, output scores and weight gradients of the GCN.
pub fn gcn_backprop_grads(
    w: &[Matrix],
    a_norm: &Matrix,
    activation: Activation,
    risk: &Risk,
    graph: &Graph,
) -> (f64, Matrix, Vec<Matrix>) {
    let n = w.len();
    let mut prop = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n);
    let mut h = graph.features.clone();
    for l in 0..n {
        let p = a_norm.matmul(&h).expect("square");
        let m = p.matmul(&w[l]).expect("shapes chain");
        prop.push(p);
        h = if l + 1 < n { activation.forward(&m) } else { m.clone() };
        pre.push(m);
    }
    let out = &pre[n - 1];
    let loss = risk.value(out, &graph.labels);
    let mut delta = risk.gradient(out, &graph.labels);
    let mut gw = vec![Matrix::zeros(0, 0); n];
    for l in (0..n).rev() {
        gw[l] = prop[l].t_matmul(&delta).expect("shapes chain");
        if l > 0 {
            let back = a_norm.t_matmul(&delta).expect("square").matmul_t(&w[l]).expect("shapes chain");
            delta = back.zip_map(&pre[l - 1], |d, m| d * activation.derivative(m));
        }
    }
    (loss, pre.pop().expect("at least one layer"), gw)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineTrace {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Debug)]
pub struct BaselineRun {
    pub params: Vec<Matrix>,
    pub traces: Vec<BaselineTrace>,
    /// Loss at the initial parameters.
    pub initial_loss: f64,
    pub aborted: Option<Error>,
}

/// The model a baseline trains.
pub enum BaselineModel<'d> {
    Mlp {
        arch: &'d MlpArchitecture,
        data: &'d Dataset,
        test: Option<&'d Dataset>,
    },
    Gcn {
        graph: &'d Graph,
        config: &'d GcnConfig,
    },
}

/// Trains from the same seeded initial weights the ADMM trainers use.
/// Each trace entry is taken after that epoch's update.
pub fn run_baseline(
    config: &BaselineConfig,
    model: &BaselineModel,
    sink: &mut dyn FnMut(&BaselineTrace),
) -> Result<BaselineRun> {
    config.validate()?;
    let mut rng = Rng::new(config.seed);
    match *model {
        BaselineModel::Mlp { arch, data, test } => {
            let st = mlp::forward_init(arch, data, 1.0, 1.0, &mut rng)?;
            let n = st.w.len();
            let mut params: Vec<Matrix> = st.w.into_iter().chain(st.b).collect();
            let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &params);
            let eval = |p: &[Matrix]| {
                let (loss, out, gw, gb) = backprop_grads(&p[..n], &p[n..], arch, data);
                (loss, out, gw.into_iter().chain(gb).collect::<Vec<_>>())
            };
            let (initial_loss, _, mut grads) = eval(&params);
            let mut traces = Vec::with_capacity(config.epochs);
            let mut aborted = None;
            for epoch in 1..=config.epochs {
                opt.step(&mut params, &grads);
                let (loss, out, g) = eval(&params);
                if !loss.is_finite() {
                    aborted = Some(Error::Divergence { iter: epoch, quantity: "loss" });
                    break;
                }
                grads = g;
                let test_acc = test.map(|t| {
                    let scores = mlp::predict(&params[..n], &params[n..], arch.activation, &t.x);
                    accuracy(&scores, &t.y, Layout::Columns, None)
                });
                let tr = BaselineTrace {
                    epoch,
                    loss,
                    train_acc: accuracy(&out, &data.y, Layout::Columns, None),
                    test_acc,
                };
                sink(&tr);
                traces.push(tr);
            }
            Ok(BaselineRun {
                params,
                traces,
                initial_loss,
                aborted,
            })
        }
        BaselineModel::Gcn { graph, config: gcfg } => {
            let st = gcn::gcn_init(graph, gcfg, &mut rng)?;
            let risk = gcfg.risk(graph);
            let mut params = st.w;
            let a_norm = st.a_norm;
            let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &params);
            let (initial_loss, _, mut grads) = gcn_backprop_grads(&params, &a_norm, gcfg.activation, &risk, graph);
            let mut traces = Vec::with_capacity(config.epochs);
            let mut aborted = None;
            for epoch in 1..=config.epochs {
                opt.step(&mut params, &grads);
                let (loss, out, g) = gcn_backprop_grads(&params, &a_norm, gcfg.activation, &risk, graph);
                if !loss.is_finite() {
                    aborted = Some(Error::Divergence { iter: epoch, quantity: "loss" });
                    break;
                }
                grads = g;
                let tr = BaselineTrace {
                    epoch,
                    loss,
                    train_acc: accuracy(&out, &graph.labels, Layout::Rows, Some(&graph.train_mask)),
                    test_acc: Some(accuracy(&out, &graph.labels, Layout::Rows, Some(&graph.test_mask))),
                };
                sink(&tr);
                traces.push(tr);
            }
            Ok(BaselineRun {
                params,
                traces,
                initial_loss,
                aborted,
            })
        }
    }
}
