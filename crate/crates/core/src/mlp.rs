//! MLP variables and the functions the dlADMM updates are built on.
//!
//! Layers are indexed from 0. Layer `i` computes `z[i] = w[i] * a_in + b[i]`
//! where `a_in` is the data matrix for `i == 0` and `a[i - 1]` otherwise.
//! Hidden layers then apply the activation, `a[i] ~ f(z[i])`; the last layer
//! has no activation and its scores `z[L-1]` feed the risk. All of `z`, `a`
//! and `u` carry one column per sample.
//!
//! The relaxed problem keeps the hidden equalities as quadratic penalties
//! weighted by `nu` and the last-layer equality as a hard constraint with
//! multiplier `u` and penalty `rho`:
//!
//! ```text
//! phi = nu/2 sum_{i<L-1} (|z_i - W_i a_{i-1} - b_i|^2 + |a_i - f(z_i)|^2)
//!     + <u, r> + rho/2 |r|^2,          r = z_{L-1} - W_{L-1} a_{L-2} - b_{L-1}
//! L_rho = R(z_{L-1}) + sum Omega(W_i) + phi
//! F     = R(z_{L-1}) + sum Omega(W_i) + nu/2 sum_{i<L-1} (...)
//! ```

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::risk::{Layout, Reduction, Risk, RiskKind};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Leaky ReLU with the given negative-side slope in `(0, 1)`.
    LeakyRelu(f64),
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x >= 0.0 {
                    x
                } else {
                    s * x
                }
            }
        }
    }

    /// Derivative, with the kink at 0 assigned the negative-side slope.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    1.0
                } else {
                    s
                }
            }
        }
    }

    pub fn forward(self, m: &Matrix) -> Matrix {
        m.map(|x| self.apply(x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regularizer {
    None,
    /// `lambda * |W|_1`
    L1(f64),
    /// `lambda * |W|_F^2`
    L2(f64),
}

impl Regularizer {
    pub fn value(self, w: &Matrix) -> f64 {
        match self {
            Regularizer::None => 0.0,
            Regularizer::L1(l) => l * w.norms().l1,
            Regularizer::L2(l) => l * w.frob_sq(),
        }
    }

    pub fn lambda(self) -> f64 {
        match self {
            Regularizer::None => 0.0,
            Regularizer::L1(l) | Regularizer::L2(l) => l,
        }
    }

    /// True when the term is identically zero.
    pub fn is_zero(self) -> bool {
        self.lambda() == 0.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpArchitecture {
    /// `n_0, n_1, ..., n_L`.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub regularizer: Regularizer,
    pub risk: RiskKind,
    pub reduction: Reduction,
}

impl MlpArchitecture {
    /// ReLU, no regularizer, cross-entropy with the default reduction.
    pub fn new(layer_dims: Vec<usize>) -> Self {
        MlpArchitecture {
            layer_dims,
            activation: Activation::Relu,
            regularizer: Regularizer::None,
            risk: RiskKind::CrossEntropy,
            reduction: Reduction::Sum,
        }
    }

    /// Number of weight layers `L`.
    pub fn n_layers(&self) -> usize {
        self.layer_dims.len().saturating_sub(1)
    }

    pub fn risk_fn(&self) -> Risk<'static> {
        Risk::new(self.risk, self.reduction).with_layout(Layout::Columns)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers() < 2 {
            return Err(Error::Argument(format!(
                "need at least 2 weight layers, got {}",
                self.n_layers()
            )));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::Argument("layer sizes must be positive".into()));
        }
        if let Activation::LeakyRelu(s) = self.activation {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Argument(format!("leaky slope {s} outside (0, 1)")));
            }
        }
        let lam = self.regularizer.lambda();
        if !(lam >= 0.0 && lam.is_finite()) {
            return Err(Error::Argument(format!("regularization weight {lam} must be >= 0")));
        }
        Ok(())
    }
}

/// Full-batch training data: inputs and targets with one column per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Matrix,
}

impl Dataset {
    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.cols() != y.cols() {
            return Err(Error::Shape {
                op: "dataset",
                left: x.shape(),
                right: y.shape(),
            });
        }
        Ok(Dataset { x, y })
    }

    pub fn n_samples(&self) -> usize {
        self.x.cols()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.y.argmax_cols()
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_cols(idx),
            y: self.y.select_cols(idx),
        }
    }

    fn check(&self, arch: &MlpArchitecture) -> Result<()> {
        let d = &arch.layer_dims;
        if self.x.rows() != d[0] || self.y.rows() != d[d.len() - 1] {
            return Err(Error::Shape {
                op: "dataset vs architecture",
                left: (self.x.rows(), self.y.rows()),
                right: (d[0], d[d.len() - 1]),
            });
        }
        if arch.risk == RiskKind::CrossEntropy {
            for j in 0..self.y.cols() {
                let s: f64 = (0..self.y.rows()).map(|i| self.y.get(i, j)).sum();
                if (s - 1.0).abs() > 1e-9 {
                    return Err(Error::Data(format!("target column {j} sums to {s}, expected 1")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpState {
    pub w: Vec<Matrix>,
    pub b: Vec<Matrix>,
    pub z: Vec<Matrix>,
    /// Hidden activations, one fewer than the number of layers.
    pub a: Vec<Matrix>,
    pub u: Matrix,
    pub rho: f64,
    pub nu: f64,
}

/// One variable block of the MLP state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Block {
    W(usize),
    B(usize),
    Z(usize),
    A(usize),
}

impl MlpState {
    pub fn n_layers(&self) -> usize {
        self.w.len()
    }

    /// The input to layer `i`.
    pub fn input<'a>(&'a self, i: usize, x: &'a Matrix) -> &'a Matrix {
        if i == 0 {
            x
        } else {
            &self.a[i - 1]
        }
    }

    /// `W_i a_{i-1} + b_i`.
    pub fn affine(&self, i: usize, x: &Matrix) -> Matrix {
        self.w[i]
            .matmul(self.input(i, x))
            .expect("state shapes are consistent")
            .add_column(&self.b[i])
    }

    /// Last-layer constraint residual `r`.
    pub fn residual(&self, x: &Matrix) -> Matrix {
        let last = self.n_layers() - 1;
        self.z[last].sub(&self.affine(last, x))
    }

    /// Plain forward pass of the network defined by `w` and `b`.
    pub fn predict(&self, activation: Activation, x: &Matrix) -> Matrix {
        predict(&self.w, &self.b, activation, x)
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).chain(&self.z).chain(&self.a).all(Matrix::is_finite)
            && self.u.is_finite()
    }

    pub fn block(&self, block: Block) -> Result<&Matrix> {
        let (list, i, what) = match block {
            Block::W(i) => (&self.w, i, "W"),
            Block::B(i) => (&self.b, i, "b"),
            Block::Z(i) => (&self.z, i, "z"),
            Block::A(i) => (&self.a, i, "a"),
        };
        list.get(i).ok_or(Error::Index {
            what,
            index: i,
            limit: list.len(),
        })
    }

    pub fn block_mut(&mut self, block: Block) -> Result<&mut Matrix> {
        let (list, i, what) = match block {
            Block::W(i) => (&mut self.w, i, "W"),
            Block::B(i) => (&mut self.b, i, "b"),
            Block::Z(i) => (&mut self.z, i, "z"),
            Block::A(i) => (&mut self.a, i, "a"),
        };
        let limit = list.len();
        list.get_mut(i).ok_or(Error::Index { what, index: i, limit })
    }
}

/// Forward pass through explicit weights.
pub fn predict(w: &[Matrix], b: &[Matrix], activation: Activation, x: &Matrix) -> Matrix {
    let mut h = x.clone();
    for (i, (wi, bi)) in w.iter().zip(b).enumerate() {
        h = wi.matmul(&h).expect("weight shapes chain").add_column(bi);
        if i + 1 < w.len() {
            h.map_inplace(|v| activation.apply(v));
        }
    }
    h
}

/// The coupling terms of the augmented Lagrangian.
pub fn phi(state: &MlpState, activation: Activation, x: &Matrix) -> f64 {
    let last = state.n_layers() - 1;
    let mut hidden = 0.0;
    for i in 0..last {
        let p = state.z[i].sub(&state.affine(i, x));
        let fz = activation.forward(&state.z[i]);
        hidden += p.frob_sq() + state.a[i].dist_sq(&fz);
    }
    let r = state.residual(x);
    0.5 * state.nu * hidden + state.u.dot(&r) + 0.5 * state.rho * r.frob_sq()
}

pub fn risk(arch: &MlpArchitecture, z_last: &Matrix, y: &Matrix) -> f64 {
    arch.risk_fn().value(z_last, y)
}

pub fn regularization(arch: &MlpArchitecture, state: &MlpState) -> f64 {
    state.w.iter().map(|w| arch.regularizer.value(w)).sum()
}

pub fn lagrangian(state: &MlpState, arch: &MlpArchitecture, data: &Dataset) -> f64 {
    let last = state.n_layers() - 1;
    risk(arch, &state.z[last], &data.y)
        + regularization(arch, state)
        + phi(state, arch.activation, &data.x)
}

/// The relaxed objective: risk, regularizer and the hidden-layer penalties.
pub fn objective_f(state: &MlpState, arch: &MlpArchitecture, data: &Dataset) -> f64 {
    let last = state.n_layers() - 1;
    let mut hidden = 0.0;
    for i in 0..last {
        let p = state.z[i].sub(&state.affine(i, &data.x));
        let fz = arch.activation.forward(&state.z[i]);
        hidden += p.frob_sq() + state.a[i].dist_sq(&fz);
    }
    risk(arch, &state.z[last], &data.y) + regularization(arch, state) + 0.5 * state.nu * hidden
}

/// The multiplier-weighted pull on layer `i`'s affine residual:
/// `nu * p_i` for hidden layers and `u + rho * r` for the last one.
pub(crate) fn pull(state: &MlpState, i: usize, x: &Matrix) -> Matrix {
    let p = state.z[i].sub(&state.affine(i, x));
    if i + 1 == state.n_layers() {
        let mut e = state.u.clone();
        e.axpy(state.rho, &p);
        e
    } else {
        p.scale(state.nu)
    }
}

/// Gradient of `phi` with respect to one block, everything else fixed.
pub fn grad_phi_block(
    state: &MlpState,
    activation: Activation,
    x: &Matrix,
    block: Block,
) -> Result<Matrix> {
    state.block(block)?;
    let last = state.n_layers() - 1;
    Ok(match block {
        Block::W(i) => pull(state, i, x).matmul_t(state.input(i, x))?.scale(-1.0),
        Block::B(i) => pull(state, i, x).row_sums().scale(-1.0),
        Block::Z(i) if i == last => pull(state, i, x),
        Block::Z(i) => {
            let nu = state.nu;
            let p = pull(state, i, x);
            let z = &state.z[i];
            let a = &state.a[i];
            Matrix::from_fn(z.rows(), z.cols(), |r, c| {
                let zv = z.get(r, c);
                let q = a.get(r, c) - activation.apply(zv);
                p.get(r, c) - nu * q * activation.derivative(zv)
            })
        }
        Block::A(i) => {
            let q = state.a[i].sub(&activation.forward(&state.z[i]));
            let back = state.w[i + 1].t_matmul(&pull(state, i + 1, x))?;
            q.scale(state.nu).sub(&back)
        }
    })
}

/// Random weights, zero biases, and `z`, `a` from an exact forward pass so
/// every penalty starts at zero. The multiplier starts at zero.
pub fn forward_init(
    arch: &MlpArchitecture,
    data: &Dataset,
    rho: f64,
    nu: f64,
    rng: &mut Rng,
) -> Result<MlpState> {
    arch.validate()?;
    data.check(arch)?;
    if !(rho > 0.0 && nu > 0.0) {
        return Err(Error::Argument(format!("rho ({rho}) and nu ({nu}) must be positive")));
    }
    let d = &arch.layer_dims;
    let n_layers = arch.n_layers();
    let m = data.n_samples();
    let mut w = Vec::with_capacity(n_layers);
    let mut b = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let s = (6.0 / (d[i + 1] + d[i]) as f64).sqrt();
        w.push(rng.uniform_matrix(d[i + 1], d[i], -s, s));
        b.push(Matrix::zeros(d[i + 1], 1));
    }
    let mut z = Vec::with_capacity(n_layers);
    let mut a = Vec::with_capacity(n_layers - 1);
    let mut h = data.x.clone();
    for i in 0..n_layers {
        let zi = w[i].matmul(&h)?.add_column(&b[i]);
        if i + 1 < n_layers {
            h = arch.activation.forward(&zi);
            a.push(h.clone());
        }
        z.push(zi);
    }
    Ok(MlpState {
        w,
        b,
        z,
        a,
        u: Matrix::zeros(d[n_layers], m),
        rho,
        nu,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_state(z1: f64, lin: f64, a1: f64) -> (MlpState, Matrix) {
        // One hidden unit; W1 a0 + b1 = lin via W1 = lin, a0 = 1.
        let st = MlpState {
            w: vec![Matrix::column(&[lin]), Matrix::column(&[1.0])],
            b: vec![Matrix::zeros(1, 1), Matrix::zeros(1, 1)],
            z: vec![Matrix::column(&[z1]), Matrix::column(&[a1])],
            a: vec![Matrix::column(&[a1])],
            u: Matrix::zeros(1, 1),
            rho: 2.0,
            nu: 2.0,
        };
        (st, Matrix::column(&[1.0]))
    }

    #[test]
    fn phi_hand_example() {
        let (st, x) = scalar_state(1.0, 0.0, 1.0);
        // (nu/2) * ((1-0)^2 + (1 - relu(1))^2), last layer consistent.
        assert_eq!(phi(&st, Activation::Relu, &x), 1.0);
    }

    #[test]
    fn init_is_consistent_and_shaped() {
        let arch = MlpArchitecture::new(vec![2, 3, 2]);
        let x = Matrix::from_rows(&[[0.1, 0.5, -0.3], [1.0, -2.0, 0.0]]);
        let y = Matrix::from_rows(&[[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]]);
        let data = Dataset::new(x, y).unwrap();
        let st = forward_init(&arch, &data, 1.0, 1.0, &mut Rng::new(1)).unwrap();
        assert_eq!(st.w[0].shape(), (3, 2));
        assert_eq!(st.w[1].shape(), (2, 3));
        assert_eq!(phi(&st, arch.activation, &data.x), 0.0);
        let again = forward_init(&arch, &data, 1.0, 1.0, &mut Rng::new(1)).unwrap();
        assert_eq!(st, again);
        let mut scaled = st.clone();
        scaled.u = Matrix::filled(2, 3, 5.0);
        assert_eq!(phi(&scaled, arch.activation, &data.x), 0.0);
    }

    #[test]
    fn bias_gradient_last_layer_formula() {
        let arch = MlpArchitecture::new(vec![2, 3, 2]);
        let mut rng = Rng::new(4);
        let data = Dataset::new(rng.normal_matrix(2, 4, 1.0), Matrix::filled(2, 4, 0.5)).unwrap();
        let mut st = forward_init(&arch, &data, 1.5, 0.7, &mut rng).unwrap();
        st.z[1] = rng.normal_matrix(2, 4, 1.0);
        st.u = rng.normal_matrix(2, 4, 1.0);
        let g = grad_phi_block(&st, arch.activation, &data.x, Block::B(1)).unwrap();
        let r = st.residual(&data.x);
        let mut e = st.u.clone();
        e.axpy(st.rho, &r);
        assert!(g.sub(&e.row_sums().scale(-1.0)).max_abs() < 1e-14);
    }

    #[test]
    fn out_of_range_block_is_index_error() {
        let (st, x) = scalar_state(1.0, 0.0, 1.0);
        let err = grad_phi_block(&st, Activation::Relu, &x, Block::A(1)).unwrap_err();
        assert!(matches!(err, Error::Index { .. }));
    }

    #[test]
    fn validate_rejects_bad_architectures() {
        assert!(MlpArchitecture::new(vec![3, 2]).validate().is_err());
        assert!(MlpArchitecture::new(vec![3, 0, 2]).validate().is_err());
        let mut a = MlpArchitecture::new(vec![3, 4, 2]);
        a.activation = Activation::LeakyRelu(1.5);
        assert!(a.validate().is_err());
    }
}
