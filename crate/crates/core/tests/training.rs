use std::cell::RefCell;

use dladmm::admm::{train, train_from, AdmmConfig, Phase, Sweeper};
use dladmm::diagnostics::BoundednessMonitor;
use dladmm::gcn::{gcn_train, sbm_graph, GcnConfig, SbmSpec};
use dladmm::mlp::{self, Block, Dataset, MlpArchitecture, MlpState};
use dladmm::risk::{Layout, Reduction, Risk, RiskKind};
use dladmm::synthetic::{separable_task, SEPARABLE_LAYERS};
use dladmm::{Matrix, Rng};

fn task() -> (MlpArchitecture, Dataset) {
    (MlpArchitecture::new(SEPARABLE_LAYERS.to_vec()), separable_task(1))
}

fn rises(values: impl IntoIterator<Item = f64>, start: f64, slack: f64) -> usize {
    let mut prev = start;
    let mut n = 0;
    for v in values {
        n += usize::from(v > prev + slack);
        prev = v;
    }
    n
}

#[test]
fn separable_task_is_fit_within_100_epochs() {
    let (arch, data) = task();
    let cfg = AdmmConfig { epochs: 100, ..Default::default() };
    let run = train(&arch, &data, None, &cfg, &mut |_| {}).unwrap();
    assert!(run.aborted.is_none());
    assert_eq!(run.traces.last().unwrap().train_acc, 1.0);
    assert_eq!(rises(run.traces.iter().map(|t| t.lagrangian), run.initial_lagrangian, 1e-9), 0);
}

#[test]
fn tiny_rho_makes_lagrangian_non_monotone() {
    let (arch, data) = task();
    let cfg = AdmmConfig { rho: 1e-6, nu: 1.0, epochs: 200, ..Default::default() };
    let run = train(&arch, &data, None, &cfg, &mut |_| {}).unwrap();
    let n = rises(run.traces.iter().map(|t| t.lagrangian), run.initial_lagrangian, 0.0);
    assert!(n >= 10, "only {n} increases");
}

#[test]
fn descent_holds_over_seeds_at_rho_4() {
    let (arch, data) = task();
    for seed in 0..5 {
        let cfg = AdmmConfig { rho: 4.0, nu: 1.0, epochs: 60, seed, audit: true, ..Default::default() };
        let run = train(&arch, &data, None, &cfg, &mut |_| {}).unwrap();
        for t in &run.traces {
            assert!(t.descent.hypothesis_met);
            assert!(t.descent.satisfied, "seed {seed} iter {}", t.iter);
            assert_eq!(t.certificate_violations(1e-10), 0);
        }
        assert!(run.ck.is_valid());
    }
}

#[test]
fn blocks_stay_bounded() {
    let (arch, data) = task();
    let cfg = AdmmConfig { epochs: 120, ..Default::default() };
    let mut rng = Rng::new(cfg.seed);
    let state = mlp::forward_init(&arch, &data, cfg.rho, cfg.nu, &mut rng).unwrap();
    let monitor = RefCell::new(BoundednessMonitor::default());
    let mut observer = |phase: Phase, block: Block, s: &MlpState| {
        if phase == Phase::Forward && block == Block::W(0) {
            let blocks = s.w.iter().chain(&s.b).chain(&s.z).chain(&s.a).chain(std::iter::once(&s.u));
            monitor.borrow_mut().observe(blocks);
        }
    };
    train_from(&arch, &data, None, &cfg, state, &mut |_| {}, Some(&mut observer)).unwrap();
    assert!(monitor.borrow().plateaued(10, 50, 10.0));
}

#[test]
fn identical_seeds_give_identical_traces() {
    let (arch, data) = task();
    let cfg = AdmmConfig { epochs: 30, seed: 9, ..Default::default() };
    let a = train(&arch, &data, None, &cfg, &mut |_| {}).unwrap();
    let b = train(&arch, &data, None, &cfg, &mut |_| {}).unwrap();
    assert_eq!(a.traces, b.traces);
    assert_eq!(a.state, b.state);
}

#[test]
fn dual_step_adds_rho_times_residual_exactly() {
    let (arch, data) = task();
    let cfg = AdmmConfig { rho: 2.5, ..Default::default() };
    let state = mlp::forward_init(&arch, &data, cfg.rho, cfg.nu, &mut Rng::new(1)).unwrap();
    let mut sw = Sweeper::new(&arch, &data, &cfg, state);
    for _ in 0..3 {
        sw.backward_sweep(None).unwrap();
        sw.forward_sweep(None).unwrap();
        sw.refresh();
        let before = sw.state.u.clone();
        let r = sw.dual_step();
        let expect = Matrix::from_fn(r.rows(), r.cols(), |i, j| before.get(i, j) + 2.5 * r.get(i, j));
        assert_eq!(sw.state.u, expect);
    }
}

/// Squared loss on targets the initial network already reproduces: every
/// penalty and the risk vanish, so every gradient is zero.
#[test]
fn stationary_state_is_a_fixed_point() {
    let mut arch = MlpArchitecture::new(vec![3, 4, 2]);
    arch.risk = RiskKind::Squared;
    let mut rng = Rng::new(4);
    let x = rng.normal_matrix(3, 6, 1.0);
    let probe = Dataset::new(x.clone(), Matrix::zeros(2, 6)).unwrap();
    let cfg = AdmmConfig::default();
    let st = mlp::forward_init(&arch, &probe, cfg.rho, cfg.nu, &mut Rng::new(cfg.seed)).unwrap();
    let data = Dataset::new(x, st.z[1].clone()).unwrap();
    let mut sw = Sweeper::new(&arch, &data, &cfg, st.clone());
    sw.backward_sweep(None).unwrap();
    sw.forward_sweep(None).unwrap();
    sw.refresh();
    sw.dual_step();
    for (a, b) in sw.state.w.iter().chain(&sw.state.b).chain(&sw.state.z).chain(&sw.state.a).zip(
        st.w.iter().chain(&st.b).chain(&st.z).chain(&st.a),
    ) {
        assert!(a.sub(b).max_abs() < 1e-8);
    }
    assert!(sw.state.u.max_abs() < 1e-8);
}

#[test]
fn update_order_and_anchors() {
    let arch = MlpArchitecture::new(vec![4, 5, 3, 2]);
    let data = separable_task(2);
    let data = Dataset::new(data.x, data.y).unwrap();
    let cfg = AdmmConfig::default();
    let state = mlp::forward_init(&arch, &data, 1.0, 1.0, &mut Rng::new(3)).unwrap();
    let initial = state.clone();
    let mut sw = Sweeper::new(&arch, &data, &cfg, state);

    let mut seen = Vec::new();
    let mut backward_ok = true;
    let mut obs = |_: Phase, b: Block, s: &MlpState| {
        seen.push(b);
        if let Block::A(i) = b {
            // layers at or below i still hold the iteration-start weights,
            // layers above have already been replaced
            for j in 0..s.w.len() {
                backward_ok &= (s.w[j] == initial.w[j]) == (j <= i);
            }
        }
    };
    sw.backward_sweep(Some(&mut obs)).unwrap();
    use Block::*;
    assert_eq!(seen, vec![Z(2), B(2), W(2), A(1), Z(1), B(1), W(1), A(0), Z(0), B(0), W(0)]);
    assert!(backward_ok);

    let barred = sw.state.clone();
    let mut seen = Vec::new();
    let mut forward_ok = true;
    let mut obs = |_: Phase, b: Block, s: &MlpState| {
        seen.push(b);
        if let A(i) = b {
            forward_ok &= s.a[i] == barred.a[i];
        }
    };
    sw.forward_sweep(Some(&mut obs)).unwrap();
    assert_eq!(seen, vec![W(0), B(0), Z(0), A(0), W(1), B(1), Z(1), A(1), W(2), B(2), Z(2)]);
    assert!(forward_ok);
}

#[test]
fn each_block_update_keeps_lagrangian_from_rising() {
    let (arch, data) = task();
    let cfg = AdmmConfig { rho: 1.0, ..Default::default() };
    let state = mlp::forward_init(&arch, &data, 1.0, 1.0, &mut Rng::new(5)).unwrap();
    let mut sw = Sweeper::new(&arch, &data, &cfg, state);
    for _ in 0..5 {
        let prev = RefCell::new(f64::INFINITY);
        let mut obs = |_: Phase, _: Block, s: &MlpState| {
            let l = mlp::lagrangian(s, &arch, &data);
            assert!(l <= *prev.borrow() + 1e-9);
            *prev.borrow_mut() = l;
        };
        sw.backward_sweep(Some(&mut obs)).unwrap();
        sw.forward_sweep(Some(&mut obs)).unwrap();
        sw.refresh();
        sw.dual_step();
    }
}

#[test]
fn gcn_masked_rows_have_zero_risk_gradient() {
    let g = sbm_graph(&SbmSpec { n_nodes: 30, ..Default::default() }, &mut Rng::new(1)).unwrap();
    let risk = Risk::new(RiskKind::CrossEntropy, Reduction::Sum).with_layout(Layout::Rows).with_mask(&g.train_mask);
    let z = Rng::new(2).normal_matrix(30, 2, 1.0);
    let grad = risk.gradient(&z, &g.labels);
    for i in 0..30 {
        if !g.train_mask[i] {
            assert!(grad.row(i).iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn gcn_small_graph_descends_and_keeps_shapes() {
    let g = sbm_graph(&SbmSpec { n_nodes: 60, ..Default::default() }, &mut Rng::new(8)).unwrap();
    let cfg = GcnConfig { hidden_dims: vec![8], epochs: 40, audit: true, ..Default::default() };
    let run = gcn_train(&g, &cfg, &mut |_| {}).unwrap();
    // the first dual step starts from U = 0 and may lift L once
    let l1 = run.traces[0].lagrangian;
    assert_eq!(rises(run.traces[1..].iter().map(|t| t.lagrangian), l1, 1e-9), 0);
    assert!(run.traces.iter().all(|t| t.max_certificate_gap <= 1e-10));
    assert_eq!(run.state.z[0].shape(), (60, 8));
    assert_eq!(run.state.z[1].shape(), (60, 2));
}

#[test]
fn gcn_zero_epochs_rejected() {
    let g = sbm_graph(&SbmSpec { n_nodes: 20, ..Default::default() }, &mut Rng::new(8)).unwrap();
    let cfg = GcnConfig { epochs: 0, ..Default::default() };
    assert!(gcn_train(&g, &cfg, &mut |_| {}).is_err());
}
