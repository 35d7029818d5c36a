use proptest::prelude::*;

use fop_core::analysis::{rotation_angle, spectrum};
use fop_core::objectives::{finite_diff_grad_scaled, quadratic_pl, Booth, Himmelblau, Objective};
use fop_core::precond::PrecondMode;
use fop_core::tensor::{
    gaussian_mat, reshape_kernel_bwd, reshape_kernel_fwd, sym_eigendecompose, sym_eigenvalues, KernelTensor,
};
use fop_core::{
    BaseKind, HyperOptimizer, Mat, Optimizer, OptimizerConfig, ParamSpec, Preconditioner, PreconditionerConfig,
    Rng,
};

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig { cases: n, ..ProptestConfig::default() }
}

fn random_sym(n: usize, rng: &mut Rng) -> Mat {
    let b = gaussian_mat(n, n, 1.0, rng).unwrap();
    b.add(&b.transpose()).unwrap().scale(0.5)
}

fn modes() -> impl Strategy<Value = PrecondMode> {
    prop_oneof![
        Just(PrecondMode::Full),
        (1usize..6).prop_map(|rank| PrecondMode::LowRank { rank }),
        Just(PrecondMode::Normalized),
        (0.1f64..5.0).prop_map(|p_inf| PrecondMode::Stabilized { p_inf, delta: Default::default() }),
    ]
}

/// Preconditioner with a random `M` of the right shape for `mode`.
fn random_preconditioner(mode: PrecondMode, n: usize, rho: f64, rng: &mut Rng) -> Preconditioner {
    let cols = match mode {
        PrecondMode::LowRank { rank } => rank,
        _ => n,
    };
    let m = gaussian_mat(n, cols, 1.0, rng).unwrap();
    Preconditioner::with_matrix(m, PreconditionerConfig::with_mode(mode, rho)).unwrap()
}

fn kinds() -> impl Strategy<Value = OptimizerConfig> {
    prop_oneof![
        Just(OptimizerConfig::sgd(0.1)),
        Just(OptimizerConfig::momentum(0.1, 0.9)),
        Just(OptimizerConfig::adam(0.1)),
        Just(OptimizerConfig::new(
            fop_core::OptimizerKind::Shd { hyper_lr: 0.01, hyper_optimizer: HyperOptimizer::PlainSgd },
            0.1
        )),
        Just(OptimizerConfig::new(
            fop_core::OptimizerKind::Pphd { hyper_lr: 0.01, hyper_optimizer: HyperOptimizer::adam() },
            0.1
        )),
        modes().prop_map(|m| OptimizerConfig::fop(0.1, BaseKind::Sgd, PreconditionerConfig::with_mode(m, 0.01))),
        Just(OptimizerConfig::fop(
            0.1,
            BaseKind::Momentum { alpha: 0.5 },
            PreconditionerConfig::full(0.01).hyper_optimizer(HyperOptimizer::adam())
        )),
    ]
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn eigendecomposition_reconstructs(n in 1usize..12, seed in any::<u64>()) {
        let a = random_sym(n, &mut Rng::new(seed));
        let eig = sym_eigendecompose(&a).unwrap();
        let err = eig.reconstruct().sub(&a).unwrap().frobenius_norm();
        prop_assert!(err < 1e-8 * a.frobenius_norm().max(1e-300), "reconstruction error {err:e}");
        let q = &eig.eigenvectors;
        let qtq = q.t_matmul(q).unwrap();
        prop_assert!(qtq.sub(&Mat::identity(n)).unwrap().frobenius_norm() < 1e-9);
        prop_assert!(eig.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn outer_and_inner_gram_spectra_agree(n in 2usize..10, k in 1usize..10, seed in any::<u64>()) {
        let k = k.min(n);
        let m = gaussian_mat(n, k, 1.0, &mut Rng::new(seed)).unwrap();
        let outer = spectrum(0, &m.gram_outer()).unwrap().eigenvalues;
        let inner = spectrum(0, &m.t_matmul(&m).unwrap()).unwrap().eigenvalues;
        for (a, b) in outer.iter().zip(&inner) {
            prop_assert!((a - b).abs() <= 1e-8 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn kernel_reshape_round_trips(i in 1usize..6, o in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..9 * i * o).map(|_| rng.normal()).collect();
        let t = KernelTensor::new(3, i, o, data).unwrap();
        let m = reshape_kernel_fwd(&t);
        prop_assert_eq!(m.shape(), (9, i * o));
        // (a, b, i, o) lands on row a·3 + b, column i·O + o
        prop_assert_eq!(m[(2 * 3 + 1, (i - 1) * o)], t.get(2, 1, i - 1, 0));
        let back = reshape_kernel_bwd(&m, 3, i, o).unwrap();
        prop_assert!(back.data.iter().zip(&t.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn rng_streams_are_reproducible(seed in any::<u64>(), stream in any::<u64>()) {
        let draw = |s: u64| {
            let mut r = Rng::new(s).fork(stream);
            (0..8).map(|_| r.next_u64()).collect::<Vec<_>>()
        };
        prop_assert_eq!(draw(seed), draw(seed));
    }

    #[test]
    fn toy_gradients_match_finite_differences(x in -6.0f64..6.0, y in -6.0f64..6.0) {
        for obj in [&Booth as &dyn Objective, &Himmelblau] {
            let g = obj.gradient(&[x, y]);
            let fd = finite_diff_grad_scaled(|t| obj.value(t), &[x, y], 1e-5);
            let diff = ((g[0] - fd[0]).powi(2) + (g[1] - fd[1]).powi(2)).sqrt();
            let scale = (g[0].powi(2) + g[1].powi(2)).sqrt().max(1.0);
            prop_assert!(diff / scale < 1e-6, "{g:?} vs {fd:?}");
        }
    }

    #[test]
    fn quadratic_satisfies_pl(n in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let b = gaussian_mat(n, n, 1.0, &mut rng).unwrap();
        let a = b.t_matmul(&b).unwrap().add(&Mat::identity(n).scale(0.1)).unwrap();
        let star: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let q = quadratic_pl(a, star).unwrap();
        let theta: Vec<f64> = (0..n).map(|_| 3.0 * rng.normal()).collect();
        let g = q.gradient(&theta);
        let lhs = 0.5 * g.iter().map(|v| v * v).sum::<f64>();
        let rhs = q.mu * q.value(&theta);
        prop_assert!(lhs >= rhs * (1.0 - 1e-9) - 1e-12, "{lhs} < {rhs}");
    }

    #[test]
    fn effective_preconditioner_is_psd(mode in modes(), n in 1usize..10, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let p = random_preconditioner(mode, n, 0.1, &mut rng);
        let eff = p.effective_matrix().unwrap();
        prop_assert!(eff.asymmetry() < 1e-12 * eff.frobenius_norm().max(1.0));
        let min = *sym_eigenvalues(&eff).unwrap().last().unwrap();
        prop_assert!(min >= -1e-10, "λ_min = {min:e}");
    }

    #[test]
    fn preconditioning_never_reverses_the_gradient(mode in modes(), n in 1usize..10, c in 1usize..4, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let p = random_preconditioner(mode, n, 0.1, &mut rng);
        let g = gaussian_mat(n, c, 1.0, &mut rng).unwrap();
        let pg = p.apply(&g).unwrap();
        let inner = g.dot(&pg).unwrap();
        prop_assert!(inner >= -1e-12 * g.frobenius_norm().powi(2) * pg.frobenius_norm().max(1.0), "⟨g, Pg⟩ = {inner:e}");
        if let Ok(angle) = rotation_angle(g.data(), pg.data()) {
            prop_assert!(angle <= 90.0 + 1e-9, "angle {angle}");
        }
    }

    #[test]
    fn normalized_mode_has_gradient_descent_norm(n in 1usize..12, seed in any::<u64>()) {
        let p = random_preconditioner(PrecondMode::Normalized, n, 0.1, &mut Rng::new(seed));
        let norm = p.effective_matrix().unwrap().frobenius_norm();
        prop_assert!((norm - (n as f64).sqrt()).abs() < 1e-10, "{norm}");
    }

    #[test]
    fn frobenius_of_identity_is_sqrt_n(n in 1usize..=1024) {
        prop_assert!((Mat::identity(n).frobenius_norm() - (n as f64).sqrt()).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn zero_hyper_lr_freezes_m(mode in modes(), n in 1usize..6, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let mut p = random_preconditioner(mode.clone(), n, 0.0, &mut rng);
        let m0 = p.m().clone();
        for _ in 0..1000 {
            let g = gaussian_mat(n, 2, 1.0, &mut rng).unwrap();
            p.observe(&g, 0.1).unwrap();
        }
        prop_assert!(p.m().data().iter().zip(m0.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn zero_gradients_leave_parameters(cfg in kinds(), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let specs = [ParamSpec::matrix(3, 2, 0), ParamSpec::bias(2, 0)];
        let mut opt = Optimizer::new(cfg, &specs, &mut rng).unwrap();
        let mut params = vec![gaussian_mat(3, 2, 1.0, &mut rng).unwrap(), gaussian_mat(1, 2, 1.0, &mut rng).unwrap()];
        let before = params.clone();
        let zeros = [Mat::zeros(3, 2), Mat::zeros(1, 2)];
        for _ in 0..50 {
            opt.step(&mut params, &zeros).unwrap();
        }
        prop_assert_eq!(params, before);
    }

    #[test]
    fn momentum_without_memory_is_sgd(lr in 0.0f64..1.0, seed in any::<u64>(), fop in any::<bool>()) {
        let (with_alpha, plain) = if fop {
            let pre = PreconditionerConfig::full(0.01);
            (
                OptimizerConfig::fop(lr, BaseKind::Momentum { alpha: 0.0 }, pre.clone()),
                OptimizerConfig::fop(lr, BaseKind::Sgd, pre),
            )
        } else {
            (OptimizerConfig::momentum(lr, 0.0), OptimizerConfig::sgd(lr))
        };
        let specs = [ParamSpec::matrix(4, 3, 0)];
        let mut a = Optimizer::new(with_alpha, &specs, &mut Rng::new(0)).unwrap();
        let mut b = Optimizer::new(plain, &specs, &mut Rng::new(0)).unwrap();
        let mut rng = Rng::new(seed);
        let mut pa = vec![gaussian_mat(4, 3, 1.0, &mut rng).unwrap()];
        let mut pb = pa.clone();
        for _ in 0..100 {
            let g = [gaussian_mat(4, 3, 1.0, &mut rng).unwrap()];
            a.step(&mut pa, &g).unwrap();
            b.step(&mut pb, &g).unwrap();
        }
        prop_assert_eq!(pa, pb);
    }
}
