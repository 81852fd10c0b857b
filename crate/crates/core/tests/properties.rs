use blo_core::metrics::{kkt_residual, AnalyticOracle, VecSink};
use blo_core::par::ExecPolicy;
use blo_core::problem::fd_check_gradients;
use blo_core::solvers::{bagdc_step, run_solver, Clock, EtaRule, Method, RunOptions, ScheduleConfig, SolverState, StepSizes, StopCriteria};
use blo_core::testbeds::{
    corrupt_labels, make_multimin, make_quadratic, parse_idx_images, parse_idx_labels, synth_blobs, HyperCleaningProblem,
    QuadraticBilevel, SpdMatrix, Spectrum, Z0Spec,
};
use blo_core::vecmat::{dot, gaussian_vector, Vector};
use blo_core::{BilevelProblem, LinearOperator};
use proptest::prelude::*;

fn hypercleaning(seed: u64) -> HyperCleaningProblem {
    let train = corrupt_labels(&synth_blobs(3, 4, 10, 2.0, seed).unwrap(), 0.3, seed + 1).unwrap();
    let val = synth_blobs(3, 4, 5, 2.0, seed + 2).unwrap();
    HyperCleaningProblem::new(train, val, 1e-2).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn hypercleaning_hvp_is_symmetric(seed in 0u64..1000) {
        let p = hypercleaning(seed % 7);
        let x = gaussian_vector(p.ul_dim(), seed);
        let w = gaussian_vector(p.ll_dim(), seed + 1).scaled(0.5);
        let u = gaussian_vector(p.ll_dim(), seed + 2);
        let z = gaussian_vector(p.ll_dim(), seed + 3);
        let l = dot(&u, &p.hvp_yy_ll(&x, &w, &z));
        let r = dot(&z, &p.hvp_yy_ll(&x, &w, &u));
        prop_assert!((l - r).abs() <= 1e-8 * l.abs().max(r.abs()).max(1e-12));
    }

    #[test]
    fn hypercleaning_is_strongly_convex(seed in 0u64..1000) {
        let p = hypercleaning(seed % 5);
        let x = gaussian_vector(p.ul_dim(), seed).scaled(3.0);
        let w = gaussian_vector(p.ll_dim(), seed + 1);
        let u = gaussian_vector(p.ll_dim(), seed + 2);
        prop_assert!(dot(&u, &p.hvp_yy_ll(&x, &w, &u)) >= p.reg() * u.norm_sq() * (1.0 - 1e-12));
    }

    #[test]
    fn hypercleaning_policies_agree_bitwise(seed in 0u64..1000) {
        let train = synth_blobs(4, 6, 50, 2.0, seed).unwrap();
        let val = synth_blobs(4, 6, 10, 2.0, seed + 1).unwrap();
        let seq = HyperCleaningProblem::new(train.clone(), val.clone(), 1e-3).unwrap().with_policy(ExecPolicy::Sequential);
        let par = HyperCleaningProblem::new(train, val, 1e-3).unwrap().with_policy(ExecPolicy::Parallel);
        let x = gaussian_vector(seq.ul_dim(), seed);
        let w = gaussian_vector(seq.ll_dim(), seed + 1);
        let u = gaussian_vector(seq.ll_dim(), seed + 2);
        prop_assert_eq!(seq.grad_y_ll(&x, &w), par.grad_y_ll(&x, &w));
        prop_assert_eq!(seq.hvp_yy_ll(&x, &w, &u), par.hvp_yy_ll(&x, &w, &u));
        prop_assert_eq!(seq.ll_value(&x, &w).to_bits(), par.ll_value(&x, &w).to_bits());
    }

    /// With small-integer data every residual of the KKT system is exactly
    /// zero, so one dual-corrected step must return the same state bit for bit.
    #[test]
    fn bagdc_fixed_point_invariance(
        diag in prop::collection::vec(1u8..8, 1..6),
        ys in prop::collection::vec(-40i32..40, 6),
        alpha in 0.01f64..1.0,
        beta in 0.01f64..1.0,
        eta in 0.01f64..1.0,
    ) {
        let n = diag.len();
        let a = SpdMatrix::Diagonal(diag.iter().map(|&d| d as f64).collect());
        let y = Vector::from(ys[..n].iter().map(|&v| v as f64 / 4.0).collect::<Vec<_>>());
        let x = a.apply(&y);
        let z0 = x.add(&y);
        let p = QuadraticBilevel::new(a, z0).unwrap();
        let s = SolverState::new(x, y.clone(), y);
        prop_assert_eq!(kkt_residual(&p, &s.x, &s.y, &s.v), 0.0);
        let out = bagdc_step(&s, &p, StepSizes { mu: 0.0, alpha, beta, eta }, 1.0, EtaRule::Fixed).unwrap();
        prop_assert_eq!(&out.state.x, &s.x);
        prop_assert_eq!(&out.state.y, &s.y);
        prop_assert_eq!(&out.state.v, &s.v);
    }

    #[test]
    fn quadratic_y_star_solves_system(seed in 0u64..1000, n in 1usize..40) {
        let (p, o) = make_quadratic(n, Spectrum::LogUniform { min: 0.5, max: 5.0 }, Z0Spec::Random, seed).unwrap();
        let x = gaussian_vector(n, seed + 7);
        let y = o.y_star(&x);
        prop_assert!(p.matrix().apply(&y).distance(&x) <= 1e-10 * x.norm().max(1.0));
    }

    #[test]
    fn multimin_solution_set_is_a_line(x in -10.0f64..10.0, t in -1e3f64..1e3) {
        let (p, _) = make_multimin();
        let g = p.grad_y_ll(&[x], &[x, t]);
        prop_assert_eq!(g.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn corruption_preserves_features(rho in 0.0f64..=1.0, seed in 0u64..1000) {
        let ds = synth_blobs(5, 3, 20, 2.0, seed).unwrap();
        let c = corrupt_labels(&ds, rho, seed + 1).unwrap();
        let a: Vec<u64> = ds.features().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = c.features().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(a, b);
        let flipped = c.clean_mask().iter().filter(|m| !**m).count();
        prop_assert_eq!(flipped, (rho * 100.0 + 1e-9).floor() as usize);
    }

    #[test]
    fn idx_round_trip(count in 1usize..6, rows in 1usize..5, cols in 1usize..5, seed in 0u64..1000) {
        let pixels: Vec<u8> = (0..count * rows * cols).map(|i| ((i as u64 * 37 + seed * 11) % 256) as u8).collect();
        let labels: Vec<u8> = (0..count).map(|i| ((i as u64 + seed) % 10) as u8).collect();
        let mut img = vec![0, 0, 8, 3];
        for d in [count, rows, cols] {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
        img.extend_from_slice(&pixels);
        let mut lab = vec![0, 0, 8, 1];
        lab.extend_from_slice(&(count as u32).to_be_bytes());
        lab.extend_from_slice(&labels);

        let parsed = parse_idx_images(&img, "images").unwrap();
        prop_assert_eq!((parsed.count, parsed.rows, parsed.cols), (count, rows, cols));
        let back: Vec<u8> = parsed.pixels.iter().map(|v| (v * 255.0).round() as u8).collect();
        prop_assert_eq!(back, pixels);
        let parsed_labels: Vec<u8> = parse_idx_labels(&lab, "labels").unwrap().iter().map(|&l| l as u8).collect();
        prop_assert_eq!(parsed_labels, labels);
        prop_assert!(parse_idx_images(&img[..img.len() - 1], "images").is_err());
    }
}

#[test]
fn hypercleaning_fd_check_small_instance() {
    let train = synth_blobs(3, 4, 4, 2.0, 11).unwrap().slice(0..10).unwrap();
    let val = synth_blobs(3, 4, 2, 2.0, 12).unwrap();
    let p = HyperCleaningProblem::new(train, val, 1e-2).unwrap();
    for s in 0..5 {
        let x = gaussian_vector(p.ul_dim(), s);
        let w = gaussian_vector(p.ll_dim(), 100 + s).scaled(0.5);
        let r = fd_check_gradients(&p, &x, &w, 1e-5, 1e-3, s);
        assert!(r.all_passed(), "{r:?}");
    }
}

#[test]
fn zero_weights_limit() {
    let p = hypercleaning(1);
    let x = vec![-800.0; p.ul_dim()];
    let w = gaussian_vector(p.ll_dim(), 3);
    assert!(p.grad_y_ll(&x, &w).distance(&w.scaled(p.reg())) <= 1e-15);
}

#[test]
fn traces_are_deterministic_under_frozen_clock() {
    let (p, o) = make_quadratic(10, Spectrum::LogUniform { min: 0.5, max: 5.0 }, Z0Spec::Random, 3).unwrap();
    let stop = StopCriteria { max_iters: Some(300), ..Default::default() };
    let opts = RunOptions { clock: Clock::Frozen, trace_every: 1 };
    for (method, sched) in [
        (Method::Bagdc, ScheduleConfig::strongly_convex(0.05, 0.2, 0.2)),
        (Method::Rhg { t: 5 }, ScheduleConfig::strongly_convex(0.05, 0.2, 0.2)),
        (Method::ImplicitCg { t: 5, eps: 1e-8 }, ScheduleConfig::strongly_convex(0.05, 0.2, 0.2)),
    ] {
        let mut a = VecSink::default();
        let mut b = VecSink::default();
        run_solver(&p, &method, &sched, &stop, None, Some(&o), &mut a, opts);
        run_solver(&p, &method, &sched, &stop, None, Some(&o), &mut b, opts);
        let rows = |s: &VecSink| s.records.iter().map(|r| r.to_row().join(",")).collect::<Vec<_>>();
        assert_eq!(rows(&a), rows(&b));
        assert_eq!(a.records.len(), 300);
    }
}

#[test]
fn blobs_are_learnable() {
    let ds = synth_blobs(2, 2, 50, 6.0, 1).unwrap();
    let p = HyperCleaningProblem::new(ds.clone(), ds, 1e-3).unwrap();
    let x = vec![50.0; p.ul_dim()];
    let step = 1.0 / p.lipschitz_bound();
    let mut w = Vector::zeros(p.ll_dim());
    for _ in 0..500 {
        let g = p.grad_y_ll(&x, &w);
        w.axpy(-step, &g);
    }
    assert!(p.train_accuracy(&w) >= 0.95, "{}", p.train_accuracy(&w));
}
