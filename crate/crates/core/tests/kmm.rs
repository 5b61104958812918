use mmdshift::kernels::KernelSpec;
use mmdshift::kmm::{project_feasible, solve_kmm, solve_problem, KmmConfig, KmmProblem};
use mmdshift::tensor::Matrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn assert_feasible(beta: &[f64], cfg: &KmmConfig) {
    let n = beta.len() as f64;
    let eps = cfg.slack_for(beta.len());
    let sum: f64 = beta.iter().sum();
    assert!((sum - n).abs() <= n * eps + 1e-9, "sum {sum} outside slab");
    for &b in beta {
        assert!((-1e-9..=cfg.upper_bound + 1e-9).contains(&b), "{b} outside box");
    }
}

#[test]
fn identical_sets_beat_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = Matrix::from_shape_simple_fn((40, 3), || rng.gen_range(-2.0..2.0));
    let cfg = KmmConfig::default();
    let problem = KmmProblem::new(&x, &x, &cfg.kernel).unwrap();
    let sol = solve_problem(&problem, &cfg).unwrap();
    assert!(sol.objective <= problem.objective(&vec![1.0; 40]) + 1e-6);
    assert_feasible(&sol.weights, &cfg);
}

#[test]
fn two_point_toy_matches_grid_search() {
    // test mass sits next to the first training point
    let train = ndarray::arr2(&[[0.0], [3.0]]);
    let test = ndarray::arr2(&[[0.1], [-0.1], [0.05], [0.0]]);
    let cfg = KmmConfig {
        kernel: KernelSpec::single(1.0).unwrap(),
        max_iters: 20_000,
        tolerance: 1e-12,
        ..KmmConfig::default()
    };
    let sol = solve_kmm(&train, &test, &cfg).unwrap();
    let (b1, b2) = (sol.weights[0], sol.weights[1]);
    assert!(b1 > 5.0 * b2, "{b1} vs {b2}");
    assert_feasible(&sol.weights, &cfg);

    // exhaustive grid over the feasible set
    let problem = KmmProblem::new(&train, &test, &cfg.kernel).unwrap();
    let eps = cfg.slack_for(2);
    let mut best = (f64::INFINITY, 0.0, 0.0);
    let steps = 2000;
    let top = 2.0 * (1.0 + eps);
    for i in 0..=steps {
        for j in 0..=steps {
            let (p, q) = (top * i as f64 / steps as f64, top * j as f64 / steps as f64);
            if ((p + q) - 2.0).abs() > 2.0 * eps {
                continue;
            }
            let o = problem.objective(&[p, q]);
            if o < best.0 {
                best = (o, p, q);
            }
        }
    }
    assert!(best.1 > 5.0 * best.2);
    assert!(sol.objective <= best.0 + 1e-6, "{} vs grid {}", sol.objective, best.0);
    assert!((b1 - best.1).abs() < 1e-2 && (b2 - best.2).abs() < 1e-2);
}

#[test]
fn matches_long_reference_run() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train = Matrix::from_shape_simple_fn((30, 2), || rng.gen_range(-2.0..2.0));
    let test = Matrix::from_shape_simple_fn((25, 2), || rng.gen_range(-1.0..3.0));
    let cfg = KmmConfig::default();
    let problem = KmmProblem::new(&train, &test, &cfg.kernel).unwrap();
    let sol = solve_problem(&problem, &cfg).unwrap();
    let reference = solve_problem(
        &problem,
        &KmmConfig {
            max_iters: 100 * cfg.max_iters,
            tolerance: 0.0,
            step_size: Some(0.5 * problem.default_step()),
            ..cfg.clone()
        },
    )
    .unwrap();
    assert!(
        (sol.objective - reference.objective).abs() < 1e-4,
        "{} ({} iters) vs {} ({} iters)",
        sol.objective,
        sol.iterations,
        reference.objective,
        reference.iterations
    );
    assert_feasible(&sol.weights, &cfg);
}

#[test]
fn weighted_discrepancy_drops_below_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let train = Matrix::from_shape_simple_fn((60, 1), || rng.gen_range(-3.0..3.0));
    let test = Matrix::from_shape_simple_fn((60, 1), || rng.gen_range(0.0..3.0));
    let cfg = KmmConfig::default();
    let problem = KmmProblem::new(&train, &test, &cfg.kernel).unwrap();
    let sol = solve_problem(&problem, &cfg).unwrap();
    assert!(problem.discrepancy(&sol.weights) < problem.discrepancy(&vec![1.0; 60]));
    let (slab, boxv) = sol.feasibility_residuals(&cfg);
    assert_eq!((slab, boxv), (0.0, 0.0));
}

proptest! {
    #[test]
    fn projection_is_feasible(v in proptest::collection::vec(-50.0f64..50.0, 1..40), bound in 1.0f64..20.0) {
        let cfg = KmmConfig { upper_bound: bound, ..KmmConfig::default() };
        let p = project_feasible(&v, &cfg).unwrap();
        assert_feasible(&p, &cfg);
    }

    #[test]
    fn projection_is_idempotent(v in proptest::collection::vec(-5.0f64..5.0, 1..20)) {
        let cfg = KmmConfig::default();
        let p = project_feasible(&v, &cfg).unwrap();
        let q = project_feasible(&p, &cfg).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}
