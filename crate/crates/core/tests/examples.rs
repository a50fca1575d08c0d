use ensemble_core::*;
use nalgebra::{DVector, SymmetricEigen};

fn example1() -> (TimeGrid, LinearEnsembleModel, BoundaryPair) {
    let grid = make_time_grid(1.0, 1000).unwrap();
    let params = sample_parameters(-1.0, 1.0, 21).unwrap();
    let model = LinearEnsembleModel::harmonic_oscillator_2in(params, 1.0).unwrap();
    let b = BoundaryPair::identical(&[1.0, 0.0], &[0.0, 1.0], 21).unwrap();
    (grid, model, b)
}

#[test]
fn min_energy_uses_less_energy_than_a_shifted_start() {
    let (grid, model, b) = example1();
    let opts = SolverOptions::default().with_max_iterations(100_000);
    let lean = solve_min_energy(&model, &grid, &b, &opts).unwrap();
    let ones = ControlSignal::constant(grid, &[1.0, 1.0]).unwrap();
    let shifted = solve_feasible(&model, &grid, &b, &opts.with_initial_control(ones)).unwrap();
    assert!(
        lean.energy <= shifted.energy + 1e-9,
        "{} vs {}",
        lean.energy,
        shifted.energy
    );
}

/// The closed-form limit and 10⁵ iterations from zero differ only along
/// eigen-directions of `W` that contract too slowly to settle in that budget.
#[test]
fn spectral_limit_from_zero_differs_only_in_slow_directions() {
    let (grid, model, b) = example1();
    let basis = legendre_basis(50, &grid).unwrap();
    let op = build_spectral(&model, &grid, &b, &basis, &SolverOptions::default()).unwrap();
    let spectral = to_coordinates(
        &solve_spectral(&op, &Coordinates::zeros(50, 2)).unwrap(),
        &basis,
    )
    .unwrap();
    let iterations = 100_000;
    let opts = SolverOptions::default().with_max_iterations(iterations);
    let iterative = solve_min_energy(&model, &grid, &b, &opts).unwrap().control;
    let mu = to_coordinates(&iterative, &basis).unwrap();
    let outside = iterative
        .distance(&from_coordinates(&mu, &basis).unwrap())
        .unwrap();

    let d = DVector::from_vec(spectral.coeffs) - DVector::from_vec(mu.coeffs);
    let eig = SymmetricEigen::new(op.w.clone());
    let (mut slow, mut fast) = (0.0, 0.0);
    let mut slow_dims = 0;
    for (j, &w) in eig.eigenvalues.iter().enumerate() {
        let c = eig.eigenvectors.column(j).dot(&d);
        // a component that is still above 1e-6 of its start after the budget
        if (1.0 - w.max(0.0)).powi(iterations as i32) > 1e-6 && w > 1e-8 {
            slow += c * c;
            slow_dims += 1;
        } else {
            fast += c * c;
        }
    }
    let settled = (fast + outside * outside).sqrt();
    assert!(settled < 1e-3, "gap outside slow directions {settled:e}");
    assert!(slow.sqrt() > 1.0, "slow part {:e}", slow.sqrt());
    assert!(slow_dims <= 4, "{slow_dims} slow directions");
}

#[test]
fn spectral_limit_from_feasible_point_stays_feasible() {
    let grid = make_time_grid(1.0, 400).unwrap();
    let model = LinearEnsembleModel::harmonic_oscillator_2in(vec![-0.5, 0.5], 1.0).unwrap();
    let basis = legendre_basis(12, &grid).unwrap();
    // targets generated by a control that the basis represents exactly
    let witness = ControlSignal::from_fn(grid, 2, |t, u| {
        u[0] = 1.0 - 2.0 * t;
        u[1] = t * t
    });
    let x0 = vec![DVector::from_column_slice(&[1.0, 0.0]); 2];
    let traj = simulate_linear(&model, &witness, &x0).unwrap();
    let xf = (0..2)
        .map(|i| DVector::from_column_slice(traj.state(i, grid.n_steps())))
        .collect();
    let b = BoundaryPair::new(x0, xf).unwrap();
    let op = build_spectral(&model, &grid, &b, &basis, &SolverOptions::default()).unwrap();
    let mu0 = to_coordinates(&witness, &basis).unwrap();
    let u = solve_spectral(&op, &mu0).unwrap();
    for set in affine_sets(&model, &grid, &b).unwrap() {
        assert!(set.residual(&u).unwrap() <= 1e-6);
    }
}

#[test]
fn huge_ball_is_inactive() {
    let grid = make_time_grid(1.0, 500).unwrap();
    let model = LinearEnsembleModel::harmonic_oscillator_2in(vec![-3.0, 0.0, 3.0], 1.0).unwrap();
    let b = BoundaryPair::identical(&[1.0, 0.0], &[0.0, 1.0], 3).unwrap();
    let opts = SolverOptions::default().with_max_iterations(100_000);
    let free = solve_feasible(&model, &grid, &b, &opts).unwrap();
    let ball = ConstraintSet::Ball(EnergyBall::new(1e6, true).unwrap());
    let capped = solve_constrained(&model, &grid, &b, ball, &opts).unwrap();
    assert_eq!(free.classification, Classification::ConvergedFeasible);
    assert_eq!(capped.classification, Classification::ConvergedFeasible);
    let x0 = b.initial.clone();
    let terminal = |u: &ControlSignal| {
        let t = simulate_linear(&model, u, &x0).unwrap();
        t.terminal_errors(&b.target)
    };
    for (a, c) in terminal(&free.control)
        .iter()
        .zip(terminal(&capped.control))
    {
        assert!((a - c).abs() < 1e-6, "{a} vs {c}");
    }
}

#[test]
fn dykstra_from_zero_finds_the_min_energy_control() {
    let grid = make_time_grid(1.0, 200).unwrap();
    let model = LinearEnsembleModel::harmonic_oscillator_2in(vec![-1.0, 0.0, 1.0], 1.0).unwrap();
    let b = BoundaryPair::identical(&[1.0, 0.0], &[0.0, 1.0], 3).unwrap();
    let mut opts = SolverOptions::default().with_max_iterations(200_000);
    opts.residual_tol = 1e-13;
    opts.stall_threshold = 1e-15;
    let sets: Vec<ConstraintSet> = affine_sets(&model, &grid, &b)
        .unwrap()
        .into_iter()
        .map(ConstraintSet::Affine)
        .collect();
    let d = solve_dykstra(&sets, &ControlSignal::zeros(grid, 2), &opts).unwrap();
    let w = solve_min_energy(&model, &grid, &b, &opts).unwrap();
    let gap = d.control.distance(&w.control).unwrap();
    assert!(gap < 1e-6, "gap {gap:e}");
}

#[test]
fn dykstra_ball_and_mean_constraint() {
    // ∫u = 0.5 with ‖u‖ ≤ 1 from u0 ≡ 2: the constant 0.5 is the nearest point
    let grid = make_time_grid(1.0, 100).unwrap();
    let model =
        LinearEnsembleModel::time_invariant(vec![1.0], grid, 1, 1, |_| vec![0.0], |_| vec![1.0])
            .unwrap();
    let b = BoundaryPair::identical(&[0.0], &[0.5], 1).unwrap();
    let mean = affine_sets(&model, &grid, &b).unwrap().remove(0);
    let sets = [
        ConstraintSet::Ball(EnergyBall::new(1.0, false).unwrap()),
        ConstraintSet::Affine(mean),
    ];
    let u0 = ControlSignal::constant(grid, &[2.0]).unwrap();
    let r = solve_dykstra(&sets, &u0, &SolverOptions::default()).unwrap();
    assert!(r.control.samples().iter().all(|&x| (x - 0.5).abs() < 1e-4));
}

#[test]
fn example1_is_reachable() {
    let (grid, model, b) = example1();
    let r = assess_reachability(
        &model,
        &grid,
        &b,
        &SolverOptions::default(),
        ReachabilityMethod::Spectral { order: 50 },
        DEFAULT_REACH_TOL,
    )
    .unwrap();
    assert_eq!(r.verdict, Verdict::Reachable);
}

#[test]
fn checkpoint_errors_shrink_on_example1() {
    let (grid, model, b) = example1();
    let mut opts = SolverOptions::default().with_max_iterations(10_000);
    opts.checkpoints = vec![100, 1000, 10_000];
    let r = solve_feasible(
        &model,
        &grid,
        &b,
        &opts.with_initial_control(ControlSignal::constant(grid, &[1.0, 1.0]).unwrap()),
    )
    .unwrap();
    let sets = affine_sets(&model, &grid, &b).unwrap();
    let worst: Vec<f64> = r
        .checkpoints
        .iter()
        .map(|(_, u)| {
            sets.iter()
                .map(|s| s.residual(u).unwrap())
                .fold(0.0, f64::max)
        })
        .collect();
    assert_eq!(worst.len(), 3);
    assert!(worst.windows(2).all(|w| w[1] < w[0]), "{worst:?}");
}
