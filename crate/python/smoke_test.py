"""Quick end-to-end check of the Python bindings.

Build first with `cargo build --release -p ensemble-py`, then copy
`target/release/libensemble_pocs.so` to `python/ensemble_pocs.so`.
"""

import math
import sys

import ensemble_pocs as ep


def main():
    params = ep.sample_parameters(-1.0, 1.0, 21)
    assert len(params) == 21 and params[0] == -1.0 and params[-1] == 1.0

    grid = ep.TimeGrid(1.0, 1000)
    model = ep.LinearEnsembleModel.harmonic_oscillator_2in(params, 1.0)
    boundary = ep.BoundaryPair.identical([1.0, 0.0], [0.0, 1.0], len(params))

    spectral = ep.solve_spectral(model, grid, boundary, 50)
    traj = ep.simulate_linear(model, spectral.control, [[1.0, 0.0]] * len(params))
    errors = traj.terminal_errors([[0.0, 1.0]] * len(params))
    print(f"spectral: {spectral.classification}, max error {max(errors):.3e}")
    assert max(errors) < 1e-2

    iterative = ep.solve_feasible(model, grid, boundary, max_iterations=2000, checkpoints=[100])
    print(f"iterative: {iterative.classification}, {iterative.iterations} iterations, "
          f"max residual {iterative.max_residual:.3e}")
    assert iterative.checkpoints[0][0] == 100
    assert iterative.checkpoints[0][1].channels == 2

    single = ep.LinearEnsembleModel.harmonic_oscillator_2in([0.3], 1.0)
    one = ep.BoundaryPair([[1.0, 0.0]], [[0.0, 1.0]])
    r = ep.solve_min_energy(single, grid, one, max_iterations=5)
    print(f"min energy: {r.iterations} iteration(s), energy {r.energy:.6f}")
    assert r.max_residual < 1e-8

    ball = ep.solve_constrained(model, grid, boundary, "ball", 5.0, max_iterations=500)
    print(f"ball M=5: norm {ball.control.norm():.4f}")

    # An even count keeps beta = 0, which one input cannot steer, out of the set.
    even = ep.sample_parameters(-1.0, 1.0, 20)
    verdict, evidence = ep.assess_reachability(
        ep.LinearEnsembleModel.harmonic_oscillator_1in(even, 1.0),
        grid, ep.BoundaryPair.identical([1.0, 0.0], [0.0, 1.0], 20),
        method="spectral", order=50,
    )
    print(f"single-input reachability: {verdict} (residual {evidence.max_residual:.3e})")

    spins = ep.sample_parameters(-1.0, 1.0, 11)
    bloch = ep.BlochModel(spins, 1.0)
    g = ep.TimeGrid(1.0, 200)
    flip = ep.BoundaryPair.identical([0.0, 0.0, -1.0], [0.0, 0.0, 1.0], len(spins))
    b = ep.solve_bilinear(bloch, g, flip, damping=0.5, warm_start=True,
                          relinearize="frozen_model", seed=[math.pi, 0.0])
    print(f"bloch: converged={b.converged}, {b.outer_iterations} outer, "
          f"max error {b.max_terminal_error():.3e}")
    norms = [math.sqrt(sum(x * x for x in b.trajectory.terminal(i))) for i in range(len(spins))]
    assert all(abs(n - 1.0) < 1e-4 for n in norms)

    try:
        ep.sample_parameters(0.0, 1.0, 0)
    except ep.EnsembleError as e:
        print(f"rejected empty ensemble: {e}")
    else:
        raise AssertionError("expected EnsembleError")

    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
