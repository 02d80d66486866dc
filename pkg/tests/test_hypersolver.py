import numpy as np
import pytest

from hyperrom import hypersolver, pann, tpwl
from hyperrom.errors import InputError
from hyperrom.reduction import PodBasis
from hyperrom.refmodel import LoadCase, NewtonSettings


def _basis(n=5, r=2, seed=0):
    Q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(n, r)))
    return PodBasis(Q, np.ones(r), 1.0)


def _case(basis, mags, label="interpolation"):
    B = np.zeros(basis.n)
    B[-1] = 1.0
    return LoadCase("c", label, B, mags)


class Saturating:
    """``f = atan(x)`` componentwise: targets beyond pi/2 have no solution."""

    r = 2

    def force_and_tangent(self, x):
        with np.errstate(over="ignore"):
            return np.arctan(x), np.diag(1.0 / (1.0 + x**2))


def test_zero_load_takes_no_iterations():
    basis = _basis()
    model = hypersolver.HyperModel(pann.build_model(2, 8, 2, seed=0), basis)
    trace = hypersolver.solve_reduced(model, _case(basis, [0.0]))
    assert trace.all_converged
    assert np.all(np.abs(trace.x_r[0]) <= 1e-12)
    assert trace.iterations[0] == 0


def test_single_point_tpwl_is_affine_and_solved_in_one_iteration():
    basis = _basis()
    K1 = np.array([[4.0, 1.0], [1.0, 3.0]])
    x1 = np.array([0.2, -0.1])
    f1 = np.array([0.5, 0.3])
    backend = tpwl.TpwlModel(x1[None], f1[None], K1[None])
    model = hypersolver.HyperModel(backend, basis)
    case = _case(basis, [2.0])
    trace = hypersolver.solve_reduced(model, case)
    B_r = basis.V.T @ case.input_matrix[:, 0]
    expected = np.linalg.solve(K1, 2.0 * B_r - (f1 - K1 @ x1))
    assert trace.iterations[0] == 1
    assert np.allclose(trace.x_r[0], expected, rtol=1e-12, atol=1e-14)


def test_solve_is_deterministic():
    basis = _basis()
    model = hypersolver.HyperModel(pann.build_model(2, 8, 2, seed=3), basis)
    case = _case(basis, np.linspace(0, 1, 6))
    a = hypersolver.solve_reduced(model, case)
    b = hypersolver.solve_reduced(model, case)
    assert np.array_equal(a.x_r, b.x_r) and np.array_equal(a.iterations, b.iterations)


def test_divergence_stops_the_case():
    basis = _basis()
    model = hypersolver.HyperModel(Saturating(), basis)
    B_r = basis.V.T @ _case(basis, [1.0]).input_matrix[:, 0]
    # at step 3 the largest component of the target reaches 2 > pi/2
    scale = 2.0 / np.abs(B_r).max()
    case = _case(basis, [0.1 * scale, 0.2 * scale, 0.5 * scale, scale, 0.3 * scale])
    trace = hypersolver.solve_reduced(model, case, NewtonSettings(max_iterations=20))
    assert trace.converged[:3].all()
    assert trace.diverged_at == 3
    assert not trace.converged[3:].any()
    assert np.isnan(trace.x_r[3:]).all()
    assert np.isnan(trace.residual[4:]).all()


def test_divergence_in_lead_in_marks_first_step():
    basis = _basis()
    model = hypersolver.HyperModel(Saturating(), basis)
    B_r = basis.V.T @ _case(basis, [1.0]).input_matrix[:, 0]
    big = 5.0 / np.abs(B_r).max()
    B = _case(basis, [0.0]).input_matrix
    case = LoadCase("c", "extrapolation-forward", B, [0.1], lead_in=[big])
    trace = hypersolver.solve_reduced(model, case, NewtonSettings(max_iterations=10))
    assert trace.diverged_at == 0 and not trace.converged.any()


def test_csv_round_trip(tmp_path):
    basis = _basis()
    model = hypersolver.HyperModel(Saturating(), basis)
    B_r = basis.V.T @ _case(basis, [1.0]).input_matrix[:, 0]
    scale = 2.0 / np.abs(B_r).max()
    trace = hypersolver.solve_reduced(model, _case(basis, [0.1 * scale, scale, 0.2 * scale]),
                                      NewtonSettings(max_iterations=20))
    trace.write_csv(tmp_path / "t.csv")
    back = hypersolver.SolveTrace.read_csv(tmp_path / "t.csv")
    assert np.array_equal(back.loads, trace.loads)
    assert np.array_equal(back.converged, trace.converged)
    assert np.array_equal(back.iterations, trace.iterations)
    assert np.array_equal(back.x_r, trace.x_r, equal_nan=True)
    assert np.array_equal(back.residual, trace.residual, equal_nan=True)
    assert back.diverged_at == trace.diverged_at == 1


def test_reduced_dimension_mismatch():
    with pytest.raises(InputError):
        hypersolver.HyperModel(pann.build_model(3, 8, 2, seed=0), _basis(r=2))


def test_load_dimension_mismatch():
    basis = _basis()
    model = hypersolver.HyperModel(Saturating(), basis)
    with pytest.raises(InputError):
        hypersolver.solve_reduced(model, LoadCase("c", "interpolation", np.ones(3), [1.0]))
