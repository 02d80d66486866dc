import numpy as np
import pytest

from hyperrom import reduction, refmodel
from hyperrom.dataset import SnapshotSet
from hyperrom.errors import InputError


def _snapshots(n=12, m=30, seed=0):
    rng = np.random.default_rng(seed)
    modes = rng.normal(size=(n, 3)) * np.array([10.0, 1.0, 0.1])
    return modes @ rng.normal(size=(3, m))


def test_single_direction():
    b = reduction.compute_basis(np.array([[1.0, 0.0], [0.0, 0.0]]), 1)
    assert np.allclose(np.abs(b.V[:, 0]), [1.0, 0.0])
    assert b.V[0, 0] == 1.0
    assert b.sigma_normalized.tolist() == [1.0]


def test_full_rank_energy_is_one():
    X = np.random.default_rng(1).normal(size=(5, 8))
    b = reduction.compute_basis(X, 5)
    assert b.cumulative_energy == pytest.approx(1.0, abs=1e-12)


def test_basis_properties_and_sign_rule():
    b = reduction.compute_basis(_snapshots(), 3)
    assert np.abs(b.V.T @ b.V - np.eye(3)).max() <= 1e-10
    assert np.all(np.diff(b.sigma_normalized) <= 0)
    assert b.cumulative_energy == pytest.approx(b.sigma_normalized.sum())
    pivots = np.argmax(np.abs(b.V), axis=0)
    assert np.all(b.V[pivots, range(3)] > 0)


def test_rank_deficiency_flag():
    X = _snapshots()
    assert not reduction.compute_basis(X, 3).rank_deficient
    assert reduction.compute_basis(X, 5).rank_deficient


@pytest.mark.parametrize("r", [0, 13])
def test_r_out_of_range(r):
    with pytest.raises(InputError):
        reduction.compute_basis(_snapshots(), r)


def test_rank_for_energy():
    X = _snapshots()
    s = reduction.normalized_singular_values(X)
    assert reduction.rank_for_energy(X, s[0]) == 1
    assert reduction.rank_for_energy(X, s[0] + 1e-6) == 2
    # the remaining singular values are round-off
    assert reduction.rank_for_energy(X, 1.0) == 3


def _set(X, K=None):
    n, m = X.shape
    K = np.broadcast_to(np.eye(n), (m, n, n)).copy() if K is None else K
    return SnapshotSet(X.T.copy(), np.arange(m, dtype=float), X.T.copy(), K, np.ones(m, bool),
                       np.zeros((m, 1)))


def test_projection_identities():
    X = _snapshots()
    b = reduction.compute_basis(X, 3)
    y = np.random.default_rng(3).normal(size=(4, 3))
    snaps = _set((y @ b.V.T).T)
    red = reduction.project(b, snaps)
    assert np.abs(red.x - y).max() <= 1e-12
    assert np.all(np.linalg.norm(red.f, axis=1) <= np.linalg.norm(snaps.f, axis=1) + 1e-12)
    assert np.array_equal(red.e, snaps.e)


def test_projected_stiffness_spd_and_symmetric():
    X = _snapshots()
    b = reduction.compute_basis(X, 3)
    rng = np.random.default_rng(4)
    Ks = []
    for _ in range(X.shape[1]):
        L = rng.normal(size=(12, 12))
        Ks.append(L @ L.T + 1e-3 * np.eye(12))
    red = reduction.project(b, _set(X, np.array(Ks)))
    for K in red.K:
        assert np.array_equal(K, K.T)
        lam = np.linalg.eigvalsh(K)
        assert lam.min() >= -1e-10 * np.abs(lam).max()


def test_projection_dimension_mismatch():
    b = reduction.compute_basis(_snapshots(), 2)
    with pytest.raises(InputError):
        reduction.project(b, _set(np.ones((5, 3))))


@pytest.fixture(scope="module")
def truss_states():
    spec = refmodel.Lattice(bays=8)
    g = refmodel.cantilever_lattice(spec)
    B = refmodel.point_load_matrix(g, spec.tip_node)
    cases = refmodel.ramp_load_cases(B, 25600.0, 20)
    return np.concatenate([refmodel.solve_full(g, c).x for c in cases])


@pytest.mark.parametrize("r", [1, 2, 3, 4])
def test_reconstruction_bounded_by_lost_energy(truss_states, r):
    b = reduction.compute_basis(truss_states.T, r)
    err = reduction.reconstruction_error(b, truss_states)
    assert err.max() <= 10 * (1 - b.cumulative_energy)


def test_reduced_coordinates_descend_in_scale(truss_states):
    b = reduction.compute_basis(truss_states.T, 4)
    peaks = np.abs(b.reduce(truss_states)).max(axis=0)
    assert np.all(np.diff(peaks) < 0)


def test_persistence(tmp_path):
    X = _snapshots()
    b = reduction.compute_basis(X, 3)
    back = reduction.PodBasis.load(b.save(tmp_path / "basis.hrmod"))
    assert np.array_equal(back.V, b.V) and back.cumulative_energy == b.cumulative_energy
    red = reduction.project(b, _set(X))
    red2 = reduction.ReducedDataset.load(red.save(tmp_path / "red"))
    assert np.array_equal(red2.K, red.K) and red2.labels == red.labels
