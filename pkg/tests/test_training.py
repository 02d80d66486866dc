import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from helpers import toy_dataset
from hyperrom import pann, training
from hyperrom.dataset import SplitPlan
from hyperrom.errors import InputError
from hyperrom.reduction import ReducedDataset
from hyperrom.training import BalancingStrategy, EmaState, TrainConfig


class _Fixed(torch.nn.Module):
    """Stand-in model returning preset predictions."""

    def __init__(self, e, f, K):
        super().__init__()
        self.out = tuple(torch.as_tensor(np.asarray(v, float), dtype=torch.float64)
                         for v in (e, f, K))

    def forward(self, x, hessian=True):
        return self.out[0], self.out[1], self.out[2] if hessian else None


def _one(r, e=0.0, f=None, K=None):
    f = np.zeros((1, r)) if f is None else np.asarray(f, float).reshape(1, r)
    K = np.zeros((1, r, r)) if K is None else np.asarray(K, float).reshape(1, r, r)
    return ReducedDataset(np.zeros((1, r)), np.array([e]), f, K, np.ones(1, bool),
                          np.zeros((1, 1)), ["interpolation"])


def test_perfect_predictions_give_zero_losses():
    data = toy_dataset(5)
    model = _Fixed(data.e, data.f, data.K)
    assert [float(v) for v in training.losses(model, data)] == [0.0, 0.0, 0.0]


def test_force_loss_example():
    vals = training.losses(_Fixed([0.0], [[1.0]], [[[0.0]]]), _one(1))
    assert float(vals.F) == 0.5


def test_stiffness_loss_example():
    vals = training.losses(_Fixed([0.0], [[0.0, 0.0]], [[[1.0, 1.0], [1.0, 1.0]]]), _one(2))
    assert float(vals.K) == 0.5


def test_energy_loss_has_no_dimension_factor():
    vals = training.losses(_Fixed([2.0], [[0.0, 0.0]], np.zeros((1, 2, 2))), _one(2))
    assert float(vals.E) == 2.0


def test_missing_stiffness_targets():
    data = toy_dataset(3)
    data.has_K[1] = False
    with pytest.raises(InputError):
        training.losses(_Fixed(data.e, data.f, data.K), data)
    assert np.isnan(float(training.losses(_Fixed(data.e, data.f, data.K), data, ("E", "F")).K))


def test_same_scale_weights():
    assert np.allclose(training.same_scale_weights([1, 1, 1]), [1 / 3] * 3)
    assert np.allclose(training.same_scale_weights([1, 1, 0]), [0.25, 0.25, 0.5])
    assert np.allclose(training.same_scale_weights([0, 0, 0]), [1 / 3] * 3)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=3, max_size=3))
def test_same_scale_weights_property(values):
    w = training.same_scale_weights(values)
    assert abs(w.sum() - 1) <= 1e-12
    assert np.all((w >= 0) & (w <= 1))


def test_pinn_weights_example_and_equal_norms():
    assert training.pinn_weights([1, 1, 2]).tolist() == [4.0, 4.0, 2.0]
    norms = np.array([3e-4, 2.0, 7e5])
    scaled = training.pinn_weights(norms) * norms
    assert np.allclose(scaled, norms.sum(), rtol=1e-12)


def test_combine_kinds():
    vals = (torch.tensor(2.0), torch.tensor(3.0), torch.tensor(5.0))
    total, w = training.combine(vals, BalancingStrategy("plain_sum"))
    assert float(total) == 10.0 and w == (1.0, 1.0, 1.0)
    total, w = training.combine(vals, BalancingStrategy("hessian_only"))
    assert float(total) == 5.0 and w == (0.0, 0.0, 1.0)
    total, w = training.combine(vals, BalancingStrategy.preset("maximum"))
    assert w == (1.0, 9e2, 9e-8)
    _, w = training.combine(vals, BalancingStrategy("dynamic_same_scale"))
    assert sum(w) == pytest.approx(1.0)
    with pytest.raises(InputError):
        training.combine(vals, BalancingStrategy("dynamic_pinn"))
    with pytest.raises(InputError):
        training.combine(vals, BalancingStrategy("plain_sum"), grad_norms=[1, 1, 1])


def test_pinn_ema_starts_at_first_estimate():
    vals = (1.0, 1.0, 1.0)
    s = BalancingStrategy("dynamic_pinn")
    ema = EmaState()
    _, w = training.combine(vals, s, 0, [1, 1, 2], ema)
    assert w == (4.0, 4.0, 2.0)
    _, w = training.combine(vals, s, 1, [1, 3, 1], ema)
    assert np.allclose(w, 0.9 * np.array([4, 4, 2]) + 0.1 * np.array([5, 5 / 3, 5]))


def test_ramp():
    ramp = (50_000, 100_000)
    assert [training.ramp_factor(e, ramp) for e in (0, 50_000, 75_000, 100_000, 200_000)] == \
        [0.0, 0.0, 0.5, 1.0, 1.0]
    _, w = training.combine((1.0, 1.0, 1.0), BalancingStrategy.preset("intuitive", ramp=ramp),
                            75_000)
    assert w == (1.0, 1.0, 0.5e-9)


def test_strategy_validation():
    with pytest.raises(InputError):
        BalancingStrategy("mystery")
    with pytest.raises(InputError):
        BalancingStrategy(weights=(1.0, -1.0, 0.0))
    with pytest.raises(InputError):
        BalancingStrategy(ramp=(10, 5))


def test_aggregate_orthogonal_and_opposite():
    g1, g2 = np.array([1.0, 0.0]), np.array([0.0, 2.0])
    assert np.allclose(training.aggregate_nonconflicting([g1, g2]), g1 + g2)
    out = training.aggregate_nonconflicting([g1, -g1])
    assert out @ g1 >= -1e-12 and out @ -g1 >= -1e-12
    assert np.linalg.norm(out) <= 1e-12
    with pytest.raises(InputError):
        training.aggregate_nonconflicting([g1])


def test_aggregate_two_conflicting_removes_peer_components():
    g1, g2 = np.array([1.0, 0.0]), np.array([-1.0, 1.0])
    out = training.aggregate_nonconflicting([g1, g2])
    p1 = g1 - (g1 @ g2) / (g2 @ g2) * g2
    p2 = g2 - (g2 @ g1) / (g1 @ g1) * g1
    assert np.allclose(out, p1 + p2)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 4), st.integers(2, 12))
def test_aggregate_non_conflict_property(seed, k, dim):
    rng = np.random.default_rng(seed)
    G = rng.normal(size=(k, dim)) * rng.choice([1e-3, 1.0, 1e3], size=(k, 1))
    out = training.aggregate_nonconflicting(list(G))
    for g in G:
        assert out @ g >= -1e-9 * np.linalg.norm(out) * np.linalg.norm(g)


def test_aggregate_torch_matches_numpy():
    G = np.random.default_rng(0).normal(size=(3, 7))
    a = training.aggregate_nonconflicting(list(G))
    b = training.aggregate_nonconflicting([torch.tensor(g) for g in G])
    assert np.allclose(a, b.numpy())


def test_dataset_weights():
    data = toy_dataset(50)
    w = training.dataset_weights(data, "maximum")
    assert w[0] == 1.0
    peaks = [np.abs(data.e).max(), np.abs(data.f).max(), np.abs(data.K).max()]
    assert w[1] == float(f"{(peaks[0] / peaks[1]) ** 2:.0e}")
    sd = training.dataset_weights(data, "standard_deviation")
    assert sd[1] == float(f"{1 / data.f.std() ** 2:.0e}")
    with pytest.raises(InputError):
        training.dataset_weights(data, "median")


def _quick(epochs=30, **kw):
    return TrainConfig(epochs=epochs, learning_rate=1e-2, depth=2, width=6, n_inits=2, **kw)


def test_zero_epochs_keeps_initialization():
    data = toy_dataset(21)
    model = pann.build_model(2, 6, 2, 3)
    before = {k: v.clone() for k, v in model.state_dict().items()}
    _, best_epoch, hist, failed = training.train_model(
        model, data.subset(range(10)), data.subset(range(10, 21)), _quick(0),
        BalancingStrategy.preset("force_only"))
    assert best_epoch == 0 and failed is None and hist.shape == (1, 7)
    for k, v in model.state_dict().items():
        assert torch.equal(v, before[k])


@pytest.mark.parametrize("strategy", [
    BalancingStrategy.preset("force_only"),
    BalancingStrategy("dynamic_pinn", ramp=(5, 20)),
    BalancingStrategy.preset("intuitive", aggregation="nonconflicting"),
])
def test_training_is_deterministic_and_checkpoints_minimum(strategy):
    data = toy_dataset(31)
    plan = SplitPlan(test_cases=())
    runs = [training.train_initialization(data, [], plan, _quick(), strategy, 1) for _ in range(2)]
    assert np.array_equal(runs[0].history, runs[1].history)
    h = runs[0].history
    assert runs[0].best_val["F"] == h[:, 5].min()
    assert h[runs[0].best_epoch, 5] == h[:, 5].min()
    assert list(h[:, 0]) == list(range(31))
    # energy and stiffness are monitored even when not trained on
    assert np.all(np.isfinite(h[:, 1:]))


def test_failed_run_is_flagged_and_harness_continues(tmp_path):
    bad = toy_dataset(11)
    bad.f[3, 0] = np.nan
    runs = training.train(bad, [], SplitPlan(test_cases=()), _quick(5),
                          BalancingStrategy.preset("force_only"))
    assert len(runs) == 2
    flagged = [r for r in runs if r.failed]
    assert flagged and all(r.failed_epoch == 0 for r in flagged)


def test_trained_run_round_trip(tmp_path):
    data = toy_dataset(21)
    run = training.train_initialization(data, [toy_dataset(5, seed=9)], SplitPlan(test_cases=("t",)),
                                        _quick(5), BalancingStrategy("plain_sum"), 0)
    run.write(tmp_path / "run")
    back = training.TrainedRun.read(tmp_path / "run")
    assert np.array_equal(back.history, run.history)
    assert back.best_val == run.best_val and back.test == run.test
    assert set(run.test) == {"E", "F", "K"}
    x = data.x[:4]
    assert np.array_equal(back.model.predict(x)[1], run.model.predict(x)[1])
    header = (tmp_path / "run" / "history.csv").read_text().splitlines()[0]
    assert header == ",".join(training.HISTORY_COLUMNS)


def test_physical_init_and_standardizer_used():
    data = toy_dataset(21)
    cfg = _quick(0, standardize=True, physical_init=True)
    run = training.train_initialization(data, [], SplitPlan(test_cases=()), cfg,
                                        BalancingStrategy.preset("force_only"), 0)
    A = run.model.quadratic_matrix().detach().numpy()
    assert np.allclose(A, 0.5 * data.K[0], rtol=1e-10)
    train_idx = run.train_indices
    assert np.allclose(run.model.input_mean.numpy(), data.x[train_idx].mean(axis=0))


def test_train_config_validation():
    with pytest.raises(InputError):
        TrainConfig(epochs=-1)
    with pytest.raises(InputError):
        TrainConfig(learning_rate=0.0)
