import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import small_lattice
from hyperrom import archive, refmodel
from hyperrom.dataset import SnapshotSet, SplitPlan, read_hrsnap, split, split_indices
from hyperrom.errors import FormatError, InputError
from hyperrom.reduction import ReducedDataset


@pytest.fixture
def three_steps():
    g = small_lattice(2)
    B = refmodel.point_load_matrix(g, refmodel.Lattice(bays=2).tip_node)
    case = refmodel.LoadCase("interpolation", "interpolation", B, [0.0, 1e3, 2e3])
    return refmodel.solve_full(g, case)


def test_round_trip_is_bitwise(tmp_path, three_steps):
    path = three_steps.save(tmp_path / "s")
    back = SnapshotSet.load(path)
    for attr in ("x", "e", "f", "K", "has_K", "load_values"):
        assert np.array_equal(getattr(back, attr), getattr(three_steps, attr))
    assert back.name == "interpolation"
    assert back.provenance["geometry"] == three_steps.provenance["geometry"]


def test_first_record_is_rest_state(three_steps):
    assert np.all(three_steps.x[0] == 0.0)
    assert len(three_steps.states) == len(three_steps.load_values) == 3


def test_stripped_stiffness_round_trip(tmp_path, three_steps):
    part = three_steps.strip_stiffness([1])
    back = SnapshotSet.load(part.save(tmp_path / "p"))
    assert back.has_K.tolist() == [True, False, True]
    assert back.states[1].K is None
    assert np.array_equal(back.K[2], three_steps.K[2])


def test_truncated_file(tmp_path, three_steps):
    path = three_steps.save(tmp_path / "s")
    raw = path.read_bytes()
    for cut in (10, len(raw) // 2, len(raw) - 1):
        path.write_bytes(raw[:cut])
        with pytest.raises(FormatError):
            read_hrsnap(path)


def test_corrupt_and_version_mismatch(tmp_path, three_steps):
    path = three_steps.save(tmp_path / "s")
    raw = bytearray(path.read_bytes())
    flipped = bytearray(raw)
    flipped[40] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(FormatError, match="checksum"):
        read_hrsnap(path)
    versioned = bytearray(raw)
    versioned[8:12] = struct.pack("<I", 99)
    path.write_bytes(bytes(versioned))
    with pytest.raises(FormatError, match="version"):
        read_hrsnap(path)
    path.write_bytes(b"NOTASNAP" + bytes(raw[8:]))
    with pytest.raises(FormatError, match="magic"):
        read_hrsnap(path)


def test_model_archive_round_trip_and_errors(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi])}
    path = archive.save_arrays(tmp_path / "m.hrmod", "thing", arrays, {"k": 1})
    back, meta = archive.load_arrays(path, "thing")
    assert meta == {"k": 1}
    assert all(np.array_equal(back[k], arrays[k]) for k in arrays)
    with pytest.raises(FormatError):
        archive.load_arrays(path, "other")
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        archive.load_arrays(path)


def test_split_sizes_and_determinism():
    plan = SplitPlan(seed=0)
    tr, va = split_indices(101, plan, 0)
    assert (len(tr), len(va)) == (51, 50)
    assert not set(tr) & set(va)
    assert set(tr) | set(va) == set(range(101))
    tr2, va2 = split_indices(101, plan, 0)
    assert np.array_equal(tr, tr2) and np.array_equal(va, va2)


def test_split_differs_between_initializations():
    for seed in range(10):
        plan = SplitPlan(seed=seed)
        assert not np.array_equal(split_indices(101, plan, 0)[0], split_indices(101, plan, 1)[0])


def test_split_test_set_identical_across_initializations():
    def data(m, tag):
        rng = np.random.default_rng(len(tag))
        return ReducedDataset(rng.normal(size=(m, 2)), np.zeros(m), np.zeros((m, 2)),
                              np.zeros((m, 2, 2)), np.ones(m, bool), np.zeros((m, 1)),
                              [tag] * m, [tag] * m)
    interp, tests = data(11, "interpolation"), [data(5, "forward"), data(5, "reverse")]
    results = [split(interp, tests, SplitPlan(), i) for i in range(3)]
    for _, _, test in results:
        assert np.array_equal(test.x, results[0][2].x)
    train, val, _ = results[0]
    assert len(train) + len(val) == 11


def test_split_errors():
    with pytest.raises(InputError):
        split_indices(0, SplitPlan(), 0)
    with pytest.raises(InputError):
        split_indices(10, SplitPlan(), -1)
    with pytest.raises(InputError):
        SplitPlan(train_fraction=0.7, val_fraction=0.5)


@settings(max_examples=50, deadline=None)
@given(m=st.integers(1, 300), seed=st.integers(0, 2**31), init=st.integers(0, 50))
def test_split_partition_property(m, seed, init):
    tr, va = split_indices(m, SplitPlan(seed=seed), init)
    assert len(tr) == -(-m // 2)
    assert np.array_equal(np.sort(np.concatenate([tr, va])), np.arange(m))
