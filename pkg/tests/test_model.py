import numpy as np
import pytest

from contrags.model import (densify, init_one_to_one, lookup, model_bytes,
                            remap_gaussian, sh_dim, validate_state)
from contrags.modelio import serialize_model


def test_init_one_to_one_basic():
    state = init_one_to_one(4, 0, seed=7)
    assert state.num_gaussians == 4
    assert state.sh.live_count == 4
    assert state.sr.live_count == 4
    assert np.all(state.sh.refcount == 1)
    assert np.all(state.sr.refcount == 1)
    assert np.all(state.sh.parent == -1)
    validate_state(state)


def test_init_dims():
    state = init_one_to_one(1000, 2, seed=0)
    assert state.sh.dim == 27
    assert sh_dim(2) == 27
    assert state.sr.dim == 7


def test_init_deterministic():
    a = init_one_to_one(50, 1, seed=3, position_box=((-2, -2, -2), (2, 2, 2)))
    b = init_one_to_one(50, 1, seed=3, position_box=((-2, -2, -2), (2, 2, 2)))
    assert serialize_model(a) == serialize_model(b)


def test_init_rejects_bad_args():
    with pytest.raises(ValueError):
        init_one_to_one(0, 0, seed=0)
    with pytest.raises(ValueError):
        init_one_to_one(4, 5, seed=0)


def test_lookup_identity_after_init():
    state = init_one_to_one(6, 0, seed=1)
    for i in range(6):
        sh_row, sr_row = lookup(state, i)
        assert np.array_equal(sh_row, state.sh.rows[i])
        assert np.array_equal(sr_row, state.sr.rows[i])
    with pytest.raises(ValueError):
        lookup(state, 6)


def test_lookup_follows_remap_and_shares():
    state = init_one_to_one(4, 0, seed=1)
    remap_gaussian(state, 0, "sh", 2)
    sh_row, _ = lookup(state, 0)
    assert np.array_equal(sh_row, state.sh.rows[2])
    other, _ = lookup(state, 2)
    assert np.array_equal(sh_row, other)


def test_remap_refcounts_and_free():
    state = init_one_to_one(3, 0, seed=0)
    remap_gaussian(state, 0, "sh", 1)  # row 0 dies
    assert state.sh.refcount[0] == 0
    assert state.sh.refcount[1] == 2
    assert state.sh.live_count == 2
    assert 0 in state.sh.free_set
    validate_state(state)
    # remap to the same row is a no-op
    before = state.sh.refcount.copy()
    remap_gaussian(state, 0, "sh", 1)
    assert np.array_equal(before, state.sh.refcount)
    with pytest.raises(ValueError):
        remap_gaussian(state, 2, "sh", 0)  # dead target


def test_freed_row_is_reused_lowest_first():
    state = init_one_to_one(4, 0, seed=0)
    remap_gaussian(state, 2, "sh", 3)  # frees row 2
    remap_gaussian(state, 1, "sh", 3)  # frees row 1
    r = state.sh.alloc(np.zeros(3, dtype=np.float32))
    assert r == 1
    r2 = state.sh.alloc(np.zeros(3, dtype=np.float32))
    assert r2 == 2


def test_densify_counts_and_conservation():
    state = init_one_to_one(100, 0, seed=5)
    rng = np.random.default_rng(0)
    added = densify(state, 0.05, cap=2_000_000, rng=rng)
    assert added == 5
    assert state.num_gaussians == 105
    assert int(state.sh.refcount.sum()) == 105
    assert int(state.sr.refcount.sum()) == 105
    validate_state(state)


def test_densify_cap_saturation():
    state = init_one_to_one(10, 0, seed=5)
    rng = np.random.default_rng(0)
    assert densify(state, 0.5, cap=10, rng=rng) == 0
    assert state.num_gaussians == 10


def test_densify_clones_share_rows():
    state = init_one_to_one(10, 0, seed=2)
    rng = np.random.default_rng(1)
    densify(state, 0.3, cap=100, rng=rng)
    # every clone points at an original row, so some refcount must exceed 1
    assert state.sh.refcount.max() >= 2
    assert state.sh.live_count == 10


def test_model_bytes_worked_example():
    state = init_one_to_one(1000, 3, seed=0)
    # collapse to 100 live rows per codebook
    for i in range(1000):
        remap_gaussian(state, i, "sh", i % 100)
        remap_gaussian(state, i, "sr", i % 100)
    compressed, dense, ratio = model_bytes(state)
    assert compressed == 24_000 + 19_200 + 2_800 == 46_000
    assert dense == 236_000
    assert abs(ratio - 236_000 / 46_000) < 1e-12


def test_model_bytes_one_to_one_ratio_below_one():
    state = init_one_to_one(50, 3, seed=0)
    compressed, dense, ratio = model_bytes(state)
    assert ratio < 1.0
    assert compressed > dense


def test_model_bytes_empty_convention():
    state = init_one_to_one(1, 0, seed=0)
    state.gaussians.positions = state.gaussians.positions[:0]
    state.gaussians.opacity_logits = state.gaussians.opacity_logits[:0]
    state.gaussians.g2sh = state.gaussians.g2sh[:0]
    state.gaussians.g2sr = state.gaussians.g2sr[:0]
    assert model_bytes(state) == (0, 0, 1.0)


def test_model_bytes_matches_independent_formula():
    rng = np.random.default_rng(9)
    for _ in range(25):
        n = int(rng.integers(1, 200))
        deg = int(rng.integers(0, 4))
        state = init_one_to_one(n, deg, seed=int(rng.integers(1 << 30)))
        rows = int(rng.integers(1, n + 1))
        for i in range(n):
            remap_gaussian(state, i, "sh", i % rows)
        compressed, dense, ratio = model_bytes(state)
        dim = sh_dim(deg)
        assert compressed == n * 24 + rows * dim * 4 + n * 28
        assert dense == n * (11 + dim) * 4
        assert ratio == dense / compressed


def test_reference_conservation_random_ops():
    rng = np.random.default_rng(4)
    state = init_one_to_one(30, 1, seed=8)
    for _ in range(300):
        op = rng.integers(3)
        if op == 0:
            i = int(rng.integers(state.num_gaussians))
            which = "sh" if rng.random() < 0.5 else "sr"
            book = state.sh if which == "sh" else state.sr
            live = book.live_indices()
            remap_gaussian(state, i, which, int(rng.choice(live)))
        elif op == 1:
            densify(state, 0.05, cap=500, rng=rng)
        else:
            i = int(rng.integers(state.num_gaussians))
            lookup(state, i)
        validate_state(state)
