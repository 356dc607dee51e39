import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spatial_deconfounder.lattice import GridShape, is_complete_neighborhood, queen_bfs_levels
from spatial_deconfounder.split import (SplitError, SplitParams, chebyshev_gap, load_split, save_split,
                                        spatial_split)


def test_candidate_count_10x10():
    s = spatial_split(GridShape(10, 10), None, SplitParams(alpha=0.02), seed=0)
    # ceil(0.02 * 64) = 2 seeds; every selected site is in the interior 8x8.
    assert (s.train | s.validation).sum() <= 64
    assert s.validation.sum() >= 2


def test_hand_trace_single_seed():
    g = GridShape(10, 10)
    s = spatial_split(g, None, SplitParams(alpha=0.01, levels=0, buffer=0, model_radius=1), seed=4)
    assert s.validation.sum() == 1
    (vj,), (vi,) = np.nonzero(s.validation)
    block = np.zeros(g.shape, bool)
    block[max(vj - 1, 0):vj + 2, max(vi - 1, 0):vi + 2] = True
    interior = np.zeros(g.shape, bool)
    interior[1:-1, 1:-1] = True
    np.testing.assert_array_equal(s.train, interior & ~block)
    np.testing.assert_array_equal(s.buffer, block & ~s.validation)


def test_gap_exceeds_buffer():
    s = spatial_split(GridShape(16, 12), None, SplitParams(alpha=0.05, buffer=2), seed=1)
    assert chebyshev_gap(s) > 2


def test_empty_candidates_rejected():
    with pytest.raises(SplitError):
        spatial_split(GridShape(2, 2), None, SplitParams(), seed=0)


def test_alpha_too_large_rejected():
    with pytest.raises(SplitError):
        spatial_split(GridShape(6, 6), None, SplitParams(alpha=0.9), seed=0)


def test_deterministic_and_seed_sensitive():
    g = GridShape(12, 12)
    a = spatial_split(g, None, SplitParams(alpha=0.05), seed=3)
    b = spatial_split(g, None, SplitParams(alpha=0.05), seed=3)
    assert np.array_equal(a.train, b.train) and np.array_equal(a.validation, b.validation)
    others = [spatial_split(g, None, SplitParams(alpha=0.05), seed=k).validation for k in range(4, 9)]
    assert any(not np.array_equal(a.validation, o) for o in others)


def test_csv_roundtrip(tmp_path):
    g = GridShape(9, 7)
    s = spatial_split(g, None, SplitParams(alpha=0.05), seed=2)
    back = load_split(save_split(s, tmp_path / "s.csv"), g)
    for r in ("train", "validation", "buffer"):
        np.testing.assert_array_equal(getattr(back, r), getattr(s, r))


def _exhaustive_check(g, validity, params, seed):
    s = spatial_split(g, validity, params, seed)
    assert not (s.train & s.validation).any()
    assert not (s.buffer & (s.train | s.validation)).any()
    reach = queen_bfs_levels(g, s.validation, params.buffer + params.model_radius)
    assert not (reach & s.train).any()
    for j, i in zip(*np.nonzero(s.train | s.validation)):
        assert is_complete_neighborhood((i, j), g, params.model_radius)
        assert validity is None or validity[j, i]
    n_cand = sum(is_complete_neighborhood(t, g, params.model_radius) and (validity is None or validity[t.j, t.i])
                 for t in g.sites())
    assert s.validation.sum() >= np.ceil(params.alpha * n_cand) - 0
    return s


@settings(max_examples=40, deadline=None)
@given(st.integers(5, 20), st.integers(5, 20), st.integers(0, 2), st.integers(0, 2), st.integers(1, 2),
       st.floats(0.01, 0.1), st.integers(0, 2**31))
def test_split_properties(nx, ny, L, B, rm, alpha, seed):
    g = GridShape(nx, ny)
    validity = np.random.default_rng(seed).random(g.shape) < 0.9
    try:
        _exhaustive_check(g, validity, SplitParams(alpha, L, B, rm), seed)
    except SplitError:
        pass
