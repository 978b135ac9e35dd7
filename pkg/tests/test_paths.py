import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vmamba.paths import PatternKind, ScanPath, cascade_scan, gather, generate_paths, scatter_add
from vmamba.ssm import SelScanInputs, selective_scan_seq


def test_cross_orders_on_2x3():
    row, col, row_r, col_r = (p.order.tolist() for p in generate_paths("cross", 2, 3))
    assert row == [0, 1, 2, 3, 4, 5]
    assert col == [0, 3, 1, 4, 2, 5]
    assert row_r == [5, 4, 3, 2, 1, 0]
    assert col_r == [5, 2, 4, 1, 3, 0]


@pytest.mark.parametrize("kind,n", [("cross", 4), ("unidi", 1), ("bidi", 2), ("cascade", 2)])
def test_path_counts(kind, n):
    assert len(generate_paths(kind, 3, 5)) == n == PatternKind(kind).num_paths


def test_1x1_grid():
    assert all(p.order.tolist() == [0] for p in generate_paths("cross", 1, 1))


@pytest.mark.parametrize("H,W", [(0, 3), (2, 0), (-1, 1)])
def test_bad_extent(H, W):
    with pytest.raises(ValueError):
        generate_paths("cross", H, W)


def test_scan_path_rejects_non_permutation():
    with pytest.raises(ValueError, match="permutation"):
        ScanPath(np.array([0, 0, 1, 2]), 2, 2)
    with pytest.raises(ValueError):
        ScanPath(np.arange(5), 2, 2)


def test_path_order_immutable():
    p = generate_paths("cross", 2, 2)[1]
    with pytest.raises(ValueError):
        p.order[0] = 3


def test_inverse():
    p = generate_paths("cross", 3, 4)[1]
    inv = p.inverse()
    assert (p.order[inv] == np.arange(12)).all()


def test_gather_brute_force():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 4))
    for p in generate_paths("cross", 3, 4):
        s = gather(x, p)
        for t, flat in enumerate(p.order):
            r, c = divmod(int(flat), 4)
            assert (s[:, t] == x[:, r, c]).all()


def test_gather_grid_mismatch():
    with pytest.raises(ValueError):
        gather(np.zeros((1, 3, 3)), generate_paths("cross", 3, 4)[0])


def test_scatter_add_brute_force():
    rng = np.random.default_rng(1)
    paths = generate_paths("cross", 3, 2)
    seqs = [rng.standard_normal((2, 6)) for _ in paths]
    ref = np.zeros((2, 3, 2))
    for seq, p in zip(seqs, paths):
        for t, flat in enumerate(p.order):
            ref[:, flat // 2, flat % 2] += seq[:, t]
    np.testing.assert_allclose(scatter_add(seqs, paths, 3, 2), ref, rtol=1e-15)


def test_scatter_add_mismatched_lengths():
    paths = generate_paths("cross", 2, 2)
    with pytest.raises(ValueError):
        scatter_add([np.zeros((1, 4))], paths, 2, 2)
    with pytest.raises(ValueError):
        scatter_add([np.zeros((1, 5))] * 4, paths, 2, 2)


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20), st.integers(1, 3), st.sampled_from([np.float32, np.float64]),
       st.integers(0, 2**31))
def test_cross_merge_is_exactly_four_x(H, W, C, dtype, seed):
    x = (np.random.default_rng(seed).standard_normal((C, H, W)) * 1e3).astype(dtype)
    paths = generate_paths("cross", H, W)
    assert np.array_equal(scatter_add([gather(x, p) for p in paths], paths, H, W), 4 * x)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12))
def test_transpose_closure(H, W):
    x = np.arange(H * W, dtype=float).reshape(1, H, W)
    xt = x.transpose(0, 2, 1).copy()
    p, pt = generate_paths("cross", H, W), generate_paths("cross", W, H)
    for k, kt in ((0, 1), (1, 0), (2, 3), (3, 2)):
        assert np.array_equal(gather(xt, pt[kt]), gather(x, p[k]))


def _factory(seed, C):
    rng = np.random.default_rng(seed)
    A = -np.exp(rng.uniform(-1, 1, (C, 2)))
    D = rng.standard_normal(C)

    def make(u):
        T = u.shape[0]
        r = np.random.default_rng(seed + T)
        return SelScanInputs(u=u, delta=np.full((T, C), 0.3), B=r.standard_normal((T, 2)),
                             C=r.standard_normal((T, 2)), A=A, D=D)
    return make


def test_cascade_matches_manual_two_stage():
    H, W, C = 3, 4, 2
    x = np.random.default_rng(5).standard_normal((C, H, W))
    f_row, f_col = _factory(1, C), _factory(2, C)
    out = cascade_scan(x, f_row, f_col, scan=selective_scan_seq)
    # stage 1: rows, row-major
    u1 = x.reshape(C, -1).T
    y1 = selective_scan_seq(f_row(u1)).y.T.reshape(C, H, W)
    # stage 2: columns of the stage-1 map, fresh state
    u2 = y1.transpose(0, 2, 1).reshape(C, -1).T
    y2 = selective_scan_seq(f_col(u2)).y.T.reshape(C, W, H).transpose(0, 2, 1)
    np.testing.assert_allclose(out, y2, rtol=1e-13, atol=1e-14)
