import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vmamba.ssm import selective_scan_seq
from vmamba.verify import (
    SUITES, Report, finite_difference_grads, log_uniform_lengths, random_inputs, run_suite, zoh_sweep,
)


@given(st.integers(0, 2**32 - 1), st.integers(2, 50), st.integers(1, 64), st.integers(0, 4000))
@settings(max_examples=60, deadline=None)
def test_log_uniform_lengths(seed, n, lo, span):
    hi = lo + span
    ts = log_uniform_lengths(np.random.default_rng(seed), n, lo, hi)
    assert len(ts) == n and ts[:2] == [lo, hi]
    assert all(lo <= t <= hi for t in ts)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_random_inputs_bounds(dtype):
    inp = random_inputs(np.random.default_rng(0), 50, 3, 2, dtype, min_delta=0.05)
    assert inp.u.dtype == dtype and inp.h0.shape == (3, 2)
    assert (inp.A < 0).all()
    assert inp.delta.min() >= np.asarray(0.05, dtype) and inp.delta.max() <= 1
    assert not random_inputs(np.random.default_rng(0), 5, 3, 2, h0=False).h0.any()


def test_fd_grads_linear_directions():
    # y is linear in D, C and u's skip term, so central differences recover them to rounding
    rng = np.random.default_rng(1)
    inp = random_inputs(rng, 6, 2, 3)
    out = selective_scan_seq(inp)
    dy, dh = rng.standard_normal(out.y.shape), np.zeros(out.h_final.shape)
    g = finite_difference_grads(inp, dy, dh)
    np.testing.assert_allclose(g["D"], (dy * inp.u).sum(0), rtol=1e-8)
    assert set(g) == {"u", "delta", "B", "C", "A", "D", "h0"}


def test_zoh_sweep_first_order():
    errs = zoh_sweep(levels=6)
    assert all(a > b for a, b in zip(errs, errs[1:]))
    scaled = [e * 8 * 2**k for k, e in enumerate(errs)]  # error * steps settles to a constant
    assert scaled[-1] == pytest.approx(scaled[-2], rel=0.01)


def test_report_text():
    r = Report("demo")
    r.add("ok", True, 0.5, "<= 1")
    assert r.passed and r.text() == "[demo]\nPASS  ok: observed 0.5 (<= 1)\ndemo: PASS"
    r.add("bad", False, 2, "<= 1")
    assert not r.passed and r.text().endswith("demo: FAIL")


def test_run_suite_dispatch():
    with pytest.raises(KeyError):
        run_suite("nope")
    assert [r.suite for r in run_suite("counts")] == ["counts"]
    assert list(SUITES) == ["scan-equivalence", "oracle", "gradients", "paths", "zoh", "counts"]


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("dtype", ["f32", "f64"])
def test_small_suites_pass(seed, dtype):
    from vmamba.verify import suite_gradients, suite_oracle, suite_paths, suite_scan_equivalence
    reports = [suite_scan_equivalence(seed, dtype, n=40, max_T=512), suite_oracle(seed, n=20, max_T=64),
               suite_gradients(seed, n=5, max_T=8), suite_paths(seed, dtype, max_side=12)]
    assert all(r.passed for r in reports), "\n".join(r.text() for r in reports)
