"""Seeded property suites behind ``vmamba verify``.

Every suite returns a :class:`Report`; reports hold observed errors and bounds
but no timings, so identical seeds give identical text.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .analysis import build_attention_view, oracle_output
from .model import count_flops, count_params, vanilla_tiny, vmamba_base, vmamba_small, vmamba_tiny
from .paths import PatternKind, gather, generate_paths, is_permutation, scatter_add
from .ssm import (
    SelScanInputs, ode_reference, selective_scan_backward, selective_scan_parallel, selective_scan_seq,
)
from .tensor import resolve_dtype

SCAN_TOL = {np.dtype(np.float64): 1e-12, np.dtype(np.float32): 1e-5}
ORACLE_TOL = 1e-10
GRAD_TOL = 1e-4
GRAD_STEP = 1e-5
ZOH_BAND = (1.8, 2.2)

# published reference figures: (params in M, tolerance) and GFLOPs
PARAM_TARGETS = {
    "VMamba-T": (vmamba_tiny, 30.2, 0.02),
    "VMamba-S": (vmamba_small, 50.1, 0.02),
    "VMamba-B": (vmamba_base, 88.6, 0.02),
    "Vanilla-VMamba-T": (vanilla_tiny, 22.9, 0.03),
}
FLOPS_T_224 = 4.91e9
FLOPS_RATIOS = {288: 8.11 / 4.91, 768: 57.66 / 4.91}


@dataclass
class Check:
    name: str
    passed: bool
    observed: float
    bound: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}: observed {self.observed:.6g} ({self.bound})"


@dataclass
class Report:
    suite: str
    checks: list = field(default_factory=list)

    def add(self, name, passed, observed, bound) -> Check:
        c = Check(name, bool(passed), float(observed), bound)
        self.checks.append(c)
        return c

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def text(self) -> str:
        lines = [f"[{self.suite}]"] + [c.line() for c in self.checks]
        lines.append(f"{self.suite}: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


# --------------------------------------------------------------------------- instance generators


def random_inputs(rng: np.random.Generator, T: int, Dv: int, Dk: int, dtype=np.float64,
                  h0: bool = True, min_delta: float = 0.0) -> SelScanInputs:
    """Bounded random scan instance: A < 0, delta in (e^-4, 1]."""
    delta = np.exp(rng.uniform(-4.0, 0.0, (T, Dv)))
    if min_delta:
        delta = np.maximum(delta, min_delta)
    return SelScanInputs(
        u=rng.standard_normal((T, Dv)).astype(dtype),
        delta=delta.astype(dtype),
        B=rng.standard_normal((T, Dk)).astype(dtype),
        C=rng.standard_normal((T, Dk)).astype(dtype),
        A=(-np.exp(rng.uniform(-1.0, 1.0, (Dv, Dk)))).astype(dtype),
        D=rng.standard_normal(Dv).astype(dtype),
        h0=rng.standard_normal((Dv, Dk)).astype(dtype) if h0 else None,
    )


def log_uniform_lengths(rng: np.random.Generator, n: int, lo: int, hi: int) -> list[int]:
    """n lengths in [lo, hi], log-uniform, with both endpoints always included."""
    if n < 2:
        return [hi][:n]
    mid = np.exp(rng.uniform(math.log(lo), math.log(hi + 1), n - 2)).astype(int)
    return [lo, hi] + [int(min(max(t, lo), hi)) for t in mid]


# --------------------------------------------------------------------------- suites


def suite_scan_equivalence(seed: int = 0, dtype="f64", n: int = 1000, max_T: int = 4096) -> Report:
    dt = resolve_dtype(dtype)
    rng = np.random.default_rng(seed)
    rep = Report("scan-equivalence")
    worst_y = worst_h = 0.0
    for T in log_uniform_lengths(rng, n, 1, max_T):
        inp = random_inputs(rng, T, int(rng.integers(1, 9)), int(rng.integers(1, 5)), dt)
        s = selective_scan_seq(inp)
        p = selective_scan_parallel(inp)
        worst_y = max(worst_y, float(np.abs(p.y - s.y).max()))
        worst_h = max(worst_h, float(np.abs(p.h_final - s.h_final).max()))
    tol = SCAN_TOL[dt]
    rep.add(f"max|parallel - sequential| y, {n} instances {dt.name}", worst_y <= tol, worst_y, f"<= {tol:g}")
    rep.add(f"max|parallel - sequential| h_final {dt.name}", worst_h <= tol, worst_h, f"<= {tol:g}")
    return rep


def suite_oracle(seed: int = 0, dtype="f64", n: int = 200, max_T: int = 256) -> Report:
    rng = np.random.default_rng(seed)
    rep = Report("oracle")
    worst = 0.0
    worst_tele = 0.0
    for T in log_uniform_lengths(rng, n, 1, max_T):
        inp = random_inputs(rng, T, int(rng.integers(1, 9)), int(rng.integers(1, 5)), np.float64)
        y = selective_scan_seq(inp).y
        view = build_attention_view(inp)
        yo = oracle_output(view, inp.D, inp.u)
        worst = max(worst, float(np.abs(y - yo).max() / max(np.abs(y).max(), 1e-300)))
        if T > 1:
            tele = view.w[1:] / view.w[:-1]
            ref = np.exp(inp.A[None] * inp.delta[1:, :, None])
            worst_tele = max(worst_tele, float(np.abs(tele - ref).max()))
    rep.add(f"scan vs attention form, relative, {n} instances f64 (h_a != 0)", worst <= ORACLE_TOL, worst,
            f"<= {ORACLE_TOL:g}")
    rep.add("w telescoping w_i / w_(i-1) vs exp(A delta_i)", worst_tele <= 1e-12, worst_tele, "<= 1e-12")
    return rep


def _grad_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def finite_difference_grads(inp: SelScanInputs, dy, dh, step: float = GRAD_STEP) -> dict:
    """Central differences of L = sum(dy*y) + sum(dh*h_T) w.r.t. every input tensor."""
    def loss(fields):
        o = selective_scan_seq(SelScanInputs(**fields), checked=False)
        return float((dy * o.y).sum() + (dh * o.h_final).sum())

    base = {k: getattr(inp, k).copy() for k in ("u", "delta", "B", "C", "A", "D", "h0")}
    grads = {}
    for key, arr in base.items():
        g = np.zeros_like(arr)
        for idx in np.ndindex(*arr.shape):
            orig = arr[idx]
            arr[idx] = orig + step
            up = loss(base)
            arr[idx] = orig - step
            down = loss(base)
            arr[idx] = orig
            g[idx] = (up - down) / (2 * step)
        grads[key] = g
    return grads


def suite_gradients(seed: int = 0, dtype="f64", n: int = 100, max_T: int = 16) -> Report:
    rng = np.random.default_rng(seed)
    rep = Report("gradients")
    worst = {k: 0.0 for k in ("du", "ddelta", "dB", "dC", "dA", "dD", "dh0")}
    for _ in range(n):
        T = int(rng.integers(1, max_T + 1))
        inp = random_inputs(rng, T, int(rng.integers(1, 5)), int(rng.integers(1, 4)), np.float64,
                            min_delta=0.05)
        out = selective_scan_seq(inp, save_states=True)
        dy = rng.standard_normal(out.y.shape)
        dh = rng.standard_normal(out.h_final.shape)
        an = selective_scan_backward(inp, out, dy, dh)
        fd = finite_difference_grads(inp, dy, dh)
        for k in worst:
            worst[k] = max(worst[k], _grad_error(getattr(an, k), fd[k[1:]]))
    for k, v in worst.items():
        rep.add(f"{k} analytic vs central FD (step {GRAD_STEP:g}), {n} instances", v <= GRAD_TOL, v,
                f"<= {GRAD_TOL:g}")
    return rep


def suite_paths(seed: int = 0, dtype="f64", max_side: int = 64) -> Report:
    dt = resolve_dtype(dtype)
    rng = np.random.default_rng(seed)
    rep = Report("paths")
    bad_perm = bad_merge = bad_transpose = 0
    worst_merge = 0.0
    grids = 0
    for H in range(1, max_side + 1):
        for W in range(1, max_side + 1):
            grids += 1
            paths = generate_paths(PatternKind.CROSS, H, W)
            bad_perm += sum(not is_permutation(p.order) for p in paths)
            x = rng.standard_normal((2, H, W)).astype(dt)
            merged = scatter_add([gather(x, p) for p in paths], paths, H, W)
            diff = float(np.abs(merged - 4 * x).max())
            worst_merge = max(worst_merge, diff)
            bad_merge += diff != 0.0
            # transposing the grid swaps row- and column-major traversals
            tp = generate_paths(PatternKind.CROSS, W, H)
            xt = np.ascontiguousarray(x.transpose(0, 2, 1))
            for k, k_t in ((0, 1), (1, 0), (2, 3), (3, 2)):
                bad_transpose += not np.array_equal(gather(xt, tp[k_t]), gather(x, paths[k]))
    rep.add(f"cross paths are permutations, all {grids} grids H, W <= {max_side}", bad_perm == 0, bad_perm,
            "== 0 failures")
    rep.add("scatter_add(gather(x)) == 4x exactly", bad_merge == 0, worst_merge, "== 0")
    rep.add("transpose closure gather(x^T, p_T) == gather(x, p)", bad_transpose == 0, bad_transpose,
            "== 0 failures")
    return rep


def zoh_sweep(levels: int = 5, base_steps: int = 8, horizon: float = 1.0, seed: int = 0):
    """Final-state error of the first-order scan against the exact ODE for constant inputs."""
    rng = np.random.default_rng(seed)
    Dv, Dk = 3, 2
    A = -np.exp(rng.uniform(-0.5, 0.5, (Dv, Dk)))
    B = rng.standard_normal(Dk)
    u = rng.standard_normal(Dv)
    h0 = rng.standard_normal((Dv, Dk))
    errs = []
    for lvl in range(levels):
        n = base_steps * 2 ** lvl
        d = np.full((n, Dv), horizon / n)
        inp = SelScanInputs(np.tile(u, (n, 1)), d, np.tile(B, (n, 1)), np.zeros((n, Dk)), A, np.zeros(Dv), h0)
        h = selective_scan_seq(inp).h_final
        ref = ode_reference(A, np.tile(B, (n, 1)), np.tile(u, (n, 1)), d, h0)
        errs.append(float(np.abs(h - ref).max()))
    return errs


def suite_zoh(seed: int = 0, dtype="f64", levels: int = 5) -> Report:
    rep = Report("zoh")
    errs = zoh_sweep(levels=levels, seed=seed)
    for i in range(1, len(errs)):
        r = errs[i - 1] / errs[i]
        rep.add(f"error ratio, delta halved (level {i})", ZOH_BAND[0] <= r <= ZOH_BAND[1], r,
                f"in [{ZOH_BAND[0]}, {ZOH_BAND[1]}]")
    return rep


def suite_counts(seed: int = 0, dtype="f64") -> Report:
    rep = Report("counts")
    for name, (factory, target_m, tol) in PARAM_TARGETS.items():
        got = count_params(factory()) / 1e6
        rel = abs(got - target_m) / target_m
        rep.add(f"{name} params {got:.2f}M vs {target_m}M", rel <= tol, rel, f"relative <= {tol:g}")
    t = vmamba_tiny()
    f224 = count_flops(t, 224)
    rel = abs(f224 - FLOPS_T_224) / FLOPS_T_224
    rep.add(f"VMamba-T FLOPs at 224 {f224 / 1e9:.3f}G vs 4.91G", rel <= 0.10, rel, "relative <= 0.1")
    for res, ref in FLOPS_RATIOS.items():
        ratio = count_flops(t, res) / f224
        tok = (res / 224) ** 2
        rel = abs(ratio - tok) / tok
        rep.add(f"FLOPs ratio {res}/224 = {ratio:.4f} vs token ratio {tok:.4f} (published {ref:.4f})",
                rel <= 0.01, rel, "relative <= 0.01")
    return rep


SUITES: dict[str, Callable[..., Report]] = {
    "scan-equivalence": suite_scan_equivalence,
    "oracle": suite_oracle,
    "gradients": suite_gradients,
    "paths": suite_paths,
    "zoh": suite_zoh,
    "counts": suite_counts,
}


def run_suite(name: str, seed: int = 0, dtype="f64") -> list[Report]:
    """Run one suite, or every suite for ``name == "all"``."""
    if name == "all":
        return [fn(seed=seed, dtype=dtype) for fn in SUITES.values()]
    if name not in SUITES:
        raise KeyError(name)
    return [SUITES[name](seed=seed, dtype=dtype)]
