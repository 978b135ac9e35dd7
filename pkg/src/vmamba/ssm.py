"""Selective state-space scan kernels.

Shapes follow one convention throughout::

    u, delta : [T, Dv]      input sequence and per-step time scale
    B, C     : [T, Dk]      per-step input / output matrices
    A        : [Dv, Dk]     continuous evolution parameter (applied elementwise)
    D        : [Dv]         skip weight
    h        : [Dv, Dk]     hidden state

One step of the recurrence is ``h_t = exp(A * delta_t) * h_{t-1} + B_t * delta_t * u_t``
followed by the readout ``y_t = sum_k C_t[k] * h_t[:, k] + D * u_t``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .tensor import check_finite


@dataclass
class SelScanInputs:
    u: np.ndarray
    delta: np.ndarray
    B: np.ndarray
    C: np.ndarray
    A: np.ndarray
    D: np.ndarray
    h0: Optional[np.ndarray] = None

    def __post_init__(self):
        self.u = np.asarray(self.u)
        dtype = self.u.dtype if self.u.dtype in (np.float32, np.float64) else np.float64
        for name in ("u", "delta", "B", "C", "A", "D"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=dtype))
        if self.h0 is None:
            self.h0 = np.zeros(self.A.shape, dtype=dtype)
        else:
            self.h0 = np.asarray(self.h0, dtype=dtype)
        self.validate()

    @property
    def dtype(self) -> np.dtype:
        return self.u.dtype

    @property
    def dims(self) -> tuple[int, int, int]:
        T, Dv = self.u.shape
        return T, Dv, self.B.shape[1]

    def validate(self) -> None:
        if self.u.ndim != 2 or self.B.ndim != 2 or self.A.ndim != 2:
            raise ValueError("expected u [T, Dv], B/C [T, Dk], A [Dv, Dk]")
        T, Dv = self.u.shape
        Dk = self.B.shape[1]
        expect = {
            "delta": (T, Dv), "B": (T, Dk), "C": (T, Dk),
            "A": (Dv, Dk), "D": (Dv,), "h0": (Dv, Dk),
        }
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"shape mismatch: {name} is {got}, expected {shape}")
        if not (self.delta > 0).all():
            raise ValueError("delta must be strictly positive")


@dataclass
class ScanOutput:
    y: np.ndarray                      # [T, Dv]
    h_final: np.ndarray                # [Dv, Dk]
    saved_states: Optional[np.ndarray] = None  # [T, Dv, Dk], h_1 .. h_T


class ScanElement(NamedTuple):
    """Affine map ``h -> a * h + b``."""
    a: np.ndarray
    b: np.ndarray


@dataclass
class ScanGrads:
    du: np.ndarray
    ddelta: np.ndarray
    dB: np.ndarray
    dC: np.ndarray
    dA: np.ndarray
    dD: np.ndarray
    dh0: np.ndarray


def discretize_zoh(A, delta) -> np.ndarray:
    """exp(A * delta). A [Dv, Dk] with delta [..., Dv] gives [..., Dv, Dk];
    lower-rank operands broadcast elementwise."""
    A = np.asarray(A)
    delta = np.asarray(delta, dtype=A.dtype if A.dtype.kind == "f" else None)
    if np.any(delta <= 0):
        raise ValueError("delta must be strictly positive")
    if A.ndim == 2:
        delta = delta[..., None]
    return np.exp(A * delta)


def discretize_b_euler(B, delta) -> np.ndarray:
    """First-order B-bar = B * delta. B [T, Dk], delta [T, Dv] -> [T, Dv, Dk]."""
    B = np.asarray(B)
    delta = np.asarray(delta)
    if B.ndim == 2 and delta.ndim == 2:
        if B.shape[0] != delta.shape[0]:
            raise ValueError(f"shape mismatch: B has T={B.shape[0]}, delta has T={delta.shape[0]}")
        return delta[:, :, None] * B[:, None, :]
    try:
        return B * delta
    except ValueError as exc:
        raise ValueError(f"shape mismatch: B {B.shape} vs delta {delta.shape}") from exc


def discretize_b_zoh(A, B, delta) -> np.ndarray:
    """Exact zero-order-hold B-bar = (exp(A delta) - 1) / A * B, with the A -> 0 limit B * delta."""
    A = np.asarray(A)
    B = np.asarray(B)
    delta = np.asarray(delta)
    if A.ndim == 2:
        Ad = A[None] * delta[:, :, None]
        Bd = B[:, None, :]
        dd = delta[:, :, None]
    else:
        Ad, Bd, dd = A * delta, B, delta
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(Ad == 0, dd, np.expm1(Ad) / np.where(A == 0, 1, A))
    return factor * Bd


def ode_reference(A, B_seq, u_seq, delta_seq, h0) -> np.ndarray:
    """Exact end-of-horizon state of h' = A*h + B*u with B, u held constant per interval."""
    A = np.asarray(A, dtype=np.float64)
    B_seq = np.asarray(B_seq, dtype=np.float64)
    u_seq = np.asarray(u_seq, dtype=np.float64)
    delta_seq = np.asarray(delta_seq, dtype=np.float64)
    h = np.array(h0, dtype=np.float64)
    if np.any(delta_seq <= 0):
        raise ValueError("delta must be strictly positive")
    nz = A != 0
    safe_A = np.where(nz, A, 1.0)
    for B_t, u_t, d_t in zip(B_seq, u_seq, delta_seq):
        if A.ndim == 2:
            Ad = A * d_t[:, None]
            drive = u_t[:, None] * B_t[None, :]
            dd = np.broadcast_to(d_t[:, None], A.shape)
        else:
            Ad, drive, dd = A * d_t, B_t * u_t, d_t
        decay = np.exp(Ad)
        h = np.where(nz, decay * h + drive / safe_A * np.expm1(Ad), h + drive * dd)
    return h


def scan_combine(e1: ScanElement, e2: ScanElement) -> ScanElement:
    """Compose e1 then e2: (a1 a2, a2 b1 + b2)."""
    a1, b1 = np.asarray(e1[0]), np.asarray(e1[1])
    a2, b2 = np.asarray(e2[0]), np.asarray(e2[1])
    if not (a1.shape == b1.shape == a2.shape == b2.shape):
        raise ValueError(f"shape mismatch in scan_combine: {a1.shape}, {b1.shape}, {a2.shape}, {b2.shape}")
    return ScanElement(a1 * a2, a2 * b1 + b2)


def _elements(inputs: SelScanInputs, exact_zoh_b: bool):
    a = discretize_zoh(inputs.A, inputs.delta)
    if exact_zoh_b:
        bbar = discretize_b_zoh(inputs.A, inputs.B, inputs.delta)
    else:
        bbar = discretize_b_euler(inputs.B, inputs.delta)
    b = bbar * inputs.u[:, :, None]
    return a, b


def _readout(states: np.ndarray, inputs: SelScanInputs) -> np.ndarray:
    return (states * inputs.C[:, None, :]).sum(axis=-1) + inputs.D * inputs.u


def _finish(states, inputs, save_states, checked) -> ScanOutput:
    T = inputs.u.shape[0]
    y = _readout(states, inputs)
    h_final = states[-1].copy() if T else inputs.h0.copy()
    if checked:
        check_finite(y, "scan output")
        check_finite(h_final, "final state")
    return ScanOutput(y=y, h_final=h_final, saved_states=states if save_states else None)


def selective_scan_seq(inputs: SelScanInputs, save_states: bool = False,
                       exact_zoh_b: bool = False, checked: bool = True) -> ScanOutput:
    """Left-to-right recurrence, t = 1..T."""
    a, b = _elements(inputs, exact_zoh_b)
    states = np.empty_like(b)
    h = inputs.h0
    for t in range(a.shape[0]):
        h = a[t] * h + b[t]
        states[t] = h
    return _finish(states, inputs, save_states, checked)


def prefix_scan(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive Brent-Kung scan of affine elements along axis 0, in place.

    Up-sweep builds partial products on a fixed binary tree; the down-sweep
    patches the remaining positions. Any T works without padding and the
    pairing depends on T only, so results are bitwise reproducible.
    """
    n = a.shape[0]
    s = 1
    while s < n:
        r = slice(2 * s - 1, n, 2 * s)
        cnt = len(range(2 * s - 1, n, 2 * s))
        l = slice(s - 1, s - 1 + 2 * s * cnt, 2 * s)
        b[r] = a[r] * b[l] + b[r]
        a[r] = a[l] * a[r]
        s *= 2
    s //= 2
    while s >= 1:
        r = slice(3 * s - 1, n, 2 * s)
        cnt = len(range(3 * s - 1, n, 2 * s))
        if cnt:
            l = slice(2 * s - 1, 2 * s - 1 + 2 * s * cnt, 2 * s)
            b[r] = a[r] * b[l] + b[r]
            a[r] = a[l] * a[r]
        s //= 2
    return a, b


def selective_scan_parallel(inputs: SelScanInputs, save_states: bool = False,
                            exact_zoh_b: bool = False, checked: bool = True) -> ScanOutput:
    """Same result as :func:`selective_scan_seq` via a work-efficient associative scan."""
    a, b = _elements(inputs, exact_zoh_b)
    if a.shape[0]:
        # fold h0 into the first element so prefix b's are the states themselves
        b[0] = a[0] * inputs.h0 + b[0]
        prefix_scan(a, b)
    return _finish(b, inputs, save_states, checked)


def selective_scan_backward(inputs: SelScanInputs, out: ScanOutput, dy, dh_final=None,
                            exact_zoh_b: bool = False) -> ScanGrads:
    """Reverse-mode gradients of sum(dy * y) + sum(dh_final * h_final)."""
    if out.saved_states is None:
        raise ValueError("backward needs saved states; rerun the forward with save_states=True")
    if exact_zoh_b:
        raise NotImplementedError("backward is defined for the first-order B-bar only")
    u, delta, B, C, A, D = inputs.u, inputs.delta, inputs.B, inputs.C, inputs.A, inputs.D
    T, Dv, Dk = inputs.dims
    dy = np.asarray(dy, dtype=inputs.dtype)
    if dy.shape != (T, Dv):
        raise ValueError(f"dy must be {(T, Dv)}, got {dy.shape}")
    dh_final = np.zeros((Dv, Dk), inputs.dtype) if dh_final is None else np.asarray(dh_final, inputs.dtype)

    states = out.saved_states
    a = discretize_zoh(A, delta)
    prev = np.concatenate([inputs.h0[None], states[:-1]], axis=0) if T else states

    # adjoint of each h_t, right to left
    g = np.empty_like(states)
    carry = dh_final.copy()
    for t in range(T - 1, -1, -1):
        carry = carry + dy[t][:, None] * C[t][None, :]
        g[t] = carry
        carry = a[t] * carry

    dC = np.einsum("td,tdk->tk", dy, states)
    dD = (dy * u).sum(axis=0)
    gB = (g * B[:, None, :]).sum(axis=-1)                     # [T, Dv]
    du = dy * D + gB * delta
    da = g * prev                                             # dL/da_t
    da_a = da * a
    dA = (da_a * delta[:, :, None]).sum(axis=0)
    ddelta = (da_a * A[None]).sum(axis=-1) + gB * u
    dB = np.einsum("tdk,td->tk", g, delta * u)
    dh0 = a[0] * g[0] if T else carry
    return ScanGrads(du=du, ddelta=ddelta, dB=dB, dC=dC, dA=dA, dD=dD, dh0=dh0)
