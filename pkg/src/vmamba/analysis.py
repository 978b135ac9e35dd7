"""Attention-form view of the selective scan, activation / diagonal maps, ERF.

The scan output can be rewritten as masked linear attention::

    Q = C,  K = B,  V = u * delta,  w_i = prod_{j<=i} exp(A delta_j)
    Y^(j) = (Q * w^(j)) h_a^(j) + [(Q * w^(j)) (K / w^(j))^T * M] V^(j) + D_j u^(j)

``w`` is kept as ``[T, Dv, Dk]`` (same lane order as the hidden state) along
with ``log_w``; the ratio ``w_i / w_l`` is formed as ``exp(log_w_i - log_w_l)``
and flushed to zero below ``LOG_FLUSH``.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .paths import ScanPath
from .ssm import SelScanInputs, selective_scan_seq
from .ss2d import Ss2dParams, ss2d_path_inputs

LOG_FLUSH = -60.0


class MatrixKind(str, enum.Enum):
    QK = "qk"
    QWKW = "qwkw"


@dataclass
class AttentionView:
    Q: np.ndarray          # [T, Dk]
    K: np.ndarray          # [T, Dk]
    V: np.ndarray          # [T, Dv]
    log_w: np.ndarray      # [T, Dv, Dk]
    w: np.ndarray          # [T, Dv, Dk]
    M: np.ndarray          # [T, T]
    H: np.ndarray          # [T, Dv, Dk], hidden states h_1..h_T
    h_a: np.ndarray        # [Dv, Dk]

    @property
    def T(self) -> int:
        return self.Q.shape[0]

    @property
    def num_lanes(self) -> int:
        return self.V.shape[1]


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T)))


def build_attention_view(inputs: SelScanInputs) -> AttentionView:
    inputs.validate()
    log_w = np.cumsum(inputs.A[None] * inputs.delta[:, :, None], axis=0)
    states = selective_scan_seq(inputs, save_states=True, checked=False).saved_states
    return AttentionView(
        Q=inputs.C.copy(), K=inputs.B.copy(), V=inputs.u * inputs.delta,
        log_w=log_w, w=np.exp(log_w), M=causal_mask(inputs.u.shape[0]),
        H=states, h_a=inputs.h0.copy(),
    )


def _flushed_exp(d: np.ndarray) -> np.ndarray:
    """exp(d) for log-ratios d, zero below LOG_FLUSH."""
    small = d < LOG_FLUSH
    return np.where(small, 0.0, np.exp(np.where(small, 0.0, d)))


def oracle_output(view: AttentionView, D_skip, u) -> np.ndarray:
    """Dense O(T^2) evaluation of the attention form, all lanes at once."""
    D_skip = np.asarray(D_skip)
    u = np.asarray(u)
    T = view.T
    if u.shape != view.V.shape or D_skip.shape != (view.num_lanes,):
        raise ValueError(f"u {u.shape} / D {D_skip.shape} do not match the view ({T}, {view.num_lanes})")
    d = view.log_w[:, None] - view.log_w[None, :]                   # [T, T, Dv, Dk], log(w_i / w_l)
    # masked entries never reach exp; above the diagonal the ratio can overflow
    ratio = _flushed_exp(np.where(view.M[:, :, None, None] > 0, d, -np.inf))
    # sum_l sum_k Q_i[k] K_l[k] r[i,l,j,k] V_l[j]
    scores = np.einsum("ik,lk,iljk->ilj", view.Q, view.K, ratio)
    y = np.einsum("ilj,lj->ij", scores, view.V)
    y += np.einsum("ik,ijk,jk->ij", view.Q, view.w, view.h_a)
    return y + D_skip * u


def _check_lane(view: AttentionView, lane: int) -> int:
    if not 0 <= lane < view.num_lanes:
        raise IndexError(f"lane {lane} out of range for {view.num_lanes} lanes")
    return lane


def attention_matrices(view: AttentionView, lane: int) -> tuple[np.ndarray, np.ndarray]:
    """Masked ``Q K^T`` and ``(Q * w) (K / w)^T`` for one value lane."""
    _check_lane(view, lane)
    prod = view.Q[:, None, :] * view.K[None, :, :]                  # [T, T, Dk]
    lw = view.log_w[:, lane, :]
    r = _flushed_exp(np.where(view.M[:, :, None] > 0, lw[:, None, :] - lw[None, :, :], -np.inf))
    # same reduction for both so that w == 1 reproduces QK bit for bit
    return prod.sum(-1) * view.M, (prod * r).sum(-1) * view.M


def attention_row(view: AttentionView, i: int, kind=MatrixKind.QWKW, lane: Optional[int] = None) -> np.ndarray:
    """Row i of the chosen matrix, [T]. ``lane=None`` averages |row| over all lanes."""
    kind = MatrixKind(kind)
    if not 0 <= i < view.T:
        raise IndexError(f"row {i} out of range for T={view.T}")
    if lane is not None:
        _check_lane(view, lane)
    prod = view.Q[i] * view.K[: i + 1]                                # [i+1, Dk]
    row = np.zeros(view.T)
    if kind is MatrixKind.QK:
        qk = prod.sum(-1)
        row[: i + 1] = np.abs(qk) if lane is None else qk
        return row
    r = _flushed_exp(view.log_w[i][None] - view.log_w[: i + 1])     # [i+1, Dv, Dk]
    vals = (prod[:, None, :] * r).sum(-1)                            # [i+1, Dv]
    if lane is None:
        row[: i + 1] = np.abs(vals).mean(axis=1)
    else:
        row[: i + 1] = vals[:, lane]
    return row


def attention_diagonal(view: AttentionView, kind=MatrixKind.QWKW, lane: Optional[int] = None) -> np.ndarray:
    """Diagonal entries [T]. w_i / w_i = 1, so both kinds agree up to rounding."""
    kind = MatrixKind(kind)
    if lane is not None:
        _check_lane(view, lane)
    prod = view.Q * view.K                                            # [T, Dk]
    if kind is MatrixKind.QK:
        return prod.sum(-1)
    lw = view.log_w if lane is None else view.log_w[:, lane : lane + 1]
    return (prod[:, None, :] * _flushed_exp(lw - lw)).sum(-1).mean(-1)


# --------------------------------------------------------------------------- maps


@dataclass
class MapImage:
    values: np.ndarray                     # [H, W], in [0, 1]
    tag: str = ""
    components: list = field(default_factory=list)  # per-path [H, W] maps before merging


def normalize_map(values: np.ndarray) -> np.ndarray:
    v = np.abs(np.asarray(values, dtype=np.float64))
    if not np.isfinite(v).all():
        raise ValueError("map contains non-finite values")
    m = v.max() if v.size else 0.0
    return v / m if m > 0 else v


def _to_grid(seq: np.ndarray, path: ScanPath) -> np.ndarray:
    grid = np.zeros(path.H * path.W)
    grid[path.order] = seq
    return grid.reshape(path.H, path.W)


def _check_query(query_rc, H: int, W: int) -> tuple[int, int]:
    r, c = (int(v) for v in query_rc)
    if not (0 <= r < H and 0 <= c < W):
        raise IndexError(f"query {query_rc} outside the {H}x{W} grid")
    return r, c


def activation_map_from_inputs(path_inputs: Sequence[tuple[ScanPath, SelScanInputs]], query_rc,
                               kind=MatrixKind.QWKW, lane: Optional[int] = None) -> MapImage:
    """Query row of each path's matrix, mapped back to the grid and summed over paths."""
    path0 = path_inputs[0][0]
    H, W = path0.H, path0.W
    r, c = _check_query(query_rc, H, W)
    comps = []
    for path, inp in path_inputs:
        pos = int(path.inverse()[r * W + c])
        row = attention_row(build_attention_view(inp), pos, kind, lane)
        comps.append(_to_grid(np.abs(row), path))
    kind = MatrixKind(kind)
    return MapImage(normalize_map(np.sum(comps, axis=0)), f"activation:{kind.value}:query={r},{c}", comps)


def diagonal_map_from_inputs(path_inputs, kind=MatrixKind.QWKW, lane: Optional[int] = None) -> MapImage:
    comps = [_to_grid(attention_diagonal(build_attention_view(inp), kind, lane), path)
             for path, inp in path_inputs]
    kind = MatrixKind(kind)
    return MapImage(normalize_map(np.mean(comps, axis=0)), f"diagonal:{kind.value}", comps)


def activation_map_ss2d(x, params: Ss2dParams, query_rc, kind=MatrixKind.QWKW, lane=None) -> MapImage:
    return activation_map_from_inputs(ss2d_path_inputs(x, params), query_rc, kind, lane)


def diagonal_map_ss2d(x, params: Ss2dParams, kind=MatrixKind.QWKW, lane=None) -> MapImage:
    return diagonal_map_from_inputs(ss2d_path_inputs(x, params), kind, lane)


def _layer_input(model, image, layer: int):
    from .model import model_features

    n = sum(model.config.layers)
    if not 0 <= layer < n:
        raise IndexError(f"layer {layer} out of range (model has {n} blocks)")
    x, blk = model_features(model, image, stop_at_block=layer)
    return x, blk.ss2d


def activation_map(model, image, layer: int, query_rc, kind=MatrixKind.QWKW, lane=None) -> MapImage:
    """Activation map of VSS block ``layer`` (flat index over all stages)."""
    x, p = _layer_input(model, image, layer)
    return activation_map_ss2d(x.astype(np.float64), p, query_rc, kind, lane)


def diagonal_map(model, image, layer: int, lane=None, kind=MatrixKind.QWKW) -> MapImage:
    x, p = _layer_input(model, image, layer)
    return diagonal_map_ss2d(x.astype(np.float64), p, kind, lane)


# --------------------------------------------------------------------------- ERF


def _center_score(feat: np.ndarray) -> float:
    _, h, w = feat.shape
    return float(feat[:, h // 2, w // 2].sum())


def erf_map(model: Union[Callable, object], image, epsilon: float = 1e-3) -> MapImage:
    """Central-difference |d s / d x| per input pixel, summed over input channels.

    ``s`` is the channel sum of the output feature map at its central cell.
    ``model`` is either a :class:`~vmamba.model.Model` (final-stage features)
    or any callable mapping a [C, H, W] array to a [C', h, w] array. The step
    for pixel value x is ``epsilon * (1 + |x|)``.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if callable(model):
        fn = model
    else:
        from .model import model_features

        m = model.astype(np.float64) if model.dtype != np.float64 else model
        fn = lambda im: model_features(m, im)  # noqa: E731
    x = np.array(image, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected a [C, H, W] image, got {x.shape}")
    grad = np.zeros(x.shape)
    for idx in np.ndindex(*x.shape):
        orig = x[idx]
        h = epsilon * (1.0 + abs(orig))
        x[idx] = orig + h
        up = _center_score(fn(x))
        x[idx] = orig - h
        down = _center_score(fn(x))
        x[idx] = orig
        grad[idx] = (up - down) / (2 * h)
    raw = np.abs(grad).sum(axis=0)
    return MapImage(normalize_map(raw), f"erf:eps={epsilon:g}", [raw])


# --------------------------------------------------------------------------- image I/O


def map_to_bytes(m: MapImage) -> bytes:
    H, W = m.values.shape
    pix = np.rint(np.clip(m.values, 0.0, 1.0) * 255).astype(np.uint8)
    return f"P5\n{W} {H}\n255\n".encode("ascii") + pix.tobytes()


def write_pgm(m: MapImage, path) -> None:
    with open(path, "wb") as fh:
        fh.write(map_to_bytes(m))


def write_csv(m: MapImage, path) -> None:
    with open(path, "w") as fh:
        for row in m.values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


_PNM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_ppm(path_or_bytes) -> np.ndarray:
    """Binary PPM (P6, maxval <= 255) -> float64 [3, H, W] in [0, 1]."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        data = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as fh:
            data = fh.read()
    pos = 0
    fields = []
    for _ in range(4):
        m = _PNM_TOKEN.match(data, pos)
        if not m:
            raise ValueError("truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P6":
        raise ValueError(f"not a binary PPM (magic {fields[0]!r})")
    try:
        W, H, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ValueError("malformed PPM header") from exc
    if W < 1 or H < 1 or not 0 < maxval < 256:
        raise ValueError(f"unsupported PPM geometry {W}x{H} maxval {maxval}")
    pos += 1                                                         # single whitespace byte
    pix = data[pos : pos + 3 * W * H]
    if len(pix) != 3 * W * H:
        raise ValueError("truncated PPM pixel data")
    arr = np.frombuffer(pix, dtype=np.uint8).reshape(H, W, 3).transpose(2, 0, 1)
    return arr.astype(np.float64) / maxval


def write_ppm(image, path) -> None:
    """[3, H, W] in [0, 1] -> binary PPM."""
    img = np.asarray(image)
    _, H, W = img.shape
    pix = np.rint(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii") + pix.tobytes())
