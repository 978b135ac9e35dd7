"""2D traversal orders for Cross-Scan and the ablation patterns, plus Cross-Merge.

Cross paths, in order: row-major forward, column-major forward, and the
reverses of both. Flat indices are row-major (``r * W + c``).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .ssm import SelScanInputs, selective_scan_parallel


class PatternKind(str, enum.Enum):
    CROSS = "cross"
    UNIDI = "unidi"
    BIDI = "bidi"
    CASCADE = "cascade"

    @property
    def num_paths(self) -> int:
        return {"cross": 4, "unidi": 1, "bidi": 2, "cascade": 2}[self.value]


@dataclass(frozen=True, eq=False)
class ScanPath:
    order: np.ndarray
    H: int
    W: int

    def __post_init__(self):
        order = np.asarray(self.order, dtype=np.int64)
        if order.shape != (self.H * self.W,):
            raise ValueError(f"path of length {order.size} does not fit a {self.H}x{self.W} grid")
        if not is_permutation(order):
            raise ValueError("path order is not a permutation of the grid indices")
        order = order.copy()
        order.setflags(write=False)
        object.__setattr__(self, "order", order)

    def __len__(self):
        return self.order.size

    def __eq__(self, other):
        if not isinstance(other, ScanPath):
            return NotImplemented
        return (self.H, self.W) == (other.H, other.W) and np.array_equal(self.order, other.order)

    def inverse(self) -> np.ndarray:
        """Position of every grid cell along the path."""
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(self.order.size)
        return inv


def is_permutation(order: np.ndarray) -> bool:
    order = np.asarray(order)
    n = order.size
    if n == 0 or order.min() < 0 or order.max() >= n:
        return n == 0
    return bool((np.bincount(order, minlength=n) == 1).all())


def _row_major(H: int, W: int) -> np.ndarray:
    return np.arange(H * W, dtype=np.int64)


def _col_major(H: int, W: int) -> np.ndarray:
    return np.arange(H * W, dtype=np.int64).reshape(H, W).T.reshape(-1)


def generate_paths(kind, H: int, W: int) -> list[ScanPath]:
    kind = PatternKind(kind)
    if H < 1 or W < 1:
        raise ValueError(f"grid extents must be positive, got {H}x{W}")
    row, col = _row_major(H, W), _col_major(H, W)
    if kind is PatternKind.CROSS:
        orders = [row, col, row[::-1], col[::-1]]
    elif kind is PatternKind.UNIDI:
        orders = [row]
    elif kind is PatternKind.BIDI:
        orders = [row, row[::-1]]
    else:
        # two successive stages: rows, then columns of the row stage output
        orders = [row, col]
    return [ScanPath(o, H, W) for o in orders]


def gather(x: np.ndarray, path: ScanPath) -> np.ndarray:
    """[C, H, W] -> [C, T] with s[:, t] = x[:, order[t]]."""
    C, H, W = x.shape
    if (H, W) != (path.H, path.W):
        raise ValueError(f"path is for a {path.H}x{path.W} grid, map is {H}x{W}")
    return x.reshape(C, H * W)[:, path.order]


def scatter_add(seqs: Sequence[np.ndarray], paths: Sequence[ScanPath], H: int, W: int) -> np.ndarray:
    """Cross-Merge: inverse-permute each [C, T] sequence to the grid and sum in path order."""
    if len(seqs) != len(paths) or not seqs:
        raise ValueError(f"need one path per sequence, got {len(seqs)} sequences and {len(paths)} paths")
    C = seqs[0].shape[0]
    out = np.zeros((C, H * W), dtype=np.result_type(*seqs))
    for seq, path in zip(seqs, paths):
        if seq.shape != (C, H * W) or (path.H, path.W) != (H, W):
            raise ValueError(f"sequence {seq.shape} / path {path.H}x{path.W} do not match a {C}x{H}x{W} map")
        out[:, path.order] += seq
    return out.reshape(C, H, W)


InputsFactory = Callable[[np.ndarray], SelScanInputs]


def _scan_map(x: np.ndarray, path: ScanPath, factory: InputsFactory, scan) -> np.ndarray:
    C, H, W = x.shape
    u = gather(x, path).T                     # [T, C]
    y = scan(factory(u)).y
    return scatter_add([y.T], [path], H, W)


def cascade_scan(x: np.ndarray, row_params: InputsFactory, col_params: InputsFactory,
                 scan=selective_scan_parallel) -> np.ndarray:
    """Row-major scan, then a column-major scan of its output map.

    Each factory maps the [T, C] sequence of its stage to scan inputs; the
    hidden state starts fresh (from the factory's h0) in each stage.
    """
    C, H, W = x.shape
    row, col = generate_paths(PatternKind.CASCADE, H, W)
    stage1 = _scan_map(x, row, row_params, scan)
    return _scan_map(stage1, col, col_params, scan)
