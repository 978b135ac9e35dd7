"""SS2D module and VSS block forward passes, with their initialization schemes.

Feature maps are channel-first ``[C, H, W]`` for a single image.
"""
from __future__ import annotations

import enum
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np
from scipy.special import erf, expit

from .paths import PatternKind, ScanPath, cascade_scan, gather, generate_paths, scatter_add
from .ssm import SelScanInputs, selective_scan_parallel
from .tensor import check_finite

LN_EPS = 1e-5
DT_MIN, DT_MAX, DT_FLOOR = 1e-3, 1e-1, 1e-4


class Activation(str, enum.Enum):
    SILU = "silu"
    GELU = "gelu"
    RELU = "relu"


def silu(x):
    return x * expit(x)


def gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def relu(x):
    return np.maximum(x, 0)


def softplus(x):
    return np.logaddexp(0, x)


def apply_activation(kind, x):
    kind = Activation(kind)
    if kind is Activation.SILU:
        return silu(x)
    if kind is Activation.GELU:
        return gelu(x)
    return relu(x)


def layer_norm(x, scale, shift, eps: float = LN_EPS):
    """Normalize over the last axis with population variance."""
    x = np.asarray(x)
    if x.shape[-1] == 0:
        raise ValueError("layer_norm over an empty channel axis")
    mean = x.mean(axis=-1, keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * scale + shift


def layer_norm_chw(x, scale, shift, eps: float = LN_EPS):
    """Channel layer norm for a [C, H, W] map."""
    return np.ascontiguousarray(layer_norm(x.transpose(1, 2, 0), scale, shift, eps).transpose(2, 0, 1))


def dwconv3x3(x, weight, bias):
    """Depthwise 3x3 convolution, stride 1, zero padding 1. weight [C, 3, 3], bias [C]."""
    C, H, W = x.shape
    if weight.shape != (C, 3, 3) or bias.shape != (C,):
        raise ValueError(f"dwconv3x3 weights {weight.shape}/{bias.shape} do not match {C} channels")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.broadcast_to(bias[:, None, None], x.shape).astype(np.result_type(x, weight), copy=True)
    for i in range(3):
        for j in range(3):
            out += weight[:, i, j, None, None] * xp[:, i:i + H, j:j + W]
    return out


def linear_chw(x, weight, bias=None):
    """Per-token affine map on a [C_in, H, W] map: weight [C_out, C_in]."""
    C, H, W = x.shape
    if weight.shape[1] != C:
        raise ValueError(f"weight {weight.shape} does not accept {C} input channels")
    out = weight @ x.reshape(C, H * W)
    if bias is not None:
        out += bias[:, None]
    return out.reshape(weight.shape[0], H, W)


# --------------------------------------------------------------------------- params


@dataclass
class Ss2dConfig:
    d_model: int
    ssm_ratio: float = 1.0
    d_state: int = 1
    dt_rank: Optional[int] = None
    pattern: PatternKind = PatternKind.CROSS
    activation: Activation = Activation.SILU
    dwconv: bool = True

    def __post_init__(self):
        self.pattern = PatternKind(self.pattern)
        self.activation = Activation(self.activation)
        if self.dt_rank is None:
            self.dt_rank = math.ceil(self.d_model / 16)
        if self.d_model < 1 or self.d_state < 1 or self.dt_rank < 1 or self.ssm_ratio <= 0:
            raise ValueError(f"invalid SS2D dimensions: {self}")
        if self.d_inner < 1:
            raise ValueError(f"ssm_ratio {self.ssm_ratio} leaves no inner channels")

    @property
    def d_inner(self) -> int:
        return int(self.ssm_ratio * self.d_model)

    @property
    def num_paths(self) -> int:
        return self.pattern.num_paths


@dataclass
class PathParams:
    x_proj_weight: np.ndarray     # [dt_rank + 2 d_state, d_inner]
    dt_proj_weight: np.ndarray    # [d_inner, dt_rank]
    dt_proj_bias: np.ndarray      # [d_inner]
    A_log: np.ndarray             # [d_inner, d_state]
    D: np.ndarray                 # [d_inner]

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log)


@dataclass
class Ss2dParams:
    config: Ss2dConfig
    in_proj_weight: np.ndarray    # [d_inner, d_model]
    in_proj_bias: np.ndarray
    dwconv_weight: Optional[np.ndarray]   # [d_inner, 3, 3]
    dwconv_bias: Optional[np.ndarray]
    paths: list[PathParams]
    out_norm_weight: np.ndarray   # [d_inner]
    out_norm_bias: np.ndarray
    out_proj_weight: np.ndarray   # [d_model, d_inner]
    out_proj_bias: np.ndarray

    def __post_init__(self):
        if len(self.paths) != self.config.num_paths:
            raise ValueError(f"{self.config.pattern.value} needs {self.config.num_paths} path "
                             f"parameter sets, got {len(self.paths)}")


@dataclass
class VssBlockParams:
    norm1_weight: np.ndarray
    norm1_bias: np.ndarray
    ss2d: Ss2dParams
    norm2_weight: np.ndarray
    norm2_bias: np.ndarray
    fc1_weight: np.ndarray        # [hidden, d_model]
    fc1_bias: np.ndarray
    fc2_weight: np.ndarray        # [d_model, hidden]
    fc2_bias: np.ndarray


def _path_tensors(p: PathParams, prefix: str):
    yield f"{prefix}x_proj.weight", p.x_proj_weight
    yield f"{prefix}dt_proj.weight", p.dt_proj_weight
    yield f"{prefix}dt_proj.bias", p.dt_proj_bias
    yield f"{prefix}A_log", p.A_log
    yield f"{prefix}D", p.D


def ss2d_tensors(p: Ss2dParams, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Canonical (name, tensor) pairs, e.g. ``stage0.block1.ss2d.path2.A_log``."""
    yield f"{prefix}in_proj.weight", p.in_proj_weight
    yield f"{prefix}in_proj.bias", p.in_proj_bias
    if p.dwconv_weight is not None:
        yield f"{prefix}dwconv.weight", p.dwconv_weight
        yield f"{prefix}dwconv.bias", p.dwconv_bias
    for k, path in enumerate(p.paths):
        yield from _path_tensors(path, f"{prefix}path{k}.")
    yield f"{prefix}out_norm.weight", p.out_norm_weight
    yield f"{prefix}out_norm.bias", p.out_norm_bias
    yield f"{prefix}out_proj.weight", p.out_proj_weight
    yield f"{prefix}out_proj.bias", p.out_proj_bias


def block_tensors(p: VssBlockParams, prefix: str = ""):
    yield f"{prefix}norm1.weight", p.norm1_weight
    yield f"{prefix}norm1.bias", p.norm1_bias
    yield from ss2d_tensors(p.ss2d, f"{prefix}ss2d.")
    yield f"{prefix}norm2.weight", p.norm2_weight
    yield f"{prefix}norm2.bias", p.norm2_bias
    yield f"{prefix}ffn.fc1.weight", p.fc1_weight
    yield f"{prefix}ffn.fc1.bias", p.fc1_bias
    yield f"{prefix}ffn.fc2.weight", p.fc2_weight
    yield f"{prefix}ffn.fc2.bias", p.fc2_bias


def ss2d_from_tensors(config: Ss2dConfig, get: Callable[[str], np.ndarray], prefix: str = "") -> Ss2dParams:
    paths = [
        PathParams(
            x_proj_weight=get(f"{prefix}path{k}.x_proj.weight"),
            dt_proj_weight=get(f"{prefix}path{k}.dt_proj.weight"),
            dt_proj_bias=get(f"{prefix}path{k}.dt_proj.bias"),
            A_log=get(f"{prefix}path{k}.A_log"),
            D=get(f"{prefix}path{k}.D"),
        )
        for k in range(config.num_paths)
    ]
    return Ss2dParams(
        config=config,
        in_proj_weight=get(f"{prefix}in_proj.weight"),
        in_proj_bias=get(f"{prefix}in_proj.bias"),
        dwconv_weight=get(f"{prefix}dwconv.weight") if config.dwconv else None,
        dwconv_bias=get(f"{prefix}dwconv.bias") if config.dwconv else None,
        paths=paths,
        out_norm_weight=get(f"{prefix}out_norm.weight"),
        out_norm_bias=get(f"{prefix}out_norm.bias"),
        out_proj_weight=get(f"{prefix}out_proj.weight"),
        out_proj_bias=get(f"{prefix}out_proj.bias"),
    )


def block_from_tensors(config: Ss2dConfig, get, prefix: str = "") -> VssBlockParams:
    return VssBlockParams(
        norm1_weight=get(f"{prefix}norm1.weight"),
        norm1_bias=get(f"{prefix}norm1.bias"),
        ss2d=ss2d_from_tensors(config, get, f"{prefix}ss2d."),
        norm2_weight=get(f"{prefix}norm2.weight"),
        norm2_bias=get(f"{prefix}norm2.bias"),
        fc1_weight=get(f"{prefix}ffn.fc1.weight"),
        fc1_bias=get(f"{prefix}ffn.fc1.bias"),
        fc2_weight=get(f"{prefix}ffn.fc2.weight"),
        fc2_bias=get(f"{prefix}ffn.fc2.bias"),
    )


# --------------------------------------------------------------------------- init


class InitKind(str, enum.Enum):
    MAMBA = "mamba"
    RAND = "rand"
    ZERO = "zero"


@dataclass(frozen=True)
class InitScheme:
    kind: InitKind = InitKind.MAMBA
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", InitKind(self.kind))

    def rng(self, name: str) -> np.random.Generator:
        # one stream per tensor name: schemes that differ in one tensor differ only there
        return np.random.default_rng([self.seed, zlib.crc32(name.encode("utf-8"))])


def fan_in_uniform(scheme: InitScheme, name: str, shape, fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return scheme.rng(name).uniform(-bound, bound, size=shape).astype(dtype)


def dt_bias_init(scheme: InitScheme, name: str, d_inner: int, dtype) -> np.ndarray:
    """Bias whose softplus is log-uniform in [DT_MIN, DT_MAX]."""
    r = scheme.rng(name)
    dt = np.exp(r.uniform(size=d_inner) * (math.log(DT_MAX) - math.log(DT_MIN)) + math.log(DT_MIN))
    dt = np.maximum(dt, DT_FLOOR)
    return (dt + np.log(-np.expm1(-dt))).astype(dtype)


def a_log_init(scheme: InitScheme, name: str, d_inner: int, d_state: int, dtype) -> np.ndarray:
    if scheme.kind is InitKind.MAMBA:
        # S4D-real: A = -(1..N) per lane
        row = np.log(np.arange(1, d_state + 1, dtype=np.float64))
        return np.broadcast_to(row, (d_inner, d_state)).astype(dtype)
    if scheme.kind is InitKind.ZERO:
        return np.zeros((d_inner, d_state), dtype=dtype)
    return scheme.rng(name).uniform(-0.5, 0.5, size=(d_inner, d_state)).astype(dtype)


def init_params(config: Ss2dConfig, scheme: InitScheme, prefix: str = "", dtype=np.float32) -> Ss2dParams:
    di, dm, N, R = config.d_inner, config.d_model, config.d_state, config.dt_rank
    paths = []
    for k in range(config.num_paths):
        pk = f"{prefix}path{k}."
        paths.append(PathParams(
            x_proj_weight=fan_in_uniform(scheme, pk + "x_proj.weight", (R + 2 * N, di), di, dtype),
            dt_proj_weight=fan_in_uniform(scheme, pk + "dt_proj.weight", (di, R), R, dtype),
            dt_proj_bias=dt_bias_init(scheme, pk + "dt_proj.bias", di, dtype),
            A_log=a_log_init(scheme, pk + "A_log", di, N, dtype),
            D=np.ones(di, dtype=dtype),
        ))
    return Ss2dParams(
        config=config,
        in_proj_weight=fan_in_uniform(scheme, prefix + "in_proj.weight", (di, dm), dm, dtype),
        in_proj_bias=np.zeros(di, dtype=dtype),
        dwconv_weight=fan_in_uniform(scheme, prefix + "dwconv.weight", (di, 3, 3), 9, dtype) if config.dwconv else None,
        dwconv_bias=np.zeros(di, dtype=dtype) if config.dwconv else None,
        paths=paths,
        out_norm_weight=np.ones(di, dtype=dtype),
        out_norm_bias=np.zeros(di, dtype=dtype),
        out_proj_weight=fan_in_uniform(scheme, prefix + "out_proj.weight", (dm, di), di, dtype),
        out_proj_bias=np.zeros(dm, dtype=dtype),
    )


def init_block(config: Ss2dConfig, mlp_ratio: float, scheme: InitScheme, prefix: str = "",
               dtype=np.float32) -> VssBlockParams:
    d = config.d_model
    hidden = int(mlp_ratio * d)
    return VssBlockParams(
        norm1_weight=np.ones(d, dtype=dtype),
        norm1_bias=np.zeros(d, dtype=dtype),
        ss2d=init_params(config, scheme, prefix + "ss2d.", dtype),
        norm2_weight=np.ones(d, dtype=dtype),
        norm2_bias=np.zeros(d, dtype=dtype),
        fc1_weight=fan_in_uniform(scheme, prefix + "ffn.fc1.weight", (hidden, d), d, dtype),
        fc1_bias=np.zeros(hidden, dtype=dtype),
        fc2_weight=fan_in_uniform(scheme, prefix + "ffn.fc2.weight", (d, hidden), hidden, dtype),
        fc2_bias=np.zeros(d, dtype=dtype),
    )


# --------------------------------------------------------------------------- forward


def path_scan_inputs(u: np.ndarray, p: PathParams, config: Ss2dConfig) -> SelScanInputs:
    """Derive the per-step (delta, B, C) of one path from its [T, d_inner] sequence."""
    R, N = config.dt_rank, config.d_state
    xdbl = u @ p.x_proj_weight.T                     # [T, R + 2N]
    dt_in, Bs, Cs = xdbl[:, :R], xdbl[:, R:R + N], xdbl[:, R + N:]
    delta = softplus(dt_in @ p.dt_proj_weight.T + p.dt_proj_bias)
    # softplus can round to 0 for very negative pre-activations in float32
    delta = np.maximum(delta, np.finfo(delta.dtype).tiny)
    return SelScanInputs(u=u, delta=delta, B=Bs, C=Cs, A=p.A, D=p.D)


def ss2d_inner(x, params: Ss2dParams) -> np.ndarray:
    """in_proj -> dwconv -> activation; the map every path scans. [d_model,H,W] -> [d_inner,H,W]."""
    z = linear_chw(x, params.in_proj_weight, params.in_proj_bias)
    if params.dwconv_weight is not None:
        z = dwconv3x3(z, params.dwconv_weight, params.dwconv_bias)
    return apply_activation(params.config.activation, z)


def ss2d_path_inputs(x, params: Ss2dParams) -> list[tuple[ScanPath, SelScanInputs]]:
    """Scan operands for every independent path (not defined for Cascade)."""
    cfg = params.config
    if cfg.pattern is PatternKind.CASCADE:
        raise ValueError("cascade stages depend on each other; use ss2d_forward")
    z = ss2d_inner(x, params)
    _, H, W = z.shape
    paths = generate_paths(cfg.pattern, H, W)
    return [(path, path_scan_inputs(gather(z, path).T, p, cfg)) for path, p in zip(paths, params.paths)]


def ss2d_forward(x, params: Ss2dParams, scan=selective_scan_parallel, workers: int = 1,
                 checked: bool = True) -> np.ndarray:
    """SS2D: [d_model, H, W] -> [d_model, H, W].

    ``workers > 1`` runs the per-path scans on a thread pool; the merge
    order is fixed so the result is identical to the serial run.
    """
    cfg = params.config
    if x.ndim != 3 or x.shape[0] != cfg.d_model:
        raise ValueError(f"expected [{cfg.d_model}, H, W] input, got {x.shape}")
    _, H, W = x.shape
    if cfg.pattern is PatternKind.CASCADE:
        z = ss2d_inner(x, params)
        p_row, p_col = params.paths
        merged = cascade_scan(z, lambda u: path_scan_inputs(u, p_row, cfg),
                              lambda u: path_scan_inputs(u, p_col, cfg), scan=scan)
    else:
        jobs = ss2d_path_inputs(x, params)

        def run(job):
            return scan(job[1], checked=checked).y.T

        if workers > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                ys = list(pool.map(run, jobs))
        else:
            ys = [run(j) for j in jobs]
        merged = scatter_add(ys, [j[0] for j in jobs], H, W)
    out = layer_norm_chw(merged, params.out_norm_weight, params.out_norm_bias)
    out = linear_chw(out, params.out_proj_weight, params.out_proj_bias)
    if checked:
        check_finite(out, "ss2d output")
    return out


def ffn_forward(x, p: VssBlockParams) -> np.ndarray:
    h = gelu(linear_chw(x, p.fc1_weight, p.fc1_bias))
    return linear_chw(h, p.fc2_weight, p.fc2_bias)


def vss_block_forward(x, params: VssBlockParams, **kw) -> np.ndarray:
    """x + SS2D(LN(x)), then + FFN(LN(.)). No multiplicative branch."""
    x = x + ss2d_forward(layer_norm_chw(x, params.norm1_weight, params.norm1_bias), params.ss2d, **kw)
    return x + ffn_forward(layer_norm_chw(x, params.norm2_weight, params.norm2_bias), params)
