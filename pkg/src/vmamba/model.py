"""Hierarchical VMamba assembly, inference, and parameter / FLOP accounting.

Layout: stem (two stride-2 3x3 convs, /4) -> four stages of VSS blocks with a
stride-2 3x3 conv + LayerNorm downsampler between stages -> global average
pool, LayerNorm, linear classifier.

FLOP cost model (1 MAC = 1 unit):

* convolutions and linear maps: one unit per multiply-accumulate, biases free
* depthwise 3x3: 9 per output element
* layer norm: ``NORM_COST`` per element (affine form)
* elementwise activations (SiLU/GELU/ReLU, softplus on delta, the gate
  product of the vanilla block) and average pooling: ``ACT_COST`` per element
* selective scan, per step and inner channel: ``SCAN_STATE_COST`` per state
  lane plus ``SCAN_SKIP_COST`` for the D skip
* permutations, Cross-Merge sums and residual additions: free
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .paths import PatternKind
from .ss2d import (
    Activation, InitScheme, Ss2dConfig, VssBlockParams, block_from_tensors, block_tensors,
    fan_in_uniform, gelu, init_block, layer_norm, layer_norm_chw, vss_block_forward,
)
from .tensor import TensorBundle, check_finite

NORM_COST = 5
ACT_COST = 1
SCAN_STATE_COST = 9
SCAN_SKIP_COST = 1


class Variant(str, enum.Enum):
    VMAMBA = "vmamba"
    VANILLA = "vanilla"     # multiplicative-branch block, parameter/FLOP model only


@dataclass
class ModelConfig:
    dims: tuple = (96, 192, 384, 768)
    layers: tuple = (2, 2, 8, 2)
    ssm_ratio: float = 1.0
    mlp_ratio: float = 4.0
    d_state: int = 1
    variant: Variant = Variant.VMAMBA
    activation: Activation = Activation.SILU
    pattern: PatternKind = PatternKind.CROSS
    num_classes: int = 1000
    dwconv: bool = True

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.layers = tuple(int(n) for n in self.layers)
        self.variant = Variant(self.variant)
        self.activation = Activation(self.activation)
        self.pattern = PatternKind(self.pattern)
        if len(self.dims) != 4 or len(self.layers) != 4:
            raise ValueError("a model has exactly 4 stages")
        if any(self.dims[i + 1] != 2 * self.dims[i] for i in range(3)) or self.dims[0] < 2:
            raise ValueError(f"stage widths must double: {self.dims}")
        if self.dims[0] % 2:
            raise ValueError("the stem halves dims[0]; it must be even")
        if any(n < 0 for n in self.layers):
            raise ValueError(f"negative layer count in {self.layers}")
        if self.ssm_ratio <= 0 or self.mlp_ratio <= 0 or self.d_state < 1 or self.num_classes < 1:
            raise ValueError("ratios, d_state and num_classes must be positive")

    def ss2d_config(self, stage: int) -> Ss2dConfig:
        return Ss2dConfig(d_model=self.dims[stage], ssm_ratio=self.ssm_ratio, d_state=self.d_state,
                          pattern=self.pattern, activation=self.activation, dwconv=self.dwconv)


def vmamba_tiny(**kw) -> ModelConfig:
    return ModelConfig(**{"dims": (96, 192, 384, 768), "layers": (2, 2, 8, 2), "ssm_ratio": 1.0, **kw})


def vmamba_small(**kw) -> ModelConfig:
    return ModelConfig(**{"dims": (96, 192, 384, 768), "layers": (2, 2, 15, 2), "ssm_ratio": 2.0, **kw})


def vmamba_base(**kw) -> ModelConfig:
    return ModelConfig(**{"dims": (128, 256, 512, 1024), "layers": (2, 2, 15, 2), "ssm_ratio": 2.0, **kw})


def vanilla_tiny(**kw) -> ModelConfig:
    return ModelConfig(**{"dims": (96, 192, 384, 768), "layers": (2, 2, 9, 2), "ssm_ratio": 2.0,
                          "d_state": 16, "variant": Variant.VANILLA, **kw})


def vanilla_small(**kw) -> ModelConfig:
    return vanilla_tiny(**{"layers": (2, 2, 27, 2), **kw})


def vanilla_base(**kw) -> ModelConfig:
    return vanilla_tiny(**{"dims": (128, 256, 512, 1024), "layers": (2, 2, 27, 2), **kw})


PRESETS = {
    "vmamba-t": vmamba_tiny, "vmamba-s": vmamba_small, "vmamba-b": vmamba_base,
    "vanilla-t": vanilla_tiny, "vanilla-s": vanilla_small, "vanilla-b": vanilla_base,
}


# --------------------------------------------------------------------------- config files

_CONFIG_KEYS = ("dims", "layers", "ssm_ratio", "mlp_ratio", "d_state", "activation", "pattern",
                "num_classes", "variant", "dwconv")


def parse_config(text: str) -> ModelConfig:
    """Flat ``key = value`` text; ``#`` starts a comment, lists are comma separated."""
    kw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in ("dims", "layers"):
            kw[key] = tuple(int(v) for v in value.strip("[]()").split(",") if v.strip())
        elif key in ("ssm_ratio", "mlp_ratio"):
            kw[key] = float(value)
        elif key in ("d_state", "num_classes"):
            kw[key] = int(value)
        elif key == "dwconv":
            if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"line {lineno}: dwconv must be a boolean, got {value!r}")
            kw[key] = value.lower() in ("true", "1", "yes")
        else:
            kw[key] = value.lower()
    return ModelConfig(**kw)


def format_config(cfg: ModelConfig) -> str:
    return "".join([
        f"dims = {', '.join(map(str, cfg.dims))}\n",
        f"layers = {', '.join(map(str, cfg.layers))}\n",
        f"ssm_ratio = {cfg.ssm_ratio}\n",
        f"mlp_ratio = {cfg.mlp_ratio}\n",
        f"d_state = {cfg.d_state}\n",
        f"activation = {cfg.activation.value}\n",
        f"pattern = {cfg.pattern.value}\n",
        f"num_classes = {cfg.num_classes}\n",
        f"variant = {cfg.variant.value}\n",
        f"dwconv = {str(cfg.dwconv).lower()}\n",
    ])


def load_config(path) -> ModelConfig:
    with open(path) as fh:
        return parse_config(fh.read())


# --------------------------------------------------------------------------- model


@dataclass
class ConvNorm:
    """conv k x k (with bias) followed by a channel LayerNorm."""
    conv_weight: np.ndarray       # [C_out, C_in, k, k]
    conv_bias: np.ndarray
    norm_weight: np.ndarray
    norm_bias: np.ndarray

    def tensors(self, conv: str, norm: str):
        yield f"{conv}.weight", self.conv_weight
        yield f"{conv}.bias", self.conv_bias
        yield f"{norm}.weight", self.norm_weight
        yield f"{norm}.bias", self.norm_bias


@dataclass
class Model:
    config: ModelConfig
    stem: list                    # two ConvNorm
    stages: list                  # per stage, a list of VssBlockParams
    downsamples: list             # three ConvNorm
    head_norm_weight: np.ndarray
    head_norm_bias: np.ndarray
    head_fc_weight: np.ndarray    # [num_classes, dims[-1]]
    head_fc_bias: np.ndarray
    dtype: np.dtype = field(default=np.dtype(np.float32))

    def named_tensors(self):
        yield from self.stem[0].tensors("stem.conv1", "stem.norm1")
        yield from self.stem[1].tensors("stem.conv2", "stem.norm2")
        for s, blocks in enumerate(self.stages):
            for b, blk in enumerate(blocks):
                yield from block_tensors(blk, f"stage{s}.block{b}.")
            if s < 3:
                yield from self.downsamples[s].tensors(f"stage{s}.downsample.conv", f"stage{s}.downsample.norm")
        yield "head.norm.weight", self.head_norm_weight
        yield "head.norm.bias", self.head_norm_bias
        yield "head.fc.weight", self.head_fc_weight
        yield "head.fc.bias", self.head_fc_bias

    def to_bundle(self) -> TensorBundle:
        return TensorBundle(self.named_tensors())

    def num_params(self) -> int:
        return sum(int(t.size) for _, t in self.named_tensors())

    def blocks(self):
        """(stage, index, params) for every VSS block in forward order."""
        for s, blocks in enumerate(self.stages):
            for b, blk in enumerate(blocks):
                yield s, b, blk

    def astype(self, dtype) -> "Model":
        return model_from_bundle(self.config, self.to_bundle(), dtype=dtype)


def _conv_norm(scheme, prefix_conv, prefix_norm, c_in, c_out, k, dtype) -> ConvNorm:
    return ConvNorm(
        conv_weight=fan_in_uniform(scheme, f"{prefix_conv}.weight", (c_out, c_in, k, k), c_in * k * k, dtype),
        conv_bias=np.zeros(c_out, dtype=dtype),
        norm_weight=np.ones(c_out, dtype=dtype),
        norm_bias=np.zeros(c_out, dtype=dtype),
    )


def build_model(config: ModelConfig, scheme: Optional[InitScheme] = None, dtype=np.float32) -> Model:
    if config.variant is not Variant.VMAMBA:
        raise ValueError("only the VMamba variant can be built; the vanilla variant is a counting model")
    scheme = scheme or InitScheme()
    dtype = np.dtype(dtype)
    d = config.dims
    stem = [_conv_norm(scheme, "stem.conv1", "stem.norm1", 3, d[0] // 2, 3, dtype),
            _conv_norm(scheme, "stem.conv2", "stem.norm2", d[0] // 2, d[0], 3, dtype)]
    stages, downs = [], []
    for s in range(4):
        cfg = config.ss2d_config(s)
        stages.append([init_block(cfg, config.mlp_ratio, scheme, f"stage{s}.block{b}.", dtype)
                       for b in range(config.layers[s])])
        if s < 3:
            p = f"stage{s}.downsample"
            downs.append(_conv_norm(scheme, f"{p}.conv", f"{p}.norm", d[s], d[s + 1], 3, dtype))
    return Model(
        config=config, stem=stem, stages=stages, downsamples=downs,
        head_norm_weight=np.ones(d[3], dtype=dtype),
        head_norm_bias=np.zeros(d[3], dtype=dtype),
        head_fc_weight=fan_in_uniform(scheme, "head.fc.weight", (config.num_classes, d[3]), d[3], dtype),
        head_fc_bias=np.zeros(config.num_classes, dtype=dtype),
        dtype=dtype,
    )


def model_from_bundle(config: ModelConfig, bundle: TensorBundle, dtype=None) -> Model:
    used = set()

    def get(name):
        if name not in bundle:
            raise KeyError(f"weights are missing tensor {name!r}")
        used.add(name)
        t = bundle[name]
        return np.array(t, dtype=dtype or t.dtype)

    def conv_norm(conv, norm):
        return ConvNorm(get(f"{conv}.weight"), get(f"{conv}.bias"), get(f"{norm}.weight"), get(f"{norm}.bias"))

    stem = [conv_norm("stem.conv1", "stem.norm1"), conv_norm("stem.conv2", "stem.norm2")]
    stages, downs = [], []
    for s in range(4):
        cfg = config.ss2d_config(s)
        stages.append([block_from_tensors(cfg, get, f"stage{s}.block{b}.") for b in range(config.layers[s])])
        if s < 3:
            downs.append(conv_norm(f"stage{s}.downsample.conv", f"stage{s}.downsample.norm"))
    model = Model(config, stem, stages, downs, get("head.norm.weight"), get("head.norm.bias"),
                  get("head.fc.weight"), get("head.fc.bias"))
    model.dtype = model.head_fc_weight.dtype
    extra = set(bundle.names()) - used
    if extra:
        raise ValueError(f"weights contain tensors the config does not use: {sorted(extra)[:5]}")
    _check_shapes(model)
    return model


def _check_shapes(model: Model) -> None:
    ref = build_model(model.config, InitScheme(seed=0), dtype=np.float32)
    for (name, got), (_, want) in zip(model.named_tensors(), ref.named_tensors()):
        if got.shape != want.shape:
            raise ValueError(f"tensor {name!r} has shape {got.shape}, config expects {want.shape}")


# --------------------------------------------------------------------------- forward


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0):
    """Dense 2D convolution of a [C_in, H, W] map with weight [C_out, C_in, k, k]."""
    c_in, H, W = x.shape
    c_out, wc, k, k2 = weight.shape
    if wc != c_in or k != k2:
        raise ValueError(f"conv weight {weight.shape} does not fit input {x.shape}")
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding))) if padding else x
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(weight, win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        out += bias[:, None, None]
    return np.ascontiguousarray(out)


def _conv_norm_forward(x, p: ConvNorm, stride: int):
    return layer_norm_chw(conv2d(x, p.conv_weight, p.conv_bias, stride=stride, padding=1),
                          p.norm_weight, p.norm_bias)


def stem_forward(model: Model, image):
    x = gelu(_conv_norm_forward(image, model.stem[0], 2))
    return _conv_norm_forward(x, model.stem[1], 2)


def _check_image(model: Model, image):
    image = np.asarray(image, dtype=model.dtype)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError(f"expected a [3, H, W] image, got {image.shape}")
    if image.shape[1] % 32 or image.shape[2] % 32:
        raise ValueError(f"image size {image.shape[1]}x{image.shape[2]} is not divisible by 32")
    return image


def model_features(model: Model, image, return_stages: bool = False, stop_at_block: Optional[int] = None,
                   workers: int = 1, checked: bool = True):
    """Backbone forward. Returns the final-stage map, or every stage output.

    With ``stop_at_block=i`` the forward halts at the i-th VSS block (flat
    index) and returns ``(normed_input, block_params)`` of that block.
    """
    x = stem_forward(model, _check_image(model, image))
    outs = []
    flat = 0
    for s, blocks in enumerate(model.stages):
        for blk in blocks:
            if stop_at_block == flat:
                return layer_norm_chw(x, blk.norm1_weight, blk.norm1_bias), blk
            x = vss_block_forward(x, blk, workers=workers, checked=checked)
            flat += 1
        outs.append(x)
        if s < 3:
            x = _conv_norm_forward(x, model.downsamples[s], 2)
    if stop_at_block is not None:
        raise IndexError(f"block {stop_at_block} out of range (model has {flat} blocks)")
    return outs if return_stages else outs[-1]


def model_forward(model: Model, image, workers: int = 1, checked: bool = True):
    """Logits [num_classes] for a single [3, H, W] image (no softmax)."""
    feat = model_features(model, image, workers=workers, checked=checked)
    pooled = feat.mean(axis=(1, 2))
    logits = model.head_fc_weight @ layer_norm(pooled, model.head_norm_weight, model.head_norm_bias) \
        + model.head_fc_bias
    if checked:
        check_finite(logits, "logits")
    return logits


# --------------------------------------------------------------------------- accounting


@dataclass
class Cost:
    component: str
    params: int = 0
    token_flops: int = 0      # scales with H*W
    fixed_flops: int = 0      # resolution independent

    @property
    def flops(self) -> int:
        return self.token_flops + self.fixed_flops


def _ss2d_costs(cfg: ModelConfig, d: int, T: int, gated: bool) -> tuple[int, int]:
    """(params, flops) of one SS2D unit (projections through out_proj) at T tokens."""
    di = int(cfg.ssm_ratio * d)
    N, R = cfg.d_state, math.ceil(d / 16)
    K = cfg.pattern.num_paths
    proj_out = 2 * di if gated else di
    params = d * proj_out + proj_out                               # in_proj
    flops = T * d * proj_out
    if cfg.dwconv:
        params += 9 * di + di
        flops += T * 9 * di
    flops += T * di * ACT_COST
    per_path = (R + 2 * N) * di + di * R + di + di * N + di        # x_proj, dt_proj(+b), A_log, D
    params += K * per_path
    flops += K * T * ((R + 2 * N) * di + R * di + di * ACT_COST
                      + di * N * SCAN_STATE_COST + di * SCAN_SKIP_COST)
    params += 2 * di                                               # out_norm
    flops += T * di * NORM_COST
    if gated:
        flops += T * di * 2 * ACT_COST                             # SiLU(z) and the product
    params += di * d + d                                           # out_proj
    flops += T * di * d
    return params, flops


def cost_inventory(cfg: ModelConfig, input_hw=(224, 224)) -> list[Cost]:
    """Per-component parameters and MACs under the documented cost model."""
    H, W = input_hw
    if H % 32 or W % 32 or H <= 0 or W <= 0:
        raise ValueError(f"input size {H}x{W} must be positive and divisible by 32")
    d = cfg.dims
    out = []
    h, w = H // 4, W // 4
    if cfg.variant is Variant.VMAMBA:
        c0 = d[0] // 2
        p = (3 * c0 * 9 + c0 + 2 * c0) + (c0 * d[0] * 9 + d[0] + 2 * d[0])
        f = (H // 2) * (W // 2) * (27 * c0 + c0 * (NORM_COST + ACT_COST)) \
            + h * w * (9 * c0 * d[0] + d[0] * NORM_COST)
    else:
        p = 3 * d[0] * 16 + d[0] + 2 * d[0]                        # conv 4x4 stride 4 + LN
        f = h * w * (48 * d[0] + d[0] * NORM_COST)
    out.append(Cost("stem", p, f))

    for s in range(4):
        T = h * w
        ds = d[s]
        gated = cfg.variant is Variant.VANILLA
        sp, sf = _ss2d_costs(cfg, ds, T, gated)
        bp = 2 * ds + sp
        bf = T * ds * NORM_COST + sf
        if not gated:
            hid = int(cfg.mlp_ratio * ds)
            bp += 2 * ds + ds * hid + hid + hid * ds + ds
            bf += T * (ds * NORM_COST + 2 * ds * hid + hid * ACT_COST)
        out.append(Cost(f"stage{s}", bp * cfg.layers[s], bf * cfg.layers[s]))
        if s < 3:
            h2, w2 = h // 2, w // 2
            if cfg.variant is Variant.VMAMBA:
                p = 9 * ds * 2 * ds + 2 * ds + 2 * 2 * ds
                f = h2 * w2 * (9 * ds * 2 * ds + 2 * ds * NORM_COST)
            else:
                # patch merging: LN(4C) then bias-free linear 4C -> 2C
                p = 2 * 4 * ds + 4 * ds * 2 * ds
                f = h2 * w2 * (4 * ds * NORM_COST + 4 * ds * 2 * ds)
            out.append(Cost(f"downsample{s}", p, f))
            h, w = h2, w2
    C = d[3]
    out.append(Cost("head", 2 * C + C * cfg.num_classes + cfg.num_classes,
                    token_flops=h * w * C * ACT_COST,
                    fixed_flops=C * NORM_COST + C * cfg.num_classes))
    return out


def count_params(config: ModelConfig) -> int:
    return sum(c.params for c in cost_inventory(config))


def count_flops(config: ModelConfig, input_hw=(224, 224)) -> int:
    if isinstance(input_hw, int):
        input_hw = (input_hw, input_hw)
    return sum(c.flops for c in cost_inventory(config, tuple(input_hw)))
