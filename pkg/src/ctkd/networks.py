"""Residual-USE-Net teachers and the Mobile-Residual-USE-Net student.

The network is a 3D U-Net: a residual encoder that halves resolution at each
stage, squeeze-and-excitation gates on the skip connections, and a decoder of
plain conv blocks. The student swaps every block convolution for a depthwise
separable one; only the stem convolution stays regular.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

UPSAMPLING = ("transposed", "trilinear")
CONV_STYLES = ("regular", "depthwise")


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    num_classes: int = 14
    base_features: int = 32
    num_stages: int = 4
    decoder_upsampling: str = "transposed"
    conv_style: str = "regular"
    se_reduction: int = 8
    kernel_size: int = 3
    negative_slope: float = 0.01
    norm_eps: float = 1e-5

    def validate(self) -> "NetworkConfig":
        if self.in_channels < 1 or self.num_classes < 2:
            raise ValueError("in_channels must be >= 1 and num_classes >= 2")
        if self.num_stages < 1:
            raise ValueError(f"num_stages must be >= 1, got {self.num_stages}")
        if self.base_features < 1:
            raise ValueError(f"base_features must be >= 1, got {self.base_features}")
        if self.decoder_upsampling not in UPSAMPLING:
            raise ValueError(f"decoder_upsampling must be one of {UPSAMPLING}, got {self.decoder_upsampling!r}")
        if self.conv_style not in CONV_STYLES:
            raise ValueError(f"conv_style must be one of {CONV_STYLES}, got {self.conv_style!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be odd, got {self.kernel_size}")
        for width in self.widths[:-1]:
            if self.se_reduction < 1 or width % self.se_reduction:
                raise ValueError(f"skip width {width} is not divisible by se_reduction {self.se_reduction}")
        return self

    @property
    def widths(self) -> list[int]:
        """Feature width of every resolution level, finest first."""
        return [self.base_features * 2**i for i in range(self.num_stages + 1)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "NetworkConfig":
        return cls(**dict(d)).validate()


class ModelParams(dict):
    """Ordered mapping of unique parameter names to leaf tensors."""

    def sub(self, prefix: str) -> dict[str, Tensor]:
        pre = prefix + "."
        return {k[len(pre) :]: v for k, v in self.items() if k.startswith(pre)}

    def size(self) -> int:
        return int(sum(t.data.size for t in self.values()))

    def tensors(self) -> Iterator[Tensor]:
        return iter(self.values())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams((k, Tensor(v.data.astype(dtype), requires_grad=True)) for k, v in self.items())


# ------------------------------------------------------------------- layout
def _conv_shapes(name: str, cin: int, cout: int, k: int, style: str) -> list[tuple[str, tuple, str]]:
    if style == "depthwise" and k > 1:
        return [
            (f"{name}.dw", (cin, 1, k, k, k), "weight"),
            (f"{name}.pw", (cout, cin, 1, 1, 1), "weight"),
            (f"{name}.b", (cout,), "bias"),
        ]
    return [(f"{name}.w", (cout, cin, k, k, k), "weight"), (f"{name}.b", (cout,), "bias")]


def _norm_shapes(name: str, c: int) -> list[tuple[str, tuple, str]]:
    return [(f"{name}.gain", (c,), "gain"), (f"{name}.bias", (c,), "bias")]


def _residual_shapes(p: str, cin: int, cout: int, stride: int, cfg: NetworkConfig):
    k = cfg.kernel_size
    out = _conv_shapes(f"{p}.conv1", cin, cout, k, cfg.conv_style)
    out += _norm_shapes(f"{p}.norm1", cout)
    out += _conv_shapes(f"{p}.conv2", cout, cout, k, cfg.conv_style)
    out += _norm_shapes(f"{p}.norm2", cout)
    if stride != 1 or cin != cout:
        out += _conv_shapes(f"{p}.proj", cin, cout, 1, "regular")
        out += _norm_shapes(f"{p}.proj_norm", cout)
    return out


def _plain_shapes(p: str, cin: int, cout: int, cfg: NetworkConfig):
    k = cfg.kernel_size
    out = _conv_shapes(f"{p}.conv1", cin, cout, k, cfg.conv_style)
    out += _norm_shapes(f"{p}.norm1", cout)
    out += _conv_shapes(f"{p}.conv2", cout, cout, k, cfg.conv_style)
    out += _norm_shapes(f"{p}.norm2", cout)
    return out


def _se_shapes(p: str, c: int, r: int):
    hidden = c // r
    return _conv_shapes(f"{p}.fc1", c, hidden, 1, "regular") + _conv_shapes(f"{p}.fc2", hidden, c, 1, "regular")


def _up_shapes(p: str, cin: int, cout: int, cfg: NetworkConfig):
    if cfg.decoder_upsampling == "transposed":
        return [(f"{p}.w", (cin, cout, 2, 2, 2), "weight"), (f"{p}.b", (cout,), "bias")]
    return _conv_shapes(p, cin, cout, cfg.kernel_size, "regular")


def parameter_layout(config: NetworkConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init-kind) for every learnable tensor, in build order."""
    cfg = config.validate()
    w = cfg.widths
    layout = _conv_shapes("stem.conv", cfg.in_channels, w[0], cfg.kernel_size, "regular")
    layout += _norm_shapes("stem.norm", w[0])
    layout += _residual_shapes("enc0", w[0], w[0], 1, cfg)
    for i in range(1, cfg.num_stages + 1):
        layout += _residual_shapes(f"enc{i}", w[i - 1], w[i], 2, cfg)
    for i in reversed(range(cfg.num_stages)):
        layout += _se_shapes(f"skip{i}", w[i], cfg.se_reduction)
        layout += _up_shapes(f"up{i}", w[i + 1], w[i], cfg)
        layout += _plain_shapes(f"dec{i}", 2 * w[i], w[i], cfg)
    layout += _conv_shapes("head", w[0], cfg.num_classes, 1, "regular")
    return layout


def _xavier_std(shape: tuple) -> float:
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    return float(np.sqrt(2.0 / (fan_in + fan_out)))


def build_model(config: NetworkConfig, init_seed: int, dtype=np.float32) -> ModelParams:
    """Instantiate parameters: Xavier-normal kernels, unit gains, zero biases."""
    rng = np.random.default_rng(init_seed)
    params = ModelParams()
    for name, shape, kind in parameter_layout(config):
        if kind == "weight":
            data = rng.normal(0.0, _xavier_std(shape), size=shape)
        elif kind == "gain":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


def count_parameters(config: NetworkConfig) -> int:
    """Closed-form learnable scalar count for ``config``."""
    cfg = config.validate()
    k3 = cfg.kernel_size**3
    dw = cfg.conv_style == "depthwise" and cfg.kernel_size > 1

    def conv(cin, cout):
        return (cin * k3 + cout * cin + cout) if dw else (cout * cin * k3 + cout)

    def norm(c):
        return 2 * c

    def residual(cin, cout, needs_proj):
        n = conv(cin, cout) + norm(cout) + conv(cout, cout) + norm(cout)
        return n + (cout * cin + cout + norm(cout) if needs_proj else 0)

    w = cfg.widths
    total = w[0] * cfg.in_channels * k3 + w[0] + norm(w[0])
    total += residual(w[0], w[0], False)
    for i in range(1, cfg.num_stages + 1):
        total += residual(w[i - 1], w[i], True)
    for i in range(cfg.num_stages):
        c, h = w[i], w[i] // cfg.se_reduction
        total += (h * c + h) + (c * h + c)
        if cfg.decoder_upsampling == "transposed":
            total += w[i + 1] * c * 8 + c
        else:
            total += c * w[i + 1] * k3 + c
        total += conv(2 * c, c) + norm(c) + conv(c, c) + norm(c)
    total += cfg.num_classes * w[0] + cfg.num_classes
    return total


# ------------------------------------------------------------------- blocks
def _conv(x: Tensor, p: Mapping[str, Tensor], name: str, stride: int = 1) -> Tensor:
    if f"{name}.dw" in p:
        k = p[f"{name}.dw"].shape[2]
        return ad.depthwise_separable_conv3d(
            x, p[f"{name}.dw"], p[f"{name}.pw"], p[f"{name}.b"], stride=stride, padding=k // 2
        )
    w = p[f"{name}.w"]
    return ad.conv3d(x, w, p[f"{name}.b"], stride=stride, padding=w.shape[2] // 2)


def _norm(x: Tensor, p: Mapping[str, Tensor], name: str, eps: float) -> Tensor:
    return ad.instance_norm(x, p[f"{name}.gain"], p[f"{name}.bias"], eps)


def _out_channels(p: Mapping[str, Tensor], name: str) -> int:
    key = f"{name}.pw" if f"{name}.pw" in p else f"{name}.w"
    return p[key].shape[0]


def residual_conv_block(
    x: Tensor, p: Mapping[str, Tensor], stride: int = 1, slope: float = 0.01, eps: float = 1e-5
) -> Tensor:
    """conv-norm-act, conv-norm, add shortcut, act."""
    cout = _out_channels(p, "conv1")
    h = ad.leaky_relu(_norm(_conv(x, p, "conv1", stride), p, "norm1", eps), slope)
    h = _norm(_conv(h, p, "conv2"), p, "norm2", eps)
    if "proj.w" in p:
        shortcut = _norm(ad.conv3d(x, p["proj.w"], p["proj.b"], stride=stride), p, "proj_norm", eps)
    elif stride == 1 and x.shape[1] == cout:
        shortcut = x
    else:
        raise ValueError(
            f"residual block maps {x.shape[1]} -> {cout} channels with stride {stride} but has no projection"
        )
    return ad.leaky_relu(ad.add(h, shortcut), slope)


def plain_conv_block(x: Tensor, p: Mapping[str, Tensor], slope: float = 0.01, eps: float = 1e-5) -> Tensor:
    h = ad.leaky_relu(_norm(_conv(x, p, "conv1"), p, "norm1", eps), slope)
    return ad.leaky_relu(_norm(_conv(h, p, "conv2"), p, "norm2", eps), slope)


def se_excitation(x: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Per-channel gate in (0, 1), shape [B, C, 1, 1, 1]."""
    s = ad.global_avg_pool(x)
    s = ad.relu(ad.conv3d(s, p["fc1.w"], p["fc1.b"]))
    return ad.sigmoid(ad.conv3d(s, p["fc2.w"], p["fc2.b"]))


def residual_se_block(x: Tensor, p: Mapping[str, Tensor], reduction: int | None = None) -> Tensor:
    """y = x + x * excite(x)."""
    c = x.shape[1]
    hidden = p["fc1.w"].shape[0]
    r = reduction if reduction is not None else c // max(hidden, 1)
    if r < 1 or c % r or c // r != hidden:
        raise ValueError(f"channel count {c} is not divisible by reduction ratio {r}")
    return ad.add(x, ad.mul(x, se_excitation(x, p)))


def _upsample(x: Tensor, p: Mapping[str, Tensor], cfg: NetworkConfig) -> Tensor:
    if cfg.decoder_upsampling == "transposed":
        return ad.conv3d_transposed(x, p["w"], p["b"], stride=2)
    up = ad.trilinear_resize(x, tuple(2 * n for n in x.shape[2:]))
    return ad.conv3d(up, p["w"], p["b"], padding=p["w"].shape[2] // 2)


def forward_segmentation(params: ModelParams, config: NetworkConfig, x: Tensor) -> Tensor:
    """Logits [B, num_classes, X, Y, Z] at input resolution."""
    cfg = config
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ValueError(f"input must be [B, {cfg.in_channels}, X, Y, Z], got {x.shape}")
    div = 2**cfg.num_stages
    for ax, n in zip("XYZ", x.shape[2:]):
        if n % div:
            raise ValueError(f"spatial extent {ax}={n} must be divisible by 2^num_stages = {div}")
    slope, eps = cfg.negative_slope, cfg.norm_eps
    stem = params.sub("stem")
    h = ad.leaky_relu(_norm(_conv(x, stem, "conv"), stem, "norm", eps), slope)
    skips = [residual_conv_block(h, params.sub("enc0"), 1, slope, eps)]
    for i in range(1, cfg.num_stages + 1):
        skips.append(residual_conv_block(skips[-1], params.sub(f"enc{i}"), 2, slope, eps))
    h = skips.pop()
    for i in reversed(range(cfg.num_stages)):
        gated = residual_se_block(skips[i], params.sub(f"skip{i}"), cfg.se_reduction)
        up = _upsample(h, params.sub(f"up{i}"), cfg)
        h = plain_conv_block(ad.concat([up, gated], axis=1), params.sub(f"dec{i}"), slope, eps)
    head = params.sub("head")
    return ad.conv3d(h, head["w"], head["b"])


@dataclass
class Model:
    """A network configuration bundled with its parameters."""

    config: NetworkConfig
    params: ModelParams

    def __call__(self, x: Tensor) -> Tensor:
        return forward_segmentation(self.params, self.config, x)

    def probabilities(self, x: Tensor) -> Tensor:
        return ad.softmax_channel(self(x))

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Channel probabilities for a raw array, outside any graph."""
        dtype = next(iter(self.params.values())).dtype
        frozen = ModelParams((k, v.detach()) for k, v in self.params.items())
        logits = forward_segmentation(frozen, self.config, Tensor(np.asarray(x, dtype=dtype)))
        return ad.softmax_channel(logits).data
