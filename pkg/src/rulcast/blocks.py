"""Layer blocks for the dual-path capacity forecaster.

Parameter containers are plain dataclasses holding tensors; the forward
functions are free functions so blocks stay composable and easy to probe
in tests. All block forwards preserve sequence shape: an encoder block or
attention layer maps (T, D) -> (T, D), batched or not.

No normalization layers are used anywhere; every encoder stage is wrapped
in a plain residual connection instead, which also guarantees that a
zero-weight block is exactly the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import ops
from .errors import ConfigError, DimensionError
from .tensor import Tensor

STEM_KERNEL_SIZES = (1, 3, 5, 7)

_ACTIVATIONS = {"relu": ops.relu, "tanh": ops.tanh}


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


# ---------------------------------------------------------------------------
# positional encoding


@dataclass
class PositionalConfig:
    """How (and whether) position is injected before self-attention."""

    kind: str = "sinusoidal"  # "sinusoidal" | "none"
    max_len: int = 512

    def __post_init__(self):
        if self.kind not in ("sinusoidal", "none"):
            raise ConfigError(f"positional kind must be 'sinusoidal' or 'none', got {self.kind!r}")
        if self.max_len < 1:
            raise ConfigError(f"positional max_len must be positive, got {self.max_len}")


def sinusoidal_table(length: int, d_model: int) -> np.ndarray:
    """PE[t, 2i] = sin(t / 10000^(2i/D)), PE[t, 2i+1] = cos of the same argument."""
    positions = np.arange(length, dtype=np.float64)[:, None]
    pair = np.arange(0, d_model, 2, dtype=np.float64)
    angles = positions / np.power(10000.0, pair / d_model)
    table = np.zeros((length, d_model))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table


def add_positional(x: Tensor, cfg: PositionalConfig) -> Tensor:
    """Add the sinusoidal table to (…, T, D); identity when kind is 'none'."""
    if cfg.kind == "none":
        return x
    t = x.shape[-2]
    if t > cfg.max_len:
        raise ConfigError(f"sequence length {t} exceeds positional max_len {cfg.max_len}")
    return ops.add(x, Tensor(sinusoidal_table(t, x.shape[-1])))


# ---------------------------------------------------------------------------
# attention and feed-forward


@dataclass
class MhsaParams:
    """Query/key/value/output projections for multi-head self-attention."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    def __post_init__(self):
        d = self.wq.shape[0]
        for name, w in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            if w.shape != (d, d):
                raise DimensionError(f"MHSA {name} must be ({d}, {d}), got {w.shape}")
        if self.heads < 1 or d % self.heads != 0:
            raise ConfigError(f"model dim {d} is not divisible by heads {self.heads}")

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @property
    def d_k(self) -> int:
        return self.d_model // self.heads

    @classmethod
    def create(cls, d_model: int, heads: int, rng: np.random.Generator) -> "MhsaParams":
        make = lambda: glorot_uniform(rng, (d_model, d_model), d_model, d_model)
        return cls(wq=make(), wk=make(), wv=make(), wo=make(), heads=heads)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.wq", self.wq
        yield f"{prefix}.wk", self.wk
        yield f"{prefix}.wv", self.wv
        yield f"{prefix}.wo", self.wo


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, t, d = x.shape
    y = ops.reshape(x, (*lead, t, heads, d // heads))
    return ops.swap_axes(y, -3, -2)  # (…, h, T, d_k)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, t, dk = x.shape
    y = ops.swap_axes(x, -3, -2)
    return ops.reshape(y, (*lead, t, h * dk))


def mhsa(x: Tensor, p: MhsaParams, capture: Optional[dict] = None) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated and projected.

    ``capture``, when given, receives the attention weights under the key
    "attention" (shape (…, heads, T, T)) for inspection.
    """
    if x.shape[-1] != p.d_model:
        raise DimensionError(f"mhsa: input {x.shape} does not match model dim {p.d_model}")
    q = _split_heads(ops.matmul(x, p.wq), p.heads)
    k = _split_heads(ops.matmul(x, p.wk), p.heads)
    v = _split_heads(ops.matmul(x, p.wv), p.heads)
    scores = ops.scale(ops.matmul(q, ops.swap_axes(k, -1, -2)), 1.0 / math.sqrt(p.d_k))
    attn = ops.softmax_lastdim(scores)
    if capture is not None:
        capture["attention"] = attn.data.copy()
    ctx = _merge_heads(ops.matmul(attn, v))
    return ops.matmul(ctx, p.wo)


@dataclass
class FfnParams:
    """Two affine maps with a nonlinearity between: act(x W1 + b1) W2 + b2."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.w1.shape[1] != self.w2.shape[0] or self.w1.shape[0] != self.w2.shape[1]:
            raise DimensionError(f"ffn weights do not chain: {self.w1.shape} then {self.w2.shape}")

    @classmethod
    def create(cls, d_model: int, d_ff: int, rng: np.random.Generator,
               activation: str = "relu") -> "FfnParams":
        return cls(
            w1=glorot_uniform(rng, (d_model, d_ff), d_model, d_ff),
            b1=zeros_param(d_ff),
            w2=glorot_uniform(rng, (d_ff, d_model), d_ff, d_model),
            b2=zeros_param(d_model),
            activation=activation,
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.b1", self.b1
        yield f"{prefix}.w2", self.w2
        yield f"{prefix}.b2", self.b2


def ffn(x: Tensor, p: FfnParams) -> Tensor:
    act = _ACTIVATIONS[p.activation]
    return ops.linear(act(ops.linear(x, p.w1, p.b1)), p.w2, p.b2)


# ---------------------------------------------------------------------------
# multiscale stem and dense connectivity


@dataclass
class StemParams:
    """Parallel k=1/3/5/7 convolution branches compressed by a 1x1 projection."""

    branch_kernels: list[Tensor]  # one (C_b, C_in, k) tensor per kernel size
    branch_biases: list[Tensor]
    proj_kernels: Tensor  # (C_s, 4*C_b, 1)
    proj_bias: Tensor

    @classmethod
    def create(cls, c_in: int, branch_channels: int, out_channels: int,
               rng: np.random.Generator) -> "StemParams":
        kernels, biases = [], []
        for k in STEM_KERNEL_SIZES:
            kernels.append(
                glorot_uniform(rng, (branch_channels, c_in, k), c_in * k, branch_channels * k)
            )
            biases.append(zeros_param(branch_channels))
        total = branch_channels * len(STEM_KERNEL_SIZES)
        proj = glorot_uniform(rng, (out_channels, total, 1), total, out_channels)
        return cls(kernels, biases, proj, zeros_param(out_channels))

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for k, kern, bias in zip(STEM_KERNEL_SIZES, self.branch_kernels, self.branch_biases):
            yield f"{prefix}.k{k}.weight", kern
            yield f"{prefix}.k{k}.bias", bias
        yield f"{prefix}.proj.weight", self.proj_kernels
        yield f"{prefix}.proj.bias", self.proj_bias


def multiscale_stem(x: Tensor, p: StemParams) -> Tensor:
    """Four parallel same-length convolutions, activated, concatenated, projected."""
    branches = [
        ops.relu(ops.conv1d_same(x, kern, bias))
        for kern, bias in zip(p.branch_kernels, p.branch_biases)
    ]
    stacked = ops.concat_channels(branches)
    return ops.conv1d_same(stacked, p.proj_kernels, p.proj_bias)


@dataclass
class DenseBlockParams:
    """Convolution layers where layer l sees the input plus all earlier outputs."""

    layer_kernels: list[Tensor]  # layer l: (growth, c0 + l*growth, k)
    layer_biases: list[Tensor]

    @classmethod
    def create(cls, c0: int, layers: int, growth: int, rng: np.random.Generator,
               kernel_size: int = 3) -> "DenseBlockParams":
        kernels, biases = [], []
        for layer in range(layers):
            c_in = c0 + layer * growth
            kernels.append(
                glorot_uniform(rng, (growth, c_in, kernel_size),
                               c_in * kernel_size, growth * kernel_size)
            )
            biases.append(zeros_param(growth))
        return cls(kernels, biases)

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        for i, (kern, bias) in enumerate(zip(self.layer_kernels, self.layer_biases)):
            yield f"{prefix}.l{i}.weight", kern
            yield f"{prefix}.l{i}.bias", bias


def dense_block(x: Tensor, p: DenseBlockParams) -> Tensor:
    """Grow channels layer by layer; the input channels pass through untouched."""
    features = x
    for kern, bias in zip(p.layer_kernels, p.layer_biases):
        new = ops.relu(ops.conv1d_same(features, kern, bias))
        features = ops.concat_channels([features, new])
    return features


# ---------------------------------------------------------------------------
# encoder block: attention -> FFN -> depthwise-separable conv -> FFN


@dataclass
class SepConvParams:
    depth_kernels: Tensor  # (C, k)
    point_kernels: Tensor  # (C, C)
    bias: Tensor

    @classmethod
    def create(cls, channels: int, rng: np.random.Generator, kernel_size: int = 3) -> "SepConvParams":
        return cls(
            depth_kernels=glorot_uniform(rng, (channels, kernel_size), kernel_size, kernel_size),
            point_kernels=glorot_uniform(rng, (channels, channels), channels, channels),
            bias=zeros_param(channels),
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.depth", self.depth_kernels
        yield f"{prefix}.point", self.point_kernels
        yield f"{prefix}.bias", self.bias


@dataclass
class EcBlockParams:
    attn: MhsaParams
    ffn1: FfnParams
    conv: SepConvParams
    ffn2: FfnParams

    @classmethod
    def create(cls, d_model: int, heads: int, d_ff: int, rng: np.random.Generator,
               conv_kernel: int = 3, activation: str = "relu",
               residual_scale: float = 1.0) -> "EcBlockParams":
        """``residual_scale`` < 1 damps each residual branch's output
        projection at init; without normalization layers this keeps the
        stack's output variance near its input variance, which the
        mandated learning rate needs to train stably."""
        block = cls(
            attn=MhsaParams.create(d_model, heads, rng),
            ffn1=FfnParams.create(d_model, d_ff, rng, activation),
            conv=SepConvParams.create(d_model, rng, conv_kernel),
            ffn2=FfnParams.create(d_model, d_ff, rng, activation),
        )
        if residual_scale != 1.0:
            for out_proj in (block.attn.wo, block.ffn1.w2,
                             block.conv.point_kernels, block.ffn2.w2):
                out_proj.data = out_proj.data * residual_scale
        return block

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield from self.attn.named(f"{prefix}.attn")
        yield from self.ffn1.named(f"{prefix}.ffn1")
        yield from self.conv.named(f"{prefix}.conv")
        yield from self.ffn2.named(f"{prefix}.ffn2")


def ec_block(
    x: Tensor,
    p: EcBlockParams,
    pos_cfg: PositionalConfig,
    inject_position: bool,
    dropout_p: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    capture: Optional[dict] = None,
) -> Tensor:
    """One encoder block over (…, T, D), shape preserving.

    Stage order: self-attention, feed-forward, depthwise-separable
    convolution across time, feed-forward — each wrapped in a residual
    connection with dropout on the stage output. Position is injected
    before attention only when this is the first block of a stack.
    """
    drop = lambda t: ops.dropout(t, dropout_p, training, rng)
    attended = mhsa(add_positional(x, pos_cfg) if inject_position else x, p.attn, capture)
    y1 = ops.add(x, drop(attended))
    y2 = ops.add(y1, drop(ffn(y1, p.ffn1)))
    conv_out = ops.depthwise_separable_conv1d(
        ops.transpose_last2(y2), p.conv.depth_kernels, p.conv.point_kernels, p.conv.bias
    )
    y3 = ops.add(y2, drop(ops.transpose_last2(conv_out)))
    return ops.add(y3, drop(ffn(y3, p.ffn2)))


# ---------------------------------------------------------------------------
# fusion head


@dataclass
class FusionParams:
    """Projection of the (concatenated) path outputs plus fusion attention.

    ``wf`` is (2D, D) when two paths feed the fusion and (D, D) when a
    single path does (path-ablated and series variants). ``attention`` is
    None when the fusion self-attention is ablated, so no unused
    parameters are allocated.
    """

    wf: Tensor
    attention: Optional[MhsaParams]
    positional: PositionalConfig

    @classmethod
    def create(cls, d_model: int, heads: int, paths: int, positional: PositionalConfig,
               rng: np.random.Generator, with_attention: bool = True) -> "FusionParams":
        if paths not in (1, 2):
            raise ConfigError(f"fusion supports 1 or 2 paths, got {paths}")
        d_in = paths * d_model
        return cls(
            wf=glorot_uniform(rng, (d_in, d_model), d_in, d_model),
            attention=MhsaParams.create(d_model, heads, rng) if with_attention else None,
            positional=positional,
        )

    def named(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.wf", self.wf
        if self.attention is not None:
            yield from self.attention.named(f"{prefix}.attn")


def fuse(
    o1: Optional[Tensor],
    o2: Optional[Tensor],
    p: FusionParams,
    use_attention: bool = True,
    capture: Optional[dict] = None,
) -> Tensor:
    """Concatenate path outputs, project, position-enhance, attend, mean-pool.

    Either path may be None (single-path wiring). Positional injection is
    controlled by ``p.positional`` (kind "none" skips it); ``use_attention``
    False skips the fusion self-attention, leaving projection + pooling.
    """
    if o1 is None and o2 is None:
        raise DimensionError("fuse needs at least one path output")
    if o1 is not None and o2 is not None:
        if o1.shape != o2.shape:
            raise DimensionError(f"fuse: path shapes differ, {o1.shape} vs {o2.shape}")
        z = ops.concat([o1, o2], axis=-1)
    else:
        z = o1 if o1 is not None else o2
    if z.shape[-1] != p.wf.shape[0]:
        raise DimensionError(f"fuse: input {z.shape} does not match projection {p.wf.shape}")
    proj = ops.matmul(z, p.wf)
    proj = add_positional(proj, p.positional)
    if use_attention and p.attention is not None:
        proj = mhsa(proj, p.attention, capture)
    return ops.mean(proj, axis=-2)
