"""Assembly of the dual-path forecaster and its ablation variants.

The full model runs two parallel paths over a window of normalized
capacities — a multiscale stem with dense connectivity (channels x time)
and an encoder stack of attention/conv blocks (time x features) — fuses
them, and regresses the next cycle's normalized capacity through a linear
head. Variants drop one path, disable positional encoding and/or fusion
attention, or rewire the paths in series.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np

from . import blocks, ops
from .blocks import (
    DenseBlockParams,
    EcBlockParams,
    FusionParams,
    PositionalConfig,
    StemParams,
    glorot_uniform,
    zeros_param,
)
from .errors import ConfigError, DimensionError, FormatError, UsageError
from .tensor import Tensor

CHECKPOINT_FORMAT = "rulcast-checkpoint"
CHECKPOINT_VERSION = 1


class ModelVariant(str, Enum):
    FULL = "full"
    NO_PE = "no_pe"
    NO_PE_NO_ATTN = "no_pe_no_attn"
    NO_MFNET = "no_mfnet"
    NO_ECNET = "no_ecnet"
    SERIES = "series"


@dataclass
class ModelConfig:
    """Hyperparameters of the forecaster.

    ``window`` is the sliding-window length T_w; the remaining sizes are
    config-exposed because the benchmark protocol fixes only the training
    recipe, not the layer sizing.
    """

    window: int
    d_model: int = 32
    heads: int = 4
    d_ff: int = 64
    stem_branch_channels: int = 8
    dense_layers: int = 4
    growth: int = 8
    ec_blocks: int = 2
    dropout_p: float = 0.3
    positional: str = "sinusoidal"
    seed: int = 0

    def validate(self) -> None:
        checks = [
            (self.window >= 1, f"window must be >= 1, got {self.window}"),
            (self.d_model >= 1, f"d_model must be >= 1, got {self.d_model}"),
            (self.heads >= 1, f"heads must be >= 1, got {self.heads}"),
            (self.d_model % max(self.heads, 1) == 0,
             f"d_model {self.d_model} must be divisible by heads {self.heads}"),
            (self.d_ff >= 1, f"d_ff must be >= 1, got {self.d_ff}"),
            (self.stem_branch_channels >= 1,
             f"stem_branch_channels must be >= 1, got {self.stem_branch_channels}"),
            (self.dense_layers >= 1, f"dense_layers must be >= 1, got {self.dense_layers}"),
            (self.growth >= 1, f"growth must be >= 1, got {self.growth}"),
            (self.ec_blocks >= 1, f"ec_blocks must be >= 1, got {self.ec_blocks}"),
            (0.0 <= self.dropout_p < 1.0,
             f"dropout_p must be in [0, 1), got {self.dropout_p}"),
            (self.positional in ("sinusoidal", "none"),
             f"positional must be 'sinusoidal' or 'none', got {self.positional!r}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)


@dataclass
class _MfPath:
    stem: StemParams
    dense: DenseBlockParams
    bridge_w: Tensor  # 1x1 conv kernels (d_model, C_dense, 1)
    bridge_b: Tensor


@dataclass
class _EcPath:
    blocks: list[EcBlockParams]
    lift_w: Optional[Tensor] = None  # (1, d_model); absent in the series variant
    lift_b: Optional[Tensor] = None


class Model:
    """A built forecaster; construct through :func:`build_model`."""

    def __init__(self, cfg: ModelConfig, variant: ModelVariant,
                 mf: Optional[_MfPath], ec: Optional[_EcPath],
                 fusion: FusionParams, head_w: Tensor, head_b: Tensor,
                 pos_cfg: PositionalConfig, use_fusion_attention: bool):
        self.cfg = cfg
        self.variant = variant
        self._mf = mf
        self._ec = ec
        self._fusion = fusion
        self._head_w = head_w
        self._head_b = head_b
        self._pos = pos_cfg
        self._use_fusion_attention = use_fusion_attention

    # -- forward ------------------------------------------------------------

    def forward(self, window, training: bool = False,
                rng: np.random.Generator | None = None,
                capture: Optional[dict] = None) -> Tensor:
        """Predict the next normalized capacity for one window or a batch.

        Accepts shape (T_w,) giving a scalar tensor, or (B, T_w) giving a
        (B,) tensor. ``rng`` drives dropout and is required when training
        with dropout_p > 0.
        """
        x = window if isinstance(window, Tensor) else Tensor(np.asarray(window, dtype=np.float64))
        if x.ndim not in (1, 2):
            raise DimensionError(f"forward expects (T_w,) or (B, T_w), got {x.shape}")
        t = x.shape[-1]
        if t != self.cfg.window:
            raise DimensionError(
                f"window length {t} does not match configured T_w {self.cfg.window}")
        if training and self.cfg.dropout_p > 0 and rng is None:
            raise UsageError("training forward needs an rng for dropout")
        lead = x.shape[:-1]

        mf_seq = None
        if self._mf is not None:
            y = blocks.multiscale_stem(ops.reshape(x, (*lead, 1, t)), self._mf.stem)
            y = blocks.dense_block(y, self._mf.dense)
            y = ops.conv1d_same(y, self._mf.bridge_w, self._mf.bridge_b)
            mf_seq = ops.transpose_last2(y)  # (…, T, D)

        ec_seq = None
        if self._ec is not None:
            if self.variant is ModelVariant.SERIES:
                h = mf_seq
            else:
                h = ops.linear(ops.reshape(x, (*lead, t, 1)), self._ec.lift_w, self._ec.lift_b)
            for i, blk in enumerate(self._ec.blocks):
                h = blocks.ec_block(
                    h, blk, self._pos, inject_position=(i == 0),
                    dropout_p=self.cfg.dropout_p, training=training, rng=rng,
                )
            ec_seq = h

        if self.variant is ModelVariant.NO_ECNET:
            fused = blocks.fuse(mf_seq, None, self._fusion,
                                self._use_fusion_attention, capture)
        elif self.variant in (ModelVariant.NO_MFNET, ModelVariant.SERIES):
            fused = blocks.fuse(None, ec_seq, self._fusion,
                                self._use_fusion_attention, capture)
        else:
            fused = blocks.fuse(mf_seq, ec_seq, self._fusion,
                                self._use_fusion_attention, capture)

        out = ops.linear(fused, self._head_w, self._head_b)  # (…, 1)
        return ops.reshape(out, lead)

    # -- parameters -----------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        """Learnable tensors keyed by stable names, in construction order."""
        params: dict[str, Tensor] = {}

        def put(pairs):
            for name, tensor in pairs:
                params[name] = tensor

        if self._mf is not None:
            put(self._mf.stem.named("mf.stem"))
            put(self._mf.dense.named("mf.dense"))
            params["mf.bridge.weight"] = self._mf.bridge_w
            params["mf.bridge.bias"] = self._mf.bridge_b
        if self._ec is not None:
            if self._ec.lift_w is not None:
                params["ec.lift.weight"] = self._ec.lift_w
                params["ec.lift.bias"] = self._ec.lift_b
            for i, blk in enumerate(self._ec.blocks):
                put(blk.named(f"ec.block{i}"))
        put(self._fusion.named("fusion"))
        params["head.weight"] = self._head_w
        params["head.bias"] = self._head_b
        return params

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def param_count(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grads(self) -> None:
        for t in self.parameters():
            t.zero_grad()


def param_count(model: Model) -> int:
    """Total number of learnable scalars."""
    return model.param_count()


def build_model(cfg: ModelConfig, variant: ModelVariant | str = ModelVariant.FULL) -> Model:
    """Construct a forecaster; initialization is fully determined by cfg.seed.

    Weights are Glorot-uniform, biases zero, drawn in a fixed construction
    order from the init stream of :func:`rulcast.training.seed_everything`.
    """
    variant = ModelVariant(variant)
    cfg.validate()
    from .training import seed_everything  # local import to avoid a cycle

    rng = seed_everything(cfg.seed).init
    d = cfg.d_model

    effective_kind = cfg.positional
    if variant in (ModelVariant.NO_PE, ModelVariant.NO_PE_NO_ATTN):
        effective_kind = "none"
    pos_cfg = PositionalConfig(kind=effective_kind, max_len=max(cfg.window, 1))

    mf = None
    if variant is not ModelVariant.NO_MFNET:
        c_stem = cfg.stem_branch_channels
        stem = StemParams.create(1, cfg.stem_branch_channels, c_stem, rng)
        dense = DenseBlockParams.create(c_stem, cfg.dense_layers, cfg.growth, rng)
        c_dense = c_stem + cfg.dense_layers * cfg.growth
        bridge_w = glorot_uniform(rng, (d, c_dense, 1), c_dense, d)
        mf = _MfPath(stem, dense, bridge_w, zeros_param(d))

    ec = None
    if variant is not ModelVariant.NO_ECNET:
        lift_w = lift_b = None
        if variant is not ModelVariant.SERIES:
            lift_w = glorot_uniform(rng, (1, d), 1, d)
            lift_b = zeros_param(d)
        # 4 residual branches per block; damp their output projections so
        # the unnormalized stack starts near the identity
        res_scale = 1.0 / math.sqrt(2.0 * 4.0 * cfg.ec_blocks)
        ec_blocks = [
            EcBlockParams.create(d, cfg.heads, cfg.d_ff, rng, residual_scale=res_scale)
            for _ in range(cfg.ec_blocks)
        ]
        ec = _EcPath(blocks=ec_blocks, lift_w=lift_w, lift_b=lift_b)

    dual = variant in (ModelVariant.FULL, ModelVariant.NO_PE, ModelVariant.NO_PE_NO_ATTN)
    fusion = FusionParams.create(d, cfg.heads, paths=2 if dual else 1,
                                 positional=pos_cfg, rng=rng,
                                 with_attention=(variant is not ModelVariant.NO_PE_NO_ATTN))
    head_w = glorot_uniform(rng, (d, 1), d, 1)
    head_b = zeros_param(1)

    return Model(
        cfg=cfg, variant=variant, mf=mf, ec=ec, fusion=fusion,
        head_w=head_w, head_b=head_b, pos_cfg=pos_cfg,
        use_fusion_attention=(variant is not ModelVariant.NO_PE_NO_ATTN),
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Write config, variant, seed and all parameters as deterministic JSON.

    float64 values round-trip exactly through JSON's repr encoding, so a
    loaded checkpoint reproduces eval-mode outputs bitwise.
    """
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "variant": model.variant.value,
        "seed": model.cfg.seed,
        "params": {
            name: {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}
            for name, t in model.named_parameters().items()
        },
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path: str | Path) -> Model:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"checkpoint {path} is missing the {CHECKPOINT_FORMAT!r} marker")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"checkpoint {path} has unsupported version {payload.get('version')}")
    try:
        cfg = ModelConfig(**payload["config"])
        variant = ModelVariant(payload["variant"])
        stored = payload["params"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"checkpoint {path} has a malformed body: {exc}") from exc

    model = build_model(cfg, variant)
    params = model.named_parameters()
    if set(params) != set(stored):
        missing = sorted(set(params) ^ set(stored))
        raise FormatError(f"checkpoint {path} parameter names do not match model: {missing}")
    for name, tensor in params.items():
        entry = stored[name]
        shape = tuple(entry["shape"])
        if shape != tensor.shape:
            raise FormatError(
                f"checkpoint {path}: parameter {name} has shape {shape}, expected {tensor.shape}")
        tensor.data = np.asarray(entry["data"], dtype=np.float64).reshape(shape)
    return model
