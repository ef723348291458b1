# cbam/services/attention.py
"""
Channel attention, spatial attention and their arrangements.

    channel gate  M_c(F) = σ(Σ MLP(pool(F)))        pools ⊂ {spatial avg, spatial max}
    spatial gate  M_s(F) = σ(conv_k(descriptor(F)))
    refinement    F' = M_c(F) ⊗ F,  F'' = M_s(F') ⊗ F'

The MLP (w0 then relu then w1) carries no bias and is shared by both pooled descriptors,
so channel attention with average pooling alone is a squeeze-and-excitation gate.
"""
import dataclasses
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from cbam.exceptions import ConfigError, ShapeMismatch
from cbam.services.tensor import (
    Tensor,
    add,
    broadcast_mul,
    channel_avg_pool,
    channel_max_pool,
    concat_channel,
    conv2d,
    global_avg_pool_spatial,
    global_max_pool_spatial,
    linear,
    normal,
    relu,
    reshape,
    sigmoid,
    zeros,
)


class PoolingMode(str, Enum):
    AVG_ONLY = "avg"
    MAX_ONLY = "max"
    AVG_AND_MAX = "avg_max"


class SpatialDescriptor(str, Enum):
    CHANNEL_POOL = "channel_pool"
    ONE_BY_ONE = "one_by_one"


class Arrangement(str, Enum):
    CHANNEL_THEN_SPATIAL = "channel_then_spatial"
    SPATIAL_THEN_CHANNEL = "spatial_then_channel"
    PARALLEL = "parallel"
    CHANNEL_ONLY = "channel_only"


KERNEL_SIZES = (3, 7)


def hidden_width(channels: int, r: int) -> int:
    return max(1, channels // r)


def _enum(enum_cls, value, field):
    try:
        return enum_cls(value)
    except ValueError:
        allowed = ", ".join(repr(m.value) for m in enum_cls)
        raise ConfigError(f"{field}: {value!r} is not one of {allowed}") from None


# --- Hyperparameters (the JSON config) --------------------------------------
@dataclass(frozen=True)
class CbamVariant:
    """Shape-free description of a CBAM module; init_cbam turns it into weights."""

    arrangement: Arrangement = Arrangement.CHANNEL_THEN_SPATIAL
    channel_pooling: PoolingMode = PoolingMode.AVG_AND_MAX
    spatial_descriptor: SpatialDescriptor = SpatialDescriptor.CHANNEL_POOL
    kernel_size: int = 7
    reduction_ratio: int = 16

    FIELDS = ("arrangement", "channel_pooling", "spatial_descriptor", "kernel_size", "reduction_ratio")

    def __post_init__(self):
        object.__setattr__(self, "arrangement", _enum(Arrangement, self.arrangement, "arrangement"))
        object.__setattr__(
            self, "channel_pooling", _enum(PoolingMode, self.channel_pooling, "channel_pooling"))
        object.__setattr__(
            self, "spatial_descriptor",
            _enum(SpatialDescriptor, self.spatial_descriptor, "spatial_descriptor"))
        if self.kernel_size not in KERNEL_SIZES:
            raise ConfigError(f"kernel_size must be one of {KERNEL_SIZES}, got {self.kernel_size!r}")
        if not isinstance(self.reduction_ratio, int) or self.reduction_ratio < 1:
            raise ConfigError(f"reduction_ratio must be a positive integer, got {self.reduction_ratio!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "CbamVariant":
        unknown = set(data) - set(cls.FIELDS)
        if unknown:
            raise ConfigError(f"unknown CBAM config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return {
            "arrangement": self.arrangement.value,
            "channel_pooling": self.channel_pooling.value,
            "spatial_descriptor": self.spatial_descriptor.value,
            "kernel_size": self.kernel_size,
            "reduction_ratio": self.reduction_ratio,
        }

    @property
    def uses_spatial(self) -> bool:
        return self.arrangement is not Arrangement.CHANNEL_ONLY

    def label(self) -> str:
        parts = [self.channel_pooling.value]
        if self.uses_spatial:
            parts += [self.spatial_descriptor.value, f"k{self.kernel_size}", self.arrangement.value]
        else:
            parts.append(self.arrangement.value)
        parts.append(f"r{self.reduction_ratio}")
        return "cbam[" + "|".join(parts) + "]"


# --- Weights ----------------------------------------------------------------
@dataclass(frozen=True)
class ChannelAttentionParams:
    w0: Tensor
    w1: Tensor
    r: int = 16
    pooling_mode: PoolingMode = PoolingMode.AVG_AND_MAX

    def __post_init__(self):
        object.__setattr__(
            self, "pooling_mode", _enum(PoolingMode, self.pooling_mode, "pooling_mode"))
        if self.w0.ndim != 2 or self.w1.ndim != 2:
            raise ShapeMismatch("channel MLP weights must be matrices")
        hidden, c = self.w0.shape
        if hidden != hidden_width(c, self.r):
            raise ShapeMismatch(
                f"w0 is {self.w0.shape}, expected ({hidden_width(c, self.r)}, {c}) for r={self.r}")
        if self.w1.shape != (c, hidden):
            raise ShapeMismatch(f"w1 is {self.w1.shape}, expected ({c}, {hidden})")

    @property
    def channels(self) -> int:
        return self.w0.shape[1]

    def tensors(self) -> dict:
        return {"w0": self.w0, "w1": self.w1}


@dataclass(frozen=True)
class SpatialAttentionParams:
    kernel: Tensor
    bias: Tensor
    k: int = 7
    descriptor_mode: SpatialDescriptor = SpatialDescriptor.CHANNEL_POOL
    # Per-channel 1×1 weights (1×C×1×1); only for the one_by_one descriptor. This is a diagonal
    # 1×1 reparameterization: it scales each channel and the C-input k×k conv does the C→1 reduction.
    reduce: Optional[Tensor] = None

    def __post_init__(self):
        object.__setattr__(
            self, "descriptor_mode",
            _enum(SpatialDescriptor, self.descriptor_mode, "descriptor_mode"))
        if self.k % 2 == 0:
            raise ConfigError(f"spatial kernel size must be odd, got {self.k}")
        if self.kernel.ndim != 4 or self.kernel.shape[0] != 1 or self.kernel.shape[2:] != (self.k, self.k):
            raise ShapeMismatch(f"spatial kernel must be 1×cin×{self.k}×{self.k}, got {self.kernel.shape}")
        if self.bias.shape != (1,):
            raise ShapeMismatch(f"spatial bias must have shape (1,), got {self.bias.shape}")
        cin = self.kernel.shape[1]
        if self.descriptor_mode is SpatialDescriptor.CHANNEL_POOL:
            if cin != 2:
                raise ShapeMismatch(f"channel_pool descriptor needs 2 kernel input channels, got {cin}")
            if self.reduce is not None:
                raise ConfigError("channel_pool descriptor takes no 1×1 reduction weights")
        elif self.reduce is None or self.reduce.shape != (1, cin, 1, 1):
            got = None if self.reduce is None else self.reduce.shape
            raise ShapeMismatch(f"one_by_one descriptor needs reduce of shape (1, {cin}, 1, 1), got {got}")

    def tensors(self) -> dict:
        out = {"kernel": self.kernel, "bias": self.bias}
        if self.reduce is not None:
            out["reduce"] = self.reduce
        return out


@dataclass(frozen=True)
class CbamConfig:
    channel: ChannelAttentionParams
    spatial: Optional[SpatialAttentionParams] = None
    arrangement: Arrangement = Arrangement.CHANNEL_THEN_SPATIAL

    def __post_init__(self):
        object.__setattr__(self, "arrangement", _enum(Arrangement, self.arrangement, "arrangement"))
        if self.arrangement is Arrangement.CHANNEL_ONLY:
            if self.spatial is not None:
                raise ConfigError("channel_only arrangement takes no spatial params")
        elif self.spatial is None:
            raise ConfigError(f"{self.arrangement.value} arrangement needs spatial params")

    @property
    def variant(self) -> CbamVariant:
        spatial = self.spatial
        return CbamVariant(
            arrangement=self.arrangement,
            channel_pooling=self.channel.pooling_mode,
            spatial_descriptor=spatial.descriptor_mode if spatial else SpatialDescriptor.CHANNEL_POOL,
            kernel_size=spatial.k if spatial else 7,
            reduction_ratio=self.channel.r,
        )

    def tensors(self) -> dict:
        """Every learnable tensor, keyed "channel.w0", "spatial.kernel", ..."""
        out = {f"channel.{k}": v for k, v in self.channel.tensors().items()}
        if self.spatial is not None:
            out.update({f"spatial.{k}": v for k, v in self.spatial.tensors().items()})
        return out

    def with_tensors(self, tensors: dict) -> "CbamConfig":
        """Same hyperparameters, weights replaced from a tensors()-style mapping."""
        channel = dataclasses.replace(self.channel, w0=tensors["channel.w0"], w1=tensors["channel.w1"])
        spatial = self.spatial
        if spatial is not None:
            spatial = dataclasses.replace(
                spatial,
                kernel=tensors["spatial.kernel"],
                bias=tensors["spatial.bias"],
                reduce=tensors.get("spatial.reduce"),
            )
        return dataclasses.replace(self, channel=channel, spatial=spatial)


def _he_normal(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    return normal(shape, math.sqrt(2.0 / fan_in), rng)


def init_channel_params(channels: int, r: int, pooling_mode, rng: np.random.Generator) -> ChannelAttentionParams:
    hidden = hidden_width(channels, r)
    return ChannelAttentionParams(
        w0=_he_normal((hidden, channels), channels, rng),
        w1=_he_normal((channels, hidden), hidden, rng),
        r=r,
        pooling_mode=pooling_mode,
    )


def init_spatial_params(channels: int, k: int, descriptor_mode, rng: np.random.Generator) -> SpatialAttentionParams:
    descriptor_mode = _enum(SpatialDescriptor, descriptor_mode, "descriptor_mode")
    if descriptor_mode is SpatialDescriptor.CHANNEL_POOL:
        return SpatialAttentionParams(
            kernel=_he_normal((1, 2, k, k), 2 * k * k, rng), bias=zeros((1,)), k=k,
            descriptor_mode=descriptor_mode,
        )
    return SpatialAttentionParams(
        kernel=_he_normal((1, channels, k, k), channels * k * k, rng), bias=zeros((1,)), k=k,
        descriptor_mode=descriptor_mode, reduce=_he_normal((1, channels, 1, 1), 1, rng),
    )


def init_cbam(variant: CbamVariant, channels: int, rng: np.random.Generator) -> CbamConfig:
    channel = init_channel_params(channels, variant.reduction_ratio, variant.channel_pooling, rng)
    spatial = None
    if variant.uses_spatial:
        spatial = init_spatial_params(channels, variant.kernel_size, variant.spatial_descriptor, rng)
    return CbamConfig(channel=channel, spatial=spatial, arrangement=variant.arrangement)


# --- Forward ----------------------------------------------------------------
def channel_logits(f: Tensor, p: ChannelAttentionParams) -> Tensor:
    """Pre-sigmoid channel map, N×C×1×1."""
    if f.ndim != 4 or f.shape[1] != p.channels:
        raise ShapeMismatch(f"channel attention built for C={p.channels}, got input {f.shape}")
    n, c = f.shape[:2]
    pools = {
        PoolingMode.AVG_ONLY: (global_avg_pool_spatial,),
        PoolingMode.MAX_ONLY: (global_max_pool_spatial,),
        PoolingMode.AVG_AND_MAX: (global_avg_pool_spatial, global_max_pool_spatial),
    }[p.pooling_mode]
    logit = None
    for pool in pools:
        descriptor = reshape(pool(f), (n, c))
        term = linear(relu(linear(descriptor, p.w0)), p.w1)
        logit = term if logit is None else add(logit, term)
    return reshape(logit, (n, c, 1, 1))


def channel_attention(f: Tensor, p: ChannelAttentionParams) -> Tensor:
    return sigmoid(channel_logits(f, p))


def spatial_logits(f: Tensor, p: SpatialAttentionParams) -> Tensor:
    """Pre-sigmoid spatial map, N×1×H×W."""
    if f.ndim != 4:
        raise ShapeMismatch(f"spatial attention input must be N×C×H×W, got {f.shape}")
    if p.descriptor_mode is SpatialDescriptor.CHANNEL_POOL:
        descriptor = concat_channel(channel_avg_pool(f), channel_max_pool(f))
    else:
        if f.shape[1] != p.kernel.shape[1]:
            raise ShapeMismatch(
                f"one_by_one spatial attention built for C={p.kernel.shape[1]}, got input {f.shape}")
        descriptor = broadcast_mul(f, p.reduce)
    return conv2d(descriptor, p.kernel, p.bias, (p.k - 1) // 2)


def spatial_attention(f: Tensor, p: SpatialAttentionParams) -> Tensor:
    return sigmoid(spatial_logits(f, p))


def cbam_forward(f: Tensor, cfg: CbamConfig) -> Tensor:
    arrangement = cfg.arrangement
    if arrangement is Arrangement.CHANNEL_ONLY:
        return broadcast_mul(channel_attention(f, cfg.channel), f)
    if arrangement is Arrangement.CHANNEL_THEN_SPATIAL:
        refined = broadcast_mul(channel_attention(f, cfg.channel), f)
        return broadcast_mul(spatial_attention(refined, cfg.spatial), refined)
    if arrangement is Arrangement.SPATIAL_THEN_CHANNEL:
        refined = broadcast_mul(spatial_attention(f, cfg.spatial), f)
        return broadcast_mul(channel_attention(refined, cfg.channel), refined)
    # Parallel: one sigmoid over the summed logits, broadcast to N×C×H×W.
    gate = sigmoid(add(channel_logits(f, cfg.channel), spatial_logits(f, cfg.spatial)))
    return broadcast_mul(gate, f)


def se_forward(f: Tensor, p: ChannelAttentionParams) -> Tensor:
    """Squeeze-and-excitation: f ⊗ σ(w1·relu(w0·avgpool(f))), whatever p.pooling_mode says."""
    if f.ndim != 4 or f.shape[1] != p.w0.shape[1]:
        raise ShapeMismatch(f"SE gate built for C={p.w0.shape[1]}, got input {f.shape}")
    n, c = f.shape[:2]
    squeezed = reshape(global_avg_pool_spatial(f), (n, c))
    excited = sigmoid(linear(relu(linear(squeezed, p.w0)), p.w1))
    return broadcast_mul(f, reshape(excited, (n, c, 1, 1)))


# --- Accounting -------------------------------------------------------------
def _variant_of(cfg) -> CbamVariant:
    return cfg.variant if isinstance(cfg, CbamConfig) else cfg


def param_count(cfg, channels: int) -> int:
    """Learnable element count for a CbamConfig (or CbamVariant) on C channels."""
    v = _variant_of(cfg)
    total = 2 * channels * hidden_width(channels, v.reduction_ratio)
    if v.uses_spatial:
        k2 = v.kernel_size ** 2
        if v.spatial_descriptor is SpatialDescriptor.CHANNEL_POOL:
            total += 2 * k2 + 1
        else:
            total += channels + channels * k2 + 1
    return total


def mac_count(cfg, channels: int, height: int, width: int) -> int:
    """Multiply-accumulates for one sample: MLPs, spatial conv and the gating products."""
    v = _variant_of(cfg)
    hw = height * width
    descriptors = 2 if v.channel_pooling is PoolingMode.AVG_AND_MAX else 1
    macs = descriptors * 2 * channels * hidden_width(channels, v.reduction_ratio)
    macs += channels * hw
    if v.uses_spatial:
        k2 = v.kernel_size ** 2
        if v.spatial_descriptor is SpatialDescriptor.CHANNEL_POOL:
            macs += 2 * k2 * hw
        else:
            macs += channels * hw + channels * k2 * hw
        if v.arrangement is not Arrangement.PARALLEL:
            macs += channels * hw
    return macs
