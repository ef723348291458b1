# cbam/services/zoo.py
"""
Tiny residual classifiers with optional SE or CBAM gating inside each block.

Parameters are a flat, ordered dict of Tensors ("stem.weight", "blocks.1.conv2.bias",
"blocks.1.cbam.channel.w0", "fc.weight", ...). Specs are frozen dataclasses that
round-trip through JSON; checkpoints are a manifest.json plus one CBT1 file per tensor.
"""
import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
from django.conf import settings

from cbam.exceptions import ConfigError, IoFailure, ShapeMismatch
from cbam.services.attention import (
    CbamConfig,
    CbamVariant,
    ChannelAttentionParams,
    PoolingMode,
    SpatialAttentionParams,
    cbam_forward,
    hidden_width,
    init_cbam,
    init_channel_params,
    mac_count,
    param_count,
    se_forward,
)
from cbam.services.serialization import read_json, read_tensor, write_json, write_tensor
from cbam.services.tensor import (
    Tensor,
    add,
    conv2d,
    downsample,
    global_avg_pool_spatial,
    linear,
    normal,
    relu,
    reshape,
    zeros,
)

CHECKPOINT_FORMAT = "cbam-checkpoint/1"


class AttentionKind(str, Enum):
    NONE = "none"
    SE = "se"
    CBAM = "cbam"


# --- Specs ------------------------------------------------------------------
@dataclass(frozen=True)
class ResidualBlockSpec:
    in_channels: int
    out_channels: int
    attention: AttentionKind = AttentionKind.NONE
    cbam: Optional[CbamVariant] = None
    stride: int = 1
    # Used by SE blocks; CBAM blocks take theirs from the variant.
    reduction_ratio: int = 16

    def __post_init__(self):
        try:
            object.__setattr__(self, "attention", AttentionKind(self.attention))
        except ValueError:
            raise ConfigError(f"attention must be none, se or cbam, got {self.attention!r}") from None
        if isinstance(self.cbam, dict):
            object.__setattr__(self, "cbam", CbamVariant.from_dict(self.cbam))
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if (self.attention is AttentionKind.CBAM) != (self.cbam is not None):
            raise ConfigError("a cbam variant is required exactly when attention is 'cbam'")

    @property
    def needs_projection(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels

    def attention_param_count(self) -> int:
        c = self.out_channels
        if self.attention is AttentionKind.SE:
            return 2 * c * hidden_width(c, self.reduction_ratio)
        if self.attention is AttentionKind.CBAM:
            return param_count(self.cbam, c)
        return 0

    def to_dict(self) -> dict:
        out = {
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "attention": self.attention.value,
            "stride": self.stride,
            "reduction_ratio": self.reduction_ratio,
        }
        if self.cbam is not None:
            out["cbam"] = self.cbam.to_dict()
        return out


@dataclass(frozen=True)
class TinyNetSpec:
    in_channels: int = 3
    stem_channels: int = 16
    blocks: tuple = field(default_factory=tuple)
    num_classes: int = 10

    def __post_init__(self):
        blocks = tuple(
            b if isinstance(b, ResidualBlockSpec) else ResidualBlockSpec(**b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        if self.num_classes < 1:
            raise ConfigError("num_classes must be positive")
        width = self.stem_channels
        for i, block in enumerate(blocks):
            if block.in_channels != width:
                raise ConfigError(
                    f"block {i} expects {block.in_channels} input channels, previous stage gives {width}")
            width = block.out_channels

    @classmethod
    def from_dict(cls, data: dict) -> "TinyNetSpec":
        known = {"in_channels", "stem_channels", "blocks", "num_classes"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown network spec keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"bad block spec: {exc}") from exc

    @classmethod
    def default(cls, num_classes: Optional[int] = None) -> "TinyNetSpec":
        data = dict(settings.CBAM_DEFAULT_ARCH)
        if num_classes is not None:
            data["num_classes"] = num_classes
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "stem_channels": self.stem_channels,
            "blocks": [b.to_dict() for b in self.blocks],
            "num_classes": self.num_classes,
        }

    @property
    def feature_channels(self) -> int:
        return self.blocks[-1].out_channels if self.blocks else self.stem_channels

    def with_attention(self, kind, cbam: Optional[CbamVariant] = None,
                       reduction_ratio: Optional[int] = None) -> "TinyNetSpec":
        """Same backbone, every block gated by the given attention."""
        kind = AttentionKind(kind)
        blocks = tuple(
            dataclasses.replace(
                b, attention=kind, cbam=cbam if kind is AttentionKind.CBAM else None,
                reduction_ratio=reduction_ratio or b.reduction_ratio,
            )
            for b in self.blocks
        )
        return dataclasses.replace(self, blocks=blocks)

    def with_num_classes(self, num_classes: int) -> "TinyNetSpec":
        return dataclasses.replace(self, num_classes=num_classes)


# --- Parameters -------------------------------------------------------------
def _he_normal(shape, fan_in: int, rng: np.random.Generator) -> Tensor:
    return normal(shape, math.sqrt(2.0 / fan_in), rng)


def init_params(spec: TinyNetSpec, seed: int) -> dict:
    """
    Seeded initialisation. Backbone and attention weights come from separate streams,
    so nets that differ only in attention share identical backbone weights.
    """
    backbone = np.random.default_rng([seed, 0])
    gates = np.random.default_rng([seed, 1])
    params = {
        "stem.weight": _he_normal((spec.stem_channels, spec.in_channels, 3, 3), spec.in_channels * 9, backbone),
        "stem.bias": zeros((spec.stem_channels,)),
    }
    for i, b in enumerate(spec.blocks):
        pre = f"blocks.{i}"
        params[f"{pre}.conv1.weight"] = _he_normal((b.out_channels, b.in_channels, 3, 3), b.in_channels * 9, backbone)
        params[f"{pre}.conv1.bias"] = zeros((b.out_channels,))
        params[f"{pre}.conv2.weight"] = _he_normal((b.out_channels, b.out_channels, 3, 3), b.out_channels * 9, backbone)
        params[f"{pre}.conv2.bias"] = zeros((b.out_channels,))
        if b.needs_projection:
            params[f"{pre}.proj.weight"] = _he_normal((b.out_channels, b.in_channels, 1, 1), b.in_channels, backbone)
            params[f"{pre}.proj.bias"] = zeros((b.out_channels,))
        if b.attention is AttentionKind.SE:
            se = init_channel_params(b.out_channels, b.reduction_ratio, PoolingMode.AVG_ONLY, gates)
            params.update({f"{pre}.se.{k}": v for k, v in se.tensors().items()})
        elif b.attention is AttentionKind.CBAM:
            cfg = init_cbam(b.cbam, b.out_channels, gates)
            params.update({f"{pre}.cbam.{k}": v for k, v in cfg.tensors().items()})
    params["fc.weight"] = _he_normal((spec.num_classes, spec.feature_channels), spec.feature_channels, backbone)
    params["fc.bias"] = zeros((spec.num_classes,))
    return params


def zero_params(spec: TinyNetSpec) -> dict:
    return {name: zeros(t.shape) for name, t in init_params(spec, 0).items()}


def count_params(params: dict) -> int:
    return sum(t.size for t in params.values())


def spec_param_count(spec: TinyNetSpec) -> int:
    """Learnable element count implied by a spec, without allocating anything."""
    total = spec.stem_channels * spec.in_channels * 9 + spec.stem_channels
    for b in spec.blocks:
        total += b.out_channels * b.in_channels * 9 + b.out_channels
        total += b.out_channels * b.out_channels * 9 + b.out_channels
        if b.needs_projection:
            total += b.out_channels * b.in_channels + b.out_channels
        total += b.attention_param_count()
    total += spec.num_classes * spec.feature_channels + spec.num_classes
    return total


def net_macs(spec: TinyNetSpec, height: int, width: int) -> int:
    """Multiply-accumulates for one sample through convs, gates and the classifier."""
    macs = spec.stem_channels * spec.in_channels * 9 * height * width
    h, w = height, width
    for b in spec.blocks:
        ho, wo = (h + 1) // 2 if b.stride == 2 else h, (w + 1) // 2 if b.stride == 2 else w
        macs += b.out_channels * b.in_channels * 9 * h * w
        macs += b.out_channels * b.out_channels * 9 * ho * wo
        if b.needs_projection:
            macs += b.out_channels * b.in_channels * ho * wo
        if b.attention is AttentionKind.SE:
            macs += 2 * b.out_channels * hidden_width(b.out_channels, b.reduction_ratio)
            macs += b.out_channels * ho * wo
        elif b.attention is AttentionKind.CBAM:
            macs += mac_count(b.cbam, b.out_channels, ho, wo)
        h, w = ho, wo
    return macs + spec.num_classes * spec.feature_channels


def _subset(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def block_cbam_config(block: ResidualBlockSpec, params: dict, prefix: str) -> CbamConfig:
    tensors = _subset(params, f"{prefix}.cbam.")
    v = block.cbam
    channel = ChannelAttentionParams(
        w0=tensors["channel.w0"], w1=tensors["channel.w1"], r=v.reduction_ratio,
        pooling_mode=v.channel_pooling)
    spatial = None
    if v.uses_spatial:
        spatial = SpatialAttentionParams(
            kernel=tensors["spatial.kernel"], bias=tensors["spatial.bias"], k=v.kernel_size,
            descriptor_mode=v.spatial_descriptor, reduce=tensors.get("spatial.reduce"))
    return CbamConfig(channel=channel, spatial=spatial, arrangement=v.arrangement)


# --- Forward ----------------------------------------------------------------
def _attend(h: Tensor, block: ResidualBlockSpec, params: dict, prefix: str) -> Tensor:
    if block.attention is AttentionKind.SE:
        se = ChannelAttentionParams(
            w0=params[f"{prefix}.se.w0"], w1=params[f"{prefix}.se.w1"],
            r=block.reduction_ratio, pooling_mode=PoolingMode.AVG_ONLY)
        return se_forward(h, se)
    if block.attention is AttentionKind.CBAM:
        return cbam_forward(h, block_cbam_config(block, params, prefix))
    return h


def block_forward(x: Tensor, spec: ResidualBlockSpec, params: dict, prefix: str = "blocks.0") -> Tensor:
    """y = relu(shortcut(x) + attention(conv3×3 → relu → conv3×3 (x)))."""
    if x.ndim != 4 or x.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"{prefix} expects {spec.in_channels} input channels, got {x.shape}")
    h = conv2d(x, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], 1)
    if spec.stride == 2:
        h = downsample(h, 2)
    h = relu(h)
    h = conv2d(h, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"], 1)
    h = _attend(h, spec, params, prefix)

    shortcut = x
    if spec.needs_projection:
        if spec.stride == 2:
            shortcut = downsample(shortcut, 2)
        shortcut = conv2d(shortcut, params[f"{prefix}.proj.weight"], params[f"{prefix}.proj.bias"], 0)
    return relu(add(shortcut, h))


def net_forward(image: Tensor, spec: TinyNetSpec, params: dict, return_features: bool = False):
    """
    stem conv → blocks → global average pool → linear classifier.
    With return_features, also returns the last block's output (after the residual add).
    """
    if image.ndim != 4 or image.shape[1] != spec.in_channels:
        raise ShapeMismatch(f"network expects N×{spec.in_channels}×H×W input, got {image.shape}")
    x = relu(conv2d(image, params["stem.weight"], params["stem.bias"], 1))
    for i, block in enumerate(spec.blocks):
        x = block_forward(x, block, params, f"blocks.{i}")
    features = x
    n, c = x.shape[:2]
    pooled = reshape(global_avg_pool_spatial(x), (n, c))
    logits = add(linear(pooled, params["fc.weight"]), params["fc.bias"])
    if return_features:
        return logits, features
    return logits


# --- Checkpoints ------------------------------------------------------------
def _tensor_file(name: str) -> str:
    return f"tensors/{name}.cbt"


def save_checkpoint(directory, spec: TinyNetSpec, params: dict, extra: Optional[dict] = None) -> Path:
    """Write manifest.json and one CBT1 file per tensor under directory."""
    root = Path(directory)
    try:
        (root / "tensors").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create checkpoint directory {root}: {exc}") from exc
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "spec": spec.to_dict(),
        "tensors": {name: {"file": _tensor_file(name), "shape": list(t.shape)} for name, t in params.items()},
    }
    if extra:
        manifest["extra"] = extra
    for name, t in params.items():
        write_tensor(t, root / _tensor_file(name))
    write_json(root / "manifest.json", manifest)
    return root / "manifest.json"


def load_checkpoint(directory) -> tuple:
    """Return (spec, params, manifest) from a save_checkpoint directory."""
    root = Path(directory)
    manifest = read_json(root / "manifest.json")
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{root}: not a {CHECKPOINT_FORMAT} manifest")
    spec = TinyNetSpec.from_dict(manifest["spec"])
    params = {}
    for name, entry in manifest["tensors"].items():
        t = read_tensor(root / entry["file"])
        if list(t.shape) != entry["shape"]:
            raise ShapeMismatch(f"{name}: manifest says {entry['shape']}, file holds {list(t.shape)}")
        params[name] = t
    expected = set(init_params(spec, 0))
    if set(params) != expected:
        missing, extra = sorted(expected - set(params)), sorted(set(params) - expected)
        raise ConfigError(f"{root}: tensor set does not match spec (missing {missing}, unexpected {extra})")
    return spec, params, manifest
