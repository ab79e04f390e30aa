"""Classifier assembly: UNet encoder-decoder, residual stack, and heads.

The backbone takes a [N,C,32,32] patch through three encoder blocks
(64 -> 128 -> 256 channels, 2x2 maxpool between) to a 256x4x4
bottleneck, then back up through three transposed-conv decoder blocks
with skip concatenation. A 1x1 conv squeezes the 32x32 decoder output
to 64 channels, and a two-block residual stack turns that into the
256x16x16 final feature maps. Without the residual stack the 1x1 conv
emits 256 channels directly and the final maps stay at 32x32.

Three heads share those final features:

* ``cam``: global average pool then a dense classifier (CAM weights).
* ``sam``: pool each of the 256 maps to a 6x6 minor feature, apply one
  single-neuron FC per map to get the 256-vector H, classify H.
* ``hesam``: like ``sam`` plus a high-level 256-vector d pooled from
  the bottleneck, fused by elementwise sum (or concatenation, in which
  case per-map attention weights no longer exist).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, MapUndefinedError, ShapeError
from .layers import (
    BatchNorm2d,
    Conv2d,
    ConvTranspose2d,
    Dense,
    Module,
    ParamSet,
    PerChannelDense,
    ResidualStack,
)
from .tensor import (
    Tensor,
    add,
    avgpool2d,
    concat_channels,
    dense,
    global_pool,
    maxpool2d,
    relu,
    reshape,
)

INPUT_SIZE = 32
FEATURE_CHANNELS = 256
VALID_CHANNELS = (1, 3, 11, 21)


@dataclass
class ModelConfig:
    """Architecture switches; ``validate()`` rejects inconsistent combinations."""

    in_channels: int = 11
    head: str = "hesam"
    hf_pool: str = "gmp"
    fcf_pool: str = "gap"
    fusion: str = "sum"
    use_residual_stack: bool = True
    use_hf_branch: bool = True
    unet_batchnorm: bool = False

    def validate(self) -> "ModelConfig":
        if self.in_channels not in VALID_CHANNELS:
            raise ConfigError(f"in_channels must be one of {VALID_CHANNELS}, got {self.in_channels}")
        if self.head not in ("cam", "sam", "hesam"):
            raise ConfigError(f"head must be cam, sam or hesam, got {self.head!r}")
        for name in ("hf_pool", "fcf_pool"):
            if getattr(self, name) not in ("gap", "gmp"):
                raise ConfigError(f"{name} must be gap or gmp, got {getattr(self, name)!r}")
        if self.fusion not in ("sum", "concat"):
            raise ConfigError(f"fusion must be sum or concat, got {self.fusion!r}")
        if self.head == "hesam" and not self.use_hf_branch:
            raise ConfigError("the hesam head requires the high-level-feature branch")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class ForwardPass:
    """Everything one forward evaluation exposes to heads, maps and tests."""

    logits: Tensor
    final_features: Tensor
    bottleneck: Tensor
    unet_out: Tensor
    minor: Optional[Tensor] = None       # [N,256,6,6] pooled minor features
    sam_vector: Optional[Tensor] = None  # H, [N,256]
    hf_vector: Optional[Tensor] = None   # d, [N,256]

    def shape_trace(self) -> dict:
        trace = {
            "logits": self.logits.shape,
            "final_features": self.final_features.shape,
            "bottleneck": self.bottleneck.shape,
            "unet_out": self.unet_out.shape,
        }
        if self.minor is not None:
            trace["minor"] = self.minor.shape
        if self.sam_vector is not None:
            trace["sam_vector"] = self.sam_vector.shape
        if self.hf_vector is not None:
            trace["hf_vector"] = self.hf_vector.shape
        return trace


class ConvBlock(Module):
    """Two 3x3 same-padding convs with ReLU (optional batchnorm before each ReLU)."""

    def __init__(self, rng, in_ch: int, out_ch: int, batchnorm: bool, dtype):
        self.conv1 = Conv2d(rng, in_ch, out_ch, 3, stride=1, padding=1, dtype=dtype)
        self.bn1 = BatchNorm2d(out_ch, dtype=dtype) if batchnorm else None
        self.conv2 = Conv2d(rng, out_ch, out_ch, 3, stride=1, padding=1, dtype=dtype)
        self.bn2 = BatchNorm2d(out_ch, dtype=dtype) if batchnorm else None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = self.conv1(x)
        if self.bn1 is not None:
            h = self.bn1(h, training)
        h = relu(h)
        h = self.conv2(h)
        if self.bn2 is not None:
            h = self.bn2(h, training)
        return relu(h)


class UpBlock(Module):
    """2x2 stride-2 transposed conv, skip concatenation, then a ConvBlock."""

    def __init__(self, rng, in_ch: int, skip_ch: int, out_ch: int, batchnorm: bool, dtype):
        self.up = ConvTranspose2d(rng, in_ch, out_ch, kernel=2, stride=2, dtype=dtype)
        self.block = ConvBlock(rng, out_ch + skip_ch, out_ch, batchnorm, dtype)

    def __call__(self, x: Tensor, skip: Tensor, training: bool) -> Tensor:
        return self.block(concat_channels(self.up(x), skip), training)


class UNet(Module):
    """Three-down/three-up UNet emitting (decoder output, bottleneck)."""

    def __init__(self, rng, in_ch: int, out_ch: int, batchnorm: bool, dtype):
        self.enc1 = ConvBlock(rng, in_ch, 64, batchnorm, dtype)
        self.enc2 = ConvBlock(rng, 64, 128, batchnorm, dtype)
        self.enc3 = ConvBlock(rng, 128, 256, batchnorm, dtype)
        self.up1 = UpBlock(rng, 256, 256, 128, batchnorm, dtype)
        self.up2 = UpBlock(rng, 128, 128, 64, batchnorm, dtype)
        self.up3 = UpBlock(rng, 64, 64, 64, batchnorm, dtype)
        self.out_conv = Conv2d(rng, 64, out_ch, 1, stride=1, padding=0, dtype=dtype)

    def __call__(self, x: Tensor, training: bool):
        e1 = self.enc1(x, training)
        e2 = self.enc2(maxpool2d(e1), training)
        e3 = self.enc3(maxpool2d(e2), training)
        bottleneck = maxpool2d(e3)
        d1 = self.up1(bottleneck, e3, training)
        d2 = self.up2(d1, e2, training)
        d3 = self.up3(d2, e1, training)
        return relu(self.out_conv(d3)), bottleneck


class Model(Module):
    """Full classifier; construction order fixes the init stream for a given seed."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        self.force_zero_hf = False  # debug switch: hesam with d clamped to zero

        unet_out_ch = 64 if config.use_residual_stack else FEATURE_CHANNELS
        self.unet = UNet(rng, config.in_channels, unet_out_ch, config.unet_batchnorm, dtype)
        self.stack = ResidualStack(rng, 64, FEATURE_CHANNELS, dtype=dtype) if config.use_residual_stack else None

        final_size = 16 if config.use_residual_stack else 32
        # Both geometries tile the final maps into 6x6 minor features.
        self.fcf_kernel, self.fcf_stride = (5, 2) if final_size == 16 else (7, 5)
        side = (final_size - self.fcf_kernel) // self.fcf_stride + 1
        self.minor_len = side * side
        if self.minor_len != 36:
            raise ConfigError(f"minor feature grid must be 6x6, got {side}x{side}")

        if config.head == "cam":
            self.minor_fc = None
            self.classifier = Dense(rng, FEATURE_CHANNELS, 2, dtype=dtype)
        else:
            self.minor_fc = PerChannelDense(rng, FEATURE_CHANNELS, self.minor_len, dtype=dtype)
            in_dim = 2 * FEATURE_CHANNELS if (config.head == "hesam" and config.fusion == "concat") else FEATURE_CHANNELS
            self.classifier = Dense(rng, in_dim, 2, dtype=dtype)

    # -- forward -------------------------------------------------------

    def forward(self, x, training: bool = False) -> ForwardPass:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError(
                f"expected input [N,{self.config.in_channels},{INPUT_SIZE},{INPUT_SIZE}], got {x.shape}"
            )
        if x.shape[2] != INPUT_SIZE or x.shape[3] != INPUT_SIZE:
            raise ShapeError(f"expected {INPUT_SIZE}x{INPUT_SIZE} patches, got {x.shape[2]}x{x.shape[3]}")

        unet_out, bottleneck = self.unet(x, training)
        final = self.stack(unet_out, training) if self.stack is not None else unet_out

        if self.config.head == "cam":
            pooled = global_pool(final, "avg")
            return ForwardPass(self.classifier(pooled), final, bottleneck, unet_out)

        minor = self._pool_minor(final)
        flat = reshape(minor, (minor.shape[0], FEATURE_CHANNELS, self.minor_len))
        h_vec = self.minor_fc(flat)

        if self.config.head == "sam":
            return ForwardPass(self.classifier(h_vec), final, bottleneck, unet_out, minor, h_vec)

        if self.force_zero_hf:
            d_vec = Tensor(np.zeros_like(h_vec.data))
        else:
            d_vec = global_pool(bottleneck, "avg" if self.config.hf_pool == "gap" else "max")
        if self.config.fusion == "sum":
            logits = self.classifier(add(h_vec, d_vec))
        else:
            logits = self.classifier(concat_channels(h_vec, d_vec))
        return ForwardPass(logits, final, bottleneck, unet_out, minor, h_vec, d_vec)

    __call__ = forward

    def _pool_minor(self, final: Tensor) -> Tensor:
        if self.config.fcf_pool == "gap":
            return avgpool2d(final, self.fcf_kernel, self.fcf_stride, 0)
        return maxpool2d(final, self.fcf_kernel, self.fcf_stride)

    # -- persistence / bookkeeping --------------------------------------

    def state_entries(self):
        """Parameters followed by buffers, as (dotted name, array) pairs."""
        out = [(n, t.data) for n, t in self.named_parameters()]
        out.extend((n, a) for n, a in self.named_buffers())
        return out

    def load_state(self, entries: dict) -> None:
        expected = self.state_entries()
        names = {n for n, _ in expected}
        missing = names - set(entries)
        extra = set(entries) - names
        if missing or extra:
            raise ShapeError(
                f"state mismatch: missing {sorted(missing)[:3]}..., unexpected {sorted(extra)[:3]}..."
                if missing and extra
                else f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}"
            )
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        for name, arr in entries.items():
            target = params[name].data if name in params else buffers[name]
            if target.shape != arr.shape:
                raise ShapeError(f"state entry {name!r} has shape {arr.shape}, expected {target.shape}")
            np.copyto(target, arr)

    def freeze(self) -> None:
        """Make this instance an inference-only snapshot (no gradients)."""
        for _, t in self.named_parameters():
            t.requires_grad = False

    def attention_weights(self) -> np.ndarray:
        """Per-class, per-channel map weights [256, 2]; undefined for concat fusion."""
        if self.config.head == "hesam" and self.config.fusion == "concat":
            raise MapUndefinedError("concat fusion has no per-map attention weights")
        return self.classifier.w.data


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> Model:
    """Deterministically initialize a Model; one seed pins every weight."""
    return Model(config, np.random.default_rng(seed), dtype=dtype)
