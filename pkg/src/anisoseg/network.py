"""2.5D / 2D / 3D encoder-decoder with optional spatial attention at every level."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigurationError, DataError, ShapeError

Dim = Literal["2D", "3D"]
Factor = Tuple[int, int, int]

CHECKPOINT_FORMAT = "anisoseg-checkpoint"
CHECKPOINT_VERSION = 1


class LevelSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    dim: Dim
    channels: int = Field(gt=0)


class LayerSchedule(BaseModel):
    """Per-level convolution dimensionality and width, plus pooling between levels."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    levels: Tuple[LevelSpec, ...]
    pool_factors: Tuple[Factor, ...]

    @model_validator(mode="after")
    def _consistent(self):
        if len(self.levels) < 1:
            raise ValueError("schedule needs at least one level")
        if len(self.pool_factors) != len(self.levels) - 1:
            raise ValueError(
                f"{len(self.levels)} levels need {len(self.levels) - 1} pool factors, "
                f"got {len(self.pool_factors)}"
            )
        for i, (level, factor) in enumerate(zip(self.levels, self.pool_factors)):
            if min(factor) < 1:
                raise ValueError(f"pool factor {factor} must be positive")
            if level.dim == "2D" and factor[0] != 1:
                raise ValueError(f"level {i + 1} is 2D and cannot pool along depth ({factor})")
        return self

    @classmethod
    def mixed(cls, n_levels: int = 5, n_2d: int = 2, base_channels: int = 16) -> "LayerSchedule":
        levels = tuple(
            LevelSpec(dim="2D" if l <= n_2d else "3D", channels=base_channels * l)
            for l in range(1, n_levels + 1)
        )
        pools = tuple((1, 2, 2) if l <= n_2d else (2, 2, 2) for l in range(1, n_levels))
        return cls(levels=levels, pool_factors=pools)

    @classmethod
    def for_variant(cls, variant: str, n_levels: int = 5, base_channels: int = 16) -> "LayerSchedule":
        n_2d = {"2.5D": 2, "2D": n_levels, "3D": 0}[variant]
        return cls.mixed(n_levels, n_2d, base_channels)

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def channels(self) -> List[int]:
        return [lv.channels for lv in self.levels]

    def cumulative_factors(self) -> List[Factor]:
        """Total downsampling factor of each level relative to the input."""
        out = [(1, 1, 1)]
        for f in self.pool_factors:
            prev = out[-1]
            out.append(tuple(p * q for p, q in zip(prev, f)))
        return out

    def check_input_shape(self, spatial: Sequence[int]) -> None:
        total = self.cumulative_factors()[-1]
        bad = [(n, f) for n, f in zip(spatial, total) if n % f]
        if len(spatial) != 3 or bad:
            raise ShapeError(
                f"input spatial shape {tuple(spatial)} is not divisible by the "
                f"cumulative pool factor {total}"
            )


class NetworkConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: Literal["2.5D", "2D", "3D"] = "2.5D"
    schedule: Optional[LayerSchedule] = None
    n_classes: int = Field(default=2, ge=2)
    in_channels: int = Field(default=1, ge=1)
    attention_mode: Literal["none", "PA", "SpvPA"] = "SpvPA"
    upsample_mode: Literal["transposed", "nearest"] = "transposed"

    @model_validator(mode="after")
    def _resolve_schedule(self):
        if self.schedule is None:
            object.__setattr__(self, "schedule", LayerSchedule.for_variant(self.variant))
            return self
        dims = {lv.dim for lv in self.schedule.levels}
        if self.variant == "2D" and dims != {"2D"}:
            raise ValueError("variant 2D requires every level to be 2D")
        if self.variant == "3D":
            if dims != {"3D"} or any(f != (2, 2, 2) for f in self.schedule.pool_factors):
                raise ValueError("variant 3D requires all-3D levels with (2,2,2) pooling")
        return self

    @property
    def attention_enabled(self) -> bool:
        return self.attention_mode != "none"


def _kernel(dim: str) -> Tuple[Factor, Factor]:
    if dim == "2D":
        return (1, 3, 3), (0, 1, 1)
    return (3, 3, 3), (1, 1, 1)


class ConvBlock(nn.Sequential):
    """Two (conv -> BN -> pReLU) layers at the dimensionality of one level."""

    def __init__(self, in_ch: int, out_ch: int, dim: str):
        k, p = _kernel(dim)
        layers = []
        for c_in in (in_ch, out_ch):
            layers += [
                nn.Conv3d(c_in, out_ch, k, padding=p),
                # torch momentum 0.1 == running average with decay 0.9
                nn.BatchNorm3d(out_ch, momentum=0.1),
                nn.PReLU(out_ch, init=0.25),
            ]
        super().__init__(*layers)


class SpatialAttention(nn.Module):
    """Channel-reducing attention: f -> f + f * sigmoid(conv(relu(conv(f))))."""

    def __init__(self, channels: int):
        super().__init__()
        if channels % 2:
            raise ConfigurationError(f"attention needs an even channel count, got {channels}")
        self.reduce = nn.Conv3d(channels, channels // 2, 1)
        self.score = nn.Conv3d(channels // 2, 1, 1)

    def forward(self, f: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        a = torch.sigmoid(self.score(F.relu(self.reduce(f))))
        return f + f * a, a


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, factor: Factor, mode: str, dim: str):
        super().__init__()
        self.factor = tuple(factor)
        self.mode = mode
        if mode == "transposed":
            self.op = nn.ConvTranspose3d(in_ch, out_ch, self.factor, stride=self.factor)
        else:
            k, p = _kernel(dim)
            self.op = nn.Conv3d(in_ch, out_ch, k, padding=p)

    def forward(self, x):
        if self.mode == "transposed":
            return self.op(x)
        return self.op(F.interpolate(x, scale_factor=self.factor, mode="nearest"))


@dataclass
class Prediction:
    """Network output: logits, softmax probabilities and attention maps (level 1 first)."""

    logits: torch.Tensor
    probs: torch.Tensor
    attentions: List[torch.Tensor] = field(default_factory=list)


class SegmentationNet(nn.Module):
    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        sched = config.schedule
        ch = sched.channels
        dims = [lv.dim for lv in sched.levels]
        L = sched.n_levels

        self.encoders = nn.ModuleList()
        self.pools = nn.ModuleList()
        for l in range(L):
            self.encoders.append(ConvBlock(config.in_channels if l == 0 else ch[l - 1], ch[l], dims[l]))
            if l < L - 1:
                f = sched.pool_factors[l]
                self.pools.append(nn.MaxPool3d(f, stride=f))

        # decoder stage l (0-based, l < L-1) lifts level l+1 to level l
        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for l in range(L - 1):
            self.ups.append(
                Upsample(ch[l + 1], ch[l], sched.pool_factors[l], config.upsample_mode, dims[l])
            )
            self.decoders.append(ConvBlock(2 * ch[l], ch[l], dims[l]))

        self.attentions = nn.ModuleList()
        if config.attention_enabled:
            # bottleneck output at level L, concatenated skip+upsampled features below
            for l in range(L):
                self.attentions.append(SpatialAttention(ch[l] if l == L - 1 else 2 * ch[l]))

        self.classifier = nn.Conv3d(ch[0], config.n_classes, 1)

    def _attend(self, l: int, f: torch.Tensor, maps: dict) -> torch.Tensor:
        if not self.config.attention_enabled:
            return f
        f, a = self.attentions[l](f)
        maps[l] = a
        return f

    def encode(self, x: torch.Tensor) -> List[torch.Tensor]:
        self.config.schedule.check_input_shape(x.shape[2:])
        feats = []
        for l, enc in enumerate(self.encoders):
            if l > 0:
                x = self.pools[l - 1](x)
            x = enc(x)
            feats.append(x)
        return feats

    def forward(self, x: torch.Tensor) -> Prediction:
        if x.dim() != 5:
            raise ShapeError(f"expected input (batch, channel, depth, height, width), got {tuple(x.shape)}")
        feats = self.encode(x)
        L = len(feats)
        maps: dict = {}
        y = self._attend(L - 1, feats[-1], maps)
        for l in range(L - 2, -1, -1):
            y = torch.cat([feats[l], self.ups[l](y)], dim=1)
            y = self._attend(l, y, maps)
            y = self.decoders[l](y)
        logits = self.classifier(y)
        return Prediction(
            logits=logits,
            probs=torch.softmax(logits, dim=1),
            attentions=[maps[l] for l in sorted(maps)],
        )


def build_network(config: NetworkConfig) -> SegmentationNet:
    return SegmentationNet(config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# Receptive field
# ---------------------------------------------------------------------------

def receptive_field_of_layers(layers, spacing_mm=(1.0, 1.0, 1.0)):
    """Receptive field of a chain of ``(kernel, stride)`` layers.

    Returns ``(rf_voxels, rf_mm)`` per axis using rf += (k - 1) * jump,
    jump *= stride.
    """
    rf = np.ones(3, dtype=np.int64)
    jump = np.ones(3, dtype=np.int64)
    for kernel, stride in layers:
        rf += (np.asarray(kernel) - 1) * jump
        jump *= np.asarray(stride)
    return tuple(int(r) for r in rf), tuple(float(r * s) for r, s in zip(rf, spacing_mm))


def receptive_field(config: NetworkConfig, spacing_mm) -> List[dict]:
    """Physical receptive field (mm, per axis) at each encoder level's block output."""
    spacing_mm = tuple(float(s) for s in spacing_mm)
    if len(spacing_mm) != 3 or min(spacing_mm) <= 0:
        raise ConfigurationError(f"spacing must be three positive reals, got {spacing_mm}")
    sched = config.schedule
    layers = []
    table = []
    for l, level in enumerate(sched.levels):
        if l > 0:
            f = sched.pool_factors[l - 1]
            layers.append((f, f))
        k, _ = _kernel(level.dim)
        layers += [(k, (1, 1, 1))] * 2
        vox, mm = receptive_field_of_layers(layers, spacing_mm)
        table.append({"level": l + 1, "rf_voxels": vox, "rf_mm": mm})
    return table


# ---------------------------------------------------------------------------
# Checkpoints: torch state dict + JSON sidecar
# ---------------------------------------------------------------------------

WEIGHTS_NAME = "weights.pt"
SIDECAR_NAME = "checkpoint.json"


def save_checkpoint(directory, model: SegmentationNet, step: int, extra: Optional[dict] = None) -> Path:
    """Write ``weights.pt`` and the ``checkpoint.json`` sidecar into ``directory``.

    Sidecar keys: format, version, network (NetworkConfig as JSON), step,
    weights (file name), extra (free-form dict, e.g. validation Dice).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), directory / WEIGHTS_NAME)
    sidecar = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "network": model.config.model_dump(mode="json"),
        "step": int(step),
        "weights": WEIGHTS_NAME,
        "extra": extra or {},
    }
    (directory / SIDECAR_NAME).write_text(json.dumps(sidecar, indent=2) + "\n")
    return directory


def load_checkpoint(directory) -> Tuple[SegmentationNet, dict]:
    directory = Path(directory)
    try:
        sidecar = json.loads((directory / SIDECAR_NAME).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"no checkpoint sidecar in {directory}") from exc
    if sidecar.get("format") != CHECKPOINT_FORMAT or sidecar.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{directory / SIDECAR_NAME} is not a version-{CHECKPOINT_VERSION} checkpoint")
    model = build_network(NetworkConfig.model_validate(sidecar["network"]))
    state = torch.load(directory / sidecar["weights"], map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, sidecar
