"""SAR encoder, lightweight optical teacher pyramid and the SAR-driven prior predictor."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 8
    window: int = 8
    heads: int = 4
    seg_from_rgb: bool = True
    rgb_from_seg: bool = False
    prior_channels: int = 4
    use_film: bool = True

    def validate(self) -> None:
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        for mult in (1, 2, 4, 8):
            if (mult * self.base_channels) % self.heads:
                raise ValueError(f"level channels {mult * self.base_channels} not divisible by heads={self.heads}")
        if self.prior_channels not in (3, 4):
            raise ValueError("prior_channels must be 3 or 4")

    def level_channels(self) -> tuple[int, int, int, int]:
        b = self.base_channels
        return b, 2 * b, 4 * b, 8 * b

    def to_dict(self) -> dict:
        return asdict(self)


class SarFeaturePyramid(NamedTuple):
    s1: torch.Tensor
    s2: torch.Tensor
    s3: torch.Tensor
    x_m: torch.Tensor


class TeacherPyramid(NamedTuple):
    p1: torch.Tensor
    p2: torch.Tensor
    p3: torch.Tensor
    p4: torch.Tensor


def num_groups(channels: int, max_groups: int = 8) -> int:
    # GroupNorm needs groups | channels; fall back below 8 for narrow layers
    return math.gcd(channels, max_groups)


class ConvBlock(nn.Sequential):
    """conv3x3 -> GroupNorm -> SiLU, twice."""

    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(num_groups(cout), cout),
            nn.SiLU(),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.GroupNorm(num_groups(cout), cout),
            nn.SiLU(),
        )


class EncoderStage(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.block = ConvBlock(cin, cout)
        self.down = nn.Conv2d(cout, cout, 3, stride=2, padding=1)

    def forward(self, x):
        return self.down(self.block(x))


def _check_divisible(x: torch.Tensor, k: int, what: str) -> None:
    h, w = x.shape[-2:]
    if h % k or w % k:
        raise ValueError(f"{what}: H and W must be divisible by {k}, got {h}x{w}")


class SarEncoder(nn.Module):
    """Three strided stages (B, 2B, 4B) plus a channel-doubling bottleneck at stride 8."""

    def __init__(self, cfg: ModelConfig, in_channels: int = 2):
        super().__init__()
        b = cfg.base_channels
        self.stage1 = EncoderStage(in_channels, b)
        self.stage2 = EncoderStage(b, 2 * b)
        self.stage3 = EncoderStage(2 * b, 4 * b)
        self.stage4 = ConvBlock(4 * b, 8 * b)

    def forward(self, sar: torch.Tensor) -> SarFeaturePyramid:
        _check_divisible(sar, 8, "SAR encoder")
        if sar.shape[1] != 2:
            raise ValueError(f"SAR input must have 2 channels, got {sar.shape[1]}")
        s1 = self.stage1(sar)
        s2 = self.stage2(s1)
        s3 = self.stage3(s2)
        return SarFeaturePyramid(s1, s2, s3, self.stage4(s3))


class OpticalTeacher(nn.Module):
    """Conv-GroupNorm-SiLU blocks with max-pooling after each level."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.prior_channels = cfg.prior_channels
        chans = (cfg.prior_channels, *cfg.level_channels())
        self.level1, self.level2, self.level3, self.level4 = (
            ConvBlock(chans[k], chans[k + 1]) for k in range(4)
        )

    def forward(self, prior: torch.Tensor) -> TeacherPyramid:
        _check_divisible(prior, 16, "optical teacher")
        if prior.shape[1] != self.prior_channels:
            raise ValueError(f"prior has {prior.shape[1]} channels, model expects {self.prior_channels}")
        feats = []
        x = prior
        for level in (self.level1, self.level2, self.level3, self.level4):
            x = F.max_pool2d(level(x), 2)
            feats.append(x)
        return TeacherPyramid(*feats)


class PriorPredictor(nn.Module):
    """SAR-only surrogate for the teacher: own SAR encoder plus per-level 1x1 heads."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.encoder = SarEncoder(cfg)
        b = cfg.base_channels
        self.heads = nn.ModuleList(nn.Conv2d(c, c, 1) for c in (b, 2 * b, 4 * b, 8 * b))

    def forward(self, sar: torch.Tensor) -> TeacherPyramid:
        _check_divisible(sar, 16, "prior predictor")
        s1, s2, s3, x_m = self.encoder(sar)
        # teacher p4 lives at stride 16, the SAR bottleneck at stride 8
        x4 = F.avg_pool2d(x_m, 2)
        return TeacherPyramid(*(head(f) for head, f in zip(self.heads, (s1, s2, s3, x4))))


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.sar = SarEncoder(cfg)
        self.teacher = OpticalTeacher(cfg)
        self.prior = PriorPredictor(cfg)


def encode_sar(sar: torch.Tensor, backbone: Backbone) -> SarFeaturePyramid:
    return backbone.sar(sar)


def teacher_pyramid(prior: torch.Tensor, backbone: Backbone) -> TeacherPyramid:
    return backbone.teacher(prior)


def prior_pyramid(sar: torch.Tensor, backbone: Backbone) -> TeacherPyramid:
    return backbone.prior(sar)
