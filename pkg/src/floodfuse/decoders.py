"""Gradient decoupling, the RGB / mask decoders, and the end-to-end network."""

from __future__ import annotations

import logging
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Backbone, ConvBlock, ModelConfig, TeacherPyramid
from .fusion import FusedPyramid, FusionLatent

log = logging.getLogger(__name__)


class ForwardOutput(NamedTuple):
    y_hat: torch.Tensor
    m_hat: torch.Tensor
    fused: FusedPyramid
    teacher: TeacherPyramid
    # teacher levels on the fused grids (level 4 aligned), consumed by distillation
    teacher_aligned: tuple[torch.Tensor, ...]
    # reconstruction evaluated on the segmentation-branch features; drives the hydrology term
    y_hat_seg: torch.Tensor
    used_teacher: bool


def stop_gradient(fused: FusedPyramid) -> FusedPyramid:
    return FusedPyramid(*(f.detach() for f in fused[:4]), gates=tuple(g.detach() for g in fused.gates))


def decouple(fused: FusedPyramid, cfg: ModelConfig) -> tuple[FusedPyramid, FusedPyramid]:
    """Return ``(F_rgb, F_seg)``; values are untouched, only gradient flow is cut."""
    if cfg.seg_from_rgb and cfg.rgb_from_seg:
        log.warning("seg_from_rgb and rgb_from_seg both set: shared encoder receives no task gradients")
    f_seg = stop_gradient(fused) if cfg.seg_from_rgb else fused
    f_rgb = stop_gradient(fused) if cfg.rgb_from_seg else fused
    return f_rgb, f_seg


class UpStage(nn.Module):
    def __init__(self, cin: int, cskip: int, cout: int):
        super().__init__()
        self.block = ConvBlock(cin + cskip, cout)

    def forward(self, x, skip):
        if x.shape[-2:] != skip.shape[-2:]:
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.block(torch.cat([x, skip], dim=1))


class PyramidDecoder(nn.Module):
    """f4 -> (skip f3) -> up (skip f2) -> up (skip f1) -> up -> 1x1 head -> sigmoid."""

    def __init__(self, cfg: ModelConfig, out_channels: int):
        super().__init__()
        b = cfg.base_channels
        self.stage3 = UpStage(8 * b, 4 * b, 4 * b)
        self.stage2 = UpStage(4 * b, 2 * b, 2 * b)
        self.stage1 = UpStage(2 * b, b, b)
        self.final = ConvBlock(b, b)
        self.head = nn.Conv2d(b, out_channels, 1)

    def forward(self, fused: FusedPyramid) -> torch.Tensor:
        f1, f2, f3, f4 = fused[:4]
        if not (f3.shape[-2:] == f4.shape[-2:] and f2.shape[-1] == 2 * f3.shape[-1] and f1.shape[-1] == 2 * f2.shape[-1]):
            raise ValueError("inconsistent fused pyramid shapes")
        x = self.stage3(f4, f3)
        x = self.stage2(x, f2)
        x = self.stage1(x, f1)
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return torch.sigmoid(self.head(self.final(x)))


class Decoders(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.rgb = PyramidDecoder(cfg, 3)
        self.mask = PyramidDecoder(cfg, 1)


def decode_rgb(f_rgb: FusedPyramid, dec: Decoders) -> torch.Tensor:
    return dec.rgb(f_rgb)


def decode_mask(f_seg: FusedPyramid, dec: Decoders) -> torch.Tensor:
    return dec.mask(f_seg)


class FloodFuseNet(nn.Module):
    """SAR (+ optional optical prior) -> fused latent pyramid -> reconstructed RGB and flood mask."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.fusion = FusionLatent(cfg)
        self.dec = Decoders(cfg)

    def forward(self, sar: torch.Tensor, prior: torch.Tensor | None = None) -> ForwardOutput:
        h, w = sar.shape[-2:]
        if h % 16 or w % 16:
            raise ValueError(f"H and W must be divisible by 16, got {h}x{w}")
        sar_feats = self.backbone.sar(sar)
        if prior is not None:
            teacher = self.backbone.teacher(prior)
        else:
            teacher = self.backbone.prior(sar)
        fused = self.fusion(sar_feats, teacher)
        aligned = self.fusion.aligned_teacher(sar_feats, teacher)
        f_rgb, f_seg = decouple(fused, self.cfg)
        y_hat = self.dec.rgb(f_rgb)
        m_hat = self.dec.mask(f_seg)
        if f_seg is f_rgb:
            y_hat_seg = y_hat
        else:
            y_hat_seg = self.dec.rgb(f_seg)
        return ForwardOutput(y_hat, m_hat, fused, teacher, aligned, y_hat_seg, prior is not None)


def init_weights(model: nn.Module) -> None:
    """Kaiming-uniform convs, zero biases, zero gate kernels (gates start at 0.5)."""
    for name, mod in model.named_modules():
        if isinstance(mod, nn.Conv2d):
            nn.init.kaiming_uniform_(mod.weight, nonlinearity="relu")
            if mod.bias is not None:
                nn.init.zeros_(mod.bias)
            if name.endswith(".gate"):
                nn.init.zeros_(mod.weight)
        elif isinstance(mod, nn.GroupNorm):
            nn.init.ones_(mod.weight)
            nn.init.zeros_(mod.bias)


def build_model(cfg: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> FloodFuseNet:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    model = FloodFuseNet(cfg)
    init_weights(model)
    torch.random.set_rng_state(gen_state)
    return model.to(dtype)
