"""Fusion-latent space: windowed cross-attention, FiLM conditioning and gated residual fusion."""

from __future__ import annotations

from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import ModelConfig, SarFeaturePyramid, TeacherPyramid


class PadRecord(NamedTuple):
    height: int
    width: int
    padded_height: int
    padded_width: int
    window: int


class FusedPyramid(NamedTuple):
    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor
    gates: tuple[torch.Tensor, ...] = ()


def _reflect_index(n: int, padded: int, device) -> torch.Tensor:
    # mirror without repeating the edge sample, valid for any pad length
    idx = torch.arange(padded, device=device)
    if n == 1:
        return torch.zeros_like(idx)
    period = 2 * (n - 1)
    idx = idx % period
    return torch.where(idx < n, idx, period - idx)


def reflect_pad_to(x: torch.Tensor, height: int, width: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    if (h, w) == (height, width):
        return x
    x = x.index_select(-2, _reflect_index(h, height, x.device))
    return x.index_select(-1, _reflect_index(w, width, x.device))


def window_partition(x: torch.Tensor, window: int) -> tuple[torch.Tensor, PadRecord]:
    """Split ``[N, C, H, W]`` into ``[N * n_windows, window**2, C]`` token groups (row-major)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    n, c, h, w = x.shape
    hp = -(-h // window) * window
    wp = -(-w // window) * window
    x = reflect_pad_to(x, hp, wp)
    x = x.view(n, c, hp // window, window, wp // window, window)
    x = x.permute(0, 2, 4, 3, 5, 1).reshape(-1, window * window, c)
    return x, PadRecord(h, w, hp, wp, window)


def window_fold(windows: torch.Tensor, pad: PadRecord) -> torch.Tensor:
    """Inverse of window_partition: reassemble windows and crop the padding."""
    ws = pad.window
    gh, gw = pad.padded_height // ws, pad.padded_width // ws
    c = windows.shape[-1]
    x = windows.view(-1, gh, gw, ws, ws, c).permute(0, 5, 1, 3, 2, 4)
    x = x.reshape(-1, c, pad.padded_height, pad.padded_width)
    return x[..., : pad.height, : pad.width]


def attention_weights(q: torch.Tensor, k: torch.Tensor, heads: int) -> torch.Tensor:
    """Softmax attention weights ``[W, heads, T, T]`` for token groups ``[W, T, C]``."""
    nw, t, c = q.shape
    dh = c // heads
    qh = q.view(nw, t, heads, dh).transpose(1, 2)
    kh = k.view(nw, t, heads, dh).transpose(1, 2)
    logits = qh @ kh.transpose(-2, -1) / dh**0.5
    # softmax in at least single precision
    work = logits.dtype if logits.dtype in (torch.float32, torch.float64) else torch.float32
    return logits.to(work).softmax(dim=-1).to(logits.dtype)


def windowed_cross_attention(
    f_sar: torch.Tensor,
    f_opt: torch.Tensor,
    wq: nn.Module,
    wk: nn.Module,
    wv: nn.Module,
    wo: nn.Module,
    heads: int,
    window: int,
) -> torch.Tensor:
    """Queries from SAR features, keys/values from optical features, per non-overlapping window.

    No relative position bias; heads are concatenated, folded back to the map and projected by ``wo``.
    """
    if f_sar.shape != f_opt.shape:
        raise ValueError(f"shape mismatch {tuple(f_sar.shape)} vs {tuple(f_opt.shape)}")
    if f_sar.shape[1] % heads:
        raise ValueError(f"channels {f_sar.shape[1]} not divisible by heads {heads}")
    q, pad = window_partition(wq(f_sar), window)
    k, _ = window_partition(wk(f_opt), window)
    v, _ = window_partition(wv(f_opt), window)
    attn = attention_weights(q, k, heads)
    nw, t, c = v.shape
    vh = v.view(nw, t, heads, c // heads).transpose(1, 2)
    out = (attn @ vh).transpose(1, 2).reshape(nw, t, c)
    return wo(window_fold(out, pad))


def film_apply(z: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor) -> torch.Tensor:
    return z * (1 + torch.tanh(gamma)) + beta


def gated_blend(f_sar: torch.Tensor, z_film: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
    """f_sar + gate * (z_film - f_sar), written in convex form so gate 0 / 1 reproduce the inputs exactly."""
    return (1 - gate) * f_sar + gate * z_film


class FusionLevel(nn.Module):
    """Cross-attention, FiLM and confidence gate for one pyramid level."""

    def __init__(self, channels: int, cfg: ModelConfig):
        super().__init__()
        if channels % cfg.heads:
            raise ValueError(f"channels {channels} not divisible by heads {cfg.heads}")
        self.heads = cfg.heads
        self.window = cfg.window
        self.use_film = cfg.use_film
        self.wq = nn.Conv2d(channels, channels, 1)
        self.wk = nn.Conv2d(channels, channels, 1)
        self.wv = nn.Conv2d(channels, channels, 1)
        self.wo = nn.Conv2d(channels, channels, 1)
        # two 1x1 convs with SiLU between; output split into (gamma, beta)
        self.film = nn.ModuleList([nn.Conv2d(channels, channels, 1), nn.Conv2d(channels, 2 * channels, 1)])
        self.gate = nn.Conv2d(channels, channels, 1)

    def cross_attention(self, f_sar, f_opt):
        return windowed_cross_attention(f_sar, f_opt, self.wq, self.wk, self.wv, self.wo, self.heads, self.window)

    def film_params(self, f_opt):
        gamma_beta = self.film[1](F.silu(self.film[0](f_opt)))
        return gamma_beta.chunk(2, dim=1)

    def film_modulate(self, z, f_opt):
        if z.shape[-2:] != f_opt.shape[-2:]:
            raise ValueError("FiLM inputs differ in spatial shape")
        gamma, beta = self.film_params(f_opt)
        return film_apply(z, gamma, beta)

    def gated_residual_fuse(self, f_sar, z_film):
        if f_sar.shape != z_film.shape:
            raise ValueError("gate inputs differ in shape")
        gate = torch.sigmoid(self.gate(f_sar))
        return gated_blend(f_sar, z_film, gate), gate

    def forward(self, f_sar: torch.Tensor, f_opt: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.cross_attention(f_sar, f_opt)
        if self.use_film:
            z = self.film_modulate(z, f_opt)
        return self.gated_residual_fuse(f_sar, z)


class Level4Align(nn.Module):
    """Bring teacher p4 (stride 16) onto the SAR bottleneck grid (stride 8)."""

    def __init__(self, channels_in: int, channels_out: int):
        super().__init__()
        self.proj = nn.Conv2d(channels_in, channels_out, 1)

    def forward(self, p4: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
        up = F.interpolate(p4, size=size, mode="bilinear", align_corners=False)
        return self.proj(up)


class FusionLatent(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        b = cfg.base_channels
        self.level1 = FusionLevel(b, cfg)
        self.level2 = FusionLevel(2 * b, cfg)
        self.level3 = FusionLevel(4 * b, cfg)
        self.level4 = FusionLevel(8 * b, cfg)
        self.align4 = Level4Align(8 * b, 8 * b)

    def aligned_teacher(self, sar: SarFeaturePyramid, opt: TeacherPyramid) -> tuple[torch.Tensor, ...]:
        """Teacher levels on the SAR-side grids; level 4 goes through the shared alignment."""
        p4 = self.align4(opt.p4, tuple(sar.x_m.shape[-2:]))
        return opt.p1, opt.p2, opt.p3, p4

    def forward(self, sar: SarFeaturePyramid, opt: TeacherPyramid) -> FusedPyramid:
        guides = self.aligned_teacher(sar, opt)
        levels = (self.level1, self.level2, self.level3, self.level4)
        fused, gates = [], []
        for level, f_sar, f_opt in zip(levels, sar, guides):
            if f_sar.shape != f_opt.shape:
                raise ValueError(f"incompatible pyramids: {tuple(f_sar.shape)} vs {tuple(f_opt.shape)}")
            f, g = level(f_sar, f_opt)
            fused.append(f)
            gates.append(g)
        return FusedPyramid(*fused, gates=tuple(gates))


def fuse_pyramid(sar: SarFeaturePyramid, opt: TeacherPyramid, fusion: FusionLatent) -> FusedPyramid:
    return fusion(sar, opt)
