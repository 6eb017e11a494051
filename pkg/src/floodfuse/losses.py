"""Reconstruction, segmentation, hydrology-edge and distillation losses.

All functions take batched tensors ``[N, C, H, W]`` and return scalar tensors.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
BCE_CLAMP = 1e-7
# keeps the gradient of sqrt finite where the Sobel response vanishes
MAG_EPS = 1e-18
HYDRO_MIN_NORM = 1e-8

TERM_NAMES = ("charb", "ssim", "fft", "edge", "dice", "bce", "hydro", "distill")


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = 1.0
    lambda_s: float = 0.2
    lambda_f: float = 0.05
    lambda_e: float = 0.1
    mu_d: float = 1.0
    mu_b: float = 1.0
    mu_h: float = 0.1
    eta: float = 0.1
    eps_charb: float = 1e-6
    eps_dice: float = 1.0
    eps_log: float = 1e-8
    rgb_to_seg_ratio: float = 0.5
    boundary_radius: int = 1

    def validate(self) -> None:
        for k, v in asdict(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be >= 0")
        if min(self.eps_charb, self.eps_dice, self.eps_log) <= 0:
            raise ValueError("loss epsilons must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def luminance(x: torch.Tensor) -> torch.Tensor:
    """Unweighted mean over the three colour channels."""
    if x.shape[1] != 3:
        raise ValueError(f"luminance expects 3 channels, got {x.shape[1]}")
    return x.mean(dim=1, keepdim=True)


def charbonnier(y_hat, y, eps: float = 1e-6):
    _same_shape(y_hat, y)
    return torch.sqrt((y_hat - y) ** 2 + eps).mean()


def ssim_map(x, y):
    """Local SSIM over 3x3 uniform windows (valid positions only), per channel."""
    _same_shape(x, y)
    mu_x = F.avg_pool2d(x, 3, stride=1)
    mu_y = F.avg_pool2d(y, 3, stride=1)
    var_x = F.avg_pool2d(x * x, 3, stride=1) - mu_x**2
    var_y = F.avg_pool2d(y * y, 3, stride=1) - mu_y**2
    cov = F.avg_pool2d(x * y, 3, stride=1) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return num / den


def ssim(x, y):
    return ssim_map(x, y).mean()


def ssim_loss(y_hat, y):
    return 1 - ssim(y_hat, y)


def fft_loss(y_hat, y, eps: float = 1e-8):
    _same_shape(y_hat, y)
    mag_hat = torch.fft.fft2(luminance(y_hat)).abs()
    mag = torch.fft.fft2(luminance(y)).abs()
    return (torch.log(mag + eps) - torch.log(mag_hat + eps)).abs().mean()


def sobel(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Horizontal and vertical 3x3 Sobel responses of a 1-channel map, reflect-padded."""
    kx = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]], dtype=x.dtype, device=x.device)
    kernels = torch.stack([kx, kx.t()]).unsqueeze(1)
    g = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), kernels)
    return g[:, 0:1], g[:, 1:2]


def gradient_magnitude(x):
    gx, gy = sobel(x)
    return torch.sqrt(gx**2 + gy**2 + MAG_EPS)


def edge_loss(y_hat, y):
    _same_shape(y_hat, y)
    return (gradient_magnitude(luminance(y_hat)) - gradient_magnitude(luminance(y))).abs().mean()


def dice_loss(m_hat, m, eps: float = 1.0):
    """Soft Dice per sample, averaged over the batch."""
    _same_shape(m_hat, m)
    inter = (m_hat * m).flatten(1).sum(1)
    denom = m_hat.flatten(1).sum(1) + m.flatten(1).sum(1) + eps
    return (1 - 2 * inter / denom).mean()


def bce_loss(m_hat, m):
    _same_shape(m_hat, m)
    p = m_hat.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    return -(m * torch.log(p) + (1 - m) * torch.log(1 - p)).mean()


def boundary_band(m: torch.Tensor, radius: int = 1) -> torch.Tensor:
    """Boolean map of pixels whose (2r+1)^2 neighbourhood holds both classes."""
    k = 2 * radius + 1
    hi = F.max_pool2d(m, k, stride=1, padding=radius)
    lo = -F.max_pool2d(-m, k, stride=1, padding=radius)
    return hi != lo


def hydro_edge_loss(y_hat, sar, band: torch.Tensor):
    """Mean over band pixels of 1 - cos(angle) between reconstruction and SAR gradients.

    Per-sample mean, averaged over the batch; an empty band contributes 0.
    """
    gx_y, gy_y = sobel(luminance(y_hat))
    gx_s, gy_s = sobel(sar.mean(dim=1, keepdim=True))
    n_y2 = gx_y**2 + gy_y**2
    n_s2 = gx_s**2 + gy_s**2
    valid = band & (n_y2 >= HYDRO_MIN_NORM**2) & (n_s2 >= HYDRO_MIN_NORM**2)
    # guarded denominators so masked-out pixels never produce NaN gradients
    safe = torch.where(valid, n_y2 * n_s2, torch.ones_like(n_y2))
    cos = (gx_y * gx_s + gy_y * gy_s) / torch.sqrt(safe)
    term = torch.where(valid, 1 - cos, torch.zeros_like(cos))
    count = band.flatten(1).sum(1)
    per_sample = term.flatten(1).sum(1) / count.clamp(min=1)
    return per_sample.mean()


def distill_loss(fused, teacher_aligned):
    """Sum over levels of the mean absolute gap to the gradient-stopped teacher."""
    total = 0.0
    for f, p in zip(fused[:4], teacher_aligned):
        _same_shape(f, p)
        total = total + (f - p.detach()).abs().mean()
    return total


def total_loss(out, y, m, sar, w: LossWeights) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted objective plus a breakdown of all raw terms and the three composites."""
    terms = {
        "charb": charbonnier(out.y_hat, y, w.eps_charb),
        "ssim": ssim_loss(out.y_hat, y),
        "fft": fft_loss(out.y_hat, y, w.eps_log),
        "edge": edge_loss(out.y_hat, y),
        "dice": dice_loss(out.m_hat, m, w.eps_dice),
        "bce": bce_loss(out.m_hat, m),
        "hydro": hydro_edge_loss(out.y_hat_seg, sar, boundary_band(m, w.boundary_radius)),
        "distill": distill_loss(out.fused, out.teacher_aligned),
    }
    l_rgb = w.lambda_c * terms["charb"] + w.lambda_s * terms["ssim"] + w.lambda_f * terms["fft"] + w.lambda_e * terms["edge"]
    l_seg = w.mu_d * terms["dice"] + w.mu_b * terms["bce"] + w.mu_h * terms["hydro"]
    total = l_rgb + w.rgb_to_seg_ratio * l_seg + w.eta * terms["distill"]
    terms.update(l_rgb=l_rgb, l_seg=l_seg, total=total)
    return total, terms
