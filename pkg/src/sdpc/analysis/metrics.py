"""Image and code metrics: SSIM and the fraction of active units."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from ..data import gaussian_kernel


def active_fraction(gamma) -> float:
    """Fraction of strictly positive coefficients."""
    g = gamma.detach().cpu().numpy() if isinstance(gamma, torch.Tensor) else np.asarray(gamma)
    return float((g > 0).mean()) if g.size else 0.0


def _gray(img) -> np.ndarray:
    a = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 3:
        a = a.mean(axis=0)
    if a.ndim != 2:
        raise ValueError(f"expected [H, W] or [C, H, W], got {a.shape}")
    return a


def ssim(img_a, img_b, data_range: float | None = None, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity over all fully contained Gaussian windows.

    Colour inputs are averaged over channels.  ``data_range`` defaults to the
    larger of the two images' value ranges (symmetric); pass the clean image's
    range to score a reconstruction against its reference.
    """
    a, b = _gray(img_a), _gray(img_b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < win_size:
        raise ValueError(f"images must be at least {win_size}x{win_size}")
    if data_range is None:
        data_range = max(np.ptp(a), np.ptp(b))
    if data_range <= 0:
        data_range = 1.0
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    w = torch.as_tensor(gaussian_kernel(win_size, sigma))[None, None]
    stack = torch.as_tensor(np.stack([a, b, a * a, b * b, a * b]))[:, None]
    mu_a, mu_b, aa, bb, ab = F.conv2d(stack, w)[:, 0].numpy()
    var_a = aa - mu_a ** 2
    var_b = bb - mu_b ** 2
    cov = ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())
