"""PSNR and SSIM for clips in [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, SizeError

PSNR_CAP = 100.0


def _as_frames(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None]
    if x.ndim != 4:
        raise DimensionError(f"expected a 3 x H x W frame or F x 3 x H x W clip, got {x.shape}")
    return x


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over frames of -10 log10(MSE), capped at 100 dB."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    fa = np.clip(_as_frames(a), 0.0, 1.0)
    fb = np.clip(_as_frames(b), 0.0, 1.0)
    mse = ((fa - fb) ** 2).reshape(fa.shape[0], -1).mean(axis=1)
    values = [PSNR_CAP if m < 1e-10 else min(PSNR_CAP, -10.0 * np.log10(m)) for m in mse]
    return float(np.mean(values))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation over the last two axes."""
    n = g.size
    h, w = img.shape[-2:]
    rows = sum(g[i] * img[..., i : i + h - n + 1, :] for i in range(n))
    return sum(g[j] * rows[..., :, j : j + w - n + 1] for j in range(n))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Gaussian-window SSIM, valid windows only, averaged over channels and frames."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    x, y = _as_frames(a), _as_frames(b)
    if x.shape[-1] < window or x.shape[-2] < window:
        raise SizeError(f"frame {x.shape[-2]}x{x.shape[-1]} is smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    var_x = _filter_valid(x * x, g) - mu_x * mu_x
    var_y = _filter_valid(y * y, g) - mu_y * mu_y
    cov = _filter_valid(x * y, g) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2)
    den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    smap = num / den
    per_channel = smap.reshape(smap.shape[0], smap.shape[1], -1).mean(axis=2)
    return float(per_channel.mean(axis=1).mean())


@dataclass
class MetricsReport:
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim)) if self.ssim else float("nan")

    def add(self, ref: np.ndarray, test: np.ndarray, with_ssim: bool = True) -> None:
        self.psnr.append(psnr(ref, test))
        if with_ssim:
            self.ssim.append(ssim(ref, test))

    def format(self) -> str:
        lines = ["video\tpsnr_db\tssim"]
        for i, p in enumerate(self.psnr):
            s = self.ssim[i] if i < len(self.ssim) else float("nan")
            lines.append(f"{i}\t{p:.4f}\t{s:.6f}")
        lines.append(f"mean\t{self.mean_psnr:.4f}\t{self.mean_ssim:.6f}")
        return "\n".join(lines)
