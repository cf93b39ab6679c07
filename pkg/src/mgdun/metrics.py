"""Image quality metrics: PSNR, SSIM and RMSE on the 0-255 scale."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _pair(a, b, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    b = np.asarray(getattr(b, "data", b), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b, "mse")
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``math.inf``."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def rmse255(a, b) -> float:
    """Root-mean-square error in 0-255 units (inputs on the [0, 1] scale)."""
    return 255.0 * math.sqrt(mse(a, b))


def _gaussian_window() -> np.ndarray:
    d = np.arange(_SSIM_WIN) - _SSIM_WIN // 2
    g = np.exp(-(d ** 2) / (2 * _SSIM_SIGMA ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    h, w = img.shape
    rows = sum(g[i] * img[i:h - k + 1 + i, :] for i in range(k))
    return sum(g[j] * rows[:, j:w - k + 1 + j] for j in range(k))


def ssim_map(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> np.ndarray:
    """Local SSIM over every fully contained 11x11 Gaussian window of two 2-D maps."""
    if a.shape[0] < _SSIM_WIN or a.shape[1] < _SSIM_WIN:
        raise ValueError(f"ssim: image {a.shape} smaller than the {_SSIM_WIN}x{_SSIM_WIN} window")
    g = _gaussian_window()
    c1, c2 = (_K1 * peak) ** 2, (_K2 * peak) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a ** 2
    var_b = _filter_valid(b * b, g) - mu_b ** 2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, peak: float = 1.0) -> float:
    """Mean SSIM, averaged over every (image, channel) map of NCHW inputs."""
    a, b = _pair(a, b, "ssim")
    a2 = a.reshape((-1,) + a.shape[-2:])
    b2 = b.reshape((-1,) + b.shape[-2:])
    return float(np.mean([ssim_map(p, q, peak).mean() for p, q in zip(a2, b2)]))


@dataclass
class MetricReport:
    """Per-image PSNR / SSIM / rmse255 plus their means."""

    names: list[str] = field(default_factory=list)
    psnr_db: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    rmse255: list[float] = field(default_factory=list)

    def add(self, name: str, pred, gt) -> None:
        self.names.append(name)
        self.psnr_db.append(psnr(pred, gt))
        self.ssim.append(ssim(pred, gt))
        self.rmse255.append(rmse255(pred, gt))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr_db))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def mean_rmse255(self) -> float:
        return float(np.mean(self.rmse255))

    def rows(self):
        for row in zip(self.names, self.psnr_db, self.ssim, self.rmse255):
            yield row
        yield ("mean", self.mean_psnr, self.mean_ssim, self.mean_rmse255)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["image", "psnr_db", "ssim", "rmse255"])
        for name, p, s, r in self.rows():
            wr.writerow([name, f"{p:.6f}", f"{s:.6f}", f"{r:.6f}"])
        return buf.getvalue()

    def table(self, title: str = "") -> str:
        lines = [title] if title else []
        lines.append(f"{'image':<16}{'PSNR(dB)':>12}{'SSIM':>10}{'RMSE255':>10}")
        for name, p, s, r in self.rows():
            lines.append(f"{name:<16}{p:>12.4f}{s:>10.4f}{r:>10.4f}")
        return "\n".join(lines)
