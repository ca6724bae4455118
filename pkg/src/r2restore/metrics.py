"""PSNR and SSIM plus dataset-level evaluation reports."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ParameterError

__all__ = ["psnr", "ssim", "EvalReport", "evaluate", "luminance"]

PSNR_CAP_DB = 100.0

# ITU-R 601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114])


def luminance(img: np.ndarray) -> np.ndarray:
    """Collapse an (..., 3, h, w) image to its (..., 1, h, w) luma channel."""
    if img.shape[-3] == 1:
        return img
    if img.shape[-3] != 3:
        raise ParameterError(f"expected 1 or 3 channels, got {img.shape[-3]}")
    return np.tensordot(_LUMA, img, axes=([0], [-3]))[..., None, :, :]


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) over every channel and pixel, capped at 100 dB."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ParameterError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2)
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, float(10.0 * np.log10(peak * peak / mse)))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


_SSIM_WINDOW = _gaussian_window()


def _windowed_mean(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    windows = sliding_window_view(plane, kernel.shape)
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def _ssim_plane(a: np.ndarray, b: np.ndarray, peak: float) -> float:
    k = _SSIM_WINDOW
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _windowed_mean(a, k)
    mu_b = _windowed_mean(b, k)
    var_a = _windowed_mean(a * a, k) - mu_a * mu_a
    var_b = _windowed_mean(b * b, k) - mu_b * mu_b
    cov = _windowed_mean(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Mean local SSIM, 11x11 Gaussian window sigma 1.5, windows fully
    inside the image. Color images average the per-channel values."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[None]
        b = b[None]
    elif a.ndim == 4:
        if a.shape[0] != 1:
            raise ParameterError("ssim expects a single image")
        a = a[0]
        b = b[0]
    if a.shape[-2] < 11 or a.shape[-1] < 11:
        raise ParameterError(f"image {a.shape} smaller than the 11x11 window")
    return float(np.mean([_ssim_plane(a[c], b[c], peak) for c in range(a.shape[0])]))


@dataclass
class EvalRow:
    name: str
    psnr: float
    ssim: float
    seconds: float
    error: str | None = None


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        vals = [r.psnr for r in self.rows if r.error is None]
        return float(np.mean(vals)) if vals else float("nan")

    @property
    def mean_ssim(self) -> float:
        vals = [r.ssim for r in self.rows if r.error is None]
        return float(np.mean(vals)) if vals else float("nan")

    def summary_line(self) -> str:
        return f"mean_psnr={self.mean_psnr:.4f} mean_ssim={self.mean_ssim:.6f}"

    def to_csv(self) -> str:
        lines = ["name,psnr,ssim,seconds,error"]
        for r in self.rows:
            err = r.error or ""
            lines.append(f"{r.name},{r.psnr:.4f},{r.ssim:.6f},{r.seconds:.4f},{err}")
        return "\n".join(lines) + "\n"


def evaluate(model, manifest, spec=None, ensemble: bool = False,
             sr_scale: int | None = None) -> EvalReport:
    """Run a model over a manifest and collect per-image PSNR/SSIM.

    ``model`` is either a built Model or any callable mapping a degraded
    (1,c,h,w) array to a restored array. With ``spec`` given, degradation
    happens on the fly, seeded by image index; otherwise the manifest must
    pair clean with degraded files. Super-resolution scores follow the SR
    convention: luminance channel, border of ``sr_scale`` pixels shaved.
    """
    from .data import read_image_array
    from .model import Model, self_ensemble_forward
    from .tensor import Tensor

    is_model = isinstance(model, Model)
    if is_model and model.config.task == "super_resolve" and sr_scale is None:
        sr_scale = model.config.scale

    report = EvalReport()
    for index, entry in enumerate(manifest.entries):
        start = time.perf_counter()
        name = entry.clean.name
        try:
            clean = read_image_array(entry.clean, dtype=np.float64)
            if spec is not None:
                degraded = spec.apply(clean, stream=index)
            elif entry.degraded is not None:
                degraded = read_image_array(entry.degraded, dtype=np.float64)
            else:
                raise ParameterError(f"no degraded source for {name}")

            if is_model:
                x = Tensor(degraded.astype(model.dtype))
                restored = (self_ensemble_forward(model, x) if ensemble
                            else model.forward(x)).data.astype(np.float64)
            else:
                restored = np.asarray(model(degraded), dtype=np.float64)

            if sr_scale:
                restored = luminance(restored)[..., sr_scale:-sr_scale, sr_scale:-sr_scale]
                target = luminance(clean)[..., sr_scale:-sr_scale, sr_scale:-sr_scale]
            else:
                target = clean
            row = EvalRow(name=name,
                          psnr=psnr(restored, target),
                          ssim=ssim(restored, target),
                          seconds=time.perf_counter() - start)
        except (ParameterError, OSError) as exc:
            row = EvalRow(name=name, psnr=float("nan"), ssim=float("nan"),
                          seconds=time.perf_counter() - start, error=str(exc))
        report.rows.append(row)
    return report
