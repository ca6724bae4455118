"""Synthetic degradations: Gaussian noise, bicubic resizing, JPEG transform.

Every generator is a pure function of (input, spec); noise uses a
counter-based generator so results do not depend on sampling order. Arrays
are (n, c, h, w) or (c, h, w) float in the [0, 1] pixel domain; noisy
outputs are deliberately left unclipped (clipping would bias the noise
statistics), clamping happens only when images are exported.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError

__all__ = [
    "DegradationSpec",
    "awgn",
    "awgn_from_rng",
    "bicubic_resize",
    "jpeg_compress_sim",
    "blockwise_dct",
    "blockwise_idct",
    "jpeg_quant_table",
]


@dataclass(frozen=True)
class DegradationSpec:
    """One corruption: kind awgn (sigma on the 0-255 scale), bicubic_down
    (integer scale), or jpeg (quality 1..100); plus the noise seed."""

    kind: str
    sigma: float = 25.0
    scale: int = 2
    quality: int = 10
    seed: int = 0

    KINDS = ("awgn", "bicubic_down", "jpeg")

    def validate(self) -> None:
        if self.kind not in self.KINDS:
            raise ParameterError(f"unknown degradation kind {self.kind!r}")
        if self.kind == "awgn" and self.sigma <= 0:
            raise ParameterError("awgn sigma must be positive")
        if self.kind == "bicubic_down" and self.scale not in (2, 3, 4):
            raise ParameterError("bicubic scale must be 2, 3 or 4")
        if self.kind == "jpeg" and not (1 <= int(self.quality) <= 100):
            raise ParameterError("jpeg quality must be in [1, 100]")

    def apply(self, img: np.ndarray, stream: int = 0) -> np.ndarray:
        """Degrade one image; ``stream`` isolates noise per image index."""
        self.validate()
        if self.kind == "awgn":
            return awgn(img, self.sigma, self.seed, stream=stream)
        if self.kind == "bicubic_down":
            return bicubic_resize(img, self.scale, "down")
        return jpeg_compress_sim(img, int(self.quality))

    def to_line(self) -> str:
        if self.kind == "awgn":
            return f"kind=awgn sigma={self.sigma:g} seed={self.seed}"
        if self.kind == "bicubic_down":
            return f"kind=bicubic_down scale={self.scale} seed={self.seed}"
        return f"kind=jpeg quality={self.quality} seed={self.seed}"

    @staticmethod
    def from_line(line: str) -> "DegradationSpec":
        fields = {}
        for token in line.split():
            key, sep, value = token.partition("=")
            if not sep:
                raise FormatError(f"malformed spec token {token!r}")
            fields[key] = value
        try:
            kind = fields.pop("kind")
        except KeyError:
            raise FormatError(f"degradation spec needs kind=..., got {line!r}") from None
        kwargs = {"kind": kind}
        for key, value in fields.items():
            if key == "sigma":
                kwargs["sigma"] = float(value)
            elif key == "scale":
                kwargs["scale"] = int(value)
            elif key == "quality":
                kwargs["quality"] = int(value)
            elif key == "seed":
                kwargs["seed"] = int(value)
            else:
                raise FormatError(f"unknown spec key {key!r}")
        spec = DegradationSpec(**kwargs)
        spec.validate()
        return spec


# ---------------------------------------------------------------------------
# additive white Gaussian noise


def awgn(img: np.ndarray, sigma255: float, seed: int, stream: int = 0) -> np.ndarray:
    """Add iid Normal(0, (sigma/255)^2) noise, deterministic per
    (seed, stream, shape). Output is not clipped."""
    if sigma255 <= 0:
        raise ParameterError("sigma must be positive")
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(seed), np.uint64(stream)]))
    return awgn_from_rng(img, sigma255, rng)


def awgn_from_rng(img: np.ndarray, sigma255: float, rng: np.random.Generator) -> np.ndarray:
    noise = rng.normal(0.0, sigma255 / 255.0, size=img.shape)
    return (img + noise).astype(img.dtype, copy=False)


# ---------------------------------------------------------------------------
# bicubic resizing


def _cubic(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    at = np.abs(t)
    out = np.zeros_like(at)
    near = at <= 1
    mid = (at > 1) & (at < 2)
    out[near] = (a + 2) * at[near] ** 3 - (a + 3) * at[near] ** 2 + 1
    out[mid] = a * at[mid] ** 3 - 5 * a * at[mid] ** 2 + 8 * a * at[mid] - 4 * a
    return out


def _resize_matrix(n_in: int, n_out: int, antialias_stretch: float) -> np.ndarray:
    """Dense (n_out, n_in) weight matrix for one axis.

    Output pixel centers map to input coordinates via the half-pixel
    convention; out-of-range taps clamp to the border (their weight folds
    onto the edge pixel) and every row is normalized to sum to one.
    """
    ratio = n_in / n_out
    f = max(antialias_stretch, 1.0)
    radius = 2 * f
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) * ratio - 0.5
        j0 = int(np.floor(center - radius)) + 1
        taps = np.arange(j0, int(np.ceil(center + radius)) + 1)
        weights = _cubic((center - taps) / f) / f
        cols = np.clip(taps, 0, n_in - 1)
        for col, wgt in zip(cols, weights):
            mat[i, col] += wgt
        mat[i] /= mat[i].sum()
    return mat


def bicubic_resize(img: np.ndarray, scale: int, direction: str) -> np.ndarray:
    """Separable cubic-kernel resize (a = -0.5), antialiased when shrinking."""
    if scale < 2:
        raise ParameterError(f"scale must be >= 2, got {scale}")
    if direction not in ("down", "up"):
        raise ParameterError(f"direction must be 'down' or 'up', got {direction!r}")
    h, w = img.shape[-2], img.shape[-1]
    if direction == "down":
        if h % scale or w % scale:
            raise ParameterError(f"image {h}x{w} not divisible by scale {scale}")
        oh, ow, stretch = h // scale, w // scale, float(scale)
    else:
        oh, ow, stretch = h * scale, w * scale, 1.0
    mat_h = _resize_matrix(h, oh, stretch).astype(img.dtype)
    mat_w = _resize_matrix(w, ow, stretch).astype(img.dtype)
    out = np.matmul(mat_h, img)            # contracts the height axis
    out = np.matmul(out, mat_w.T)          # contracts the width axis
    return np.ascontiguousarray(out)


# ---------------------------------------------------------------------------
# JPEG transform simulator (lossy transform only, no bitstream)

# ITU T.81 Annex K baseline luminance quantization table
_JPEG_LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)


def _dct_matrix(size: int = 8) -> np.ndarray:
    k = np.arange(size)
    mat = np.cos((2 * k[None, :] + 1) * k[:, None] * np.pi / (2 * size))
    mat *= np.sqrt(2.0 / size)
    mat[0] /= np.sqrt(2.0)
    return mat


_DCT8 = _dct_matrix(8)


def jpeg_quant_table(quality: int) -> np.ndarray:
    """Luminance table scaled by the conventional quality law."""
    if not 1 <= quality <= 100:
        raise ParameterError(f"quality must be in [1, 100], got {quality}")
    scale = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    table = np.floor((_JPEG_LUMA_TABLE * scale + 50.0) / 100.0)
    return np.clip(table, 1.0, 255.0)


def _to_blocks(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    return plane.reshape(h // 8, 8, w // 8, 8).transpose(0, 2, 1, 3)


def _from_blocks(blocks: np.ndarray, h: int, w: int) -> np.ndarray:
    return blocks.transpose(0, 2, 1, 3).reshape(h, w)


def blockwise_dct(plane: np.ndarray) -> np.ndarray:
    """8x8 orthonormal block DCT of a (h, w) plane; dims multiples of 8."""
    if plane.shape[0] % 8 or plane.shape[1] % 8:
        raise ParameterError("plane dimensions must be multiples of 8")
    blocks = _to_blocks(np.asarray(plane, dtype=np.float64))
    return _from_blocks(_DCT8 @ blocks @ _DCT8.T, *plane.shape)


def blockwise_idct(coefs: np.ndarray) -> np.ndarray:
    if coefs.shape[0] % 8 or coefs.shape[1] % 8:
        raise ParameterError("plane dimensions must be multiples of 8")
    blocks = _to_blocks(np.asarray(coefs, dtype=np.float64))
    return _from_blocks(_DCT8.T @ blocks @ _DCT8, *coefs.shape)


def jpeg_compress_sim(img: np.ndarray, quality: int) -> np.ndarray:
    """Block DCT -> quantize -> dequantize -> inverse DCT, per channel.

    Gray inputs use the luminance table directly; color inputs get the same
    table per channel (no chroma subsampling). Dimensions are padded to
    multiples of 8 by edge replication internally.
    """
    table = jpeg_quant_table(quality)
    squeeze = img.ndim == 3
    arr = img[None] if squeeze else img
    n, c, h, w = arr.shape
    ph, pw = (-h) % 8, (-w) % 8
    out = np.empty_like(arr, dtype=np.float64)
    for ni in range(n):
        for ci in range(c):
            plane = arr[ni, ci].astype(np.float64) * 255.0 - 128.0
            if ph or pw:
                plane = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
            coefs = blockwise_dct(plane)
            blocks = _to_blocks(coefs)
            blocks = np.round(blocks / table) * table
            rec = blockwise_idct(_from_blocks(blocks, *plane.shape))
            out[ni, ci] = (rec[:h, :w] + 128.0) / 255.0
    out = out.astype(img.dtype, copy=False)
    return out[0] if squeeze else out
