"""Image I/O, dataset manifests, dihedral augmentation, patch sampling.

Binary PPM (P6) and PGM (P5) are the bit-exact reference formats; PNG
(8-bit gray/RGB, non-interlaced) is supported for convenience through a
small built-in codec. Pixel values live in [0, 1]; writing clips and
quantizes round-half-up to 8 bits.
"""

from __future__ import annotations

import os
import struct
import warnings
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .degrade import DegradationSpec, awgn_from_rng, bicubic_resize, jpeg_compress_sim
from .errors import FormatError, ParameterError
from .tensor import Tensor

__all__ = [
    "read_image",
    "read_image_array",
    "write_image",
    "Manifest",
    "ManifestEntry",
    "load_manifest",
    "augment",
    "inverse_augment_code",
    "PatchBatch",
    "sample_patch_batch",
    "tile_large_image",
]


# ---------------------------------------------------------------------------
# Netpbm (PPM/PGM), binary variants only


def _parse_pnm_tokens(blob: bytes, count: int, offset: int):
    """Read whitespace/comment separated header tokens starting at offset."""
    tokens = []
    pos = offset
    while len(tokens) < count:
        if pos >= len(blob):
            raise FormatError("truncated header", offset=pos)
        ch = blob[pos:pos + 1]
        if ch in b" \t\r\n":
            pos += 1
        elif ch == b"#":
            end = blob.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated comment", offset=pos)
            pos = end + 1
        elif ch.isdigit():
            start = pos
            while pos < len(blob) and blob[pos:pos + 1].isdigit():
                pos += 1
            tokens.append(int(blob[start:pos]))
        else:
            raise FormatError(f"unexpected header byte {ch!r}", offset=pos)
    if pos >= len(blob) or blob[pos:pos + 1] not in b" \t\r\n":
        raise FormatError("missing whitespace after maxval", offset=pos)
    return tokens, pos + 1


def _decode_pnm(blob: bytes) -> np.ndarray:
    magic = blob[:2]
    if magic == b"P6":
        channels = 3
    elif magic == b"P5":
        channels = 1
    else:
        raise FormatError(f"not a binary PPM/PGM file (magic {magic!r})", offset=0)
    (width, height, maxval), data_off = _parse_pnm_tokens(blob, 3, 2)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, only 255", offset=2)
    expected = width * height * channels
    raw = blob[data_off:data_off + expected]
    if len(raw) < expected:
        raise FormatError(f"pixel data truncated: need {expected} bytes, have {len(raw)}",
                          offset=data_off + len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels)
    return pixels.transpose(2, 0, 1)[None]  # (1, c, h, w) uint8


def _encode_pnm(img_u8: np.ndarray) -> bytes:
    _, c, h, w = img_u8.shape
    magic = b"P6" if c == 3 else b"P5"
    header = magic + f"\n{w} {h}\n255\n".encode()
    return header + img_u8[0].transpose(1, 2, 0).tobytes()


# ---------------------------------------------------------------------------
# PNG, 8-bit grayscale (type 0) and RGB (type 2), no interlace


def _png_chunks(blob: bytes):
    if blob[:8] != b"\x89PNG\r\n\x1a\n":
        raise FormatError("not a PNG file", offset=0)
    pos = 8
    while pos < len(blob):
        if pos + 8 > len(blob):
            raise FormatError("truncated chunk header", offset=pos)
        length, ctype = struct.unpack(">I4s", blob[pos:pos + 8])
        data = blob[pos + 8:pos + 8 + length]
        if len(data) < length:
            raise FormatError("truncated chunk data", offset=pos + 8)
        yield ctype, data
        pos += 12 + length  # header + data + crc


def _png_unfilter(raw: bytes, h: int, w: int, channels: int) -> np.ndarray:
    stride = w * channels
    out = np.zeros((h, stride), dtype=np.uint8)
    pos = 0
    for row in range(h):
        ftype = raw[pos]
        pos += 1
        line = np.frombuffer(raw[pos:pos + stride], dtype=np.uint8).astype(np.int32)
        pos += stride
        prev = out[row - 1].astype(np.int32) if row else np.zeros(stride, np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        else:
            cur = np.zeros(stride, np.int32)
            for i in range(stride):
                left = cur[i - channels] if i >= channels else 0
                up = prev[i]
                ul = prev[i - channels] if i >= channels else 0
                if ftype == 1:
                    pred = left
                elif ftype == 3:
                    pred = (left + up) // 2
                elif ftype == 4:
                    p = left + up - ul
                    pa, pb, pc = abs(p - left), abs(p - up), abs(p - ul)
                    pred = left if pa <= pb and pa <= pc else (up if pb <= pc else ul)
                else:
                    raise FormatError(f"unknown PNG filter type {ftype}")
                cur[i] = (line[i] + pred) & 0xFF
        out[row] = cur.astype(np.uint8)
    return out.reshape(h, w, channels)


def _decode_png(blob: bytes) -> np.ndarray:
    width = height = None
    channels = 0
    idat = b""
    for ctype, data in _png_chunks(blob):
        if ctype == b"IHDR":
            width, height, depth, color, comp, filt, interlace = struct.unpack(">IIBBBBB", data)
            if depth != 8:
                raise FormatError(f"unsupported PNG bit depth {depth}")
            if color == 0:
                channels = 1
            elif color == 2:
                channels = 3
            else:
                raise FormatError(f"unsupported PNG color type {color}")
            if interlace:
                raise FormatError("interlaced PNG not supported")
        elif ctype == b"IDAT":
            idat += data
        elif ctype == b"IEND":
            break
    if width is None:
        raise FormatError("PNG missing IHDR")
    raw = zlib.decompress(idat)
    pixels = _png_unfilter(raw, height, width, channels)
    return pixels.transpose(2, 0, 1)[None]


def _encode_png(img_u8: np.ndarray) -> bytes:
    _, c, h, w = img_u8.shape
    color = 2 if c == 3 else 0
    rows = img_u8[0].transpose(1, 2, 0).reshape(h, w * c)
    raw = b"".join(b"\x00" + rows[r].tobytes() for r in range(h))

    def chunk(ctype: bytes, data: bytes) -> bytes:
        body = ctype + data
        return struct.pack(">I", len(data)) + body + struct.pack(">I", zlib.crc32(body))

    ihdr = struct.pack(">IIBBBBB", w, h, 8, color, 0, 0, 0)
    return (b"\x89PNG\r\n\x1a\n"
            + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw, 6))
            + chunk(b"IEND", b""))


# ---------------------------------------------------------------------------
# public image I/O


def read_image_array(path: str | os.PathLike, dtype=np.float32) -> np.ndarray:
    """Load a PPM/PGM/PNG file as a (1, c, h, w) array scaled to [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:1] == b"P":
        u8 = _decode_pnm(blob)
    elif blob[:8] == b"\x89PNG\r\n\x1a\n":
        u8 = _decode_png(blob)
    else:
        raise FormatError(f"unrecognized image format in {path}", offset=0)
    return u8.astype(dtype) / 255.0


def read_image(path: str | os.PathLike, dtype=np.float32) -> Tensor:
    return Tensor(read_image_array(path, dtype))


def quantize_u8(arr: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and quantize round-half-up to 8 bits."""
    clipped = np.clip(arr, 0.0, 1.0)
    return np.floor(clipped.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


def write_image(img, path: str | os.PathLike) -> None:
    """Write a tensor or (1,c,h,w)/(c,h,w) array as PPM/PGM/PNG by extension."""
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1] not in (1, 3):
        raise ParameterError(f"cannot write image of shape {arr.shape}")
    u8 = quantize_u8(arr)
    suffix = Path(path).suffix.lower()
    if suffix in (".ppm", ".pgm"):
        if suffix == ".pgm" and u8.shape[1] != 1:
            raise ParameterError("pgm files are single channel")
        blob = _encode_pnm(u8)
    elif suffix == ".png":
        blob = _encode_png(u8)
    else:
        raise ParameterError(f"unsupported image extension {suffix!r}")
    with open(path, "wb") as fh:
        fh.write(blob)


def tile_large_image(arr: np.ndarray, tile: int = 512) -> list[np.ndarray]:
    """Split an oversized image into non-overlapping tile x tile crops
    (top-left grid); images already small enough pass through unchanged."""
    _, _, h, w = arr.shape
    if h <= tile and w <= tile:
        return [arr]
    tiles = []
    for top in range(0, h - tile + 1, tile):
        for left in range(0, w - tile + 1, tile):
            tiles.append(np.ascontiguousarray(arr[:, :, top:top + tile, left:left + tile]))
    return tiles


# ---------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestEntry:
    clean: Path
    degraded: Path | None = None


class Manifest:
    """Clean/degraded path pairs, either pre-paired on disk or degraded on
    the fly by a DegradationSpec. Read-only after construction."""

    def __init__(self, entries: list[ManifestEntry],
                 degradation: DegradationSpec | None = None):
        if not entries:
            raise ParameterError("manifest has no entries")
        paired = [e.degraded is not None for e in entries]
        if any(paired) and not all(paired):
            raise ParameterError("manifest mixes paired and unpaired entries")
        self.entries = list(entries)
        self.degradation = degradation
        self.mode = "paired_files" if all(paired) else "on_the_fly"
        self._cache: dict[Path, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    def image(self, path: Path, dtype=np.float32) -> np.ndarray:
        cached = self._cache.get(path)
        if cached is None or cached.dtype != dtype:
            cached = read_image_array(path, dtype=dtype)
            self._cache[path] = cached
        return cached


def load_manifest(path: str | os.PathLike,
                  degradation: DegradationSpec | None = None) -> Manifest:
    """Parse a manifest file: one `clean=<path> [degraded=<path>]` per line,
    `#` comments; every referenced path must exist."""
    base = Path(path).parent
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            clean = degraded = None
            for token in line.split():
                key, sep, value = token.partition("=")
                if not sep or key not in ("clean", "degraded"):
                    raise FormatError(f"line {lineno}: bad manifest token {token!r}")
                resolved = (base / value).resolve() if not os.path.isabs(value) else Path(value)
                if key == "clean":
                    clean = resolved
                else:
                    degraded = resolved
            if clean is None:
                raise FormatError(f"line {lineno}: missing clean=<path>")
            for p in (clean, degraded):
                if p is not None and not p.exists():
                    raise FormatError(f"line {lineno}: no such file {p}")
            entries.append(ManifestEntry(clean=clean, degraded=degraded))
    return Manifest(entries, degradation=degradation)


# ---------------------------------------------------------------------------
# dihedral augmentation


def augment(patch: np.ndarray, k: int) -> np.ndarray:
    """Apply dihedral variant k in 0..7 to the trailing two axes.

    k = rotation + 4*flip: horizontal flip first (if set), then rotation by
    90*rotation degrees counterclockwise. Every variant is an exact pixel
    permutation.
    """
    if not 0 <= k <= 7:
        raise ParameterError(f"augment code must be 0..7, got {k}")
    rot, flip = k & 3, k >> 2
    if rot and patch.shape[-2] != patch.shape[-1]:
        raise ParameterError(
            f"rotation requires a square patch, got {patch.shape[-2]}x{patch.shape[-1]}")
    out = patch
    if flip:
        out = out[..., ::-1]
    if rot:
        out = np.rot90(out, rot, axes=(-2, -1))
    return np.ascontiguousarray(out)


def inverse_augment_code(k: int) -> int:
    """The variant that undoes k; reflections are their own inverse."""
    if not 0 <= k <= 7:
        raise ParameterError(f"augment code must be 0..7, got {k}")
    rot, flip = k & 3, k >> 2
    return k if flip else (4 - rot) % 4


# ---------------------------------------------------------------------------
# patch sampling


@dataclass
class PatchBatch:
    inputs: np.ndarray            # (N, C, p, p), unclipped degraded domain
    targets: np.ndarray           # (N, C, p, p) or (N, C, p*s, p*s)
    source_indices: list[int]
    augment_codes: list[int]


def sample_patch_batch(manifest: Manifest, batch: int, patch: int,
                       rng: np.random.Generator,
                       sr_scale: int | None = None,
                       dtype=np.float32) -> PatchBatch:
    """Uniform image choice, uniform offsets, independent augmentation per
    patch; degradation is applied after cropping-and-augmenting the clean
    patch so noise realizations are never transformed.

    For super-resolution, ``patch`` is the input (low-resolution) size: the
    target crop is patch*s and the input comes from downscaling it (or from
    the paired low-resolution file).
    """
    if manifest.mode == "on_the_fly" and manifest.degradation is None and sr_scale is None:
        raise ParameterError("on-the-fly manifest needs a degradation spec")

    target_patch = patch * sr_scale if sr_scale else patch
    usable = []
    for idx, entry in enumerate(manifest.entries):
        img = manifest.image(entry.clean, dtype=dtype)
        if img.shape[2] >= target_patch and img.shape[3] >= target_patch:
            usable.append(idx)
        else:
            warnings.warn(f"{entry.clean.name}: smaller than patch size, skipped")
    if not usable:
        raise ParameterError(f"no manifest image is at least {target_patch} pixels")

    inputs = []
    targets = []
    indices = []
    codes = []
    for _ in range(batch):
        idx = usable[int(rng.integers(len(usable)))]
        entry = manifest.entries[idx]
        clean = manifest.image(entry.clean, dtype=dtype)
        _, _, h, w = clean.shape
        if sr_scale:
            # offsets on the low-resolution grid keep the crops aligned
            top = int(rng.integers(h // sr_scale - patch + 1)) * sr_scale
            left = int(rng.integers(w // sr_scale - patch + 1)) * sr_scale
        else:
            top = int(rng.integers(h - target_patch + 1))
            left = int(rng.integers(w - target_patch + 1))
        code = int(rng.integers(8))
        target = augment(clean[0, :, top:top + target_patch, left:left + target_patch], code)

        if manifest.mode == "paired_files":
            degraded_img = manifest.image(entry.degraded, dtype=dtype)
            if sr_scale:
                if degraded_img.shape[2] * sr_scale != h or degraded_img.shape[3] * sr_scale != w:
                    raise ParameterError(
                        f"{entry.degraded.name}: low-resolution size must be high/scale")
                lr_top, lr_left = top // sr_scale, left // sr_scale
                degraded = augment(
                    degraded_img[0, :, lr_top:lr_top + patch, lr_left:lr_left + patch], code)
            else:
                if degraded_img.shape != clean.shape:
                    raise ParameterError(f"{entry.degraded.name}: size differs from clean image")
                degraded = augment(
                    degraded_img[0, :, top:top + target_patch, left:left + target_patch], code)
        elif sr_scale:
            degraded = bicubic_resize(target, sr_scale, "down")
        else:
            spec = manifest.degradation
            if spec.kind == "awgn":
                degraded = awgn_from_rng(target, spec.sigma, rng)
            elif spec.kind == "jpeg":
                degraded = jpeg_compress_sim(target, int(spec.quality))
            else:
                raise ParameterError(
                    "bicubic degradation needs sr_scale (super-resolution sampling)")

        inputs.append(degraded)
        targets.append(target)
        indices.append(idx)
        codes.append(code)
    return PatchBatch(inputs=np.stack(inputs).astype(dtype),
                      targets=np.stack(targets).astype(dtype),
                      source_indices=indices,
                      augment_codes=codes)
