"""Full network assembly, parameter accounting, checkpoints, self-ensemble.

The network is head conv -> cascade of EAM blocks -> tail. For restoration
the tail is one conv back to image channels and the long skip adds the
input image to the output. For super-resolution the long skip moves to
feature level (head output added to the last EAM output) and the tail
becomes conv to C*s*s channels, depth-to-space upsampling, and a final
conv to image channels.
"""

from __future__ import annotations

import io
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .blocks import ConvParams, EAMParams, eam_forward, init_conv, init_eam
from .errors import FormatError, ParameterError
from .tensor import Tensor, add, pixel_shuffle

__all__ = [
    "ModelConfig",
    "Model",
    "build_model",
    "param_count_from_config",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint",
    "write_checkpoint",
    "self_ensemble_forward",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

TASKS = ("restore", "super_resolve")


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    out_channels: int = 3
    width: int = 64
    num_eam: int = 4
    reduction: int = 16
    lsc: bool = True
    ssc: bool = True
    lc: bool = True
    fa: bool = True
    task: str = "restore"
    scale: int = 2
    shrink_lambda: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.in_channels not in (1, 3) or self.out_channels not in (1, 3):
            raise ParameterError("channel counts must be 1 or 3")
        if self.task not in TASKS:
            raise ParameterError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "restore" and self.in_channels != self.out_channels:
            raise ParameterError("restore task needs in_channels == out_channels")
        if self.task == "super_resolve" and self.scale not in (2, 3, 4):
            raise ParameterError(f"scale must be 2, 3 or 4, got {self.scale}")
        if self.width < 1 or self.num_eam < 1:
            raise ParameterError("width and num_eam must be positive")
        if self.width % self.reduction != 0:
            raise ParameterError(
                f"width {self.width} must be divisible by reduction {self.reduction}")
        if self.shrink_lambda <= 0:
            raise ParameterError("shrink_lambda must be positive")

    def shape_signature(self) -> str:
        """The fields that determine parameter tensor shapes (ablation flags
        deliberately excluded so checkpoints load under any flag setting)."""
        parts = [f"in={self.in_channels}", f"out={self.out_channels}",
                 f"width={self.width}", f"num_eam={self.num_eam}",
                 f"reduction={self.reduction}", f"task={self.task}"]
        if self.task == "super_resolve":
            parts.append(f"scale={self.scale}")
        return " ".join(parts)

    def to_text(self) -> str:
        lines = []
        for key in ("in_channels", "out_channels", "width", "num_eam", "reduction",
                    "lsc", "ssc", "lc", "fa", "task", "scale", "shrink_lambda", "seed"):
            lines.append(f"{key}={getattr(self, key)}")
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "ModelConfig":
        kwargs = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key in ("in_channels", "out_channels", "width", "num_eam", "reduction",
                       "scale", "seed"):
                kwargs[key] = int(value)
            elif key in ("lsc", "ssc", "lc", "fa"):
                kwargs[key] = value == "True"
            elif key == "shrink_lambda":
                kwargs[key] = float(value)
            elif key == "task":
                kwargs[key] = value
            else:
                raise FormatError(f"unknown config key {key!r} in checkpoint")
        return ModelConfig(**kwargs)


class Model:
    """Built network: head conv, EAM cascade, optional upsampler, tail."""

    def __init__(self, config: ModelConfig, head: ConvParams, eams: list[EAMParams],
                 pre_shuffle: ConvParams | None, tail: ConvParams):
        self.config = config
        self.head = head
        self.eams = eams
        self.pre_shuffle = pre_shuffle
        self.tail = tail
        self.iteration = 0

    # -- parameter access ---------------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = list(self.head.named_tensors("head"))
        for i, eam in enumerate(self.eams):
            out.extend(eam.named_tensors(f"eam{i}"))
        if self.pre_shuffle is not None:
            out.extend(self.pre_shuffle.named_tensors("upsample"))
        out.extend(self.tail.named_tensors("tail"))
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def param_count(self) -> int:
        return sum(t.data.size for t in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    @property
    def dtype(self):
        return self.head.weight.dtype

    # -- forward ------------------------------------------------------------

    def features(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Head features and the EAM cascade output (pre-tail)."""
        cfg = self.config
        f0 = self.head(x)
        f = f0
        for eam in self.eams:
            y = eam_forward(f, eam, local_connection=cfg.lc, feature_attention=cfg.fa)
            f = add(y, f) if cfg.ssc else y
        return f0, f

    def forward(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.shape[1] != cfg.in_channels:
            raise ParameterError(f"model expects {cfg.in_channels} channels, got {x.shape[1]}")
        if x.dtype != self.dtype:
            raise ParameterError(
                f"input dtype {x.dtype} does not match model dtype {self.dtype}")
        f0, f = self.features(x)
        if cfg.task == "restore":
            y = self.tail(f)
            return add(y, x) if cfg.lsc else y
        # super-resolution: long skip at feature level, then upsample
        if cfg.lsc:
            f = add(f, f0)
        up = pixel_shuffle(self.pre_shuffle(f), cfg.scale)
        return self.tail(up)

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def layer_table(self) -> list[tuple[str, str, int]]:
        """(name, weight shape, parameter count) per conv layer."""
        rows = []
        seen = {}
        for name, t in self.named_parameters():
            layer = name.rsplit(".", 1)[0]
            seen.setdefault(layer, 0)
            seen[layer] += t.data.size
            if name.endswith(".weight"):
                rows.append((layer, "x".join(str(d) for d in t.shape)))
        return [(layer, shape, seen[layer]) for layer, shape in rows]


def build_model(cfg: ModelConfig, dtype=np.float32) -> Model:
    """Deterministically initialize a model from its config and seed."""
    cfg.validate()
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(cfg.seed), np.uint64(0x52324E)]))
    c = cfg.width
    head = init_conv(cfg.in_channels, c, 3, rng, dtype, 1, "head")
    eams = [init_eam(c, cfg.reduction, rng, dtype, cfg.shrink_lambda, f"eam{i}")
            for i in range(cfg.num_eam)]
    if cfg.task == "super_resolve":
        s = cfg.scale
        pre_shuffle = init_conv(c, c * s * s, 3, rng, dtype, 1, "upsample")
        tail = init_conv(c, cfg.out_channels, 3, rng, dtype, 1, "tail")
    else:
        pre_shuffle = None
        tail = init_conv(c, cfg.out_channels, 3, rng, dtype, 1, "tail")
        # the reconstruction conv starts at zero so the restore network is
        # the identity map at initialization; the random-init residual is
        # otherwise far too large to unlearn at the training rate
        tail.weight.data[:] = 0
    return Model(cfg, head, eams, pre_shuffle, tail)


def param_count_from_config(cfg: ModelConfig) -> int:
    """Closed-form parameter count; must match the built model exactly."""
    c = cfg.width
    conv3 = lambda cin, cout: cin * 9 * cout + cout
    conv1 = lambda cin, cout: cin * cout + cout
    mru = 4 * conv3(c, c) + conv3(2 * c, c)
    rb = 2 * conv3(c, c)
    erb = 2 * conv3(c, c) + conv1(c, c)
    fa = conv1(c, c // cfg.reduction) + conv1(c // cfg.reduction, c)
    eam = mru + rb + erb + fa
    total = conv3(cfg.in_channels, c) + cfg.num_eam * eam + conv3(c, cfg.out_channels)
    if cfg.task == "super_resolve":
        total += conv3(c, c * cfg.scale * cfg.scale)
    return total


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic "R2NETCKP" | u32 version | u64 shape-signature hash |
#   u32 config length | config text (utf-8 key=value lines) |
#   u64 iteration | u32 tensor count |
#   per tensor: u16 name length | name | u8 rank | u32*rank dims |
#               float32 little-endian data |
#   u64 fnv1a-64 checksum over all preceding bytes
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"R2NETCKP"
CHECKPOINT_VERSION = 1

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def _fnv1a(data: bytes, h: int = _FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def _checksum64(data: bytes) -> int:
    # composite 64-bit content checksum; both halves run at C speed
    return (zlib.crc32(data) << 32) | zlib.adler32(data)


def write_checkpoint(path: str | os.PathLike, cfg: ModelConfig, iteration: int,
                     named_arrays: list[tuple[str, np.ndarray]]) -> None:
    """Serialize tensors as float32 little-endian; atomic via temp rename."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", _fnv1a(cfg.shape_signature().encode())))
    cfg_bytes = cfg.to_text().encode()
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<Q", iteration))
    buf.write(struct.pack("<I", len(named_arrays)))
    for name, arr in named_arrays:
        name_b = name.encode()
        buf.write(struct.pack("<H", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<B", arr.ndim))
        for dim in arr.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = buf.getvalue()
    blob = payload + struct.pack("<Q", _checksum64(payload))

    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.blob):
            raise FormatError("checkpoint truncated", offset=self.pos)
        chunk = self.blob[self.pos:self.pos + count]
        self.pos += count
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def read_checkpoint(path: str | os.PathLike):
    """Parse a checkpoint into (config, iteration, ordered name->array dict)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 12 + 8:
        raise FormatError("file too short to be a checkpoint", offset=len(blob))
    stored_sum = struct.unpack("<Q", blob[-8:])[0]
    payload = blob[:-8]
    if _checksum64(payload) != stored_sum:
        raise FormatError("checksum mismatch; file is corrupt or truncated",
                          offset=len(payload))

    r = _Reader(payload)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError("bad magic bytes", offset=0)
    version = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8)
    shape_hash = r.unpack("<Q")
    cfg_len = r.unpack("<I")
    cfg_offset = r.pos
    cfg = ModelConfig.from_text(r.take(cfg_len).decode())
    if _fnv1a(cfg.shape_signature().encode()) != shape_hash:
        raise FormatError("config hash mismatch", offset=cfg_offset)
    iteration = r.unpack("<Q")
    count = r.unpack("<I")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = r.unpack("<H")
        name = r.take(name_len).decode()
        rank = r.unpack("<B")
        dims = tuple(r.unpack("<I") for _ in range(rank))
        size = int(np.prod(dims)) if dims else 1
        raw = r.take(size * 4)
        arrays[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return cfg, iteration, arrays


def save_checkpoint(model: Model, path: str | os.PathLike,
                    extra: list[tuple[str, np.ndarray]] | None = None) -> None:
    named = [(name, t.data) for name, t in model.named_parameters()]
    if extra:
        named.extend(extra)
    write_checkpoint(path, model.config, model.iteration, named)


def load_checkpoint(path: str | os.PathLike, config: ModelConfig | None = None,
                    dtype=np.float32) -> Model:
    """Rebuild a model from a checkpoint.

    With ``config`` given, its shape signature must match the stored one
    (ablation flags may differ); otherwise the stored config is used.
    """
    stored_cfg, iteration, arrays = read_checkpoint(path)
    cfg = stored_cfg if config is None else config
    if config is not None and config.shape_signature() != stored_cfg.shape_signature():
        raise FormatError(
            "incompatible checkpoint: shape signature "
            f"{stored_cfg.shape_signature()!r} does not match requested "
            f"{config.shape_signature()!r}")
    model = build_model(cfg, dtype=dtype)
    model.iteration = iteration
    for name, tensor in model.named_parameters():
        if name not in arrays:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        arr = arrays[name]
        if arr.shape != tensor.shape:
            raise FormatError(
                f"tensor {name!r} has shape {arr.shape}, expected {tensor.shape}")
        tensor.data = np.ascontiguousarray(arr, dtype=dtype)
    return model


# ---------------------------------------------------------------------------
# geometric self-ensemble


def _dihedral(arr: np.ndarray, rot: int, flip: bool) -> np.ndarray:
    if flip:
        arr = arr[:, :, :, ::-1]
    if rot:
        arr = np.rot90(arr, rot, axes=(2, 3))
    return np.ascontiguousarray(arr)


def _dihedral_inverse(arr: np.ndarray, rot: int, flip: bool) -> np.ndarray:
    if rot:
        arr = np.rot90(arr, -rot, axes=(2, 3))
    if flip:
        arr = arr[:, :, :, ::-1]
    return np.ascontiguousarray(arr)


def self_ensemble_forward(model: Model, x: Tensor) -> Tensor:
    """Average the model over the 8 dihedral transforms of the input,
    mapping each output back through the inverse transform first."""
    total = None
    for flip in (False, True):
        for rot in range(4):
            xt = Tensor(_dihedral(x.data, rot, flip), _checked=True)
            yt = model.forward(xt)
            y = _dihedral_inverse(yt.data, rot, flip)
            total = y if total is None else total + y
    return Tensor(total / 8.0, _checked=True)
