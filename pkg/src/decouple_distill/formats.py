"""File formats: checkpoints, PGM/PPM images, run configs, class banks, regions.

Checkpoint layout (all integers little-endian)::

    b"DCLP" | u32 format_version | u32 header_len | header (utf-8)
    | payload (float32 LE) | u32 crc32(payload)

The header has one line per tensor: ``name<TAB>d0,d1,...<TAB>offset`` where
``offset`` counts float32 values from the start of the payload.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .decoupled_head import ContextType
from .distill import DistillConfig
from .encoder import CLIP_MEAN, CLIP_STD, IMAGENET_MEAN, IMAGENET_STD, EncoderConfig
from .region_ops import RegionBox

MAGIC = b"DCLP"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Malformed or corrupted file."""


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: dict) -> None:
    lines, chunks, offset = [], [], 0
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        shape = ",".join(str(d) for d in arr.shape)
        lines.append(f"{name}\t{shape}\t{offset}")
        chunks.append(arr.tobytes())
        offset += arr.size
    header = ("\n".join(lines) + "\n").encode()
    payload = b"".join(chunks)
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + payload
    blob += struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(blob)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    start = 12 + hlen
    header = blob[12:start].decode()
    payload = blob[start:-4]
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise FormatError(f"{path}: checksum mismatch")
    values = np.frombuffer(payload, dtype="<f4")
    params = {}
    for line in header.splitlines():
        name, shape, offset = line.split("\t")
        dims = tuple(int(d) for d in shape.split(",")) if shape else ()
        n = int(np.prod(dims))
        off = int(offset)
        if off + n > values.size:
            raise FormatError(f"{path}: tensor {name!r} overruns payload")
        params[name] = values[off:off + n].reshape(dims).astype(np.float32)
    return params


# ---------------------------------------------------------------- PGM / PPM


def _read_token(data: bytes, pos: int):
    while True:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        break
    end = pos
    while end < len(data) and not data[end:end + 1].isspace():
        end += 1
    return data[pos:end], end


def read_pnm(path) -> np.ndarray:
    """Read binary PGM (P5) or PPM (P6) with maxval <= 255 as uint8."""
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported PNM magic {magic!r}")
    try:
        w, pos = _read_token(data, pos)
        h, pos = _read_token(data, pos)
        maxval, pos = _read_token(data, pos)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise FormatError(f"{path}: malformed PNM header") from None
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PNM not supported")
    ch = 3 if magic == b"P6" else 1
    raw = data[pos + 1:pos + 1 + w * h * ch]
    if len(raw) != w * h * ch:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def write_pgm(path, img) -> None:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM needs a 2-d array")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.astype(np.uint8).tobytes())


def write_ppm(path, img) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) array")
    h, w = img.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.astype(np.uint8).tobytes())


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """PPM -> float32 (H, W, 3) in [0, 1]."""
    return (read_pnm(path).astype(np.float32) / 255).astype(np.float32)


# ---------------------------------------------------------------- class banks


@dataclass
class ClassBank:
    names: list
    embeds: np.ndarray  # (K, C), unit rows

    def __post_init__(self):
        self.embeds = np.asarray(self.embeds, dtype=np.float64)
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        if len(self.names) != len(self.embeds):
            raise ValueError("one embedding per class name")
        norms = np.linalg.norm(self.embeds, axis=1)
        if np.any(norms == 0):
            raise ValueError("zero class embedding")
        self.embeds = self.embeds / norms[:, None]

    def __len__(self):
        return len(self.names)


def write_bank(path, bank: ClassBank) -> None:
    k, c = bank.embeds.shape
    lines = [f"{c} {k}"]
    for name, vec in zip(bank.names, bank.embeds):
        lines.append(name + " " + " ".join(f"{v:.9g}" for v in vec))
    Path(path).write_text("\n".join(lines) + "\n")


def read_bank(path) -> ClassBank:
    lines = [l for l in Path(path).read_text().splitlines() if l.strip()]
    try:
        c, k = (int(t) for t in lines[0].split())
    except (ValueError, IndexError):
        raise FormatError(f"{path}: bad bank header, expected 'C K'") from None
    if len(lines) - 1 != k:
        raise FormatError(f"{path}: header says {k} classes, found {len(lines) - 1}")
    names, vecs = [], []
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if len(parts) != c + 1:
            raise FormatError(f"{path}:{i}: expected name and {c} values")
        names.append(parts[0])
        vecs.append([float(v) for v in parts[1:]])
    return ClassBank(names, np.array(vecs))


# ---------------------------------------------------------------- regions


@dataclass
class AnnotatedRegion:
    image_id: int
    box: RegionBox
    class_id: int


def read_regions(path) -> list[AnnotatedRegion]:
    out = []
    for i, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 6:
            raise FormatError(f"{path}:{i}: expected 'image_id x0 y0 x1 y1 class_id'")
        try:
            box = RegionBox(*(float(p) for p in parts[1:5]))
            out.append(AnnotatedRegion(int(parts[0]), box, int(parts[5])))
        except ValueError as e:
            raise FormatError(f"{path}:{i}: {e}") from None
    return out


def write_regions(path, regions) -> None:
    lines = [
        f"{r.image_id} {r.box.x0:.9g} {r.box.y0:.9g} {r.box.x1:.9g} {r.box.y1:.9g} {r.class_id}"
        for r in regions
    ]
    Path(path).write_text("".join(l + "\n" for l in lines))


# ---------------------------------------------------------------- run config


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_triple(s: str) -> tuple:
    vals = tuple(float(t) for t in s.replace(",", " ").split())
    if len(vals) != 3:
        raise ValueError("expected three values")
    return vals


@dataclass(frozen=True)
class RunConfig:
    """Flat key/value run configuration (``key = value`` per line, ``#`` comments)."""

    # student / teacher encoder
    student_res: int = 64
    student_patch: int = 16
    depth: int = 4
    heads: int = 4
    dim: int = 32
    vl_dim: int = 16
    has_vl_proj: bool = True
    student_mean: tuple = CLIP_MEAN
    student_std: tuple = CLIP_STD
    # VFM
    vfm_res: int = 32
    vfm_patch: int = 8
    vfm_depth: int = 2
    vfm_heads: int = 4
    vfm_dim: int = 32
    vfm_mean: tuple = IMAGENET_MEAN
    vfm_std: tuple = IMAGENET_STD
    # distillation
    lam: float = 0.25
    context_type: str = "q"
    finetune_layers: int = 4
    grid_lo: int = 1
    grid_hi: int = 6
    teacher_crop_px: int = 64
    lr: float = 1e-5
    weight_decay: float = 0.1
    epochs: int = 6
    batch: int = 2
    seed: int = 0
    max_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    context_norm: str = "pairs"
    train_vl_proj: bool = True
    mode: str = "decoupled"
    roi_bins: int = 1
    roi_samples: int = 2
    log_every: int = 1
    # evaluation
    window: int = 64
    stride: int = 32
    resize_short: int = 0
    proxy_fraction: float = 0.02
    ignore_index: int = 255

    def __post_init__(self):
        ContextType.parse(self.context_type)
        if self.student_res // self.student_patch != self.vfm_res // self.vfm_patch:
            raise ValueError(
                "token-count mismatch: student_res/student_patch must equal vfm_res/vfm_patch"
            )

    def student_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.student_res, patch_size=self.student_patch, depth=self.depth,
            heads=self.heads, dim=self.dim, vl_dim=self.vl_dim, has_vl_proj=self.has_vl_proj,
            mean=self.student_mean, std=self.student_std,
        )

    def vfm_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.vfm_res, patch_size=self.vfm_patch, depth=self.vfm_depth,
            heads=self.vfm_heads, dim=self.vfm_dim, has_vl_proj=False,
            mean=self.vfm_mean, std=self.vfm_std,
        )

    def distill_config(self) -> DistillConfig:
        names = {f.name for f in fields(DistillConfig)}
        kw = {k: getattr(self, k) for k in names if hasattr(self, k)}
        return DistillConfig(**kw)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)


_ALIASES = {"lambda": "lam"}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; unknown keys are rejected with line numbers."""
    known = {f.name: f for f in fields(RunConfig)}
    defaults = RunConfig()
    values = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{i}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key not in known:
            raise FormatError(f"{source}:{i}: unknown key {key!r}")
        kind = type(getattr(defaults, key))
        try:
            if kind is bool:
                values[key] = _parse_bool(val)
            elif kind is tuple:
                values[key] = _parse_triple(val)
            elif kind is int:
                values[key] = int(val)
            elif kind is float:
                values[key] = float(val)
            else:
                values[key] = val
        except ValueError as e:
            raise FormatError(f"{source}:{i}: bad value for {key!r}: {e}") from None
    try:
        return RunConfig(**values)
    except ValueError as e:
        raise FormatError(f"{source}: {e}") from None


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(), str(path))


def dump_config(cfg: RunConfig) -> str:
    out = []
    for f in fields(RunConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = " ".join(f"{x:.9g}" for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        key = "lambda" if f.name == "lam" else f.name
        out.append(f"{key} = {v}")
    return "\n".join(out) + "\n"
