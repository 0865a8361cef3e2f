"""File formats: PPM/PGM images, packed datasets, bit-exact checkpoints,
and `key = value` configuration text.

Every binary format is little-endian with fixed-width fields, so files
written on one platform parse identically on any other.  Checkpoints
embed the model configuration as UTF-8 text in the same syntax as config
files, which means a checkpoint alone is enough to rebuild its model.
"""
from __future__ import annotations

import dataclasses
import os
import struct
from typing import Sequence

import numpy as np

from .blocks import Scheme
from .imagerep import Image
from .model import ModelConfig, preset_config

__all__ = [
    "FileFormatError", "ConfigError",
    "read_ppm", "write_ppm", "read_pgm", "write_pgm",
    "write_dataset", "load_dataset", "pack_dataset", "box_downsample",
    "save_checkpoint", "load_checkpoint",
    "parse_config", "parse_model_config", "model_config_to_text",
]


class FileFormatError(ValueError):
    """A file does not conform to its declared format."""


class ConfigError(FileFormatError):
    """A configuration file is malformed or names unknown keys."""


# ---------------------------------------------------------------------------
# Portable pixmaps / graymaps


def _read_netpbm(path: str | os.PathLike, magic: bytes,
                 channels: int) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(data):
            c = data[pos:pos + 1]
            if c == b"#":					# comment to end of line
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            elif c.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FileFormatError(f"{path}: truncated header")
        return data[start:pos]

    kind = token()
    if kind != magic:
        raise FileFormatError(
            f"{path}: unsupported format {kind!r}, expected {magic.decode()}")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError:
        raise FileFormatError(f"{path}: non-numeric header field") from None
    if w < 1 or h < 1:
        raise FileFormatError(f"{path}: bad dimensions {w}x{h}")
    if maxval != 255:
        raise FileFormatError(f"{path}: maxval must be 255, got {maxval}")
    pos += 1						# single whitespace after maxval
    payload = data[pos:]
    expected = h * w * channels
    if len(payload) != expected:
        raise FileFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}")
    shape = (h, w, channels) if channels > 1 else (h, w)
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()


def read_ppm(path: str | os.PathLike) -> Image:
    """Read a binary (P6) portable pixmap with maxval 255."""
    return Image(_read_netpbm(path, b"P6", 3))


def write_ppm(path: str | os.PathLike, image: Image) -> None:
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.w} {image.h}\n255\n".encode("ascii"))
        fh.write(image.pixels.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary (P5) graymap with maxval 255; returns [h, w] uint8."""
    return _read_netpbm(path, b"P5", 1)


def write_pgm(path: str | os.PathLike, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise ValueError(f"graymap must be 2-d, got shape {gray.shape}")
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


# ---------------------------------------------------------------------------
# Packed datasets

_DATASET_MAGIC = b"IMDS"
_DATASET_VERSION = 1
_DATASET_HEADER = struct.Struct("<4sIIHH")      # magic, version, count, h, w


def write_dataset(path: str | os.PathLike, images: Sequence[Image]) -> None:
    if len(images) == 0:
        raise ValueError("dataset must contain at least one image")
    h, w = images[0].h, images[0].w
    for i, img in enumerate(images):
        if (img.h, img.w) != (h, w):
            raise ValueError(
                f"image {i} is {img.h}x{img.w}, expected {h}x{w}")
    if h >= 1 << 16 or w >= 1 << 16 or len(images) >= 1 << 32:
        raise ValueError("dataset dimensions exceed the format's limits")
    with open(path, "wb") as fh:
        fh.write(_DATASET_HEADER.pack(_DATASET_MAGIC, _DATASET_VERSION,
                                      len(images), h, w))
        for img in images:
            fh.write(img.pixels.tobytes())


def load_dataset(path: str | os.PathLike) -> list[Image]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _DATASET_HEADER.size:
        raise FileFormatError(f"{path}: truncated dataset header")
    magic, version, count, h, w = _DATASET_HEADER.unpack_from(data)
    if magic != _DATASET_MAGIC:
        raise FileFormatError(f"{path}: bad magic {magic!r}")
    if version != _DATASET_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    expected = _DATASET_HEADER.size + count * h * w * 3
    if len(data) != expected:
        raise FileFormatError(
            f"{path}: file is {len(data)} bytes, expected {expected}")
    pixels = np.frombuffer(data, dtype=np.uint8, offset=_DATASET_HEADER.size)
    pixels = pixels.reshape(count, h, w, 3)
    return [Image(pixels[i].copy()) for i in range(count)]


def pack_dataset(directory: str | os.PathLike) -> list[Image]:
    """Read every .ppm in a directory, lexicographic by filename."""
    names = sorted(n for n in os.listdir(directory)
                   if n.lower().endswith(".ppm"))
    if not names:
        raise FileFormatError(f"{directory}: no .ppm files")
    images = [read_ppm(os.path.join(directory, n)) for n in names]
    h, w = images[0].h, images[0].w
    for name, img in zip(names, images):
        if (img.h, img.w) != (h, w):
            raise FileFormatError(
                f"{name}: is {img.h}x{img.w}, expected {h}x{w}")
    return images


def box_downsample(image: Image, factor: int) -> Image:
    """Area (box-filter) downsample; each output intensity is the mean of
    a factor x factor cell, rounded half away from zero."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if image.h % factor or image.w % factor:
        raise ValueError(
            f"image {image.h}x{image.w} is not divisible by {factor}")
    cells = image.pixels.astype(np.float64).reshape(
        image.h // factor, factor, image.w // factor, factor, 3)
    means = cells.mean(axis=(1, 3))
    return Image(np.floor(means + 0.5).astype(np.uint8))


# ---------------------------------------------------------------------------
# Configuration text

_SCHEME_KEYS = {
    "local1d": ("l_q", "l_m"),
    "local2d": ("h_q", "w_q", "h_m", "w_m"),
    "full": (),
}
_MODEL_INT_KEYS = ("layers", "d", "heads", "d_ff", "h", "w",
                   "encoder_layers", "mixtures", "h_s", "w_s")
_MODEL_STR_KEYS = ("mode", "distribution", "coord_encoding")
_TRAIN_INT_KEYS = ("steps", "batch_size", "warmup", "eval_interval", "seed")
_TRAIN_FLOAT_KEYS = ("beta1", "beta2", "eps")
_ALL_KEYS = (set(_MODEL_INT_KEYS) | set(_MODEL_STR_KEYS)
             | {"preset", "scheme", "dropout", "n_classes"}
             | {k for keys in _SCHEME_KEYS.values() for k in keys}
             | set(_TRAIN_INT_KEYS) | set(_TRAIN_FLOAT_KEYS) | {"clip_norm"})


def _parse_entries(text: str) -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, "
                              f"got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {lineno}: empty key or value")
        if key in entries:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key not in _ALL_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        entries[key] = value
    return entries


def _typed(entries: dict[str, str], key: str, kind: str):
    value = entries[key]
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise ConfigError(f"key {key!r}: expected {kind}, got {value!r}") \
            from None
    return value


def _model_config_from(entries: dict[str, str]) -> ModelConfig:
    fields: dict = {}
    if "preset" in entries:
        try:
            preset = preset_config(entries["preset"])
        except ValueError as e:
            raise ConfigError(str(e)) from None
        fields = {f.name: getattr(preset, f.name)
                  for f in dataclasses.fields(ModelConfig)}
    for key in _MODEL_INT_KEYS:
        if key in entries:
            fields[key] = _typed(entries, key, "int")
    for key in _MODEL_STR_KEYS:
        if key in entries:
            fields[key] = entries[key]
    if "dropout" in entries:
        fields["dropout"] = _typed(entries, "dropout", "float")
    if "n_classes" in entries:
        fields["n_classes"] = (None if entries["n_classes"] == "none"
                               else _typed(entries, "n_classes", "int"))

    scheme_params = {k: _typed(entries, k, "int")
                     for keys in _SCHEME_KEYS.values() for k in keys
                     if k in entries}

    def check_variant(variant):
        wrong = sorted(k for k in scheme_params
                       if k not in _SCHEME_KEYS[variant])
        if wrong:
            raise ConfigError(
                f"scheme {variant!r} does not take {', '.join(wrong)}")

    if "scheme" in entries:
        variant = entries["scheme"]
        if variant not in _SCHEME_KEYS:
            raise ConfigError(f"unknown scheme {variant!r}")
        check_variant(variant)
        try:
            fields["scheme"] = Scheme(variant, **scheme_params)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    elif scheme_params:
        if "scheme" not in fields:
            raise ConfigError(
                "scheme parameters need a `scheme = ...` (or preset) line")
        check_variant(fields["scheme"].variant)
        try:
            fields["scheme"] = dataclasses.replace(fields["scheme"],
                                                   **scheme_params)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    if "scheme" not in fields:
        raise ConfigError("config is missing `scheme = ...`")
    try:
        return ModelConfig(**fields)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def _train_fields_from(entries: dict[str, str]) -> dict:
    fields: dict = {}
    for key in _TRAIN_INT_KEYS:
        if key in entries:
            fields[key] = _typed(entries, key, "int")
    for key in _TRAIN_FLOAT_KEYS:
        if key in entries:
            fields[key] = _typed(entries, key, "float")
    if "clip_norm" in entries:
        fields["clip_norm"] = (None if entries["clip_norm"] == "none"
                               else _typed(entries, "clip_norm", "float"))
    return fields


def parse_config(text: str) -> tuple[ModelConfig, dict]:
    """Parse config text into a model config plus a dict of any training
    fields present (TrainConfig kwargs, without defaults applied)."""
    entries = _parse_entries(text)
    return _model_config_from(entries), _train_fields_from(entries)


def parse_model_config(text: str) -> ModelConfig:
    """Parse config text that must describe only a model (checkpoints)."""
    entries = _parse_entries(text)
    train_keys = [k for k in entries
                  if k in set(_TRAIN_INT_KEYS) | set(_TRAIN_FLOAT_KEYS)
                  | {"clip_norm"}]
    if train_keys:
        raise ConfigError(f"unexpected training keys: {train_keys}")
    return _model_config_from(entries)


def model_config_to_text(config: ModelConfig) -> str:
    """Serialize every model field as `key = value` lines."""
    lines = [
        f"mode = {config.mode}",
        f"layers = {config.layers}",
        f"encoder_layers = {config.encoder_layers}",
        f"d = {config.d}",
        f"heads = {config.heads}",
        f"d_ff = {config.d_ff}",
        f"dropout = {config.dropout!r}",
        f"distribution = {config.distribution}",
        f"mixtures = {config.mixtures}",
        f"coord_encoding = {config.coord_encoding}",
        f"n_classes = {'none' if config.n_classes is None else config.n_classes}",
        f"h = {config.h}",
        f"w = {config.w}",
        f"h_s = {config.h_s}",
        f"w_s = {config.w_s}",
        f"scheme = {config.scheme.variant}",
    ]
    for key in _SCHEME_KEYS[config.scheme.variant]:
        lines.append(f"{key} = {getattr(config.scheme, key)}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Checkpoints

_CKPT_MAGIC = b"IMGT"
_CKPT_VERSION = 1


def save_checkpoint(path: str | os.PathLike, config: ModelConfig,
                    params: dict[str, np.ndarray]) -> None:
    config_bytes = model_config_to_text(config).encode("utf-8")
    out = bytearray()
    out += _CKPT_MAGIC
    out += struct.pack("<I", _CKPT_VERSION)
    out += struct.pack("<I", len(config_bytes))
    out += config_bytes
    out += struct.pack("<I", len(params))
    for name, value in params.items():
        name_bytes = name.encode("utf-8")
        arr = np.ascontiguousarray(value, dtype="<f4")
        out += struct.pack("<I", len(name_bytes))
        out += name_bytes
        out += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<Q", dim)
        out += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(out)


class _Cursor:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FileFormatError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_checkpoint(path: str | os.PathLike) \
        -> tuple[ModelConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()
    cur = _Cursor(data, path)
    if cur.take(4) != _CKPT_MAGIC:
        raise FileFormatError(f"{path}: not a checkpoint file")
    version = cur.u32()
    if version != _CKPT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    config_text = cur.take(cur.u32()).decode("utf-8")
    config = parse_model_config(config_text)
    params: dict[str, np.ndarray] = {}
    for _ in range(cur.u32()):
        name = cur.take(cur.u32()).decode("utf-8")
        rank = cur.u32()
        shape = tuple(cur.u64() for _ in range(rank))
        n_values = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = cur.take(4 * n_values)
        params[name] = (np.frombuffer(raw, dtype="<f4").reshape(shape)
                        .astype(np.float32))
    if cur.pos != len(data):
        raise FileFormatError(f"{path}: trailing bytes after last tensor")
    return config, params
