"""Image <-> sequence conversion, input embeddings, coordinate encodings.

An image is stored row-major with channel-minor RGB.  The flattened
sequence enumerates positions in raster-scan order: all three channels of
pixel (0,0), then pixel (0,1), and so on.  Categorical embeddings look
intensities up in 256-entry tables; the ordinal variant linearly combines
the three scaled channels of each pixel into one vector (a 1x3 convolution
with stride 3, so pixels never mix).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "Image", "EmbeddingTables", "flatten_raster", "unflatten_raster",
    "position_coords", "embed_categorical", "embed_categorical_flat",
    "embed_ordinal", "embed_ordinal_flat", "scale_intensities",
    "sinusoid_encoding", "coordinate_encoding", "add_class_embedding",
]

NUM_INTENSITIES = 256


@dataclass(frozen=True)
class Image:
    """RGB image with integer intensities in [0, 255]."""

    pixels: np.ndarray  # [h, w, 3] uint8

    def __post_init__(self):
        arr = np.asarray(self.pixels)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ValueError(f"image must have shape [h, w, 3], got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"image dims must be >= 1, got {arr.shape[:2]}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"intensities must be integers, got dtype {arr.dtype}")
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError(
                f"intensities must lie in [0, 255], got range "
                f"[{arr.min()}, {arr.max()}]")
        object.__setattr__(self, "pixels", arr.astype(np.uint8))

    @property
    def h(self) -> int:
        return self.pixels.shape[0]

    @property
    def w(self) -> int:
        return self.pixels.shape[1]

    @property
    def num_positions(self) -> int:
        return self.h * self.w * 3

    def __eq__(self, other) -> bool:
        return isinstance(other, Image) and np.array_equal(self.pixels, other.pixels)


def flatten_raster(img: Image) -> np.ndarray:
    """[n, 4] rows of (intensity, row, col, channel) in raster-scan order."""
    h, w = img.h, img.w
    rows, cols, chans = position_coords(h, w, 3)
    out = np.empty((h * w * 3, 4), dtype=np.int64)
    out[:, 0] = img.pixels.reshape(-1)
    out[:, 1] = rows
    out[:, 2] = cols
    out[:, 3] = chans
    return out


def unflatten_raster(seq: np.ndarray, h: int, w: int) -> Image:
    """Inverse of flatten_raster; accepts the [n, 4] rows or a flat [n]
    intensity vector."""
    seq = np.asarray(seq)
    intensities = seq[:, 0] if seq.ndim == 2 else seq
    if intensities.size != h * w * 3:
        raise ValueError(
            f"expected {h * w * 3} intensities for {h}x{w}, got {intensities.size}")
    return Image(intensities.reshape(h, w, 3).astype(np.int64))


def position_coords(h: int, w: int, channels: int = 3):
    """Per-position (row, col, channel) arrays for the raster layout."""
    n = h * w * channels
    idx = np.arange(n)
    rows = idx // (w * channels)
    rem = idx % (w * channels)
    cols = rem // channels
    chans = rem % channels
    return rows, cols, chans


@dataclass
class EmbeddingTables:
    """Intensity lookup tables.

    Encoder/source positions use a table per channel; decoder inputs of
    previously generated intensities share one separate table.
    """

    channel: tuple[Tensor, Tensor, Tensor] | None = None
    shared: Tensor | None = None
    class_table: Tensor | None = None

    def dim(self) -> int:
        for t in (self.shared, *(self.channel or ())):
            if t is not None:
                return t.shape[-1]
        raise ValueError("no tables present")


def embed_categorical_flat(intensities: np.ndarray, channels_of: np.ndarray,
                           tables: EmbeddingTables, role: str) -> Tensor:
    """[n, d] intensity embeddings; role picks the table set."""
    ids = np.asarray(intensities, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= NUM_INTENSITIES):
        raise IndexError(
            f"intensity out of range [0, 256): min {ids.min()}, max {ids.max()}")
    if role == "source":
        if tables.channel is None:
            raise ValueError("source role needs per-channel tables")
        stacked = T.concat(list(tables.channel), axis=0)
        flat_ids = np.asarray(channels_of, dtype=np.int64) * NUM_INTENSITIES + ids
        return T.gather_rows(stacked, flat_ids)
    if role == "decoder-input":
        if tables.shared is None:
            raise ValueError("decoder-input role needs the shared table")
        return T.embedding_gather(tables.shared, ids)
    raise ValueError(f"unknown embedding role {role!r}")


def embed_categorical(seq: np.ndarray, tables: EmbeddingTables, role: str,
                      h: int, w: int) -> Tensor:
    """Embeddings shaped [h, w*3, d] for a flattened raster sequence."""
    seq = np.asarray(seq)
    flat = embed_categorical_flat(seq[:, 0], seq[:, 3], tables, role)
    return T.reshape(flat, (h, w * 3, flat.shape[-1]))


def scale_intensities(values: np.ndarray) -> np.ndarray:
    """Map integer intensities [0, 255] to reals in [-1, 1]."""
    return np.asarray(values, dtype=np.float64) / 127.5 - 1.0


def embed_ordinal_flat(pixel_values: np.ndarray, conv_weights: Tensor,
                       conv_bias: Tensor) -> Tensor:
    """[n_pix, d] from integer pixel rows [n_pix, 3]; channels are scaled to
    [-1, 1] and linearly combined, one pixel at a time."""
    px = np.asarray(pixel_values)
    if px.ndim != 2 or px.shape[1] != 3:
        raise ValueError(f"pixel values must be [n, 3], got {px.shape}")
    scaled = scale_intensities(px).astype(T.default_dtype())
    out = T.matmul(T.constant(scaled), conv_weights)
    return T.add(out, conv_bias)


def embed_ordinal(img: Image, conv_weights: Tensor, conv_bias: Tensor) -> Tensor:
    """Per-pixel embeddings shaped [h, w, d]."""
    flat = embed_ordinal_flat(img.pixels.reshape(-1, 3), conv_weights, conv_bias)
    return T.reshape(flat, (img.h, img.w, flat.shape[-1]))


def sinusoid_encoding(h: int, w: int, d: int, channels: int = 3) -> np.ndarray:
    """[n, d] sine/cosine coordinate encoding.

    The first d/2 dims encode the row index, the last d/2 the combined
    column-channel index col*channels + channel, each half as interleaved
    sin/cos pairs: PE(pos, 2i) = sin(pos / 10000^(2i/(d/2))) and the
    matching cos at 2i+1.
    """
    if d % 4 != 0:
        raise ValueError(f"sinusoidal encoding needs d divisible by 4, got {d}")
    rows, cols, chans = position_coords(h, w, channels)
    half = d // 2
    out = np.empty((h * w * channels, d), dtype=np.float64)
    for offset, pos in ((0, rows), (half, cols * channels + chans)):
        for i in range(half // 2):
            freq = 1.0 / (10000.0 ** (2.0 * i / half))
            out[:, offset + 2 * i] = np.sin(pos * freq)
            out[:, offset + 2 * i + 1] = np.cos(pos * freq)
    return out.astype(T.default_dtype())


def coordinate_encoding(kind: str, h: int, w: int, d: int, channels: int = 3,
                        table: Tensor | None = None):
    """Positional information added at the first layer only.

    sinusoidal: computed array, [-1, 1] valued.  learned: the parameter
    table itself, one row per position, so gradients reach it.
    """
    n = h * w * channels
    if kind == "sinusoidal":
        return T.constant(sinusoid_encoding(h, w, d, channels))
    if kind == "learned":
        if d % 2 != 0:
            raise ValueError(f"learned encoding needs even d, got {d}")
        if table is None:
            raise ValueError("learned encoding needs its parameter table")
        if table.shape != (n, d):
            raise ValueError(
                f"learned table shape {table.shape} != ({n}, {d})")
        return table
    raise ValueError(f"unknown coordinate encoding kind {kind!r}")


def add_class_embedding(x: Tensor, class_id: int, class_table: Tensor) -> Tensor:
    """Add one class vector to every position of x [n, d]."""
    n_classes = class_table.shape[0]
    if not 0 <= class_id < n_classes:
        raise IndexError(f"class id {class_id} out of range [0, {n_classes})")
    row = T.embedding_gather(class_table, [class_id])
    return T.add(x, row)
