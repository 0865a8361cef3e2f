"""Autoregressive generation, completion, super-resolution, and the
sequential likelihood oracle.

Generation is the naive reference path: one full decoder evaluation per
generated position (or per pixel in mixture mode), sampling the next
value at the configured temperature and revealing it to later steps.
Causality makes the content of not-yet-generated slots irrelevant, and
the sequential per-position log-probabilities are bit-identical to the
teacher-forced ones, which sequential_nll exploits as a correctness
oracle.  Per-position log-probabilities are computed in float64 from the
float32 model outputs and summed in float64; the float32 scalar produced
by the training graph's own reduction differs from that sum by ordinary
summation rounding, so equivalence checks compare float64 sums on both
sides.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .heads import DmolParams, categorical_sample, dmol_sample
from .imagerep import Image, scale_intensities
from .model import ImageTransformer, encode, forward_outputs
from .rng import Rng

__all__ = [
    "SamplerConfig", "TUNED_TEMPERATURE_RANGE", "generate", "complete",
    "superres", "sequential_nll", "position_log_probs", "consistency",
]

# Sampling temperatures in this range give the best perceptual quality
# for trained models; 1.0 samples from the unmodified distribution.
TUNED_TEMPERATURE_RANGE = (0.8, 1.0)


@dataclass(frozen=True)
class SamplerConfig:
    """How to sample: temperature, rng seed, optional step cap."""

    temperature: float = 1.0
    seed: int = 0
    max_positions: int | None = None

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ValueError(
                f"temperature must be > 0, got {self.temperature}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.max_positions is not None and self.max_positions < 0:
            raise ValueError(
                f"max_positions must be >= 0, got {self.max_positions}")


# ---------------------------------------------------------------------------
# Shared plumbing


def _check_class(model: ImageTransformer, class_id) -> None:
    if (class_id is not None) != (model.config.n_classes is not None):
        raise ValueError("class id must be given exactly when the model "
                         "is class-conditional")


def _prepare_source(model: ImageTransformer, source) -> np.ndarray | None:
    """Encode the source exactly once; None for decoder-only models."""
    if model.config.mode == "encoder-decoder":
        if source is None:
            raise ValueError("encoder-decoder model needs a source image")
        return encode(model, source).data
    if source is not None:
        raise ValueError("decoder-only model takes no source image")
    return None


def _values_of(model: ImageTransformer, image: Image) -> np.ndarray:
    """Generation-granular contents: [n] intensities or [n_pix, 3] rows."""
    if model.config.distribution == "cat":
        return image.pixels.reshape(-1).astype(np.int64)
    return image.pixels.reshape(-1, 3).astype(np.int64)


def _image_of(model: ImageTransformer, values: np.ndarray) -> Image:
    config = model.config
    return Image(values.reshape(config.h, config.w, 3))


def _pixel_params(params: DmolParams, i: int) -> DmolParams:
    return DmolParams(
        mixture_logits=T.constant(params.mixture_logits.data[i:i + 1]),
        means=T.constant(params.means.data[i:i + 1]),
        log_scales=T.constant(params.log_scales.data[i:i + 1]),
        coeffs=T.constant(params.coeffs.data[i:i + 1]))


def _sample_steps(model: ImageTransformer, values: np.ndarray,
                  start_rank: int, cfg: SamplerConfig, class_id,
                  enc_out) -> None:
    """Fill values in generation order from start_rank on, in place."""
    order = model.plan.gen_order
    stop = len(order)
    if cfg.max_positions is not None:
        stop = min(stop, start_rank + cfg.max_positions)
    rng = Rng(cfg.seed)
    for r in range(start_rank, stop):
        outs = forward_outputs(model, _image_of(model, values),
                               class_id=class_id, enc_out=enc_out)
        pos = order[r]
        if model.config.distribution == "cat":
            values[pos] = categorical_sample(outs.data[pos], cfg.temperature,
                                             rng)
        else:
            values[pos] = dmol_sample(_pixel_params(outs, pos),
                                      cfg.temperature, rng)


# ---------------------------------------------------------------------------
# Generation entry points


def generate(model: ImageTransformer, cfg: SamplerConfig,
             class_id: int | None = None,
             source: Image | None = None) -> Image:
    """Sample a complete image position by position in generation order."""
    _check_class(model, class_id)
    enc_out = _prepare_source(model, source)
    config = model.config
    shape = ((config.h * config.w, 3) if config.distribution == "dmol"
             else (config.seq_len,))
    values = np.zeros(shape, dtype=np.int64)
    _sample_steps(model, values, 0, cfg, class_id, enc_out)
    return _image_of(model, values)


def complete(model: ImageTransformer, partial: Image, known_ranks: int,
             cfg: SamplerConfig, class_id: int | None = None,
             source: Image | None = None) -> Image:
    """Keep the first known_ranks generation steps of partial, sample the
    rest.  The content of the unknown region of partial is ignored."""
    _check_class(model, class_id)
    n_ranks = len(model.plan.gen_order)
    if not 0 <= known_ranks <= n_ranks:
        raise ValueError(
            f"known_ranks must be in [0, {n_ranks}], got {known_ranks}")
    if (partial.h, partial.w) != (model.config.h, model.config.w):
        raise ValueError(
            f"partial image is {partial.h}x{partial.w}, model expects "
            f"{model.config.h}x{model.config.w}")
    enc_out = _prepare_source(model, source)
    values = _values_of(model, partial)
    _sample_steps(model, values, known_ranks, cfg, class_id, enc_out)
    return _image_of(model, values)


def superres(model: ImageTransformer, low: Image, cfg: SamplerConfig,
             class_id: int | None = None) -> Image:
    """Decode a high-resolution image conditioned on the encoded low-res
    source (encoded exactly once)."""
    if model.config.mode != "encoder-decoder":
        raise ValueError("super-resolution needs an encoder-decoder model")
    return generate(model, cfg, class_id=class_id, source=low)


# ---------------------------------------------------------------------------
# Likelihood evaluation


def _lse(z: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    return np.squeeze(
        m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True)),
        axis=axis)


def _cat_log_probs(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """[n] float64 log-probabilities of intensity targets."""
    z = np.asarray(logits, dtype=np.float64)
    picked = z[np.arange(z.shape[0]), np.asarray(targets, dtype=np.int64)]
    return picked - _lse(z, axis=1)


def _dmol_log_probs(params: DmolParams, targets: np.ndarray) -> np.ndarray:
    """[n] float64 log-probabilities of whole [n, 3] rgb pixel rows."""
    logits = np.asarray(params.mixture_logits.data, dtype=np.float64)
    means = np.asarray(params.means.data, dtype=np.float64)
    log_scales = np.asarray(params.log_scales.data, dtype=np.float64)
    coeffs = np.asarray(params.coeffs.data, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    x = scale_intensities(targets)              # [n, 3]
    xb = x[:, None, :]                          # [n, 1, 3]

    mu = means.copy()
    mu[:, :, 1] += coeffs[:, :, 0] * xb[:, :, 0]
    mu[:, :, 2] += coeffs[:, :, 1] * xb[:, :, 0] + coeffs[:, :, 2] * xb[:, :, 1]

    inv_scale = np.exp(-log_scales)
    half = 1.0 / 255.0
    plus_in = (xb - mu + half) * inv_scale
    minus_in = (xb - mu - half) * inv_scale
    log_cdf_plus = -np.logaddexp(0.0, -plus_in)
    log_one_minus_cdf_minus = -np.logaddexp(0.0, minus_in)
    interior = (log_cdf_plus + log_one_minus_cdf_minus
                + np.log(-np.expm1(-2.0 * half * inv_scale)))
    tb = np.broadcast_to(targets[:, None, :], interior.shape)
    per_channel = np.where(tb == 0, log_cdf_plus,
                           np.where(tb == 255, log_one_minus_cdf_minus,
                                    interior))
    joint = per_channel.sum(axis=2)             # [n, K]
    log_weights = logits - _lse(logits, axis=1)[:, None]
    return _lse(log_weights + joint, axis=1)


def position_log_probs(model: ImageTransformer, image: Image,
                       class_id: int | None = None,
                       source: Image | None = None) -> np.ndarray:
    """Teacher-forced per-position log-probabilities, float64, from one
    forward pass; position order, one entry per generated unit."""
    outs = forward_outputs(model, image, class_id=class_id, source=source)
    targets = _values_of(model, image)
    if model.config.distribution == "cat":
        return _cat_log_probs(outs.data, targets)
    return _dmol_log_probs(outs, targets)


def sequential_nll(model: ImageTransformer, image: Image,
                   class_id: int | None = None,
                   source: Image | None = None) -> float:
    """Total NLL in nats by stepwise decoding: at each generation step
    score the true next value given only previously revealed ones."""
    _check_class(model, class_id)
    if (image.h, image.w) != (model.config.h, model.config.w):
        raise ValueError(
            f"image is {image.h}x{image.w}, model expects "
            f"{model.config.h}x{model.config.w}")
    enc_out = _prepare_source(model, source)
    targets = _values_of(model, image)
    values = np.zeros_like(targets)
    total = 0.0
    for pos in model.plan.gen_order:
        outs = forward_outputs(model, _image_of(model, values),
                               class_id=class_id, enc_out=enc_out)
        if model.config.distribution == "cat":
            total += _cat_log_probs(outs.data[pos:pos + 1],
                                    targets[pos:pos + 1])[0]
        else:
            total += _dmol_log_probs(_pixel_params(outs, pos),
                                     targets[pos:pos + 1])[0]
        values[pos] = targets[pos]
    return -total


# ---------------------------------------------------------------------------
# Super-resolution consistency metric


def consistency(low: Image, sample: Image) -> float:
    """Mean squared distance in [0, 1] intensity space between low and
    the 4x4 box-filtered (area) downsample of sample."""
    if (sample.h, sample.w) != (4 * low.h, 4 * low.w):
        raise ValueError(
            f"sample {sample.h}x{sample.w} is not a 4x upscale of "
            f"low {low.h}x{low.w}")
    s = sample.pixels.astype(np.float64) / 255.0
    down = s.reshape(low.h, 4, low.w, 4, 3).mean(axis=(1, 3))
    l0 = low.pixels.astype(np.float64) / 255.0
    return float(np.mean((down - l0) ** 2))
