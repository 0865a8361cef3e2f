"""Output heads: categorical softmax over 256 intensities and a
discretized mixture of logistics (DMOL) over whole pixels.

The categorical head scores one intensity per pixel-channel position.
The DMOL head scores one full (r, g, b) pixel per position: a mixture of
K components, each an interval-censored logistic per channel in the
[-1, 1] intensity scale with linear dependence of g on r and of b on r
and g.  Bins have half-width 1/255; the outermost bins absorb the tails.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .layers import glorot_uniform, take_param
from .tensor import (
    GradRecord,
    Tensor,
    add,
    clamp_min,
    concat,
    exp,
    log,
    logsumexp,
    matmul,
    mul,
    reduce_sum,
    reshape,
    scale,
    softplus,
    sub,
    tanh,
    where,
)

__all__ = [
    "CategoricalHead",
    "DmolHead",
    "DmolParams",
    "LOG_SCALE_FLOOR",
    "init_categorical_head",
    "init_dmol_head",
    "categorical_logits",
    "categorical_nll",
    "categorical_sample",
    "dmol_params",
    "dmol_channel_log_probs",
    "dmol_nll",
    "dmol_sample",
    "bits_per_dim",
    "scale_to_unit",
]

NUM_LEVELS = 256
BIN_HALF_WIDTH = 1.0 / 255.0
LOG_SCALE_FLOOR = -7.0


def scale_to_unit(intensities) -> np.ndarray:
    """Map integer intensities 0..255 to the [-1, 1] scale."""
    return np.asarray(intensities, dtype=np.float64) / 127.5 - 1.0


def _check_intensities(values, what: str) -> np.ndarray:
    arr = np.asarray(values)
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{what} must be integers, got dtype {arr.dtype}")
    if arr.size and (arr.min() < 0 or arr.max() >= NUM_LEVELS):
        raise ValueError(f"{what} must lie in [0, 255]")
    return arr


# ---------------------------------------------------------------------------
# Categorical head


@dataclass(frozen=True)
class CategoricalHead:
    """Linear projection(s) from width d to 256 intensity logits.

    One shared projection by default; with per_channel=True each of the
    three color channels gets its own projection and positions are
    routed by their channel (position index mod 3 in raster order).
    """

    weights: tuple[Tensor, ...]
    biases: tuple[Tensor, ...]

    def __post_init__(self):
        if len(self.weights) not in (1, 3) or len(self.weights) != len(
                self.biases):
            raise ValueError("head needs 1 shared or 3 per-channel projections")
        d = self.weights[0].shape[0]
        for w, b in zip(self.weights, self.biases):
            if w.shape != (d, NUM_LEVELS) or b.shape != (NUM_LEVELS,):
                raise ValueError(
                    f"projection must be ({d}, {NUM_LEVELS}) with "
                    f"({NUM_LEVELS},) bias, got {w.shape} and {b.shape}")

    @property
    def per_channel(self) -> bool:
        return len(self.weights) == 3

    @property
    def width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def per_pixel_output_dims(self) -> int:
        return 3 * NUM_LEVELS


def init_categorical_head(record: GradRecord, prefix: str, d: int, rng: Rng,
                          per_channel: bool = False,
                          values=None) -> CategoricalHead:
    n = 3 if per_channel else 1
    weights = tuple(
        take_param(record, values, f"{prefix}.w{i}",
                   lambda: glorot_uniform(rng, d, NUM_LEVELS, (d, NUM_LEVELS)))
        for i in range(n))
    biases = tuple(
        take_param(record, values, f"{prefix}.b{i}",
                   lambda: np.zeros(NUM_LEVELS))
        for i in range(n))
    return CategoricalHead(weights=weights, biases=biases)


def categorical_logits(reprs: Tensor, head: CategoricalHead) -> Tensor:
    """Per-position intensity logits, [n, 256]."""
    if not head.per_channel:
        return add(matmul(reprs, head.weights[0]), head.biases[0])
    n = reprs.shape[0]
    channel = np.arange(n) % 3
    per = [add(matmul(reprs, head.weights[c]), head.biases[c])
           for c in range(3)]
    sel0 = (channel == 0)[:, None]
    sel1 = (channel == 1)[:, None]
    return where(sel0, per[0], where(sel1, per[1], per[2]))


def categorical_nll(reprs: Tensor, targets, head: CategoricalHead
                    ) -> tuple[Tensor, Tensor]:
    """Total negative log-likelihood in nats, plus the logits."""
    targets = _check_intensities(targets, "targets")
    logits = categorical_logits(reprs, head)
    n = logits.shape[0]
    if targets.shape != (n,):
        raise ValueError(
            f"targets must be ({n},), got {targets.shape}")
    onehot = np.zeros((n, NUM_LEVELS), dtype=logits.data.dtype)
    onehot[np.arange(n), targets] = 1.0
    picked = reduce_sum(mul(logits, onehot))
    total = sub(reduce_sum(logsumexp(logits, axis=-1)), picked)
    return total, logits


def _softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def _draw_categorical(probs: np.ndarray, rng: Rng) -> int:
    u = float(rng.uniform(()))
    idx = int(np.searchsorted(np.cumsum(probs), u, side="right"))
    return min(idx, probs.size - 1)


def categorical_sample(logits, temperature: float, rng: Rng) -> int:
    """Draw one intensity from softmax(logits / temperature)."""
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if z.shape != (NUM_LEVELS,):
        raise ValueError(f"logits must have {NUM_LEVELS} entries")
    return _draw_categorical(_softmax_probs(z / temperature), rng)


# ---------------------------------------------------------------------------
# DMOL head


@dataclass(frozen=True)
class DmolHead:
    """Per-pixel projection to 10*K mixture parameters: K mixture
    logits, K*3 means, K*3 log-scales, and K*3 channel coefficients."""

    mixtures: int
    w_logits: Tensor
    b_logits: Tensor
    w_means: Tensor
    b_means: Tensor
    w_log_scales: Tensor
    b_log_scales: Tensor
    w_coeffs: Tensor
    b_coeffs: Tensor

    def __post_init__(self):
        k = self.mixtures
        if k < 1:
            raise ValueError(f"mixtures must be >= 1, got {k}")
        d = self.w_logits.shape[0]
        expect = {"w_logits": (d, k), "b_logits": (k,),
                  "w_means": (d, 3 * k), "b_means": (3 * k,),
                  "w_log_scales": (d, 3 * k), "b_log_scales": (3 * k,),
                  "w_coeffs": (d, 3 * k), "b_coeffs": (3 * k,)}
        for name, shape in expect.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ValueError(f"{name} must be {shape}, got {got}")

    @property
    def width(self) -> int:
        return self.w_logits.shape[0]

    @property
    def per_pixel_output_dims(self) -> int:
        return 10 * self.mixtures


def init_dmol_head(record: GradRecord, prefix: str, d: int, mixtures: int,
                   rng: Rng, values=None) -> DmolHead:
    def w(name, cols):
        return take_param(record, values, f"{prefix}.{name}",
                          lambda: glorot_uniform(rng, d, cols, (d, cols)))

    def b(name, cols):
        return take_param(record, values, f"{prefix}.{name}",
                          lambda: np.zeros(cols))

    k = mixtures
    return DmolHead(
        mixtures=k,
        w_logits=w("w_logits", k), b_logits=b("b_logits", k),
        w_means=w("w_means", 3 * k), b_means=b("b_means", 3 * k),
        w_log_scales=w("w_log_scales", 3 * k),
        b_log_scales=b("b_log_scales", 3 * k),
        w_coeffs=w("w_coeffs", 3 * k), b_coeffs=b("b_coeffs", 3 * k),
    )


@dataclass(frozen=True)
class DmolParams:
    """Mixture parameters for n pixels: logits [n, K], means, log-scales
    and tanh-squashed coefficients [n, K, 3].

    As produced by dmol_params the log-scales are already clamped at
    LOG_SCALE_FLOOR; the container does not re-validate, so limit cases
    can be constructed directly in tests.
    """

    mixture_logits: Tensor
    means: Tensor
    log_scales: Tensor
    coeffs: Tensor

    @property
    def num_pixels(self) -> int:
        return self.mixture_logits.shape[0]

    @property
    def mixtures(self) -> int:
        return self.mixture_logits.shape[1]


def dmol_params(reprs: Tensor, head: DmolHead) -> DmolParams:
    """Apply the head: project, clamp log-scales, squash coefficients."""
    n = reprs.shape[0]
    k = head.mixtures

    def project(w, b):
        return add(matmul(reprs, w), b)

    return DmolParams(
        mixture_logits=project(head.w_logits, head.b_logits),
        means=reshape(project(head.w_means, head.b_means), (n, k, 3)),
        log_scales=clamp_min(
            reshape(project(head.w_log_scales, head.b_log_scales), (n, k, 3)),
            LOG_SCALE_FLOOR),
        coeffs=tanh(reshape(project(head.w_coeffs, head.b_coeffs), (n, k, 3))),
    )


def _conditional_means(params: DmolParams, x: np.ndarray) -> Tensor:
    """Means adjusted by the linear dependence on preceding channels.

    x is the constant [n, 3] target (or sampled-so-far) pixel in [-1, 1];
    coefficient 0 couples g to r, coefficients 1 and 2 couple b to r and g.
    """
    dtype = params.means.data.dtype
    basis = [np.zeros((3, 1), dtype=dtype) for _ in range(3)]
    for i in range(3):
        basis[i][i, 0] = 1.0
    c = [matmul(params.coeffs, basis[i]) for i in range(3)]  # each [n, K, 1]
    x_r = x[:, None, 0:1].astype(dtype)
    x_g = x[:, None, 1:2].astype(dtype)
    adjust = concat([
        scale(c[0], 0.0),
        mul(c[0], x_r),
        add(mul(c[1], x_r), mul(c[2], x_g)),
    ], axis=2)
    return add(params.means, adjust)


def _log_one_minus_exp_neg(z: Tensor) -> Tensor:
    """log(1 - exp(-z)) for z > 0, stable down to tiny z.

    Below the switch point the series log z - z/2 + z^2/24 is accurate to
    well under 1e-8 relative; above it the direct form loses nothing.
    """
    series = add(log(z), add(scale(z, -0.5), scale(mul(z, z), 1.0 / 24.0)))
    direct_arg = sub(np.array(1.0, dtype=z.data.dtype),
                     exp(scale(z, -1.0)))
    direct = log(clamp_min(direct_arg, 1e-30))
    return where(z.data < 1e-2, series, direct)


def dmol_channel_log_probs(params: DmolParams, targets) -> Tensor:
    """Log probability of each target channel under each mixture, [n, K, 3].

    Interval-censored logistic per bin, with open-ended edge bins at 0
    and 255.  The interior bin mass uses the identity
    cdf(b) - cdf(a) = cdf(b) * (1 - cdf(a)) * (1 - exp(a - b)), which
    stays exact in log space even when both endpoints sit far out in the
    same tail, so the 256 bin masses always sum to one.
    """
    targets = _check_intensities(targets, "targets")
    n = params.num_pixels
    if targets.shape != (n, 3):
        raise ValueError(f"targets must be ({n}, 3), got {targets.shape}")
    dtype = params.means.data.dtype
    x = scale_to_unit(targets)
    xb = x[:, None, :].astype(dtype)  # [n, 1, 3]

    mu = _conditional_means(params, x)
    inv_scale = exp(scale(params.log_scales, -1.0))
    diff = sub(xb, mu)
    plus_in = mul(add(diff, BIN_HALF_WIDTH), inv_scale)
    minus_in = mul(sub(diff, BIN_HALF_WIDTH), inv_scale)

    log_cdf_plus = scale(softplus(scale(plus_in, -1.0)), -1.0)
    log_one_minus_cdf_minus = scale(softplus(minus_in), -1.0)
    bin_width_z = scale(inv_scale, 2.0 * BIN_HALF_WIDTH)
    interior = add(add(log_cdf_plus, log_one_minus_cdf_minus),
                   _log_one_minus_exp_neg(bin_width_z))

    at_low_edge = (targets == 0)[:, None, :]
    at_high_edge = (targets == NUM_LEVELS - 1)[:, None, :]
    return where(at_low_edge, log_cdf_plus,
                 where(at_high_edge, log_one_minus_cdf_minus, interior))


def dmol_nll(reprs: Tensor, targets, head: DmolHead
             ) -> tuple[Tensor, DmolParams]:
    """Total negative log-likelihood in nats over n pixels, plus params."""
    params = dmol_params(reprs, head)
    channel_lp = dmol_channel_log_probs(params, targets)
    joint = reduce_sum(channel_lp, axis=-1)  # [n, K]
    n = params.num_pixels
    log_norm = reshape(logsumexp(params.mixture_logits, axis=-1), (n, 1))
    log_weights = sub(params.mixture_logits, log_norm)
    per_pixel = logsumexp(add(log_weights, joint), axis=-1)
    return scale(reduce_sum(per_pixel), -1.0), params


def dmol_sample(params: DmolParams, temperature: float, rng: Rng
                ) -> tuple[int, int, int]:
    """Draw one (r, g, b) pixel from single-pixel mixture parameters.

    Temperature divides the mixture logits and multiplies the logistic
    noise scale, so small temperatures give the bin containing the
    selected component's mean.  Channels are drawn in r, g, b order with
    each drawn value (clamped to [-1, 1]) feeding the next channel's
    conditional mean.
    """
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if params.num_pixels != 1:
        raise ValueError(
            f"sampling needs single-pixel params, got {params.num_pixels}")
    logits = np.asarray(params.mixture_logits.data, np.float64).reshape(-1)
    k = _draw_categorical(_softmax_probs(logits / temperature), rng)
    mu = np.asarray(params.means.data, np.float64)[0, k]
    s = np.exp(np.asarray(params.log_scales.data, np.float64)[0, k])
    c = np.asarray(params.coeffs.data, np.float64)[0, k]

    eps = 1e-7
    drawn = []
    for ch in range(3):
        m = mu[ch]
        if ch == 1:
            m = m + c[0] * drawn[0]
        elif ch == 2:
            m = m + c[1] * drawn[0] + c[2] * drawn[1]
        u = eps + (1.0 - 2.0 * eps) * float(rng.uniform(()))
        x = m + s[ch] * temperature * math.log(u / (1.0 - u))
        drawn.append(min(max(x, -1.0), 1.0))
    return tuple(int(np.clip(round((x + 1.0) * 127.5), 0, 255))
                 for x in drawn)


# ---------------------------------------------------------------------------


def bits_per_dim(total_nll_nats: float, h: int, w: int) -> float:
    """Negative log-likelihood per pixel-channel in base 2."""
    if h < 1 or w < 1:
        raise ValueError(f"image dims must be positive, got {h}x{w}")
    return float(total_nll_nats) / (h * w * 3) / math.log(2.0)
