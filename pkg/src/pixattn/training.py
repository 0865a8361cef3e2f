"""Maximum-likelihood training: Adam with a warmup learning-rate
schedule, deterministic shuffling, evaluation, and a pre-flight gradient
check.

The training loss is the mean per-image NLL of a batch.  Every run is
deterministic given (seed, config, dataset order): shuffling and dropout
draw from counter-based generators seeded from the run seed, and
gradient accumulation follows a fixed order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .heads import bits_per_dim
from .imagerep import Image
from .model import ImageTransformer, forward_train
from .rng import Rng

__all__ = [
    "TrainConfig", "OptimizerState", "lr_schedule", "adam_step",
    "clip_by_global_norm", "train", "evaluate", "format_metrics",
]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for one training run."""

    steps: int
    batch_size: int = 1
    warmup: int = 4000
    beta1: float = 0.9
    beta2: float = 0.997
    eps: float = 1e-9
    clip_norm: float | None = None
    eval_interval: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup < 1:
            raise ValueError(f"warmup must be >= 1, got {self.warmup}")
        for name in ("beta1", "beta2"):
            value = getattr(self, name)
            if not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {value}")
        if self.eps <= 0.0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.clip_norm is not None and self.clip_norm <= 0.0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        if self.eval_interval < 1:
            raise ValueError(
                f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")


@dataclass
class OptimizerState:
    """Adam moment estimates, shaped identically to the parameters."""

    first: dict[str, np.ndarray]
    second: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(first={k: np.zeros_like(v) for k, v in params.items()},
                   second={k: np.zeros_like(v) for k, v in params.items()})


def lr_schedule(step: int, d: int, warmup: int) -> float:
    """Warmup-then-inverse-square-root learning rate."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    if warmup < 1:
        raise ValueError(f"warmup must be >= 1, got {warmup}")
    return d ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def clip_by_global_norm(grads: dict[str, np.ndarray],
                        max_norm: float) -> dict[str, np.ndarray]:
    """Scale all gradients jointly so their global L2 norm is at most
    max_norm; gradients at or below the bound pass through unchanged."""
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.asarray(g, dtype=np.float64) ** 2))
    norm = float(np.sqrt(total))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: (g * np.asarray(scale, dtype=g.dtype)).astype(g.dtype)
            for k, g in grads.items()}


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, rate: float,
              cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, applied to params in place."""
    state.step += 1
    t = state.step
    correction1 = 1.0 - cfg.beta1 ** t
    correction2 = 1.0 - cfg.beta2 ** t
    for name, value in params.items():
        try:
            g = grads[name]
        except KeyError:
            raise ValueError(f"missing gradient for {name!r}") from None
        if g.shape != value.shape:
            raise ValueError(
                f"gradient for {name!r} has shape {g.shape}, parameter "
                f"has {value.shape}")
        g = g.astype(value.dtype, copy=False)
        m = state.first[name]
        v = state.second[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        value -= rate * m_hat / (np.sqrt(v_hat) + cfg.eps)


def format_metrics(step: int, nll_nats: float, bits: float) -> str:
    return f"step={step} nll_nats={nll_nats:.6f} bits_per_dim={bits:.6f}"


def _shuffled(rng: Rng, n: int) -> np.ndarray:
    """Fisher-Yates permutation drawn from the run's generator."""
    idx = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        idx[i], idx[j] = idx[j], idx[i]
    return idx


def _batch_indices(rng: Rng, n: int, batch_size: int, steps: int):
    """Yield one index batch per step, reshuffling every epoch."""
    produced = 0
    while produced < steps:
        order = _shuffled(rng, n)
        for lo in range(0, n, batch_size):
            yield order[lo:lo + batch_size]
            produced += 1
            if produced == steps:
                return


def _select(seq, indices):
    return None if seq is None else [seq[int(i)] for i in indices]


def _preflight_gradient_check(model: ImageTransformer, images, class_ids,
                              sources, cfg: TrainConfig) -> None:
    """Verify analytic gradients of the actual training loss against
    finite differences before touching any parameter."""
    training = model.config.dropout > 0.0

    def loss_fn(params):
        total, _ = forward_train(model, images, class_ids=class_ids,
                                 sources=sources, rng=Rng(cfg.seed + 1),
                                 training=training, param_tensors=params)
        return T.scale(total, 1.0 / len(images))

    worst = T.finite_diff_check(loss_fn, model.params, max_samples=30,
                                rng=Rng(cfg.seed + 2))
    if worst > 1e-4:
        raise T.NumericError(
            f"pre-flight gradient check failed: max relative error {worst:.3e}")


def train(model: ImageTransformer, images: Sequence[Image], cfg: TrainConfig,
          class_ids: Sequence[int] | None = None,
          sources: Sequence[Image] | None = None,
          on_metrics: Callable[[str], None] | None = None,
          preflight: bool = True) -> list[str]:
    """Optimize model.params in place; returns the metric log lines.

    A metrics line is emitted every eval_interval steps and at the final
    step, reporting that step's training batch.
    """
    if len(images) == 0:
        raise ValueError("training dataset is empty")
    shuffle_rng = Rng(cfg.seed)
    dropout_rng = Rng(cfg.seed + 1)

    if preflight:
        first = [0] if len(images) == 1 else [0, 1]
        _preflight_gradient_check(model, _select(images, first),
                                  _select(class_ids, first),
                                  _select(sources, first), cfg)

    state = OptimizerState.for_params(model.params)
    lines: list[str] = []
    for indices in _batch_indices(shuffle_rng, len(images), cfg.batch_size,
                                  cfg.steps):
        batch = _select(images, indices)
        total, _ = forward_train(model, batch,
                                 class_ids=_select(class_ids, indices),
                                 sources=_select(sources, indices),
                                 rng=dropout_rng,
                                 training=model.config.dropout > 0.0)
        loss = T.scale(total, 1.0 / len(batch))
        grads = T.backward(loss)
        if cfg.clip_norm is not None:
            grads = clip_by_global_norm(grads, cfg.clip_norm)
        rate = lr_schedule(state.step + 1, model.config.d, cfg.warmup)
        adam_step(model.params, grads, state, rate, cfg)

        step = state.step
        if step % cfg.eval_interval == 0 or step == cfg.steps:
            nll = float(loss.data)
            line = format_metrics(step, nll, bits_per_dim(nll, model.config.h,
                                                          model.config.w))
            lines.append(line)
            if on_metrics is not None:
                on_metrics(line)
    return lines


def evaluate(model: ImageTransformer, images: Sequence[Image],
             class_ids: Sequence[int] | None = None,
             sources: Sequence[Image] | None = None) -> float:
    """Mean teacher-forced bits/dim over the dataset, dropout off."""
    if len(images) == 0:
        raise ValueError("evaluation dataset is empty")
    total, _ = forward_train(model, list(images),
                             class_ids=None if class_ids is None
                             else list(class_ids),
                             sources=None if sources is None
                             else list(sources),
                             training=False)
    mean_nll = float(total.data) / len(images)
    return bits_per_dim(mean_nll, model.config.h, model.config.w)
