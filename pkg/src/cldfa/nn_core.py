"""Numerical building blocks: layers with hand-written backward passes,
temperature softmax, the two cross-entropy losses, gradient reversal, an
optimizer and a finite-difference gradient checker.

Layers operate on minibatches.  Parameters and gradients are plain
``dict[str, np.ndarray]`` with matching keys; everything is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Hashable

import numpy as np

PROB_FLOOR = 1e-12

Params = dict[str, np.ndarray]


class NumericalError(FloatingPointError):
    """A loss or gradient became NaN or infinite."""


# ---------------------------------------------------------------------------
# Softmax and losses
# ---------------------------------------------------------------------------


def softmax_temperature(logits, T: float = 1.0) -> np.ndarray:
    """Softmax of ``logits / T`` along the last axis."""
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")
    z = np.asarray(logits, dtype=np.float64) / T
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    return -np.sum(p * np.log(np.maximum(p, PROB_FLOOR)), axis=-1)


def cross_entropy_hard(probs, label) -> np.ndarray:
    """``-log probs[label]`` with a probability floor; batched on leading axes."""
    p = np.asarray(probs, dtype=np.float64)
    picked = np.take_along_axis(p, np.asarray(label)[..., None], axis=-1)[..., 0]
    return -np.log(np.maximum(picked, PROB_FLOOR))


def cross_entropy_soft(probs, soft_target) -> np.ndarray:
    """``-sum_k target_k log probs_k`` with a probability floor."""
    p = np.asarray(probs, dtype=np.float64)
    t = np.asarray(soft_target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: probs {p.shape} vs target {t.shape}")
    return -np.sum(t * np.log(np.maximum(p, PROB_FLOOR)), axis=-1)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels.reshape(-1)] = 1.0
    return out.reshape(labels.shape + (num_classes,))


def softmax_ce_backward(probs: np.ndarray, targets: np.ndarray, T: float = 1.0) -> np.ndarray:
    """Gradient of the mean soft cross-entropy w.r.t. the logits.

    ``probs`` must be ``softmax(logits / T)``; hard labels are one-hot targets.
    """
    return (probs - targets) / (T * probs.shape[0])


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def dense_forward(features, weight, bias) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ValueError(
            f"dimension mismatch: features {features.shape}, weight {weight.shape}, bias {bias.shape}"
        )
    return features @ weight + bias


def dense_backward(features, weight, d_out) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns ``(d_weight, d_bias, d_features)``."""
    return features.T @ d_out, d_out.sum(axis=0), d_out @ weight.T


def relu(x):
    return np.maximum(x, 0.0)


def grl_forward(x):
    """Gradient reversal: identity on the way forward."""
    return x


def grl_backward(grad, alpha: float):
    """Gradient reversal: scale the incoming gradient by ``-alpha``."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    return -alpha * np.asarray(grad)


@dataclass
class ConvCache:
    ids: np.ndarray  # (B, Lp) padded ids
    windows: np.ndarray  # (B, P, h*k)
    pre: np.ndarray  # (B, P, F)
    argmax: np.ndarray  # (B, F)


def conv_windows(embedded: np.ndarray, h: int) -> np.ndarray:
    """Stack every run of ``h`` consecutive embeddings: (B, L, k) -> (B, L-h+1, h*k)."""
    positions = embedded.shape[1] - h + 1
    return np.concatenate([embedded[:, o : o + positions, :] for o in range(h)], axis=-1)


def conv_forward(embedded: np.ndarray, weight: np.ndarray, bias: np.ndarray, h: int) -> tuple[np.ndarray, np.ndarray]:
    """Rectified feature maps ``c_i = relu(w . x_{i:i+h-1} + b)`` for every position.

    ``embedded`` must hold at least ``h`` positions.  Returns ``(windows, pre)``
    where ``pre`` is the pre-activation; apply :func:`relu` for the maps.
    """
    windows = conv_windows(embedded, h)
    pre = windows @ weight + bias
    return windows, pre


def valid_positions(lengths: np.ndarray, h: int) -> np.ndarray:
    """Feature-map length per document: ``max(true_len - h + 1, 1)``."""
    return np.maximum(np.asarray(lengths) - h + 1, 1)


def max_over_time(maps: np.ndarray, n_valid: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Max-pool (B, P, F) maps over positions; ties go to the first index.

    Positions at or beyond ``n_valid[b]`` are ignored.
    """
    if n_valid is not None:
        mask = np.arange(maps.shape[1])[None, :] < np.asarray(n_valid)[:, None]
        maps = np.where(mask[:, :, None], maps, -np.inf)
    idx = np.argmax(maps, axis=1)
    values = np.take_along_axis(maps, idx[:, None, :], axis=1)[:, 0, :]
    return values, idx


def conv_pool_backward(
    cache: ConvCache, weight: np.ndarray, d_pooled: np.ndarray, k: int, vocab_size: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward through relu, max-over-time, the filters and the lookup.

    Only the argmax position of each filter receives gradient.  Returns
    ``(d_weight, d_bias, d_embedding)``; the embedding gradient is dense.
    """
    B, F = d_pooled.shape
    rows = np.arange(B)[:, None]
    pre_sel = cache.pre[rows, cache.argmax, np.arange(F)[None, :]]
    d_pre = d_pooled * (pre_sel > 0)

    win_sel = cache.windows[rows, cache.argmax]  # (B, F, h*k)
    d_weight = np.einsum("bf,bfj->jf", d_pre, win_sel)
    d_bias = d_pre.sum(axis=0)

    h = weight.shape[0] // k
    tokens = np.stack([cache.ids[rows, cache.argmax + o] for o in range(h)], axis=-1)  # (B, F, h)
    # (B, F, h, k): gradient reaching each embedding inside the chosen windows
    d_tok = d_pre[:, :, None, None] * weight.T.reshape(F, h, k)[None]
    d_emb = np.zeros((vocab_size, k))
    np.add.at(d_emb, tokens.reshape(-1), d_tok.reshape(-1, k))
    return d_weight, d_bias, d_emb


# ---------------------------------------------------------------------------
# Initialisation
# ---------------------------------------------------------------------------


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerConfig:
    algorithm: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    clip_norm: float | None = 5.0

    def __post_init__(self):
        if self.algorithm not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")


@dataclass
class OptimizerState:
    config: OptimizerConfig
    step_count: int = 0
    moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.config,
            self.step_count,
            {k: v.copy() for k, v in self.moments.items()},
            {k: v.copy() for k, v in self.second_moments.items()},
        )


def global_norm(grads: Params) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def optimizer_step(params: Params, grads: Params, state: OptimizerState) -> None:
    """Update ``params`` in place.  Gradients are clipped by global norm first."""
    cfg = state.config
    if set(grads) - set(params):
        raise KeyError(f"gradients for unknown parameters: {sorted(set(grads) - set(params))}")
    scale = 1.0
    if cfg.clip_norm is not None:
        norm = global_norm(grads)
        if norm > cfg.clip_norm:
            scale = cfg.clip_norm / norm
    state.step_count += 1
    t = state.step_count
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        if scale != 1.0:
            g = g * scale
        m = state.moments.get(name)
        if m is None:
            m = state.moments[name] = np.zeros_like(p)
        if cfg.algorithm == "sgd_momentum":
            m *= cfg.momentum
            m += g
            p -= cfg.lr * m
            continue
        v = state.second_moments.get(name)
        if v is None:
            v = state.second_moments[name] = np.zeros_like(p)
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1**t)
        v_hat = v / (1 - cfg.beta2**t)
        p -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)


def check_finite(grads: Params) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")


# ---------------------------------------------------------------------------
# Finite-difference verification
# ---------------------------------------------------------------------------


def gradient_check(
    loss_fn: Callable[[Params], float],
    params: Params,
    analytic: Params,
    eps: float = 1e-4,
    n_coords: int = 200,
    seed: int = 0,
    pattern_fn: Callable[[Params], Hashable] | None = None,
    frozen: dict[str, np.ndarray] | None = None,
) -> float:
    """Max relative error between ``analytic`` and central differences.

    Coordinates are sampled uniformly over all parameters (all of them when
    there are fewer than ``n_coords``).  With ``pattern_fn``, a coordinate
    whose ``+/-eps`` perturbation changes the piecewise-linear activation
    pattern (relu signs, pooling argmax) sits too close to a kink and is
    replaced by another draw.  ``frozen`` maps parameter names to flat
    indices that training never updates (e.g. the pad embedding row); those
    are skipped.  ``params`` is restored before returning.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    total = int(sizes.sum())
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    order = rng.permutation(total)
    base_pattern = pattern_fn(params) if pattern_fn is not None else None
    frozen = {k: set(np.asarray(v).tolist()) for k, v in (frozen or {}).items()}

    worst = 0.0
    checked = 0
    for flat in order:
        if checked >= n_coords:
            break
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[i]
        arr = params[name].reshape(-1)
        j = int(flat - offsets[i])
        if frozen is not None and name in frozen and j in frozen[name]:
            continue
        orig = arr[j]
        arr[j] = orig + eps
        plus = loss_fn(params)
        kink = pattern_fn is not None and pattern_fn(params) != base_pattern
        arr[j] = orig - eps
        minus = loss_fn(params)
        kink = kink or (pattern_fn is not None and pattern_fn(params) != base_pattern)
        arr[j] = orig
        if kink:
            continue
        numeric = (plus - minus) / (2 * eps)
        a = float(analytic[name].reshape(-1)[j])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
        checked += 1
    return worst
