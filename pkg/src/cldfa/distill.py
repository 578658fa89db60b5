"""Cross-lingual distillation with adversarial feature adaptation.

Step 1 trains a source classifier on labeled source documents, optionally
pulling its features towards the source side of the parallel corpus with a
domain discriminator behind a gradient-reversal layer.  Soft labels from the
source model on the parallel corpus then supervise a target classifier on the
target side (step 2), which can in turn be adapted to unlabeled target test
documents.

Every trainer is a pure function of its inputs, config and seed.  Three
independent random streams are derived from the seed: parameter
initialisation, labeled-batch order, and everything adversarial
(discriminator init, unlabeled batch sampling).  Keeping the adversarial
stream separate is what makes ``alpha = 0`` reproduce a non-adversarial run
bit for bit.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import LabeledSet, ParallelCorpus, UnlabeledSet, Vocabulary, merge_unlabeled
from .kcnn import Discriminator, KcnnConfig, KcnnModel, init_model
from .nn_core import (
    NumericalError,
    OptimizerConfig,
    OptimizerState,
    check_finite,
    cross_entropy_hard,
    cross_entropy_soft,
    dense_backward,
    grl_backward,
    one_hot,
    optimizer_step,
    softmax_ce_backward,
    softmax_temperature,
)

log = logging.getLogger(__name__)


@dataclass
class AdversarialConfig:
    alpha: float = 0.1
    hidden: int = 100
    ramp: str = "constant"
    disc_lr: float | None = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.ramp not in ("constant", "sigmoid"):
            raise ValueError(f"unknown ramp {self.ramp!r}")
        if self.hidden < 1:
            raise ValueError("discriminator needs at least one hidden unit")

    def multiplier(self, progress: float) -> float:
        if self.ramp == "constant":
            return 1.0
        return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


@dataclass
class TrainConfig:
    temperature: float = 5.0
    temperatures: tuple[float, ...] | None = None
    epochs: int = 10
    batch_size: int = 50
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    adversarial: AdversarialConfig | None = None
    seed: int = 0
    patience: int | None = None
    t2_scaling: bool = False

    def __post_init__(self):
        temps = [self.temperature] + list(self.temperatures or [])
        if any(not t > 0 for t in temps):
            raise ValueError("temperatures must be positive")
        if self.temperatures is not None and not self.temperatures:
            raise ValueError("temperature set must be non-empty")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class TraceRow:
    epoch: int
    step: int
    l_y: float
    l_d: float = float("nan")


@dataclass
class TrainResult:
    model: KcnnModel
    optimizer: OptimizerState
    trace: list[TraceRow]
    discriminator: Discriminator | None = None
    disc_optimizer: OptimizerState | None = None
    metrics: list[float] = field(default_factory=list)

    def loss_trace(self) -> list[tuple[float, float]]:
        return [(r.l_y, r.l_d) for r in self.trace]


def write_trace_csv(path: str | Path, trace: Sequence[TraceRow]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "L_y", "L_d"])
        for r in trace:
            w.writerow([r.epoch, r.step, repr(r.l_y), "" if math.isnan(r.l_d) else repr(r.l_d)])
    return path


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Batch-order and adversarial streams (stream 0 is parameter init)."""
    return np.random.default_rng([seed, 1]), np.random.default_rng([seed, 2])


def adversarial_step(
    model: KcnnModel,
    labeled: tuple[np.ndarray, np.ndarray, np.ndarray],
    unlabeled: tuple[np.ndarray, np.ndarray] | None,
    disc: Discriminator | None,
    alpha: float,
    opt_model: OptimizerState,
    opt_disc: OptimizerState | None = None,
    T: float = 1.0,
    t2_scaling: bool = False,
) -> tuple[float, float]:
    """One combined update of ``theta_f``, ``theta_y`` and ``theta_d``.

    ``labeled`` is ``(ids, lengths, targets)`` with targets as probability
    rows (one-hot for hard labels); its documents get domain label 0, the
    ``unlabeled`` batch domain label 1.  The label classifier and the
    discriminator each minimise their own cross-entropy; the feature
    extractor receives the label gradient plus the discriminator gradient
    reversed and scaled by ``alpha``.  Returns ``(L_y, L_d)``, with ``L_d``
    NaN when no discriminator is given.
    """
    ids, lengths, targets = labeled
    feats_l, caches_l = model.forward_features(ids, lengths)
    probs = softmax_temperature(model.logits(feats_l), T)
    loss_y = float(np.mean(cross_entropy_soft(probs, targets)))
    d_logits = softmax_ce_backward(probs, targets, T)
    if t2_scaling:
        d_logits = d_logits * (T * T)
    d_out_w, d_out_b, d_feats_l = dense_backward(feats_l, model.params["out_W"], d_logits)

    loss_d = float("nan")
    disc_grads = extra = None
    if disc is not None and unlabeled is not None:
        feats_u, caches_u = model.forward_features(*unlabeled)
        n = len(feats_l)
        domains = np.repeat(np.array([0, 1]), [n, len(feats_u)])
        probs_d, cache_d = disc.forward(np.concatenate([feats_l, feats_u]))
        loss_d = float(np.mean(cross_entropy_hard(probs_d, domains)))
        disc_grads, d_feats = disc.backward(cache_d, softmax_ce_backward(probs_d, one_hot(domains, 2)))
        if alpha > 0:
            reversed_grad = grl_backward(d_feats, alpha)
            d_feats_l = d_feats_l + reversed_grad[:n]
            extra = model.backward_features(caches_u, reversed_grad[n:])

    grads = model.backward_features(caches_l, d_feats_l)
    grads["out_W"] = d_out_w
    grads["out_b"] = d_out_b
    if extra is not None:
        for name, g in extra.items():
            grads[name] = grads[name] + g
    if not math.isfinite(loss_y) or (disc_grads is not None and not math.isfinite(loss_d)):
        raise NumericalError(f"non-finite loss (L_y={loss_y}, L_d={loss_d})")
    check_finite(grads)
    optimizer_step(model.params, grads, opt_model)
    if disc_grads is not None:
        check_finite(disc_grads)
        optimizer_step(disc.params, disc_grads, opt_disc)
    return loss_y, loss_d


def _fit(
    model: KcnnModel,
    ids: np.ndarray,
    lengths: np.ndarray,
    targets: np.ndarray,
    T: float,
    cfg: TrainConfig,
    adapt: tuple[np.ndarray, np.ndarray] | None = None,
    validation: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None,
    optimizer: OptimizerState | None = None,
    eval_set: LabeledSet | None = None,
) -> TrainResult:
    n = len(ids)
    batch_rng, adv_rng = _rngs(cfg.seed)
    opt = optimizer if optimizer is not None else OptimizerState(cfg.optimizer)
    adv = cfg.adversarial
    disc = opt_disc = None
    if adv is not None:
        if adapt is None or len(adapt[0]) == 0:
            raise ValueError("adversarial adaptation needs a non-empty unlabeled set")
        disc = Discriminator.init(model.config.feature_dim, adv.hidden, adv_rng)
        disc_opt_cfg = cfg.optimizer if adv.disc_lr is None else replace(cfg.optimizer, lr=adv.disc_lr)
        opt_disc = OptimizerState(disc_opt_cfg)

    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = max(steps_per_epoch * cfg.epochs, 1)
    trace: list[TraceRow] = []
    metrics: list[float] = []
    best_val, best_params, stale = math.inf, None, 0
    step = 0
    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = (ids[idx], lengths[idx], targets[idx])
            unl = None
            alpha = 0.0
            if disc is not None:
                m = len(adapt[0])
                u_idx = adv_rng.choice(m, size=len(idx), replace=m < len(idx))
                unl = (adapt[0][u_idx], adapt[1][u_idx])
                alpha = adv.alpha * adv.multiplier(step / total_steps)
            try:
                l_y, l_d = adversarial_step(model, batch, unl, disc, alpha, opt, opt_disc, T, cfg.t2_scaling)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, step {step}: {exc}") from None
            trace.append(TraceRow(epoch, step, l_y, l_d))
            step += 1
        if eval_set is not None:
            metrics.append(float(np.mean(model.predict_label(eval_set) == eval_set.label_array)))
        if validation is not None and cfg.patience is not None:
            val = model.loss(*validation, T=T)
            if val < best_val:
                best_val, best_params, stale = val, {k: v.copy() for k, v in model.params.items()}, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    log.info("early stop after epoch %d (best validation loss %.4f)", epoch, best_val)
                    break
    if best_params is not None:
        model.params = best_params
    return TrainResult(model, opt, trace, disc, opt_disc, metrics)


def _check_labels(labeled: LabeledSet, num_classes: int) -> None:
    if labeled.labels and (min(labeled.labels) < 0 or max(labeled.labels) >= num_classes):
        raise ValueError(f"{labeled.name}: labels must lie in [0, {num_classes})")


def train_source(
    l_src: LabeledSet,
    adapt_to: UnlabeledSet | None,
    vocab: Vocabulary,
    model_config: KcnnConfig,
    cfg: TrainConfig,
    embeddings: str | Path | None = None,
    validation: LabeledSet | None = None,
) -> TrainResult:
    """Train the source classifier with hard labels at ``T = 1``.

    With ``cfg.adversarial`` set, features are adapted to ``adapt_to`` (the
    source side of the parallel corpus).
    """
    if len(l_src) == 0:
        raise ValueError("empty labeled source set")
    _check_labels(l_src, model_config.num_classes)
    model = init_model(vocab, model_config, cfg.seed, embeddings)
    model.check_vocab(l_src.vocab_id)
    ids, lengths = l_src.arrays
    targets = one_hot(l_src.label_array, model_config.num_classes)
    adapt = None
    if adapt_to is not None and len(adapt_to):
        model.check_vocab(adapt_to.vocab_id)
        adapt = adapt_to.arrays
    val = None
    if validation is not None:
        val = (*validation.arrays, one_hot(validation.label_array, model_config.num_classes))
    return _fit(model, ids, lengths, targets, 1.0, cfg, adapt, val)


@dataclass
class SoftLabelSet:
    probs: np.ndarray
    temperature: float
    source_hash: str

    def __post_init__(self):
        if not np.allclose(self.probs.sum(axis=1), 1.0, atol=1e-6, rtol=0):
            raise ValueError("soft labels must be probability vectors")

    def __len__(self) -> int:
        return len(self.probs)

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["pair_index"] + [f"p_{k}" for k in range(self.probs.shape[1])] + ["T"])
            for i, row in enumerate(self.probs):
                w.writerow([i] + [repr(float(p)) for p in row] + [repr(float(self.temperature))])
        return path

    @classmethod
    def read_csv(cls, path: str | Path, source_hash: str = "") -> "SoftLabelSet":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))[1:]
        if not rows:
            raise ValueError(f"{path}: no soft labels")
        temps = {float(r[-1]) for r in rows}
        if len(temps) != 1:
            raise ValueError(f"{path}: mixed temperatures {sorted(temps)}")
        probs = np.array([[float(v) for v in r[1:-1]] for r in rows])
        return cls(probs, temps.pop(), source_hash)


def model_hash(model: KcnnModel) -> str:
    h = hashlib.sha256()
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name]).tobytes())
    return h.hexdigest()[:16]


def soft_labels(src_model: KcnnModel, parallel: ParallelCorpus, T: float) -> SoftLabelSet:
    """Source-model class distributions at temperature ``T`` for each pair."""
    if not T > 0:
        raise ValueError("temperature must be positive")
    if src_model.vocab_id is not None and parallel.src_vocab_id not in (None, src_model.vocab_id):
        raise ValueError("parallel source side was encoded with a different vocabulary than the source model")
    probs = src_model.classify(parallel.src_arrays, T)
    return SoftLabelSet(probs, float(T), model_hash(src_model))


def train_target_distill(
    parallel: ParallelCorpus,
    soft: SoftLabelSet,
    adapt_to: UnlabeledSet | None,
    vocab: Vocabulary,
    model_config: KcnnConfig,
    cfg: TrainConfig,
    embeddings: str | Path | None = None,
) -> TrainResult:
    """Fit a target classifier to the soft labels on the target side.

    Target probabilities are computed at the soft labels' temperature.  With
    ``cfg.adversarial`` set, parallel target documents (domain 0) are aligned
    with ``adapt_to`` (domain 1).  Only unlabeled target documents are
    accepted, so gold target labels cannot leak into training.
    """
    if isinstance(adapt_to, LabeledSet):
        raise TypeError("distillation must not see labeled target documents; pass .unlabeled()")
    if not math.isclose(soft.temperature, cfg.temperature, rel_tol=0, abs_tol=1e-12):
        raise ValueError(f"soft labels generated at T={soft.temperature}, config asks for T={cfg.temperature}")
    if len(soft) != len(parallel):
        raise ValueError("soft labels and parallel corpus differ in length")
    model = init_model(vocab, model_config, cfg.seed, embeddings)
    model.check_vocab(parallel.tgt_vocab_id)
    ids, lengths = parallel.tgt_arrays
    adapt = None
    if adapt_to is not None and len(adapt_to):
        model.check_vocab(adapt_to.vocab_id)
        adapt = adapt_to.arrays
    return _fit(model, ids, lengths, soft.probs, soft.temperature, cfg, adapt)


class TemperatureEnsemble:
    """Averages the ``T = 1`` probabilities of per-temperature students."""

    def __init__(self, members: Sequence[KcnnModel], temperatures: Sequence[float], results=None):
        if not members:
            raise ValueError("empty ensemble")
        self.members = list(members)
        self.temperatures = list(temperatures)
        self.results = list(results or [])

    def predict_proba(self, docs) -> np.ndarray:
        return np.mean([m.classify(docs, 1.0) for m in self.members], axis=0)

    def predict_label(self, docs) -> np.ndarray:
        return np.argmax(self.predict_proba(docs), axis=-1)


def ensemble_predict(member_probs: Sequence[np.ndarray]) -> np.ndarray:
    return np.argmax(np.mean(member_probs, axis=0), axis=-1)


def temperature_ensemble(
    parallel: ParallelCorpus,
    src_model: KcnnModel,
    adapt_to: UnlabeledSet | None,
    vocab: Vocabulary,
    model_config: KcnnConfig,
    cfg: TrainConfig,
    embeddings: str | Path | None = None,
) -> TemperatureEnsemble:
    """One student per temperature in ``cfg.temperatures`` (default 1, 3, 5, 10).

    Member ``i`` uses seed ``cfg.seed + i``.
    """
    temps = tuple(cfg.temperatures or (1.0, 3.0, 5.0, 10.0))
    members, results = [], []
    for i, T in enumerate(temps):
        member_cfg = replace(cfg, temperature=float(T), temperatures=None, seed=cfg.seed + i)
        soft = soft_labels(src_model, parallel, T)
        res = train_target_distill(parallel, soft, adapt_to, vocab, model_config, member_cfg, embeddings)
        members.append(res.model)
        results.append(res)
    return TemperatureEnsemble(members, temps, results)


def fine_tune_target(
    model: KcnnModel,
    labeled_target: LabeledSet,
    cfg: TrainConfig,
    eval_set: LabeledSet | None = None,
) -> TrainResult:
    """Continue training a distilled model on a few labeled target documents.

    Uses hard labels at ``T = 1`` and a fresh optimizer.  ``metrics`` of the
    result holds the per-epoch accuracy on ``eval_set`` when given.
    """
    model = model.copy()
    opt = OptimizerState(cfg.optimizer)
    if len(labeled_target) == 0:
        return TrainResult(model, opt, [])
    _check_labels(labeled_target, model.config.num_classes)
    model.check_vocab(labeled_target.vocab_id)
    ids, lengths = labeled_target.arrays
    targets = one_hot(labeled_target.label_array, model.config.num_classes)
    return _fit(model, ids, lengths, targets, 1.0, replace(cfg, adversarial=None), eval_set=eval_set)


def train_target_only(
    labeled_target: LabeledSet, vocab: Vocabulary, model_config: KcnnConfig, cfg: TrainConfig
) -> TrainResult:
    """Baseline: train from scratch on the target labels alone."""
    return train_source(labeled_target, None, vocab, model_config, replace(cfg, adversarial=None))


@dataclass
class PipelineResult:
    source: TrainResult
    soft: SoftLabelSet | None
    target: TrainResult | None
    ensemble: TemperatureEnsemble | None = None

    @property
    def predictor(self):
        return self.ensemble if self.ensemble is not None else self.target.model


def run_two_step(
    l_src: LabeledSet,
    parallel: ParallelCorpus,
    target_unlabeled: Sequence[UnlabeledSet],
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    model_config: KcnnConfig,
    source_cfg: TrainConfig,
    target_cfg: TrainConfig,
    src_embeddings: str | Path | None = None,
    tgt_embeddings: str | Path | None = None,
) -> PipelineResult:
    """Step 1 (source training adapted to the parallel source side), soft
    labels, step 2 (distillation adapted to the unlabeled target documents,
    or a temperature ensemble when ``target_cfg.temperatures`` is set).
    """
    source = train_source(l_src, parallel.source_side(), src_vocab, model_config, source_cfg, src_embeddings)
    adapt = merge_unlabeled(list(target_unlabeled), "t_tgt+u_tgt") if target_unlabeled else None
    if target_cfg.temperatures:
        ens = temperature_ensemble(parallel, source.model, adapt, tgt_vocab, model_config, target_cfg, tgt_embeddings)
        return PipelineResult(source, None, None, ens)
    soft = soft_labels(source.model, parallel, target_cfg.temperature)
    target = train_target_distill(parallel, soft, adapt, tgt_vocab, model_config, target_cfg, tgt_embeddings)
    return PipelineResult(source, soft, target)
