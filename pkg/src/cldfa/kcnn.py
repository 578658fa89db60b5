"""The convolutional plug-in classifier.

``G_f`` maps a document to a fixed-length feature vector (embedding lookup,
one bank of rectified filters per window size, max-over-time pooling,
concatenation); ``G_y`` is a dense layer followed by the temperature
softmax.  :class:`Discriminator` is the domain classifier used during
adversarial adaptation; it sits on top of the same features.
"""

from __future__ import annotations

import csv
import io
import json
import zipfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import IdSequence, LabeledSet, UnlabeledSet, Vocabulary, load_embeddings_text
from .nn_core import (
    ConvCache,
    OptimizerConfig,
    OptimizerState,
    Params,
    conv_forward,
    conv_pool_backward,
    cross_entropy_soft,
    dense_backward,
    dense_forward,
    glorot_uniform,
    max_over_time,
    relu,
    softmax_ce_backward,
    softmax_temperature,
    valid_positions,
)

CHECKPOINT_FORMAT = "cldfa-checkpoint/1"


@dataclass(frozen=True)
class KcnnConfig:
    num_classes: int
    emb_dim: int = 50
    window_sizes: tuple[int, ...] = (3, 4, 5)
    num_filters: int = 100
    max_len: int = 100

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.emb_dim < 1 or self.num_filters < 1 or self.max_len < 1:
            raise ValueError("emb_dim, num_filters and max_len must be positive")
        if not self.window_sizes or min(self.window_sizes) < 1:
            raise ValueError("window sizes must be positive")
        object.__setattr__(self, "window_sizes", tuple(int(h) for h in self.window_sizes))

    @property
    def feature_dim(self) -> int:
        return self.num_filters * len(self.window_sizes)


def as_batch(docs) -> tuple[np.ndarray, np.ndarray]:
    """Normalise a document or collection of documents to ``(ids, lengths)``."""
    if isinstance(docs, IdSequence):
        return docs.ids[None, :].astype(np.int64), np.array([docs.true_len])
    if isinstance(docs, (LabeledSet, UnlabeledSet)):
        return docs.arrays
    if isinstance(docs, tuple) and len(docs) == 2 and isinstance(docs[0], np.ndarray):
        return docs
    docs = list(docs)
    return np.stack([d.ids for d in docs]).astype(np.int64), np.array([d.true_len for d in docs])


class KcnnModel:
    """Parameters ``theta_f`` (embeddings, filters) and ``theta_y`` (dense head)."""

    def __init__(self, config: KcnnConfig, params: Params, vocab_id: str | None = None):
        self.config = config
        self.params = params
        self.vocab_id = vocab_id
        expected = (config.feature_dim, config.num_classes)
        if params["out_W"].shape != expected:
            raise ValueError(f"head weight {params['out_W'].shape} != {expected}")

    @property
    def vocab_size(self) -> int:
        return self.params["emb"].shape[0]

    def copy(self) -> "KcnnModel":
        return KcnnModel(self.config, {k: v.copy() for k, v in self.params.items()}, self.vocab_id)

    def check_vocab(self, vocab_id: str | None) -> None:
        if vocab_id is not None and self.vocab_id is not None and vocab_id != self.vocab_id:
            raise ValueError(f"documents encoded with vocabulary {vocab_id}, model expects {self.vocab_id}")

    # -- feature extractor -------------------------------------------------

    def forward_features(self, ids: np.ndarray, lengths: np.ndarray) -> tuple[np.ndarray, list[ConvCache]]:
        ids = np.asarray(ids, dtype=np.int64)
        h_max = max(self.config.window_sizes)
        if ids.shape[1] < h_max:
            ids = np.pad(ids, ((0, 0), (0, h_max - ids.shape[1])))
        embedded = self.params["emb"][ids]
        pooled, caches = [], []
        for h in self.config.window_sizes:
            windows, pre = conv_forward(embedded, self.params[f"conv_W{h}"], self.params[f"conv_b{h}"], h)
            values, idx = max_over_time(relu(pre), valid_positions(lengths, h))
            pooled.append(values)
            caches.append(ConvCache(ids, windows, pre, idx))
        return np.concatenate(pooled, axis=1), caches

    def backward_features(self, caches: list[ConvCache], d_feats: np.ndarray) -> Params:
        k = self.config.emb_dim
        F = self.config.num_filters
        grads: Params = {}
        d_emb = np.zeros_like(self.params["emb"])
        for g, (h, cache) in enumerate(zip(self.config.window_sizes, caches)):
            d_w, d_b, d_e = conv_pool_backward(
                cache, self.params[f"conv_W{h}"], d_feats[:, g * F : (g + 1) * F], k, self.vocab_size
            )
            grads[f"conv_W{h}"] = d_w
            grads[f"conv_b{h}"] = d_b
            d_emb += d_e
        d_emb[0] = 0.0  # pad row is frozen
        grads["emb"] = d_emb
        return grads

    def frozen_coords(self) -> dict[str, np.ndarray]:
        """Flat parameter indices that training never touches (the pad row)."""
        return {"emb": np.arange(self.config.emb_dim)}

    def extract_features(self, docs) -> np.ndarray:
        ids, lengths = as_batch(docs)
        return self.forward_features(ids, lengths)[0]

    def activation_pattern(self, docs) -> bytes:
        """Pooling argmax and rectifier signs; constant on each linear piece."""
        ids, lengths = as_batch(docs)
        _, caches = self.forward_features(ids, lengths)
        parts = []
        for c in caches:
            rows = np.arange(c.argmax.shape[0])[:, None]
            active = c.pre[rows, c.argmax, np.arange(c.argmax.shape[1])[None, :]] > 0
            parts.append(c.argmax.tobytes() + active.tobytes())
        return b"".join(parts)

    # -- label classifier --------------------------------------------------

    def logits(self, feats: np.ndarray) -> np.ndarray:
        return dense_forward(feats, self.params["out_W"], self.params["out_b"])

    def classify(self, docs, T: float = 1.0) -> np.ndarray:
        """Class probabilities at temperature ``T``."""
        return softmax_temperature(self.logits(self.extract_features(docs)), T)

    def classify_features(self, feats: np.ndarray, T: float = 1.0) -> np.ndarray:
        return softmax_temperature(self.logits(feats), T)

    def predict_label(self, docs) -> np.ndarray:
        """Argmax of the ``T = 1`` probabilities; ties go to the smallest class."""
        return np.argmax(self.classify(docs, 1.0), axis=-1)

    def predict_proba(self, docs) -> np.ndarray:
        return self.classify(docs, 1.0)

    # -- training helpers --------------------------------------------------

    def loss_and_grads(
        self, ids: np.ndarray, lengths: np.ndarray, targets: np.ndarray, T: float = 1.0, t2_scaling: bool = False
    ) -> tuple[float, Params, np.ndarray]:
        """Mean soft cross-entropy and its gradients.

        Also returns the features so callers can reuse them.
        """
        feats, caches = self.forward_features(ids, lengths)
        probs = softmax_temperature(self.logits(feats), T)
        loss = float(np.mean(cross_entropy_soft(probs, targets)))
        d_logits = softmax_ce_backward(probs, targets, T)
        if t2_scaling:
            d_logits = d_logits * (T * T)
        d_w, d_b, d_feats = dense_backward(feats, self.params["out_W"], d_logits)
        grads = self.backward_features(caches, d_feats)
        grads["out_W"] = d_w
        grads["out_b"] = d_b
        return loss, grads, feats

    def loss(self, ids: np.ndarray, lengths: np.ndarray, targets: np.ndarray, T: float = 1.0) -> float:
        feats, _ = self.forward_features(ids, lengths)
        probs = softmax_temperature(self.logits(feats), T)
        return float(np.mean(cross_entropy_soft(probs, targets)))


def init_model(
    vocab: Vocabulary | int,
    config: KcnnConfig,
    seed: int,
    embeddings: str | Path | None = None,
) -> KcnnModel:
    """Randomly initialise a model; optionally overwrite rows from a text file.

    Embeddings are uniform(-0.25, 0.25) with a zero pad row, weight matrices
    Glorot-uniform, biases zero.
    """
    size = vocab.size if isinstance(vocab, Vocabulary) else int(vocab)
    rng = np.random.default_rng([seed, 0])
    k, F = config.emb_dim, config.num_filters
    params: Params = {"emb": rng.uniform(-0.25, 0.25, size=(size, k))}
    params["emb"][0] = 0.0
    for h in config.window_sizes:
        params[f"conv_W{h}"] = glorot_uniform(rng, h * k, F)
        params[f"conv_b{h}"] = np.zeros(F)
    params["out_W"] = glorot_uniform(rng, config.feature_dim, config.num_classes)
    params["out_b"] = np.zeros(config.num_classes)
    vocab_id = vocab.vocab_id if isinstance(vocab, Vocabulary) else None
    if embeddings is not None:
        if not isinstance(vocab, Vocabulary):
            raise TypeError("pretrained embeddings need a Vocabulary")
        load_embeddings_text(embeddings, vocab, params["emb"])
    return KcnnModel(config, params, vocab_id)


class Discriminator:
    """Domain classifier ``G_d``: one hidden rectifier layer, two-way output."""

    def __init__(self, params: Params):
        self.params = params

    @classmethod
    def init(cls, feature_dim: int, hidden: int, rng: np.random.Generator) -> "Discriminator":
        return cls(
            {
                "d_W1": glorot_uniform(rng, feature_dim, hidden),
                "d_b1": np.zeros(hidden),
                "d_W2": glorot_uniform(rng, hidden, 2),
                "d_b2": np.zeros(2),
            }
        )

    def forward(self, feats: np.ndarray) -> tuple[np.ndarray, tuple]:
        pre = dense_forward(feats, self.params["d_W1"], self.params["d_b1"])
        hidden = relu(pre)
        logits = dense_forward(hidden, self.params["d_W2"], self.params["d_b2"])
        return softmax_temperature(logits, 1.0), (feats, pre, hidden)

    def backward(self, cache: tuple, d_logits: np.ndarray) -> tuple[Params, np.ndarray]:
        feats, pre, hidden = cache
        d_w2, d_b2, d_hidden = dense_backward(hidden, self.params["d_W2"], d_logits)
        d_pre = d_hidden * (pre > 0)
        d_w1, d_b1, d_feats = dense_backward(feats, self.params["d_W1"], d_pre)
        return {"d_W1": d_w1, "d_b1": d_b1, "d_W2": d_w2, "d_b2": d_b2}, d_feats

    def accuracy(self, feats_a: np.ndarray, feats_b: np.ndarray) -> float:
        """Fraction of features routed to the right domain (a -> 0, b -> 1)."""
        pa, _ = self.forward(feats_a)
        pb, _ = self.forward(feats_b)
        hits = np.sum(np.argmax(pa, axis=1) == 0) + np.sum(np.argmax(pb, axis=1) == 1)
        return float(hits) / (len(feats_a) + len(feats_b))


# ---------------------------------------------------------------------------
# Checkpoints and feature dumps
# ---------------------------------------------------------------------------

_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr, dtype=np.float64), allow_pickle=False)
    return buf.getvalue()


def _write_zip(path: Path, members: dict[str, bytes]) -> None:
    # Fixed timestamps keep the archive byte-identical across reruns.
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(members):
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, members[name])


def save_checkpoint(
    path: str | Path,
    model: KcnnModel,
    optimizer: OptimizerState | None = None,
    vocab: Vocabulary | None = None,
    extra: dict | None = None,
) -> Path:
    """Write config, vocabulary, parameters and optimizer state to one zip file."""
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(model.config),
        "vocab_id": model.vocab_id,
        "vocab": list(vocab.id_to_token) if vocab is not None else None,
        "params": sorted(model.params),
        "optimizer": None,
        "extra": extra or {},
    }
    members = {f"params/{k}.npy": _npy_bytes(v) for k, v in model.params.items()}
    if optimizer is not None:
        meta["optimizer"] = {
            "config": asdict(optimizer.config),
            "step_count": optimizer.step_count,
            "moments": sorted(optimizer.moments),
            "second_moments": sorted(optimizer.second_moments),
        }
        members.update({f"opt_m/{k}.npy": _npy_bytes(v) for k, v in optimizer.moments.items()})
        members.update({f"opt_v/{k}.npy": _npy_bytes(v) for k, v in optimizer.second_moments.items()})
    members["meta.json"] = json.dumps(meta, sort_keys=True, indent=1).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_zip(path, members)
    return path


@dataclass
class Checkpoint:
    model: KcnnModel
    optimizer: OptimizerState | None
    vocab: Vocabulary | None
    extra: dict


def load_checkpoint(path: str | Path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")

        def arr(name):
            return np.lib.format.read_array(io.BytesIO(zf.read(name)), allow_pickle=False)

        params = {k: arr(f"params/{k}.npy") for k in meta["params"]}
        opt = None
        if meta["optimizer"] is not None:
            o = meta["optimizer"]
            opt = OptimizerState(
                OptimizerConfig(**o["config"]),
                o["step_count"],
                {k: arr(f"opt_m/{k}.npy") for k in o["moments"]},
                {k: arr(f"opt_v/{k}.npy") for k in o["second_moments"]},
            )
    cfg = meta["config"]
    cfg["window_sizes"] = tuple(cfg["window_sizes"])
    model = KcnnModel(KcnnConfig(**cfg), params, meta["vocab_id"])
    vocab = Vocabulary.from_tokens(meta["vocab"][2:]) if meta["vocab"] is not None else None
    return Checkpoint(model, opt, vocab, meta["extra"])


def dump_features(path: str | Path, model: KcnnModel, named_sets: Sequence[tuple[str, object]]) -> Path:
    """Write ``doc_id,split,f_1..f_D`` rows for every document of every split."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    D = model.config.feature_dim
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["doc_id", "split"] + [f"f_{i + 1}" for i in range(D)])
        for split, docs in named_sets:
            feats = model.extract_features(docs)
            for i, row in enumerate(feats):
                writer.writerow([i, split] + [repr(float(v)) for v in row])
    return path


def read_features_csv(path: str | Path) -> dict[str, np.ndarray]:
    """Inverse of :func:`dump_features`, grouped by split."""
    groups: dict[str, list[list[float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            groups.setdefault(row[1], []).append([float(v) for v in row[2:]])
    return {k: np.asarray(v) for k, v in groups.items()}
