"""Text ingestion, vocabularies, encoding and a synthetic bilingual corpus.

Documents travel through the rest of the package as :class:`IdSequence`
objects (fixed-length id arrays plus the pre-padding length).  The split
containers cache stacked ``(N, max_len)`` id arrays so the trainers can work
on whole minibatches at once.
"""

from __future__ import annotations

import hashlib
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_TOKEN_RE = re.compile(r"[^\W_]+")


class CorpusFormatError(ValueError):
    """A corpus or embedding file does not follow the expected layout."""


class SyntheticSpecError(ValueError):
    """A synthetic corpus specification violates one of its constraints."""


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split it into maximal alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# Vocabulary and encoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocabulary:
    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int] = field(compare=False, repr=False)
    pad_id: int = 0
    unk_id: int = 1

    @classmethod
    def from_tokens(cls, tokens: Iterable[str]) -> "Vocabulary":
        """Build a vocabulary whose ids follow ``tokens`` after pad and unk."""
        id_to_token = (PAD_TOKEN, UNK_TOKEN) + tuple(tokens)
        token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
        if len(token_to_id) != len(id_to_token):
            raise ValueError("duplicate tokens in vocabulary")
        return cls(id_to_token=id_to_token, token_to_id=token_to_id)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    @cached_property
    def vocab_id(self) -> str:
        """Content hash identifying this exact token-to-id assignment."""
        digest = hashlib.sha256("\n".join(self.id_to_token).encode("utf-8"))
        return digest.hexdigest()[:16]


def build_vocab(
    token_lists: Iterable[Sequence[str]], min_count: int = 1, max_size: int | None = None
) -> Vocabulary:
    """Most frequent tokens first, ties broken lexicographically.

    ``max_size`` counts the two reserved entries.
    """
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    if max_size is not None and max_size < 2:
        raise ValueError("max_size must be >= 2")
    counts: Counter[str] = Counter()
    for tokens in token_lists:
        counts.update(tokens)
    kept = sorted((tok for tok, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    if max_size is not None:
        kept = kept[: max_size - 2]
    return Vocabulary.from_tokens(kept)


@dataclass(frozen=True)
class IdSequence:
    ids: np.ndarray
    true_len: int

    def __post_init__(self):
        if self.true_len < 1 or self.true_len > len(self.ids):
            raise ValueError(f"true_len {self.true_len} outside [1, {len(self.ids)}]")


def encode(tokens: Sequence[str], vocab: Vocabulary, max_len: int) -> IdSequence:
    """Map tokens to ids, truncate to ``max_len`` and right-pad.

    An empty document becomes a single unk token.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    get = vocab.token_to_id.get
    ids = [get(tok, vocab.unk_id) for tok in tokens[:max_len]] or [vocab.unk_id]
    arr = np.full(max_len, vocab.pad_id, dtype=np.int64)
    arr[: len(ids)] = ids
    return IdSequence(arr, len(ids))


def encode_texts(texts: Iterable[str], vocab: Vocabulary, max_len: int) -> list[IdSequence]:
    return [encode(tokenize(t), vocab, max_len) for t in texts]


def _stack(docs: Sequence[IdSequence]) -> tuple[np.ndarray, np.ndarray]:
    if not docs:
        return np.zeros((0, 1), dtype=np.int64), np.zeros(0, dtype=np.int64)
    ids = np.stack([d.ids for d in docs]).astype(np.int64, copy=False)
    lengths = np.array([d.true_len for d in docs], dtype=np.int64)
    return ids, lengths


# ---------------------------------------------------------------------------
# Split containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UnlabeledSet:
    docs: list[IdSequence]
    name: str = "unlabeled"
    vocab_id: str | None = None

    def __len__(self) -> int:
        return len(self.docs)

    @cached_property
    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return _stack(self.docs)


@dataclass(frozen=True)
class LabeledSet:
    docs: list[IdSequence]
    labels: list[int]
    name: str = "labeled"
    vocab_id: str | None = None

    def __post_init__(self):
        if len(self.docs) != len(self.labels):
            raise ValueError("docs and labels differ in length")

    def __len__(self) -> int:
        return len(self.docs)

    @cached_property
    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return _stack(self.docs)

    @cached_property
    def label_array(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.int64)

    def unlabeled(self, name: str | None = None) -> UnlabeledSet:
        """Drop the labels, e.g. to use test documents for adaptation."""
        return UnlabeledSet(list(self.docs), name or self.name, self.vocab_id)

    def subset(self, indices: Sequence[int], name: str | None = None) -> "LabeledSet":
        return LabeledSet(
            [self.docs[i] for i in indices],
            [self.labels[i] for i in indices],
            name or self.name,
            self.vocab_id,
        )


@dataclass(frozen=True)
class ParallelCorpus:
    src_docs: list[IdSequence]
    tgt_docs: list[IdSequence]
    src_vocab_id: str | None = None
    tgt_vocab_id: str | None = None

    def __post_init__(self):
        if len(self.src_docs) != len(self.tgt_docs):
            raise ValueError("parallel sides differ in length")

    def __len__(self) -> int:
        return len(self.src_docs)

    @cached_property
    def src_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return _stack(self.src_docs)

    @cached_property
    def tgt_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        return _stack(self.tgt_docs)

    def source_side(self, name: str = "u_parl_src") -> UnlabeledSet:
        return UnlabeledSet(list(self.src_docs), name, self.src_vocab_id)

    def target_side(self, name: str = "u_parl_tgt") -> UnlabeledSet:
        return UnlabeledSet(list(self.tgt_docs), name, self.tgt_vocab_id)


def merge_unlabeled(sets: Sequence[UnlabeledSet], name: str) -> UnlabeledSet:
    vocab_ids = {s.vocab_id for s in sets}
    if len(vocab_ids) > 1:
        raise ValueError("cannot merge sets encoded with different vocabularies")
    docs = [d for s in sets for d in s.docs]
    return UnlabeledSet(docs, name, vocab_ids.pop() if vocab_ids else None)


# ---------------------------------------------------------------------------
# File loaders
# ---------------------------------------------------------------------------


def _rows(path: str | Path) -> Iterable[tuple[int, str]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if line.strip():
                yield lineno, line


def read_labeled_tsv(path: str | Path) -> tuple[list[int], list[str]]:
    """Read ``label<TAB>text`` rows."""
    labels, texts = [], []
    for lineno, line in _rows(path):
        cols = line.split("\t")
        if len(cols) != 2:
            raise CorpusFormatError(f"{path}:{lineno}: expected 2 tab-separated columns, got {len(cols)}")
        label = cols[0].strip()
        if not label.isdigit():
            raise CorpusFormatError(f"{path}:{lineno}: label {cols[0]!r} is not a non-negative integer")
        labels.append(int(label))
        texts.append(cols[1])
    return labels, texts


def read_parallel_tsv(path: str | Path) -> tuple[list[str], list[str]]:
    """Read ``src_text<TAB>tgt_text`` rows."""
    src, tgt = [], []
    for lineno, line in _rows(path):
        cols = line.split("\t")
        if len(cols) != 2:
            raise CorpusFormatError(f"{path}:{lineno}: expected 2 tab-separated columns, got {len(cols)}")
        src.append(cols[0])
        tgt.append(cols[1])
    return src, tgt


def read_text_lines(path: str | Path) -> list[str]:
    """One unlabeled document per non-blank line."""
    return [line for _, line in _rows(path)]


def load_labeled_tsv(path: str | Path, vocab: Vocabulary, max_len: int, name: str | None = None) -> LabeledSet:
    labels, texts = read_labeled_tsv(path)
    return LabeledSet(encode_texts(texts, vocab, max_len), labels, name or Path(path).stem, vocab.vocab_id)


def load_parallel(path: str | Path, src_vocab: Vocabulary, tgt_vocab: Vocabulary, max_len: int) -> ParallelCorpus:
    src, tgt = read_parallel_tsv(path)
    return ParallelCorpus(
        encode_texts(src, src_vocab, max_len),
        encode_texts(tgt, tgt_vocab, max_len),
        src_vocab.vocab_id,
        tgt_vocab.vocab_id,
    )


def load_unlabeled_txt(path: str | Path, vocab: Vocabulary, max_len: int, name: str | None = None) -> UnlabeledSet:
    docs = encode_texts(read_text_lines(path), vocab, max_len)
    return UnlabeledSet(docs, name or Path(path).stem, vocab.vocab_id)


def load_embeddings_text(path: str | Path, vocab: Vocabulary, matrix: np.ndarray) -> int:
    """Copy vectors from a word2vec-style text file into ``matrix`` in place.

    Rows of tokens missing from the file are left untouched, as is the pad
    row.  Returns the number of vocabulary rows that were overwritten.
    """
    dim = None
    matched = 0
    for lineno, line in _rows(path):
        parts = line.split()
        if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
            continue  # "count dim" header
        if len(parts) < 2:
            raise CorpusFormatError(f"{path}:{lineno}: embedding line has no vector")
        if dim is None:
            dim = len(parts) - 1
            if dim != matrix.shape[1]:
                raise CorpusFormatError(
                    f"{path}:{lineno}: embedding dimension {dim} does not match model dimension {matrix.shape[1]}"
                )
        elif len(parts) - 1 != dim:
            raise CorpusFormatError(f"{path}:{lineno}: dimension {len(parts) - 1} differs from earlier {dim}")
        idx = vocab.token_to_id.get(parts[0])
        if idx is None or idx == vocab.pad_id:
            continue
        try:
            matrix[idx] = [float(v) for v in parts[1:]]
        except ValueError as exc:
            raise CorpusFormatError(f"{path}:{lineno}: {exc}") from None
        matched += 1
    return matched


# ---------------------------------------------------------------------------
# Synthetic bilingual corpus
# ---------------------------------------------------------------------------

SPLITS = ("l_src", "u_src", "u_parl", "t_tgt", "u_tgt", "l_tgt")


@dataclass(frozen=True)
class SyntheticBilingualSpec:
    """Class-conditional token model shared by both languages.

    Tokens live in a canonical concept space ``[0, vocab_size)``.  Each class
    owns a disjoint set of indicative tokens; the rest of the vocabulary is
    split into ``num_topics`` class-neutral topic groups followed by
    background tokens.  A document picks one topic from its split's topic
    weights, then each position emits a signal token of the document's class
    with probability ``signal_prob``, a token of its topic with probability
    ``topic_prob`` and a background token otherwise.  Because topics are
    independent of the label, reweighting them per split shifts the input
    marginals while leaving p(y | x) unchanged.
    """

    vocab_size: int = 1000
    num_classes: int = 2
    signal_tokens_per_class: int = 20
    signal_prob: float = 0.2
    class_signal: tuple[tuple[int, ...], ...] | None = None
    num_topics: int = 3
    topic_tokens_per_topic: int = 100
    topic_prob: float = 0.4
    doc_len: tuple[int, int] = (20, 40)
    sizes: dict[str, int] = field(
        default_factory=lambda: {"l_src": 2000, "u_src": 0, "u_parl": 2000, "t_tgt": 1000, "u_tgt": 0, "l_tgt": 0}
    )
    topic_weights: dict[str, tuple[float, ...]] | None = None
    cipher_seed: int = 0
    identity_cipher: bool = False

    def signal_sets(self) -> tuple[tuple[int, ...], ...]:
        if self.class_signal is not None:
            return tuple(tuple(s) for s in self.class_signal)
        n = self.signal_tokens_per_class
        return tuple(tuple(range(c * n, (c + 1) * n)) for c in range(self.num_classes))

    def validate(self) -> None:
        if self.num_classes < 2:
            raise SyntheticSpecError("num_classes must be >= 2")
        sets = self.signal_sets()
        if len(sets) != self.num_classes:
            raise SyntheticSpecError("class_signal must list one token set per class")
        seen: set[int] = set()
        for c, s in enumerate(sets):
            if not s:
                raise SyntheticSpecError(f"class {c} has an empty signal set")
            if any(t < 0 or t >= self.vocab_size for t in s):
                raise SyntheticSpecError(f"class {c} signal token outside the vocabulary")
            if seen.intersection(s):
                raise SyntheticSpecError("class signal sets must be disjoint across classes")
            seen.update(s)
        if len(seen) + self.num_topics * self.topic_tokens_per_topic >= self.vocab_size:
            raise SyntheticSpecError(
                f"vocab_size {self.vocab_size} too small for {len(seen)} signal tokens, "
                f"{self.num_topics}x{self.topic_tokens_per_topic} topic tokens and at least one background token"
            )
        if not (0 <= self.signal_prob <= 1 and 0 <= self.topic_prob <= 1 and self.signal_prob + self.topic_prob <= 1):
            raise SyntheticSpecError("signal_prob and topic_prob must be probabilities summing to <= 1")
        lo, hi = self.doc_len
        if not 1 <= lo <= hi:
            raise SyntheticSpecError("doc_len must satisfy 1 <= min <= max")
        unknown = set(self.sizes) - set(SPLITS)
        if unknown or any(n < 0 for n in self.sizes.values()):
            raise SyntheticSpecError(f"bad split sizes {self.sizes}")
        for split, w in (self.topic_weights or {}).items():
            if split not in SPLITS:
                raise SyntheticSpecError(f"unknown split {split!r} in topic_weights")
            if len(w) != self.num_topics or any(x < 0 for x in w) or sum(w) <= 0:
                raise SyntheticSpecError(f"topic weights for {split!r} are not a valid reweighting")

    def split_topic_weights(self, split: str) -> np.ndarray:
        w = (self.topic_weights or {}).get(split)
        if w is None:
            w = (1.0,) * self.num_topics
        w = np.asarray(w, dtype=np.float64)
        return w / w.sum()


def shifted_spec(strength: float = 0.9, **kwargs) -> SyntheticBilingualSpec:
    """Spec with a topic shift between L_src, U_parl and the target test side.

    L_src (and U_src) favour topic 0, the parallel corpus topic 1 and the
    target test/unlabeled documents topic 2; ``strength`` is the extra mass
    on the favoured topic.
    """
    kwargs.setdefault("num_topics", 3)
    k = kwargs["num_topics"]
    if k < 3:
        raise SyntheticSpecError("shifted_spec needs at least 3 topics")

    def favour(j):
        return tuple((1.0 - strength) / k + (strength if i == j else 0.0) for i in range(k))

    weights = {
        "l_src": favour(0),
        "u_src": favour(0),
        "u_parl": favour(1),
        "t_tgt": favour(2),
        "u_tgt": favour(2),
        "l_tgt": favour(2),
    }
    return SyntheticBilingualSpec(topic_weights=weights, **kwargs)


class TokenCipher:
    """Bijective token-level translation from target to source tokens."""

    def __init__(self, forward: dict[str, str]):
        self.forward = dict(forward)
        self.backward = {v: k for k, v in self.forward.items()}
        if len(self.backward) != len(self.forward):
            raise ValueError("cipher is not injective")

    def __call__(self, tokens: Sequence[str]) -> list[str]:
        return [self.forward[t] for t in tokens]

    def invert(self, tokens: Sequence[str]) -> list[str]:
        return [self.backward[t] for t in tokens]

    def translate(self, text: str) -> str:
        return " ".join(self(tokenize(text)))


@dataclass
class SyntheticSplit:
    name: str
    doc_ids: np.ndarray
    labels: np.ndarray
    concepts: list[np.ndarray]


@dataclass
class SyntheticCorpus:
    spec: SyntheticBilingualSpec
    splits: dict[str, SyntheticSplit]
    permutation: np.ndarray

    @cached_property
    def cipher(self) -> TokenCipher:
        return TokenCipher({self.target_token(c): self.source_token(c) for c in range(self.spec.vocab_size)})

    def target_token(self, concept: int) -> str:
        return f"w{concept}"

    def source_token(self, concept: int) -> str:
        if self.spec.identity_cipher:
            return f"w{concept}"
        return f"s{self.permutation[concept]}"

    def source_texts(self, split: str) -> list[str]:
        return [" ".join(self.source_token(c) for c in doc) for doc in self.splits[split].concepts]

    def target_texts(self, split: str) -> list[str]:
        return [" ".join(self.target_token(c) for c in doc) for doc in self.splits[split].concepts]

    def labels(self, split: str) -> list[int]:
        return self.splits[split].labels.tolist()

    def write_tsv(self, out_dir: str | Path) -> dict[str, Path]:
        """Dump every split plus the lexicon; returns the written paths."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files: dict[str, Path] = {}

        def dump(name: str, rows: Iterable[str]) -> None:
            path = out / name
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                for row in rows:
                    fh.write(row + "\n")
            files[name] = path

        dump("l_src.tsv", (f"{y}\t{t}" for y, t in zip(self.labels("l_src"), self.source_texts("l_src"))))
        dump("u_src.txt", self.source_texts("u_src"))
        dump("u_parl.tsv", (f"{s}\t{t}" for s, t in zip(self.source_texts("u_parl"), self.target_texts("u_parl"))))
        dump("t_tgt.tsv", (f"{y}\t{t}" for y, t in zip(self.labels("t_tgt"), self.target_texts("t_tgt"))))
        dump("u_tgt.txt", self.target_texts("u_tgt"))
        dump("l_tgt.tsv", (f"{y}\t{t}" for y, t in zip(self.labels("l_tgt"), self.target_texts("l_tgt"))))
        cipher = self.cipher
        dump("lexicon.tsv", (f"{t}\t{s}" for t, s in cipher.forward.items()))
        return files


def _emit_split(spec, name, n, rng, next_id):
    sets = [np.asarray(s) for s in spec.signal_sets()]
    signal = set(int(t) for s in sets for t in s)
    free = np.array([t for t in range(spec.vocab_size) if t not in signal])
    ntt = spec.topic_tokens_per_topic
    topics = [free[i * ntt : (i + 1) * ntt] for i in range(spec.num_topics)]
    background = free[spec.num_topics * ntt :]
    weights = spec.split_topic_weights(name)
    lo, hi = spec.doc_len

    labels = rng.integers(0, spec.num_classes, size=n)
    doc_topics = rng.choice(spec.num_topics, size=n, p=weights)
    lengths = rng.integers(lo, hi + 1, size=n)
    docs = []
    for y, z, length in zip(labels, doc_topics, lengths):
        u = rng.random(length)
        doc = background[rng.integers(0, len(background), size=length)]
        is_topic = (u >= spec.signal_prob) & (u < spec.signal_prob + spec.topic_prob)
        is_signal = u < spec.signal_prob
        doc[is_topic] = topics[z][rng.integers(0, ntt, size=int(is_topic.sum()))]
        doc[is_signal] = sets[y][rng.integers(0, len(sets[y]), size=int(is_signal.sum()))]
        docs.append(doc)
    ids = np.arange(next_id, next_id + n)
    return SyntheticSplit(name, ids, labels.astype(np.int64), docs)


def generate_synthetic_bilingual(spec: SyntheticBilingualSpec, seed: int) -> SyntheticCorpus:
    """Draw every split from ``spec``; fully determined by ``(spec, seed)``.

    Parallel pairs share one concept sequence, so the source side is exactly
    the cipher image of the target side.
    """
    spec.validate()
    perm_rng = np.random.default_rng([spec.cipher_seed, 7919])
    permutation = perm_rng.permutation(spec.vocab_size)
    splits = {}
    next_id = 0
    for i, name in enumerate(SPLITS):
        rng = np.random.default_rng([seed, i])
        n = spec.sizes.get(name, 0)
        splits[name] = _emit_split(spec, name, n, rng, next_id)
        next_id += n
    return SyntheticCorpus(spec, splits, permutation)


@dataclass
class EncodedBilingual:
    """Encoded splits of a synthetic corpus with one vocabulary per side."""

    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    l_src: LabeledSet
    u_src: UnlabeledSet
    parallel: ParallelCorpus
    t_tgt: LabeledSet
    u_tgt: UnlabeledSet
    l_tgt: LabeledSet
    t_tgt_translated: LabeledSet  # T_tgt mapped through the cipher, source vocabulary

    def target_unlabeled(self) -> list[UnlabeledSet]:
        """Adaptation documents for step 2: T_tgt text plus U_tgt when present."""
        sets = [self.t_tgt.unlabeled()]
        if len(self.u_tgt):
            sets.append(self.u_tgt)
        return sets


def encode_synthetic(corpus: SyntheticCorpus, max_len: int, min_count: int = 1) -> EncodedBilingual:
    """Build both vocabularies from unlabeled-side text and encode every split.

    The source vocabulary covers L_src, U_src and the source side of U_parl;
    the target vocabulary covers the target side of U_parl, T_tgt and U_tgt.
    """
    src_texts = [t for s in ("l_src", "u_src", "u_parl") for t in corpus.source_texts(s)]
    tgt_texts = [t for s in ("u_parl", "t_tgt", "u_tgt") for t in corpus.target_texts(s)]
    sv = build_vocab((tokenize(t) for t in src_texts), min_count=min_count)
    tv = build_vocab((tokenize(t) for t in tgt_texts), min_count=min_count)

    def labeled(split, texts, vocab, name=None):
        return LabeledSet(encode_texts(texts, vocab, max_len), corpus.labels(split), name or split, vocab.vocab_id)

    cipher = corpus.cipher
    return EncodedBilingual(
        src_vocab=sv,
        tgt_vocab=tv,
        l_src=labeled("l_src", corpus.source_texts("l_src"), sv),
        u_src=UnlabeledSet(encode_texts(corpus.source_texts("u_src"), sv, max_len), "u_src", sv.vocab_id),
        parallel=ParallelCorpus(
            encode_texts(corpus.source_texts("u_parl"), sv, max_len),
            encode_texts(corpus.target_texts("u_parl"), tv, max_len),
            sv.vocab_id,
            tv.vocab_id,
        ),
        t_tgt=labeled("t_tgt", corpus.target_texts("t_tgt"), tv),
        u_tgt=UnlabeledSet(encode_texts(corpus.target_texts("u_tgt"), tv, max_len), "u_tgt", tv.vocab_id),
        l_tgt=labeled("l_tgt", corpus.target_texts("l_tgt"), tv),
        t_tgt_translated=labeled(
            "t_tgt", [cipher.translate(t) for t in corpus.target_texts("t_tgt")], sv, "t_tgt_translated"
        ),
    )
