"""Corpus ingestion, vocabulary, tokenization, batching, and the planted-keyword corpus."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Vocabulary:
    itos: tuple
    min_frequency: int = 1
    stoi: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.itos[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError("vocabulary must start with the reserved special tokens")
        stoi = {t: i for i, t in enumerate(self.itos)}
        if len(stoi) != len(self.itos):
            raise DataError("duplicate token in vocabulary")
        object.__setattr__(self, "stoi", stoi)

    def __len__(self) -> int:
        return len(self.itos)

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def to_json(self) -> dict:
        return {"itos": list(self.itos), "min_frequency": self.min_frequency}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(tuple(obj["itos"]), int(obj.get("min_frequency", 1)))


def _words(text: str) -> list:
    return text.lower().split()


def build_vocab(corpus: Iterable[str], min_frequency: int = 1) -> Vocabulary:
    """Lowercased whitespace tokens with count >= min_frequency, by count desc then text."""
    counts: Counter = Counter()
    n_docs = 0
    for text in corpus:
        n_docs += 1
        counts.update(_words(text))
    if n_docs == 0:
        raise DataError("cannot build a vocabulary from an empty corpus")
    reserved = {t.lower() for t in SPECIAL_TOKENS}
    kept = sorted(
        (t for t, c in counts.items() if c >= min_frequency and t not in reserved),
        key=lambda t: (-counts[t], t),
    )
    return Vocabulary(SPECIAL_TOKENS + tuple(kept), min_frequency)


@dataclass(frozen=True)
class TokenizedExample:
    """``[CLS] w1 .. wn [SEP]`` as ids; content positions exclude the two specials."""

    ids: tuple
    label: int = 0

    def __post_init__(self):
        if len(self.ids) < 2:
            raise DataError("a tokenized example needs at least [CLS] and [SEP]")

    @property
    def length(self) -> int:
        return len(self.ids)

    @property
    def content_positions(self) -> tuple:
        return tuple(range(1, len(self.ids) - 1))


def tokenize(text: str, vocab: Vocabulary, max_len: int, label: int = 0) -> TokenizedExample:
    if max_len < 2:
        raise ValueError(f"max_len must be >= 2, got {max_len}")
    ids = [vocab.id(w) for w in _words(text)][: max_len - 2]
    return TokenizedExample(tuple([CLS] + ids + [SEP]), int(label))


def detokenize(example: TokenizedExample, vocab: Vocabulary) -> str:
    return " ".join(vocab.itos[example.ids[i]] for i in example.content_positions)


def load_jsonl(path, num_classes: int | None = None) -> list:
    """Read ``{"text": str, "label": int}`` lines, preserving order."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("text"), str):
                raise DataError(f"{path}: line {lineno}: missing string field 'text'")
            label = obj.get("label")
            if not isinstance(label, int) or isinstance(label, bool):
                raise DataError(f"{path}: line {lineno}: missing integer field 'label'")
            if label < 0 or (num_classes is not None and label >= num_classes):
                raise DataError(f"{path}: line {lineno}: label {label} out of range")
            out.append((obj["text"], label))
    return out


def write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Right-padded ids plus per-row lengths and labels."""

    ids: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.lengths)

    @property
    def width(self) -> int:
        return self.ids.shape[1]

    def key_mask(self) -> np.ndarray:
        return np.arange(self.width)[None, :] < self.lengths[:, None]

    def content_mask(self) -> np.ndarray:
        pos = np.arange(self.width)[None, :]
        return (pos >= 1) & (pos < self.lengths[:, None] - 1)


def make_batch(examples: Sequence[TokenizedExample]) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    lengths = np.array([e.length for e in examples], dtype=np.int64)
    ids = np.full((len(examples), int(lengths.max())), PAD, dtype=np.int64)
    for i, e in enumerate(examples):
        ids[i, : e.length] = e.ids
    labels = np.array([e.label for e in examples], dtype=np.int64)
    return Batch(ids, lengths, labels)


def iter_batches(examples: Sequence, batch_size: int, order=None):
    idx = np.arange(len(examples)) if order is None else np.asarray(order)
    for start in range(0, len(idx), batch_size):
        yield [examples[i] for i in idx[start:start + batch_size]]


# ---------------------------------------------------------------------------
# planted-keyword corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """A corpus whose label is fixed by which class's keywords a sentence contains.

    ``keyword_rate`` is the fraction of a sentence's words replaced by keywords
    of its class (at least one). ``vocab_size`` counts keywords and fillers.
    """

    num_classes: int = 2
    vocab_size: int = 400
    min_length: int = 8
    max_length: int = 24
    keywords: tuple = ()
    keywords_per_class: int = 3
    keyword_rate: float = 0.1
    seed: int = 0
    n_train: int = 5000
    n_dev: int = 500
    n_test: int = 1000

    def class_keywords(self) -> tuple:
        if self.keywords:
            return tuple(tuple(k) for k in self.keywords)
        return tuple(
            tuple(f"key{c}x{j}" for j in range(self.keywords_per_class))
            for c in range(self.num_classes)
        )

    def validate(self) -> None:
        if self.num_classes < 2:
            raise DataError("need at least two classes")
        if not 0.0 < self.keyword_rate <= 1.0:
            raise DataError(f"keyword_rate must lie in (0, 1], got {self.keyword_rate}")
        if not 1 <= self.min_length <= self.max_length:
            raise DataError("length range must satisfy 1 <= min_length <= max_length")
        kws = self.class_keywords()
        if len(kws) != self.num_classes or any(not k for k in kws):
            raise DataError("need a non-empty keyword set per class")
        flat = [w for k in kws for w in k]
        if len(set(flat)) != len(flat):
            raise DataError("keyword sets must be disjoint across classes")
        if len(flat) >= self.vocab_size:
            raise DataError(f"{len(flat)} keywords do not fit in a vocabulary of {self.vocab_size}")


@dataclass
class SynthCorpus:
    train: list
    dev: list
    test: list
    rationales: dict  # split -> list of word-index lists


def synth_generate(spec: SynthSpec) -> SynthCorpus:
    """Deterministic train/dev/test splits with the planted word positions."""
    spec.validate()
    kws = spec.class_keywords()
    n_kw = sum(len(k) for k in kws)
    fillers = [f"w{i:04d}" for i in range(spec.vocab_size - n_kw)]
    rng = np.random.default_rng(spec.seed)
    seen: set = set()
    splits = {}
    rats = {}
    for name, n in (("train", spec.n_train), ("dev", spec.n_dev), ("test", spec.n_test)):
        rows, pos_rows = [], []
        budget = 200 * n + 1000
        while len(rows) < n:
            budget -= 1
            if budget < 0:
                raise DataError(f"spec admits too few distinct sentences to fill the {name} split")
            label = int(rng.integers(spec.num_classes))
            length = int(rng.integers(spec.min_length, spec.max_length + 1))
            words = [fillers[i] for i in rng.integers(len(fillers), size=length)]
            count = max(1, int(math.floor(spec.keyword_rate * length + 1e-9)))
            where = np.sort(rng.choice(length, size=count, replace=False))
            for p in where:
                words[p] = kws[label][int(rng.integers(len(kws[label])))]
            text = " ".join(words)
            if text in seen:
                continue
            seen.add(text)
            rows.append((text, label))
            pos_rows.append([int(p) for p in where])
        splits[name] = rows
        rats[name] = pos_rows
    return SynthCorpus(splits["train"], splits["dev"], splits["test"], rats)


def write_synth(corpus: SynthCorpus, out_dir) -> dict:
    """Write ``{split}.jsonl`` and ``{split}.rationales.jsonl``; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split in ("train", "dev", "test"):
        rows = getattr(corpus, split)
        p = out_dir / f"{split}.jsonl"
        write_jsonl(p, ({"text": t, "label": y} for t, y in rows))
        write_jsonl(out_dir / f"{split}.rationales.jsonl",
                    ({"positions": pos} for pos in corpus.rationales[split]))
        paths[split] = p
    return paths


def keyword_label(text: str, spec: SynthSpec) -> int:
    """Recover a synthetic label by keyword lookup (-1 when ambiguous or absent)."""
    words = set(_words(text))
    hits = [c for c, k in enumerate(spec.class_keywords()) if words & set(k)]
    return hits[0] if len(hits) == 1 else -1
