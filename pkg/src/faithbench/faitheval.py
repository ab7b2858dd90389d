"""Erasure-based faithfulness, select-then-predict retraining and explanation consistency."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attribution import AttributionVector, attribute, predict_labels, top_k_rationale
from .textdata import MASK, DataError, TokenizedExample

AOPC_BINS = (0.01, 0.05, 0.10, 0.20, 0.50)
DEGENERATE_EPS = 1e-6


# -- erasure ------------------------------------------------------------------

def erase(example: TokenizedExample, rationale, which: str = "keep-rationale",
          substitute: bool = False) -> TokenizedExample:
    """Keep the specials plus either the rationale or its complement, in order.

    Dropped content tokens are deleted, or replaced by [MASK] when ``substitute``.
    """
    content = example.content_positions
    chosen = set(int(p) for p in rationale)
    if not chosen <= set(content):
        raise ValueError(f"rationale {sorted(chosen - set(content))} outside content positions")
    if which == "keep-rationale":
        keep = chosen
    elif which == "keep-complement":
        keep = set(content) - chosen
    else:
        raise ValueError(f"unknown erase mode {which!r}")
    ids = list(example.ids)
    if substitute:
        out = [t if (i not in content or i in keep) else MASK for i, t in enumerate(ids)]
    else:
        out = [t for i, t in enumerate(ids) if i not in content or i in keep]
    return TokenizedExample(tuple(out), example.label)


# -- scalar metrics ---------------------------------------------------------------

def normalized_sufficiency(p_full: float, p_r: float, p_empty: float) -> tuple:
    """Returns (value, degenerate)."""
    s = 1.0 - max(0.0, p_full - p_r)
    s0 = 1.0 - max(0.0, p_full - p_empty)
    if 1.0 - s0 < DEGENERATE_EPS:
        return 1.0, True
    return float(min(1.0, max(0.0, (s - s0) / (1.0 - s0)))), False


def normalized_comprehensiveness(p_full: float, p_rbar: float, p_empty: float) -> tuple:
    """Returns (value, degenerate); a vanishing denominator maps C=0 to 0 and C>0 to 1."""
    c = max(0.0, p_full - p_rbar)
    s0 = 1.0 - max(0.0, p_full - p_empty)
    if 1.0 - s0 < DEGENERATE_EPS:
        return (0.0 if c == 0.0 else 1.0), True
    return float(min(1.0, max(0.0, c / (1.0 - s0)))), False


def _prob(model, examples, targets, batch_size=64) -> np.ndarray:
    probs = model.predict_proba(list(examples), batch_size=batch_size)
    return probs[np.arange(len(examples)), np.asarray(targets)]


def sufficiency(model, example: TokenizedExample, target: int, rationale) -> float:
    p = _prob(model, [example, erase(example, rationale), erase(example, ())], [target] * 3)
    return normalized_sufficiency(*p)[0]


def comprehensiveness(model, example: TokenizedExample, target: int, rationale) -> float:
    p = _prob(model, [example, erase(example, rationale, "keep-complement"), erase(example, ())], [target] * 3)
    return normalized_comprehensiveness(*p)[0]


# -- batched evaluation --------------------------------------------------------

@dataclass
class MethodScores:
    """Per-example normalised metrics for one attribution method, shape (n, bins)."""

    method: str
    bins: tuple
    sufficiency: np.ndarray
    comprehensiveness: np.ndarray
    degenerate: np.ndarray

    @property
    def aopc_sufficiency(self) -> float:
        return float(self.sufficiency.mean()) if self.sufficiency.size else float("nan")

    @property
    def aopc_comprehensiveness(self) -> float:
        return float(self.comprehensiveness.mean()) if self.comprehensiveness.size else float("nan")

    def per_example_aopc(self) -> tuple:
        return self.sufficiency.mean(axis=1), self.comprehensiveness.mean(axis=1)


@dataclass
class FaithfulnessReport:
    methods: dict = field(default_factory=dict)
    bins: tuple = AOPC_BINS
    n_examples: int = 0
    settings: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {"bins": list(self.bins), "n_examples": self.n_examples, "settings": self.settings, "methods": {}}
        for name, m in self.methods.items():
            out["methods"][name] = {
                "aopc": {"sufficiency": m.aopc_sufficiency, "comprehensiveness": m.aopc_comprehensiveness},
                "bins": {f"{b:g}": {"sufficiency": float(m.sufficiency[:, j].mean()),
                                    "comprehensiveness": float(m.comprehensiveness[:, j].mean())}
                         for j, b in enumerate(self.bins)},
                "degenerate_examples": int(m.degenerate.any(axis=1).sum()),
            }
        return out

    def rows(self) -> list:
        rows = []
        for name, m in self.methods.items():
            for j, b in enumerate(self.bins):
                rows.append([name, f"{b:g}", f"{m.sufficiency[:, j].mean():.12g}",
                             f"{m.comprehensiveness[:, j].mean():.12g}"])
            rows.append([name, "aopc", f"{m.aopc_sufficiency:.12g}", f"{m.aopc_comprehensiveness:.12g}"])
        return rows

    def write(self, out_dir) -> dict:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath = out_dir / "faithfulness.json"
        jpath.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        cpath = out_dir / "faithfulness.csv"
        with open(cpath, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "bin", "suff", "comp"])
            w.writerows(self.rows())
        return {"json": jpath, "csv": cpath}


def score_attributions(model, examples: Sequence[TokenizedExample], attributions: Sequence[AttributionVector],
                       bins: Sequence[float] = AOPC_BINS, substitute: bool = False,
                       batch_size: int = 64, targets=None) -> MethodScores:
    """Normalised sufficiency and comprehensiveness of top-k rationales for every bin.

    ``targets`` defaults to each attribution's target label, falling back to the
    model's prediction for target-free methods.
    """
    examples = list(examples)
    n, nb = len(examples), len(bins)
    if n == 0:
        empty = np.zeros((0, nb))
        return MethodScores("", tuple(bins), empty, empty, empty.astype(bool))
    if targets is None:
        targets = [a.target_label for a in attributions]
        if any(t is None for t in targets):
            preds = predict_labels(model, examples)
            targets = [p if t is None else t for t, p in zip(targets, preds)]
    targets = np.asarray(targets, dtype=np.int64)
    inputs = [erase(e, (), substitute=substitute) for e in examples] + list(examples)
    for j, k in enumerate(bins):
        for e, a in zip(examples, attributions):
            r = top_k_rationale(a, k).kept
            inputs.append(erase(e, r, "keep-rationale", substitute))
            inputs.append(erase(e, r, "keep-complement", substitute))
    p = _prob(model, inputs, np.concatenate([targets, targets] + [np.repeat(targets, 2)] * nb), batch_size)
    p_empty, p_full = p[:n], p[n:2 * n]
    rest = p[2 * n:].reshape(nb, n, 2)
    suff = np.zeros((n, nb))
    comp = np.zeros((n, nb))
    flag = np.zeros((n, nb), dtype=bool)
    for j in range(nb):
        for i in range(n):
            suff[i, j], f1 = normalized_sufficiency(p_full[i], rest[j, i, 0], p_empty[i])
            comp[i, j], f2 = normalized_comprehensiveness(p_full[i], rest[j, i, 1], p_empty[i])
            flag[i, j] = f1 or f2
    return MethodScores(attributions[0].method, tuple(bins), suff, comp, flag)


def aopc(model, example: TokenizedExample, attribution: AttributionVector,
         bins: Sequence[float] = AOPC_BINS) -> tuple:
    s = score_attributions(model, [example], [attribution], bins)
    return s.aopc_sufficiency, s.aopc_comprehensiveness


def evaluate_faithfulness(model, examples: Sequence[TokenizedExample], methods: Sequence[str],
                          bins: Sequence[float] = AOPC_BINS, seed: int = 0, substitute: bool = False,
                          **attr_kw) -> FaithfulnessReport:
    """Attribute with the predicted label and score every method."""
    examples = list(examples)
    preds = predict_labels(model, examples)
    report = FaithfulnessReport(bins=tuple(bins), n_examples=len(examples),
                                settings={"erasure": "substitute" if substitute else "delete", "seed": seed})
    for m in methods:
        attrs = attribute(model, examples, m, targets=preds, seed=seed, **attr_kw)
        scores = score_attributions(model, examples, attrs, bins, substitute, targets=preds)
        scores.method = m
        report.methods[m] = scores
    return report


# -- task metric ------------------------------------------------------------------

def macro_f1(predictions, labels, num_classes: Optional[int] = None) -> float:
    """Unweighted mean of per-class F1; a class absent from both contributes 0."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    if labels.size == 0:
        raise ValueError("macro F1 of an empty set")
    if num_classes is None:
        classes = np.union1d(predictions, labels)
    else:
        classes = np.arange(num_classes)
    scores = []
    for c in classes:
        tp = np.sum((predictions == c) & (labels == c))
        fp = np.sum((predictions == c) & (labels != c))
        fn = np.sum((predictions != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 else 2.0 * tp / denom)
    return float(np.mean(scores))


# -- select-then-predict ----------------------------------------------------------

@dataclass
class FreshResult:
    method: str
    k: float
    rationale_f1: float
    full_text_f1: float


def rationale_corpus(model, examples: Sequence[TokenizedExample], method: str, k: float,
                     seed: int = 0, **attr_kw) -> list:
    examples = list(examples)
    if not examples:
        return []
    preds = predict_labels(model, examples)
    attrs = attribute(model, examples, method, targets=preds, seed=seed, **attr_kw)
    return [erase(e, top_k_rationale(a, k).kept) for e, a in zip(examples, attrs)]


def _check_classes(examples, num_classes, what):
    present = {e.label for e in examples}
    missing = sorted(set(range(num_classes)) - present)
    if missing:
        raise DataError(f"{what} rationale corpus has no examples of class(es) {missing}")


def fresh_evaluate(source_model, method: str, k: float, corpora, train_cfg, model_config=None,
                   full_text_f1: Optional[float] = None, init_seed: Optional[int] = None,
                   seed: int = 0, **attr_kw) -> FreshResult:
    """Train a fresh baseline classifier on top-k rationales and report test macro F1.

    ``corpora`` is (train, dev, test). The full-text reference is trained with
    the same initialisation unless ``full_text_f1`` is given.
    """
    from dataclasses import replace

    from .model import init_params
    from .regex_train import evaluate_f1, train

    if not 0.0 < k <= 1.0:
        raise ValueError(f"k must lie in (0, 1], got {k}")
    model_config = model_config or source_model.config
    init_seed = train_cfg.seed if init_seed is None else init_seed
    cfg = replace(train_cfg, mode="baseline")
    tr, dv, te = (list(c) for c in corpora)
    rtr, rdv, rte = (rationale_corpus(source_model, c, method, k, seed, **attr_kw) for c in (tr, dv, te))
    _check_classes(rtr, model_config.num_classes, "training")
    fresh = init_params(model_config, seed=init_seed)
    train(fresh, rtr, _dedupe_against(rdv, rtr), cfg)
    r_f1 = evaluate_f1(fresh, rte)[0]
    if full_text_f1 is None:
        full = init_params(model_config, seed=init_seed)
        train(full, tr, dv, cfg)
        full_text_f1 = evaluate_f1(full, te)[0]
    return FreshResult(method, k, r_f1, float(full_text_f1))


def _dedupe_against(dev, train_set):
    """Erasure can collapse distinct sentences; drop dev rationales identical to a training one."""
    seen = {e.ids for e in train_set}
    return [e for e in dev if e.ids not in seen]


def write_fresh(results: Sequence[FreshResult], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "k", "rationale_f1", "full_text_f1"])
        for r in results:
            w.writerow([r.method, f"{r.k:g}", f"{r.rationale_f1:.12g}", f"{r.full_text_f1:.12g}"])
    return path


# -- consistency ------------------------------------------------------------------

def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


@dataclass
class ConsistencyReport:
    names: list
    matrix: np.ndarray
    k: float
    method: str

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model"] + list(self.names))
            for n, row in zip(self.names, self.matrix):
                w.writerow([n] + [f"{v:.12g}" for v in row])
        return path


def top_k_sets(model, examples, method: str, k: float, seed: int = 0, **attr_kw) -> list:
    preds = predict_labels(model, examples)
    attrs = attribute(model, examples, method, targets=preds, seed=seed, **attr_kw)
    return [frozenset(top_k_rationale(a, k).kept) for a in attrs]


def jaccard_consistency(models: Sequence, examples: Sequence[TokenizedExample], method: str = "scaled_attention",
                        k: float = 0.25, names: Optional[Sequence[str]] = None, seed: int = 0,
                        **attr_kw) -> ConsistencyReport:
    examples = list(examples)
    names = list(names) if names is not None else [f"model{i}" for i in range(len(models))]
    sets = [top_k_sets(m, examples, method, k, seed, **attr_kw) for m in models]
    n = len(models)
    mat = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            v = float(np.mean([jaccard(a, b) for a, b in zip(sets[i], sets[j])])) if examples else 1.0
            mat[i, j] = mat[j, i] = v
    return ConsistencyReport(names, mat, k, method)
