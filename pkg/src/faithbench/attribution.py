"""Token attributions: random, attention, scaled attention, saliency, input x gradient,
integrated gradients and DeepLift, plus aggregation and top-k rationales.

The ``*_raw`` functions work on any object exposing
``forward_from_embeddings(E, lengths) -> Forward`` and return per-dimension
scores of shape (B, L, d) for a batch of embeddings. The public ``attr_*``
helpers operate on tokenized examples and report content positions only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .model import cls_attention_tensor
from .textdata import TokenizedExample, make_batch

METHODS = ("rand", "attention", "scaled_attention", "saliency", "inputxgrad", "ig", "deeplift")
AGGREGATIONS = ("mean", "l2")
DEEPLIFT_EPS = 1e-7


@dataclass(frozen=True)
class IgConfig:
    steps: int = 50

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"IG needs at least one step, got {self.steps}")


@dataclass
class AttributionVector:
    scores: np.ndarray
    method: str
    aggregation: Optional[str]
    target_label: Optional[int]
    positions: tuple = field(default=())

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if len(self.scores) != len(self.positions):
            raise ValueError("one score per content position is required")
        if not np.isfinite(self.scores).all():
            raise dc.NonFiniteError(f"non-finite {self.method} attribution")


@dataclass(frozen=True)
class Rationale:
    kept: tuple
    complement: tuple
    ratio: float


def aggregate(raw, how: str = "l2") -> np.ndarray:
    """Collapse the last (embedding) axis: signed mean or Euclidean norm."""
    raw = np.asarray(raw, dtype=np.float64)
    if how == "mean":
        return raw.mean(axis=-1)
    if how == "l2":
        return np.sqrt((raw * raw).sum(axis=-1))
    raise ValueError(f"unknown aggregation {how!r}")


def normalize_to_distribution(scores, floor: float = 1e-8) -> np.ndarray:
    a = np.abs(np.asarray(scores, dtype=np.float64)) + floor
    return a / a.sum(axis=-1, keepdims=True)


def rationale_size(n: int, k: float) -> int:
    """max(1, ceil(k n)) for n >= 1; rounding first keeps 0.1 * 30 at 3."""
    if n == 0:
        return 0
    return min(n, max(1, math.ceil(round(k * n, 9))))


def top_k_indices(scores, k: float) -> np.ndarray:
    """Indices (into ``scores``) of the highest entries, ties to the lower index."""
    if not 0.0 < k <= 1.0:
        raise ValueError(f"rationale ratio must lie in (0, 1], got {k}")
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.arange(len(scores)), -scores))
    return np.sort(order[: rationale_size(len(scores), k)])


def top_k_rationale(a: AttributionVector, k: float) -> Rationale:
    idx = set(top_k_indices(a.scores, k).tolist())
    kept = tuple(p for i, p in enumerate(a.positions) if i in idx)
    comp = tuple(p for i, p in enumerate(a.positions) if i not in idx)
    return Rationale(kept, comp, k)


# ---------------------------------------------------------------------------
# raw (per-dimension) attributions over embeddings
# ---------------------------------------------------------------------------

def _target_seed(shape, targets) -> np.ndarray:
    seed = np.zeros(shape)
    seed[np.arange(shape[0]), np.asarray(targets)] = 1.0
    return seed


def input_gradients(model, E: np.ndarray, lengths, targets) -> np.ndarray:
    """d logit[target] / dE for each row, shape (B, L, d)."""
    x = dc.Tensor(E, requires_grad=True)
    logits = model.forward_from_embeddings(x, lengths).logits
    (g,) = dc.backprop(logits, dc.Tensor(_target_seed(logits.shape, targets)), [x], allow_unused=True)
    return g.data


def saliency_raw(model, E, lengths, targets) -> np.ndarray:
    return input_gradients(model, E, lengths, targets)


def inputxgrad_raw(model, E, lengths, targets, reference=None) -> np.ndarray:
    """(E - E_ref) * gradient; the reference defaults to zero."""
    E = np.asarray(E, dtype=np.float64)
    diff = E if reference is None else E - reference
    return diff * input_gradients(model, E, lengths, targets)


def integrated_gradients_raw(model, E, lengths, targets, steps: int = 50, baseline=None,
                             max_rows: int = 256) -> np.ndarray:
    """Left-Riemann IG: (E - E') * mean_j grad(E' + (j/m)(E - E')), j = 0..m-1."""
    if steps < 1:
        raise ValueError("IG needs at least one step")
    E = np.asarray(E, dtype=np.float64)
    B = E.shape[0]
    base = np.zeros_like(E) if baseline is None else np.broadcast_to(baseline, E.shape)
    diff = E - base
    lengths = None if lengths is None else np.asarray(lengths)
    targets = np.asarray(targets)
    total = np.zeros_like(E)
    per_chunk = max(1, max_rows // max(B, 1))
    for start in range(0, steps, per_chunk):
        alphas = np.arange(start, min(steps, start + per_chunk)) / steps
        pts = base[None] + alphas[:, None, None, None] * diff[None]
        n = len(alphas)
        g = input_gradients(
            model, pts.reshape((n * B,) + E.shape[1:]),
            None if lengths is None else np.tile(lengths, n), np.tile(targets, n),
        )
        total += g.reshape((n,) + E.shape).sum(axis=0)
    return diff * (total / steps)


# -- DeepLift ---------------------------------------------------------------

_ELEMENTWISE = {"gelu", "tanh", "relu", "exp", "log", "sqrt", "pow", "power", "abs"}


def _deeplift_rule(half: int):
    """Backward overrides for a forward run on stacked [input; reference] rows.

    Elementwise nonlinearities use the rescale multiplier dy/dx (gradient when
    |dx| is tiny). Products of two input-dependent operands split the change
    with the average rule, which is exact for bilinear maps. Everything else
    (affine maps, softmax, layer norm) keeps its ordinary gradient. Adjoints
    of the reference rows are dropped.
    """

    def split_zero(g_top: np.ndarray, like: np.ndarray) -> dc.Tensor:
        out = np.zeros(like.shape)
        out[:half] = g_top
        return dc.Tensor(out)

    def rule(node, g, needs):
        op = node.op
        parents = node._parents
        if op in _ELEMENTWISE and len(parents) == 1:
            u = parents[0].data
            du = u[:half] - u[half:]
            dy = node.data[:half] - node.data[half:]
            local = node._backward(dc.Tensor(np.ones(node.shape)), needs)[0].data[:half]
            small = np.abs(du) < DEEPLIFT_EPS
            mult = np.where(small, local, dy / np.where(small, 1.0, du))
            return (split_zero(g.data[:half] * mult, u),)
        if op in ("mul", "matmul") and all(needs):
            a, b = parents[0].data, parents[1].data
            if a.shape[0] != 2 * half or b.shape[0] != 2 * half or (op == "matmul" and (a.ndim < 3 or b.ndim < 3)):
                return None
            abar = 0.5 * (a[:half] + a[half:])
            bbar = 0.5 * (b[:half] + b[half:])
            gt = g.data[:half]
            if op == "mul":
                ga = _reduce_like(gt * bbar, a[:half].shape)
                gb = _reduce_like(gt * abar, b[:half].shape)
            else:
                ga = gt @ np.swapaxes(bbar, -1, -2)
                gb = np.swapaxes(abar, -1, -2) @ gt
            return (split_zero(ga, a), split_zero(gb, b))
        return None

    return rule


def _reduce_like(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def deeplift_raw(model, E, lengths, targets, reference=None) -> np.ndarray:
    """DeepLift contributions m * (E - E_ref) with a zero reference by default."""
    E = np.asarray(E, dtype=np.float64)
    B = E.shape[0]
    ref = np.zeros_like(E) if reference is None else np.broadcast_to(reference, E.shape)
    x = dc.Tensor(np.concatenate([E, ref], axis=0), requires_grad=True)
    lens = None if lengths is None else np.concatenate([np.asarray(lengths)] * 2)
    logits = model.forward_from_embeddings(x, lens).logits
    seed = np.zeros(logits.shape)
    seed[np.arange(B), np.asarray(targets)] = 1.0
    (m,) = dc.backprop(logits, dc.Tensor(seed), [x], allow_unused=True, rule=_deeplift_rule(B))
    return m.data[:B] * (E - ref)


# -- attention-based ----------------------------------------------------------

def attention_scores(model, E, lengths, content_mask, scope: str = "last") -> np.ndarray:
    with dc.no_grad():
        out = model.forward_from_embeddings(dc.Tensor(E), lengths)
        dist, _ = cls_attention_tensor(out.attention, content_mask, scope)
    return dist.data


def scaled_attention_scores(model, E, lengths, targets, scope: str = "last") -> np.ndarray:
    """Head-mean of alpha * d logit[target] / d alpha on the first-token row, shape (B, L)."""
    out = model.forward_from_embeddings(dc.Tensor(E), lengths)
    layers = [out.attention[-1]] if scope in ("last", "last-layer") else list(out.attention)
    seed = dc.Tensor(_target_seed(out.logits.shape, targets))
    grads = dc.backprop(out.logits, seed, layers, allow_unused=True)
    per_layer = [(a.data * g.data)[:, :, 0, :].mean(axis=1) for a, g in zip(layers, grads)]
    return np.mean(per_layer, axis=0)


# ---------------------------------------------------------------------------
# example-level API
# ---------------------------------------------------------------------------

def reference_for(model, ids) -> Optional[np.ndarray]:
    """The model's attribution reference for a batch of ids, or None for zero."""
    fn = getattr(model, "reference_embeddings", None)
    return None if fn is None else fn(ids)


def attr_random(example: TokenizedExample, seed: int = 0) -> AttributionVector:
    pos = example.content_positions
    rng = np.random.default_rng([int(seed)] + list(example.ids))
    return AttributionVector(rng.random(len(pos)), "rand", None, None, pos)


def predict_labels(model, examples: Sequence[TokenizedExample], batch_size: int = 64) -> np.ndarray:
    return model.predict_proba(list(examples), batch_size=batch_size).argmax(axis=1)


def attribute(model, examples: Sequence[TokenizedExample], method: str, targets=None,
              aggregation: str = "l2", ig: IgConfig = IgConfig(), seed: int = 0,
              scope: str = "last", batch_size: int = 32) -> list:
    """Attribution vectors for a list of examples.

    ``targets`` defaults to the model's predicted labels.
    """
    if method not in METHODS:
        raise ValueError(f"unknown attribution method {method!r}; choose from {METHODS}")
    if aggregation not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {aggregation!r}")
    examples = list(examples)
    if method == "rand":
        return [attr_random(e, seed) for e in examples]
    if targets is None:
        targets = predict_labels(model, examples)
    targets = np.asarray(targets, dtype=np.int64)
    out = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start:start + batch_size]
        b = make_batch(chunk)
        t = targets[start:start + batch_size]
        with dc.no_grad():
            E = model.embed(b.ids).data
        ref = reference_for(model, b.ids)
        cm = b.content_mask()
        agg = aggregation
        if method == "attention":
            scores, agg = attention_scores(model, E, b.lengths, cm, scope), None
        elif method == "scaled_attention":
            scores, agg = scaled_attention_scores(model, E, b.lengths, t, scope), None
        else:
            if method == "saliency":
                raw = saliency_raw(model, E, b.lengths, t)
            elif method == "inputxgrad":
                raw = inputxgrad_raw(model, E, b.lengths, t, ref)
            elif method == "ig":
                raw = integrated_gradients_raw(model, E, b.lengths, t, ig.steps, ref)
            else:
                raw = deeplift_raw(model, E, b.lengths, t, ref)
            scores = aggregate(raw, aggregation)
        for i, e in enumerate(chunk):
            pos = e.content_positions
            tgt = None if method == "attention" else int(t[i])
            out.append(AttributionVector(scores[i, list(pos)], method, agg, tgt, pos))
    return out


def _one(model, example, method, target, aggregation="l2", **kw) -> AttributionVector:
    targets = None if target is None else [target]
    return attribute(model, [example], method, targets, aggregation, **kw)[0]


def attr_attention(model, example, scope: str = "last") -> AttributionVector:
    return _one(model, example, "attention", None, scope=scope)


def attr_scaled_attention(model, example, target=None, scope: str = "last") -> AttributionVector:
    return _one(model, example, "scaled_attention", target, scope=scope)


def attr_saliency(model, example, target=None, aggregation: str = "l2") -> AttributionVector:
    return _one(model, example, "saliency", target, aggregation)


def attr_inputxgrad(model, example, target=None, aggregation: str = "l2") -> AttributionVector:
    return _one(model, example, "inputxgrad", target, aggregation)


def attr_integrated_gradients(model, example, target=None, cfg: IgConfig = IgConfig(),
                              aggregation: str = "l2") -> AttributionVector:
    return _one(model, example, "ig", target, aggregation, ig=cfg)


def attr_deeplift(model, example, target=None, aggregation: str = "l2") -> AttributionVector:
    return _one(model, example, "deeplift", target, aggregation)
