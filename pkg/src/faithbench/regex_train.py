"""Robustness-regularised, explanation-guided training.

The objective is

    L = l1 * CE + l2 * (mean_b ||dCE_b/dE_b|| + ||theta||) + l3 * VAT + l4 * EGT

where VAT is the KL divergence of predictions at an adversarially perturbed
embedding from the (constant) clean prediction, and EGT aligns first-token
attention on the input and on a copy with its least-attributed tokens masked
with the normalised integrated-gradients distribution of the gold label.

Every quantity that is held constant inside a step (dropout masks, the clean
distribution, the adversarial perturbation, the gradient-penalty direction,
the IG distribution and the masked inputs) is collected in
:class:`RegexTargets`; given targets, :func:`regex_objective` is a plain
differentiable function of the parameters.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .attribution import IgConfig, aggregate, normalize_to_distribution, rationale_size
from .model import HEAD_PARAMS, TransformerClassifier, cls_attention_tensor
from .textdata import MASK, PAD, Batch, TokenizedExample, make_batch

LAMBDA4_SWEEP = (0.0005, 0.001, 0.005, 0.01, 0.05)
MASK_RATIO_SWEEP = (0.05, 0.10, 0.15, 0.20, 0.30)
MASK_MODES = ("mask", "zero", "delete")


class TrainingDiverged(FloatingPointError):
    """A loss or gradient became non-finite during training."""


@dataclass(frozen=True)
class VatConfig:
    eps: float = 1e-5
    step: float = 1e-3
    steps: int = 2
    sigma: float = 1e-5
    norm: str = "linf"
    symmetric: bool = False

    def __post_init__(self):
        if self.eps <= 0 or self.step <= 0 or self.sigma <= 0:
            raise ValueError("VAT eps, step and sigma must be positive")
        if self.steps < 1:
            raise ValueError("VAT needs at least one ascent step")
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unknown VAT norm {self.norm!r}")


@dataclass(frozen=True)
class RegexTrainConfig:
    lambda1: float = 1.0
    lambda2: float = 0.01
    lambda3: float = 0.5
    lambda4: float = 0.01
    mask_ratio: float = 0.15
    vat: VatConfig = VatConfig()
    ig_steps: int = 8
    lr_encoder: float = 1e-5
    lr_head: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 10
    grad_clip: float = 1.0
    grad_accum_fraction: float = 0.1
    seed: int = 0
    mode: str = "regex"
    disable_vat: bool = False
    disable_igr: bool = False
    disable_egt: bool = False
    igr_mode: str = "finite-diff"
    igr_h: float = 1e-4
    kl_order: str = "att_ig"
    mask_mode: str = "mask"
    attention_scope: str = "last"

    def __post_init__(self):
        for i in (1, 2, 3, 4):
            if getattr(self, f"lambda{i}") < 0:
                raise ValueError(f"lambda{i} must be nonnegative")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")
        if self.mode not in ("baseline", "regex"):
            raise ValueError(f"mode must be 'baseline' or 'regex', got {self.mode!r}")
        if self.igr_mode not in ("finite-diff", "exact"):
            raise ValueError(f"unknown igr_mode {self.igr_mode!r}")
        if self.kl_order not in ("att_ig", "ig_att"):
            raise ValueError(f"unknown kl_order {self.kl_order!r}")
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"unknown mask_mode {self.mask_mode!r}")
        if self.ig_steps < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("ig_steps, batch_size and epochs must be positive")
        if not 0.0 <= self.grad_accum_fraction < 1.0:
            raise ValueError("grad_accum_fraction must lie in [0, 1)")

    @property
    def use_vat(self) -> bool:
        return self.mode == "regex" and not self.disable_vat and self.lambda3 > 0

    @property
    def use_igr(self) -> bool:
        return self.mode == "regex" and not self.disable_igr and self.lambda2 > 0

    @property
    def use_egt(self) -> bool:
        return self.mode == "regex" and not self.disable_egt and self.lambda4 > 0


# ---------------------------------------------------------------------------
# elementary losses
# ---------------------------------------------------------------------------

def per_example_ce(logits: dc.Tensor, labels) -> dc.Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    return -dc.log_softmax(logits, axis=-1)[np.arange(len(labels)), labels]


def _entropy_term(p: np.ndarray) -> np.ndarray:
    return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=-1)


def kl_const_first(p: np.ndarray, logits: dc.Tensor) -> dc.Tensor:
    """Per-row KL(p || softmax(logits)) with ``p`` a constant distribution."""
    return dc.Tensor(_entropy_term(p)) - dc.tsum(dc.log_softmax(logits, axis=-1) * dc.Tensor(p), axis=-1)


def kl_rows(p: dc.Tensor, q: np.ndarray, mask: np.ndarray, floor: float = 1e-12) -> dc.Tensor:
    """Per-row KL(p || q) over the entries where ``mask`` is set; ``q`` is constant."""
    mask = np.asarray(mask, dtype=bool)
    off = dc.Tensor((~mask).astype(float))
    qs = np.where(mask, q, 1.0)
    logp = dc.log(p + off + floor)
    return dc.tsum(p * (logp - dc.Tensor(np.log(qs))), axis=-1)


def kl_rows_reversed(p: dc.Tensor, q: np.ndarray, mask: np.ndarray, floor: float = 1e-12) -> dc.Tensor:
    """Per-row KL(q || p) for a constant ``q``."""
    mask = np.asarray(mask, dtype=bool)
    qm = np.where(mask, q, 0.0)
    off = dc.Tensor((~mask).astype(float))
    return dc.Tensor(_entropy_term(qm)) - dc.tsum(dc.log(p + off + floor) * dc.Tensor(qm), axis=-1)


def param_norm(model) -> dc.Tensor:
    total = None
    for p in model.parameters():
        s = dc.tsum(p * p)
        total = s if total is None else total + s
    return dc.sqrt(total)


def loss_classify(model, batch: Batch, dropout=None) -> dc.Tensor:
    if batch.size == 0:
        raise ValueError("empty batch")
    logits = model.forward_batch(batch, dropout).logits
    return dc.mean(per_example_ce(logits, batch.labels))


# ---------------------------------------------------------------------------
# adversarial perturbation
# ---------------------------------------------------------------------------

def _normalize_step(g: np.ndarray, norm: str) -> np.ndarray:
    flat = g.reshape(g.shape[0], -1)
    if norm == "linf":
        scale = np.abs(flat).max(axis=1)
    else:
        scale = np.sqrt((flat * flat).sum(axis=1))
    scale = np.where(scale > 0, scale, 1.0)
    return g / scale.reshape((-1,) + (1,) * (g.ndim - 1))


def project(delta: np.ndarray, eps: float, norm: str = "linf") -> np.ndarray:
    if norm == "linf":
        return np.clip(delta, -eps, eps)
    flat = delta.reshape(delta.shape[0], -1)
    n = np.sqrt((flat * flat).sum(axis=1))
    factor = np.minimum(1.0, eps / np.where(n > 0, n, 1.0))
    return delta * factor.reshape((-1,) + (1,) * (delta.ndim - 1))


def _vat_divergence(p_clean: np.ndarray, logits: dc.Tensor, symmetric: bool) -> dc.Tensor:
    fwd = kl_const_first(p_clean, logits)
    if not symmetric:
        return fwd
    q = dc.softmax(logits, axis=-1)
    back = dc.tsum(q * (dc.log_softmax(logits, axis=-1) - dc.Tensor(np.log(np.maximum(p_clean, 1e-300)))), axis=-1)
    return fwd + back


def ascent_step(delta: np.ndarray, g: np.ndarray, cfg: VatConfig) -> np.ndarray:
    return project(delta + cfg.step * _normalize_step(g, cfg.norm), cfg.eps, cfg.norm)


def vat_perturbation(model, batch: Batch, cfg: VatConfig, rng: np.random.Generator,
                     dropout=None, trace: Optional[list] = None) -> np.ndarray:
    """Projected ascent on KL(f(x) || f(x + delta)) starting from Gaussian noise.

    When ``trace`` is a list, the divergence at each iterate (delta_0 .. delta_C)
    is appended to it.
    """
    with dc.no_grad():
        E = model.embed(batch.ids).data
        p_clean = _softmax(model.forward_from_embeddings(dc.Tensor(E), batch.lengths, dropout).logits.data)
    delta = rng.normal(0.0, cfg.sigma, size=E.shape)
    for _ in range(cfg.steps):
        x = dc.Tensor(E + delta, requires_grad=True)
        div = _vat_divergence(p_clean, model.forward_from_embeddings(x, batch.lengths, dropout).logits, cfg.symmetric)
        if trace is not None:
            trace.append(float(div.data.mean()))
        (g,) = dc.grad(dc.tsum(div), [x])
        delta = ascent_step(delta, g.data, cfg)
    if trace is not None:
        with dc.no_grad():
            div = _vat_divergence(p_clean, model.forward_from_embeddings(
                dc.Tensor(E + delta), batch.lengths, dropout).logits, cfg.symmetric)
        trace.append(float(div.data.mean()))
    return delta


def loss_vat(model, batch: Batch, cfg: VatConfig, delta: np.ndarray, dropout=None) -> dc.Tensor:
    E = model.embed(batch.ids)
    with dc.no_grad():
        p_clean = _softmax(model.forward_from_embeddings(dc.Tensor(E.data), batch.lengths, dropout).logits.data)
    logits = model.forward_from_embeddings(E + dc.Tensor(delta), batch.lengths, dropout).logits
    return dc.mean(_vat_divergence(p_clean, logits, cfg.symmetric))


# ---------------------------------------------------------------------------
# gradient penalty
# ---------------------------------------------------------------------------

def input_grad_norms(model, batch: Batch, dropout=None) -> np.ndarray:
    """||d CE_b / d E_b|| per example."""
    E = dc.Tensor(model.embed(batch.ids).data, requires_grad=True)
    ce = per_example_ce(model.forward_from_embeddings(E, batch.lengths, dropout).logits, batch.labels)
    (g,) = dc.grad(dc.tsum(ce), [E])
    return np.sqrt((g.data.reshape(batch.size, -1) ** 2).sum(axis=1))


def loss_igr(model, batch: Batch, dropout=None) -> float:
    """Value of the gradient penalty: batch-mean input-gradient norm plus parameter norm."""
    with dc.no_grad():
        pn = float(param_norm(model).item())
    return float(input_grad_norms(model, batch, dropout).mean()) + pn


# ---------------------------------------------------------------------------
# explanation-guided masking
# ---------------------------------------------------------------------------

@dataclass
class MaskedExample:
    ids: tuple
    masked: tuple
    label: int = 0


@dataclass
class MaskedBatch:
    """Masked copies of a batch plus the IG distribution aligned to them."""

    ids: np.ndarray
    lengths: np.ndarray
    content_mask: np.ndarray
    q: np.ndarray
    keep: np.ndarray  # 1 where the token embedding survives (zero mode)


def bottom_positions(scores: np.ndarray, positions: Sequence[int], ratio: float) -> tuple:
    """Positions of the max(1, ceil(ratio n)) lowest scores, ties to the lower index."""
    n = len(positions)
    if n == 0:
        return ()
    order = np.lexsort((np.arange(n), np.asarray(scores, dtype=np.float64)))
    chosen = order[: rationale_size(n, ratio)]
    return tuple(sorted(positions[i] for i in chosen))


def ig_content_scores(model, batch: Batch, steps: int) -> tuple:
    """l2-aggregated IG of the gold label, (B, L), and the distribution Q over content positions."""
    from .attribution import integrated_gradients_raw, reference_for

    with dc.no_grad():
        E = model.embed(batch.ids).data
    raw = integrated_gradients_raw(model, E, batch.lengths, batch.labels, steps, reference_for(model, batch.ids))
    return _ig_to_distribution(aggregate(raw, "l2"), batch.content_mask())


def _ig_to_distribution(scores: np.ndarray, cm: np.ndarray) -> tuple:
    q = np.zeros_like(scores)
    for b in range(scores.shape[0]):
        idx = np.flatnonzero(cm[b])
        if len(idx):
            q[b, idx] = normalize_to_distribution(scores[b, idx])
    return scores, q


def build_masked(batch: Batch, scores: np.ndarray, q: np.ndarray, ratio: float, mode: str) -> MaskedBatch:
    cm = batch.content_mask()
    ids = batch.ids.copy()
    lengths = batch.lengths.copy()
    keep = np.ones(ids.shape)
    qt = q.copy()
    cmt = cm.copy()
    for b in range(batch.size):
        pos = tuple(np.flatnonzero(cm[b]).tolist())
        masked = bottom_positions(scores[b, list(pos)], pos, ratio)
        if mode == "mask":
            ids[b, list(masked)] = MASK
        elif mode == "zero":
            keep[b, list(masked)] = 0.0
        else:
            survivors = [p for p in range(batch.lengths[b]) if p not in set(masked)]
            row = np.full(ids.shape[1], PAD)
            row[: len(survivors)] = batch.ids[b, survivors]
            ids[b] = row
            lengths[b] = len(survivors)
            qrow = np.zeros(ids.shape[1])
            crow = np.zeros(ids.shape[1], dtype=bool)
            for new, old in enumerate(survivors):
                if cm[b, old]:
                    qrow[new] = q[b, old]
                    crow[new] = True
            if qrow.sum() > 0:
                qrow = qrow / qrow.sum()
            qt[b], cmt[b] = qrow, crow
    return MaskedBatch(ids, lengths, cmt, qt, keep)


def egt_mask(model, example: TokenizedExample, K: float, ig_cfg: IgConfig = IgConfig(8)) -> MaskedExample:
    if not 0.0 < K < 1.0:
        raise ValueError(f"mask ratio must lie in (0, 1), got {K}")
    b = make_batch([example])
    scores, _ = ig_content_scores(model, b, ig_cfg.steps)
    pos = example.content_positions
    masked = bottom_positions(scores[0, list(pos)], pos, K)
    ids = list(example.ids)
    for p in masked:
        ids[p] = MASK
    return MaskedExample(tuple(ids), masked, example.label)


def _attention_kl(att: dc.Tensor, q: np.ndarray, cm: np.ndarray, order: str) -> dc.Tensor:
    return kl_rows(att, q, cm) if order == "att_ig" else kl_rows_reversed(att, q, cm)


def loss_egt(model, example: TokenizedExample, masked: MaskedExample, ig_cfg: IgConfig = IgConfig(8),
             order: str = "att_ig", scope: str = "last") -> dc.Tensor:
    """KL(att(x) || Q) + KL(att(x_masked) || Q) for one example."""
    b = make_batch([example])
    _, q = ig_content_scores(model, b, ig_cfg.steps)
    cm = b.content_mask()
    rows = np.array([example.ids, masked.ids])
    out = model.forward(rows, np.array([example.length] * 2))
    att, _ = cls_attention_tensor(out.attention, np.concatenate([cm, cm]), scope)
    kl = _attention_kl(att, np.concatenate([q, q]), np.concatenate([cm, cm]), order)
    return dc.tsum(kl)


# ---------------------------------------------------------------------------
# targets and objective
# ---------------------------------------------------------------------------

@dataclass
class RegexTargets:
    dropout: Optional[list] = None
    p_clean: Optional[np.ndarray] = None
    delta: Optional[np.ndarray] = None
    igr_dir: Optional[np.ndarray] = None
    grad_norm: Optional[np.ndarray] = None
    ig_scores: Optional[np.ndarray] = None
    q: Optional[np.ndarray] = None
    masked: Optional[MaskedBatch] = None


@dataclass
class _Clean:
    E: dc.Tensor
    logits: dc.Tensor
    attention: list


def _tile(masks, reps: int, extra_ones: int = 0):
    if masks is None:
        return None
    out = []
    for m in masks:
        parts = [m] * reps
        if extra_ones:
            parts.append(np.ones((extra_ones,) + m.shape[1:]))
        out.append(np.concatenate(parts, axis=0))
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def build_targets(model: TransformerClassifier, batch: Batch, cfg: RegexTrainConfig,
                  dropout_rng: np.random.Generator, noise_rng: np.random.Generator) -> tuple:
    """Compute the step's constant targets, sharing passes across components.

    Returns ``(targets, clean)`` where ``clean`` caches the clean forward graph
    for reuse by :func:`regex_objective`.
    """
    B, L = batch.ids.shape
    masks = model.dropout_masks(dropout_rng, B, L)
    t = RegexTargets(dropout=masks)
    E = model.embed(batch.ids)
    if not (cfg.use_vat or cfg.use_igr or cfg.use_egt):
        fwd = model.forward_from_embeddings(E, batch.lengths, masks)
        return t, _Clean(E, fwd.logits, fwd.attention)

    vat = cfg.vat
    # stage 1: clean rows, plus the first VAT probe
    if cfg.use_vat:
        t.delta = noise_rng.normal(0.0, vat.sigma, size=E.shape)
        probe = dc.Tensor(E.data + t.delta, requires_grad=True)
        fwd = model.forward_from_embeddings(dc.concat([E, probe], axis=0), np.tile(batch.lengths, 2),
                                            _tile(masks, 2))
        logits = fwd.logits[:B]
        clean = _Clean(E, logits, [a[:B] for a in fwd.attention])
    else:
        fwd = model.forward_from_embeddings(E, batch.lengths, masks)
        logits = fwd.logits
        clean = _Clean(E, logits, fwd.attention)
    t.p_clean = _softmax(logits.data)

    if cfg.use_vat or cfg.use_igr:
        scalar, wrt = None, []
        if cfg.use_igr:
            scalar = dc.tsum(per_example_ce(logits, batch.labels))
            wrt.append(E)
        if cfg.use_vat:
            div = dc.tsum(_vat_divergence(t.p_clean, fwd.logits[B:], vat.symmetric))
            scalar = div if scalar is None else scalar + div
            wrt.append(probe)
        grads = dc.grad(scalar, wrt)
        if cfg.use_igr:
            g = grads[0].data
            norms = np.sqrt((g.reshape(B, -1) ** 2).sum(axis=1))
            t.grad_norm = norms
            t.igr_dir = g / np.where(norms > 0, norms, 1.0)[:, None, None]
        if cfg.use_vat:
            t.delta = ascent_step(t.delta, grads[-1].data, vat)

    # stage 2: remaining VAT ascent steps; IG path points ride along with the first
    E0 = E.data
    pending_ig = cfg.use_egt
    remaining = vat.steps - 1 if cfg.use_vat else 0
    while remaining > 0 or pending_ig:
        blocks, lens, seeds_fn = [], [], []
        n_vat = B if remaining > 0 else 0
        if n_vat:
            blocks.append(E0 + t.delta)
            lens.append(batch.lengths)
        n_ig = 0
        if pending_ig:
            from .attribution import reference_for
            ref = reference_for(model, batch.ids)
            ref = np.zeros_like(E0) if ref is None else ref
            alphas = np.arange(cfg.ig_steps) / cfg.ig_steps
            pts = ref[None] + alphas[:, None, None, None] * (E0 - ref)[None]
            blocks.append(pts.reshape((-1,) + E0.shape[1:]))
            lens.append(np.tile(batch.lengths, cfg.ig_steps))
            n_ig = B * cfg.ig_steps
        x = dc.Tensor(np.concatenate(blocks, axis=0), requires_grad=True)
        drop = None
        if masks is not None:
            drop = [np.concatenate(([m] if n_vat else []) + [np.ones((n_ig,) + m.shape[1:])], axis=0) for m in masks]
        out = model.forward_from_embeddings(x, np.concatenate(lens), drop)
        scalar = None
        if n_vat:
            scalar = dc.tsum(_vat_divergence(t.p_clean, out.logits[:B], vat.symmetric))
        if n_ig:
            labels = np.tile(batch.labels, cfg.ig_steps)
            sel = out.logits[n_vat + np.arange(n_ig), labels]
            scalar = dc.tsum(sel) if scalar is None else scalar + dc.tsum(sel)
        (g,) = dc.grad(scalar, [x])
        if n_vat:
            t.delta = ascent_step(t.delta, g.data[:B], vat)
            remaining -= 1
        if n_ig:
            gi = g.data[n_vat:].reshape((cfg.ig_steps,) + E0.shape).mean(axis=0)
            scores, q = _ig_to_distribution(aggregate((E0 - ref) * gi, "l2"), batch.content_mask())
            t.ig_scores, t.q = scores, q
            t.masked = build_masked(batch, scores, q, cfg.mask_ratio, cfg.mask_mode)
            pending_ig = False
    return t, clean


def regex_objective(model: TransformerClassifier, batch: Batch, cfg: RegexTrainConfig,
                    targets: RegexTargets, clean: Optional[_Clean] = None) -> tuple:
    """Weighted total loss and its components as floats."""
    B = batch.size
    masks = targets.dropout
    if clean is None:
        E = model.embed(batch.ids)
        fwd = model.forward_from_embeddings(E, batch.lengths, masks)
        clean = _Clean(E, fwd.logits, fwd.attention)
    E = clean.E
    ce_rows = per_example_ce(clean.logits, batch.labels)
    l_cls = dc.mean(ce_rows)
    total = l_cls * cfg.lambda1 if cfg.lambda1 != 1.0 else l_cls
    parts = {"classify": l_cls}

    use_fd_igr = cfg.use_igr and cfg.igr_mode == "finite-diff"
    blocks, lens, names = [], [], []
    if cfg.use_vat:
        blocks.append(E + dc.Tensor(targets.delta))
        lens.append(batch.lengths)
        names.append("vat")
    if use_fd_igr:
        blocks.append(E + dc.Tensor(cfg.igr_h * targets.igr_dir))
        lens.append(batch.lengths)
        names.append("igr")
    if cfg.use_egt:
        mb = targets.masked
        if cfg.mask_mode == "zero":
            tok = dc.embedding(model.params["tok_emb"], mb.ids) * dc.Tensor(mb.keep[..., None])
            blocks.append(tok + model.params["pos_emb"][: mb.ids.shape[1]])
        else:
            blocks.append(model.embed(mb.ids))
        lens.append(mb.lengths)
        names.append("egt")

    if blocks:
        out = model.forward_from_embeddings(dc.concat(blocks, axis=0) if len(blocks) > 1 else blocks[0],
                                            np.concatenate(lens), _tile(masks, len(blocks)))
        span = {n: slice(i * B, (i + 1) * B) for i, n in enumerate(names)}
        if cfg.use_vat:
            l_at = dc.mean(_vat_divergence(targets.p_clean, out.logits[span["vat"]], cfg.vat.symmetric))
            parts["vat"] = l_at
            total = total + l_at * cfg.lambda3
        if use_fd_igr:
            shifted = dc.tsum(per_example_ce(out.logits[span["igr"]], batch.labels))
            surrogate = (shifted - dc.tsum(ce_rows)) * (1.0 / (cfg.igr_h * B))
            l_gr = surrogate + param_norm(model)
            parts["igr"] = l_gr
            total = total + l_gr * cfg.lambda2
        if cfg.use_egt:
            cm = batch.content_mask()
            att, _ = cls_attention_tensor(clean.attention, cm, cfg.attention_scope)
            att_t, _ = cls_attention_tensor([a[span["egt"]] for a in out.attention],
                                            targets.masked.content_mask, cfg.attention_scope)
            kl = (_attention_kl(att, targets.q, cm, cfg.kl_order)
                  + _attention_kl(att_t, targets.masked.q, targets.masked.content_mask, cfg.kl_order))
            l_kl = dc.mean(kl)
            parts["egt"] = l_kl
            total = total + l_kl * cfg.lambda4
    if cfg.use_igr and cfg.igr_mode == "exact":
        (g,) = dc.grad(dc.tsum(ce_rows), [E], create_graph=True)
        sq = dc.tsum(dc.reshape(g * g, (B, -1)), axis=1)
        l_gr = dc.mean(dc.sqrt(sq + 1e-30)) + param_norm(model)
        parts["igr"] = l_gr
        total = total + l_gr * cfg.lambda2
    return total, {k: float(v.item()) for k, v in parts.items()}


def total_loss(model, batch: Batch, cfg: RegexTrainConfig, seed: int = 0) -> tuple:
    """One-shot objective with fresh targets; returns ``(Tensor, components)``."""
    rng_d = np.random.default_rng([seed, 1])
    rng_n = np.random.default_rng([seed, 2])
    targets, clean = build_targets(model, batch, cfg, rng_d, rng_n)
    return regex_objective(model, batch, cfg, targets, clean)


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay and per-parameter learning rates."""

    def __init__(self, params: dict, lrs: dict, weight_decay: float = 0.01,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lrs = lrs
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros(p.shape) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in params.items()}

    def step(self, grads: dict, scale: float = 1.0) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            lr = self.lrs[k] * scale
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            if self.wd and p.ndim >= 2:
                upd = upd + self.wd * p.data
            p.data = p.data - lr * upd


def lr_scale(step: int, total: int, warmup_fraction: float) -> float:
    """Linear warm-up over ``warmup_fraction`` of the steps, then linear decay to zero."""
    warm = int(math.ceil(warmup_fraction * total))
    if warm and step < warm:
        return (step + 1) / warm
    return max(0.0, (total - step) / max(1, total - warm))


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        f = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * f
    return norm


@dataclass
class TrainResult:
    model: TransformerClassifier
    log: list
    best_epoch: int
    best_f1: float
    epoch_seconds: list = field(default_factory=list)


def _check_disjoint(train, dev) -> None:
    seen = {e.ids for e in train}
    if any(e.ids in seen for e in dev):
        raise ValueError("train and dev splits overlap")


def evaluate_f1(model, examples, batch_size: int = 64) -> tuple:
    """(macro F1, accuracy, mean cross-entropy) on labelled examples."""
    from .faitheval import macro_f1

    probs = model.predict_proba(list(examples), batch_size=batch_size)
    pred = probs.argmax(axis=1)
    labels = np.array([e.label for e in examples])
    ce = float(-np.log(np.maximum(probs[np.arange(len(labels)), labels], 1e-300)).mean())
    return macro_f1(pred, labels, model.config.num_classes), float((pred == labels).mean()), ce


def train(model: TransformerClassifier, train_examples: Sequence[TokenizedExample],
          dev_examples: Sequence[TokenizedExample], cfg: RegexTrainConfig,
          log_path=None, on_epoch=None) -> TrainResult:
    """Train in place and restore the parameters of the best dev macro-F1 epoch."""
    train_examples = list(train_examples)
    dev_examples = list(dev_examples)
    if not train_examples:
        raise ValueError("empty training set")
    _check_disjoint(train_examples, dev_examples)
    steps_per_epoch = math.ceil(len(train_examples) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    lrs = {k: (cfg.lr_head if k in HEAD_PARAMS else cfg.lr_encoder) for k in model.params}
    opt = AdamW(model.params, lrs, cfg.weight_decay)
    rng_d = np.random.default_rng([cfg.seed, 1])
    rng_n = np.random.default_rng([cfg.seed, 2])
    names = list(model.params)
    best_key, best_f1, best_epoch, best_state = None, -1.0, -1, None
    log, seconds = [], []
    step = 0
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, 0, epoch]).permutation(len(train_examples))
            sums: dict = {}
            t0 = time.perf_counter()
            for start in range(0, len(order), cfg.batch_size):
                batch = make_batch([train_examples[i] for i in order[start:start + cfg.batch_size]])
                parts = {}
                try:
                    targets, clean = build_targets(model, batch, cfg, rng_d, rng_n)
                    loss, parts = regex_objective(model, batch, cfg, targets, clean)
                    if not math.isfinite(loss.item()):
                        raise dc.NonFiniteError("non-finite total loss")
                    grads = dc.grad(loss, model.parameters(), allow_unused=True)
                except dc.NonFiniteError as exc:
                    raise TrainingDiverged(f"epoch {epoch} step {step}: {exc}; components {parts}") from exc
                g = {k: gr.data for k, gr in zip(names, grads)}
                clip_grads(g, cfg.grad_clip)
                opt.step(g, lr_scale(step, total_steps, cfg.grad_accum_fraction))
                step += 1
                parts["total"] = float(loss.item())
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                del loss, clean, targets, grads
            elapsed = time.perf_counter() - t0
            seconds.append(elapsed)
            f1, acc, dev_ce = evaluate_f1(model, dev_examples) if dev_examples else (0.0, 0.0, 0.0)
            entry = {"epoch": epoch, "loss": {k: v / steps_per_epoch for k, v in sums.items()},
                     "dev_macro_f1": f1, "dev_accuracy": acc, "dev_loss": dev_ce, "seconds": elapsed}
            log.append(entry)
            if fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")
                fh.flush()
            if on_epoch:
                on_epoch(entry)
            # dev F1 saturates on easy corpora; ties go to the lower dev cross-entropy
            key = (f1, -dev_ce)
            if best_key is None or key > best_key:
                best_key, best_f1, best_epoch, best_state = key, f1, epoch, model.state()
    finally:
        if fh:
            fh.close()
    if best_state is not None:
        model.load_state(best_state)
    return TrainResult(model, log, best_epoch, best_f1, seconds)


def config_to_dict(cfg: RegexTrainConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> RegexTrainConfig:
    d = dict(d)
    if isinstance(d.get("vat"), dict):
        d["vat"] = VatConfig(**d["vat"])
    return RegexTrainConfig(**d)
