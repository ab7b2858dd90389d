"""A small pre-LN transformer encoder with a first-token classification head."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .textdata import Batch, Vocabulary, make_batch

MAGIC = b"REGEXCKPT1"
HEAD_PARAMS = ("head_w", "head_b")
_MASK_VALUE = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_classes: int = 2
    embed_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 256
    max_len: int = 64
    dropout_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        for name in ("vocab_size", "num_classes", "embed_dim", "num_layers", "num_heads", "ffn_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.max_len < 2 or self.max_len > 512:
            raise ValueError("max_len must lie in [2, 512]")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass
class Forward:
    """Logits of shape (B, C) and one (B, H, L, L) attention tensor per layer."""

    logits: dc.Tensor
    attention: list


def param_shapes(cfg: ModelConfig) -> dict:
    d, f = cfg.embed_dim, cfg.ffn_dim
    shapes = {"tok_emb": (cfg.vocab_size, d), "pos_emb": (cfg.max_len, d)}
    for i in range(cfg.num_layers):
        p = f"l{i}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "wq": (d, d), p + "bq": (d,), p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,), p + "wo": (d, d), p + "bo": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w1": (d, f), p + "b1": (f,), p + "w2": (f, d), p + "b2": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "head_w": (d, cfg.num_classes), "head_b": (cfg.num_classes,)})
    return shapes


class TransformerClassifier:
    def __init__(self, config: ModelConfig, params: dict):
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.config = config
        self.params = {k: v if isinstance(v, dc.Tensor) else dc.Tensor(v, requires_grad=True, name=k)
                       for k, v in params.items()}
        for k, t in self.params.items():
            t.name = k
            t.requires_grad = True

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> list:
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def state(self) -> dict:
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state(self, state: dict) -> None:
        for k, t in self.params.items():
            t.data = np.array(state[k], dtype=np.float64)

    def copy(self) -> "TransformerClassifier":
        return TransformerClassifier(self.config, self.state())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.params.values())

    # -- forward ------------------------------------------------------------

    def embed(self, ids) -> dc.Tensor:
        """Token plus positional embedding; ``ids`` is (L,) or (B, L)."""
        ids = np.asarray(ids, dtype=np.int64)
        L = ids.shape[-1]
        if L > self.config.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {self.config.max_len}")
        tok = dc.embedding(self.params["tok_emb"], ids)
        return tok + self.params["pos_emb"][:L]

    def reference_embeddings(self, ids) -> np.ndarray:
        """Attribution reference: zero token vectors, positional embeddings kept."""
        ids = np.asarray(ids)
        pos = self.params["pos_emb"].data[: ids.shape[-1]]
        return np.broadcast_to(pos, ids.shape + (self.config.embed_dim,)).copy()

    def dropout_masks(self, rng: np.random.Generator, batch: int, length: int) -> Optional[list]:
        """Inverted-dropout masks for the embedding, attention-output and FFN-output sites."""
        p = self.config.dropout_rate
        if p == 0.0:
            return None
        shape = (batch, length, self.config.embed_dim)
        n = 1 + 2 * self.config.num_layers
        return [(rng.random(shape) >= p) / (1.0 - p) for _ in range(n)]

    def forward_from_embeddings(self, E, lengths=None, dropout=None, attn_offsets=None) -> Forward:
        """Run the encoder on embeddings ``E`` of shape (B, L, d) or (L, d).

        ``lengths`` marks real tokens per row; keys beyond it are masked out.
        ``dropout`` is a list of masks from :meth:`dropout_masks` (None means
        evaluation mode). ``attn_offsets`` adds a constant to each layer's
        attention probabilities and exists for finite-difference checks.
        """
        cfg = self.config
        E = dc.as_tensor(E)
        single = E.ndim == 2
        if single:
            E = dc.reshape(E, (1,) + E.shape)
        if E.ndim != 3 or E.shape[2] != cfg.embed_dim:
            raise ValueError(f"expected embeddings of shape (B, L, {cfg.embed_dim}), got {E.shape}")
        B, L, d = E.shape
        if L > cfg.max_len:
            raise ValueError(f"sequence length {L} exceeds max_len {cfg.max_len}")
        H, dh = cfg.num_heads, cfg.head_dim
        p = self.params
        if lengths is None:
            key_bias = None
        else:
            lengths = np.asarray(lengths).reshape(-1)
            keep = np.arange(L)[None, :] < lengths[:, None]
            key_bias = dc.Tensor(np.where(keep, 0.0, _MASK_VALUE)[:, None, None, :])
        drop = iter(dropout) if dropout is not None else None

        x = E * dc.Tensor(next(drop)) if drop is not None else E
        records = []
        for i in range(cfg.num_layers):
            q_ = f"l{i}."
            h = dc.layer_norm(x) * p[q_ + "ln1_g"] + p[q_ + "ln1_b"]
            q = _heads(dc.matmul(h, p[q_ + "wq"]) + p[q_ + "bq"], B, L, H, dh)
            k = _heads(dc.matmul(h, p[q_ + "wk"]) + p[q_ + "bk"], B, L, H, dh)
            v = _heads(dc.matmul(h, p[q_ + "wv"]) + p[q_ + "bv"], B, L, H, dh)
            scores = dc.matmul(q, dc.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
            if key_bias is not None:
                scores = scores + key_bias
            att = dc.softmax(scores, axis=-1)
            if attn_offsets is not None:
                att = att + dc.Tensor(attn_offsets[i])
            records.append(att)
            ctx = dc.reshape(dc.transpose(dc.matmul(att, v), (0, 2, 1, 3)), (B, L, d))
            a = dc.matmul(ctx, p[q_ + "wo"]) + p[q_ + "bo"]
            if drop is not None:
                a = a * dc.Tensor(next(drop))
            x = x + a
            h = dc.layer_norm(x) * p[q_ + "ln2_g"] + p[q_ + "ln2_b"]
            f = dc.matmul(dc.gelu(dc.matmul(h, p[q_ + "w1"]) + p[q_ + "b1"]), p[q_ + "w2"]) + p[q_ + "b2"]
            if drop is not None:
                f = f * dc.Tensor(next(drop))
            x = x + f
        pooled = dc.layer_norm(x[:, 0, :]) * p["lnf_g"] + p["lnf_b"]
        logits = dc.matmul(pooled, p["head_w"]) + p["head_b"]
        if single:
            logits = logits[0]
            records = [r[0] for r in records]
        return Forward(logits, records)

    def forward(self, ids, lengths=None, dropout=None) -> Forward:
        return self.forward_from_embeddings(self.embed(ids), lengths, dropout)

    def forward_batch(self, batch: Batch, dropout=None) -> Forward:
        return self.forward(batch.ids, batch.lengths, dropout)

    def predict_proba(self, examples, batch_size: int = 64) -> np.ndarray:
        """Class probabilities for one example (1-D result) or a sequence of them (2-D)."""
        single = not isinstance(examples, (list, tuple))
        rows = [examples] if single else list(examples)
        out = []
        with dc.no_grad():
            for start in range(0, len(rows), batch_size):
                b = make_batch(rows[start:start + batch_size])
                logits = self.forward_batch(b).logits.data
                out.append(_softmax_rows(logits))
        probs = np.concatenate(out, axis=0) if out else np.zeros((0, self.config.num_classes))
        return probs[0] if single else probs


def _heads(t: dc.Tensor, B: int, L: int, H: int, dh: int) -> dc.Tensor:
    return dc.transpose(dc.reshape(t, (B, L, H, dh)), (0, 2, 1, 3))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def init_params(config: ModelConfig, seed: Optional[int] = None) -> TransformerClassifier:
    """Normal(0, 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            params[name] = rng.normal(0.0, 0.02, size=shape)
    return TransformerClassifier(config, params)


# ---------------------------------------------------------------------------
# attention summaries
# ---------------------------------------------------------------------------

def cls_attention_tensor(attention: Sequence[dc.Tensor], content_mask: np.ndarray, scope: str = "last") -> tuple:
    """Differentiable first-token attention over content positions.

    Returns ``(dist, flagged)`` where ``dist`` is a (B, L) tensor that is zero
    off the content mask and sums to one per row, and ``flagged`` marks rows
    whose content mass vanished (those fall back to uniform).
    """
    if not attention:
        raise ValueError("empty attention record")
    if scope in ("last", "last-layer"):
        layers = [attention[-1]]
    elif scope in ("all", "all-layers"):
        layers = list(attention)
    else:
        raise ValueError(f"unknown attention scope {scope!r}")
    rows = [dc.mean(a[:, :, 0, :], axis=1) for a in layers]
    row = rows[0] if len(rows) == 1 else dc.mean(dc.stack(rows, axis=0), axis=0)
    cm = np.asarray(content_mask, dtype=np.float64)
    masked = row * dc.Tensor(cm)
    total = masked.data.sum(axis=-1)
    flagged = (total < 1e-300) & (cm.sum(axis=-1) > 0)
    if flagged.any():
        uniform = cm / np.maximum(cm.sum(axis=-1, keepdims=True), 1.0)
        keep = dc.Tensor((~flagged).astype(float)[:, None])
        masked = masked * keep + dc.Tensor(uniform * flagged[:, None])
    denom = dc.tsum(masked, axis=-1, keepdims=True)
    denom = denom + dc.Tensor((denom.data == 0.0).astype(float))
    return masked / denom, flagged


def cls_attention(attention: Sequence, content_positions: Sequence[int], scope: str = "last") -> tuple:
    """First-token attention for one example as ``(distribution, flagged)``.

    ``attention`` holds one (H, L, L) array or tensor per layer.
    """
    mats = [np.asarray(a.data if isinstance(a, dc.Tensor) else a, dtype=np.float64) for a in attention]
    L = mats[0].shape[-1]
    cm = np.zeros((1, L), dtype=bool)
    cm[0, list(content_positions)] = True
    with dc.no_grad():
        dist, flagged = cls_attention_tensor([dc.Tensor(m[None]) for m in mats], cm, scope)
    return dist.data[0, list(content_positions)], bool(flagged[0])


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: TransformerClassifier, vocab: Optional[Vocabulary] = None,
                    extra: Optional[dict] = None) -> None:
    manifest, offset = [], 0
    for name, t in model.params.items():
        nbytes = t.data.size * 8
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "config": asdict(model.config),
        "vocab": vocab.to_json() if vocab is not None else None,
        "tensors": manifest,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(blob)
        fh.write(b"\n")
        for t in model.params.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple:
    """Returns ``(model, vocab or None, extra)``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic bytes)")
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC):end].decode("utf-8"))
    body = memoryview(raw)[end + 1:]
    params = {}
    for entry in header["tensors"]:
        chunk = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(chunk) != entry["nbytes"]:
            raise ValueError(f"{path}: truncated tensor {entry['name']}")
        params[entry["name"]] = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(entry["shape"])
    model = TransformerClassifier(ModelConfig(**header["config"]), params)
    vocab = Vocabulary.from_json(header["vocab"]) if header.get("vocab") else None
    return model, vocab, header.get("extra", {})
