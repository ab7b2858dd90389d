"""Tiny models with closed-form attributions, exposing forward_from_embeddings."""

import numpy as np

from faithbench import diffcore as dc
from faithbench.model import Forward


class LinearTokenModel:
    """logit_c = sum_{i,j} W[c, i, j] E[i, j] + b_c."""

    def __init__(self, W, b=None):
        self.W = np.asarray(W, dtype=float)
        self.b = np.zeros(self.W.shape[0]) if b is None else np.asarray(b, dtype=float)

    def forward_from_embeddings(self, E, lengths=None, dropout=None, attn_offsets=None):
        E = dc.as_tensor(E)
        B, L, d = E.shape
        C = self.W.shape[0]
        flat = dc.reshape(E, (B, L * d))
        logits = dc.matmul(flat, dc.Tensor(self.W[:, :L, :].reshape(C, L * d).T)) + dc.Tensor(self.b)
        return Forward(logits, [])


class ReluNet:
    """Flatten -> relu layers -> linear readout."""

    def __init__(self, weights, biases, readout):
        self.weights = [np.asarray(w, float) for w in weights]
        self.biases = [np.asarray(b, float) for b in biases]
        self.readout = np.asarray(readout, float)

    def forward_from_embeddings(self, E, lengths=None, dropout=None, attn_offsets=None):
        E = dc.as_tensor(E)
        h = dc.reshape(E, (E.shape[0], -1))
        for w, b in zip(self.weights, self.biases):
            h = dc.relu(dc.matmul(h, dc.Tensor(w)) + dc.Tensor(b))
        return Forward(dc.matmul(h, dc.Tensor(self.readout)), [])

    def logit(self, E, c=0):
        with dc.no_grad():
            return self.forward_from_embeddings(dc.Tensor(E)).logits.data[:, c]


def random_relu_net(rng, in_dim, hidden=(6, 5), classes=2):
    dims = (in_dim,) + tuple(hidden)
    ws = [rng.normal(size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
    bs = [rng.normal(size=(b,)) * 0.5 for b in dims[1:]]
    return ReluNet(ws, bs, rng.normal(size=(dims[-1], classes)))
