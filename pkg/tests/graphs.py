"""Random small computation graphs for gradient checking."""

import numpy as np

from faithbench import diffcore as dc


def relative_error(a, b, floor=1e-8):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


def _softplus(t, p=None):
    return dc.log(dc.exp(t) + 1.0)


# Each entry maps (tensor, params) -> tensor; shapes stay (2, 3, 4).
UNARY = {
    "matmul": lambda t, p: dc.matmul(t, p["w"]),
    "bias": lambda t, p: t + p["b"],
    "scale": lambda t, p: t * p["s"],
    "softmax": lambda t, p: dc.softmax(t, axis=-1),
    "softmax_mid": lambda t, p: dc.softmax(t, axis=1) * 3.0,
    "log_softmax": lambda t, p: dc.log_softmax(t, axis=-1),
    "layer_norm": lambda t, p: dc.layer_norm(t) * p["s"] + p["b"],
    "gelu": lambda t, p: dc.gelu(t),
    "tanh": lambda t, p: dc.tanh(t),
    "relu": lambda t, p: dc.relu(t) + 0.1 * t,
    "softplus": _softplus,
    "sqrt": lambda t, p: dc.sqrt(t * t + 1.0),
    "div": lambda t, p: t / (t * t + 2.0),
    "pow": lambda t, p: dc.power(t * t + 1.0, 1.5) * 0.3,
    "exp": lambda t, p: dc.exp(t * 0.5),
    "bmm": lambda t, p: dc.matmul(t, dc.swapaxes(t, -1, -2)) @ t * 0.2,
    "transpose": lambda t, p: dc.reshape(dc.transpose(t, (0, 2, 1)), (2, 3, 4)),
    "slice_concat": lambda t, p: dc.concat([t[:, :1, :] * 2.0, t[:, 1:, :]], axis=1),
    "reduce": lambda t, p: t - dc.mean(t, axis=-1, keepdims=True) + dc.tsum(t, axis=1, keepdims=True) * 0.1,
    "abs": lambda t, p: dc.tabs(t) + t,
    "embed": lambda t, p: t + dc.embedding(p["table"], np.array([[0, 2, 1], [1, 1, 0]])),
}


def random_graph(seed, depth=4):
    """Return (f, x0, params) where f(x, params) builds a scalar Tensor."""
    rng = np.random.default_rng(seed)
    names = sorted(UNARY)
    chain = [names[i] for i in rng.integers(0, len(names), size=depth)]
    x0 = rng.normal(size=(2, 3, 4))
    params = {
        "w": rng.normal(size=(4, 4)) * 0.5,
        "b": rng.normal(size=(4,)),
        "s": rng.normal(size=(4,)),
        "table": rng.normal(size=(3, 4)),
    }
    readout = rng.normal(size=(2, 3, 4))

    def f(x, p):
        t = x
        for name in chain:
            t = UNARY[name](t, p)
        return dc.tsum(t * readout)

    return f, x0, params, chain


def check_graph(seed, h=1e-5):
    """Relative error between reverse mode and central differences.

    Measured over the graph's whole gradient (input and parameters stacked), so
    a block whose true gradient is exactly zero is judged against the graph's
    scale rather than against its own roundoff.
    """
    f, x0, params, chain = random_graph(seed)
    x = dc.Tensor(x0, requires_grad=True)
    ps = {k: dc.Tensor(v, requires_grad=True) for k, v in params.items()}
    out = f(x, ps)
    keys = sorted(ps)
    grads = dc.grad(out, [x] + [ps[k] for k in keys], allow_unused=True)
    const = {k: dc.Tensor(v) for k, v in params.items()}
    analytic = [grads[0].data]
    numeric = [dc.finite_diff_gradient(lambda a: f(dc.Tensor(a), const), x0, h)]
    for k, g in zip(keys, grads[1:]):
        def fk(a, k=k):
            p = dict(const)
            p[k] = dc.Tensor(a)
            return f(dc.Tensor(x0), p)
        analytic.append(np.zeros_like(params[k]) if g is None else g.data)
        numeric.append(dc.finite_diff_gradient(fk, params[k], h))
    flat = lambda parts: np.concatenate([np.ravel(v) for v in parts])  # noqa: E731
    return relative_error(flat(analytic), flat(numeric)), chain
