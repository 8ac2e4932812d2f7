"""One-hidden-layer MLPs with hand-written backprop, Adam, and the reward model."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import LoggedDataset, SlateSpace

HEADS = ("identity", "log_softmax")
_HEAD_CODES = {"identity": 0, "log_softmax": 1}
_MAGIC = b"SOPEMLP1"


def log_softmax(u: np.ndarray, groups: Optional[tuple] = None) -> np.ndarray:
    """Row-wise log-softmax, applied separately to each column group."""
    if groups is None:
        groups = (u.shape[-1],)
    out = np.empty_like(u)
    start = 0
    for g in groups:
        block = u[..., start : start + g]
        m = block.max(axis=-1, keepdims=True)
        out[..., start : start + g] = block - m - np.log(np.exp(block - m).sum(axis=-1, keepdims=True))
        start += g
    return out


def _log_softmax_backward(logp: np.ndarray, grad: np.ndarray, groups) -> np.ndarray:
    out = np.empty_like(grad)
    start = 0
    for g in groups:
        sl = slice(start, start + g)
        out[..., sl] = grad[..., sl] - np.exp(logp[..., sl]) * grad[..., sl].sum(axis=-1, keepdims=True)
        start += g
    return out


NETWORK_METADATA = {"hidden_layers": 1, "activation": "relu", "init": "uniform(-1, 1) / sqrt(fan_in), zero biases"}


class Mlp:
    """``d_in -> hidden (ReLU) -> d_out`` network in float64.

    ``head="log_softmax"`` returns log-probabilities, normalised within each
    block of ``groups`` (a single block by default).
    """

    def __init__(self, params: dict, head: str = "identity", groups: Optional[tuple] = None):
        if head not in HEADS:
            raise ValueError(f"unknown head {head!r}")
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.head = head
        d_out = self.params["W2"].shape[1]
        self.groups = tuple(groups) if groups is not None else (d_out,)
        if sum(self.groups) != d_out:
            raise ValueError("output groups must cover the output layer")
        self._check_shapes()

    @classmethod
    def init(cls, d_in: int, d_out: int, hidden: int = 100, head: str = "identity", groups=None, rng=None):
        """Fan-in scaled uniform initialisation, zero biases."""
        rng = np.random.default_rng() if rng is None else rng
        params = {
            "W1": rng.uniform(-1, 1, (d_in, hidden)) / np.sqrt(d_in),
            "b1": np.zeros(hidden),
            "W2": rng.uniform(-1, 1, (hidden, d_out)) / np.sqrt(hidden),
            "b2": np.zeros(d_out),
        }
        return cls(params, head, groups)

    def _check_shapes(self):
        p = self.params
        d_in, h = p["W1"].shape
        if p["b1"].shape != (h,) or p["W2"].shape[0] != h or p["b2"].shape != (p["W2"].shape[1],):
            raise ValueError("inconsistent parameter shapes")

    @property
    def sizes(self) -> tuple:
        return (self.params["W1"].shape[0], self.params["W1"].shape[1], self.params["W2"].shape[1])

    def copy(self) -> "Mlp":
        return Mlp({k: v.copy() for k, v in self.params.items()}, self.head, self.groups)

    def forward(self, X) -> np.ndarray:
        return self.forward_cache(X)[0]

    def forward_cache(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.sizes[0]:
            raise ValueError(f"input dimension {X.shape[1]} != {self.sizes[0]}")
        p = self.params
        pre = X @ p["W1"] + p["b1"]
        h = np.maximum(pre, 0.0)
        out = h @ p["W2"] + p["b2"]
        if self.head == "log_softmax":
            out = log_softmax(out, self.groups)
        cache = (X, pre, h, out)
        return (out[0] if single else out), cache

    def backward(self, cache, grad_out):
        """Gradients of ``sum(grad_out * output)`` w.r.t. parameters and input."""
        X, pre, h, out = cache
        g = np.asarray(grad_out, dtype=np.float64).reshape(out.shape)
        if self.head == "log_softmax":
            g = _log_softmax_backward(out, g, self.groups)
        p = self.params
        grads = {"W2": h.T @ g, "b2": g.sum(axis=0)}
        gh = (g @ p["W2"].T) * (pre > 0)
        grads["W1"] = X.T @ gh
        grads["b1"] = gh.sum(axis=0)
        return grads, gh @ p["W1"].T

    # -- serialisation -------------------------------------------------
    def to_bytes(self) -> bytes:
        d_in, h, d_out = self.sizes
        header = _MAGIC + struct.pack("<4I", d_in, h, d_out, _HEAD_CODES[self.head])
        header += struct.pack("<I", len(self.groups)) + struct.pack(f"<{len(self.groups)}I", *self.groups)
        flat = np.concatenate([self.params[k].ravel() for k in ("W1", "b1", "W2", "b2")])
        return header + flat.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Mlp":
        if blob[:8] != _MAGIC:
            raise ValueError("not an MLP checkpoint")
        d_in, h, d_out, code = struct.unpack("<4I", blob[8:24])
        (n_groups,) = struct.unpack("<I", blob[24:28])
        groups = struct.unpack(f"<{n_groups}I", blob[28 : 28 + 4 * n_groups])
        flat = np.frombuffer(blob[28 + 4 * n_groups :], dtype="<f8").astype(np.float64)
        shapes = {"W1": (d_in, h), "b1": (h,), "W2": (h, d_out), "b2": (d_out,)}
        if flat.size != sum(int(np.prod(s)) for s in shapes.values()):
            raise ValueError("checkpoint size does not match its header")
        params, start = {}, 0
        for k, s in shapes.items():
            size = int(np.prod(s))
            params[k] = flat[start : start + size].reshape(s).copy()
            start += size
        head = {v: k for k, v in _HEAD_CODES.items()}[code]
        return cls(params, head, groups)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Mlp":
        return cls.from_bytes(Path(path).read_bytes())


def mlp_forward(model: Mlp, X) -> np.ndarray:
    return model.forward(X)


def loss_and_grad(model: Mlp, X, y, loss: str = "squared"):
    """Mean batch loss and its exact parameter gradients.

    ``squared``: ``mean ||f(x) - y||^2`` over rows (targets shaped like the output).
    ``nll``: ``-mean sum_g log p_g(y_g)`` with ``y`` holding one class index per
    output group, for log-softmax heads.
    """
    out, cache = model.forward_cache(X)
    out = np.atleast_2d(out)
    n = len(out)
    if loss == "squared":
        diff = out - np.asarray(y, dtype=np.float64).reshape(out.shape)
        value = float((diff**2).sum() / n)
        g = 2.0 * diff / n
    elif loss == "nll":
        if model.head != "log_softmax":
            raise ValueError("nll needs a log-softmax head")
        y = np.asarray(y, dtype=np.int64).reshape(n, len(model.groups))
        cols = y + np.concatenate([[0], np.cumsum(model.groups)[:-1]])
        rows = np.arange(n)[:, None]
        value = float(-out[rows, cols].sum() / n)
        g = np.zeros_like(out)
        g[rows, cols] = -1.0 / n
    else:
        raise ValueError(f"unknown loss {loss!r}")
    grads, _ = model.backward(cache, g)
    return value, grads


def mlp_grad(model: Mlp, loss: str, X, y) -> dict:
    return loss_and_grad(model, X, y, loss)[1]


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self) -> "AdamState":
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.step,
                         {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def adam_step(state: AdamState, params: dict, grads: dict, ascend: bool = False) -> dict:
    """Bias-corrected Adam update of ``params`` in place; returns ``params``."""
    if set(grads) != set(params):
        raise ValueError("gradient keys do not match parameters")
    state.step += 1
    t = state.step
    c1 = 1 - state.beta1**t
    c2 = 1 - state.beta2**t
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if ascend:
            params[k] += step
        else:
            params[k] -= step
    return params


def finite_difference_grad(model: Mlp, loss: str, X, y, h: float = 1e-5) -> dict:
    """Central finite differences of :func:`loss_and_grad`'s loss."""
    out = {}
    for k, p in model.params.items():
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = loss_and_grad(model, X, y, loss)[0]
            p[i] = old - h
            down = loss_and_grad(model, X, y, loss)[0]
            p[i] = old
            g[i] = (up - down) / (2 * h)
        out[k] = g
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest ``|a - b| / max(|a|, |b|, floor)`` over entries."""
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def norm_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)`` over a whole parameter array."""
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def featurize(space: SlateSpace, X, S) -> np.ndarray:
    """Context concatenated with per-slot one-hot slate encodings."""
    return np.hstack([np.atleast_2d(np.asarray(X, dtype=np.float64)), space.one_hot(S)])


class RewardModel:
    """Frozen ``q_hat(x, s)`` regressor."""

    def __init__(self, mlp: Mlp, space: SlateSpace, history: Optional[dict] = None):
        self.mlp = mlp.copy()
        for v in self.mlp.params.values():
            v.setflags(write=False)
        self.space = space
        self.history = history or {}

    def __call__(self, X, S) -> np.ndarray:
        return self.mlp.forward(featurize(self.space, X, S))[:, 0]


def train_reward_model(
    data: LoggedDataset,
    space: SlateSpace,
    epochs: int = 500,
    steps_per_epoch: int = 10,
    lr: float = 1e-2,
    test_fraction: float = 0.2,
    patience: int = 5,
    hidden: int = 100,
    rng: Optional[np.random.Generator] = None,
) -> RewardModel:
    """Fit ``r ~ q_hat(x, s)`` by MSE with Adam and early stopping.

    Each epoch makes ``steps_per_epoch`` minibatch steps covering the training
    split once. Training stops after the held-out loss rises ``patience``
    epochs in a row, and the parameters with the lowest held-out loss are kept.
    ``history["checkpoints"]`` holds the full training-split loss before
    training and after every step of the first epoch.
    """
    n = len(data)
    if n < 10:
        raise ValueError("need at least 10 records to split into train and test sets")
    rng = np.random.default_rng() if rng is None else rng
    perm = rng.permutation(n)
    n_test = max(1, int(round(test_fraction * n)))
    test, train = perm[:n_test], perm[n_test:]
    F = featurize(space, data.x, data.s)
    y = data.r[:, None]
    mlp = Mlp.init(F.shape[1], 1, hidden, rng=rng)
    state = AdamState(lr=lr)

    def test_loss():
        return float(((mlp.forward(F[test]) - y[test]) ** 2).mean())

    best = (test_loss(), mlp.copy())
    def train_loss():
        return float(((mlp.forward(F[train]) - y[train]) ** 2).mean())

    history = {"train_loss": [], "test_loss": [], "step_loss": [], "checkpoints": [train_loss()]}
    prev, rises = best[0], 0
    for epoch in range(epochs):
        order = rng.permutation(train)
        for batch in np.array_split(order, steps_per_epoch):
            if len(batch) == 0:
                continue
            value, grads = loss_and_grad(mlp, F[batch], y[batch], "squared")
            adam_step(state, mlp.params, grads)
            history["step_loss"].append(value)
            if epoch == 0:
                history["checkpoints"].append(train_loss())
        if not all(np.all(np.isfinite(v)) for v in mlp.params.values()):
            raise FloatingPointError("reward model parameters became non-finite")
        tl = test_loss()
        history["train_loss"].append(train_loss())
        history["test_loss"].append(tl)
        if tl < best[0]:
            best = (tl, mlp.copy())
        rises = rises + 1 if tl > prev else 0
        prev = tl
        if rises >= patience:
            break
    return RewardModel(best[1], space, history)
