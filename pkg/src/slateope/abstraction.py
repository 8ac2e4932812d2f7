"""Stochastic slate abstractions: encoders, latent marginals, and their training.

An encoder is any object with an ``n_latent`` attribute and an
``encode(X, S) -> (n, |Z|)`` method returning ``p(z | x, s)``. The trainable
:class:`AbstractionModel` pairs an encoder with a slate decoder
``p(s | x, z)`` and a reward head ``q_hat(x, z)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import ENUMERATION_CAP, FactoredPolicy, LoggedDataset, SlateSpace, enumerate_slates
from .neural import AdamState, Mlp, adam_step

EXACT_MARGINAL_CAP = 4096
WEIGHT_SANITY_CAP = 1e6


def softmax(u: np.ndarray) -> np.ndarray:
    u = u - u.max(axis=-1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=-1, keepdims=True)


def _one_hot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


# ---------------------------------------------------------------------------
# simple encoders


class TabularEncoder:
    """Context-free encoder given as a ``(|S|, |Z|)`` table of ``p(z | s)``."""

    def __init__(self, space: SlateSpace, table):
        table = np.asarray(table, dtype=float)
        if table.shape[0] != space.n_slates:
            raise ValueError("the table needs one row per slate")
        if np.any(table < 0) or not np.allclose(table.sum(axis=1), 1.0, atol=1e-9):
            raise ValueError("table rows must be probability vectors")
        self.space = space
        self.table = table
        self.n_latent = table.shape[1]

    @classmethod
    def deterministic(cls, space: SlateSpace, mapping, n_latent: Optional[int] = None):
        """One-hot encoder for a deterministic map ``phi(s)``, given per slate index."""
        mapping = np.asarray(mapping, dtype=np.int64)
        n_latent = int(mapping.max()) + 1 if n_latent is None else n_latent
        return cls(space, _one_hot(mapping, n_latent))

    @classmethod
    def identity(cls, space: SlateSpace):
        return cls.deterministic(space, np.arange(space.n_slates))

    @classmethod
    def uniform(cls, space: SlateSpace, n_latent: int):
        return cls(space, np.full((space.n_slates, n_latent), 1.0 / n_latent))

    @classmethod
    def random(cls, space: SlateSpace, n_latent: int, rng: np.random.Generator, concentration: float = 1.0):
        return cls(space, rng.dirichlet(np.full(n_latent, concentration), size=space.n_slates))

    def encode(self, X, S) -> np.ndarray:
        return self.table[self.space.index(S).reshape(-1)]


def encode_many(encoder, X, S_many, dtype=np.float64) -> np.ndarray:
    """``p(z | x_i, s_ij)`` for ``S_many`` of shape ``(n, m, L)``; returns ``(n, m, |Z|)``.

    ``dtype`` is a hint honoured only by encoders with their own ``encode_many``.
    """
    if hasattr(encoder, "encode_many"):
        return encoder.encode_many(X, S_many, dtype=dtype)
    n, m, L = S_many.shape
    X = np.atleast_2d(X)
    return encoder.encode(np.repeat(X, m, axis=0), S_many.reshape(n * m, L)).reshape(n, m, -1)


def sample_latent(encoder, X, S, rng: np.random.Generator) -> np.ndarray:
    """One draw ``z_i ~ p(z | x_i, s_i)`` per row."""
    p = encoder.encode(X, S)
    cdf = np.cumsum(p, axis=1)
    u = rng.random((len(p), 1)) * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(axis=1), p.shape[1] - 1)


# ---------------------------------------------------------------------------
# latent marginals and weights


def latent_marginals(
    encoder,
    policies: Sequence[FactoredPolicy],
    X,
    mode: str = "auto",
    n_samples: int = 1000,
    rng: Optional[np.random.Generator] = None,
    exact_cap: int = EXACT_MARGINAL_CAP,
    chunk_rows: int = 100_000,
    mc_dtype=np.float32,
):
    """``p(z | x; pi) = sum_s pi(s|x) p(z|x,s)`` for each policy and context.

    Returns one ``(n, |Z|)`` array per policy followed by the mode used.
    ``auto`` enumerates when the slate space has at most ``exact_cap`` slates.
    Exact marginals are computed in double precision; Monte-Carlo ones
    evaluate the encoder in ``mc_dtype`` and average in double precision.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    space = policies[0].space
    if mode == "auto":
        mode = "exact" if space.n_slates <= exact_cap else "mc"
    out = [np.empty((len(X), encoder.n_latent)) for _ in policies]
    if mode == "exact":
        slates = enumerate_slates(space, ENUMERATION_CAP)
        per = max(1, chunk_rows // len(slates))
        for start in range(0, len(X), per):
            Xc = X[start : start + per]
            m = len(Xc)
            pz = encode_many(encoder, Xc, np.broadcast_to(slates, (m,) + slates.shape))
            for k, policy in enumerate(policies):
                dist = np.ones((m, 1))
                for p in policy.slot_probs(Xc):
                    dist = (dist[:, :, None] * p[:, None, :]).reshape(m, -1)
                out[k][start : start + per] = np.einsum("ns,nsz->nz", dist, pz)
        return (*out, "exact")
    if mode != "mc":
        raise ValueError(f"unknown marginal mode {mode!r}")
    if rng is None:
        raise ValueError("Monte-Carlo marginals need a random generator")
    per = max(1, chunk_rows // n_samples)
    for start in range(0, len(X), per):
        Xc = X[start : start + per]
        for k, policy in enumerate(policies):
            S = policy.sample(Xc, rng, n_per_context=n_samples)
            out[k][start : start + per] = encode_many(encoder, Xc, S, dtype=mc_dtype).mean(axis=1, dtype=np.float64)
    return (*out, "mc")


def latent_marginal(encoder, policy, x, z, mode="exact", n_samples=1000, rng=None, floor=1e-8) -> float:
    """Marginal probability of latent ``z`` at context ``x`` under ``policy``."""
    marg, _ = latent_marginals(encoder, [policy], np.atleast_2d(x), mode, n_samples, rng, exact_cap=ENUMERATION_CAP)
    value = float(marg[0, z])
    return max(value, floor) if mode == "mc" else value


def latent_weights(
    encoder, target, logging, X, z, mode="auto", n_samples=1000, rng=None, floor=1e-8
) -> tuple:
    """``p(z|x;pi) / max(p(z|x;pi_0), floor)`` per row, plus a flag for weights above the sanity cap."""
    mt, ml, _ = latent_marginals(encoder, [target, logging], X, mode, n_samples, rng)
    rows = np.arange(len(mt))
    z = np.asarray(z, dtype=np.int64)
    w = mt[rows, z] / np.maximum(ml[rows, z], floor)
    return w, w > WEIGHT_SANITY_CAP


def latent_weight(encoder, target, logging, x, z, mode="exact", n_samples=1000, rng=None, floor=1e-8) -> float:
    w, flagged = latent_weights(encoder, target, logging, np.atleast_2d(x), [z], mode, n_samples, rng, floor)
    if flagged[0]:
        raise FloatingPointError(f"latent weight {w[0]:.3g} exceeds the sanity cap")
    return float(w[0])


# ---------------------------------------------------------------------------
# trainable abstraction


@dataclass
class TrainConfig:
    n_latent: int = 100
    hidden: int = 100
    beta: float = 0.01
    betas: tuple = (0.01, 0.1, 1.0, 10.0)
    pretrain_epochs: int = 1000
    finetune_epochs: int = 500
    lr: float = 1e-5
    lr_encoder: Optional[float] = None
    lr_decoder: Optional[float] = None
    lr_reward: Optional[float] = None
    batch_size: int = 256
    reward_scale: float = 100.0
    temperature: float = 1.0
    marginal_samples: int = 1000
    marginal_floor: float = 1e-8
    kl_estimator: str = "analytic"
    literal_signs: bool = False

    def __post_init__(self):
        if any(b < 0 for b in (self.beta, *self.betas)):
            raise ValueError("beta must be non-negative")
        if self.marginal_samples < 1:
            raise ValueError("marginal_samples must be at least 1")
        if self.kl_estimator not in ("analytic", "sample"):
            raise ValueError("kl_estimator must be 'analytic' or 'sample'")
        self.betas = tuple(float(b) for b in self.betas)

    def learning_rates(self) -> dict:
        return {
            "encoder": self.lr if self.lr_encoder is None else self.lr_encoder,
            "decoder": self.lr if self.lr_decoder is None else self.lr_decoder,
            "reward": self.lr if self.lr_reward is None else self.lr_reward,
        }


class AbstractionModel:
    """Encoder ``p_theta(z|x,s)``, decoder ``p_psi(s|x,z)`` and reward head ``q_omega(x,z)``."""

    NETS = ("encoder", "decoder", "reward")

    def __init__(self, space: SlateSpace, context_dim: int, encoder: Mlp, decoder: Mlp, reward: Mlp):
        self.space = space
        self.context_dim = int(context_dim)
        self.encoder, self.decoder, self.reward = encoder, decoder, reward
        self.n_latent = encoder.sizes[2]
        if encoder.head != "log_softmax" or decoder.head != "log_softmax":
            raise ValueError("encoder and decoder need log-softmax heads")
        if decoder.groups != space.slot_sizes:
            raise ValueError("decoder output groups must match the slot sizes")

    @classmethod
    def init(cls, space: SlateSpace, context_dim: int, n_latent: int = 100, hidden: int = 100, rng=None):
        rng = np.random.default_rng() if rng is None else rng
        d = context_dim
        return cls(
            space,
            d,
            Mlp.init(d + space.one_hot_dim, n_latent, hidden, "log_softmax", rng=rng),
            Mlp.init(d + n_latent, space.one_hot_dim, hidden, "log_softmax", groups=space.slot_sizes, rng=rng),
            Mlp.init(d + n_latent, 1, hidden, rng=rng),
        )

    def nets(self) -> dict:
        return {"encoder": self.encoder, "decoder": self.decoder, "reward": self.reward}

    def copy(self) -> "AbstractionModel":
        return AbstractionModel(self.space, self.context_dim, self.encoder.copy(), self.decoder.copy(), self.reward.copy())

    def encoder_input(self, X, S) -> np.ndarray:
        return np.hstack([np.atleast_2d(np.asarray(X, dtype=float)), self.space.one_hot(S)])

    def encode_log(self, X, S) -> np.ndarray:
        return self.encoder.forward(self.encoder_input(X, S))

    def encode(self, X, S) -> np.ndarray:
        return np.exp(self.encode_log(X, S))

    def encode_many(self, X, S_many, dtype=np.float64) -> np.ndarray:
        """Batched encoder on ``(n, m, L)`` slates, returning ``(n, m, |Z|)`` probabilities.

        ``dtype=np.float32`` roughly quarters the cost of Monte-Carlo
        marginals; the relative error stays near 1e-6.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        p = {k: v.astype(dtype, copy=False) for k, v in self.encoder.params.items()}
        d = self.context_dim
        S_many = np.asarray(S_many)
        n, m, L = S_many.shape
        cols = (S_many + self.space.offsets).reshape(n * m, L)
        one_hot = np.zeros((n * m, self.space.one_hot_dim), dtype=dtype)
        np.put_along_axis(one_hot, cols, 1.0, axis=1)
        pre = (one_hot @ p["W1"][d:]).reshape(n, m, -1)
        pre += (X.astype(dtype) @ p["W1"][:d] + p["b1"])[:, None, :]
        np.maximum(pre, 0.0, out=pre)
        u = pre @ p["W2"] + p["b2"]
        u -= u.max(axis=-1, keepdims=True)
        np.exp(u, out=u)
        u /= u.sum(axis=-1, keepdims=True)
        return u

    def decode_log(self, X, z_vec) -> np.ndarray:
        return self.decoder.forward(np.hstack([np.atleast_2d(X), z_vec]))

    def predict_reward(self, X, z_vec) -> np.ndarray:
        return self.reward.forward(np.hstack([np.atleast_2d(X), z_vec]))[:, 0]

    def save(self, directory, manifest: Optional[dict] = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, net in self.nets().items():
            net.save(directory / f"{name}.bin")
        meta = {"n_latent": self.n_latent, "slot_sizes": list(self.space.slot_sizes), "context_dim": self.context_dim}
        meta.update(manifest or {})
        (directory / "manifest.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory) -> "AbstractionModel":
        directory = Path(directory)
        meta = json.loads((directory / "manifest.json").read_text())
        nets = {name: Mlp.load(directory / f"{name}.bin") for name in cls.NETS}
        return cls(SlateSpace(tuple(meta["slot_sizes"])), meta["context_dim"], nets["encoder"], nets["decoder"], nets["reward"])


def encode(model, x, s) -> np.ndarray:
    return model.encode(np.atleast_2d(x), np.atleast_2d(s))[0]


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.random(shape)
    return -np.log(-np.log(np.clip(u, 1e-300, 1.0 - 1e-16)))


def sample_z(model, X, S, rng, mode: str = "hard", temperature: float = 1.0, noise=None):
    """Categorical draw of ``z`` via the Gumbel-max trick.

    Returns ``(z_index, relaxed)``: ``relaxed`` is ``None`` in ``hard`` mode and
    the Gumbel-softmax vector in ``straight_through`` mode. The straight-through
    forward value is the hard one-hot of ``z_index``.
    """
    single = np.ndim(X) == 1
    X, S = np.atleast_2d(X), np.atleast_2d(S)
    logp = np.log(np.maximum(model.encode(X, S), 1e-300))
    g = gumbel_noise(rng, logp.shape) if noise is None else noise
    z = np.argmax(logp + g, axis=1)
    relaxed = softmax((logp + g) / temperature) if mode == "straight_through" else None
    if mode not in ("hard", "straight_through"):
        raise ValueError(f"unknown sampling mode {mode!r}")
    if single:
        return int(z[0]), (None if relaxed is None else relaxed[0])
    return z, relaxed


@dataclass
class LossComponents:
    reconstruction: float  # mean log p_psi(s|x,z)
    reward: float  # mean squared reward error, rescaled
    kl: float  # mean log p_theta(z|x,s) - C
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _objective(model: AbstractionModel, X, S, r, noise, beta, cfg: TrainConfig, relaxed=False, need_grads=True):
    """Loss components and per-part gradients for one batch at fixed Gumbel noise.

    With ``relaxed`` the decoder and reward head see the Gumbel-softmax vector
    instead of the straight-through hard sample, which makes the loss smooth in
    the encoder parameters (used for gradient checking).
    """
    B = len(r)
    d = model.context_dim
    Z = model.n_latent
    enc_in = model.encoder_input(X, S)
    logp, enc_cache = model.encoder.forward_cache(enc_in)
    v = (logp + noise) / cfg.temperature
    y = softmax(v)
    hard = _one_hot(np.argmax(v, axis=1), Z)
    z_in = y if relaxed else hard

    dec_out, dec_cache = model.decoder.forward_cache(np.hstack([X, z_in]))
    cols = S + model.space.offsets
    rows = np.arange(B)[:, None]
    recon = float(dec_out[rows, cols].sum() / B)

    q_hat, rew_cache = model.reward.forward_cache(np.hstack([X, z_in]))
    resid = q_hat[:, 0] - r
    reward_loss = cfg.reward_scale * float((resid**2).mean())

    log_z = np.log(Z)
    if cfg.kl_estimator == "analytic":
        p = np.exp(logp)
        kl = float((p * (logp + log_z)).sum() / B)
    else:
        kl = float(((z_in * logp).sum(axis=1) + log_z).mean())

    sign_reward = -1.0 if cfg.literal_signs else 1.0
    total = -recon + reward_loss + beta * kl  # minimised; literal mode differs only in the encoder update
    comps = LossComponents(recon, reward_loss, kl, total)
    if not need_grads:
        return comps, None

    def through_sample(g_z):
        # d/d logp of a loss that depends on logp only through z_in
        g_y = g_z
        g_v = y * (g_y - (g_y * y).sum(axis=1, keepdims=True))
        return g_v / cfg.temperature

    # reconstruction: maximise, i.e. gradient of -recon
    g_dec = np.zeros_like(dec_out)
    g_dec[rows, cols] = -1.0 / B
    dec_grads, dec_in_grad = model.decoder.backward(dec_cache, g_dec)
    enc_recon, _ = model.encoder.backward(enc_cache, through_sample(dec_in_grad[:, d:]))

    g_q = (cfg.reward_scale * 2.0 * resid / B)[:, None]
    rew_grads, rew_in_grad = model.reward.backward(rew_cache, g_q)
    enc_reward, _ = model.encoder.backward(enc_cache, through_sample(rew_in_grad[:, d:]))

    if cfg.kl_estimator == "analytic":
        g_logp = p * (logp + log_z + 1.0) / B
    else:
        g_logp = z_in / B + through_sample(logp / B)
    enc_kl, _ = model.encoder.backward(enc_cache, g_logp)

    enc_grads = {
        k: enc_recon[k] + sign_reward * enc_reward[k] + beta * enc_kl[k] for k in enc_recon
    }
    grads = {"encoder": enc_grads, "decoder": dec_grads, "reward": rew_grads}
    return comps, grads


def loss_components(model: AbstractionModel, X, S, r, beta: float, rng=None, noise=None, cfg: Optional[TrainConfig] = None):
    """Reconstruction, rescaled reward and KL terms for one batch, plus the minimised total."""
    cfg = TrainConfig() if cfg is None else cfg
    X = np.atleast_2d(np.asarray(X, dtype=float))
    S = model.space.validate(S).reshape(len(X), -1)
    r = np.asarray(r, dtype=float).ravel()
    if len(r) == 0:
        raise ValueError("empty batch")
    if noise is None:
        noise = gumbel_noise(np.random.default_rng() if rng is None else rng, (len(r), model.n_latent))
    return _objective(model, X, S, r, noise, beta, cfg, need_grads=False)[0]


def objective_grads(model, X, S, r, noise, beta, cfg: TrainConfig, relaxed=False):
    return _objective(model, X, S, r, noise, beta, cfg, relaxed=relaxed)


@dataclass
class TrainedAbstraction:
    model: AbstractionModel
    beta: float
    history: list = field(default_factory=list)
    optimizers: dict = field(default_factory=dict, repr=False)

    @property
    def n_latent(self):
        return self.model.n_latent

    def encode(self, X, S):
        return self.model.encode(X, S)

    def encode_many(self, X, S_many, dtype=np.float64):
        return self.model.encode_many(X, S_many, dtype=dtype)


def train_abstraction(
    data: LoggedDataset,
    config: TrainConfig,
    rng: np.random.Generator,
    space: Optional[SlateSpace] = None,
    beta: Optional[float] = None,
    epochs: Optional[int] = None,
    init: Optional[TrainedAbstraction] = None,
) -> TrainedAbstraction:
    """Minibatch Adam on the abstraction objective at a fixed ``beta``.

    The encoder and decoder follow the bias/variance objective while the reward
    head only minimises its own squared error. ``init`` continues from a
    previous run (its parameters and optimiser state are copied, not shared).
    """
    space = SlateSpace(tuple([int(data.s[:, l].max()) + 1 for l in range(data.n_slots)])) if space is None else space
    beta = config.beta if beta is None else float(beta)
    epochs = config.pretrain_epochs if epochs is None else int(epochs)
    n = len(data)
    if n < config.batch_size:
        raise ValueError(f"dataset of {n} records is smaller than one batch of {config.batch_size}")
    if init is None:
        model = AbstractionModel.init(space, data.x.shape[1], config.n_latent, config.hidden, rng)
        lrs = config.learning_rates()
        opts = {k: AdamState(lr=lrs[k]) for k in AbstractionModel.NETS}
    else:
        model = init.model.copy()
        opts = {k: s.copy() for k, s in init.optimizers.items()}
    nets = model.nets()
    batch = config.batch_size
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        sums = np.zeros(4)
        steps = 0
        for start in range(0, n - batch + 1, batch):
            idx = order[start : start + batch]
            noise = gumbel_noise(rng, (len(idx), model.n_latent))
            comps, grads = _objective(model, data.x[idx], data.s[idx], data.r[idx], noise, beta, config)
            vals = np.array([comps.reconstruction, comps.reward, comps.kl, comps.total])
            if not np.all(np.isfinite(vals)):
                raise FloatingPointError(f"non-finite abstraction loss at epoch {epoch}: {comps}")
            for k, net in nets.items():
                adam_step(opts[k], net.params, grads[k])
            sums += vals
            steps += 1
        history.append(dict(zip(("reconstruction", "reward", "kl", "total"), (sums / max(steps, 1)).tolist())))
    for net in nets.values():
        if not all(np.all(np.isfinite(v)) for v in net.params.values()):
            raise FloatingPointError("abstraction parameters became non-finite")
    return TrainedAbstraction(model, beta, history, opts)


def train_abstraction_path(
    data: LoggedDataset, config: TrainConfig, rng_seed_fn, space: Optional[SlateSpace] = None
) -> dict:
    """Shared pre-training at ``config.beta`` followed by a fine-tune per candidate beta.

    ``rng_seed_fn(tag)`` returns the random stream for the pre-training
    (``tag="pretrain"``) and for each fine-tune (``tag=beta``) so every run is
    reproducible on its own.
    """
    base = train_abstraction(data, config, rng_seed_fn("pretrain"), space=space, beta=config.beta,
                             epochs=config.pretrain_epochs)
    out = {}
    for b in config.betas:
        out[b] = train_abstraction(data, config, rng_seed_fn(b), space=space, beta=b,
                                   epochs=config.finetune_epochs, init=base)
    return out
