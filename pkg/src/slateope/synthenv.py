"""Synthetic slate bandit environment built from per-action relevance labels.

Each slot has its own action set. An action is relevant to a context when a
random hyperplane says so; relevant actions pay ``1 - eta_a`` and the others
``eta_a``. Slate rewards combine the first ``floor(L/2)`` slots through one of
three non-linear functions, so the first-half prefix of a slate is always a
sufficient abstraction.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import FactoredPolicy, LoggedDataset, SlateSpace, substream

REWARD_FUNCTIONS = (1, 2, 3)


@dataclass(frozen=True)
class EnvConfig:
    n_slots: int = 8
    slot_size: int = 10
    context_dim: int = 20
    reward_fn: int = 1
    reward_noise: float = 0.1
    base_score_noise: float = 0.2
    gamma: float = -1.0
    eps_logging: float = 0.1
    eps_target: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_slots < 2:
            raise ValueError("the reward functions need at least two slots")
        if self.slot_size < 1 or self.context_dim < 1:
            raise ValueError("slot_size and context_dim must be positive")
        if self.reward_fn not in REWARD_FUNCTIONS:
            raise ValueError(f"reward_fn must be one of {REWARD_FUNCTIONS}, got {self.reward_fn}")
        if not self.reward_noise > 0:
            raise ValueError("reward_noise must be positive")
        if not (0 <= self.eps_logging <= 1 and 0 <= self.eps_target <= 1):
            raise ValueError("exploration rates must lie in [0, 1]")

    @classmethod
    def from_json(cls, path) -> "EnvConfig":
        return cls(**json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))


@dataclass(frozen=True)
class SyntheticSlateEnv:
    """Immutable environment tables; build with :func:`build_env`.

    Attributes
    ----------
    eta: (L, A) noise level of each action, in ``[0, 0.5]``.
    hyperplanes: (L, A, d) normals of the relevance classifiers.
    offsets: (L, A) intercepts of the relevance classifiers.
    cooccurrence: (L-1, A, A) effect ``w(a_l, a_{l+1})`` of adjacent actions.
    score_dirs: (L, A, d) unit directions that perturb the base scores.
    """

    config: EnvConfig
    eta: np.ndarray
    hyperplanes: np.ndarray
    offsets: np.ndarray
    cooccurrence: np.ndarray
    score_dirs: np.ndarray

    @property
    def space(self) -> SlateSpace:
        return SlateSpace((self.config.slot_size,) * self.config.n_slots)

    @property
    def n_relevant(self) -> int:
        return self.config.n_slots // 2

    def slot_rewards(self, X) -> np.ndarray:
        """``q_l(x, a)`` for every slot and action, shape ``(n, L, A)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        positive = np.einsum("nd,lad->nla", X, self.hyperplanes) + self.offsets > 0
        return np.where(positive, 1.0 - self.eta, self.eta)

    def base_scores(self, X) -> np.ndarray:
        """Noisy stand-in for a trained classifier, shape ``(n, L, A)``.

        The perturbation ``noise * <x, u_a>`` is a fixed function of the
        context and is marginally ``N(0, noise^2)`` for standard normal ``x``.
        """
        X = np.atleast_2d(np.asarray(X, dtype=float))
        noise = np.einsum("nd,lad->nla", X, self.score_dirs)
        return self.slot_rewards(X) + self.config.base_score_noise * noise

    def expected_reward(self, X, S) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        S = self.space.validate(S).reshape(len(X), self.config.n_slots)
        k = self.n_relevant
        # only the relevant slots are ever evaluated
        slots = np.arange(k)
        positive = np.einsum("nd,nkd->nk", X, self.hyperplanes[slots, S[:, :k]]) + self.offsets[slots, S[:, :k]] > 0
        eta = self.eta[slots, S[:, :k]]
        q = np.where(positive, 1.0 - eta, eta)
        co = np.stack(
            [self.cooccurrence[l, S[:, l], S[:, l + 1]] for l in range(k - 1)], axis=1
        ) if k > 1 else np.zeros((len(X), 0))
        fn = self.config.reward_fn
        if fn == 1:
            # the co-occurrence average is empty (zero) when only one slot is relevant
            return q.mean(axis=1) + (co.mean(axis=1) if k > 1 else 0.0)
        if fn == 2:
            return (q[:, 0] + (co * q[:, 1:]).sum(axis=1)) / k
        if fn == 3:
            return 0.5 * (q.min(axis=1) + q.max(axis=1))
        raise ValueError(f"invalid reward function {fn}")  # pragma: no cover

    def sample_reward(self, X, S, rng: np.random.Generator) -> np.ndarray:
        q = self.expected_reward(X, S)
        return q + self.config.reward_noise * rng.standard_normal(q.shape)

    def sample_contexts(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((n, self.config.context_dim))

    def with_tables(self, **tables) -> "SyntheticSlateEnv":
        return replace(self, **tables)


def build_env(config: EnvConfig) -> SyntheticSlateEnv:
    rng = substream(config.seed, "environment")
    L, A, d = config.n_slots, config.slot_size, config.context_dim
    eta = rng.uniform(0.0, 0.5, size=(L, A))
    hyperplanes = rng.standard_normal((L, A, d))
    # intercepts on the scale of <x, h> give relevance rates spread over (0, 1)
    offsets = rng.standard_normal((L, A)) * np.linalg.norm(hyperplanes, axis=2)
    cooccurrence = rng.standard_normal((max(L - 1, 0), A, A))
    dirs = rng.standard_normal((L, A, d))
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    tables = dict(eta=eta, hyperplanes=hyperplanes, offsets=offsets, cooccurrence=cooccurrence, score_dirs=dirs)
    for t in tables.values():
        t.setflags(write=False)
    return SyntheticSlateEnv(config=config, **tables)


def expected_reward(env: SyntheticSlateEnv, x, s) -> float:
    return float(env.expected_reward(np.atleast_2d(x), np.atleast_2d(s))[0])


def sample_reward(env: SyntheticSlateEnv, x, s, rng: np.random.Generator) -> float:
    return float(env.sample_reward(np.atleast_2d(x), np.atleast_2d(s), rng)[0])


def _softmax(u, axis=-1):
    u = u - u.max(axis=axis, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=axis, keepdims=True)


def make_policies(
    env: SyntheticSlateEnv,
    gamma: Optional[float] = None,
    eps_logging: Optional[float] = None,
    eps_target: Optional[float] = None,
):
    """Epsilon-softmax logging policy and epsilon-greedy target policy.

    Both are built on the environment's base scores; unset parameters fall back
    to the environment config.
    """
    cfg = env.config
    gamma = cfg.gamma if gamma is None else gamma
    eps0 = cfg.eps_logging if eps_logging is None else eps_logging
    eps = cfg.eps_target if eps_target is None else eps_target
    if not (0 <= eps0 <= 1 and 0 <= eps <= 1):
        raise ValueError("exploration rates must lie in [0, 1]")
    A = cfg.slot_size

    def logging_fn(X):
        p = (1 - eps0) * _softmax(gamma * env.base_scores(X)) + eps0 / A
        return [p[:, l] for l in range(cfg.n_slots)]

    def target_fn(X):
        scores = env.base_scores(X)
        greedy = np.zeros_like(scores)
        np.put_along_axis(greedy, scores.argmax(axis=2)[..., None], 1.0, axis=2)
        p = (1 - eps) * greedy + eps / A
        return [p[:, l] for l in range(cfg.n_slots)]

    space = env.space
    return FactoredPolicy(space, logging_fn, "logging"), FactoredPolicy(space, target_fn, "target")


def generate_logs(env, logging_policy: FactoredPolicy, n: int, rng: np.random.Generator) -> LoggedDataset:
    """Draw ``n`` i.i.d. records ``x ~ p(x)``, ``s ~ pi_0(.|x)``, ``r ~ p(r|x,s)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    X = env.sample_contexts(n, rng)
    S = logging_policy.sample(X, rng)
    r = env.sample_reward(X, S, rng)
    slot_ps = logging_policy.chosen_slot_probs(X, S)
    return LoggedDataset(x=X, s=S, r=r, pscore=slot_ps.prod(axis=1), pscore_slot=slot_ps)
