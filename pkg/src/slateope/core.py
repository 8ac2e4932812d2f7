"""Slate spaces, factored policies, logged data and policy values."""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

MAX_SLATES = 2**62
ENUMERATION_CAP = 10**6
PROB_ATOL = 1e-9

Slate = tuple  # tuple of per-slot action indices


class EnumerationError(ValueError):
    """Raised when a slate space is too large to enumerate."""


class SupportError(ValueError):
    """Raised when the logging policy does not cover the target policy."""


def substream(seed: int, *keys: Union[int, str]) -> np.random.Generator:
    """Independent random stream keyed by ``(seed, *keys)``.

    String keys are hashed with crc32 so that the same tag always maps to the
    same stream, regardless of the order in which streams are requested.
    """
    spawn_key = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=spawn_key))


@dataclass(frozen=True)
class SlateSpace:
    """Cartesian product of per-slot action sets ``A_1 x ... x A_L``.

    Actions in slot ``l`` are the integers ``0 .. slot_sizes[l] - 1``.
    """

    slot_sizes: tuple

    def __post_init__(self):
        sizes = tuple(int(a) for a in self.slot_sizes)
        if len(sizes) < 1:
            raise ValueError("a slate space needs at least one slot")
        if any(a < 1 for a in sizes):
            raise ValueError(f"slot sizes must be positive, got {sizes}")
        total = 1
        for a in sizes:
            total *= a
            if total > MAX_SLATES:
                raise OverflowError("slate count exceeds 2**62")
        object.__setattr__(self, "slot_sizes", sizes)

    @property
    def n_slots(self) -> int:
        return len(self.slot_sizes)

    @property
    def n_slates(self) -> int:
        return math.prod(self.slot_sizes)

    @property
    def one_hot_dim(self) -> int:
        return sum(self.slot_sizes)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.slot_sizes)[:-1]]).astype(np.int64)

    def validate(self, slates) -> np.ndarray:
        """Return ``slates`` as an int array of shape ``(..., L)`` or raise."""
        s = np.asarray(slates)
        if s.ndim == 0 or s.shape[-1] != self.n_slots:
            raise ValueError(f"slate length {s.shape[-1] if s.ndim else 0} != number of slots {self.n_slots}")
        if s.size and not np.issubdtype(s.dtype, np.integer):
            if not np.all(s == np.round(s)):
                raise ValueError("slate entries must be integers")
        s = s.astype(np.int64)
        if np.any(s < 0) or np.any(s >= np.asarray(self.slot_sizes)):
            raise ValueError("slate contains an action index outside its slot")
        return s

    def one_hot(self, slates) -> np.ndarray:
        """Concatenated per-slot one-hot encoding, shape ``(n, sum |A_l|)``."""
        s = self.validate(slates).reshape(-1, self.n_slots)
        out = np.zeros((len(s), self.one_hot_dim))
        cols = s + self.offsets
        out[np.arange(len(s))[:, None], cols] = 1.0
        return out

    def index(self, slates) -> np.ndarray:
        """Lexicographic rank of each slate (matches :func:`enumerate_slates`)."""
        s = self.validate(slates)
        idx = np.zeros(s.shape[:-1], dtype=np.int64)
        for l, a in enumerate(self.slot_sizes):
            idx = idx * a + s[..., l]
        return idx


def enumerate_slates(space: SlateSpace, cap: int = ENUMERATION_CAP) -> np.ndarray:
    """All slates in lexicographic order as an ``(|S|, L)`` int array."""
    if space.n_slates > cap:
        raise EnumerationError(
            f"enumeration infeasible: {space.n_slates} slates exceeds the cap of {cap}"
        )
    return np.array(list(product(*(range(a) for a in space.slot_sizes))), dtype=np.int64).reshape(
        space.n_slates, space.n_slots
    )


def _as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


class FactoredPolicy:
    """Policy whose slate probability is a product of per-slot probabilities.

    Parameters
    ----------
    space: SlateSpace
        Slate space the policy acts on.
    prob_fn: callable
        Maps a context batch ``X`` of shape ``(n, d)`` to a list of ``L``
        arrays, the ``l``-th of shape ``(n, |A_l|)``.
    name: str
        Label used in reports.
    """

    def __init__(self, space: SlateSpace, prob_fn: Callable[[np.ndarray], Sequence[np.ndarray]], name: str = "policy"):
        self.space = space
        self._prob_fn = prob_fn
        self.name = name

    @classmethod
    def constant(cls, space: SlateSpace, slot_vectors: Sequence[Sequence[float]], name: str = "constant"):
        """Context-independent policy with fixed per-slot distributions."""
        vecs = [np.asarray(v, dtype=float) for v in slot_vectors]
        if len(vecs) != space.n_slots:
            raise ValueError("need one probability vector per slot")

        def prob_fn(X):
            return [np.broadcast_to(v, (len(X), len(v))) for v in vecs]

        policy = cls(space, prob_fn, name)
        policy.slot_probs(np.zeros((1, 1)))
        return policy

    @classmethod
    def uniform(cls, space: SlateSpace):
        return cls.constant(space, [np.full(a, 1.0 / a) for a in space.slot_sizes], name="uniform")

    def slot_probs(self, X) -> list:
        X = _as_batch(X)
        probs = [np.asarray(p, dtype=float) for p in self._prob_fn(X)]
        if len(probs) != self.space.n_slots:
            raise ValueError("policy returned the wrong number of slots")
        for p, a in zip(probs, self.space.slot_sizes):
            if p.shape != (len(X), a):
                raise ValueError(f"slot probability shape {p.shape} != {(len(X), a)}")
            if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=PROB_ATOL):
                raise ValueError("slot probabilities must be non-negative and sum to one")
        return probs

    def chosen_slot_probs(self, X, slates) -> np.ndarray:
        """Per-slot probabilities of the given slates, shape ``(n, L)``."""
        X = _as_batch(X)
        s = self.space.validate(slates).reshape(len(X), self.space.n_slots)
        probs = self.slot_probs(X)
        rows = np.arange(len(X))
        return np.stack([p[rows, s[:, l]] for l, p in enumerate(probs)], axis=1)

    def slate_prob(self, X, slates) -> np.ndarray:
        return self.chosen_slot_probs(X, slates).prod(axis=1)

    def slate_distribution(self, x, cap: int = ENUMERATION_CAP) -> np.ndarray:
        """Probabilities of every enumerated slate for a single context."""
        probs = self.slot_probs(_as_batch(x)[:1])
        dist = np.ones(1)
        for p in probs:
            dist = np.outer(dist, p[0]).ravel()
        if len(dist) > cap:
            raise EnumerationError(f"enumeration infeasible: {len(dist)} slates exceeds the cap of {cap}")
        return dist

    def sample(self, X, rng: np.random.Generator, n_per_context: Optional[int] = None) -> np.ndarray:
        """Slot-wise independent draws.

        Returns shape ``(n, L)``, or ``(n, n_per_context, L)`` when
        ``n_per_context`` is given.
        """
        X = _as_batch(X)
        probs = self.slot_probs(X)
        m = 1 if n_per_context is None else int(n_per_context)
        out = np.empty((len(X), m, self.space.n_slots), dtype=np.int64)
        for l, p in enumerate(probs):
            cdf = np.cumsum(p, axis=1)
            cdf[:, -1] = 1.0
            u = rng.random((len(X), m))
            out[:, :, l] = (u[:, :, None] >= cdf[:, None, :]).sum(axis=2)
        return out[:, 0, :] if n_per_context is None else out


def slate_prob(policy: FactoredPolicy, x, s) -> float:
    """Probability of slate ``s`` under ``policy`` at a single context ``x``."""
    s = np.asarray(s)
    if s.ndim != 1 or len(s) != policy.space.n_slots:
        raise ValueError(f"slate of length {s.size} does not match {policy.space.n_slots} slots")
    return float(policy.slate_prob(_as_batch(x)[:1], s[None, :])[0])


def sample_slate(policy: FactoredPolicy, x, rng: np.random.Generator) -> Slate:
    return tuple(int(a) for a in policy.sample(_as_batch(x)[:1], rng)[0])


@dataclass(frozen=True)
class ValueEstimate:
    """A policy-value estimate with its per-record terms when available."""

    value: float
    method: str
    stderr: Optional[float] = None
    terms: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"{self.method} produced a non-finite value")

    def __float__(self):
        return float(self.value)


@dataclass(frozen=True)
class LoggedDataset:
    """Logged bandit feedback ``{(x_i, s_i, r_i)}`` with recorded propensities."""

    x: np.ndarray
    s: np.ndarray
    r: np.ndarray
    pscore: np.ndarray
    pscore_slot: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        s = np.atleast_2d(np.asarray(self.s)).astype(np.int64)
        r = np.asarray(self.r, dtype=float).ravel()
        ps = np.asarray(self.pscore, dtype=float).ravel()
        pss = np.atleast_2d(np.asarray(self.pscore_slot, dtype=float))
        n = len(r)
        if n < 1:
            raise ValueError("a logged dataset needs at least one record")
        if not (len(x) == len(s) == len(ps) == len(pss) == n):
            raise ValueError("record fields have inconsistent lengths")
        if pss.shape != s.shape:
            raise ValueError("pscore_slot must have one entry per slot")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(r)):
            raise ValueError("contexts and rewards must be finite")
        if np.any(ps < 0) or np.any(ps > 1) or np.any(pss < 0) or np.any(pss > 1):
            raise ValueError("propensities must lie in [0, 1]")
        if not np.allclose(pss.prod(axis=1), ps, rtol=0, atol=PROB_ATOL):
            raise ValueError("slot propensities do not multiply to the slate propensity")
        for name, val in (("x", x), ("s", s), ("r", r), ("pscore", ps), ("pscore_slot", pss)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    def __len__(self):
        return len(self.r)

    @property
    def n_slots(self) -> int:
        return self.s.shape[1]

    def subset(self, idx) -> "LoggedDataset":
        return LoggedDataset(self.x[idx], self.s[idx], self.r[idx], self.pscore[idx], self.pscore_slot[idx])

    def to_jsonl(self, path) -> None:
        with open(path, "w") as f:
            for i in range(len(self)):
                rec = {
                    "x": self.x[i].tolist(),
                    "s": self.s[i].tolist(),
                    "r": float(self.r[i]),
                    "pscore": float(self.pscore[i]),
                    "pscore_slot": self.pscore_slot[i].tolist(),
                }
                f.write(json.dumps(rec) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "LoggedDataset":
        recs = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        if not recs:
            raise ValueError(f"{path} contains no records")
        return cls(
            x=np.array([r["x"] for r in recs], dtype=float),
            s=np.array([r["s"] for r in recs], dtype=np.int64),
            r=np.array([r["r"] for r in recs], dtype=float),
            pscore=np.array([r["pscore"] for r in recs], dtype=float),
            pscore_slot=np.array([r["pscore_slot"] for r in recs], dtype=float),
        )


class TabularEnv:
    """Finite-context environment with an explicit expected-reward table.

    Used for exact-enumeration checks. ``q_table[k, j]`` is the expected reward
    of the ``j``-th enumerated slate at context ``contexts[k]``.
    """

    def __init__(self, space: SlateSpace, contexts, context_probs, q_table, reward_noise: float = 0.0):
        self.space = space
        self.contexts = _as_batch(contexts)
        self.context_probs = np.asarray(context_probs, dtype=float)
        self.q_table = np.asarray(q_table, dtype=float).reshape(len(self.contexts), space.n_slates)
        self.reward_noise = float(reward_noise)
        if not np.isclose(self.context_probs.sum(), 1.0):
            raise ValueError("context probabilities must sum to one")

    def _context_index(self, X) -> np.ndarray:
        X = _as_batch(X)
        eq = np.all(X[:, None, :] == self.contexts[None, :, :], axis=2)
        if not np.all(eq.any(axis=1)):
            raise ValueError("context not in the table")
        return eq.argmax(axis=1)

    def expected_reward(self, X, S) -> np.ndarray:
        return self.q_table[self._context_index(X), self.space.index(S).reshape(-1)]

    def sample_reward(self, X, S, rng) -> np.ndarray:
        q = self.expected_reward(X, S)
        return q + self.reward_noise * rng.standard_normal(q.shape)

    def sample_contexts(self, n, rng) -> np.ndarray:
        return self.contexts[rng.choice(len(self.contexts), size=n, p=self.context_probs)]


def true_value(
    env,
    policy: FactoredPolicy,
    mode: str = "exact",
    n_mc: int = 10**6,
    rng: Optional[np.random.Generator] = None,
    contexts=None,
    context_probs=None,
    cap: int = ENUMERATION_CAP,
    chunk: int = 100_000,
) -> ValueEstimate:
    """Policy value ``V(pi) = E_x E_{s~pi(.|x)} q(x, s)``.

    ``exact`` enumerates slates over a finite context set (taken from the
    environment when it has one, otherwise from ``contexts``).
    ``monte_carlo`` averages ``q`` over fresh ``(x, s ~ pi)`` draws.
    """
    if mode == "exact":
        if contexts is None:
            if not hasattr(env, "contexts"):
                raise ValueError("exact mode needs an enumerable context set")
            contexts, context_probs = env.contexts, env.context_probs
        contexts = _as_batch(contexts)
        if context_probs is None:
            context_probs = np.full(len(contexts), 1.0 / len(contexts))
        slates = enumerate_slates(policy.space, cap)
        total = 0.0
        for x, px in zip(contexts, context_probs):
            dist = policy.slate_distribution(x, cap)
            q = env.expected_reward(np.repeat(x[None, :], len(slates), axis=0), slates)
            total += px * float(dist @ q)
        return ValueEstimate(total, "exact")
    if mode == "monte_carlo":
        if rng is None:
            raise ValueError("monte_carlo mode needs a random generator")
        s1 = s2 = 0.0
        done = 0
        while done < n_mc:
            m = min(chunk, n_mc - done)
            X = env.sample_contexts(m, rng)
            q = env.expected_reward(X, policy.sample(X, rng))
            s1 += q.sum()
            s2 += (q**2).sum()
            done += m
        mean = s1 / n_mc
        var = max(s2 / n_mc - mean**2, 0.0) * n_mc / max(n_mc - 1, 1)
        return ValueEstimate(mean, "monte_carlo", stderr=math.sqrt(var / n_mc))
    raise ValueError(f"unknown mode {mode!r}")
