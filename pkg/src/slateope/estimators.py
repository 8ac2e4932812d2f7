"""Closed-form off-policy estimators for factored slate policies.

Every estimator returns a :class:`~slateope.core.ValueEstimate` whose
``terms`` are the per-record summands, so the point estimate is
``terms.mean()``. Importance weights come from the propensities recorded in
the dataset, never from a logging-policy object.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .core import (
    ENUMERATION_CAP,
    FactoredPolicy,
    LoggedDataset,
    SupportError,
    ValueEstimate,
    enumerate_slates,
)

RewardModel = Callable[[np.ndarray, np.ndarray], np.ndarray]

DM_SAMPLES = 1000
DM_ENUMERATION_CAP = 4096


def _finish(terms: np.ndarray, method: str, **info) -> ValueEstimate:
    terms = np.asarray(terms, dtype=float)
    n = len(terms)
    stderr = float(terms.std(ddof=1) / np.sqrt(n)) if n > 1 else None
    return ValueEstimate(float(terms.mean()), method, stderr=stderr, terms=terms, info=info)


def slot_weights(data: LoggedDataset, target: FactoredPolicy) -> np.ndarray:
    """``pi(a_l|x) / pi_0(a_l|x)`` for every logged record and slot, shape ``(n, L)``."""
    pi = target.chosen_slot_probs(data.x, data.s)
    pi0 = data.pscore_slot
    if np.any((pi0 <= 0) & (pi > 0)):
        raise SupportError("logging propensity is zero where the target policy has mass")
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(pi0 > 0, pi / np.where(pi0 > 0, pi0, 1.0), 0.0)
    return w


def _clip(w: np.ndarray, clip: Optional[float]) -> np.ndarray:
    return w if clip is None else np.minimum(w, clip)


def estimate_nae(data: LoggedDataset, target: Optional[FactoredPolicy] = None) -> ValueEstimate:
    """Naive average of the logged rewards."""
    return _finish(data.r, "nae")


def estimate_ips(data: LoggedDataset, target: FactoredPolicy, clip: Optional[float] = None) -> ValueEstimate:
    w = _clip(slot_weights(data, target).prod(axis=1), clip)
    return _finish(w * data.r, "ips", max_weight=float(w.max()))


def estimate_pi(data: LoggedDataset, target: FactoredPolicy, clip: Optional[float] = None) -> ValueEstimate:
    """Pseudoinverse estimator: slot weights summed, minus ``L - 1``."""
    w = _clip(slot_weights(data, target).sum(axis=1) - data.n_slots + 1, clip)
    return _finish(w * data.r, "pi")


def _check_prefix(k: int, n_slots: int) -> int:
    k = int(k)
    if not 1 <= k <= n_slots:
        raise ValueError(f"prefix length must be in [1, {n_slots}], got {k}")
    return k


def estimate_mips(data: LoggedDataset, target: FactoredPolicy, k: int, clip: Optional[float] = None) -> ValueEstimate:
    """IPS on the first ``k`` slots only (the slate prefix as an embedding)."""
    k = _check_prefix(k, data.n_slots)
    w = _clip(slot_weights(data, target)[:, :k].prod(axis=1), clip)
    return _finish(w * data.r, "mips", prefix=k)


def dm_terms(
    data: LoggedDataset,
    target: FactoredPolicy,
    reward_model: RewardModel,
    n_samples: int = DM_SAMPLES,
    rng: Optional[np.random.Generator] = None,
    enumeration_cap: int = DM_ENUMERATION_CAP,
    chunk_rows: int = 200_000,
):
    """Per-record ``E_{s ~ pi(.|x_i)}[q_hat(x_i, s)]`` and the mode used.

    The expectation is exact when the slate space has at most
    ``enumeration_cap`` slates and a Monte-Carlo average otherwise.
    """
    if reward_model is None:
        raise ValueError("this estimator needs a reward model")
    space = target.space
    n = len(data)
    out = np.empty(n)
    if space.n_slates <= enumeration_cap:
        slates = enumerate_slates(space, ENUMERATION_CAP)
        per = max(1, chunk_rows // len(slates))
        for start in range(0, n, per):
            X = data.x[start : start + per]
            m = len(X)
            probs = target.slot_probs(X)
            dist = np.ones((m, 1))
            for p in probs:
                dist = (dist[:, :, None] * p[:, None, :]).reshape(m, -1)
            q = reward_model(np.repeat(X, len(slates), axis=0), np.tile(slates, (m, 1))).reshape(m, -1)
            out[start : start + per] = (dist * q).sum(axis=1)
        return out, "exact"
    if rng is None:
        raise ValueError("Monte-Carlo DM terms need a random generator")
    per = max(1, chunk_rows // n_samples)
    for start in range(0, n, per):
        X = data.x[start : start + per]
        m = len(X)
        S = target.sample(X, rng, n_per_context=n_samples).reshape(m * n_samples, -1)
        q = reward_model(np.repeat(X, n_samples, axis=0), S).reshape(m, n_samples)
        out[start : start + per] = q.mean(axis=1)
    return out, "monte_carlo"


def estimate_dm(data, target, reward_model, n_samples=DM_SAMPLES, rng=None, enumeration_cap=DM_ENUMERATION_CAP):
    dm, mode = dm_terms(data, target, reward_model, n_samples, rng, enumeration_cap)
    return _finish(dm, "dm", dm_mode=mode)


def _hybrid(name, weights, data, target, reward_model, n_samples, rng, enumeration_cap, **info):
    dm, mode = dm_terms(data, target, reward_model, n_samples, rng, enumeration_cap)
    residual = data.r - reward_model(data.x, data.s)
    return _finish(dm + weights * residual, name, dm_mode=mode, **info)


def estimate_dr(data, target, reward_model, n_samples=DM_SAMPLES, rng=None, enumeration_cap=DM_ENUMERATION_CAP, clip=None):
    if reward_model is None:
        raise ValueError("dr needs a reward model")
    w = _clip(slot_weights(data, target).prod(axis=1), clip)
    return _hybrid("dr", w, data, target, reward_model, n_samples, rng, enumeration_cap)


def estimate_pidr(data, target, reward_model, n_samples=DM_SAMPLES, rng=None, enumeration_cap=DM_ENUMERATION_CAP, clip=None):
    if reward_model is None:
        raise ValueError("pidr needs a reward model")
    w = _clip(slot_weights(data, target).sum(axis=1) - data.n_slots + 1, clip)
    return _hybrid("pidr", w, data, target, reward_model, n_samples, rng, enumeration_cap)


def estimate_offcem(data, target, reward_model, k, n_samples=DM_SAMPLES, rng=None, enumeration_cap=DM_ENUMERATION_CAP, clip=None):
    if reward_model is None:
        raise ValueError("offcem needs a reward model")
    k = _check_prefix(k, data.n_slots)
    w = _clip(slot_weights(data, target)[:, :k].prod(axis=1), clip)
    return _hybrid("offcem", w, data, target, reward_model, n_samples, rng, enumeration_cap, prefix=k)


def estimate_lips(
    data: LoggedDataset,
    target: FactoredPolicy,
    abstraction,
    logging: FactoredPolicy,
    n_samples: int = 1000,
    rng: Optional[np.random.Generator] = None,
    z: Optional[np.ndarray] = None,
    mode: str = "auto",
    floor: float = 1e-8,
    clip: Optional[float] = None,
) -> ValueEstimate:
    """Latent IPS: importance weights on the abstraction ``z`` instead of the slate.

    ``abstraction`` is any encoder exposing ``n_latent`` and
    ``encode(X, S) -> (n, |Z|)`` probabilities; a deterministic abstraction is an
    encoder with one-hot rows. ``z`` may be given explicitly (used for exact
    expectations over the latent draw); otherwise ``z_i ~ p(z|x_i, s_i)``.
    The latent marginals need the full logging distribution, hence ``logging``.
    """
    from .abstraction import latent_marginals, sample_latent

    if z is None:
        if rng is None:
            raise ValueError("sampling the latent abstraction needs a random generator")
        z = sample_latent(abstraction, data.x, data.s, rng)
    z = np.asarray(z, dtype=np.int64)
    marg_pi, marg_pi0, used = latent_marginals(
        abstraction, [target, logging], data.x, mode=mode, n_samples=n_samples, rng=rng
    )
    rows = np.arange(len(data))
    num = marg_pi[rows, z]
    den = marg_pi0[rows, z]
    if floor <= 0 and np.any((den <= 0) & (num > 0)):
        raise SupportError("latent marginal under the logging policy is zero")
    w = _clip(num / np.maximum(den, floor), clip)
    flagged = int(np.sum(w > 1e6))
    return _finish(w * data.r, "lips", marginal_mode=used, flagged_weights=flagged, max_weight=float(w.max()))


ESTIMATORS = {
    "nae": estimate_nae,
    "dm": estimate_dm,
    "ips": estimate_ips,
    "pi": estimate_pi,
    "mips": estimate_mips,
    "dr": estimate_dr,
    "pidr": estimate_pidr,
    "offcem": estimate_offcem,
    "lips": estimate_lips,
}
