"""Exact-enumeration checks of the estimator and abstraction identities.

Expectations are computed without sampling: every ``(x, s, r, z)`` outcome of
a single logged record appears once in an enumerated dataset, the estimators
are run on it unchanged, and their per-record terms are averaged with the
outcome probabilities. A dataset of ``n`` i.i.d. records then has mean equal to
that single-record expectation and variance equal to the single-record
variance divided by ``n``.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .abstraction import TabularEncoder, latent_marginals
from .core import FactoredPolicy, LoggedDataset, SlateSpace, TabularEnv, enumerate_slates, substream, true_value
from .estimators import (
    estimate_dr,
    estimate_ips,
    estimate_lips,
    estimate_mips,
    estimate_offcem,
    estimate_pi,
    estimate_pidr,
)
from .synthenv import EnvConfig, build_env, make_policies

TOL_EXACT = 1e-10
TOL_MSE = 1e-8


@dataclass
class Instance:
    """Enumerable problem: finite contexts, a reward table and two policies."""

    env: TabularEnv
    logging: FactoredPolicy
    target: FactoredPolicy

    @property
    def space(self) -> SlateSpace:
        return self.env.space

    def with_rewards(self, q_table) -> "Instance":
        env = TabularEnv(self.space, self.env.contexts, self.env.context_probs, q_table, self.env.reward_noise)
        return Instance(env, self.logging, self.target)

    def value(self) -> float:
        return true_value(self.env, self.target, "exact").value

    def slate_weights(self) -> np.ndarray:
        """``w(x, s)`` as a ``(n_contexts, |S|)`` table."""
        out = []
        for x in self.env.contexts:
            out.append(self.target.slate_distribution(x) / self.logging.slate_distribution(x))
        return np.array(out)

    def logging_table(self) -> np.ndarray:
        return np.array([self.logging.slate_distribution(x) for x in self.env.contexts])


def default_instance(
    seed: int = 0, slot_sizes=(3, 3), n_contexts: int = 1, context_dim: int = 5, reward_fn: int = 1
) -> Instance:
    """Tiny instance built from the synthetic environment's policies and rewards.

    The reward table is the synthetic expected reward, which only depends on
    the first half of the slots.
    """
    if len(set(slot_sizes)) != 1:
        raise ValueError("the synthetic environment uses equal slot sizes")
    cfg = EnvConfig(n_slots=len(slot_sizes), slot_size=slot_sizes[0], context_dim=context_dim, reward_fn=reward_fn, seed=seed)
    senv = build_env(cfg)
    logging, target = make_policies(senv)
    contexts = senv.sample_contexts(n_contexts, substream(seed, "verification", "contexts"))
    slates = enumerate_slates(senv.space)
    q = np.array([senv.expected_reward(np.repeat(x[None], len(slates), 0), slates) for x in contexts])
    env = TabularEnv(senv.space, contexts, np.full(n_contexts, 1.0 / n_contexts), q)
    return Instance(env, logging, target)


def linear_rewards(inst: Instance, rng: np.random.Generator) -> np.ndarray:
    """Random reward table ``q(x, s) = sum_l phi_l(x, a_l)``."""
    slates = enumerate_slates(inst.space)
    out = []
    for _ in inst.env.contexts:
        phis = [rng.standard_normal(a) for a in inst.space.slot_sizes]
        out.append(sum(phi[slates[:, l]] for l, phi in enumerate(phis)))
    return np.array(out)


def random_rewards(inst: Instance, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((len(inst.env.contexts), inst.space.n_slates))


def grouping_encoder(inst: Instance, decimals: int = 12) -> TabularEncoder:
    """Deterministic abstraction merging slates with equal expected reward at every context."""
    keys = np.round(inst.env.q_table.T, decimals)
    _, groups = np.unique(keys, axis=0, return_inverse=True)
    return TabularEncoder.deterministic(inst.space, groups.ravel())


@dataclass
class Enumerated:
    """All single-record outcomes with their probabilities."""

    data: LoggedDataset
    prob: np.ndarray
    z: Optional[np.ndarray] = None


def enumerate_records(inst: Instance, encoder=None, sigma: float = 0.0) -> Enumerated:
    """Enumerate ``(x, s[, r], [z])`` outcomes of one logged record.

    ``sigma > 0`` replaces the reward by the two-point law ``q +- sigma`` (each
    with probability 1/2), which keeps ``E[r|x,s] = q`` and gives
    ``E[r^2|x,s] = q^2 + sigma^2``. Without it the reward equals ``q``, which
    suffices for expectations of estimators that are linear in ``r``.
    """
    slates = enumerate_slates(inst.space)
    xs, ss, rs, ps, zs = [], [], [], [], []
    signs = (-1.0, 1.0) if sigma > 0 else (0.0,)
    for k, x in enumerate(inst.env.contexts):
        p0 = inst.logging.slate_distribution(x)
        X = np.repeat(x[None], len(slates), 0)
        pz = encoder.encode(X, slates) if encoder is not None else np.ones((len(slates), 1))
        for j, s in enumerate(slates):
            for sign in signs:
                for z in range(pz.shape[1]):
                    p = inst.env.context_probs[k] * p0[j] * pz[j, z] / len(signs)
                    if p == 0.0:
                        continue
                    xs.append(x)
                    ss.append(s)
                    rs.append(inst.env.q_table[k, j] + sign * sigma)
                    ps.append(p)
                    zs.append(z)
    X, S = np.array(xs), np.array(ss)
    slot_ps = inst.logging.chosen_slot_probs(X, S)
    data = LoggedDataset(x=X, s=S, r=np.array(rs), pscore=slot_ps.prod(axis=1), pscore_slot=slot_ps)
    return Enumerated(data, np.array(ps), np.array(zs) if encoder is not None else None)


def expectation(enum: Enumerated, estimate) -> float:
    return float(enum.prob @ estimate.terms)


def single_record_moments(enum: Enumerated, estimate) -> tuple:
    """Mean and variance of one estimator term under the enumerated law."""
    t = estimate.terms
    mean = float(enum.prob @ t)
    return mean, float(enum.prob @ (t - mean) ** 2)


def lips_exact(inst: Instance, enum: Enumerated, encoder):
    return estimate_lips(enum.data, inst.target, encoder, inst.logging, z=enum.z, mode="exact", floor=0.0)


def fixed_model(inst: Instance, rng, kind: str = "any") -> Callable:
    """Context-free reward model with random values.

    ``any`` is an arbitrary slate table, ``prefix`` depends only on the first
    ``L // 2`` slots and ``linear`` is a sum of per-slot terms. The hybrid
    estimators are unbiased when ``q - q_hat`` has the structure their weights
    exploit, so each one is checked with the matching model family.
    """
    space = inst.space
    slates = enumerate_slates(space)
    if kind == "any":
        table = rng.standard_normal(space.n_slates)
    elif kind == "prefix":
        k = space.n_slots // 2
        prefix = SlateSpace(space.slot_sizes[:k])
        table = rng.standard_normal(prefix.n_slates)[prefix.index(slates[:, :k])]
    elif kind == "linear":
        table = sum(rng.standard_normal(a)[slates[:, l]] for l, a in enumerate(space.slot_sizes))
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    return lambda X, S: table[space.index(S).reshape(-1)]


# ---------------------------------------------------------------------------
# identities


def unbiasedness_residuals(inst: Instance, seed: int = 0) -> dict:
    """``|E[V_hat] - V|`` for each estimator under the condition that makes it unbiased."""
    rng = substream(seed, "verification", "unbiased")
    k = inst.space.n_slots // 2
    out = {}
    enum = enumerate_records(inst)
    v = inst.value()
    qhat = fixed_model(inst, rng, "any")
    out["ips"] = abs(expectation(enum, estimate_ips(enum.data, inst.target)) - v)
    out["dr"] = abs(expectation(enum, estimate_dr(enum.data, inst.target, qhat)) - v)
    out["mips"] = abs(expectation(enum, estimate_mips(enum.data, inst.target, k)) - v)
    out["offcem"] = abs(expectation(enum, estimate_offcem(enum.data, inst.target, fixed_model(inst, rng, "prefix"), k)) - v)
    enc = grouping_encoder(inst)
    enum_z = enumerate_records(inst, enc)
    out["lips_sufficient"] = abs(expectation(enum_z, lips_exact(inst, enum_z, enc)) - v)

    lin = inst.with_rewards(linear_rewards(inst, rng))
    enum_lin = enumerate_records(lin)
    v_lin = lin.value()
    out["pi_linear"] = abs(expectation(enum_lin, estimate_pi(enum_lin.data, lin.target)) - v_lin)
    out["pidr_linear"] = abs(expectation(enum_lin, estimate_pidr(enum_lin.data, lin.target, fixed_model(inst, rng, "linear"))) - v_lin)
    return out


def pairwise_bias(inst: Instance, encoder) -> float:
    """Bias of the latent estimator written as a sum over slate pairs.

    ``E_{x, z ~ p(z|x; pi_0)} sum_{j<k} p(s_j|x,z) p(s_k|x,z) (q_j - q_k)(w_k - w_j)``
    with ``p(s|x,z)`` the logging posterior of slates given the latent.
    """
    slates = enumerate_slates(inst.space)
    W = inst.slate_weights()
    P0 = inst.logging_table()
    total = 0.0
    for c, x in enumerate(inst.env.contexts):
        pz = encoder.encode(np.repeat(x[None], len(slates), 0), slates)
        joint = P0[c][:, None] * pz  # (|S|, |Z|)
        marg = joint.sum(axis=0)
        q, w = inst.env.q_table[c], W[c]
        dq = q[:, None] - q[None, :]
        dw = w[None, :] - w[:, None]
        upper = np.triu(np.ones((len(q), len(q)), dtype=bool), 1)
        for z in np.flatnonzero(marg > 0):
            post = joint[:, z] / marg[z]
            pair = post[:, None] * post[None, :] * dq * dw
            total += inst.env.context_probs[c] * marg[z] * pair[upper].sum()
    return float(total)


def bias_residual(inst: Instance, encoder) -> tuple:
    """Exact LIPS bias, the pairwise formula, and their absolute difference."""
    enum = enumerate_records(inst, encoder)
    bias = expectation(enum, lips_exact(inst, enum, encoder)) - inst.value()
    formula = pairwise_bias(inst, encoder)
    return bias, formula, abs(bias - formula)


def posterior_weight(inst: Instance, encoder) -> np.ndarray:
    """``E_{p(s|x,z; pi_0)}[w(x,s)]`` as a ``(n_contexts, |Z|)`` table (NaN where ``p(z|x; pi_0) = 0``)."""
    slates = enumerate_slates(inst.space)
    W = inst.slate_weights()
    P0 = inst.logging_table()
    out = np.full((len(inst.env.contexts), encoder.n_latent), np.nan)
    for c, x in enumerate(inst.env.contexts):
        joint = P0[c][:, None] * encoder.encode(np.repeat(x[None], len(slates), 0), slates)
        marg = joint.sum(axis=0)
        ok = marg > 0
        out[c, ok] = (joint[:, ok] * W[c][:, None]).sum(axis=0) / marg[ok]
    return out


def latent_weight_table(inst: Instance, encoder) -> np.ndarray:
    mt, ml, _ = latent_marginals(encoder, [inst.target, inst.logging], inst.env.contexts, mode="exact")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(ml > 0, mt / ml, np.nan)


def weight_identity_residual(inst: Instance, encoder) -> float:
    lw = latent_weight_table(inst, encoder)
    pw = posterior_weight(inst, encoder)
    ok = ~np.isnan(pw)
    return float(np.max(np.abs(lw[ok] - pw[ok])))


def weight_mean_residual(inst: Instance, encoder) -> float:
    """``|E_{pi_0, p_theta}[w_theta(x, z)] - 1|``."""
    enum = enumerate_records(inst, encoder)
    lw = latent_weight_table(inst, encoder)
    ctx = np.array([np.flatnonzero(np.all(inst.env.contexts == x, axis=1))[0] for x in enum.data.x])
    return abs(float(enum.prob @ lw[ctx, enum.z]) - 1.0)


def variance_gap(inst: Instance, encoder, sigma: float = 0.1) -> tuple:
    """Single-record ``Var(IPS) - Var(LIPS)`` and ``E_{x,z}[E[r^2|x,z] Var_{p(s|x,z)}(w)]``.

    The right-hand side uses ``E[r^2|x,z]`` averaged over the logging
    posterior, which is the conditional second moment whenever the abstraction
    is sufficient.
    """
    enum = enumerate_records(inst, encoder, sigma=sigma)
    _, var_ips = single_record_moments(enum, estimate_ips(enum.data, inst.target))
    _, var_lips = single_record_moments(enum, lips_exact(inst, enum, encoder))
    rhs = 0.0
    slates = enumerate_slates(inst.space)
    W = inst.slate_weights()
    P0 = inst.logging_table()
    for c, x in enumerate(inst.env.contexts):
        joint = P0[c][:, None] * encoder.encode(np.repeat(x[None], len(slates), 0), slates)
        m2 = inst.env.q_table[c] ** 2 + sigma**2
        for z in np.flatnonzero(joint.sum(axis=0) > 0):
            marg = joint[:, z].sum()
            post = joint[:, z] / marg
            ew = post @ W[c]
            var_w = post @ (W[c] - ew) ** 2
            rhs += inst.env.context_probs[c] * marg * (post @ m2) * var_w
    return var_ips - var_lips, rhs


def mse_gain(inst: Instance, encoder, n: int, sigma: float = 0.1) -> tuple:
    """``n (MSE(IPS) - MSE(LIPS))`` computed directly and via the conditional decomposition.

    The decomposition is
    ``E[Var(w) E[m]] + E[Cov(w^2, m)] + 2 V b + (1 - n) b^2`` with moments
    under the logging posterior ``p(s|x,z)``, ``m = E[r^2|x,s]`` and ``b`` the
    LIPS bias.
    """
    enum = enumerate_records(inst, encoder, sigma=sigma)
    v = inst.value()
    mean_ips, var_ips = single_record_moments(enum, estimate_ips(enum.data, inst.target))
    mean_lips, var_lips = single_record_moments(enum, lips_exact(inst, enum, encoder))
    mse_ips = var_ips / n + (mean_ips - v) ** 2
    mse_lips = var_lips / n + (mean_lips - v) ** 2
    direct = n * (mse_ips - mse_lips)

    b = mean_lips - v
    slates = enumerate_slates(inst.space)
    W = inst.slate_weights()
    P0 = inst.logging_table()
    term1 = term2 = 0.0
    for c, x in enumerate(inst.env.contexts):
        joint = P0[c][:, None] * encoder.encode(np.repeat(x[None], len(slates), 0), slates)
        m = inst.env.q_table[c] ** 2 + sigma**2
        w = W[c]
        for z in np.flatnonzero(joint.sum(axis=0) > 0):
            marg = joint[:, z].sum()
            post = joint[:, z] / marg
            ew, em, ew2 = post @ w, post @ m, post @ w**2
            weight = inst.env.context_probs[c] * marg
            term1 += weight * (ew2 - ew**2) * em
            term2 += weight * (post @ (w**2 * m) - ew2 * em)
    formula = term1 + term2 + 2 * v * b + (1 - n) * b**2
    return direct, formula


# ---------------------------------------------------------------------------
# suite


@dataclass
class CheckResult:
    name: str
    residual: float
    tolerance: float
    detail: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.residual) and self.residual < self.tolerance)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["residual"] = float(self.residual)
        d["detail"] = {k: v.item() if isinstance(v, np.generic) else v for k, v in self.detail.items()}
        d["passed"] = self.passed
        return d


def random_encoders(inst: Instance, count: int, n_latent: int, seed: int) -> list:
    rng = substream(seed, "verification", "encoders")
    return [TabularEncoder.random(inst.space, n_latent, rng) for _ in range(count)]


def verify_theorems(
    inst: Optional[Instance] = None, n_encoders: int = 20, n_latent: int = 3, n: int = 7, sigma: float = 0.1, seed: int = 0
) -> list:
    """Run every exact identity; returns one :class:`CheckResult` per check."""
    inst = default_instance(seed) if inst is None else inst
    start = time.perf_counter()
    results = []
    for name, res in unbiasedness_residuals(inst, seed).items():
        results.append(CheckResult(f"unbiased/{name}", res, TOL_EXACT))

    generic = inst.with_rewards(random_rewards(inst, substream(seed, "verification", "generic")))
    encoders = random_encoders(inst, n_encoders, n_latent, seed)
    worst, biases = 0.0, []
    for enc in encoders:
        bias, formula, res = bias_residual(generic, enc)
        worst = max(worst, res)
        biases.append(bias)
    results.append(CheckResult("bias_formula/random_encoders", worst, TOL_EXACT,
                               {"max_abs_bias": float(np.max(np.abs(biases)))}))

    groups = grouping_encoder(inst)
    coarse = TabularEncoder.deterministic(inst.space, np.zeros(inst.space.n_slates, dtype=np.int64))
    bias, formula, res = bias_residual(generic, coarse)
    results.append(CheckResult("bias_formula/insufficient_grouping", res, TOL_EXACT, {"bias": bias}))

    worst = max(weight_identity_residual(generic, e) for e in encoders + [groups])
    results.append(CheckResult("latent_weight/posterior_identity", worst, TOL_EXACT))
    worst = max(weight_mean_residual(generic, e) for e in encoders)
    results.append(CheckResult("latent_weight/unit_mean", worst, TOL_EXACT))

    gap, rhs = variance_gap(inst, groups, sigma)
    results.append(CheckResult("variance/sufficient_grouping", abs(gap - rhs), TOL_EXACT, {"gap": gap, "rhs": rhs}))
    ident = TabularEncoder.identity(inst.space)
    gap, rhs = variance_gap(inst, ident, sigma)
    results.append(CheckResult("variance/identity", max(abs(gap), abs(rhs)), TOL_EXACT, {"gap": gap, "rhs": rhs}))

    worst = 0.0
    for enc in encoders + [groups]:
        direct, formula = mse_gain(generic, enc, n, sigma)
        worst = max(worst, abs(direct - formula))
    results.append(CheckResult("mse_gain/decomposition", worst, TOL_MSE))

    uni = TabularEncoder.uniform(inst.space, n_latent)
    enum_u = enumerate_records(generic, uni)
    lw = lips_exact(generic, enum_u, uni)
    results.append(CheckResult("limits/uniform_encoder_weights", float(np.max(np.abs(lw.terms - enum_u.data.r))), TOL_EXACT))
    enum_i = enumerate_records(generic, ident)
    li = lips_exact(generic, enum_i, ident)
    ips_i = estimate_ips(enum_i.data, generic.target)
    results.append(CheckResult("limits/identity_equals_ips", float(np.max(np.abs(li.terms - ips_i.terms))), TOL_EXACT))

    elapsed = time.perf_counter() - start
    for r in results:
        r.detail.setdefault("elapsed_s", elapsed)
    return results
