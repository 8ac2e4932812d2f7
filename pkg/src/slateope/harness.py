"""Multi-seed experiment sweeps, metrics and report files."""
from __future__ import annotations

import csv
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.stats import binomtest

from .abstraction import AbstractionModel, TrainConfig, gumbel_noise, objective_grads, train_abstraction_path
from .core import substream, true_value
from .estimators import (
    estimate_dm,
    estimate_dr,
    estimate_ips,
    estimate_lips,
    estimate_mips,
    estimate_nae,
    estimate_offcem,
    estimate_pi,
    estimate_pidr,
)
from .neural import NETWORK_METADATA, Mlp, finite_difference_grad, mlp_grad, norm_relative_error, relative_error, train_reward_model
from .slope import CandidateEstimate, select_beta
from .synthenv import EnvConfig, build_env, generate_logs, make_policies

MODEL_BASED = ("dm", "dr", "pidr", "offcem")
KNOWN_ESTIMATORS = ("nae", "dm", "ips", "pi", "mips", "dr", "pidr", "offcem", "lips")
IDENTITY_TOL = 1e-12


def lips_label(beta: float) -> str:
    return f"lips[beta={beta:g}]"


@dataclass
class ExperimentConfig:
    """Sweep definition. ``env`` supplies everything not swept over."""

    env: EnvConfig = field(default_factory=EnvConfig)
    slate_sizes: tuple = (4,)
    data_sizes: tuple = (2000,)
    reward_fns: tuple = (1,)
    estimators: tuple = KNOWN_ESTIMATORS
    n_seeds: int = 20
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)
    reward_epochs: int = 500
    reward_lr: float = 1e-2
    n_mc: int = 10**6
    dm_samples: int = 1000
    slope_delta: float = 0.05
    workers: int = 1

    def __post_init__(self):
        self.slate_sizes = tuple(int(v) for v in self.slate_sizes)
        self.data_sizes = tuple(int(v) for v in self.data_sizes)
        self.reward_fns = tuple(int(v) for v in self.reward_fns)
        self.estimators = tuple(self.estimators)
        if not (self.slate_sizes and self.data_sizes and self.reward_fns and self.estimators):
            raise ValueError("sweep axes and the estimator list must be non-empty")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be at least 1")
        unknown = set(self.estimators) - set(KNOWN_ESTIMATORS)
        if unknown:
            raise ValueError(f"unknown estimators: {sorted(unknown)}")

    @classmethod
    def profile(cls, name: str, **overrides) -> "ExperimentConfig":
        """``desk``: L=4, |A|=4, n=2000, 20 seeds. ``paper``: L=8, |A|=10, n=4000, 50 seeds."""
        if name == "desk":
            base = dict(
                env=EnvConfig(n_slots=4, slot_size=4),
                slate_sizes=(4,),
                data_sizes=(2000,),
                n_seeds=20,
                train=TrainConfig(lr=3e-3, batch_size=64, pretrain_epochs=100, finetune_epochs=30, marginal_samples=200),
                reward_epochs=100,
            )
        elif name == "paper":
            base = dict(env=EnvConfig(n_slots=8, slot_size=10), slate_sizes=(8,), data_sizes=(4000,), n_seeds=50)
        else:
            raise ValueError(f"unknown profile {name!r}")
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        base = cls() if base is None else base
        d = dict(d)
        env = replace(base.env, **d.pop("env", {}))
        train_d = d.pop("train", {})
        if "betas" in train_d:
            train_d["betas"] = tuple(train_d["betas"])
        train = replace(base.train, **train_d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return replace(base, env=env, train=train, **d)

    @classmethod
    def from_json(cls, path, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()), base)


@dataclass
class MetricsRow:
    estimator: str
    n_slots: int
    n_data: int
    reward_fn: int
    v_true: float
    v_true_se: float
    nmse: float
    squared_bias: float
    variance: float
    estimates: list = field(default_factory=list)

    CSV_FIELDS = ("estimator", "n_slots", "n_data", "reward_fn", "v_true", "v_true_se", "nmse", "squared_bias", "variance")

    @classmethod
    def from_estimates(cls, estimator, point, v_true, v_true_se, estimates) -> "MetricsRow":
        est = np.asarray(estimates, dtype=float)
        mean = est.mean()
        sq_bias = float((mean - v_true) ** 2)
        variance = float(((est - mean) ** 2).mean())
        nmse = float(((est - v_true) ** 2).mean() / v_true**2)
        return cls(estimator, *point, float(v_true), float(v_true_se), nmse, sq_bias, variance, est.tolist())

    def identity_residual(self) -> float:
        """Gap between the normalized MSE and ``(bias^2 + variance) / V^2``.

        Absolute for normalized MSEs up to 1 and relative above, so rounding
        in very large MSEs is not mistaken for a broken decomposition.
        """
        decomposed = (self.squared_bias + self.variance) / self.v_true**2
        return abs(self.nmse - decomposed) / max(1.0, abs(self.nmse))

    def check_identity(self) -> None:
        if not self.identity_residual() <= IDENTITY_TOL:
            raise ArithmeticError(f"MSE decomposition fails for {self.estimator}: {self.identity_residual():.3g}")


def mse_from(bias: float, variance: float) -> float:
    """Mean squared error from its bias and variance."""
    return bias**2 + variance


@dataclass
class ExperimentResult:
    rows: list
    seeds: list  # per point: dict with per-seed details (slope choices, timings)
    config: ExperimentConfig

    def row(self, estimator: str, point: Optional[tuple] = None) -> MetricsRow:
        for r in self.rows:
            if r.estimator == estimator and (point is None or (r.n_slots, r.n_data, r.reward_fn) == point):
                return r
        raise KeyError(estimator)


def _point_env(config: ExperimentConfig, point: tuple):
    L, _, fn = point
    return build_env(replace(config.env, n_slots=L, reward_fn=fn, seed=config.seed))


def run_trial(config: ExperimentConfig, point: tuple, seed: int) -> dict:
    """All estimates for one logged dataset; every consumer has its own stream."""
    L, n, fn = point
    tag = (config.seed, L, n, fn, seed)
    env = _point_env(config, point)
    logging, target = make_policies(env)
    data = generate_logs(env, logging, n, substream(*tag[:1], "logs", *tag[1:]))
    k = L // 2
    est = {}
    timings = {}
    qhat = None
    if any(e in config.estimators for e in MODEL_BASED):
        t = time.perf_counter()
        qhat = train_reward_model(data, env.space, epochs=config.reward_epochs, lr=config.reward_lr,
                                  rng=substream(tag[0], "reward_model", *tag[1:]))
        timings["reward_model"] = time.perf_counter() - t

    def rng(name):
        return substream(tag[0], "estimator", name, *tag[1:])

    for name in config.estimators:
        if name == "nae":
            est[name] = estimate_nae(data).value
        elif name == "ips":
            est[name] = estimate_ips(data, target).value
        elif name == "pi":
            est[name] = estimate_pi(data, target).value
        elif name == "mips":
            est[name] = estimate_mips(data, target, k).value
        elif name == "dm":
            est[name] = estimate_dm(data, target, qhat, config.dm_samples, rng(name)).value
        elif name == "dr":
            est[name] = estimate_dr(data, target, qhat, config.dm_samples, rng(name)).value
        elif name == "pidr":
            est[name] = estimate_pidr(data, target, qhat, config.dm_samples, rng(name)).value
        elif name == "offcem":
            est[name] = estimate_offcem(data, target, qhat, k, config.dm_samples, rng(name)).value

    slope = None
    if "lips" in config.estimators:
        t = time.perf_counter()
        path = train_abstraction_path(
            data, config.train, lambda b: substream(tag[0], "abstraction", str(b), *tag[1:]), space=env.space
        )
        timings["abstraction"] = time.perf_counter() - t
        t = time.perf_counter()
        cands = []
        for beta, trained in path.items():
            res = estimate_lips(data, target, trained, logging, n_samples=config.train.marginal_samples,
                                rng=rng(lips_label(beta)), floor=config.train.marginal_floor)
            est[lips_label(beta)] = res.value
            cands.append(CandidateEstimate.from_terms(beta, res.terms, delta=config.slope_delta))
        chosen = select_beta(cands)
        est["lips"] = chosen.value
        slope = {"selected_beta": chosen.beta, "candidates": [c.to_dict() for c in cands]}
        timings["lips_estimates"] = time.perf_counter() - t
    return {"seed": seed, "estimates": est, "slope": slope, "timings": timings}


def _trial_args(args):
    return run_trial(*args)


def run_experiment(config: ExperimentConfig, progress=None) -> ExperimentResult:
    """Sweep every (slate size, data size, reward function) point over ``n_seeds`` datasets."""
    rows, seed_info = [], []
    for L in config.slate_sizes:
        for n in config.data_sizes:
            for fn in config.reward_fns:
                point = (L, n, fn)
                try:
                    env = _point_env(config, point)
                    _, target = make_policies(env)
                    truth = true_value(env, target, "monte_carlo", n_mc=config.n_mc,
                                       rng=substream(config.seed, "true_value", L, fn))
                    jobs = [(config, point, s) for s in range(config.n_seeds)]
                    if config.workers > 1:
                        with ProcessPoolExecutor(config.workers) as pool:
                            trials = list(pool.map(_trial_args, jobs))
                    else:
                        trials = []
                        for job in jobs:
                            trials.append(run_trial(*job))
                            if progress is not None:
                                progress(point, trials[-1])
                except Exception as exc:
                    raise RuntimeError(f"experiment failed at L={L}, n={n}, reward_fn={fn}: {exc}") from exc
                names = list(trials[0]["estimates"])
                for name in names:
                    values = [t["estimates"][name] for t in trials]
                    row = MetricsRow.from_estimates(name, point, truth.value, truth.stderr, values)
                    row.check_identity()
                    rows.append(row)
                seed_info.append({"point": list(point), "trials": trials})
    return ExperimentResult(rows, seed_info, config)


# ---------------------------------------------------------------------------
# reports


def emit_report(result, out_dir, formats=("csv", "json"), plotdata: bool = True) -> list:
    """Write ``metrics.csv``, ``metrics.json`` and optional plot-data files; returns the paths."""
    rows = result.rows if isinstance(result, ExperimentResult) else list(result)
    if not rows:
        raise ValueError("no metrics to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for r in rows:
        r.check_identity()
    if "csv" in formats:
        path = out / "metrics.csv"
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(MetricsRow.CSV_FIELDS)
            for r in rows:
                writer.writerow([repr(getattr(r, f)) if isinstance(getattr(r, f), float) else getattr(r, f)
                                 for f in MetricsRow.CSV_FIELDS])
        written.append(path)
    if "json" in formats:
        path = out / "metrics.json"
        payload = {"rows": [asdict(r) for r in rows]}
        if isinstance(result, ExperimentResult):
            payload["config"] = result.config.to_dict()
            payload["networks"] = NETWORK_METADATA
            payload["trials"] = result.seeds
        path.write_text(json.dumps(payload, indent=1, default=_jsonable))
        written.append(path)
    if plotdata:
        written.extend(_write_plotdata(rows, out))
    return written


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _write_plotdata(rows, out: Path) -> list:
    """One file per reward function and swept axis; one series per estimator."""
    written = []
    for fn in sorted({r.reward_fn for r in rows}):
        sub = [r for r in rows if r.reward_fn == fn]
        for axis, attr in (("n_data", "n_data"), ("n_slots", "n_slots")):
            xs = sorted({getattr(r, attr) for r in sub})
            series = {}
            for r in sub:
                series.setdefault(r.estimator, {})[getattr(r, attr)] = r.nmse
            payload = {"x_label": axis, "y_label": "normalized MSE", "x": xs,
                       "series": {k: [v.get(x) for x in xs] for k, v in series.items()}}
            path = out / f"plot_fn{fn}_{axis}.json"
            path.write_text(json.dumps(payload, indent=1))
            written.append(path)
    return written


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = []
        for rec in csv.DictReader(fh):
            rows.append(MetricsRow(
                rec["estimator"], int(rec["n_slots"]), int(rec["n_data"]), int(rec["reward_fn"]),
                *(float(rec[k]) for k in ("v_true", "v_true_se", "nmse", "squared_bias", "variance")),
            ))
        return rows


# ---------------------------------------------------------------------------
# comparisons


def squared_errors(row: MetricsRow) -> np.ndarray:
    return (np.asarray(row.estimates) - row.v_true) ** 2


def sign_test(errors_a, errors_b) -> dict:
    """One-sided paired sign test that ``a`` has smaller squared error than ``b``; ties dropped."""
    a, b = np.asarray(errors_a), np.asarray(errors_b)
    wins = int(np.sum(a < b))
    losses = int(np.sum(a > b))
    n = wins + losses
    p = binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    return {"wins": wins, "losses": losses, "p_value": float(p)}


def oracle_best_beta(result: ExperimentResult, point: Optional[tuple] = None) -> tuple:
    """The LIPS candidate with the smallest normalized MSE over seeds, and its row."""
    rows = [r for r in result.rows if r.estimator.startswith("lips[")
            and (point is None or (r.n_slots, r.n_data, r.reward_fn) == point)]
    best = min(rows, key=lambda r: r.nmse)
    return float(best.estimator.split("=")[1].rstrip("]")), best


# ---------------------------------------------------------------------------
# gradient checks


def gradcheck_suite(n_networks: int = 20, seed: int = 0, h: float = 1e-5) -> dict:
    """Worst relative error of analytic vs central-difference gradients per network family.

    Errors are norm-wise per parameter array. The entry-wise maximum is also
    reported under ``entrywise``; it is sensitive to round-off on entries many
    orders of magnitude below the array's largest gradient.
    """
    rng = substream(seed, "gradcheck")
    worst = {"squared": 0.0, "nll": 0.0, "abstraction": 0.0}
    entrywise = dict(worst)
    for _ in range(n_networks):
        d_in, hidden, d_out = (int(v) for v in rng.integers(2, 7, size=3))
        X = rng.standard_normal((6, d_in))
        net = Mlp.init(d_in, d_out, hidden, rng=rng)
        for p in net.params.values():
            p += 0.1 * rng.standard_normal(p.shape)
        y = rng.standard_normal((6, d_out))
        _update(worst, entrywise, "squared", mlp_grad(net, "squared", X, y), finite_difference_grad(net, "squared", X, y, h))
        groups = (2, d_out + 1)
        cat = Mlp.init(d_in, sum(groups), hidden, "log_softmax", groups=groups, rng=rng)
        for p in cat.params.values():
            p += 0.1 * rng.standard_normal(p.shape)
        yc = np.stack([rng.integers(0, g, 6) for g in groups], axis=1)
        _update(worst, entrywise, "nll", mlp_grad(cat, "nll", X, yc), finite_difference_grad(cat, "nll", X, yc, h))
        for analytic, numeric in abstraction_gradcheck(rng, h):
            _update(worst, entrywise, "abstraction", analytic, numeric)
    worst["entrywise"] = entrywise
    return worst


def _update(worst: dict, entrywise: dict, key: str, analytic: dict, numeric: dict) -> None:
    worst[key] = max(worst[key], max(norm_relative_error(analytic[k], numeric[k]) for k in analytic))
    entrywise[key] = max(entrywise[key], max(relative_error(analytic[k], numeric[k]) for k in analytic))


def abstraction_gradcheck(rng, h: float = 1e-5) -> list:
    """Analytic and central-difference gradients of the abstraction objective.

    Uses a random small model along the relaxed sampling path at fixed Gumbel
    noise; returns ``(analytic, numeric)`` dict pairs, one per network and KL form.
    """
    from .core import SlateSpace

    sizes = tuple(int(v) for v in rng.integers(2, 4, size=2))
    space = SlateSpace(sizes)
    d, Z, B = 3, int(rng.integers(2, 5)), 5
    model = AbstractionModel.init(space, d, n_latent=Z, hidden=int(rng.integers(3, 7)), rng=rng)
    X = rng.standard_normal((B, d))
    S = np.stack([rng.integers(0, a, B) for a in sizes], axis=1)
    r = rng.standard_normal(B)
    noise = gumbel_noise(rng, (B, Z))
    beta = float(rng.uniform(0.1, 2.0))
    pairs = []
    for kl in ("analytic", "sample"):
        cfg = TrainConfig(kl_estimator=kl)
        _, grads = objective_grads(model, X, S, r, noise, beta, cfg, relaxed=True)
        for net_name, net in model.nets().items():
            numeric = {}
            for key, p in net.params.items():
                g = np.zeros_like(p)
                for idx in np.ndindex(p.shape):
                    orig = p[idx]
                    p[idx] = orig + h
                    up = objective_grads(model, X, S, r, noise, beta, cfg, relaxed=True)[0].total
                    p[idx] = orig - h
                    down = objective_grads(model, X, S, r, noise, beta, cfg, relaxed=True)[0].total
                    p[idx] = orig
                    g[idx] = (up - down) / (2 * h)
                numeric[key] = g
            pairs.append((grads[net_name], numeric))
    return pairs
