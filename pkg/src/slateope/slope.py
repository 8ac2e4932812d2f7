"""Lepski-style selection among estimators ordered by increasing bias.

Candidates are indexed ``m = 0, 1, ...`` so that bias is non-decreasing and the
confidence half-width is non-increasing in ``m``. The rule keeps the largest
``m`` whose interval is compatible with every earlier candidate.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

SLOPE_CONSTANT = np.sqrt(6.0) - 1.0


def cnf(values, delta: float = 0.05) -> float:
    """Empirical-Bernstein half-width for the mean of ``values``.

    Parameters
    ----------
    values : array_like
        Per-record estimator terms, at least two.
    delta : float
        Failure probability of the two-sided bound.

    Returns
    -------
    float
        ``sqrt(2 v ln(2/delta) / n) + 7 R ln(2/delta) / (3 (n - 1))`` with ``v``
        the sample variance and ``R`` the empirical range.
    """
    v = np.asarray(values, dtype=float).ravel()
    n = len(v)
    if n < 2:
        raise ValueError("cnf needs at least two values")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    log_term = np.log(2.0 / delta)
    var = v.var(ddof=1)
    spread = v.max() - v.min()
    return float(np.sqrt(2.0 * var * log_term / n) + 7.0 * spread * log_term / (3.0 * (n - 1)))


@dataclass
class CandidateEstimate:
    beta: float
    value: float
    width: float
    index: int = 0
    terms: Optional[np.ndarray] = field(default=None, repr=False)

    @classmethod
    def from_terms(cls, beta: float, terms, index: int = 0, delta: float = 0.05) -> "CandidateEstimate":
        terms = np.asarray(terms, dtype=float)
        return cls(float(beta), float(terms.mean()), cnf(terms, delta), index, terms)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("terms")
        return d


def slope_select(values: Sequence[float], widths: Sequence[float]) -> int:
    """0-based index ``max{m : |V_m - V_k| <= W_m + (sqrt(6) - 1) W_k for all k < m}``.

    Every ``m`` is tested against all earlier candidates; a failure at some
    ``m`` does not stop later candidates from being accepted.
    """
    values = np.asarray(values, dtype=float)
    widths = np.asarray(widths, dtype=float)
    if len(values) == 0 or values.shape != widths.shape:
        raise ValueError("need matching, non-empty values and widths")
    if np.any(widths < 0):
        raise ValueError("confidence widths must be non-negative")
    chosen = 0
    for m in range(1, len(values)):
        gaps = np.abs(values[m] - values[:m])
        if np.all(gaps <= widths[m] + SLOPE_CONSTANT * widths[:m]):
            chosen = m
    return chosen


def order_by_beta(candidates: Sequence[CandidateEstimate]) -> list:
    """Sort candidates by increasing beta (least regularised first) and re-index them."""
    ordered = sorted(candidates, key=lambda c: c.beta)
    for i, c in enumerate(ordered):
        c.index = i
    return ordered


def select_beta(candidates: Sequence[CandidateEstimate]) -> CandidateEstimate:
    ordered = order_by_beta(candidates)
    m = slope_select([c.value for c in ordered], [c.width for c in ordered])
    return ordered[m]


def write_selection(path, candidates: Sequence[CandidateEstimate], chosen: CandidateEstimate) -> None:
    record = {"candidates": [c.to_dict() for c in candidates], "selected_beta": chosen.beta, "selected_index": chosen.index}
    Path(path).write_text(json.dumps(record, indent=2))


def read_selection(path) -> tuple:
    record = json.loads(Path(path).read_text())
    cands = [CandidateEstimate(**c) for c in record["candidates"]]
    return cands, record["selected_beta"]
