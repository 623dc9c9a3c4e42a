"""Item propensity scores and the inverse weights derived from them.

Three families are supported:

``power-law``
    ``p_i = ((N_i + 1) / (max_j N_j + 1)) ** gamma``, so the most observed
    item gets ``p = 1``.
``power-law-clipped``
    the power-law score lower-bounded by a constant ``C``.
``log-sigmoid``
    ``p_i = sigmoid(alpha + beta * log(N_i + 1))`` with natural log. The
    default intercept centres the sigmoid on the midpoint of the smallest
    and largest ``log(N + 1)``.

``N_i`` are observed training counts, i.e. the diagonal of the training
Gram matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from ipslae.errors import ConfigError

FAMILIES = ("power-law", "power-law-clipped", "log-sigmoid")


@dataclass(frozen=True, eq=False)
class PropensityVector:
    p: np.ndarray
    w: np.ndarray
    family: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown propensity family {self.family!r}")
        for arr in (self.p, self.w):
            arr.setflags(write=False)

    @classmethod
    def from_scores(cls, p: np.ndarray, family: str, params: dict) -> "PropensityVector":
        p = np.asarray(p, dtype=np.float64)
        if p.ndim != 1 or not np.all((p > 0) & (p <= 1)):
            raise ValueError("propensity scores must lie in (0, 1]")
        return cls(p.copy(), 1.0 / p, family, dict(params))

    def __len__(self):
        return len(self.p)

    def describe(self) -> dict:
        return {"family": self.family, "params": dict(self.params)}

    def to_tsv(self, path: str | Path, item_ids: Sequence[str]) -> Path:
        """Two-column ``item_id<TAB>weight`` table, weights at full precision."""
        if len(item_ids) != len(self.w):
            raise ValueError("item id count does not match weight vector")
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("item_id\tweight\n")
            for iid, wi in zip(item_ids, self.w):
                fh.write(f"{iid}\t{float(wi)!r}\n")
        return path


def item_counts(gram_or_matrix) -> np.ndarray:
    """Observed per-item counts from a GramMatrix or an InteractionMatrix."""
    if hasattr(gram_or_matrix, "g"):
        return np.rint(np.diag(gram_or_matrix.g)).astype(np.int64)
    return np.asarray(gram_or_matrix.item_degrees(), dtype=np.int64)


def _check_counts(counts) -> np.ndarray:
    counts = np.asarray(counts)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a non-empty 1-d vector")
    if np.any(counts < 0):
        raise ValueError("counts must be nonnegative")
    return counts.astype(np.float64)


def propensity_powerlaw(counts, gamma: float) -> PropensityVector:
    counts = _check_counts(counts)
    if not gamma > 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")
    p = ((counts + 1.0) / (counts.max() + 1.0)) ** gamma
    return PropensityVector.from_scores(p, "power-law", {"gamma": float(gamma)})


def clip_propensity(pv: PropensityVector, c: float) -> PropensityVector:
    """Lower-bound scores at ``c``; weights are then capped at ``1 / c``."""
    if not 0 < c < 1:
        raise ConfigError(f"clip threshold must lie in (0, 1), got {c}")
    params = dict(pv.params)
    params["C"] = float(c)
    return PropensityVector.from_scores(np.maximum(pv.p, c), "power-law-clipped", params)


def logsigmoid_intercept(counts, beta: float) -> float:
    counts = _check_counts(counts)
    return -beta * (np.log(counts.min() + 1.0) + np.log(counts.max() + 1.0)) / 2.0


def propensity_logsigmoid(counts, beta: float,
                          alpha_override: float | None = None) -> PropensityVector:
    counts = _check_counts(counts)
    if not beta > 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    alpha = logsigmoid_intercept(counts, beta) if alpha_override is None else float(alpha_override)
    p = expit(alpha + beta * np.log(counts + 1.0))
    params = {"beta": float(beta), "alpha": float(alpha),
              "alpha_rule": "override" if alpha_override is not None else "midpoint",
              "log_base": "e"}
    # expit can round to exactly 0 for extreme negative logits; keep weights finite
    p = np.maximum(p, np.finfo(np.float64).tiny)
    return PropensityVector.from_scores(p, "log-sigmoid", params)


def make_propensity(counts, family: str, **params) -> PropensityVector:
    """Build a propensity vector from a family name and its parameters.

    ``power-law`` takes ``gamma``; ``power-law-clipped`` takes ``gamma``
    and ``C``; ``log-sigmoid`` takes ``beta`` and optionally ``alpha``.
    """
    try:
        if family == "power-law":
            return propensity_powerlaw(counts, params["gamma"])
        if family == "power-law-clipped":
            return clip_propensity(propensity_powerlaw(counts, params["gamma"]), params["C"])
        if family == "log-sigmoid":
            return propensity_logsigmoid(counts, params["beta"], params.get("alpha"))
    except KeyError as exc:
        raise ConfigError(f"family {family!r} is missing parameter {exc.args[0]!r}") from exc
    raise ConfigError(f"unknown propensity family {family!r}; expected one of {FAMILIES}")


def marginal_utility_powerlaw(n: int, gamma: float) -> float:
    """d p / d N under ``p ~ N**gamma``, up to the proportionality constant."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return gamma * float(n) ** (gamma - 1.0)


def marginal_utility_log(n: int) -> float:
    if n < 0:
        raise ValueError("n must be >= 0")
    return 1.0 / (n + 1.0)


def weight_curve(counts, family: str, **params) -> list[tuple[int, float]]:
    """Distinct observed counts paired with their weights, ascending by count."""
    counts = np.asarray(counts)
    pv = make_propensity(counts, family, **params)
    uniq, first = np.unique(counts, return_index=True)
    return [(int(c), float(pv.w[j])) for c, j in zip(uniq, first)]


def write_weight_curve(path: str | Path, curve: list[tuple[int, float]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("count\tweight\n")
        for c, wv in curve:
            fh.write(f"{c}\t{wv!r}\n")
    return path
