"""EASE closed form, post-hoc item weighting, and independent verification paths.

The fast path inverts ``G + lam*I`` through a Cholesky factorization and
reads the zero-diagonal solution straight off the inverse. The oracle
paths never form that shortcut: they solve each column's constrained ridge
regression directly from ``X`` with a generic least-squares solver, or
rebuild the solution from the SVD of ``X``.

Everything here is single-threaded numpy/scipy apart from whatever
threading the BLAS backend does; pin ``OMP_NUM_THREADS=1`` when bitwise
reproducibility across machines matters.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp

from ipslae.containers import read_container, write_container
from ipslae.errors import ConfigError, DataError, NumericalError
from ipslae.propensity import PropensityVector

log = logging.getLogger(__name__)

# tolerance ladder shared by fitting checks and tests
TOL_EXACT = 1e-10
TOL_CROSS = 1e-8

MAX_CONDITION = 1e14
DEFAULT_MEMORY_BUDGET = 4 * 2**30
ORACLE_MAX_ITEMS = 200


@dataclass(frozen=True, eq=False)
class GramMatrix:
    g: np.ndarray

    @property
    def n_items(self) -> int:
        return self.g.shape[0]

    @property
    def counts(self) -> np.ndarray:
        return np.rint(np.diag(self.g)).astype(np.int64)


def _as_csr(X) -> sp.csr_matrix:
    if hasattr(X, "matrix"):
        return X.matrix
    if sp.issparse(X):
        return sp.csr_matrix(X, dtype=np.float64)
    return sp.csr_matrix(np.asarray(X, dtype=np.float64))


def _as_dense(X) -> np.ndarray:
    if hasattr(X, "matrix"):
        return X.matrix.toarray()
    if sp.issparse(X):
        return X.toarray()
    return np.asarray(X, dtype=np.float64)


def _check_budget(n_items: int, budget: int) -> None:
    need = 8 * n_items * n_items
    if need > budget:
        raise DataError(f"dense {n_items}x{n_items} matrix needs {need / 2**30:.2f} GiB, "
                        f"over the {budget / 2**30:.2f} GiB memory budget")


def gram(X, memory_budget: int = DEFAULT_MEMORY_BUDGET) -> GramMatrix:
    """Dense ``X^T X`` from a sparse binary matrix."""
    m = _as_csr(X)
    _check_budget(m.shape[1], memory_budget)
    g = (m.T @ m).toarray()
    return GramMatrix(np.asarray(g, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class SimilarityModel:
    """Item-item matrix ``b`` plus how it was produced.

    ``column_weights`` is the cumulative per-item factor applied to the
    columns of an originally fitted matrix (``None`` when unweighted);
    ``weights`` is the last propensity vector applied. ``lagrange`` holds
    the zero-diagonal multipliers of an EASE fit.
    """

    b: np.ndarray
    lam: float | None
    zero_diagonal: bool
    weights: PropensityVector | None = None
    column_weights: np.ndarray | None = None
    lagrange: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        b = self.b
        if b.ndim != 2 or b.shape[0] != b.shape[1]:
            raise DataError(f"similarity matrix must be square, got shape {b.shape}")
        if not np.all(np.isfinite(b)):
            raise NumericalError("similarity matrix has non-finite entries")
        if self.zero_diagonal and b.shape[0] and np.max(np.abs(np.diag(b))) > TOL_EXACT:
            raise NumericalError("zero_diagonal is set but diag(B) is not zero")
        for arr in (b, self.column_weights, self.lagrange):
            if arr is not None:
                arr.setflags(write=False)

    @property
    def n_items(self) -> int:
        return self.b.shape[0]

    @classmethod
    def from_array(cls, b, lam: float | None = None, provenance: dict | None = None
                   ) -> "SimilarityModel":
        """Wrap an externally trained matrix (EDLAE, RDLAE, SANSA, ...)."""
        b = np.array(b, dtype=np.float64)
        zero_diag = bool(b.shape[0] == 0 or np.max(np.abs(np.diag(b))) <= TOL_EXACT)
        prov = {"method": "external"}
        prov.update(provenance or {})
        return cls(b, lam, zero_diag, provenance=prov)

    def save(self, path: str | Path, run_meta: dict | None = None) -> Path:
        meta = {
            "run": run_meta,
            "n_items": self.n_items,
            "lambda": self.lam,
            "zero_diagonal": self.zero_diagonal,
            "provenance": self.provenance,
            "weights": self.weights.describe() if self.weights is not None else None,
        }
        arrays = {"b": self.b}
        if self.column_weights is not None:
            arrays["column_weights"] = self.column_weights
        if self.lagrange is not None:
            arrays["lagrange"] = self.lagrange
        if self.weights is not None:
            arrays["weights_p"] = self.weights.p
        return write_container(path, "similarity", meta, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "SimilarityModel":
        head, a = read_container(path, kind="similarity")
        b = a["b"]
        if b.shape != (head["n_items"], head["n_items"]):
            raise DataError(f"{path}: matrix shape {b.shape} disagrees with header")
        weights = None
        if head.get("weights") is not None:
            weights = PropensityVector.from_scores(a["weights_p"], head["weights"]["family"],
                                                   head["weights"]["params"])
        return cls(b, head["lambda"], head["zero_diagonal"], weights,
                   a.get("column_weights"), a.get("lagrange"), head["provenance"])


def _cholesky_inverse(a: np.ndarray) -> np.ndarray:
    n = a.shape[0]
    try:
        factor = la.cho_factor(a, lower=True, check_finite=True)
    except (la.LinAlgError, ValueError) as exc:
        raise NumericalError(f"Cholesky factorization failed: {exc}") from exc
    p = la.cho_solve(factor, np.eye(n))
    return (p + p.T) / 2.0


def fit_ease(g, lam: float, memory_budget: int = DEFAULT_MEMORY_BUDGET) -> SimilarityModel:
    """Closed-form EASE: ``B = I - P diagMat(1 / diag(P))`` with ``P = (G + lam I)^-1``."""
    if not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    g_arr = g.g if isinstance(g, GramMatrix) else np.asarray(g, dtype=np.float64)
    n = g_arr.shape[0]
    _check_budget(n, memory_budget)

    a = g_arr + lam * np.eye(n)
    # G is PSD so lambda_min(A) >= lam; Gershgorin bounds lambda_max
    cond_bound = np.max(np.abs(a).sum(axis=1)) / lam if n else 1.0
    if not np.isfinite(cond_bound) or cond_bound > MAX_CONDITION:
        raise NumericalError(f"system too ill-conditioned (bound {cond_bound:.3g})")

    p = _cholesky_inverse(a)
    d = np.diag(p).copy()
    b = np.eye(n) - p / d[None, :]
    np.fill_diagonal(b, 0.0)
    lagrange = 1.0 / d - lam
    if not np.all(np.isfinite(b)):
        raise NumericalError("EASE solution has non-finite entries")
    return SimilarityModel(b, float(lam), True, lagrange=lagrange,
                           provenance={"method": "ease", "lambda": float(lam),
                                       "solver": "cholesky"})


def _oracle_solve(X, lam: float, target_weights: np.ndarray | None) -> np.ndarray:
    x = _as_dense(X)
    n_users, n = x.shape
    if n > ORACLE_MAX_ITEMS:
        raise ConfigError(f"oracle solver is limited to {ORACLE_MAX_ITEMS} items, got {n}")
    if not lam > 0:
        raise ConfigError(f"lambda must be positive, got {lam}")
    w = np.ones(n) if target_weights is None else target_weights
    b = np.zeros((n, n))
    ridge = np.sqrt(lam) * np.eye(n - 1)
    for j in range(n):
        # B_jj = 0 removes column j from the regressors
        keep = np.arange(n) != j
        design = np.vstack([x[:, keep], ridge])
        target = np.concatenate([w[j] * x[:, j], np.zeros(n - 1)])
        coef, *_ = np.linalg.lstsq(design, target, rcond=None)
        b[keep, j] = coef
    return b


def fit_ease_oracle(X, lam: float) -> SimilarityModel:
    """Per-column constrained ridge regression, solved without the closed form."""
    b = _oracle_solve(X, lam, None)
    return SimilarityModel(b, float(lam), True,
                           provenance={"method": "ease-oracle", "lambda": float(lam)})


def _weight_array(w, n_items: int) -> np.ndarray:
    arr = np.array(w.w if isinstance(w, PropensityVector) else w, dtype=np.float64)
    if arr.shape != (n_items,):
        raise DataError(f"weight vector has shape {arr.shape}, model has {n_items} items")
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise ConfigError("item weights must be finite and positive")
    return arr


def fit_ease_weighted_oracle(X, lam: float, w) -> SimilarityModel:
    """Directly minimize ``||X diag(w) - X B||^2 + lam ||B||^2`` with ``diag(B) = 0``."""
    x = _as_dense(X)
    warr = _weight_array(w, x.shape[1])
    b = _oracle_solve(x, lam, warr)
    return SimilarityModel(b, float(lam), True, column_weights=warr,
                           provenance={"method": "ease-weighted-oracle", "lambda": float(lam)})


def apply_item_weights(model: SimilarityModel, w) -> SimilarityModel:
    """Scale column ``i`` of ``B`` by ``w_i``; the input model is left untouched.

    ``w`` is a PropensityVector or a raw positive array. Because weighting
    the regression targets only rescales each column's solution, this
    equals refitting on the weighted objective.
    """
    warr = _weight_array(w, model.n_items)
    b = model.b * warr[None, :]
    cumulative = warr if model.column_weights is None else model.column_weights * warr
    prov = dict(model.provenance)
    history = list(prov.get("weight_history", []))
    history.append(w.describe() if isinstance(w, PropensityVector) else {"family": "custom"})
    prov["weight_history"] = history
    return SimilarityModel(b, model.lam, model.zero_diagonal,
                           weights=w if isinstance(w, PropensityVector) else model.weights,
                           column_weights=cumulative, lagrange=model.lagrange, provenance=prov)


@dataclass(frozen=True)
class SpectralReport:
    rank: int
    singular_values: tuple[float, ...]
    max_abs_deviation: float


def spectral_check(X, lam: float, alpha_vec=None) -> SpectralReport:
    """Rebuild the EASE matrix from the SVD of ``X`` and compare with the closed form.

    ``V diag(s^2 / (s^2 + lam)) V^T - V diag(1 / (s^2 + lam)) V^T diagMat(alpha)``
    is evaluated with the full right singular basis, so null-space
    directions (``s = 0``) enter the second term with weight ``1 / lam``.
    ``alpha_vec`` defaults to the multipliers of the closed-form fit.
    """
    x = _as_dense(X)
    n = x.shape[1]
    if n > ORACLE_MAX_ITEMS:
        raise ConfigError(f"spectral check is limited to {ORACLE_MAX_ITEMS} items, got {n}")
    closed = fit_ease(gram(x), lam)
    alpha = closed.lagrange if alpha_vec is None else np.asarray(alpha_vec, dtype=np.float64)
    try:
        _, s, vt = np.linalg.svd(x, full_matrices=True)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from exc
    v = vt.T
    s2 = np.zeros(n)
    s2[:len(s)] = s**2
    shrink = (v * (s2 / (s2 + lam))) @ v.T
    constraint = ((v * (1.0 / (s2 + lam))) @ v.T) * alpha[None, :]
    spectral_b = shrink - constraint
    tol = max(x.shape) * np.finfo(np.float64).eps * (s[0] if len(s) else 0.0)
    return SpectralReport(
        rank=int(np.sum(s > tol)),
        singular_values=tuple(float(v_) for v_ in s),
        max_abs_deviation=float(np.max(np.abs(spectral_b - closed.b))) if n else 0.0,
    )


def fit_rank_reduced(X, rank: int, lam: float,
                     memory_budget: int = DEFAULT_MEMORY_BUDGET) -> SimilarityModel:
    """EASE fitted on the Gram matrix of the rank-``rank`` truncation of ``X``.

    The truncated Gram ``V_r S_r^2 V_r^T`` comes from the top eigenpairs of
    ``X^T X``, which are the right singular vectors and squared singular
    values of ``X``.
    """
    g = gram(X, memory_budget).g
    n = g.shape[0]
    if not 1 <= rank <= n:
        raise ConfigError(f"rank must lie in [1, {n}], got {rank}")
    try:
        vals, vecs = la.eigh(g, subset_by_index=[n - rank, n - 1])
    except la.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed: {exc}") from exc
    vals = np.clip(vals, 0.0, None)
    reduced = (vecs * vals) @ vecs.T
    reduced = (reduced + reduced.T) / 2.0
    model = fit_ease(reduced, lam, memory_budget)
    prov = dict(model.provenance)
    prov.update({"method": "ease-rank-reduced", "rank": int(rank),
                 "reduction": "truncated-gram"})
    return SimilarityModel(model.b, model.lam, True, lagrange=model.lagrange, provenance=prov)
