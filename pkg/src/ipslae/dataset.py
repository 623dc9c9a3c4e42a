"""Interaction ingestion, binarization, user splits and synthetic MNAR data."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import brentq

from ipslae.containers import read_container, write_container
from ipslae.errors import ConfigError, DataError

log = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy.random.PCG64"
SEGMENTS = ("valid", "test")


def make_rng(seed: int) -> np.random.Generator:
    """The one generator used for every seeded operation in the package."""
    return np.random.Generator(np.random.PCG64(seed))


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class InteractionRecord:
    user_id: str
    item_id: str
    value: float
    timestamp: int | None = None

    def __post_init__(self):
        if not self.value >= 0:
            raise DataError(f"interaction value must be >= 0, got {self.value}")


def _sniff_delimiter(line: str) -> str:
    return "\t" if "\t" in line else ","


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_interactions(path: str | Path, delimiter: str | None = None,
                      header: bool | None = None) -> list[InteractionRecord]:
    """Parse a delimited ``user, item, value[, timestamp]`` file.

    ``delimiter=None`` picks tab when the first line contains one, comma
    otherwise. ``header=None`` treats the first line as a header when its
    value column is not numeric. Rows come back in file order, unfiltered.
    """
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read interactions file {path}: {exc}") from exc
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise DataError(f"interactions file {path} is empty")

    delim = delimiter or _sniff_delimiter(lines[0])
    rows = list(csv.reader(lines, delimiter=delim))
    start = 0
    if header is None:
        first = rows[0]
        header = len(first) < 3 or not _is_number(first[2].strip())
    if header:
        start = 1
    if start >= len(rows):
        raise DataError(f"interactions file {path} has a header but no rows")

    records = []
    for lineno, row in enumerate(rows[start:], start=start + 1):
        if len(row) not in (3, 4):
            raise DataError(f"{path}:{lineno}: expected 3 or 4 columns, got {len(row)}")
        user, item, value = (c.strip() for c in row[:3])
        try:
            val = float(value)
            ts = int(row[3].strip()) if len(row) == 4 and row[3].strip() else None
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed row {row!r}") from exc
        if not user or not item:
            raise DataError(f"{path}:{lineno}: empty user or item id")
        if not (val >= 0 and math.isfinite(val)):
            raise DataError(f"{path}:{lineno}: value must be a finite number >= 0, got {value}")
        records.append(InteractionRecord(user, item, val, ts))
    return records


@dataclass(eq=False)
class InteractionMatrix:
    """Binary user-item matrix in canonical CSR form with external id maps.

    Row ``u`` holds the strictly increasing item indices user ``u`` touched.
    ``user_ids`` and ``item_ids`` list the external id of each row/column.
    """

    matrix: sp.csr_matrix
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]

    def __post_init__(self):
        m = sp.csr_matrix(self.matrix, dtype=np.float64)
        m.sum_duplicates()
        m.sort_indices()
        m.data[:] = 1.0
        m.eliminate_zeros()
        self.matrix = m
        self.user_ids = tuple(self.user_ids)
        self.item_ids = tuple(self.item_ids)
        if m.shape != (len(self.user_ids), len(self.item_ids)):
            raise DataError(f"matrix shape {m.shape} does not match id maps "
                            f"({len(self.user_ids)}, {len(self.item_ids)})")

    @classmethod
    def from_pairs(cls, users: Sequence[int], items: Sequence[int], n_users: int, n_items: int,
                   user_ids: Sequence[str] | None = None,
                   item_ids: Sequence[str] | None = None) -> "InteractionMatrix":
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        m = sp.csr_matrix((np.ones(len(users)), (users, items)), shape=(n_users, n_items))
        if user_ids is None:
            user_ids = [f"u{u}" for u in range(n_users)]
        if item_ids is None:
            item_ids = [f"i{i}" for i in range(n_items)]
        return cls(m, tuple(user_ids), tuple(item_ids))

    @classmethod
    def from_dense(cls, dense, user_ids=None, item_ids=None) -> "InteractionMatrix":
        dense = np.asarray(dense)
        u, i = np.nonzero(dense)
        return cls.from_pairs(u, i, dense.shape[0], dense.shape[1], user_ids, item_ids)

    @property
    def n_users(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_items(self) -> int:
        return self.matrix.shape[1]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    @property
    def rows(self) -> list[np.ndarray]:
        m = self.matrix
        return [m.indices[m.indptr[u]:m.indptr[u + 1]] for u in range(m.shape[0])]

    @cached_property
    def user_index(self) -> dict[str, int]:
        return {uid: k for k, uid in enumerate(self.user_ids)}

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {iid: k for k, iid in enumerate(self.item_ids)}

    def user_degrees(self) -> np.ndarray:
        return np.diff(self.matrix.indptr)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.matrix.indices, minlength=self.n_items)

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def to_records(self, value: float = 1.0) -> list[InteractionRecord]:
        m = self.matrix
        out = []
        for u in range(self.n_users):
            for i in m.indices[m.indptr[u]:m.indptr[u + 1]]:
                out.append(InteractionRecord(self.user_ids[u], self.item_ids[i], value))
        return out

    def stats(self) -> dict:
        cells = self.n_users * self.n_items
        return {"users": self.n_users, "items": self.n_items, "interactions": self.nnz,
                "density": self.nnz / cells if cells else 0.0}

    def __eq__(self, other):
        if not isinstance(other, InteractionMatrix):
            return NotImplemented
        return (self.user_ids == other.user_ids and self.item_ids == other.item_ids
                and self.matrix.shape == other.matrix.shape
                and np.array_equal(self.matrix.indptr, other.matrix.indptr)
                and np.array_equal(self.matrix.indices, other.matrix.indices))

    def save(self, path: str | Path, run_meta: dict | None = None) -> Path:
        m = self.matrix
        meta = {"n_users": self.n_users, "n_items": self.n_items,
                "user_ids": list(self.user_ids), "item_ids": list(self.item_ids),
                "run": run_meta}
        return write_container(path, "interactions", meta,
                               {"indptr": m.indptr, "indices": m.indices})

    @classmethod
    def load(cls, path: str | Path) -> "InteractionMatrix":
        head, arrays = read_container(path, kind="interactions")
        shape = (head["n_users"], head["n_items"])
        m = sp.csr_matrix((np.ones(len(arrays["indices"])), arrays["indices"], arrays["indptr"]),
                          shape=shape)
        return cls(m, tuple(head["user_ids"]), tuple(head["item_ids"]))


def preprocess(records: Iterable[InteractionRecord], rating_threshold: float = 4.0,
               min_user_degree: int = 1, min_item_degree: int = 1) -> InteractionMatrix:
    """Binarize and degree-filter raw records into a canonical matrix.

    Records with ``value >= rating_threshold`` become ones; duplicate pairs
    collapse. Users then items below their degree minimum are removed,
    repeatedly, until neither pass removes anything. Surviving ids are
    sorted so the result does not depend on record order.
    """
    records = list(records)
    if not records:
        raise DataError("no interaction records to preprocess")
    pairs = {(r.user_id, r.item_id) for r in records if r.value >= rating_threshold}

    while True:
        n_before = len(pairs)
        udeg: dict[str, int] = {}
        for u, _ in pairs:
            udeg[u] = udeg.get(u, 0) + 1
        pairs = {(u, i) for u, i in pairs if udeg[u] >= min_user_degree}
        ideg: dict[str, int] = {}
        for _, i in pairs:
            ideg[i] = ideg.get(i, 0) + 1
        pairs = {(u, i) for u, i in pairs if ideg[i] >= min_item_degree}
        if len(pairs) == n_before:
            break

    if not pairs:
        raise DataError("matrix is empty after thresholding and degree filtering")
    user_ids = sorted({u for u, _ in pairs})
    item_ids = sorted({i for _, i in pairs})
    uix = {u: k for k, u in enumerate(user_ids)}
    iix = {i: k for k, i in enumerate(item_ids)}
    rows = [uix[u] for u, _ in pairs]
    cols = [iix[i] for _, i in pairs]
    return InteractionMatrix.from_pairs(rows, cols, len(user_ids), len(item_ids),
                                        user_ids, item_ids)


@dataclass(eq=False)
class EvalSplit:
    """Disjoint train/valid/test users; valid and test rows split fold-in/holdout.

    ``foldin[seg]`` and ``holdout[seg]`` are CSR matrices whose row ``r``
    belongs to user ``users(seg)[r]``. Users of degree 1 keep their only
    item in fold-in and have an empty holdout row.
    """

    train: sp.csr_matrix
    train_users: np.ndarray
    valid_users: np.ndarray
    test_users: np.ndarray
    foldin: dict[str, sp.csr_matrix]
    holdout: dict[str, sp.csr_matrix]
    seed: int
    params: dict = field(default_factory=dict)
    rng_algorithm: str = RNG_ALGORITHM

    @property
    def n_items(self) -> int:
        return self.train.shape[1]

    def users(self, segment: str) -> np.ndarray:
        if segment not in SEGMENTS:
            raise ConfigError(f"unknown segment {segment!r}; expected one of {SEGMENTS}")
        return self.valid_users if segment == "valid" else self.test_users

    def train_matrix(self) -> InteractionMatrix:
        return InteractionMatrix(self.train,
                                 tuple(f"u{u}" for u in self.train_users),
                                 tuple(f"i{i}" for i in range(self.n_items)))

    def __eq__(self, other):
        if not isinstance(other, EvalSplit):
            return NotImplemented

        def same(a, b):
            return (a.shape == b.shape and np.array_equal(a.indptr, b.indptr)
                    and np.array_equal(a.indices, b.indices))

        return (self.seed == other.seed
                and same(self.train, other.train)
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in ("train_users", "valid_users", "test_users"))
                and all(same(self.foldin[s], other.foldin[s]) and
                        same(self.holdout[s], other.holdout[s]) for s in SEGMENTS))

    def save(self, path: str | Path, run_meta: dict | None = None) -> Path:
        arrays = {"train_users": self.train_users, "valid_users": self.valid_users,
                  "test_users": self.test_users,
                  "train_indptr": self.train.indptr, "train_indices": self.train.indices}
        for seg in SEGMENTS:
            for name, mats in (("foldin", self.foldin), ("holdout", self.holdout)):
                arrays[f"{seg}_{name}_indptr"] = mats[seg].indptr
                arrays[f"{seg}_{name}_indices"] = mats[seg].indices
        meta = {"n_items": self.n_items, "seed": self.seed, "params": self.params,
                "rng_algorithm": self.rng_algorithm, "run": run_meta}
        return write_container(path, "split", meta, arrays)

    @classmethod
    def load(cls, path: str | Path) -> "EvalSplit":
        head, a = read_container(path, kind="split")
        n_items = head["n_items"]

        def csr(prefix, n_rows):
            idx = a[f"{prefix}_indices"]
            return sp.csr_matrix((np.ones(len(idx)), idx, a[f"{prefix}_indptr"]),
                                 shape=(n_rows, n_items))

        users = {s: a[f"{s}_users"] for s in ("train", "valid", "test")}
        return cls(
            train=csr("train", len(users["train"])),
            train_users=users["train"], valid_users=users["valid"], test_users=users["test"],
            foldin={s: csr(f"{s}_foldin", len(users[s])) for s in SEGMENTS},
            holdout={s: csr(f"{s}_holdout", len(users[s])) for s in SEGMENTS},
            seed=head["seed"], params=head["params"], rng_algorithm=head["rng_algorithm"],
        )


def split_strong_generalization(X: InteractionMatrix, valid_frac: float = 0.1,
                                test_frac: float = 0.1, holdout_frac: float = 0.2,
                                seed: int = 0) -> EvalSplit:
    """Partition users into train/valid/test and split held-out histories.

    Segment sizes are ``round(frac * n_users)``. Each held-out user of
    degree ``d >= 2`` gets ``round(holdout_frac * d)`` holdout items,
    clamped to ``[1, d - 1]``.
    """
    if not (valid_frac >= 0 and test_frac >= 0 and 0 < valid_frac + test_frac < 1):
        raise ConfigError(f"need 0 < valid_frac + test_frac < 1, got {valid_frac} + {test_frac}")
    if not 0 < holdout_frac < 1:
        raise ConfigError(f"holdout_frac must lie in (0, 1), got {holdout_frac}")

    rng = make_rng(seed)
    n = X.n_users
    perm = rng.permutation(n)
    n_test = _round_half_up(test_frac * n)
    n_valid = _round_half_up(valid_frac * n)
    if n_test + n_valid >= n:
        raise ConfigError(f"split leaves no training users ({n} users, "
                          f"{n_valid} valid, {n_test} test)")
    test_users = np.sort(perm[:n_test])
    valid_users = np.sort(perm[n_test:n_test + n_valid])
    train_users = np.sort(perm[n_test + n_valid:])

    rows = X.rows
    foldin, holdout = {}, {}
    for seg, users in (("valid", valid_users), ("test", test_users)):
        f_rows, h_rows = [], []
        for u in users:
            items = rows[u]
            d = len(items)
            if d < 2:
                f_rows.append(items)
                h_rows.append(items[:0])
                continue
            h = min(max(_round_half_up(holdout_frac * d), 1), d - 1)
            chosen = np.zeros(d, dtype=bool)
            chosen[rng.choice(d, size=h, replace=False)] = True
            f_rows.append(items[~chosen])
            h_rows.append(items[chosen])
        foldin[seg] = _rows_to_csr(f_rows, X.n_items)
        holdout[seg] = _rows_to_csr(h_rows, X.n_items)

    params = {"valid_frac": valid_frac, "test_frac": test_frac, "holdout_frac": holdout_frac}
    return EvalSplit(X.matrix[train_users], train_users, valid_users, test_users,
                     foldin, holdout, seed, params)


def _rows_to_csr(rows: list[np.ndarray], n_items: int) -> sp.csr_matrix:
    indptr = np.zeros(len(rows) + 1, dtype=np.int64)
    indptr[1:] = np.cumsum([len(r) for r in rows])
    indices = np.concatenate(rows).astype(np.int64) if rows else np.zeros(0, np.int64)
    return sp.csr_matrix((np.ones(len(indices)), indices, indptr), shape=(len(rows), n_items))


@dataclass(eq=False)
class SyntheticGroundTruth:
    full_matrix: np.ndarray
    exposure: np.ndarray
    true_counts: np.ndarray
    observed: InteractionMatrix

    @property
    def observed_counts(self) -> np.ndarray:
        return self.observed.item_degrees()

    def save(self, path: str | Path, run_meta: dict | None = None) -> Path:
        meta = {"n_users": self.observed.n_users, "n_items": self.observed.n_items,
                "run": run_meta}
        return write_container(path, "synthetic", meta,
                               {"full_matrix": self.full_matrix.astype(np.uint8),
                                "exposure": self.exposure, "true_counts": self.true_counts,
                                "observed_counts": self.observed_counts})


def long_tail_exposure(n_items: int, exponent: float = 1.0, floor: float = 0.01,
                       seed: int = 0, head_frac: float = 0.0) -> np.ndarray:
    """Zipf-like exposure over shuffled item ranks.

    The first ``head_frac`` of ranks are fully exposed; after that exposure
    decays as ``(rank / head)**-exponent``, never below ``floor``.
    """
    if not 0 < floor <= 1:
        raise ConfigError(f"floor must lie in (0, 1], got {floor}")
    if not 0 <= head_frac < 1:
        raise ConfigError(f"head_frac must lie in [0, 1), got {head_frac}")
    ranks = make_rng(seed).permutation(n_items) + 1
    head = max(1.0, head_frac * n_items)
    return np.clip((ranks / head) ** -exponent, floor, 1.0)


def _preference_probabilities(rng: np.random.Generator, n_users: int, n_items: int,
                              density: float, concentration: float,
                              appeal: np.ndarray, dim: int = 2) -> np.ndarray:
    """Preference probabilities for users and items placed on a taste sphere.

    Tastes are uniform unit vectors in ``dim`` dimensions (``dim = 2`` is a
    circle). Affinity is ``appeal_i * exp(concentration * cos(angle))``; a
    common scale is solved for so that the mean probability, after capping
    at 1, equals ``density``.
    """
    def unit(n):
        v = rng.standard_normal((n, dim))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    items = unit(n_items)
    users = unit(n_users)
    affinity = np.exp(concentration * (users @ items.T))
    affinity *= appeal[None, :]
    affinity /= affinity.mean()

    def excess(scale):
        return np.minimum(1.0, scale * affinity).mean() - density

    hi = 1.0
    while excess(hi) < 0:
        hi *= 2.0
    scale = brentq(excess, 0.0, hi, xtol=1e-12)
    return np.minimum(1.0, scale * affinity)


def generate_mnar(n_users: int, n_items: int, preference_density: float,
                  exposure_profile, seed: int = 0,
                  taste_concentration: float = 0.0,
                  item_appeal=None, taste_dim: int = 2) -> SyntheticGroundTruth:
    """Sample true preferences, then observe each with its item's exposure probability.

    With ``taste_concentration = 0`` every user-item pair is preferred
    independently with probability ``preference_density``. Positive values
    place users and items on a sphere in ``taste_dim`` dimensions and make
    nearby pairs more likely, keeping the expected density at
    ``preference_density``; this gives the item co-occurrence structure a
    recommender can learn. ``item_appeal``
    (positive, per item) scales how widely each item is liked, independent
    of how often it is shown.
    """
    if n_users < 1 or n_items < 1:
        raise DataError(f"degenerate synthetic size {n_users} x {n_items}")
    if not 0 < preference_density < 1:
        raise ConfigError(f"preference_density must lie in (0, 1), got {preference_density}")
    exposure = np.broadcast_to(np.asarray(exposure_profile, dtype=np.float64), (n_items,)).copy()
    if np.any(exposure <= 0) or np.any(exposure > 1):
        raise ConfigError("exposure probabilities must lie in (0, 1]")
    if taste_concentration < 0:
        raise ConfigError("taste_concentration must be >= 0")
    if taste_dim < 2:
        raise ConfigError(f"taste_dim must be >= 2, got {taste_dim}")
    if item_appeal is not None:
        item_appeal = np.broadcast_to(np.asarray(item_appeal, dtype=np.float64),
                                      (n_items,)).copy()
        if np.any(~np.isfinite(item_appeal)) or np.any(item_appeal <= 0):
            raise ConfigError("item_appeal must be finite and positive")

    rng = make_rng(seed)
    if taste_concentration == 0 and item_appeal is None:
        prob = np.full((1, n_items), preference_density)
    else:
        appeal = np.ones(n_items) if item_appeal is None else item_appeal
        prob = _preference_probabilities(rng, n_users, n_items, preference_density,
                                         taste_concentration, appeal, taste_dim)
    full = rng.random((n_users, n_items)) < prob
    seen = full & (rng.random((n_users, n_items)) < exposure[None, :])

    uw, iw = len(str(n_users - 1)), len(str(n_items - 1))
    observed = InteractionMatrix.from_dense(
        seen,
        user_ids=[f"u{u:0{uw}d}" for u in range(n_users)],
        item_ids=[f"i{i:0{iw}d}" for i in range(n_items)],
    )
    return SyntheticGroundTruth(full, exposure, full.sum(axis=0).astype(np.int64), observed)
