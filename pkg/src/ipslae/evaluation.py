"""Scoring of held-out users and top-N accuracy / diversity metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from ipslae.dataset import EvalSplit
from ipslae.errors import DataError

DEFAULT_RECALL_KS = (20, 50)
DEFAULT_NDCG_KS = (100,)
DEFAULT_COVERAGE_KS = (100,)


@dataclass(eq=False)
class ScoreMatrix:
    """Scores for the scored users of one segment.

    ``rows`` are positions inside the segment, ``users`` the matching
    global user indices. Fold-in items hold ``-inf`` in ``scores`` and are
    flagged in ``foldin_mask``. ``skipped`` lists users with no fold-in items.
    """

    users: np.ndarray
    rows: np.ndarray
    scores: np.ndarray
    foldin_mask: np.ndarray
    skipped: np.ndarray


@dataclass(eq=False)
class RankedList:
    users: np.ndarray
    items: list[np.ndarray]

    def __len__(self):
        return len(self.items)


def score_users(model, split: EvalSplit, segment: str = "test",
                rows: np.ndarray | None = None) -> ScoreMatrix:
    """``S = X_foldin B`` for held-out users, fold-in items masked out.

    ``rows`` optionally restricts scoring to some segment positions.
    """
    b = model.b if hasattr(model, "b") else np.asarray(model)
    if b.shape != (split.n_items, split.n_items):
        raise DataError(f"model has {b.shape[0]} items, split has {split.n_items}")
    users = split.users(segment)
    foldin = split.foldin[segment]
    if rows is None:
        rows = np.arange(len(users))
    rows = np.asarray(rows, dtype=np.int64)
    degree = np.diff(foldin.indptr)[rows]
    keep = rows[degree > 0]
    skipped = users[rows[degree == 0]]

    x = foldin[keep]
    scores = np.asarray(x @ b, dtype=np.float64)
    mask = x.toarray() > 0
    scores[mask] = -np.inf
    return ScoreMatrix(users[keep], keep, scores, mask, skipped)


def top_n(scores, n: int) -> RankedList:
    """Per-row top ``n`` by descending score, ties to the lower item index.

    Rows shorter than ``n`` in finite scores return all finite-score items.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    s = scores.scores if isinstance(scores, ScoreMatrix) else np.atleast_2d(np.asarray(scores))
    users = scores.users if isinstance(scores, ScoreMatrix) else np.arange(s.shape[0])
    n_items = s.shape[1]
    k = min(n, n_items)
    out = []
    if s.shape[0] == 0:
        return RankedList(users, out)
    neg = -s
    kth = np.partition(neg, k - 1, axis=1)[:, k - 1]
    for r in range(s.shape[0]):
        row = neg[r]
        cand = np.flatnonzero(row <= kth[r])
        order = cand[np.lexsort((cand, row[cand]))][:k]
        out.append(order[np.isfinite(row[order])])
    return RankedList(users, out)


def recall_at_k(ranked: Sequence[int], holdout: Iterable[int], k: int) -> float:
    """Hits in the top ``k`` over ``min(k, |holdout|)``."""
    relevant = set(int(i) for i in holdout)
    if not relevant:
        raise ValueError("recall is undefined for an empty holdout")
    hits = sum(1 for i in ranked[:k] if int(i) in relevant)
    return hits / min(k, len(relevant))


def _discounts(k: int) -> np.ndarray:
    return 1.0 / np.log2(np.arange(2, k + 2))


def ndcg_at_k(ranked: Sequence[int], holdout: Iterable[int], k: int) -> float:
    """Binary-relevance NDCG with log2 discount."""
    relevant = set(int(i) for i in holdout)
    if not relevant:
        raise ValueError("NDCG is undefined for an empty holdout")
    top = list(ranked[:k])
    disc = _discounts(k)
    dcg = math.fsum(disc[r] for r, i in enumerate(top) if int(i) in relevant)
    idcg = math.fsum(disc[:min(k, len(relevant))])
    return dcg / idcg


def coverage_at_k(ranked_lists: Iterable[Sequence[int]], n_items: int, k: int) -> float:
    """Share of the catalogue appearing in at least one top-``k`` list."""
    seen: set[int] = set()
    for lst in ranked_lists:
        seen.update(int(i) for i in lst[:k])
    return len(seen) / n_items


def popularity_order(counts) -> np.ndarray:
    """Items by descending count, ties to the lower index."""
    counts = np.asarray(counts)
    return np.lexsort((np.arange(len(counts)), -counts))


def popularity_bins(ranked_lists: Iterable[Sequence[int]], counts, n_bins: int = 10,
                    k: int = 100) -> np.ndarray:
    """How many top-``k`` recommendations land in each popularity bin.

    Items are ordered by descending training count and cut into ``n_bins``
    bins of equal item count, earlier bins taking the remainder. Bin 0
    holds the most popular items.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    counts = np.asarray(counts)
    bin_of = np.empty(len(counts), dtype=np.int64)
    for b, chunk in enumerate(np.array_split(popularity_order(counts), n_bins)):
        bin_of[chunk] = b
    hist = np.zeros(n_bins, dtype=np.int64)
    for lst in ranked_lists:
        top = np.asarray(lst[:k], dtype=np.int64)
        hist += np.bincount(bin_of[top], minlength=n_bins)
    return hist


def popular_items(counts, top_frac: float) -> np.ndarray:
    if not 0 < top_frac <= 1:
        raise ValueError(f"top_frac must lie in (0, 1], got {top_frac}")
    counts = np.asarray(counts)
    n_top = max(1, int(math.floor(top_frac * len(counts) + 0.5)))
    return popularity_order(counts)[:n_top]


def popular_subset_metrics(ranked_lists: Sequence[Sequence[int]],
                           holdouts: Sequence[Iterable[int]], counts,
                           top_frac: float = 0.2, k: int = 100) -> tuple[float, float, int]:
    """Recall@k and NDCG@k judged only on holdout items among the most popular.

    Rankings are left untouched; users whose restricted holdout is empty
    are skipped. Returns ``(recall, ndcg, n_users_scored)``.
    """
    popular = set(int(i) for i in popular_items(counts, top_frac))
    recalls, ndcgs = [], []
    for lst, hold in zip(ranked_lists, holdouts):
        restricted = [int(i) for i in hold if int(i) in popular]
        if not restricted:
            continue
        recalls.append(recall_at_k(lst, restricted, k))
        ndcgs.append(ndcg_at_k(lst, restricted, k))
    if not recalls:
        return 0.0, 0.0, 0
    return math.fsum(recalls) / len(recalls), math.fsum(ndcgs) / len(ndcgs), len(recalls)


@dataclass
class EvalReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    coverage: dict[int, float]
    bins: list[int]
    bin_k: int
    n_users: int
    n_skipped: int
    popular: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    per_user: list[dict] | None = None

    def to_dict(self) -> dict:
        out = {
            "recall": {f"@{k}": v for k, v in sorted(self.recall.items())},
            "ndcg": {f"@{k}": v for k, v in sorted(self.ndcg.items())},
            "coverage": {f"@{k}": v for k, v in sorted(self.coverage.items())},
            "bins": list(self.bins),
            "bin_k": self.bin_k,
            "n_users": self.n_users,
            "n_skipped": self.n_skipped,
            "popular": dict(self.popular),
            "config": self.config,
        }
        if self.per_user is not None:
            out["per_user"] = self.per_user
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, allow_nan=False) + "\n"

    def flat(self) -> dict[str, float]:
        row = {}
        for name, table in (("recall", self.recall), ("ndcg", self.ndcg),
                            ("coverage", self.coverage)):
            for k, v in sorted(table.items()):
                row[f"{name}@{k}"] = v
        for name, v in sorted(self.popular.items()):
            row[f"popular_{name}"] = v
        return row

    def write(self, out_dir: str | Path, name: str) -> dict[str, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"json": out_dir / f"{name}.json", "tsv": out_dir / f"{name}.tsv",
                 "bins": out_dir / f"{name}_bins.tsv"}
        paths["json"].write_text(self.to_json(), encoding="utf-8")
        flat = self.flat()
        paths["tsv"].write_text("metric\tvalue\n" + "".join(
            f"{k}\t{v!r}\n" for k, v in flat.items()), encoding="utf-8")
        paths["bins"].write_text("bin\tcount\n" + "".join(
            f"{b + 1}\t{c}\n" for b, c in enumerate(self.bins)), encoding="utf-8")
        return paths


def _rows(m: sp.csr_matrix, r: int) -> np.ndarray:
    return m.indices[m.indptr[r]:m.indptr[r + 1]]


def evaluate(model, split: EvalSplit, segment: str = "test",
             recall_ks: Sequence[int] = DEFAULT_RECALL_KS,
             ndcg_ks: Sequence[int] = DEFAULT_NDCG_KS,
             coverage_ks: Sequence[int] = DEFAULT_COVERAGE_KS,
             counts=None, n_bins: int = 10, bin_k: int | None = None,
             popular_frac: float | None = 0.2, batch_size: int = 4096,
             per_user: bool = False, config: dict | None = None) -> EvalReport:
    """Score a segment and compute every report metric.

    Only users with both a nonempty fold-in and a nonempty holdout are
    evaluated. ``counts`` defaults to the training-split item counts and
    drives the popularity bins and the popular-subset metrics.
    """
    if counts is None:
        counts = np.bincount(split.train.indices, minlength=split.n_items)
    counts = np.asarray(counts)
    bin_k = bin_k or max(coverage_ks)
    n_max = max(*recall_ks, *ndcg_ks, *coverage_ks, bin_k)

    users = split.users(segment)
    holdout = split.holdout[segment]
    has_holdout = np.flatnonzero(np.diff(holdout.indptr) > 0)
    n_skipped = len(users) - len(has_holdout)

    lists: list[np.ndarray] = []
    holds: list[np.ndarray] = []
    eval_users: list[int] = []
    for start in range(0, len(has_holdout), batch_size):
        sm = score_users(model, split, segment, has_holdout[start:start + batch_size])
        n_skipped += len(sm.skipped)
        ranked = top_n(sm, n_max)
        lists.extend(ranked.items)
        holds.extend(_rows(holdout, r) for r in sm.rows)
        eval_users.extend(int(u) for u in sm.users)

    def mean(vals):
        return math.fsum(vals) / len(vals) if vals else 0.0

    recall = {k: mean([recall_at_k(lst, h, k) for lst, h in zip(lists, holds)])
              for k in recall_ks}
    ndcg = {k: mean([ndcg_at_k(lst, h, k) for lst, h in zip(lists, holds)]) for k in ndcg_ks}
    coverage = {k: coverage_at_k(lists, split.n_items, k) for k in coverage_ks}
    bins = popularity_bins(lists, counts, n_bins, bin_k)

    popular = {}
    if popular_frac is not None:
        for k in recall_ks:
            popular[f"recall@{k}"] = popular_subset_metrics(lists, holds, counts,
                                                            popular_frac, k)[0]
        for k in ndcg_ks:
            popular[f"ndcg@{k}"] = popular_subset_metrics(lists, holds, counts,
                                                          popular_frac, k)[1]

    table = None
    if per_user:
        table = [{"user": u,
                  **{f"recall@{k}": recall_at_k(lst, h, k) for k in recall_ks},
                  **{f"ndcg@{k}": ndcg_at_k(lst, h, k) for k in ndcg_ks}}
                 for u, lst, h in zip(eval_users, lists, holds)]

    cfg = {"segment": segment, "split_seed": split.seed, "rng": split.rng_algorithm,
           "popular_frac": popular_frac, "n_bins": n_bins}
    cfg.update(config or {})
    return EvalReport(recall, ndcg, coverage, [int(c) for c in bins], bin_k,
                      len(lists), n_skipped, popular, cfg, table)
