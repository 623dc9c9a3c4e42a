"""Run configuration, weighting grids and the coverage-vs-NDCG grid search."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ipslae.dataset import (EvalSplit, InteractionMatrix, SyntheticGroundTruth, generate_mnar,
                            long_tail_exposure, make_rng, preprocess,
                            split_strong_generalization)
from ipslae.errors import ConfigError
from ipslae.evaluation import evaluate
from ipslae.propensity import FAMILIES, item_counts, make_propensity
from ipslae.solver import DEFAULT_MEMORY_BUDGET, apply_item_weights, fit_ease, gram

log = logging.getLogger(__name__)

DEFAULT_BETAS = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass
class DataConfig:
    path: str | None = None
    delimiter: str | None = None
    rating_threshold: float = 4.0
    min_user_degree: int = 5
    min_item_degree: int = 1


@dataclass
class SplitConfig:
    valid_frac: float = 0.1
    test_frac: float = 0.1
    holdout_frac: float = 0.2
    seed: int = 0


@dataclass
class ModelConfig:
    lambdas: list[float] = field(default_factory=lambda: [500.0])
    # when set, ``fit`` also writes the EASE model of the rank-truncated Gram
    reduced_rank: int | None = None
    memory_budget: int = DEFAULT_MEMORY_BUDGET


@dataclass
class WeightingConfig:
    families: list[str] = field(default_factory=lambda: ["log-sigmoid"])
    betas: list[float] = field(default_factory=lambda: list(DEFAULT_BETAS))
    gammas: list[float] = field(default_factory=lambda: [0.5])
    clips: list[float] = field(default_factory=lambda: [0.01, 0.03, 0.05, 0.1])


@dataclass
class MetricConfig:
    recall_ks: list[int] = field(default_factory=lambda: [20, 50])
    ndcg_ks: list[int] = field(default_factory=lambda: [100])
    coverage_ks: list[int] = field(default_factory=lambda: [100])
    n_bins: int = 10
    popular_frac: float = 0.2


@dataclass
class SelectionConfig:
    epsilon: float = 0.005
    k: int = 100


@dataclass
class SynthConfig:
    n_users: int = 10000
    n_items: int = 2000
    preference_density: float = 0.3
    exposure_exponent: float = 1.5
    exposure_floor: float = 0.0005
    exposure_head_frac: float = 0.01
    taste_concentration: float = 3.0
    taste_dim: int = 2
    appeal_sigma: float = 1.0
    seed: int = 0


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    weighting: WeightingConfig = field(default_factory=WeightingConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    output_dir: str = "run"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        w = self.weighting
        if not self.model.lambdas or any(not lam > 0 for lam in self.model.lambdas):
            raise ConfigError("model.lambdas must be a nonempty list of positive values")
        if self.model.reduced_rank is not None and self.model.reduced_rank < 1:
            raise ConfigError("model.reduced_rank must be >= 1")
        if self.model.memory_budget < 1:
            raise ConfigError("model.memory_budget must be positive")
        unknown = set(w.families) - set(FAMILIES)
        if unknown:
            raise ConfigError(f"unknown weighting families {sorted(unknown)}")
        for name in ("betas", "gammas", "clips"):
            if any(not v > 0 for v in getattr(w, name)):
                raise ConfigError(f"weighting.{name} must be positive")
        if "log-sigmoid" in w.families and not w.betas:
            raise ConfigError("weighting.betas is empty")
        if {"power-law", "power-law-clipped"} & set(w.families) and not w.gammas:
            raise ConfigError("weighting.gammas is empty")
        if "power-law-clipped" in w.families and not w.clips:
            raise ConfigError("weighting.clips is empty")
        if any(not 0 < c < 1 for c in w.clips):
            raise ConfigError("weighting.clips must lie in (0, 1)")
        if self.selection.epsilon < 0:
            raise ConfigError("selection.epsilon must be >= 0")
        m = self.metrics
        if not (m.recall_ks and m.ndcg_ks and m.coverage_ks):
            raise ConfigError("metric K lists must be nonempty")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        sections = {f.name: f for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, value in raw.items():
            if key not in sections:
                raise ConfigError(f"unknown config section {key!r}")
            if key == "output_dir":
                kwargs[key] = str(value)
                continue
            section_cls = sections[key].default_factory
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            allowed = {f.name for f in dataclasses.fields(section_cls)}
            extra = set(value) - allowed
            if extra:
                raise ConfigError(f"unknown keys in section {key!r}: {sorted(extra)}")
            kwargs[key] = section_cls(**value)
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path, overrides: Sequence[str] = ()) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(apply_overrides(raw, overrides))


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Apply ``section.key=value`` overrides; values parse as JSON, else as strings."""
    raw = json.loads(json.dumps(raw))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        dotted, text = item.split("=", 1)
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        parts = dotted.split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted!r} does not address a config key")
        node[parts[-1]] = value
    return raw


def weight_cells(cfg: WeightingConfig) -> list[dict]:
    """Expand the weighting grid into ``{"family": ..., <params>}`` cells."""
    cells = []
    for fam in cfg.families:
        if fam == "log-sigmoid":
            cells += [{"family": fam, "beta": float(b)} for b in cfg.betas]
        elif fam == "power-law":
            cells += [{"family": fam, "gamma": float(g)} for g in cfg.gammas]
        elif fam == "power-law-clipped":
            cells += [{"family": fam, "gamma": float(g), "C": float(c)}
                      for g in cfg.gammas for c in cfg.clips]
    return cells


def cell_label(cell: dict) -> str:
    params = "_".join(f"{k}{v:g}" for k, v in cell.items() if k != "family")
    return f"{cell['family']}_{params}" if params else cell["family"]


@dataclass
class GridResult:
    baselines: list[dict]
    cells: list[dict]
    chosen: dict
    trace: dict

    def to_dict(self) -> dict:
        return {"baselines": self.baselines, "cells": self.cells,
                "chosen": self.chosen, "trace": self.trace}


def select_configuration(baselines: list[dict], cells: list[dict], epsilon: float,
                         k: int = 100) -> tuple[dict, dict]:
    """Pick the cell with the highest Coverage@k whose NDCG@k is within tolerance.

    The reference is the best unweighted NDCG@k over all lambdas; a cell is
    admissible when its NDCG@k is at least ``(1 - epsilon)`` times that.
    Coverage ties go to the higher NDCG, then to grid order. With no
    admissible cell the best unweighted baseline is returned and the trace
    says so.
    """
    if not baselines:
        raise ConfigError("grid search needs at least one unweighted baseline")
    ndcg_key, cov_key = f"ndcg@{k}", f"coverage@{k}"
    best_base = max(baselines, key=lambda c: (c["metrics"][ndcg_key], -baselines.index(c)))
    reference = best_base["metrics"][ndcg_key]
    threshold = (1.0 - epsilon) * reference
    admissible = [c for c in cells if c["metrics"][ndcg_key] >= threshold]
    trace = {"rule": f"max {cov_key} s.t. {ndcg_key} >= (1 - epsilon) * best unweighted",
             "epsilon": epsilon, "reference_ndcg": reference,
             "reference_lambda": best_base["lambda"], "threshold": threshold,
             "n_cells": len(cells), "n_admissible": len(admissible)}
    if not admissible:
        trace["fallback"] = True
        trace["reason"] = "no weighted cell met the NDCG constraint"
        return best_base, trace
    order = {id(c): n for n, c in enumerate(cells)}
    chosen = max(admissible, key=lambda c: (c["metrics"][cov_key], c["metrics"][ndcg_key],
                                            -order[id(c)]))
    trace["fallback"] = False
    trace["chosen_coverage"] = chosen["metrics"][cov_key]
    trace["baseline_coverage"] = best_base["metrics"][cov_key]
    return chosen, trace


def grid_search(split: EvalSplit, lambdas: Sequence[float], cells: Sequence[dict],
                epsilon: float = 0.005, k: int = 100, metrics: MetricConfig | None = None,
                segment: str = "valid") -> GridResult:
    """Evaluate every ``(lambda, weighting)`` cell on one segment and select.

    Weights come from training-split counts only.
    """
    if not cells:
        raise ConfigError("empty weighting grid")
    metrics = metrics or MetricConfig()
    g = gram(split.train)
    counts = item_counts(g)

    def run(model):
        rep = evaluate(model, split, segment, metrics.recall_ks,
                       sorted(set(metrics.ndcg_ks) | {k}),
                       sorted(set(metrics.coverage_ks) | {k}), counts=counts,
                       n_bins=metrics.n_bins, popular_frac=None)
        return rep.flat()

    baselines, results = [], []
    for lam in lambdas:
        base = fit_ease(g, lam)
        row = run(base)
        baselines.append({"lambda": float(lam), "family": "none", "metrics": row})
        log.info("lambda=%g unweighted ndcg@%d=%.4f coverage@%d=%.4f",
                 lam, k, row[f"ndcg@{k}"], k, row[f"coverage@{k}"])
        for cell in cells:
            params = {p: v for p, v in cell.items() if p != "family"}
            pv = make_propensity(counts, cell["family"], **params)
            row = run(apply_item_weights(base, pv))
            results.append({"lambda": float(lam), **cell, "metrics": row})
    chosen, trace = select_configuration(baselines, results, epsilon, k)
    return GridResult(baselines, results, chosen, trace)


def write_grid_table(path: str | Path, result: GridResult) -> Path:
    rows = result.baselines + result.cells
    metric_names = list(rows[0]["metrics"])
    params = sorted({p for r in rows for p in r if p not in ("lambda", "family", "metrics")})
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(["lambda", "family", *params, *metric_names, "chosen"]) + "\n")
        for r in rows:
            vals = [repr(r["lambda"]), r["family"], *(repr(r[p]) if p in r else "" for p in params),
                    *(repr(r["metrics"][m]) for m in metric_names),
                    "1" if r is result.chosen else "0"]
            fh.write("\t".join(vals) + "\n")
    return path


def synthesize(cfg: SynthConfig) -> SyntheticGroundTruth:
    """Ground truth with long-tail exposure and lognormal item appeal."""
    exposure_rng, appeal_rng = make_rng(cfg.seed).spawn(2)
    exposure = long_tail_exposure(cfg.n_items, cfg.exposure_exponent, cfg.exposure_floor,
                                  seed=int(exposure_rng.integers(2**31)),
                                  head_frac=cfg.exposure_head_frac)
    appeal = np.exp(cfg.appeal_sigma * appeal_rng.standard_normal(cfg.n_items))
    return generate_mnar(cfg.n_users, cfg.n_items, cfg.preference_density, exposure,
                         seed=cfg.seed, taste_concentration=cfg.taste_concentration,
                         item_appeal=appeal, taste_dim=cfg.taste_dim)


def build_synthetic_corpus(cfg: SynthConfig, data: DataConfig | None = None,
                           split: SplitConfig | None = None
                           ) -> tuple[InteractionMatrix, EvalSplit]:
    """Long-tail-exposure MNAR corpus, binarized and split like a real dataset."""
    data = data or DataConfig(rating_threshold=1.0)
    split = split or SplitConfig()
    truth = synthesize(cfg)
    X = preprocess(truth.observed.to_records(), data.rating_threshold,
                   data.min_user_degree, data.min_item_degree)
    return X, split_strong_generalization(X, split.valid_frac, split.test_frac,
                                          split.holdout_frac, split.seed)


def relative_change(new: float, old: float) -> float:
    return (new - old) / old if old else math.inf
