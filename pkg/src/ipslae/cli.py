"""Command-line front end.

Every subcommand reads a JSON run config (``--config``, optional) with
``--set section.key=value`` overrides and writes into ``output_dir``::

    synth       synthetic/interactions.tsv, synthetic/truth.ipsl, synthetic/config.json
    ingest      matrix.ipsl, matrix_stats.json
    split       split.ipsl, split_stats.json
    fit         models/ease_lam<lambda>.ipsl (and _rank<r> when model.reduced_rank is set)
    weight      models/<model>__<weighting>.ipsl, weights/<model>__<weighting>.tsv
    gridsearch  gridsearch.json, gridsearch.tsv, models/reference.ipsl, models/selected.ipsl
    evaluate    reports/<model>.json, .tsv, _bins.tsv, curves/<model>_weights.tsv
    curve       curves/weights_<weighting>.tsv, curves/marginal_utility.tsv

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ipslae import __version__
from ipslae.dataset import (EvalSplit, InteractionMatrix, load_interactions, preprocess,
                            split_strong_generalization)
from ipslae.errors import ConfigError, DataError, IpslaeError
from ipslae.evaluation import evaluate
from ipslae.experiment import (RunConfig, apply_overrides, cell_label, grid_search, synthesize,
                               weight_cells, write_grid_table)
from ipslae.propensity import (item_counts, make_propensity, marginal_utility_log,
                               marginal_utility_powerlaw, weight_curve, write_weight_curve)
from ipslae.solver import SimilarityModel, apply_item_weights, fit_ease, fit_rank_reduced, gram

log = logging.getLogger("ipslae")


def _dump_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n",
                    encoding="utf-8")
    return path


def _load_config(args) -> RunConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {args.config} must hold a JSON object")
    overrides = list(args.set or [])
    if args.output_dir:
        overrides.append(f"output_dir={json.dumps(args.output_dir)}")
    return RunConfig.from_dict(apply_overrides(raw, overrides))


def _snapshot(cfg: RunConfig, command: str, **extra) -> dict:
    out = {"command": command, "config": cfg.to_dict(), "version": __version__}
    out.update(extra)
    return out


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise DataError(f"{path} not found; run `ipslae {hint}` first")
    return path


def _model_name(lam: float, rank: int | None = None) -> str:
    name = f"ease_lam{lam:g}"
    return f"{name}_rank{rank}" if rank is not None else name


def _item_ids(out: Path, n_items: int) -> list[str]:
    """External item ids from the ingested matrix, else positional ids."""
    path = out / "matrix.ipsl"
    if path.exists():
        ids = list(InteractionMatrix.load(path).item_ids)
        if len(ids) == n_items:
            return ids
    return [f"i{i}" for i in range(n_items)]


def cmd_synth(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir) / "synthetic"
    truth = synthesize(cfg.synth)
    recs = truth.observed.to_records()
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "interactions.tsv", "w", encoding="utf-8") as fh:
        fh.write("user_id\titem_id\tvalue\n")
        for r in recs:
            fh.write(f"{r.user_id}\t{r.item_id}\t1\n")
    truth.save(out / "truth.ipsl", _snapshot(cfg, "synth"))
    # a ready-to-use config pointing ingest at the generated log
    follow = cfg.to_dict()
    follow["data"].update({"path": str(out / "interactions.tsv"), "delimiter": "\t",
                           "rating_threshold": 1.0})
    _dump_json(out / "config.json", follow)
    print(f"synthetic: {truth.observed.n_users} users, {truth.observed.n_items} items, "
          f"{truth.observed.nnz} observed of {int(truth.full_matrix.sum())} preferred")
    return 0


def cmd_ingest(cfg: RunConfig, args) -> int:
    if not cfg.data.path:
        raise ConfigError("data.path is not set")
    d = cfg.data
    X = preprocess(load_interactions(d.path, d.delimiter), d.rating_threshold,
                   d.min_user_degree, d.min_item_degree)
    out = Path(cfg.output_dir)
    X.save(out / "matrix.ipsl", _snapshot(cfg, "ingest"))
    stats = X.stats()
    _dump_json(out / "matrix_stats.json", {**stats, "run": _snapshot(cfg, "ingest")})
    print(f"matrix: {stats['users']} users, {stats['items']} items, "
          f"{stats['interactions']} interactions, density {stats['density']:.6g}")
    return 0


def cmd_split(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    X = InteractionMatrix.load(_need(out / "matrix.ipsl", "ingest"))
    s = cfg.split
    split = split_strong_generalization(X, s.valid_frac, s.test_frac, s.holdout_frac, s.seed)
    split.save(out / "split.ipsl", _snapshot(cfg, "split"))
    stats = {"n_items": split.n_items, "train_users": len(split.train_users),
             "valid_users": len(split.valid_users), "test_users": len(split.test_users),
             "train_interactions": int(split.train.nnz), "seed": split.seed,
             "rng": split.rng_algorithm}
    _dump_json(out / "split_stats.json", {**stats, "run": _snapshot(cfg, "split")})
    print(f"split: {stats['train_users']} train / {stats['valid_users']} valid / "
          f"{stats['test_users']} test users")
    return 0


def _training_data(out: Path):
    """Training split if present, else the whole ingested matrix."""
    if (out / "split.ipsl").exists():
        return EvalSplit.load(out / "split.ipsl").train
    return InteractionMatrix.load(_need(out / "matrix.ipsl", "ingest")).matrix


def cmd_fit(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    X = _training_data(out)
    g = gram(X, cfg.model.memory_budget)
    rank = cfg.model.reduced_rank
    for lam in cfg.model.lambdas:
        path = out / "models" / f"{_model_name(lam)}.ipsl"
        fit_ease(g, lam, cfg.model.memory_budget).save(path, _snapshot(cfg, "fit"))
        print(f"wrote {path}")
        if rank is not None:
            path = out / "models" / f"{_model_name(lam, rank)}.ipsl"
            fit_rank_reduced(X, rank, lam, cfg.model.memory_budget).save(
                path, _snapshot(cfg, "fit"))
            print(f"wrote {path}")
    return 0


def _cell_from_args(args) -> dict:
    cell = {"family": args.family}
    for name in ("gamma", "C", "beta", "alpha"):
        value = getattr(args, name)
        if value is not None:
            cell[name] = float(value)
    return cell


def cmd_weight(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    model_path = Path(args.model)
    model = SimilarityModel.load(_need(model_path, "fit"))
    counts = np.bincount(_training_data(out).indices, minlength=model.n_items)
    if len(counts) != model.n_items:
        raise DataError(f"model has {model.n_items} items, training data has {len(counts)}")
    cell = _cell_from_args(args)
    params = {k: v for k, v in cell.items() if k != "family"}
    pv = make_propensity(counts, cell["family"], **params)
    weighted = apply_item_weights(model, pv)
    name = f"{model_path.stem}__{cell_label(cell)}"
    path = weighted.save(out / "models" / f"{name}.ipsl",
                         _snapshot(cfg, "weight", source_model=str(model_path)))
    pv.to_tsv(out / "weights" / f"{name}.tsv", _item_ids(out, model.n_items))
    print(f"wrote {path}")
    return 0


def cmd_gridsearch(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    split = EvalSplit.load(_need(out / "split.ipsl", "split"))
    cells = weight_cells(cfg.weighting)
    sel = cfg.selection
    result = grid_search(split, cfg.model.lambdas, cells, sel.epsilon, sel.k, cfg.metrics)
    _dump_json(out / "gridsearch.json", {**result.to_dict(), "run": _snapshot(cfg, "gridsearch")})
    write_grid_table(out / "gridsearch.tsv", result)

    # materialize the reference baseline and the selected configuration
    g = gram(split.train, cfg.model.memory_budget)
    ref_lam = result.trace["reference_lambda"]
    snap = _snapshot(cfg, "gridsearch", trace=result.trace)
    fit_ease(g, ref_lam).save(out / "models" / "reference.ipsl", snap)
    chosen = result.chosen
    model = fit_ease(g, chosen["lambda"])
    if chosen["family"] != "none":
        params = {k: v for k, v in chosen.items() if k not in ("family", "lambda", "metrics")}
        model = apply_item_weights(model, make_propensity(item_counts(g), chosen["family"],
                                                          **params))
    model.save(out / "models" / "selected.ipsl", snap)

    k = sel.k
    base = next(b for b in result.baselines if b["lambda"] == ref_lam)
    print(f"reference lambda={ref_lam:g}: ndcg@{k}={base['metrics'][f'ndcg@{k}']:.4f} "
          f"coverage@{k}={base['metrics'][f'coverage@{k}']:.4f}")
    label = cell_label({k_: v for k_, v in chosen.items() if k_ not in ("lambda", "metrics")})
    print(f"selected lambda={chosen['lambda']:g} {label}: "
          f"ndcg@{k}={chosen['metrics'][f'ndcg@{k}']:.4f} "
          f"coverage@{k}={chosen['metrics'][f'coverage@{k}']:.4f}"
          + (" (fallback)" if result.trace["fallback"] else ""))
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    split = EvalSplit.load(_need(out / "split.ipsl", "split"))
    counts = np.bincount(split.train.indices, minlength=split.n_items)
    m = cfg.metrics
    for model_path in map(Path, args.model):
        model = SimilarityModel.load(_need(model_path, "fit"))
        report = evaluate(model, split, args.segment, m.recall_ks, m.ndcg_ks, m.coverage_ks,
                          counts=counts, n_bins=m.n_bins, popular_frac=m.popular_frac,
                          per_user=args.per_user,
                          config={"model": str(model_path), "model_provenance": model.provenance,
                                  "run": _snapshot(cfg, "evaluate")})
        report.write(out / "reports", model_path.stem)
        if model.weights is not None:
            w = model.weights
            uniq, first = np.unique(counts, return_index=True)
            write_weight_curve(out / "curves" / f"{model_path.stem}_weights.tsv",
                               [(int(c), float(w.w[j])) for c, j in zip(uniq, first)])
        summary = " ".join(f"{k}={v:.4f}" for k, v in report.flat().items())
        print(f"{model_path.stem} [{args.segment}, {report.n_users} users]: {summary}")
    return 0


def cmd_curve(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    if args.max_count is not None:
        counts = np.arange(args.max_count + 1)
    else:
        counts = np.bincount(_training_data(out).indices)
    if counts.max() < 1:
        raise DataError("weight curves need at least one positive count")
    wc = cfg.weighting
    cells = weight_cells(wc)
    # the unclipped power law is the reference shape for every clipped or log-sigmoid curve
    cells += [{"family": "power-law", "gamma": float(g)} for g in wc.gammas
              if "power-law" not in wc.families]
    for cell in cells:
        params = {k: v for k, v in cell.items() if k != "family"}
        path = write_weight_curve(out / "curves" / f"weights_{cell_label(cell)}.tsv",
                                  weight_curve(counts, cell["family"], **params))
        print(f"wrote {path}")
    ns = np.unique(np.maximum(counts, 1))
    path = out / "curves" / "marginal_utility.tsv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("count\tlog\t" + "\t".join(f"power_gamma{g:g}" for g in wc.gammas) + "\n")
        for n in ns:
            vals = [marginal_utility_log(int(n))]
            vals += [marginal_utility_powerlaw(int(n), g) for g in wc.gammas]
            fh.write(f"{int(n)}\t" + "\t".join(repr(float(v)) for v in vals) + "\n")
    print(f"wrote {path}")
    return 0


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic MNAR interaction log"),
    "ingest": (cmd_ingest, "load, binarize and filter the interaction log"),
    "split": (cmd_split, "strong-generalization user split"),
    "fit": (cmd_fit, "fit EASE for every configured lambda"),
    "weight": (cmd_weight, "apply inverse-propensity item weights to a model"),
    "gridsearch": (cmd_gridsearch, "select lambda and weighting on the validation users"),
    "evaluate": (cmd_evaluate, "score held-out users and write metric reports"),
    "curve": (cmd_curve, "write weight-versus-count tables for plotting"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ipslae", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override a config key; VALUE is parsed as JSON when possible")
    common.add_argument("--output-dir", help="shorthand for --set output_dir=...")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {name: sub.add_parser(name, parents=[common], help=help_)
            for name, (_, help_) in COMMANDS.items()}

    w = subs["weight"]
    w.add_argument("--model", required=True, help="model container to weight")
    w.add_argument("--family", required=True,
                   choices=["power-law", "power-law-clipped", "log-sigmoid"])
    w.add_argument("--gamma", type=float)
    w.add_argument("--clip", dest="C", type=float, help="lower bound C on the propensity")
    w.add_argument("--beta", type=float)
    w.add_argument("--alpha", type=float, help="log-sigmoid intercept (default: midpoint rule)")

    e = subs["evaluate"]
    e.add_argument("--model", action="append", required=True,
                   help="model container; repeat to evaluate several")
    e.add_argument("--segment", choices=["test", "valid"], default="test")
    e.add_argument("--per-user", action="store_true", help="include per-user metrics")

    c = subs["curve"]
    c.add_argument("--max-count", type=int,
                   help="use counts 0..MAX instead of the training counts")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command][0](cfg, args)
    except IpslaeError as exc:
        print(f"ipslae {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ipslae {args.command}: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
