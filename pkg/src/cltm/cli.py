"""Command-line entry point (``cltm <subcommand>``)."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .chain_crf import fit_chain_crf
from .covariates import build_covariates
from .distances import DistanceConfig, distance_matrix, distances_from_csv, distances_to_csv
from .em import EmConfig, fit_em, trace_to_csv
from .experiment import ExperimentConfig, StageError, run_experiment
from .model import Covariate, CovariateSchema, dumps_model, loads_model, structure_from_dict, structure_to_dict
from .prediction import MetricsReport, fit_edge_model, predict_edges, predict_one_step, score_edges, score_nodes, time_rng
from .preprocess import load_dataset, write_edge_covariates_csv, write_states_csv, write_ties_csv
from .structure import cl_grouping, extract_clusters, to_dot
from .synthetic import SyntheticSpec, generate_synthetic


def _pair(text: str) -> tuple[float, float]:
    lo, hi = (float(x) for x in text.split(","))
    return lo, hi


def _builders(text: str | None) -> list[str]:
    return [b for b in (text or "").split(",") if b]


def _dataset(args):
    ds = load_dataset(args.states, getattr(args, "ties", None), getattr(args, "edge_covariates", None))
    return build_covariates(ds, _builders(args.builders))


def _emit(text: str, path: str | None):
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_distances(args):
    ds = _dataset(args)
    cfg = DistanceConfig(mode=args.mode, conditional=args.conditional, smoothing=args.smoothing)
    D = distance_matrix(ds, cfg)
    _emit(distances_to_csv(D, ds.node_ids), args.out)


def cmd_structure(args):
    D, ids = distances_from_csv(Path(args.distances).read_text())
    tree = cl_grouping(D, args.eps_test, args.eps_min, ids, method=args.method)
    _emit(json.dumps(structure_to_dict(tree), indent=2, sort_keys=True), args.out)
    if args.dot:
        Path(args.dot).write_text(to_dot(tree))


def _em_config(args) -> EmConfig:
    return EmConfig(max_iterations=args.max_iterations, restarts=args.restarts, l2_strength=args.l2, seed=args.seed)


def cmd_fit(args):
    ds = _dataset(args)
    tree = structure_from_dict(json.loads(Path(args.structure).read_text()))
    schema = CovariateSchema(tuple(Covariate(n) for n in ds.node_covariate_names), ())
    model, trace = fit_em(tree, ds, schema, _em_config(args))
    _emit(dumps_model(model), args.out)
    if args.trace:
        Path(args.trace).write_text(trace_to_csv(trace))


def _times(args, ds):
    start = ds.burn_in if args.start is None else args.start
    stop = ds.T if args.stop is None else args.stop
    return range(start, stop)


def cmd_predict(args):
    ds = _dataset(args)
    if args.baseline:
        model = fit_chain_crf(ds, times=range(ds.burn_in, args.train_stop or ds.T))
    else:
        model = loads_model(Path(args.model).read_text())
    batches = [predict_one_step(model, ds, t, args.M, time_rng(args.seed, t)) for t in _times(args, ds)]
    rep = MetricsReport.from_scores(score_nodes(batches, ds, normalized=args.normalized))
    _emit(rep.to_json() if args.format == "json" else rep.to_csv(), args.out)


def cmd_edges(args):
    ds = _dataset(args)
    model = loads_model(Path(args.model).read_text()) if args.model else None
    train = range(ds.burn_in, args.train_stop or ds.T)
    em = fit_edge_model(ds, model, times=train, hard=args.hard)
    if args.edge_model_out:
        Path(args.edge_model_out).write_text(json.dumps(em.to_dict(), indent=2, sort_keys=True))
    preds = []
    for t in _times(args, ds):
        if model is not None:
            b = predict_one_step(model, ds, t, args.M, time_rng(args.seed, t))
            node_set, samples = b.predicted_node_set, b.samples
        else:  # without a node model, score ties among the truly active nodes
            node_set, samples = tuple(np.flatnonzero(ds.states[t]).tolist()), None
        preds.append(predict_edges(em, ds, t, node_set, args.M, np.random.default_rng([args.seed, t, 1]), model, samples))
    scores = score_edges(preds, ds)
    rows = ["t,EP,EA"] + [f"{s.t},{s.EP!r},{s.EA!r}" for s in scores]
    _emit("\n".join(rows) + "\n", args.out)


def cmd_clusters(args):
    tree = structure_from_dict(json.loads(Path(args.structure).read_text()))
    _emit(json.dumps(extract_clusters(tree, args.k), indent=2) + "\n", args.out)


def cmd_synth(args):
    spec = SyntheticSpec(
        n_observed=args.n_observed,
        n_hidden=args.n_hidden,
        T=args.T,
        seed=args.seed,
        length_range=_pair(args.length_range),
        lag_weight_range=_pair(args.lag_range),
        with_edges=args.with_edges,
    )
    data = generate_synthetic(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_states_csv(out / "states.csv", data.dataset)
    (out / "truth_model.json").write_text(dumps_model(data.model))
    (out / "truth_structure.dot").write_text(to_dot(data.model.structure))
    if data.edge_model is not None:
        write_ties_csv(out / "ties.csv", data.dataset)
        write_edge_covariates_csv(out / "edge_covariates.csv", data.dataset)
        (out / "truth_edge_model.json").write_text(json.dumps(data.edge_model.to_dict(), indent=2, sort_keys=True))
    (out / "spec.json").write_text(json.dumps(dataclasses.asdict(spec), indent=2, sort_keys=True))


def cmd_run(args):
    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
    else:
        if not (args.states and args.output_dir):
            raise SystemExit("run needs --config or both --states and --output-dir")
        cfg = ExperimentConfig(states_path=args.states, output_dir=args.output_dir)
    changes = {}
    for key in ("states", "ties", "edge_covariates", "output_dir", "split", "M"):
        val = getattr(args, key)
        if val is not None:
            changes[{"states": "states_path", "ties": "ties_path", "edge_covariates": "edge_covariates_path"}.get(key, key)] = val
    if args.builders is not None:
        changes["node_builders"] = tuple(_builders(args.builders))
    if args.edge_builders is not None:
        changes["edge_builders"] = tuple(_builders(args.edge_builders))
    changes["seed"] = args.seed
    cfg = dataclasses.replace(cfg, **changes)
    out = run_experiment(cfg)
    print(out / "manifest.json")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cltm", description="Conditional latent tree models for multivariate binary time series.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp, builders_default="lag:1"):
        sp.add_argument("--states", required=True, help="wide states CSV (t,<node>...)")
        sp.add_argument("--builders", default=builders_default, help="comma-separated covariate builders")

    sp = sub.add_parser("distances", help="pairwise information distances")
    data_args(sp)
    sp.add_argument("--mode", default="binary", choices=["binary", "gaussian"])
    sp.add_argument("--conditional", action="store_true", help="condition on binary node covariates")
    sp.add_argument("--smoothing", type=float, default=0.5)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_distances)

    sp = sub.add_parser("structure", help="latent tree from a distance CSV")
    sp.add_argument("--distances", required=True)
    sp.add_argument("--eps-test", type=float, default=0.1)
    sp.add_argument("--eps-min", type=float, default=0.05)
    sp.add_argument("--method", default="clgrouping", choices=["clgrouping", "rg"])
    sp.add_argument("--dot")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_structure)

    sp = sub.add_parser("fit", help="EM weights for a given structure")
    data_args(sp)
    sp.add_argument("--structure", required=True)
    sp.add_argument("--max-iterations", type=int, default=200)
    sp.add_argument("--restarts", type=int, default=3)
    sp.add_argument("--l2", type=float, default=1e-3)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--trace")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("predict", help="one-step-ahead node predictions and CP/CA")
    data_args(sp)
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--baseline", action="store_true", help="fit and use the chain CRF")
    sp.add_argument("--train-stop", type=int)
    sp.add_argument("--start", type=int)
    sp.add_argument("--stop", type=int)
    sp.add_argument("--M", type=int, default=100)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--normalized", action="store_true", help="divide by active/inactive counts instead of n*M")
    sp.add_argument("--format", default="json", choices=["json", "csv"])
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("edges", help="fit the tie model and score EP/EA")
    data_args(sp)
    sp.add_argument("--ties", required=True)
    sp.add_argument("--edge-covariates")
    sp.add_argument("--model", help="fitted CLTM JSON (adds hidden-parent features)")
    sp.add_argument("--hard", action="store_true", help="MAP hidden states instead of posteriors")
    sp.add_argument("--train-stop", type=int)
    sp.add_argument("--start", type=int)
    sp.add_argument("--stop", type=int)
    sp.add_argument("--M", type=int, default=100)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--edge-model-out")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_edges)

    sp = sub.add_parser("clusters", help="partition observed nodes by cutting long tree edges")
    sp.add_argument("--structure", required=True)
    sp.add_argument("--k", type=int, required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_clusters)

    sp = sub.add_parser("synth", help="sample a synthetic dataset from a random CLTM")
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--n-observed", type=int, default=6)
    sp.add_argument("--n-hidden", type=int, default=2)
    sp.add_argument("--T", type=int, default=1000)
    sp.add_argument("--length-range", default="0.3,0.8")
    sp.add_argument("--lag-range", default="0,0")
    sp.add_argument("--with-edges", action="store_true")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("run", help="full pipeline; writes a manifest on success")
    sp.add_argument("--config", help="ExperimentConfig JSON or a previous manifest.json")
    sp.add_argument("--states")
    sp.add_argument("--ties")
    sp.add_argument("--edge-covariates")
    sp.add_argument("--output-dir")
    sp.add_argument("--split", type=int)
    sp.add_argument("--M", type=int)
    sp.add_argument("--builders")
    sp.add_argument("--edge-builders")
    sp.add_argument("--seed", type=int, required=True)
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
