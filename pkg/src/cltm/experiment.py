"""Full pipeline: distances -> latent tree -> EM, chain-CRF baseline,
one-step-ahead scoring on the train and test ranges, optional edge stage.

Every output is a pure function of the config (no clocks, no unseeded
randomness), so a rerun from the written manifest reproduces the files
byte for byte.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .chain_crf import ChainCrfConfig, fit_chain_crf
from .covariates import build_covariates
from .distances import DistanceConfig, distance_matrix, distances_to_csv
from .em import EmConfig, fit_em, trace_to_csv
from .model import Covariate, CovariateSchema, TimeSeriesDataset, dumps_model, structure_to_dict
from .prediction import (
    MetricsReport,
    NODE_THRESHOLD,
    fit_edge_model,
    predict_edges,
    predict_one_step,
    score_edges,
    score_nodes,
    time_rng,
)
from .preprocess import load_dataset
from .structure import StructureConfig, cl_grouping, to_dot

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class ExperimentConfig:
    states_path: str
    output_dir: str
    split: int | None = None  # first test time index; None or T means no test range
    ties_path: str | None = None
    edge_covariates_path: str | None = None
    node_builders: tuple = ("lag:1",)
    edge_builders: tuple = ()
    model_covariates: tuple | None = None  # node covariates the CLTM uses; None = all
    edge_model_covariates: tuple | None = None
    distance: DistanceConfig = DistanceConfig()
    structure: StructureConfig = StructureConfig()
    em: EmConfig = EmConfig()
    chain: ChainCrfConfig = ChainCrfConfig()
    M: int = 100
    seed: int = 0
    node_threshold: float = NODE_THRESHOLD
    edge_l2_strength: float = 1e-3
    edge_hard: bool = False

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["distance"]["mode"] = self.distance.mode.value
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        for k in ("distance", "structure", "em", "chain"):
            d[k] = {a: (list(b) if isinstance(b, tuple) else b) for a, b in d[k].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path | None = None) -> "ExperimentConfig":
        d = dict(d)
        if "config" in d and "config_hash" in d:  # a manifest
            d = dict(d["config"])
        nested = {"distance": DistanceConfig, "structure": StructureConfig, "em": EmConfig, "chain": ChainCrfConfig}
        for key, typ in nested.items():
            if key in d and isinstance(d[key], dict):
                sub = dict(d[key])
                if key == "distance" and sub.get("covariates") is not None:
                    sub["covariates"] = tuple(sub["covariates"])
                d[key] = typ(**sub)
        for key in ("node_builders", "edge_builders", "model_covariates", "edge_model_covariates"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        if base_dir is not None:
            for key in ("states_path", "ties_path", "edge_covariates_path", "output_dir"):
                if d.get(key) is not None and not Path(d[key]).is_absolute():
                    d[key] = str(Path(base_dir) / d[key])
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        path = Path(path).resolve()
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def config_hash(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()


def _write(path: Path, text: str):
    path.write_text(text)


def _stage(name, fn, *args, **kwargs):
    log.info("stage %s", name)
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def prepare_dataset(config: ExperimentConfig) -> TimeSeriesDataset:
    for key in ("states_path", "ties_path", "edge_covariates_path"):
        p = getattr(config, key)
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"{key}: {p} does not exist")
    ds = load_dataset(config.states_path, config.ties_path, config.edge_covariates_path)
    return build_covariates(ds, list(config.node_builders) + list(config.edge_builders))


def _score_range(node_model, edge_model, edge_node_model, dataset, times, config) -> MetricsReport:
    batches = [predict_one_step(node_model, dataset, int(t), config.M, time_rng(config.seed, t), config.node_threshold) for t in times]
    node_scores = score_nodes(batches, dataset)
    edge_scores = None
    if edge_model is not None:
        preds = []
        for b in batches:
            rng = np.random.default_rng([config.seed, b.t, 1])
            samples = b.samples if edge_node_model is not None else None
            preds.append(predict_edges(edge_model, dataset, b.t, b.predicted_node_set, config.M, rng, edge_node_model, samples))
        edge_scores = score_edges(preds, dataset)
    return MetricsReport.from_scores(node_scores, edge_scores)


def _metrics_csv(reports: dict) -> str:
    lines = ["range,model,t,CP,CA,EP,EA"]
    for rng_name, pair in reports.items():
        if pair is None:
            continue
        for model_name, rep in pair.items():
            body = rep.to_csv().splitlines()[1:]
            lines += [f"{rng_name},{model_name},{row}" for row in body]
    return "\n".join(lines) + "\n"


def run_experiment(config: ExperimentConfig) -> Path:
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    failure = out / "failed_stage.json"
    manifest_path = out / "manifest.json"
    for stale in (failure, manifest_path):
        if stale.exists():
            stale.unlink()
    try:
        return _run(config, out)
    except StageError as exc:
        _write(failure, json.dumps({"stage": exc.stage, "error": str(exc.cause)}, indent=2, sort_keys=True))
        raise


def _run(config: ExperimentConfig, out: Path) -> Path:
    ds = _stage("load", prepare_dataset, config)
    split = ds.T if config.split is None else int(config.split)
    if not ds.burn_in < split <= ds.T:
        raise StageError("load", ValueError(f"split {split} outside (burn-in {ds.burn_in}, T {ds.T}]"))
    train = np.arange(ds.burn_in, split)
    test = np.arange(split, ds.T)

    D = _stage("distances", distance_matrix, ds, config.distance, train)
    _write(out / "distances.csv", distances_to_csv(D, ds.node_ids))

    sc = config.structure
    tree = _stage("structure", cl_grouping, D, sc.eps_test, sc.eps_min, ds.node_ids, sc.check_fit, sc.method)
    _write(out / "tree.dot", to_dot(tree))
    _write(out / "structure.json", json.dumps(structure_to_dict(tree), indent=2, sort_keys=True))

    names = config.model_covariates if config.model_covariates is not None else ds.node_covariate_names
    schema = CovariateSchema(tuple(Covariate(n) for n in names), ())
    model, trace = _stage("fit", fit_em, tree, ds, schema, config.em, train)
    _write(out / "model.json", dumps_model(model))
    _write(out / "trace.csv", trace_to_csv(trace))

    baseline = _stage("baseline", fit_chain_crf, ds, config.chain, train, tuple(names))
    _write(out / "baseline.json", json.dumps(baseline.to_dict(), indent=2, sort_keys=True))

    edge_models = {"cltm": None, "chain_crf": None}
    if ds.edge_observations is not None:
        ecov = config.edge_model_covariates
        edge_models["cltm"] = _stage("edges", fit_edge_model, ds, model, ecov, train, config.edge_l2_strength, config.edge_hard)
        edge_models["chain_crf"] = _stage("edges", fit_edge_model, ds, None, ecov, train, config.edge_l2_strength, config.edge_hard)
        _write(out / "edge_models.json", json.dumps({k: v.to_dict() for k, v in edge_models.items()}, indent=2, sort_keys=True))

    def score(times):
        cl = _score_range(model, edge_models["cltm"], model, ds, times, config)
        base = _score_range(baseline, edge_models["chain_crf"], None, ds, times, config)
        cl.summary = cl.compare(base)
        return {"cltm": cl, "chain_crf": base}

    reports = {"train": _stage("predict", score, train), "test": _stage("predict", score, test) if test.size else None}
    metrics = {
        rng_name: None if pair is None else {k: v.to_dict() for k, v in pair.items()}
        for rng_name, pair in reports.items()
    }
    _write(out / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True))
    _write(out / "metrics.csv", _metrics_csv(reports))

    manifest = {
        "config": config.to_dict(),
        "config_hash": config.config_hash(),
        "seeds": {"em": config.em.seed, "prediction": config.seed},
        "stages": ["load", "distances", "structure", "fit", "baseline"] + (["edges"] if ds.edge_observations is not None else []) + ["predict"],
        "outputs": sorted(p.name for p in out.iterdir() if p.name != "manifest.json"),
        "train_range": [int(ds.burn_in), int(split)],
        "test_range": [int(split), int(ds.T)] if test.size else None,
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    return out
