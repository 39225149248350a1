"""Event-log ingestion and the transforms that turn counts into binary states.

File formats:
  events (long): ``timestamp,node,outcome[,tag]`` with a header row
  states (wide): header ``t,<node>,<node>,...``; the first column holds a
      time label (index or ISO date) and the rest 0/1 values
  ties: ``t,node_u,node_v`` rows listing ties present at time index t
"""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import TimeSeriesDataset, VariableMode


class RecordError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass(frozen=True)
class EventRecord:
    timestamp: dt.datetime
    node: str
    outcome: int
    tag: str | None = None


@dataclass(frozen=True)
class RawEventLog:
    records: tuple

    def __post_init__(self):
        for r in self.records:
            if not r.node:
                raise ValueError("empty node id")
            if r.outcome not in (0, 1):
                raise ValueError(f"outcome must be 0/1, got {r.outcome!r}")


def _parse_timestamp(text: str) -> dt.datetime:
    text = text.strip()
    try:
        return dt.datetime.fromisoformat(text)
    except ValueError:
        return dt.datetime.combine(dt.date.fromisoformat(text), dt.time())


def read_event_log(path) -> RawEventLog:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise RecordError(1, "empty file")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) not in (3, 4):
                raise RecordError(lineno, f"expected 3 or 4 fields, got {len(row)}")
            try:
                ts = _parse_timestamp(row[0])
            except ValueError:
                raise RecordError(lineno, f"unparseable timestamp {row[0]!r}") from None
            node = row[1].strip()
            if not node:
                raise RecordError(lineno, "empty node id")
            if row[2].strip() not in ("0", "1"):
                raise RecordError(lineno, f"outcome must be 0 or 1, got {row[2]!r}")
            tag = row[3].strip() if len(row) == 4 and row[3].strip() else None
            records.append(EventRecord(ts, node, int(row[2]), tag))
    return RawEventLog(tuple(records))


@dataclass(frozen=True)
class BinnedCounts:
    bin_starts: tuple  # datetime of each bin's start
    node_ids: tuple
    successes: np.ndarray  # (B, n)
    totals: np.ndarray  # (B, n)


def aggregate_daily(log: RawEventLog, bin: dt.timedelta = dt.timedelta(days=1)) -> BinnedCounts:
    """(successes, totals) per contiguous bin and node, starting at midnight
    of the first event's day; empty bins are kept as zero rows."""
    if not log.records:
        raise ValueError("empty event log")
    if bin <= dt.timedelta(0):
        raise ValueError("bin width must be positive")
    origin = dt.datetime.combine(min(r.timestamp for r in log.records).date(), dt.time())
    last = max(r.timestamp for r in log.records)
    n_bins = int((last - origin) // bin) + 1
    nodes = tuple(sorted({r.node for r in log.records}))
    col = {x: k for k, x in enumerate(nodes)}
    succ = np.zeros((n_bins, len(nodes)), dtype=int)
    tot = np.zeros((n_bins, len(nodes)), dtype=int)
    for r in log.records:
        b = int((r.timestamp - origin) // bin)
        tot[b, col[r.node]] += 1
        succ[b, col[r.node]] += r.outcome
    starts = tuple(origin + k * bin for k in range(n_bins))
    return BinnedCounts(starts, nodes, succ, tot)


def ratio_sqrt_transform(successes, totals):
    """sqrt(successes / totals), 0 where totals is 0."""
    s = np.asarray(successes, dtype=float)
    n = np.asarray(totals, dtype=float)
    if np.any(n < 0) or np.any(s < 0):
        raise ValueError("counts must be nonnegative")
    if np.any(s > n):
        raise ValueError("successes exceed totals")
    out = np.sqrt(np.divide(s, n, out=np.zeros_like(s), where=n > 0))
    return float(out) if out.ndim == 0 else out


def threshold_binary(values, threshold: float = 0.5) -> np.ndarray:
    """1 where value >= threshold (values exactly at the threshold count as 1)."""
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    return (np.asarray(values, dtype=float) >= threshold).astype(np.int8)


def select_active_nodes(states: np.ndarray, node_ids, min_rate: float) -> list[str]:
    """Nodes whose fraction of active time points is at least ``min_rate``."""
    rate = np.asarray(states, dtype=float).mean(axis=0)
    return [i for i, r in zip(node_ids, rate) if r >= min_rate]


def counts_to_dataset(counts: BinnedCounts, threshold: float = 0.5) -> TimeSeriesDataset:
    states = threshold_binary(ratio_sqrt_transform(counts.successes, counts.totals), threshold)
    stamps = tuple(b.date().isoformat() for b in counts.bin_starts)
    return TimeSeriesDataset(counts.node_ids, states, timestamps=stamps)


def read_states_csv(path, mode: VariableMode = VariableMode.BINARY) -> TimeSeriesDataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValueError(f"{path}: no data rows")
    header = rows[0]
    nodes = [h.strip() for h in header[1:]]
    labels, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise RecordError(lineno, f"expected {len(header)} fields, got {len(row)}")
        labels.append(row[0].strip())
        try:
            values.append([float(x) for x in row[1:]])
        except ValueError as exc:
            raise RecordError(lineno, str(exc)) from None
    stamps = None
    try:
        [dt.date.fromisoformat(x[:10]) for x in labels]
        stamps = tuple(labels)
    except ValueError:
        pass
    return TimeSeriesDataset(tuple(nodes), np.array(values), timestamps=stamps, mode=mode)


def write_states_csv(path, dataset: TimeSeriesDataset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + list(dataset.node_ids))
        labels = dataset.timestamps or range(dataset.T)
        for lab, row in zip(labels, dataset.states):
            w.writerow([lab] + [f"{x:.17g}" for x in row])


def read_ties_csv(path, node_ids, T: int) -> np.ndarray:
    """(T, n(n-1)/2) 0/1 tie array from ``t,node_u,node_v`` rows."""
    col = {x: k for k, x in enumerate(node_ids)}
    n = len(node_ids)
    pidx = {}
    for i in range(n):
        for j in range(i + 1, n):
            pidx[(i, j)] = len(pidx)
    W = np.zeros((T, len(pidx)), dtype=np.int8)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader, None)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise RecordError(lineno, "expected t,node_u,node_v")
            try:
                t = int(row[0])
            except ValueError:
                raise RecordError(lineno, f"bad time index {row[0]!r}") from None
            u, v = row[1].strip(), row[2].strip()
            if u not in col or v not in col or u == v:
                raise RecordError(lineno, f"unknown or repeated node in pair ({u}, {v})")
            if not 0 <= t < T:
                raise RecordError(lineno, f"time index {t} outside [0, {T})")
            a, b = sorted((col[u], col[v]))
            W[t, pidx[(a, b)]] = 1
    return W


def write_ties_csv(path, dataset: TimeSeriesDataset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "node_u", "node_v"])
        if dataset.edge_observations is None:
            return
        pairs = dataset.pairs
        for t, p in zip(*np.nonzero(dataset.edge_observations)):
            i, j = pairs[p]
            w.writerow([int(t), dataset.node_ids[i], dataset.node_ids[j]])


def write_edge_covariates_csv(path, dataset: TimeSeriesDataset):
    """Long form ``t,node_u,node_v,<name>...``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "node_u", "node_v"] + list(dataset.edge_covariate_names))
        pairs = dataset.pairs
        for t in range(dataset.T):
            for p, (i, j) in enumerate(pairs):
                w.writerow([t, dataset.node_ids[i], dataset.node_ids[j]] + [f"{x:.17g}" for x in dataset.edge_covariates[t, p]])


def read_edge_covariates_csv(path, node_ids, T: int) -> tuple[tuple, np.ndarray]:
    col = {x: k for k, x in enumerate(node_ids)}
    n = len(node_ids)
    pidx = {}
    for i in range(n):
        for j in range(i + 1, n):
            pidx[(i, j)] = len(pidx)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        names = tuple(h.strip() for h in header[3:])
        X = np.full((T, len(pidx), len(names)), np.nan)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise RecordError(lineno, f"expected {len(header)} fields")
            t = int(row[0])
            a, b = sorted((col[row[1].strip()], col[row[2].strip()]))
            X[t, pidx[(a, b)]] = [float(x) for x in row[3:]]
    return names, X


def load_dataset(states_path, ties_path=None, edge_covariates_path=None) -> TimeSeriesDataset:
    ds = read_states_csv(states_path)
    changes = {}
    if ties_path is not None and Path(ties_path).exists():
        changes["edge_observations"] = read_ties_csv(ties_path, ds.node_ids, ds.T)
    if edge_covariates_path is not None and Path(edge_covariates_path).exists():
        names, X = read_edge_covariates_csv(edge_covariates_path, ds.node_ids, ds.T)
        changes["edge_covariates"] = X
        changes["edge_covariate_names"] = names
    return ds.with_covariates(**changes) if changes else ds
