"""Monte-Carlo vote collection, certified-accuracy curves, and report output.

Vote accumulation is an associative, commutative integer merge, so results do
not depend on how sample indices are chunked across worker threads.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .certify import (CertConfig, Outcome, VoteStats, abstain_test, certify_node,
                      clopper_pearson_lower, clopper_pearson_upper,
                      margin_exclude, margin_include, node_retention_probs,
                      prob_all_removed)
from .graph import Graph, DataSplit, PerturbationBudget
from .models import (ClassifierSpec, TrainedModel, feature_transform, predict,
                     train_predict_end_to_end)
from .sampling import SmoothingParams, derive_sample_seed, sample_smoothed_graph

_TRAIN_STREAM = (1 << 40) + 1
_RHO_HARD_CAP = 10**6

_MERGE_IGNORED_KEYS = ("first_index", "num_samples")


@dataclass(eq=False)
class VoteTable:
    """Per-node, per-class Monte-Carlo vote counts with abstention counts."""

    counts: np.ndarray   # (n, num_classes) int64
    abstains: np.ndarray  # (n,) int64
    num_samples: int
    provenance: dict

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.abstains = np.asarray(self.abstains, dtype=np.int64)
        if self.counts.ndim != 2:
            raise ValueError("counts must be (n, num_classes)")
        if self.abstains.shape != (self.counts.shape[0],):
            raise ValueError("abstains must be (n,)")
        totals = self.counts.sum(axis=1) + self.abstains
        if self.counts.shape[0] and not np.all(totals == self.num_samples):
            raise ValueError("per-node counts must sum to num_samples")

    @property
    def num_nodes(self) -> int:
        return self.counts.shape[0]

    @property
    def majority_classes(self) -> np.ndarray:
        return np.argmax(self.counts, axis=1)

    def stats_for(self, node: int) -> VoteStats:
        return VoteStats.from_counts(self.counts[node], self.num_samples,
                                     int(self.abstains[node]))

    def merged(self, other: "VoteTable") -> "VoteTable":
        """Combine disjoint sample ranges of the same run into one table."""
        if self.counts.shape != other.counts.shape:
            raise ValueError("vote tables cover different graphs")
        a = {k: v for k, v in self.provenance.items() if k not in _MERGE_IGNORED_KEYS}
        b = {k: v for k, v in other.provenance.items() if k not in _MERGE_IGNORED_KEYS}
        if a != b:
            raise ValueError("vote tables come from different runs")
        prov = dict(self.provenance)
        prov["first_index"] = min(self.provenance.get("first_index", 0),
                                  other.provenance.get("first_index", 0))
        prov["num_samples"] = self.num_samples + other.num_samples
        return VoteTable(counts=self.counts + other.counts,
                         abstains=self.abstains + other.abstains,
                         num_samples=self.num_samples + other.num_samples,
                         provenance=prov)


def _accumulate_parallel(num_samples: int, first_index: int, threads: int,
                         worker: Callable[[int, int], tuple[np.ndarray, np.ndarray]]):
    """Run ``worker(lo, hi)`` over a chunked index range and sum the results."""
    if threads <= 1:
        return worker(first_index, first_index + num_samples)
    chunk_count = min(num_samples, threads * 4)
    bounds = np.linspace(first_index, first_index + num_samples,
                         chunk_count + 1).astype(np.int64)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(lambda se: worker(se[0], se[1]),
                              zip(bounds[:-1], bounds[1:])))
    counts = sum(p[0] for p in parts)
    abstains = sum(p[1] for p in parts)
    return counts, abstains


def collect_votes_evasion(model: TrainedModel, graph: Graph, num_samples: int,
                          params: SmoothingParams, master_seed: int, *,
                          threads: int = 1, first_index: int = 0) -> VoteTable:
    """Vote over ``num_samples`` smoothed copies of the graph with a fixed model.

    Sample ``i`` uses the seed derived from ``(master_seed, i)``, so disjoint
    index ranges can be collected independently and merged.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    n = graph.n
    num_classes = model.num_classes
    transformed = feature_transform(model, graph.features)

    def worker(lo, hi):
        counts = np.zeros((n, num_classes), dtype=np.int64)
        rows = np.arange(n)
        for i in range(lo, hi):
            sample = sample_smoothed_graph(graph, params,
                                           derive_sample_seed(master_seed, i))
            preds = predict(model, sample.graph, transformed)
            counts[rows, preds] += 1
        return counts, np.zeros(n, dtype=np.int64)

    counts, abstains = _accumulate_parallel(num_samples, first_index, threads, worker)
    provenance = {
        "kind": "evasion", "p_e": params.p_e, "p_n": params.p_n,
        "master_seed": int(master_seed), "first_index": int(first_index),
        "num_samples": int(num_samples), "model_graph": model.graph_fingerprint,
        "model_kind": model.spec.kind, "model_seed": model.spec.seed,
    }
    return VoteTable(counts=counts, abstains=abstains,
                     num_samples=num_samples, provenance=provenance)


def collect_votes_poisoning(spec: ClassifierSpec, graph: Graph, split: DataSplit,
                            num_samples: int, params: SmoothingParams, mode: str,
                            master_seed: int, *, threads: int = 1,
                            first_index: int = 0) -> VoteTable:
    """Vote over ``num_samples`` independent train-and-predict runs.

    Each sample trains a fresh model on its own smoothed graph (training seed
    derived from the sample seed) and predicts on it. In exclude mode nodes
    isolated in a sample abstain instead of voting.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    n = graph.n
    num_classes = graph.num_classes

    def worker(lo, hi):
        counts = np.zeros((n, num_classes), dtype=np.int64)
        abstains = np.zeros(n, dtype=np.int64)
        rows = np.arange(n)
        for i in range(lo, hi):
            seed_i = derive_sample_seed(master_seed, i)
            sample = sample_smoothed_graph(graph, params, seed_i)
            spec_i = replace(spec, seed=derive_sample_seed(seed_i, _TRAIN_STREAM))
            preds, abstain = train_predict_end_to_end(spec_i, sample, split, mode)
            voting = ~abstain
            counts[rows[voting], preds[voting]] += 1
            abstains[abstain] += 1
        return counts, abstains

    counts, abstains = _accumulate_parallel(num_samples, first_index, threads, worker)
    provenance = {
        "kind": "poisoning", "p_e": params.p_e, "p_n": params.p_n, "mode": mode,
        "master_seed": int(master_seed), "first_index": int(first_index),
        "num_samples": int(num_samples), "model_kind": spec.kind,
        "model_seed": spec.seed,
    }
    return VoteTable(counts=counts, abstains=abstains,
                     num_samples=num_samples, provenance=provenance)


@dataclass(frozen=True)
class CurvePoint:
    rho: int
    certified_accuracy: float
    abstain_rate: float


@dataclass(frozen=True)
class CertCurve:
    """Certified accuracy as a function of the injected-node budget."""

    tau: int
    points: tuple
    clean_accuracy: float

    def __post_init__(self):
        values = [p.certified_accuracy for p in self.points]
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("certified accuracy must lie in [0, 1]")
        if any(a > b + 1e-15 for a, b in zip(values[1:], values[:-1])):
            raise ValueError("certified accuracy must be non-increasing in rho")

    def certified_at(self, rho: int) -> float:
        for p in self.points:
            if p.rho == rho:
                return p.certified_accuracy
        raise KeyError(f"rho={rho} not on the curve grid")


def _node_summaries(table: VoteTable, labels: np.ndarray, nodes: np.ndarray,
                    config: CertConfig):
    """Per-node abstention flag, correctness, and vote bounds (rho independent)."""
    level = config.alpha / config.num_classes
    abstained = np.empty(len(nodes), dtype=bool)
    correct = np.empty(len(nodes), dtype=bool)
    lowers = np.empty(len(nodes))
    uppers = np.empty(len(nodes))
    for j, v in enumerate(nodes):
        s = table.stats_for(int(v))
        abstained[j] = abstain_test(s.top_votes, s.runner_votes, config.alpha)
        correct[j] = s.top_class == labels[v]
        lowers[j] = clopper_pearson_lower(s.top_votes, s.num_samples, level)
        uppers[j] = clopper_pearson_upper(s.runner_votes, s.num_samples, level)
    return abstained, correct, lowers, uppers


def certified_accuracy_curve(table: VoteTable, labels, params: SmoothingParams,
                             tau: int, config: CertConfig, degrees=None,
                             nodes=None) -> CertCurve:
    """Certified accuracy over a dense rho grid at a fixed edge budget.

    The grid runs from 0 to the first rho at which the all-removed
    probability drops to 1/2 (extended while any node still certifies, under
    a hard cap), so the curve always terminates at zero. Abstaining nodes
    count against certified accuracy but are reported separately as the
    abstain rate; clean accuracy is majority-vote correctness ignoring
    certification.
    """
    params.require_certifiable()
    labels = np.asarray(labels, dtype=np.int64)
    if nodes is None:
        nodes = np.flatnonzero(labels >= 0)
    nodes = np.asarray(nodes, dtype=np.int64)
    if nodes.size == 0:
        raise ValueError("no nodes to evaluate")
    if np.any(labels[nodes] < 0):
        raise ValueError("labels required for every evaluated node")
    if config.mode == "exclude":
        if degrees is None:
            raise ValueError("exclusion mode requires original node degrees")
        degrees = np.asarray(degrees, dtype=np.int64)

    abstained, correct, lowers, uppers = _node_summaries(table, labels, nodes, config)
    active = ~abstained
    if config.mode == "exclude":
        node_deg = degrees[nodes]
        active &= node_deg > 0  # no certificate exists for originally isolated nodes
        retention = [node_retention_probs(params, int(d)) if d > 0 else None
                     for d in node_deg]

    abstain_rate = float(np.mean(abstained))
    clean_accuracy = float(np.mean(correct))

    rho_cut = 1
    while (prob_all_removed(params, tau, rho_cut) > 0.5
           and rho_cut < _RHO_HARD_CAP):
        rho_cut += 1

    points = []
    rho = 0
    while True:
        p_removed = prob_all_removed(params, tau, rho)
        certified = np.zeros(len(nodes), dtype=bool)
        for j in np.flatnonzero(active):
            if config.mode == "include":
                margin = margin_include(lowers[j], uppers[j], p_removed)
            else:
                p_iso, p_iso_attacked = retention[j]
                margin = margin_exclude(lowers[j], uppers[j], p_removed,
                                        p_iso, p_iso_attacked)
            certified[j] = margin > 0.0
        xi = float(np.mean(certified & correct))
        points.append(CurvePoint(rho=rho, certified_accuracy=xi,
                                 abstain_rate=abstain_rate))
        if rho >= rho_cut and (xi == 0.0 or rho >= _RHO_HARD_CAP):
            break
        rho += 1

    return CertCurve(tau=tau, points=tuple(points), clean_accuracy=clean_accuracy)


def certified_accuracy_at(table: VoteTable, labels, params: SmoothingParams,
                          budget: PerturbationBudget, config: CertConfig,
                          degrees=None, nodes=None) -> float:
    """Certified accuracy at a single budget, via per-node certification."""
    labels = np.asarray(labels, dtype=np.int64)
    if nodes is None:
        nodes = np.flatnonzero(labels >= 0)
    nodes = np.asarray(nodes, dtype=np.int64)
    if degrees is not None:
        degrees = np.asarray(degrees, dtype=np.int64)
    hits = 0
    for v in nodes:
        degree = None
        if config.mode == "exclude":
            degree = int(degrees[v])
            if degree == 0:
                continue
        decision = certify_node(table.stats_for(int(v)), params, budget, config,
                                degree=degree)
        if (decision.outcome is Outcome.CERTIFIED
                and decision.certified_class == labels[v]):
            hits += 1
    return hits / len(nodes)


def average_certified_radius(curve: CertCurve) -> float:
    """Area under the certified accuracy curve (sum over rho >= 1)."""
    if curve.points and curve.points[-1].certified_accuracy != 0.0:
        raise ValueError("curve must terminate at certified accuracy 0")
    return math.fsum(p.certified_accuracy for p in curve.points if p.rho >= 1)


def format_float(x: float) -> str:
    """Render a float with 17 significant digits (lossless round-trip)."""
    return "%.17g" % float(x)


def render_json(obj, indent: int = 0) -> str:
    """Deterministic JSON with sorted keys and 17-significant-digit floats."""
    import json as _json

    pad = "  " * indent
    inner = "  " * (indent + 1)
    if obj is None or isinstance(obj, bool):
        return _json.dumps(obj)
    if isinstance(obj, (np.integer, int)):
        return str(int(obj))
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        if not math.isfinite(value):
            raise ValueError("reports may not contain non-finite numbers")
        return format_float(value)
    if isinstance(obj, str):
        return _json.dumps(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        items = ",\n".join(inner + render_json(v, indent + 1) for v in obj)
        return "[\n" + items + "\n" + pad + "]"
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = ",\n".join(
            f"{inner}{_json.dumps(str(k))}: {render_json(v, indent + 1)}"
            for k, v in sorted(obj.items(), key=lambda kv: str(kv[0])))
        return "{\n" + items + "\n" + pad + "}"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_report(curves: Sequence[CertCurve], metadata: dict, out_dir) -> list[Path]:
    """Write one CSV per curve plus a JSON summary.

    Each ``curve_tau<tau>.csv`` has the header
    ``rho,certified_accuracy,abstain_rate``. The JSON carries the caller's
    metadata (settings, seeds, timing) and per-curve summaries. Output is a
    pure function of the inputs, so identical runs produce identical bytes.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summaries = []
    for curve in curves:
        csv_path = out / f"curve_tau{curve.tau}.csv"
        lines = ["rho,certified_accuracy,abstain_rate"]
        lines += [f"{p.rho},{format_float(p.certified_accuracy)},"
                  f"{format_float(p.abstain_rate)}" for p in curve.points]
        csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(csv_path)
        summaries.append({
            "tau": curve.tau,
            "clean_accuracy": curve.clean_accuracy,
            "average_certified_radius": average_certified_radius(curve),
            "abstain_rate": curve.points[0].abstain_rate if curve.points else 0.0,
            "max_rho": curve.points[-1].rho if curve.points else 0,
            "csv": csv_path.name,
        })
    report_path = out / "report.json"
    report_path.write_text(
        render_json({"metadata": metadata, "curves": summaries}) + "\n",
        encoding="utf-8")
    written.append(report_path)
    return written


def read_curve_csv(path) -> list[CurvePoint]:
    """Parse a curve CSV written by :func:`write_report`."""
    lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
    if lines[0] != "rho,certified_accuracy,abstain_rate":
        raise ValueError(f"unexpected header {lines[0]!r}")
    points = []
    for line in lines[1:]:
        rho, acc, rate = line.split(",")
        points.append(CurvePoint(rho=int(rho), certified_accuracy=float(acc),
                                 abstain_rate=float(rate)))
    return points
