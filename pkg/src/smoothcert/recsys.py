"""Item-similarity recommender, its smoothed top-K wrapper, and the
worst-case overlap certificate with certified precision/recall.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy import stats

from .graph import InteractionMatrix, PerturbationBudget
from .pipeline import _accumulate_parallel, format_float, render_json
from .sampling import SmoothingParams, derive_sample_seed, sample_smoothed_ratings
from .certify import prob_all_removed_recsys


@dataclass(eq=False)
class ItemSimilarityModel:
    """Jaccard item-item similarity backed by co-occurrence counts."""

    items: int
    item_counts: np.ndarray        # users per item
    cooccurrence: sp.csr_matrix    # users per item pair (diagonal = item_counts)

    def similarity(self, i: int, j: int) -> float:
        both = self.cooccurrence[i, j]
        denom = self.item_counts[i] + self.item_counts[j] - both
        return float(both / denom) if denom > 0 else 0.0

    def scores(self, history) -> np.ndarray:
        """Sum of similarities to each history item, over all items."""
        score = np.zeros(self.items)
        counts = self.item_counts
        indptr = self.cooccurrence.indptr
        indices = self.cooccurrence.indices
        data = self.cooccurrence.data
        for j in history:
            lo, hi = indptr[j], indptr[j + 1]
            idx = indices[lo:hi]
            both = data[lo:hi]
            score[idx] += both / (counts[idx] + counts[j] - both)
        return score


def build_similarity(matrix: InteractionMatrix) -> ItemSimilarityModel:
    """Exact co-occurrence and Jaccard similarity over the interactions."""
    pairs = matrix.pairs
    a = sp.csr_matrix((np.ones(pairs.shape[0]), (pairs[:, 0], pairs[:, 1])),
                      shape=(matrix.users, matrix.items))
    cooc = (a.T @ a).tocsr()
    return ItemSimilarityModel(items=matrix.items,
                               item_counts=cooc.diagonal(),
                               cooccurrence=cooc)


def recommend_topk(model: ItemSimilarityModel, user_history, k_prime: int) -> np.ndarray:
    """Top ``k_prime`` items by summed similarity to the user's history.

    History items and zero-score items are never recommended; ties break
    toward the lower item id. An empty history yields an empty list (the
    abstention case).
    """
    if k_prime < 1:
        raise ValueError("k_prime must be >= 1")
    history = np.asarray(user_history, dtype=np.int64)
    if history.size == 0:
        return np.empty(0, dtype=np.int64)
    score = model.scores(history)
    score[history] = 0.0
    candidates = np.flatnonzero(score > 0.0)
    if candidates.size == 0:
        return np.empty(0, dtype=np.int64)
    order = candidates[np.lexsort((candidates, -score[candidates]))]
    return order[:k_prime]


@dataclass(eq=False)
class ItemVoteTable:
    """Per (user, item) inclusion counts of the smoothed base recommender."""

    counts: np.ndarray       # (users, items) int64
    abstains: np.ndarray     # (users,) int64, samples with the user isolated
    num_samples: int
    k_prime: int
    user_degrees: np.ndarray  # training interaction count per user
    provenance: dict

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.abstains = np.asarray(self.abstains, dtype=np.int64)
        self.user_degrees = np.asarray(self.user_degrees, dtype=np.int64)
        if self.counts.ndim != 2:
            raise ValueError("counts must be (users, items)")
        users = self.counts.shape[0]
        if self.abstains.shape != (users,) or self.user_degrees.shape != (users,):
            raise ValueError("abstains and user_degrees must be (users,)")
        if self.counts.size and (self.counts.max() > self.num_samples
                                 or self.abstains.max() > self.num_samples):
            raise ValueError("counts cannot exceed num_samples")

    @property
    def users(self) -> int:
        return self.counts.shape[0]

    @property
    def items(self) -> int:
        return self.counts.shape[1]

    def frequencies(self, user: int) -> np.ndarray:
        return self.counts[user] / self.num_samples


def collect_item_votes(matrix: InteractionMatrix, num_samples: int,
                       params: SmoothingParams, k_prime: int, master_seed: int, *,
                       threads: int = 1, first_index: int = 0) -> ItemVoteTable:
    """Count how often each item enters each user's smoothed top-K'.

    Every sample rebuilds the similarity model on its own smoothed rating
    matrix; users left without ratings abstain for that sample.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if k_prime < 1:
        raise ValueError("k_prime must be >= 1")

    def worker(lo, hi):
        counts = np.zeros((matrix.users, matrix.items), dtype=np.int64)
        abstains = np.zeros(matrix.users, dtype=np.int64)
        for i in range(lo, hi):
            smoothed, _ = sample_smoothed_ratings(
                matrix, params, derive_sample_seed(master_seed, i))
            model = build_similarity(smoothed)
            for u in range(matrix.users):
                history = smoothed.items_of(u)
                if history.size == 0:
                    abstains[u] += 1
                    continue
                recs = recommend_topk(model, history, k_prime)
                counts[u, recs] += 1
        return counts, abstains

    counts, abstains = _accumulate_parallel(num_samples, first_index, threads, worker)
    provenance = {
        "kind": "recommender", "p_e": params.p_e, "p_n": params.p_n,
        "k_prime": int(k_prime), "master_seed": int(master_seed),
        "first_index": int(first_index), "num_samples": int(num_samples),
    }
    return ItemVoteTable(counts=counts, abstains=abstains,
                         num_samples=num_samples, k_prime=k_prime,
                         user_degrees=matrix.user_degrees, provenance=provenance)


def _cp_lower_vec(successes: np.ndarray, trials: int, level: float) -> np.ndarray:
    out = np.zeros(successes.shape[0])
    pos = successes > 0
    if pos.any():
        s = successes[pos]
        out[pos] = stats.beta.ppf(level, s, trials - s + 1)
    return out


def _cp_upper_vec(successes: np.ndarray, trials: int, level: float) -> np.ndarray:
    out = np.ones(successes.shape[0])
    below = successes < trials
    if below.any():
        s = successes[below]
        out[below] = stats.beta.ppf(1.0 - level, s + 1, trials - s)
    return out


def _certifies_overlap(gt_lowers: np.ndarray, other_uppers: np.ndarray, r: int,
                       k: int, k_prime: int, p_hat: float, p_isolated: float,
                       scaled_candidate_sum: bool) -> bool:
    """Check the worst-case condition for at least ``r`` ground-truth hits.

    The r-th largest lower bound among ground-truth items must beat the
    cheapest average over the bottom-c of the top-(k - r + 1) candidate upper
    bounds, inflated by the mass the adversary can move through samples where
    the user still votes but an injected rating survives.
    """
    if gt_lowers.size < r:
        return False
    p_r = np.sort(gt_lowers)[-r]
    slack = k_prime * (1.0 - p_hat) * (1.0 - p_isolated)
    take = min(k - r + 1, other_uppers.size)
    if take == 0:
        return p_hat * p_r - slack > 0.0
    top_desc = np.sort(other_uppers)[::-1][:take]
    ascending = top_desc[::-1]
    sums = np.cumsum(ascending)
    cs = np.arange(1, take + 1, dtype=np.float64)
    if scaled_candidate_sum:
        bounds = (p_hat * sums + slack) / cs
    else:
        bounds = (sums + slack) / cs
    return p_hat * p_r - float(bounds.min()) > 0.0


def certify_overlap(gt_lowers, other_uppers, k: int, k_prime: int, p_hat: float,
                    p_isolated: float, *, scaled_candidate_sum: bool = True) -> int:
    """Largest certified overlap given fixed per-item probability bounds.

    Used directly when exact inclusion probabilities are available (for
    example from exhaustive enumeration); the Monte-Carlo entry point is
    :func:`certify_user_overlap`.
    """
    gt_lowers = np.asarray(gt_lowers, dtype=np.float64)
    other_uppers = np.asarray(other_uppers, dtype=np.float64)
    for r in range(min(k, gt_lowers.size), 0, -1):
        if _certifies_overlap(gt_lowers, other_uppers, r, k, k_prime,
                              p_hat, p_isolated, scaled_candidate_sum):
            return r
    return 0


def certify_user_overlap(table: ItemVoteTable, user: int, ground_truth, k: int,
                         params: SmoothingParams, budget: PerturbationBudget,
                         alpha: float, *, d_u: Optional[int] = None,
                         scaled_candidate_sum: bool = True) -> int:
    """Largest ``r`` such that at least ``r`` of the smoothed top-``k`` items
    are guaranteed to come from ``ground_truth`` under any allowed poisoning.

    Per candidate value of ``r``, the significance budget ``alpha`` is split
    evenly over the ``|ground_truth| + (k - r + 1)`` bounded items and
    one-sided Clopper-Pearson bounds are recomputed at that level.
    """
    params.require_certifiable()
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if k < 1 or k > table.k_prime:
        raise ValueError("need 1 <= k <= k_prime")
    if d_u is None:
        d_u = int(table.user_degrees[user])
    if d_u < 1:
        raise ValueError("certification requires at least one training rating")
    gt = np.unique(np.asarray(list(ground_truth), dtype=np.int64))
    if gt.size == 0:
        raise ValueError("ground truth must be non-empty")
    if gt.min() < 0 or gt.max() >= table.items:
        raise ValueError("ground-truth item index out of range")

    p_hat = prob_all_removed_recsys(params, budget.tau, budget.rho)
    p_isolated = params.p_n + (1.0 - params.p_n) * params.p_e**d_u
    counts = table.counts[user]
    others = np.setdiff1d(np.arange(table.items), gt)

    for r in range(min(k, gt.size), 0, -1):
        level = alpha / (gt.size + (k - r + 1))
        gt_lowers = _cp_lower_vec(counts[gt], table.num_samples, level)
        other_uppers = _cp_upper_vec(counts[others], table.num_samples, level)
        if _certifies_overlap(gt_lowers, other_uppers, r, k, table.k_prime,
                              p_hat, p_isolated, scaled_candidate_sum):
            return r
    return 0


def certified_precision_recall(table: ItemVoteTable,
                               ground_truths: Mapping[int, Sequence[int]],
                               k: int, params: SmoothingParams,
                               budget: PerturbationBudget, alpha: float, *,
                               scaled_candidate_sum: bool = True) -> tuple[float, float]:
    """Mean certified precision and recall over the given users.

    Per user the certified overlap ``r`` contributes ``r / k`` to precision
    and ``r / |ground_truth|`` to recall.
    """
    if not ground_truths:
        raise ValueError("no users to evaluate")
    precision = 0.0
    recall = 0.0
    for user, gt in ground_truths.items():
        gt = list(gt)
        if not gt:
            raise ValueError(f"user {user} has empty ground truth")
        r = certify_user_overlap(table, user, gt, k, params, budget, alpha,
                                 scaled_candidate_sum=scaled_candidate_sum)
        precision += r / k
        recall += r / len(gt)
    count = len(ground_truths)
    return precision / count, recall / count


@dataclass(frozen=True)
class RecommenderCurvePoint:
    rho: int
    certified_precision: float
    certified_recall: float


@dataclass(frozen=True)
class RecommenderCurve:
    tau: int
    points: tuple

    def __post_init__(self):
        prec = [p.certified_precision for p in self.points]
        if any(a > b + 1e-15 for a, b in zip(prec[1:], prec[:-1])):
            raise ValueError("certified precision must be non-increasing in rho")


def recommender_curve(table: ItemVoteTable,
                      ground_truths: Mapping[int, Sequence[int]], k: int,
                      params: SmoothingParams, tau: int, alpha: float, *,
                      scaled_candidate_sum: bool = True,
                      rho_cap: int = 10**6) -> RecommenderCurve:
    """Certified precision/recall over a dense rho grid until both reach zero."""
    points = []
    rho = 0
    while True:
        budget = PerturbationBudget(rho=rho, tau=tau)
        precision, recall = certified_precision_recall(
            table, ground_truths, k, params, budget, alpha,
            scaled_candidate_sum=scaled_candidate_sum)
        points.append(RecommenderCurvePoint(rho=rho, certified_precision=precision,
                                            certified_recall=recall))
        if (precision == 0.0 and recall == 0.0) or rho >= rho_cap:
            break
        rho += 1
    return RecommenderCurve(tau=tau, points=tuple(points))


def write_recommender_report(curves: Sequence[RecommenderCurve], metadata: dict,
                             out_dir) -> list[Path]:
    """Write ``recsys_curve_tau<tau>.csv`` per curve plus a JSON summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summaries = []
    for curve in curves:
        csv_path = out / f"recsys_curve_tau{curve.tau}.csv"
        lines = ["rho,certified_precision,certified_recall"]
        lines += [f"{p.rho},{format_float(p.certified_precision)},"
                  f"{format_float(p.certified_recall)}" for p in curve.points]
        csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        written.append(csv_path)
        summaries.append({
            "tau": curve.tau,
            "acr_precision": math.fsum(p.certified_precision
                                       for p in curve.points if p.rho >= 1),
            "acr_recall": math.fsum(p.certified_recall
                                    for p in curve.points if p.rho >= 1),
            "clean_certified_precision": curve.points[0].certified_precision,
            "clean_certified_recall": curve.points[0].certified_recall,
            "max_rho": curve.points[-1].rho,
            "csv": csv_path.name,
        })
    report_path = out / "report.json"
    report_path.write_text(
        render_json({"metadata": metadata, "curves": summaries}) + "\n",
        encoding="utf-8")
    written.append(report_path)
    return written
