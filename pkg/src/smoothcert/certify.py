"""Closed-form certification margins, the worst-case classifier solver, and
statistical bounds on Monte-Carlo vote probabilities.

Every function here is pure and safe for unrestricted concurrent use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .graph import PerturbationBudget
from .sampling import SmoothingParams

_MASS_TOL = 1e-9
_RHO_SCAN_CAP = 10**6


class Outcome(Enum):
    CERTIFIED = "certified"
    ABSTAIN = "abstain"
    NOT_CERTIFIED = "not_certified"


@dataclass(frozen=True)
class Region:
    """One constant-likelihood-ratio region of the sample space.

    ``clean_mass`` is the probability the clean-input randomization lands in
    the region, ``perturbed_mass`` the same under the worst-case perturbed
    input. The ratio is clean over perturbed, with +inf when the perturbed
    mass is zero.
    """

    clean_mass: float
    perturbed_mass: float

    def __post_init__(self):
        if self.clean_mass < -_MASS_TOL or self.perturbed_mass < -_MASS_TOL:
            raise ValueError("region masses must be non-negative")

    @property
    def ratio(self) -> float:
        if self.perturbed_mass == 0.0:
            return math.inf
        return self.clean_mass / self.perturbed_mass


LikelihoodRegions = Sequence[Region]


@dataclass(frozen=True)
class VoteStats:
    """Top-two vote counts for one node out of ``num_samples`` draws."""

    top_votes: int
    runner_votes: int
    top_class: int
    runner_class: int
    num_samples: int
    abstain_count: int = 0

    def __post_init__(self):
        if self.num_samples <= 0:
            raise ValueError("num_samples must be positive")
        if self.top_votes < self.runner_votes:
            raise ValueError("top_votes must be >= runner_votes")
        if min(self.top_votes, self.runner_votes, self.abstain_count) < 0:
            raise ValueError("counts must be non-negative")
        if self.top_votes + self.runner_votes + self.abstain_count > self.num_samples:
            raise ValueError("counts exceed num_samples")

    @classmethod
    def from_counts(cls, counts, num_samples: int, abstain_count: int = 0) -> "VoteStats":
        """Build stats from a per-class count vector (ties go to the lower id)."""
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size < 2:
            raise ValueError("counts must be a vector over >= 2 classes")
        top = int(np.argmax(counts))
        masked = counts.copy()
        masked[top] = -1
        runner = int(np.argmax(masked))
        return cls(top_votes=int(counts[top]), runner_votes=int(counts[runner]),
                   top_class=top, runner_class=runner,
                   num_samples=int(num_samples), abstain_count=int(abstain_count))


@dataclass(frozen=True)
class CertConfig:
    """Certification settings: significance level, class count, vote mode."""

    alpha: float
    num_classes: int
    mode: str = "include"

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.mode not in ("include", "exclude"):
            raise ValueError("mode must be 'include' or 'exclude'")


@dataclass(frozen=True)
class CertDecision:
    outcome: Outcome
    certified_class: Optional[int]
    margin: Optional[float]
    p_top_lower: Optional[float]
    p_runner_upper: Optional[float]


@dataclass(frozen=True)
class CertifiedRadius:
    rho: int
    abstained: bool


def _validate_counts(tau: int, rho: int) -> None:
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if rho < 0:
        raise ValueError("rho must be >= 0")


def prob_all_removed(params: SmoothingParams, tau: int, rho: int) -> float:
    """Probability that smoothing disconnects every injected node.

    An injected node vanishes from the sample if the node-deletion coin fires,
    or if each of its (at most tau) edges is dropped, an edge falling either
    to the edge coin or to deletion of the endpoint it attaches to. With rho
    independent injected nodes the probability is
    ``(p_n + (1 - p_n) * (p_e + p_n - p_e * p_n)**tau) ** rho``.
    """
    _validate_counts(tau, rho)
    if rho == 0:
        return 1.0
    q = params.p_e + params.p_n - params.p_e * params.p_n
    inner = params.p_n + (1.0 - params.p_n) * q**tau
    return inner**rho


def prob_all_removed_recsys(params: SmoothingParams, tau: int, rho: int) -> float:
    """Bipartite variant of :func:`prob_all_removed`.

    Injected users attach only to items, and items are never deleted, so each
    injected rating survives unless its own coin fires:
    ``(p_n + (1 - p_n) * p_e**tau) ** rho``.
    """
    _validate_counts(tau, rho)
    if rho == 0:
        return 1.0
    inner = params.p_n + (1.0 - params.p_n) * params.p_e**tau
    return inner**rho


def node_retention_probs(params: SmoothingParams, degree: int) -> tuple[float, float]:
    """Isolation probabilities of a degree-d node, clean and attacked.

    Returns ``(p_isolated, p_isolated_attacked_lower)``: the exact probability
    that smoothing isolates the node in the clean graph (exponent d) and a
    lower bound on the same probability after an attack that may at most
    double the node's degree (exponent 2d). The first always dominates the
    second since the per-edge survival factor is at most one.
    """
    if degree < 1:
        raise ValueError("exclusion mode is undefined for isolated nodes (degree 0)")
    if params.p_e >= 1.0 or params.p_n >= 1.0:
        raise ValueError("retention probabilities require p_e < 1 and p_n < 1")
    q = params.p_e + params.p_n - params.p_e * params.p_n
    p_isolated = params.p_n + (1.0 - params.p_n) * q**degree
    p_isolated_attacked = params.p_n + (1.0 - params.p_n) * q**(2 * degree)
    return p_isolated, p_isolated_attacked


def margin_include(p_top_lower: float, p_runner_upper: float,
                   p_all_removed: float) -> float:
    """Worst-case vote margin when isolated nodes still receive predictions.

    Total in all arguments, including crossed bounds.
    """
    return p_all_removed * (p_top_lower - p_runner_upper + 1.0) - 1.0


def margin_exclude(p_top_lower: float, p_runner_upper: float, p_all_removed: float,
                   p_isolated: float, p_isolated_attacked_lower: float) -> float:
    """Worst-case vote margin when isolated nodes abstain from voting.

    ``p_isolated`` is the clean-graph isolation probability of the query node
    and ``p_isolated_attacked_lower`` the degree-doubled lower bound on the
    attacked one; the two sides of the margin are bounded with the endpoint
    that is conservative for each.
    """
    if p_isolated >= 1.0:
        raise ValueError("p_isolated must be < 1 (node would never vote)")
    kept_attacked = 1.0 - p_isolated_attacked_lower
    return (p_all_removed * (p_top_lower
                             - kept_attacked * p_runner_upper / (1.0 - p_isolated)
                             + kept_attacked)
            - kept_attacked)


def include_mode_regions(p_all_removed: float) -> list[Region]:
    """Two-region likelihood system for the include-mode certificate."""
    return [Region(1.0, p_all_removed), Region(0.0, 1.0 - p_all_removed)]


def exclude_mode_regions(p_all_removed: float, p_isolated: float,
                         p_isolated_attacked: float) -> list[Region]:
    """Two-region likelihood system for the exclude-mode certificate.

    Restricted to samples where the query node still votes: mass
    ``1 - p_isolated`` under the clean graph, ``1 - p_isolated_attacked``
    under the attacked one. The attacked isolation probability is only known
    to lie between the degree-doubled bound and the clean value, so callers
    evaluate this system once per endpoint, applying each where it is
    conservative.
    """
    kept = 1.0 - p_isolated_attacked
    return [Region(1.0 - p_isolated, p_all_removed * kept),
            Region(0.0, (1.0 - p_all_removed) * kept)]


def worst_case_probabilities(regions: LikelihoodRegions, p_top_lower: float,
                             p_runner_upper: float) -> tuple[float, float]:
    """Perturbed-input class probabilities of the worst-case classifier.

    The adversarial classifier places top-class mass in regions of decreasing
    likelihood ratio until its clean-graph probability reaches
    ``p_top_lower`` (paying as little perturbed mass as possible), and
    runner-up mass in increasing ratio order until ``p_runner_upper`` is
    reached (collecting as much perturbed mass as possible). Each region's
    class probability is capped at 1. This is the exact optimum of the
    underlying linear program.
    """
    clean_total = math.fsum(r.clean_mass for r in regions)
    perturbed_total = math.fsum(r.perturbed_mass for r in regions)
    if clean_total > 1.0 + _MASS_TOL or perturbed_total > 1.0 + _MASS_TOL:
        raise ValueError("region masses must each sum to at most 1")
    p_top_lower = min(max(p_top_lower, 0.0), 1.0)
    p_runner_upper = min(max(p_runner_upper, 0.0), 1.0)
    if p_top_lower > clean_total + _MASS_TOL:
        raise ValueError(
            f"infeasible: p_top_lower={p_top_lower} exceeds clean mass {clean_total}")
    if p_runner_upper > clean_total + _MASS_TOL:
        raise ValueError(
            f"infeasible: p_runner_upper={p_runner_upper} exceeds clean mass {clean_total}")

    by_ratio = sorted(regions, key=lambda r: r.ratio)

    p_top = 0.0
    remaining = p_top_lower
    for region in reversed(by_ratio):
        if remaining <= 0.0:
            break
        if region.clean_mass <= 0.0:
            continue
        frac = min(1.0, remaining / region.clean_mass)
        p_top += frac * region.perturbed_mass
        remaining -= frac * region.clean_mass

    p_runner = 0.0
    remaining = p_runner_upper
    for region in by_ratio:
        if region.clean_mass <= 0.0:
            p_runner += region.perturbed_mass
            continue
        if remaining <= 0.0:
            break
        frac = min(1.0, remaining / region.clean_mass)
        p_runner += frac * region.perturbed_mass
        remaining -= frac * region.clean_mass

    return p_top, p_runner


def solve_worst_case_margin(regions: LikelihoodRegions, p_top_lower: float,
                            p_runner_upper: float) -> float:
    """Exact worst-case margin over the given likelihood region system."""
    p_top, p_runner = worst_case_probabilities(regions, p_top_lower, p_runner_upper)
    return p_top - p_runner


def clopper_pearson_lower(successes: int, trials: int, level: float) -> float:
    """One-sided Clopper-Pearson lower confidence limit at the given level."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    if not 0 <= successes <= trials:
        raise ValueError("successes out of range")
    if successes == 0:
        return 0.0
    return float(stats.beta.ppf(level, successes, trials - successes + 1))


def clopper_pearson_upper(successes: int, trials: int, level: float) -> float:
    """One-sided Clopper-Pearson upper confidence limit at the given level."""
    if trials <= 0:
        raise ValueError("trials must be positive")
    if not 0 <= successes <= trials:
        raise ValueError("successes out of range")
    if successes == trials:
        return 1.0
    return float(stats.beta.ppf(1.0 - level, successes + 1, trials - successes))


def vote_bounds(votes: VoteStats, config: CertConfig) -> tuple[float, float]:
    """Confidence bounds on the top and runner-up vote probabilities.

    One-sided Clopper-Pearson limits, each at level ``alpha / num_classes``.
    """
    level = config.alpha / config.num_classes
    lower = clopper_pearson_lower(votes.top_votes, votes.num_samples, level)
    upper = clopper_pearson_upper(votes.runner_votes, votes.num_samples, level)
    return lower, upper


def majority_pvalue(top_votes: int, runner_votes: int) -> float:
    """Exact two-sided binomial p-value of the top count at p = 1/2."""
    if top_votes < runner_votes:
        raise ValueError("top_votes must be >= runner_votes")
    n = top_votes + runner_votes
    if n == 0:
        return 1.0
    return float(stats.binomtest(top_votes, n, 0.5).pvalue)


def abstain_test(top_votes: int, runner_votes: int, alpha: float) -> bool:
    """True when the top class is not statistically separable from the runner-up."""
    return majority_pvalue(top_votes, runner_votes) > alpha


def _margin_for(votes_lower: float, votes_upper: float, params: SmoothingParams,
                tau: int, rho: int, mode: str, degree: Optional[int]) -> float:
    p_removed = prob_all_removed(params, tau, rho)
    if mode == "include":
        return margin_include(votes_lower, votes_upper, p_removed)
    if degree is None:
        raise ValueError("exclusion mode requires the node's original degree")
    p_iso, p_iso_attacked = node_retention_probs(params, degree)
    return margin_exclude(votes_lower, votes_upper, p_removed, p_iso, p_iso_attacked)


def certify_node(votes: VoteStats, params: SmoothingParams,
                 budget: PerturbationBudget, config: CertConfig,
                 degree: Optional[int] = None) -> CertDecision:
    """Certify one node's smoothed prediction against the given budget.

    Runs the abstention test at level ``alpha``; if the top class is
    separable, bounds the vote probabilities and evaluates the worst-case
    margin for the configured mode. The prediction is certified exactly when
    the margin is positive.
    """
    params.require_certifiable()
    if config.mode == "exclude" and (degree is None or degree < 1):
        raise ValueError("exclusion mode requires degree >= 1")
    if abstain_test(votes.top_votes, votes.runner_votes, config.alpha):
        return CertDecision(Outcome.ABSTAIN, None, None, None, None)
    lower, upper = vote_bounds(votes, config)
    margin = _margin_for(lower, upper, params, budget.tau, budget.rho,
                         config.mode, degree)
    if margin > 0.0:
        return CertDecision(Outcome.CERTIFIED, votes.top_class, margin, lower, upper)
    return CertDecision(Outcome.NOT_CERTIFIED, None, margin, lower, upper)


def max_certified_rho(votes: VoteStats, params: SmoothingParams, tau: int,
                      config: CertConfig,
                      degree: Optional[int] = None) -> CertifiedRadius:
    """Largest injected-node count still certified at the given edge budget.

    Scans upward from rho = 1 and stops at the first failure or once the
    all-removed probability drops to 1/2, past which no certificate can hold
    with a meaningful vote gap; a hard cap keeps the scan total. Abstaining
    nodes report radius 0 with the abstain flag set.
    """
    params.require_certifiable()
    if config.mode == "exclude" and (degree is None or degree < 1):
        raise ValueError("exclusion mode requires degree >= 1")
    if abstain_test(votes.top_votes, votes.runner_votes, config.alpha):
        return CertifiedRadius(rho=0, abstained=True)
    lower, upper = vote_bounds(votes, config)
    best = 0
    rho = 1
    while rho <= _RHO_SCAN_CAP:
        if prob_all_removed(params, tau, rho) <= 0.5:
            break
        if _margin_for(lower, upper, params, tau, rho, config.mode, degree) <= 0.0:
            break
        best = rho
        rho += 1
    return CertifiedRadius(rho=best, abstained=False)
