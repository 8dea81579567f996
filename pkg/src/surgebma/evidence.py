"""Marginal likelihood by bridge sampling, and Bayesian model averaging weights.

The optimal-bridge fixed point of Meng and Wong (1996) is iterated between
the posterior ensemble and a moment-matched multivariate normal proposal.
Half of the ensemble fits the proposal, the other half enters the iteration,
which avoids using the same draws twice. Model weights follow from the log
evidences under a (default uniform) prior over the candidate structures.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from .covariates import CovariateKind
from .models import ModelStructure, NonstatLevel, all_structures
from .sampler import PosteriorEnsemble
from .utils import dump_json, format_float

log = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-12


@dataclass(frozen=True)
class EvidenceEstimate:
    structure: ModelStructure
    log_evidence: float
    iterations_used: int
    relative_change_at_stop: float

    def __post_init__(self):
        if not math.isfinite(self.log_evidence):
            raise ValueError(f"non-finite log evidence for {self.structure.id}")


@dataclass(frozen=True)
class BmaWeights:
    """Posterior model probabilities; they sum to one by construction."""

    weights: dict[str, float]
    prior: dict[str, float]

    def __post_init__(self):
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-9 or any(w < 0 for w in self.weights.values()):
            raise ValueError("weights must be nonnegative and sum to 1")


def _mvn_logpdf(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Log density of N(mean, L L^T) for rows of x."""
    d = mean.size
    y = solve_triangular(chol, (x - mean).T, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * math.log(2.0 * math.pi) + logdet + np.sum(y * y, axis=0))


def bridge_evidence(
    posterior: PosteriorEnsemble,
    log_density: Callable[[np.ndarray], float],
    rng: np.random.Generator,
    tol: float = 1e-10,
    max_iter: int = 1000,
    jitter: float = 1e-10,
) -> EvidenceEstimate:
    """Estimate log p(x | M) from a posterior ensemble by bridge sampling.

    ``log_density`` evaluates the unnormalized posterior on one row of active
    parameters. The first half of the ensemble moment-matches the normal
    proposal; the second half and an equal number of proposal draws feed the
    fixed-point iteration, which stops once the relative change of the
    evidence estimate drops below ``tol``.
    """
    draws = np.asarray(posterior.draws, dtype=float)
    if draws.shape[0] < 1000:
        raise ValueError("need an ensemble of at least 1000 draws")

    n_fit = draws.shape[0] // 2
    fit, it = draws[:n_fit], draws[n_fit:]
    mean = fit.mean(axis=0)
    cov = np.cov(fit, rowvar=False).reshape(fit.shape[1], fit.shape[1])
    cov = cov + jitter * np.eye(cov.shape[0])
    if not np.all(np.isfinite(cov)):
        raise ValueError("non-finite proposal covariance")
    chol = np.linalg.cholesky(cov)

    n1 = it.shape[0]
    n2 = n1
    proposal = mean + rng.standard_normal((n2, mean.size)) @ chol.T

    def logq(rows: np.ndarray) -> np.ndarray:
        return np.array([log_density(r) for r in rows])

    l1 = logq(it) - _mvn_logpdf(it, mean, chol)  # posterior-side log ratios
    l2 = logq(proposal) - _mvn_logpdf(proposal, mean, chol)  # proposal-side
    if np.any(~np.isfinite(l1)):
        raise ValueError("non-finite posterior density on ensemble draws")

    lstar = float(np.median(l1))
    s1 = n1 / (n1 + n2)
    s2 = n2 / (n1 + n2)
    r = 1.0
    rel = math.inf
    iterations = 0
    for iterations in range(1, max_iter + 1):
        # written to stay finite when the exponentials overflow either way
        with np.errstate(over="ignore"):
            num = 1.0 / (s1 + s2 * r * np.exp(-(l2 - lstar)))
            den = 1.0 / (s1 * np.exp(l1 - lstar) + s2 * r)
        r_new = (np.sum(num) / n2) / (np.sum(den) / n1)
        if not math.isfinite(r_new) or r_new <= 0.0:
            raise ValueError(
                "bridge iteration collapsed; proposal does not overlap the posterior"
            )
        rel = abs(r_new - r) / r_new
        r = r_new
        if rel < tol:
            break
    else:
        log.warning(
            "bridge sampling for %s stopped at relative change %.3e after %d iterations",
            posterior.structure.id,
            rel,
            max_iter,
        )
    return EvidenceEstimate(posterior.structure, math.log(r) + lstar, iterations, rel)


# ---------------------------------------------------------------------------
# model weights
# ---------------------------------------------------------------------------


def bma_weights(
    evidences: list[EvidenceEstimate], model_prior: Mapping[str, float] | None = None
) -> BmaWeights:
    """Normalized posterior model probabilities, computed in log space."""
    if not evidences:
        raise ValueError("no evidence estimates supplied")
    ids = [e.structure.id for e in evidences]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate structures in evidence list")
    if model_prior is None:
        prior = {sid: 1.0 / len(ids) for sid in ids}
    else:
        if any(model_prior[sid] <= 0 for sid in ids):
            raise ValueError("model prior probabilities must be positive")
        total = sum(model_prior[sid] for sid in ids)
        prior = {sid: model_prior[sid] / total for sid in ids}
    logw = np.array([e.log_evidence + math.log(prior[e.structure.id]) for e in evidences])
    weights = np.exp(logw - logsumexp(logw))
    return BmaWeights(dict(zip(ids, weights)), prior)


def aggregate_by_covariate(weights: BmaWeights) -> dict[str, float]:
    """Total weight per covariate (its NS1+NS2+NS3 structures) plus ST alone."""
    expected = {s.id for s in all_structures()}
    if set(weights.weights) != expected:
        raise ValueError("aggregation requires the full 13-structure weight set")
    out: dict[str, float] = {kind.value: 0.0 for kind in CovariateKind}
    out["ST"] = weights.weights["ST"]
    for s in all_structures():
        if s.level is not NonstatLevel.ST:
            out[s.covariate.value] += weights.weights[s.id]
    return out


def weights_by_level_within_covariate(
    evidences: list[EvidenceEstimate],
) -> dict[str, dict[str, float]]:
    """Per-covariate BMA over its own four candidates (ST, NS1, NS2, NS3).

    Each covariate's four structures are renormalized in isolation; this is
    the bar-chart layout with one panel per covariate.
    """
    by_id = {e.structure.id: e for e in evidences}
    out: dict[str, dict[str, float]] = {}
    for kind in CovariateKind:
        subset = [by_id["ST"]]
        for level in (NonstatLevel.NS1, NonstatLevel.NS2, NonstatLevel.NS3):
            subset.append(by_id[ModelStructure(level, kind).id])
        w = bma_weights(subset)
        out[kind.value] = {
            "ST": w.weights["ST"],
            **{
                lvl.value: w.weights[ModelStructure(lvl, kind).id]
                for lvl in (NonstatLevel.NS1, NonstatLevel.NS2, NonstatLevel.NS3)
            },
        }
    return out


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def save_evidence_report(
    evidences: list[EvidenceEstimate], weights: BmaWeights, path
) -> None:
    payload = {
        e.structure.id: {
            "log_evidence": e.log_evidence,
            "iterations_used": e.iterations_used,
            "relative_change_at_stop": e.relative_change_at_stop,
            "weight": weights.weights[e.structure.id],
        }
        for e in evidences
    }
    dump_json(payload, path)


def write_aggregated_weights_csv(aggregated: dict[str, float], path) -> None:
    """One row per covariate plus the stationary model, in report order."""
    order = [k.value for k in CovariateKind] + ["ST"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["covariate", "bma_weight"])
        for key in order:
            writer.writerow([key, format_float(aggregated[key])])
