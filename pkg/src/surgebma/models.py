"""Candidate PP/GPD model structures and their log-likelihood/posterior.

The event magnitudes above a fixed threshold follow a generalized Pareto
distribution while a Poisson process governs how many events occur per year.
Nonstationarity enters through a covariate phi(t) that shifts the Poisson
rate, the GPD scale (through its log), and the GPD shape linearly:

    lam(t) = lam0 + lam1 * phi(t)
    sig(t) = sig0                     (ST, NS1; direct positive scale)
    sig(t) = exp(sig0 + sig1*phi(t))  (NS2, NS3; sig0 is a log-scale intercept)
    xi(t)  = xi0 + xi1 * phi(t)

Thirteen candidate structures arise from four nonstationarity levels crossed
with four covariates (the fully stationary structure is shared). All
probability math is done in log space.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np
from scipy.special import gammaln

from .covariates import CovariateKind, CovariateSeries
from .preprocess import ExceedanceSet

if TYPE_CHECKING:
    from .priors import PriorSet

XI_EPS = 1e-8  # below this |xi| the exponential limit of the GPD is used


class NonstatLevel(str, enum.Enum):
    ST = "ST"  # fully stationary
    NS1 = "NS1"  # nonstationary Poisson rate
    NS2 = "NS2"  # nonstationary rate and scale
    NS3 = "NS3"  # nonstationary rate, scale and shape


ACTIVE_PARAMS: dict[NonstatLevel, tuple[str, ...]] = {
    NonstatLevel.ST: ("lam0", "sig0", "xi0"),
    NonstatLevel.NS1: ("lam0", "lam1", "sig0", "xi0"),
    NonstatLevel.NS2: ("lam0", "lam1", "sig0", "sig1", "xi0"),
    NonstatLevel.NS3: ("lam0", "lam1", "sig0", "sig1", "xi0", "xi1"),
}


@dataclass(frozen=True)
class ModelStructure:
    """Nonstationarity level plus covariate identity; covariate is None iff ST."""

    level: NonstatLevel
    covariate: CovariateKind | None

    def __post_init__(self):
        if (self.covariate is None) != (self.level is NonstatLevel.ST):
            raise ValueError("covariate must be absent exactly for the ST level")

    @property
    def id(self) -> str:
        if self.level is NonstatLevel.ST:
            return "ST"
        return f"{self.level.value}-{self.covariate.value}"

    @property
    def active_params(self) -> tuple[str, ...]:
        return ACTIVE_PARAMS[self.level]

    @classmethod
    def parse(cls, text: str) -> "ModelStructure":
        if text == "ST":
            return cls(NonstatLevel.ST, None)
        level, _, cov = text.partition("-")
        return cls(NonstatLevel(level), CovariateKind(cov))


def all_structures() -> list[ModelStructure]:
    """The 13 candidates in canonical order: ST, then NS1/NS2/NS3 per covariate."""
    out = [ModelStructure(NonstatLevel.ST, None)]
    for level in (NonstatLevel.NS1, NonstatLevel.NS2, NonstatLevel.NS3):
        for kind in CovariateKind:
            out.append(ModelStructure(level, kind))
    return out


@dataclass(frozen=True)
class ParameterVector:
    """Full parameter set; entries inactive for a given level stay at 0."""

    lam0: float = 0.0
    lam1: float = 0.0
    sig0: float = 0.0
    sig1: float = 0.0
    xi0: float = 0.0
    xi1: float = 0.0

    def active(self, level: NonstatLevel) -> np.ndarray:
        return np.array([getattr(self, p) for p in ACTIVE_PARAMS[level]], dtype=float)

    @classmethod
    def from_active(cls, level: NonstatLevel, values) -> "ParameterVector":
        names = ACTIVE_PARAMS[level]
        values = np.asarray(values, dtype=float)
        if values.shape != (len(names),):
            raise ValueError(f"expected {len(names)} values for {level.value}")
        return cls(**dict(zip(names, values)))


@dataclass(frozen=True)
class EffectiveParams:
    """Year-resolved (rate, scale, shape) triple."""

    lam: float  # exceedances per day
    sig: float  # meters
    xi: float  # dimensionless


def params_at(theta: ParameterVector, level: NonstatLevel, phi: float) -> EffectiveParams:
    """Resolve the effective PP/GPD parameters at covariate value ``phi``."""
    lam = theta.lam0 + theta.lam1 * phi
    if level in (NonstatLevel.ST, NonstatLevel.NS1):
        sig = theta.sig0
    else:
        sig = math.exp(theta.sig0 + theta.sig1 * phi)
    xi = theta.xi0 + theta.xi1 * phi
    return EffectiveParams(lam, sig, xi)


# ---------------------------------------------------------------------------
# densities
# ---------------------------------------------------------------------------


def gpd_logpdf(x: float, mu: float, sig: float, xi: float) -> float:
    """Log density of the generalized Pareto distribution at ``x``.

    Uses the exponential limit for |xi| < 1e-8 to avoid cancellation, and
    returns -inf above the bounded upper endpoint when xi < 0.
    """
    if sig <= 0 or x < mu:
        raise ValueError("outside support")
    z = (x - mu) / sig
    if abs(xi) < XI_EPS:
        return -math.log(sig) - z
    t = xi * z
    if 1.0 + t <= 0.0:
        return -math.inf
    return -math.log(sig) - (1.0 + 1.0 / xi) * math.log1p(t)


def poisson_logpmf(n: int, lam: float, dt: float) -> float:
    """Log pmf of a Poisson count with rate ``lam`` per day over ``dt`` days."""
    if lam <= 0 or dt <= 0:
        raise ValueError("lam and dt must be positive")
    if n < 0:
        raise ValueError("n must be nonnegative")
    mean = lam * dt
    return n * math.log(mean) - mean - float(gammaln(n + 1))


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LikelihoodData:
    """Exceedance data flattened into arrays for fast repeated evaluation."""

    threshold: float
    counts: np.ndarray  # events per year block
    durations: np.ndarray  # observed days per year block
    phi: np.ndarray  # covariate value per year block
    excess: np.ndarray  # event height - threshold, flattened
    phi_event: np.ndarray  # covariate value per event
    lgamma_counts: float  # sum of log(n_i!), independent of parameters

    @classmethod
    def build(
        cls,
        data: ExceedanceSet,
        cov: CovariateSeries | None,
        structure: ModelStructure,
    ) -> "LikelihoodData":
        years = np.array([b.year for b in data.years], dtype=np.int64)
        counts = np.array([b.count for b in data.years], dtype=np.int64)
        durations = np.array([b.duration_days for b in data.years], dtype=float)
        if structure.level is NonstatLevel.ST:
            phi = np.zeros(years.size)
        else:
            if cov is None:
                raise ValueError("nonstationary structure requires a covariate series")
            phi = cov.values_for_years(years)  # raises on coverage gaps
        heights = np.array([r.height for b in data.years for r in b.records], dtype=float)
        phi_event = np.repeat(phi, counts)
        return cls(
            data.threshold,
            counts,
            durations,
            phi,
            heights - data.threshold,
            phi_event,
            float(np.sum(gammaln(counts + 1))),
        )


def _loglik_from_arrays(theta: ParameterVector, level: NonstatLevel, d: LikelihoodData) -> float:
    lam = theta.lam0 + theta.lam1 * d.phi
    if np.any(lam <= 0):
        return -math.inf

    mean = lam * d.durations
    pois = float(np.sum(d.counts * np.log(mean) - mean)) - d.lgamma_counts

    direct_scale = level in (NonstatLevel.ST, NonstatLevel.NS1)
    if direct_scale:
        if theta.sig0 <= 0:
            return -math.inf
        z = d.excess / theta.sig0
        log_sig_sum = d.excess.size * math.log(theta.sig0)
    else:
        log_sig = theta.sig0 + theta.sig1 * d.phi_event
        z = d.excess * np.exp(-log_sig)
        log_sig_sum = float(np.sum(log_sig))

    if theta.xi1 == 0.0:
        xi = theta.xi0
        if abs(xi) < XI_EPS:
            gpd_sum = -float(np.sum(z))
        else:
            t = xi * z
            if np.any(1.0 + t <= 0.0):
                return -math.inf
            gpd_sum = -(1.0 + 1.0 / xi) * float(np.sum(np.log1p(t)))
    else:
        xi_ev = theta.xi0 + theta.xi1 * d.phi_event
        t = xi_ev * z
        if np.any(1.0 + t <= 0.0):
            return -math.inf
        small = np.abs(xi_ev) < XI_EPS
        terms = np.where(
            small,
            -z,
            -(1.0 + 1.0 / np.where(small, 1.0, xi_ev)) * np.log1p(np.where(small, 0.0, t)),
        )
        gpd_sum = float(np.sum(terms))
    return pois + gpd_sum - log_sig_sum


def make_loglik(
    structure: ModelStructure, data: ExceedanceSet, cov: CovariateSeries | None
) -> Callable[[ParameterVector], float]:
    """Precompute the data arrays and return a fast theta -> log L closure."""
    arrays = LikelihoodData.build(data, cov, structure)
    level = structure.level

    def loglik(theta: ParameterVector) -> float:
        return _loglik_from_arrays(theta, level, arrays)

    return loglik


def log_likelihood(
    theta: ParameterVector,
    structure: ModelStructure,
    data: ExceedanceSet,
    cov: CovariateSeries | None,
) -> float:
    """Joint log-likelihood: yearly Poisson counts plus per-event GPD terms.

    Years without events contribute only their Poisson factor. Returns -inf
    whenever any year has a nonpositive rate or scale, or an event falls
    outside the GPD support.
    """
    return _loglik_from_arrays(theta, structure.level, LikelihoodData.build(data, cov, structure))


def log_prior(theta: ParameterVector, structure: ModelStructure, priors: "PriorSet") -> float:
    """Sum of per-parameter prior log densities over the active parameters."""
    if priors.structure.id != structure.id:
        raise ValueError(
            f"prior set fitted for {priors.structure.id}, not {structure.id}"
        )
    return priors.logpdf(theta)


def make_logpost(
    structure: ModelStructure,
    data: ExceedanceSet,
    cov: CovariateSeries | None,
    priors: "PriorSet",
) -> Callable[[ParameterVector], float]:
    """Unnormalized log-posterior closure; -inf from either factor propagates."""
    loglik = make_loglik(structure, data, cov)
    if priors.structure.id != structure.id:
        raise ValueError(f"prior set fitted for {priors.structure.id}, not {structure.id}")

    def logpost(theta: ParameterVector) -> float:
        lp = priors.logpdf(theta)
        if lp == -math.inf:
            return -math.inf
        return lp + loglik(theta)

    return logpost


def log_posterior(
    theta: ParameterVector,
    structure: ModelStructure,
    data: ExceedanceSet,
    cov: CovariateSeries | None,
    priors: "PriorSet",
) -> float:
    return make_logpost(structure, data, cov, priors)(theta)


def make_logpost_on_active(
    structure: ModelStructure,
    data: ExceedanceSet,
    cov: CovariateSeries | None,
    priors: "PriorSet",
) -> Callable[[np.ndarray], float]:
    """Like ``make_logpost`` but taking the active-parameter row directly."""
    logpost = make_logpost(structure, data, cov, priors)
    level = structure.level

    def on_active(row: np.ndarray) -> float:
        return logpost(ParameterVector.from_active(level, row))

    return on_active
