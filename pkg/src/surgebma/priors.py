"""Prior elicitation: per-structure maximum-likelihood fits across stations,
distilled into independent normal or gamma priors per parameter.

The family follows each parameter's support: gamma for the half-infinite
ones (the Poisson rate intercept, and the GPD scale where it is a direct
scale), normal for everything with infinite support (slopes, shape, and the
log-scale intercept of the NS2/NS3 structures). Gamma parameters are set by
the method of moments, which is deterministic and robust for the small
sample of station estimates involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln

from .covariates import CovariateSeries
from .models import (
    ACTIVE_PARAMS,
    ModelStructure,
    NonstatLevel,
    ParameterVector,
    make_loglik,
)
from .preprocess import ExceedanceSet
from .utils import dump_json, load_json

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PriorSpec:
    """One marginal prior: normal(mean, sd) or gamma(shape, rate)."""

    family: str  # "normal" | "gamma"
    p1: float  # mean | shape
    p2: float  # sd | rate

    def __post_init__(self):
        if self.family not in ("normal", "gamma"):
            raise ValueError(f"unknown family {self.family!r}")
        if self.p2 <= 0 or (self.family == "gamma" and self.p1 <= 0):
            raise ValueError("family parameters must be positive")

    def logpdf(self, x: float) -> float:
        if self.family == "normal":
            z = (x - self.p1) / self.p2
            return -0.5 * (LOG_2PI + z * z) - math.log(self.p2)
        if x <= 0:
            return -math.inf
        a, b = self.p1, self.p2
        return a * math.log(b) - float(gammaln(a)) + (a - 1.0) * math.log(x) - b * x

    def to_dict(self) -> dict:
        return {"family": self.family, "p1": self.p1, "p2": self.p2}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSpec":
        return cls(d["family"], float(d["p1"]), float(d["p2"]))


def prior_family_for(param: str, level: NonstatLevel) -> str:
    """Support rule: gamma where the support is half-infinite, else normal."""
    if param == "lam0":
        return "gamma"
    if param == "sig0" and level in (NonstatLevel.ST, NonstatLevel.NS1):
        return "gamma"
    return "normal"


@dataclass(frozen=True)
class PriorSet:
    """Per-parameter priors for the active parameters of one structure."""

    structure: ModelStructure
    specs: dict[str, PriorSpec]

    def __post_init__(self):
        missing = [p for p in self.structure.active_params if p not in self.specs]
        if missing:
            raise ValueError(f"missing prior for active parameter(s): {missing}")
        for name, spec in self.specs.items():
            want = prior_family_for(name, self.structure.level)
            if spec.family != want:
                raise ValueError(f"{name} requires a {want} prior, got {spec.family}")

    def logpdf(self, theta: ParameterVector) -> float:
        total = 0.0
        for name in self.structure.active_params:
            total += self.specs[name].logpdf(getattr(theta, name))
            if total == -math.inf:
                return -math.inf
        return total


def fit_prior(samples, family: str) -> PriorSpec:
    """Fit one marginal prior to a set of station MLEs.

    Normal priors take the sample mean and standard deviation; gamma priors
    use method-of-moments (shape = m^2/v, rate = m/v).
    """
    arr = np.asarray(samples, dtype=float)
    if arr.size < 3:
        raise ValueError("need at least 3 samples to fit a prior")
    m = float(arr.mean())
    v = float(arr.var(ddof=1))
    if v <= 0:
        raise ValueError("degenerate prior: zero variance across samples")
    if family == "normal":
        return PriorSpec("normal", m, math.sqrt(v))
    if family == "gamma":
        if np.any(arr <= 0):
            raise ValueError("gamma prior requires strictly positive samples")
        return PriorSpec("gamma", m * m / v, m / v)
    raise ValueError(f"unknown family {family!r}")


# ---------------------------------------------------------------------------
# maximum likelihood
# ---------------------------------------------------------------------------


def _moment_start(
    structure: ModelStructure, data: ExceedanceSet
) -> np.ndarray:
    total_events = data.n_events
    total_days = sum(b.duration_days for b in data.years)
    lam0 = max(total_events / max(total_days, 1.0), 1e-4)
    excess = np.array([r.height - data.threshold for r in data.all_records()])
    spread = float(excess.std()) if excess.size > 1 else 0.1
    spread = max(spread, 1e-3)
    if structure.level in (NonstatLevel.ST, NonstatLevel.NS1):
        sig0 = spread
    else:
        sig0 = math.log(spread)
    start = {"lam0": lam0, "lam1": 0.0, "sig0": sig0, "sig1": 0.0, "xi0": 0.05, "xi1": 0.0}
    return np.array([start[p] for p in structure.active_params])


def mle_fit(
    structure: ModelStructure,
    data: ExceedanceSet,
    cov: CovariateSeries | None,
    n_restarts: int = 5,
    rng: np.random.Generator | None = None,
) -> ParameterVector:
    """Maximize the log-likelihood by Nelder-Mead simplex search with restarts.

    Each restart perturbs the moment-based start; the best converged optimum
    wins. Convergence requires the simplex log-likelihood spread to fall
    below 1e-8.
    """
    if data.n_events == 0:
        raise ValueError("no exceedances to fit")
    rng = rng or np.random.default_rng(0)
    loglik = make_loglik(structure, data, cov)
    level = structure.level

    def objective(x: np.ndarray) -> float:
        return -loglik(ParameterVector.from_active(level, x))

    base = _moment_start(structure, data)
    best_x, best_f = None, math.inf
    for k in range(n_restarts):
        x0 = base.copy()
        if k > 0:
            scale = np.maximum(np.abs(base), 0.05)
            x0 = base + 0.3 * scale * rng.standard_normal(base.size)
            # keep positivity constraints satisfied at the start point
            names = structure.active_params
            for i, name in enumerate(names):
                if name == "lam0" or (
                    name == "sig0" and level in (NonstatLevel.ST, NonstatLevel.NS1)
                ):
                    x0[i] = abs(x0[i]) or base[i]
        if not math.isfinite(objective(x0)):
            continue
        res = minimize(
            objective,
            x0,
            method="Nelder-Mead",
            options={"xatol": 1e-7, "fatol": 1e-8, "maxiter": 20000, "maxfev": 20000},
        )
        # one chained restart from the solution polishes flat directions
        res = minimize(
            objective,
            res.x,
            method="Nelder-Mead",
            options={"xatol": 1e-9, "fatol": 1e-10, "maxiter": 20000, "maxfev": 20000},
        )
        if res.fun < best_f:
            best_x, best_f = res.x, res.fun
    if best_x is None:
        raise ValueError("no feasible start")
    return ParameterVector.from_active(level, best_x)


# ---------------------------------------------------------------------------
# prior sets from MLE tables
# ---------------------------------------------------------------------------


def fit_prior_set(structure: ModelStructure, estimates: np.ndarray) -> PriorSet:
    """Fit the full per-parameter prior set from a (stations x params) table."""
    names = structure.active_params
    estimates = np.asarray(estimates, dtype=float)
    if estimates.ndim != 2 or estimates.shape[1] != len(names):
        raise ValueError(f"expected (n, {len(names)}) estimate table for {structure.id}")
    specs = {}
    for j, name in enumerate(names):
        specs[name] = fit_prior(estimates[:, j], prior_family_for(name, structure.level))
    return PriorSet(structure, specs)


def fit_all_priors(mle_table: dict[str, np.ndarray]) -> dict[str, PriorSet]:
    """Fit priors for every structure present in an MLE table keyed by id."""
    out = {}
    for sid, estimates in mle_table.items():
        structure = ModelStructure.parse(sid)
        out[sid] = fit_prior_set(structure, estimates)
    return out


def save_priors(priors: dict[str, PriorSet], path, meta: dict | None = None) -> None:
    payload = {
        "structures": {
            sid: {name: spec.to_dict() for name, spec in ps.specs.items()}
            for sid, ps in priors.items()
        },
        "meta": meta or {},
    }
    dump_json(payload, path)


def load_priors(path) -> dict[str, PriorSet]:
    payload = load_json(path)
    out = {}
    for sid, specs in payload["structures"].items():
        structure = ModelStructure.parse(sid)
        out[sid] = PriorSet(
            structure, {name: PriorSpec.from_dict(d) for name, d in specs.items()}
        )
    return out


def save_mle_table(table: dict[str, np.ndarray], path, meta: dict | None = None) -> None:
    payload = {
        "structures": {
            sid: {
                "param_names": list(ACTIVE_PARAMS[ModelStructure.parse(sid).level]),
                "estimates": np.asarray(est, dtype=float).tolist(),
            }
            for sid, est in table.items()
        },
        "meta": meta or {},
    }
    dump_json(payload, path)


def load_mle_table(path) -> dict[str, np.ndarray]:
    payload = load_json(path)
    return {
        sid: np.asarray(entry["estimates"], dtype=float)
        for sid, entry in payload["structures"].items()
    }
