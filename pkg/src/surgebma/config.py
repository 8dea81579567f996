"""Run configuration: one INI file with sections drives the whole pipeline.

Paths inside the file resolve relative to the file's own directory. Every
artifact written by the pipeline records the SHA-256 of the config text, so
outputs are traceable to the exact configuration that produced them.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .covariates import (
    CovariateKind,
    CovariateSeries,
    annualize,
    normalize_minmax,
    read_annual_csv,
    read_monthly_csv,
    splice,
    time_covariate,
    winter_mean_nao,
)
from .hazard import DEFAULT_QUANTILE_LEVELS, DEFAULT_RETURN_PERIODS
from .models import ModelStructure, all_structures
from .sampler import ChainConfig
from .utils import sha256_of_text

SAMPLER_PROFILES = {
    "desk": dict(n_iterations=10_000, n_chains=4, burn_in=1_000, thinned_size=1_000),
    "paper": dict(n_iterations=100_000, n_chains=10, burn_in=10_000, thinned_size=10_000),
}


@dataclass
class RunConfig:
    station_csv: Path
    calibration_start: int = 1928
    calibration_end: int = 2013
    projection_year: int = 2065

    detrend_window_days: float = 365.25
    min_valid_hours: int = 12
    threshold_quantile: float = 0.99
    separation_days: int = 3

    covariate_files: dict = field(default_factory=dict)  # option name -> Path

    mle_pack: Path | None = None  # None -> packaged synthetic-station table
    stations_dir: Path | None = None

    sampler: ChainConfig = field(default_factory=ChainConfig)
    force: bool = False

    return_periods: tuple = DEFAULT_RETURN_PERIODS
    quantile_levels: tuple = DEFAULT_QUANTILE_LEVELS
    mixture_size: int = 100_000

    structures: tuple = ()  # empty -> all 13
    seed: int = 0
    output_dir: Path = Path("out")
    workers: int = 1

    raw_text: str = ""

    def __post_init__(self):
        if not self.calibration_start < self.calibration_end <= self.projection_year:
            raise ValueError("window years must satisfy start < end <= projection")
        known = {s.id for s in all_structures()}
        for sid in self.structures:
            if sid not in known:
                raise ValueError(f"unknown structure {sid!r}")

    @property
    def config_hash(self) -> str:
        return sha256_of_text(self.raw_text)

    def structure_list(self) -> list[ModelStructure]:
        if not self.structures:
            return all_structures()
        return [ModelStructure.parse(sid) for sid in self.structures]

    def out(self, *parts) -> Path:
        path = self.output_dir.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path


def _parse_floats(text: str) -> tuple:
    return tuple(float(x) for x in text.replace(" ", "").split(",") if x)


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    parser.read_string(text)
    base = path.parent

    def resolve(p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else base / q

    station = parser.get("station", "hourly_csv", fallback=None)
    if station is None:
        raise ValueError("config needs [station] hourly_csv")

    window = parser["window"] if parser.has_section("window") else {}
    pre = parser["preprocess"] if parser.has_section("preprocess") else {}
    priors = parser["priors"] if parser.has_section("priors") else {}
    proj = parser["projection"] if parser.has_section("projection") else {}
    run = parser["run"] if parser.has_section("run") else {}

    covariate_files = {}
    if parser.has_section("covariates"):
        for key, value in parser.items("covariates"):
            if value.strip():
                covariate_files[key] = resolve(value.strip())

    sampler_kwargs = dict(SAMPLER_PROFILES[parser.get("sampler", "profile", fallback="desk")])
    force = False
    if parser.has_section("sampler"):
        s = parser["sampler"]
        for key in ("n_iterations", "n_chains", "burn_in", "thinned_size"):
            if key in s:
                sampler_kwargs[key] = s.getint(key)
        for key in ("target_acceptance", "adaptation_decay", "psrf_gate"):
            if key in s:
                sampler_kwargs[key] = s.getfloat(key)
        force = s.getboolean("force", fallback=False)

    seed = int(run.get("seed", "0"))
    sampler_kwargs["seed"] = seed
    structures = tuple(
        sid for sid in run.get("structures", "all").replace(" ", "").split(",") if sid
    )
    if structures == ("all",):
        structures = ()

    mle_pack = priors.get("mle_pack", "").strip() if priors else ""
    stations_dir = priors.get("stations_dir", "").strip() if priors else ""

    return RunConfig(
        station_csv=resolve(station),
        calibration_start=int(window.get("calibration_start", "1928")),
        calibration_end=int(window.get("calibration_end", "2013")),
        projection_year=int(window.get("projection_year", "2065")),
        detrend_window_days=float(pre.get("detrend_window_days", "365.25")),
        min_valid_hours=int(pre.get("min_valid_hours", "12")),
        threshold_quantile=float(pre.get("threshold_quantile", "0.99")),
        separation_days=int(pre.get("separation_days", "3")),
        covariate_files=covariate_files,
        mle_pack=resolve(mle_pack) if mle_pack else None,
        stations_dir=resolve(stations_dir) if stations_dir else None,
        sampler=ChainConfig(**sampler_kwargs),
        force=force,
        return_periods=_parse_floats(proj.get("return_periods", "2,5,10,20,50,100,200,500,1000")),
        quantile_levels=_parse_floats(
            proj.get("quantile_levels", "0.025,0.05,0.25,0.5,0.75,0.95,0.975")
        ),
        mixture_size=int(proj.get("mixture_size", "100000")),
        structures=structures,
        seed=seed,
        output_dir=resolve(run.get("output_dir", "out")),
        workers=int(run.get("workers", "1")),
        raw_text=text,
    )


def build_covariates(
    config: RunConfig, kinds: set[CovariateKind] | None = None
) -> dict[CovariateKind, CovariateSeries]:
    """Splice and normalize covariates over the run's full horizon.

    ``kinds`` restricts which series are built (a stationary-only run needs
    no covariate files at all); the time covariate never needs a file.
    """
    start, end = config.calibration_start, config.calibration_end
    horizon = config.projection_year
    files = config.covariate_files
    if kinds is None:
        kinds = set(CovariateKind)

    out = {}
    if CovariateKind.TIME in kinds:
        out[CovariateKind.TIME] = time_covariate(start, horizon, (start, end))

    for kind, prefix in (
        (CovariateKind.TEMPERATURE, "temperature"),
        (CovariateKind.SEALEVEL, "sealevel"),
    ):
        if kind not in kinds:
            continue
        hist_path, proj_path = files.get(f"{prefix}_hist"), files.get(f"{prefix}_proj")
        if hist_path is None:
            raise ValueError(f"missing covariate file option {prefix}_hist")
        hist = annualize(read_annual_csv(hist_path).items())
        proj = annualize(read_annual_csv(proj_path).items()) if proj_path else {}
        out[kind] = _finish(kind, hist, proj, config)

    if CovariateKind.NAO in kinds:
        nao_hist_path, nao_proj_path = files.get("nao_hist"), files.get("nao_proj")
        if nao_hist_path is None:
            raise ValueError("missing covariate file option nao_hist")
        hist = winter_mean_nao(read_monthly_csv(nao_hist_path))
        proj = winter_mean_nao(read_monthly_csv(nao_proj_path)) if nao_proj_path else {}
        out[CovariateKind.NAO] = _finish(CovariateKind.NAO, hist, proj, config)
    return out


def needed_covariate_kinds(config: RunConfig) -> set[CovariateKind]:
    return {s.covariate for s in config.structure_list() if s.covariate is not None}


def _finish(kind, hist: dict, proj: dict, config: RunConfig) -> CovariateSeries:
    start, end, horizon = config.calibration_start, config.calibration_end, config.projection_year
    merged = splice(hist, proj, end) if proj else dict(hist)
    missing = [y for y in range(start, horizon + 1) if y not in merged]
    if missing:
        raise ValueError(
            f"{kind.value} covariate does not cover {missing[0]}-{missing[-1]}"
        )
    trimmed = {y: merged[y] for y in range(start, horizon + 1)}
    return normalize_minmax(trimmed, kind, (start, end))
