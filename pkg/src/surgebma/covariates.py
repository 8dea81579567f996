"""Annual covariate series that modulate the PP/GPD parameters.

Four candidate covariates are supported: calendar time, global mean surface
temperature, global mean sea level, and the winter-mean (DJF) North Atlantic
Oscillation index. Each is built by splicing an observational record onto a
model projection, then min-max normalized so the historical calibration
window maps onto [0, 1]; projection-era values may fall outside that range.
"""

from __future__ import annotations

import csv
import datetime as _dt
import enum
import logging
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

log = logging.getLogger(__name__)

NORMALIZATION_TOL = 1e-12


class CovariateKind(str, enum.Enum):
    TIME = "time"
    TEMPERATURE = "temperature"
    SEALEVEL = "sealevel"
    NAO = "nao"


@dataclass(frozen=True)
class CovariateSeries:
    """Normalized annual covariate values over contiguous years.

    ``historical_range`` is the (first, last) year span whose raw minimum and
    maximum define the normalization; within it the stored values attain 0
    and 1 exactly (to within 1e-12).
    """

    kind: CovariateKind
    years: np.ndarray  # int64, contiguous ascending
    values: np.ndarray  # float64, dimensionless
    historical_range: tuple[int, int]

    def __post_init__(self):
        if self.years.size != self.values.size or self.years.size == 0:
            raise ValueError("years and values must be equal-length and nonempty")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("covariate values must be finite")
        if np.any(np.diff(self.years) != 1):
            raise ValueError("years must be contiguous and increasing")
        lo, hi = self.historical_range
        mask = (self.years >= lo) & (self.years <= hi)
        if not np.any(mask):
            raise ValueError("historical_range lies outside the series")
        hist = self.values[mask]
        if abs(hist.min()) > NORMALIZATION_TOL or abs(hist.max() - 1.0) > NORMALIZATION_TOL:
            raise ValueError("values are not min-max normalized over historical_range")

    def value_for_year(self, year: int) -> float:
        """Exact stored annual value; parameters are constant within a year."""
        first, last = int(self.years[0]), int(self.years[-1])
        if not first <= year <= last:
            raise ValueError(f"year {year} outside covariate span {first}-{last}")
        return float(self.values[year - first])

    def values_for_years(self, years: np.ndarray) -> np.ndarray:
        years = np.asarray(years, dtype=np.int64)
        first, last = int(self.years[0]), int(self.years[-1])
        if years.size and (years.min() < first or years.max() > last):
            raise ValueError(
                f"years {years.min()}-{years.max()} not covered by "
                f"covariate span {first}-{last}"
            )
        return self.values[years - first]


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def winter_mean_nao(monthly: Iterable[tuple[int, int, float]]) -> dict[int, float]:
    """Winter (DJF) mean: Dec of the previous year with Jan and Feb of year y.

    Years missing any of the three member months are omitted with a warning.
    """
    table: dict[tuple[int, int], float] = {}
    for year, month, value in monthly:
        table[(int(year), int(month))] = float(value)
    if not table:
        raise ValueError("empty input")

    years = sorted({y for (y, _m) in table})
    out: dict[int, float] = {}
    skipped = []
    for y in range(years[0], years[-1] + 2):
        members = [(y - 1, 12), (y, 1), (y, 2)]
        if all(m in table for m in members):
            out[y] = float(np.mean([table[m] for m in members]))
        elif any(m in table for m in members):
            skipped.append(y)
    if skipped:
        log.warning("winter_mean_nao: omitted years with missing months: %s", skipped)
    return out


def annualize(series: Iterable[tuple[object, float]]) -> dict[int, float]:
    """Per-year arithmetic mean; passes annual inputs through unchanged."""
    sums: dict[int, float] = {}
    counts: dict[int, int] = {}
    n = 0
    for t, v in series:
        n += 1
        if isinstance(t, (_dt.date, _dt.datetime)):
            year = t.year
        elif isinstance(t, np.datetime64):
            year = int(t.astype("datetime64[Y]").astype(np.int64)) + 1970
        else:
            year = int(t)
        sums[year] = sums.get(year, 0.0) + float(v)
        counts[year] = counts.get(year, 0) + 1
    if n == 0:
        raise ValueError("empty input")
    return {y: sums[y] / counts[y] for y in sorted(sums)}


def splice(
    historical: Mapping[int, float], projection: Mapping[int, float], switch_year: int
) -> dict[int, float]:
    """Concatenate records; historical values win through ``switch_year``."""
    hist_years = sorted(historical)
    if not hist_years or hist_years[-1] < switch_year:
        raise ValueError(f"historical record does not reach switch year {switch_year}")
    out = {y: float(historical[y]) for y in hist_years if y <= switch_year}
    for y in sorted(projection):
        if y > switch_year:
            out[y] = float(projection[y])
    years = sorted(out)
    gaps = [y for a, b in zip(years, years[1:]) for y in range(a + 1, b)]
    if gaps:
        raise ValueError(f"coverage gap at years {gaps[:5]} after splicing")
    return dict(sorted(out.items()))


def normalize_minmax(
    series: Mapping[int, float], kind: CovariateKind, historical_range: tuple[int, int]
) -> CovariateSeries:
    """Affine map sending the historical min/max to 0/1, applied to all years."""
    years = np.array(sorted(series), dtype=np.int64)
    values = np.array([series[int(y)] for y in years], dtype=float)
    lo, hi = historical_range
    mask = (years >= lo) & (years <= hi)
    if not np.any(mask):
        raise ValueError("historical_range lies outside the series")
    vmin, vmax = values[mask].min(), values[mask].max()
    if vmax <= vmin:
        raise ValueError("degenerate covariate: constant over historical range")
    return CovariateSeries(kind, years, (values - vmin) / (vmax - vmin), (lo, hi))


def time_covariate(
    first_year: int, last_year: int, historical_range: tuple[int, int]
) -> CovariateSeries:
    """The identity covariate: calendar year, normalized on the historical window."""
    years = {y: float(y) for y in range(first_year, last_year + 1)}
    return normalize_minmax(years, CovariateKind.TIME, historical_range)


# ---------------------------------------------------------------------------
# file ingest
# ---------------------------------------------------------------------------


def read_annual_csv(path) -> dict[int, float]:
    """Read ``year,value`` rows."""
    out: dict[int, float] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError("empty input")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                out[int(row[0])] = float(row[1])
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: bad row {row!r}") from exc
    if not out:
        raise ValueError("empty input")
    return out


def read_monthly_csv(path) -> list[tuple[int, int, float]]:
    """Read ``year,month,value`` rows (monthly NAO input)."""
    out: list[tuple[int, int, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError("empty input")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                out.append((int(row[0]), int(row[1]), float(row[2])))
            except (ValueError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: bad row {row!r}") from exc
    if not out:
        raise ValueError("empty input")
    return out
