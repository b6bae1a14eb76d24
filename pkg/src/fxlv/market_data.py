"""Market inputs (curves, volatility quotes) and the option deals priced against them.

Dates are plain :class:`datetime.date` values; every year fraction in the
package is ACT/365 fixed.
"""

from __future__ import annotations

import csv
import json
import math
from bisect import bisect_right
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

DAYS_PER_YEAR = 365.0

QUOTE_KINDS = ("ATMF", "25C", "25P", "10C", "10P")


class MarketDataError(ValueError):
    """Inconsistent or out-of-range market data."""


class InputError(ValueError):
    """A file could not be parsed; the message names the file and line."""


def parse_date(value: str | int | date) -> date:
    """Parse ``YYYYMMDD`` (string or int) into a date."""
    if isinstance(value, date):
        return value
    text = str(value).strip()
    try:
        return datetime.strptime(text, "%Y%m%d").date()
    except ValueError:
        raise ValueError(f"bad date {value!r}, expected YYYYMMDD") from None


def format_date(d: date) -> str:
    return d.strftime("%Y%m%d")


def year_fraction(d1: date, d2: date) -> float:
    """ACT/365F year fraction between two dates, ``d1 <= d2``."""
    if d1 > d2:
        raise ValueError(f"year_fraction needs d1 <= d2, got {d1} > {d2}")
    return (d2 - d1).days / DAYS_PER_YEAR


def _check_pillars(dates: Sequence[date], values: Sequence[float], what: str) -> None:
    if len(dates) == 0 or len(dates) != len(values):
        raise MarketDataError(f"{what}: need matching non-empty dates and values")
    for a, b in zip(dates, dates[1:]):
        if b <= a:
            raise MarketDataError(f"{what}: pillar dates must be strictly increasing ({a}, {b})")
    for d, v in zip(dates, values):
        if not (v > 0.0 and math.isfinite(v)):
            raise MarketDataError(f"{what}: non-positive value {v} at {d}")


class _LogLinearCurve:
    """Log-linear interpolation in calendar days on positive pillar values."""

    valuation: date
    dates: tuple[date, ...]
    values: tuple[float, ...]

    def _setup(self) -> None:
        days = np.array([(d - self.valuation).days for d in self.dates], dtype=float)
        object.__setattr__(self, "_days", days)
        object.__setattr__(self, "_logs", np.log(np.asarray(self.values, dtype=float)))

    @property
    def last_date(self) -> date:
        return self.dates[-1]

    def covers(self, d: date) -> bool:
        return self.dates[0] <= d <= self.dates[-1]

    def _interp_days(self, days: float) -> float:
        grid = self._days
        if days < grid[0] or days > grid[-1]:
            raise MarketDataError(
                f"{type(self).__name__}: day offset {days:g} outside pillar range "
                f"[{grid[0]:g}, {grid[-1]:g}]"
            )
        k = bisect_right(grid.tolist(), days) - 1
        if k >= len(grid) - 1:
            return self.values[-1]
        if days == grid[k]:
            return self.values[k]
        w = (days - grid[k]) / (grid[k + 1] - grid[k])
        # anchored on the left pillar so flat segments stay exact
        return self.values[k] * math.exp(w * (self._logs[k + 1] - self._logs[k]))

    def value_at(self, d: date) -> float:
        return self._interp_days(float((d - self.valuation).days))

    def value_at_time(self, t: float) -> float:
        """Value at a year fraction ``t`` from valuation (ACT/365)."""
        return self._interp_days(t * DAYS_PER_YEAR)

    def values_at_times(self, t: np.ndarray) -> np.ndarray:
        days = np.asarray(t, dtype=float) * DAYS_PER_YEAR
        if np.any(days < self._days[0] - 1e-9) or np.any(days > self._days[-1] + 1e-9):
            raise MarketDataError(f"{type(self).__name__}: times outside pillar range")
        grid = self._days
        if grid.size == 1:
            return np.full(days.shape, self.values[0])
        k = np.clip(np.searchsorted(grid, days, side="right") - 1, 0, grid.size - 2)
        w = np.clip((days - grid[k]) / (grid[k + 1] - grid[k]), 0.0, 1.0)
        base = np.asarray(self.values, dtype=float)
        return base[k] * np.exp(w * (self._logs[k + 1] - self._logs[k]))


@dataclass(frozen=True)
class ForwardCurve(_LogLinearCurve):
    """FX forward curve, currency2 per currency1; the first pillar is spot."""

    valuation: date
    dates: tuple[date, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        _check_pillars(self.dates, self.values, "ForwardCurve")
        if self.dates[0] != self.valuation:
            raise MarketDataError("ForwardCurve: first pillar must be the valuation date (spot)")
        self._setup()

    @property
    def spot(self) -> float:
        return self.values[0]


@dataclass(frozen=True)
class DiscountCurve(_LogLinearCurve):
    """Discount factors in currency2, DF(valuation) = 1."""

    valuation: date
    dates: tuple[date, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "dates", tuple(self.dates))
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        _check_pillars(self.dates, self.values, "DiscountCurve")
        if self.dates[0] != self.valuation or abs(self.values[0] - 1.0) > 1e-14:
            raise MarketDataError("DiscountCurve: DF at the valuation date must be 1")
        if any(v > 1.0 + 1e-12 for v in self.values):
            raise MarketDataError("DiscountCurve: discount factors must lie in (0, 1]")
        self._setup()


def forward_at(curve: ForwardCurve, t: date) -> float:
    return curve.value_at(t)


def df_at(curve: DiscountCurve, t: date) -> float:
    return curve.value_at(t)


@dataclass(frozen=True)
class VolQuote:
    tenor: str
    expiry: date
    kind: str
    vol: float  # decimal per annum

    def __post_init__(self) -> None:
        if self.kind not in QUOTE_KINDS:
            raise MarketDataError(f"VolQuote {self.tenor}: unknown kind {self.kind!r}")
        if not self.vol > 0.0:
            raise MarketDataError(f"VolQuote {self.tenor} {self.kind}: volatility must be > 0")

    @property
    def label(self) -> str:
        return f"{self.tenor}_{self.kind}"


@dataclass(frozen=True)
class MarketSnapshot:
    forward: ForwardCurve
    discount: DiscountCurve
    quotes: tuple[VolQuote, ...]
    valuation: date

    def __post_init__(self) -> None:
        object.__setattr__(self, "quotes", tuple(self.quotes))
        if self.forward.valuation != self.valuation or self.discount.valuation != self.valuation:
            raise MarketDataError("curves and snapshot disagree on the valuation date")
        for q in self.quotes:
            if q.expiry < self.valuation:
                raise MarketDataError(f"quote {q.label} expires before valuation")
            if not (self.forward.covers(q.expiry) and self.discount.covers(q.expiry)):
                raise MarketDataError(f"quote {q.label}: expiry {q.expiry} not covered by curves")

    def tenors(self) -> list[str]:
        """Tenor labels ordered by expiry."""
        seen: dict[str, date] = {}
        for q in self.quotes:
            seen.setdefault(q.tenor, q.expiry)
        return sorted(seen, key=lambda t: seen[t])

    def quote(self, tenor: str, kind: str) -> VolQuote | None:
        for q in self.quotes:
            if q.tenor == tenor and q.kind == kind:
                return q
        return None

    def atm_quotes(self) -> list[VolQuote]:
        return sorted((q for q in self.quotes if q.kind == "ATMF"), key=lambda q: q.expiry)


# ---------------------------------------------------------------------------
# deals


def _cp_sign(value: str | int) -> int:
    if value in (1, -1):
        return int(value)
    text = str(value).strip().lower()
    if text in ("call", "c"):
        return 1
    if text in ("put", "p"):
        return -1
    raise ValueError(f"call/put flag must be 'call' or 'put', got {value!r}")


@dataclass(frozen=True)
class EuropeanOption:
    notional: float
    strike: float
    expiry: date
    cp: int = 1
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "cp", _cp_sign(self.cp))
        if not (self.strike > 0 and self.notional > 0):
            raise MarketDataError(f"European {self.name}: strike and notional must be > 0")


@dataclass(frozen=True)
class AmericanOption:
    """Exercisable once on any date in ``[exercise_start, expiry]``."""

    notional: float
    strike: float
    exercise_start: date
    expiry: date
    cp: int = 1
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "cp", _cp_sign(self.cp))
        if not (self.strike > 0 and self.notional > 0):
            raise MarketDataError(f"American {self.name}: strike and notional must be > 0")
        if self.exercise_start > self.expiry:
            raise MarketDataError(f"American {self.name}: exercise window start after expiry")


@dataclass(frozen=True)
class AsianOption:
    """Average-rate (``spot`` family) or average-strike (``strike`` family) option.

    ``historical`` maps already observed fixing dates to their FX fixings.
    """

    notional: float
    fixings: tuple[date, ...]
    expiry: date
    average: str = "arithmetic"
    family: str = "spot"
    strike: float | None = None
    cp: int = 1
    historical: Mapping[date, float] = field(default_factory=dict)
    payment: date | None = None
    name: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "cp", _cp_sign(self.cp))
        object.__setattr__(self, "fixings", tuple(self.fixings))
        object.__setattr__(self, "historical", dict(self.historical))
        if self.average not in ("arithmetic", "geometric"):
            raise MarketDataError(f"Asian {self.name}: average must be arithmetic or geometric")
        if self.family not in ("spot", "strike"):
            raise MarketDataError(f"Asian {self.name}: family must be spot or strike")
        if not self.notional > 0:
            raise MarketDataError(f"Asian {self.name}: notional must be > 0")
        if not self.fixings:
            raise MarketDataError(f"Asian {self.name}: at least one fixing date required")
        for a, b in zip(self.fixings, self.fixings[1:]):
            if b <= a:
                raise MarketDataError(f"Asian {self.name}: fixing dates must be strictly increasing")
        if self.fixings[-1] > self.expiry:
            raise MarketDataError(f"Asian {self.name}: fixing after expiry")
        if self.family == "spot" and (self.strike is None or not self.strike > 0):
            raise MarketDataError(f"Asian {self.name}: spot family needs a positive strike")

    @property
    def payment_date(self) -> date:
        return self.payment or self.expiry

    def check_history(self, valuation: date) -> None:
        """Every fixing dated before ``valuation`` must have an observation."""
        missing = [d for d in self.fixings if d < valuation and d not in self.historical]
        if missing:
            raise MarketDataError(
                f"Asian {self.name}: missing historical fixings for "
                + ", ".join(format_date(d) for d in missing)
            )


Deal = EuropeanOption | AmericanOption | AsianOption


# ---------------------------------------------------------------------------
# validation (market conditions for a well-posed calibration)


@dataclass(frozen=True)
class Violation:
    condition: str  # "C1" or "C2"
    tenor: str
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    passed: bool
    violations: tuple[Violation, ...]
    atm_total_variance: dict[str, float]
    butterflies: dict[str, tuple[float, float]]

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "violations": [v.__dict__ for v in self.violations],
            "atm_total_variance": self.atm_total_variance,
            "butterflies": {k: {"BF25": v[0], "BF10": v[1]} for k, v in self.butterflies.items()},
        }


def butterflies(atm: float, c25: float, p25: float, c10: float, p10: float) -> tuple[float, float]:
    """BF25 and BF10 in the units of the inputs."""
    return 0.5 * (c25 + p25) - atm, 0.5 * (c10 + p10) - atm


def validate_market(snapshot: MarketSnapshot) -> ValidationReport:
    """Check ATM total variance grows with tenor (C1) and ``0 <= BF25 <= BF10`` (C2).

    Total variance is measured in calendar days to expiry. Only tenors quoting
    all four wings enter C2.
    """
    violations: list[Violation] = []
    variances: dict[str, float] = {}
    prev_label, prev_var = None, -math.inf
    for q in snapshot.atm_quotes():
        days = (q.expiry - snapshot.valuation).days
        var = (100.0 * q.vol) ** 2 * days
        variances[q.tenor] = var
        if var < prev_var:
            violations.append(
                Violation("C1", q.tenor, f"ATM variance {var:.6g} < {prev_var:.6g} at {prev_label}")
            )
        prev_label, prev_var = q.tenor, var

    bfs: dict[str, tuple[float, float]] = {}
    for tenor in snapshot.tenors():
        legs = [snapshot.quote(tenor, k) for k in QUOTE_KINDS]
        if any(leg is None for leg in legs):
            continue
        atm, c25, p25, c10, p10 = (100.0 * leg.vol for leg in legs)  # type: ignore[union-attr]
        bf25, bf10 = butterflies(atm, c25, p25, c10, p10)
        bfs[tenor] = (bf25, bf10)
        # tolerance absorbs binary rounding of percent quotes given to 4 decimals
        if bf25 < -1e-12:
            violations.append(Violation("C2", tenor, f"BF25 = {bf25:.6g} < 0"))
        if bf25 > bf10 + 1e-12:
            violations.append(Violation("C2", tenor, f"BF25 = {bf25:.6g} > BF10 = {bf10:.6g}"))
    return ValidationReport(not violations, tuple(violations), variances, bfs)


# ---------------------------------------------------------------------------
# file formats


def _read_csv(path: Path, header: Sequence[str]) -> list[tuple[int, dict[str, str]]]:
    try:
        handle = open(path, newline="")
    except OSError as exc:
        raise InputError(f"{path}: cannot open ({exc.strerror})") from None
    with handle:
        reader = csv.DictReader(handle)
        found = [h.strip() for h in (reader.fieldnames or [])]
        if found != list(header):
            raise InputError(f"{path}:1: expected header {','.join(header)}, got {','.join(found)}")
        rows = []
        for row in reader:
            if not any((v or "").strip() for v in row.values()):
                continue
            rows.append((reader.line_num, {k.strip(): (v or "").strip() for k, v in row.items()}))
    return rows


def _load_pillars(path: Path, column: str) -> tuple[list[date], list[float]]:
    dates, values = [], []
    for line, row in _read_csv(path, ("date", column)):
        try:
            dates.append(parse_date(row["date"]))
            values.append(float(row[column]))
        except (ValueError, TypeError) as exc:
            raise InputError(f"{path}:{line}: {exc}") from None
    if not dates:
        raise InputError(f"{path}: no data rows")
    return dates, values


def load_forward_curve(path: str | Path) -> ForwardCurve:
    path = Path(path)
    dates, values = _load_pillars(path, "forward")
    try:
        return ForwardCurve(dates[0], tuple(dates), tuple(values))
    except MarketDataError as exc:
        raise InputError(f"{path}: {exc}") from None


def load_discount_curve(path: str | Path) -> DiscountCurve:
    path = Path(path)
    dates, values = _load_pillars(path, "df")
    try:
        return DiscountCurve(dates[0], tuple(dates), tuple(values))
    except MarketDataError as exc:
        raise InputError(f"{path}: {exc}") from None


def load_vol_quotes(path: str | Path) -> list[VolQuote]:
    """Read ``tenor,expiry,kind,vol_pct``; vols are converted from percent."""
    path = Path(path)
    quotes = []
    for line, row in _read_csv(path, ("tenor", "expiry", "kind", "vol_pct")):
        try:
            quotes.append(
                VolQuote(row["tenor"], parse_date(row["expiry"]), row["kind"].upper(),
                         float(row["vol_pct"]) / 100.0)
            )
        except (ValueError, TypeError) as exc:
            raise InputError(f"{path}:{line}: {exc}") from None
    if not quotes:
        raise InputError(f"{path}: no data rows")
    return quotes


def load_snapshot(forward_path: str | Path, discount_path: str | Path,
                  vols_path: str | Path) -> MarketSnapshot:
    fwd = load_forward_curve(forward_path)
    dfc = load_discount_curve(discount_path)
    quotes = load_vol_quotes(vols_path)
    try:
        return MarketSnapshot(fwd, dfc, tuple(quotes), fwd.valuation)
    except MarketDataError as exc:
        raise InputError(f"{vols_path}: {exc}") from None


def deal_from_dict(obj: Mapping, valuation: date | None = None) -> Deal:
    kind = str(obj.get("type", "")).lower()
    name = str(obj.get("name", obj.get("id", "")))
    cp = obj.get("cp", "call")
    if kind == "european":
        return EuropeanOption(float(obj["notional"]), float(obj["strike"]),
                              parse_date(obj["expiry"]), cp, name)
    if kind == "american":
        return AmericanOption(float(obj["notional"]), float(obj["strike"]),
                              parse_date(obj["exercise_start"]), parse_date(obj["expiry"]), cp, name)
    if kind == "asian":
        hist = {parse_date(k): float(v) for k, v in dict(obj.get("historical", {})).items()}
        strike = obj.get("strike")
        deal = AsianOption(
            notional=float(obj["notional"]),
            fixings=tuple(parse_date(d) for d in obj["fixings"]),
            expiry=parse_date(obj["expiry"]),
            average=str(obj.get("average", "arithmetic")).lower(),
            family=str(obj.get("family", "spot")).lower(),
            strike=None if strike is None else float(strike),
            cp=cp,
            historical=hist,
            payment=parse_date(obj["payment"]) if obj.get("payment") else None,
            name=name,
        )
        if valuation is not None:
            deal.check_history(valuation)
        return deal
    raise ValueError(f"unknown deal type {obj.get('type')!r}")


def deal_to_dict(deal: Deal) -> dict:
    cp = "call" if deal.cp > 0 else "put"
    if isinstance(deal, EuropeanOption):
        return {"type": "european", "name": deal.name, "notional": deal.notional,
                "strike": deal.strike, "expiry": format_date(deal.expiry), "cp": cp}
    if isinstance(deal, AmericanOption):
        return {"type": "american", "name": deal.name, "notional": deal.notional,
                "strike": deal.strike, "exercise_start": format_date(deal.exercise_start),
                "expiry": format_date(deal.expiry), "cp": cp}
    out = {"type": "asian", "name": deal.name, "notional": deal.notional,
           "fixings": [format_date(d) for d in deal.fixings], "expiry": format_date(deal.expiry),
           "average": deal.average, "family": deal.family, "cp": cp}
    if deal.strike is not None:
        out["strike"] = deal.strike
    if deal.historical:
        out["historical"] = {format_date(k): v for k, v in sorted(deal.historical.items())}
    if deal.payment is not None:
        out["payment"] = format_date(deal.payment)
    return out


def load_deals(path: str | Path, valuation: date | None = None) -> list[Deal]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise InputError(f"{path}: cannot open ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}:{exc.lineno}: {exc.msg}") from None
    if isinstance(raw, dict):
        raw = raw.get("deals", [raw])
    deals = []
    for k, obj in enumerate(raw):
        try:
            deals.append(deal_from_dict(obj, valuation))
        except (KeyError, ValueError, TypeError) as exc:
            raise InputError(f"{path}: deal #{k}: {exc}") from None
    return deals


def write_curve_csv(path: str | Path, curve: ForwardCurve | DiscountCurve) -> None:
    column = "forward" if isinstance(curve, ForwardCurve) else "df"
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["date", column])
        for d, v in zip(curve.dates, curve.values):
            writer.writerow([format_date(d), repr(v)])


def write_vols_csv(path: str | Path, quotes: Iterable[VolQuote]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["tenor", "expiry", "kind", "vol_pct"])
        for q in quotes:
            writer.writerow([q.tenor, format_date(q.expiry), q.kind, f"{100.0 * q.vol:.10g}"])
