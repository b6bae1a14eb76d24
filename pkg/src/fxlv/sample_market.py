"""USDCNY-style sample market and deal set used by the tests, the CLI examples and the README.

Layout: 13 tenors from 1D to 1Y with five delta quotes each; the 1D wings and
the 1W 10-delta wings are excluded from calibration, leaving 59 instruments.
The 1D/1W/2W ATM vols and the full 1Y smile are the published USDCNY quotes;
the other tenors are filled with a smooth term structure that keeps ATM total
variance increasing and ``0 <= BF25 <= BF10``.
"""

from __future__ import annotations

import json
import math
from datetime import date, timedelta
from importlib import resources
from pathlib import Path

from fxlv.market_data import (AmericanOption, AsianOption, Deal, DiscountCurve, EuropeanOption,
                              ForwardCurve, MarketSnapshot, VolQuote, deal_to_dict, format_date,
                              load_deals, load_snapshot, write_curve_csv, write_vols_csv,
                              year_fraction)

VALUATION = date(2022, 9, 26)
SPOT = 7.1
CARRY = -0.018  # continuous r_CNY - r_USD
CNY_RATE = 0.017

# tenor, expiry, ATM vol (%)
TENORS = (
    ("1D", date(2022, 9, 27), 6.446),
    ("1W", date(2022, 9, 30), 4.2),
    ("2W", date(2022, 10, 10), 3.25),
    ("3W", date(2022, 10, 17), 3.40),
    ("1M", date(2022, 10, 26), 3.55),
    ("2M", date(2022, 11, 28), 3.80),
    ("3M", date(2022, 12, 26), 3.95),
    ("4M", date(2023, 1, 26), 4.05),
    ("5M", date(2023, 2, 27), 4.12),
    ("6M", date(2023, 3, 27), 4.18),
    ("7M", date(2023, 4, 26), 4.22),
    ("9M", date(2023, 6, 26), 4.26),
    ("1Y", date(2023, 9, 26), 4.30),
)

# 1Y smile in vol points: RR25, BF25, RR10, BF10 (gives 25C 4.7488, 25P 4.3238, 10C 5.3114, 10P 4.3114)
SMILE_1Y = (0.425, 0.2363, 1.0, 0.5114)

EXCLUDED = ("1D:25C", "1D:25P", "1D:10C", "1D:10P", "1W:10C", "1W:10P")

EXTRA_CURVE_DATES = (date(2023, 12, 26), date(2024, 3, 26))

NOTIONAL = 1_000_000.0


def _smile_scale(days: int) -> float:
    return (days / 365.0) ** 0.2


def sample_quotes() -> list[VolQuote]:
    quotes = []
    rr25, bf25, rr10, bf10 = SMILE_1Y
    for tenor, expiry, atm in TENORS:
        days = (expiry - VALUATION).days
        k = 1.0 if tenor == "1Y" else _smile_scale(days)
        legs = {
            "10P": atm + k * bf10 - 0.5 * k * rr10,
            "25P": atm + k * bf25 - 0.5 * k * rr25,
            "ATMF": atm,
            "25C": atm + k * bf25 + 0.5 * k * rr25,
            "10C": atm + k * bf10 + 0.5 * k * rr10,
        }
        for kind in ("ATMF", "25C", "25P", "10C", "10P"):
            quotes.append(VolQuote(tenor, expiry, kind, round(legs[kind], 4) / 100.0))
    return quotes


def sample_curves() -> tuple[ForwardCurve, DiscountCurve]:
    dates = [VALUATION] + [e for _, e, _ in TENORS] + list(EXTRA_CURVE_DATES)
    t = [year_fraction(VALUATION, d) for d in dates]
    fwd = [SPOT] + [round(SPOT * math.exp(CARRY * x), 6) for x in t[1:]]
    dfs = [1.0] + [round(math.exp(-CNY_RATE * x), 8) for x in t[1:]]
    return (ForwardCurve(VALUATION, tuple(dates), tuple(fwd)),
            DiscountCurve(VALUATION, tuple(dates), tuple(dfs)))


def sample_snapshot() -> MarketSnapshot:
    fwd, dfc = sample_curves()
    return MarketSnapshot(fwd, dfc, tuple(sample_quotes()), VALUATION)


def fridays(start: date, end: date) -> list[date]:
    """Fridays strictly after ``start`` up to and including ``end``."""
    d = start + timedelta(days=(4 - start.weekday()) % 7 or 7)
    out = []
    while d <= end:
        out.append(d)
        d += timedelta(days=7)
    return out


def sample_deals(snapshot: MarketSnapshot | None = None) -> list[Deal]:
    """American and Asian extensions of the 1M ATM, 1Y ATM, 1Y 25C and 1Y 10C instruments,
    plus one European for pricing checks."""
    from fxlv.reference_pricing import build_instruments

    snapshot = snapshot or sample_snapshot()
    by_label = {i.label: i for i in build_instruments(snapshot, EXCLUDED)}
    deals: list[Deal] = []
    for label in ("1Y_ATMF", "1Y_25C", "1Y_10C", "1M_ATMF"):
        inst = by_label[label]
        name = label.replace("ATMF", "ATM")
        start = VALUATION + timedelta(days=30 if label.startswith("1Y") else 7)
        deals.append(AmericanOption(NOTIONAL, round(inst.strike, 4), start, inst.expiry, 1,
                                    f"AMER_{name}"))
    for label in ("1M_ATMF", "1Y_ATMF", "1Y_25C", "1Y_10C"):
        inst = by_label[label]
        name = label.replace("ATMF", "ATM")
        deals.append(AsianOption(NOTIONAL, tuple(fridays(VALUATION, inst.expiry)), inst.expiry,
                                 "arithmetic", "spot", round(inst.strike, 4), 1, {}, None,
                                 f"ASIAN_{name}"))
    inst = by_label["6M_ATMF"]
    deals.append(EuropeanOption(NOTIONAL, round(inst.strike, 4), inst.expiry, 1, "EURO_6M_ATM"))
    return deals


SAMPLE_CONFIG = """\
# Sample run configuration; paths are relative to this file.
[market]
forward_curve = "forward.csv"
discount_curve = "discount.csv"
vols = "vols.csv"
deals = "deals.json"

[selection]
exclude = ["1D:25C", "1D:25P", "1D:10C", "1D:10P", "1W:10C", "1W:10P"]

[surface]
time_pillars = 18
state_pillars = 11

[calibration]
backend = "grid"
grid_half_width = 50
paths = 5000
max_iterations = 100
tol_f = 1e-6
tol_x = 1e-8

[grid]
stencil = "blend"
max_gap_days = 3

[pricing]
# surface = "out/surface.json"  (defaults to <output dir>/surface.json)
grid_half_width = 100
paths = 20000
seed = 20221012
european_backend = "grid"

[converge]
grid_half_widths = [50, 100, 200]
path_counts = [5000, 10000, 15000, 20000]

[output]
dir = "out"
"""


def write_sample_inputs(directory: str | Path) -> Path:
    """Write forward/discount/vols CSVs, deals JSON and a config file; returns the config path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    snap = sample_snapshot()
    write_curve_csv(directory / "forward.csv", snap.forward)
    write_curve_csv(directory / "discount.csv", snap.discount)
    write_vols_csv(directory / "vols.csv", snap.quotes)
    (directory / "deals.json").write_text(
        json.dumps([deal_to_dict(d) for d in sample_deals(snap)], indent=1) + "\n")
    (directory / "config.toml").write_text(SAMPLE_CONFIG)
    return directory / "config.toml"


def packaged_data_dir() -> Path:
    return Path(str(resources.files("fxlv") / "data"))


def load_packaged_snapshot() -> MarketSnapshot:
    d = packaged_data_dir()
    return load_snapshot(d / "forward.csv", d / "discount.csv", d / "vols.csv")


def load_packaged_deals() -> list[Deal]:
    return load_deals(packaged_data_dir() / "deals.json", VALUATION)


def describe() -> str:
    snap = sample_snapshot()
    lines = [f"valuation {format_date(snap.valuation)}, spot {snap.forward.spot}"]
    for tenor in snap.tenors():
        vols = [snap.quote(tenor, k) for k in ("10P", "25P", "ATMF", "25C", "10C")]
        lines.append(tenor + " " + " ".join(f"{100 * v.vol:.4f}" for v in vols if v))
    return "\n".join(lines)
