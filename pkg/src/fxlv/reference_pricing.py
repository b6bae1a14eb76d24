"""Black-Scholes market prices for the calibration instruments and closed-form oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import date
from typing import Iterable, Sequence

import numpy as np

from fxlv.market_data import MarketDataError, MarketSnapshot, VolQuote, year_fraction
from fxlv.vol_surface import normal_cdf, normal_inv

DELTA_LEVELS = {"ATMF": None, "25C": 0.25, "25P": 0.25, "10C": 0.10, "10P": 0.10}
KIND_CP = {"ATMF": 1, "25C": 1, "10C": 1, "25P": -1, "10P": -1}


def black_scholes_price(F, K, sigma, T, DF=1.0, cp=1):
    """Undiscounted-forward Black formula times ``DF``; zero total vol gives intrinsic."""
    F, K, sigma, T, DF = (np.asarray(v, dtype=float) for v in (F, K, sigma, T, DF))
    if np.any(F < 0) or np.any(K < 0) or np.any(sigma < 0) or np.any(T < 0):
        raise ValueError("black_scholes_price: negative input")
    if np.any(DF <= 0) or np.any(DF > 1.0 + 1e-12):
        raise ValueError("black_scholes_price: discount factor must lie in (0, 1]")
    cp = np.asarray(cp, dtype=float)
    vol_t = sigma * np.sqrt(T)
    intrinsic = np.maximum(cp * (F - K), 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        d1 = (np.log(F / K) + 0.5 * vol_t**2) / vol_t
        d2 = d1 - vol_t
        value = cp * (F * normal_cdf(cp * d1) - K * normal_cdf(cp * d2))
    value = np.where((vol_t > 0) & (K > 0) & (F > 0), value, intrinsic)
    out = DF * value
    return float(out) if out.ndim == 0 else out


def forward_delta(F: float, K: float, sigma: float, T: float, cp: int = 1) -> float:
    """Premium-excluded forward delta, reported as a positive number for puts."""
    vol_t = sigma * math.sqrt(T)
    d1 = (math.log(F / K) + 0.5 * vol_t * vol_t) / vol_t
    return float(normal_cdf(cp * d1))


def strike_from_delta(F: float, sigma: float, T: float, level: str | float, cp: int = 1) -> float:
    """Strike whose forward delta equals ``level``; ``"ATMF"`` returns the forward."""
    if level == "ATMF":
        return F
    if not (sigma > 0 and T > 0):
        raise ValueError("strike_from_delta needs sigma, T > 0")
    vol_t = sigma * math.sqrt(T)
    return F * math.exp(-cp * vol_t * normal_inv(float(level)) + 0.5 * vol_t * vol_t)


@dataclass(frozen=True)
class Instrument:
    """A calibration instrument: a European option resolved from a delta quote."""

    label: str
    tenor: str
    kind: str
    expiry: date
    T: float
    strike: float
    cp: int
    vol: float
    forward: float
    df: float

    @property
    def delta_level(self) -> float | None:
        return DELTA_LEVELS[self.kind]

    def market_price(self) -> float:
        return black_scholes_price(self.forward, self.strike, self.vol, self.T, self.df, self.cp)


def parse_selection(entries: Iterable[str]) -> set[tuple[str, str]]:
    """``["1D:25C", "1W:10P", ...]`` -> {(tenor, kind)}."""
    out = set()
    for e in entries:
        tenor, _, kind = str(e).partition(":")
        if not kind:
            raise ValueError(f"selection entry {e!r} must look like TENOR:KIND")
        out.add((tenor.strip(), kind.strip().upper()))
    return out


def select_quotes(snapshot: MarketSnapshot, exclude: Iterable[str] = ()) -> list[VolQuote]:
    """Quotes ordered by expiry then kind, minus the excluded ``TENOR:KIND`` entries."""
    drop = parse_selection(exclude)
    order = {k: n for n, k in enumerate(("10P", "25P", "ATMF", "25C", "10C"))}
    quotes = [q for q in snapshot.quotes if (q.tenor, q.kind) not in drop]
    return sorted(quotes, key=lambda q: (q.expiry, order[q.kind]))


def resolve_instrument(snapshot: MarketSnapshot, quote: VolQuote) -> Instrument:
    label = quote.label
    if not (snapshot.forward.covers(quote.expiry) and snapshot.discount.covers(quote.expiry)):
        raise MarketDataError(f"instrument {label}: expiry {quote.expiry} not covered by curves")
    T = year_fraction(snapshot.valuation, quote.expiry)
    F = snapshot.forward.value_at(quote.expiry)
    DF = snapshot.discount.value_at(quote.expiry)
    cp = KIND_CP[quote.kind]
    level = "ATMF" if quote.kind == "ATMF" else DELTA_LEVELS[quote.kind]
    if T == 0.0:
        raise MarketDataError(f"instrument {label}: expires on the valuation date")
    K = strike_from_delta(F, quote.vol, T, level, cp)
    return Instrument(label, quote.tenor, quote.kind, quote.expiry, T, K, cp, quote.vol, F, DF)


def build_instruments(snapshot: MarketSnapshot, exclude: Iterable[str] = ()) -> list[Instrument]:
    return [resolve_instrument(snapshot, q) for q in select_quotes(snapshot, exclude)]


def market_price_vector(snapshot: MarketSnapshot, selection: Sequence[Instrument | VolQuote]) -> np.ndarray:
    """Market prices ``c_i`` per unit notional, in selection order."""
    out = np.empty(len(selection))
    for i, item in enumerate(selection):
        inst = resolve_instrument(snapshot, item) if isinstance(item, VolQuote) else item
        out[i] = inst.market_price()
    return out


def geometric_asian_closed_form(forwards: Sequence[float], K: float, sigma: float,
                                fixing_times: Sequence[float], DF: float = 1.0, cp: int = 1) -> float:
    """Geometric-average-rate option under flat lognormal dynamics with the given forwards."""
    F = np.asarray(forwards, dtype=float)
    t = np.asarray(fixing_times, dtype=float)
    if F.shape != t.shape or F.size == 0:
        raise ValueError("need one forward per fixing time")
    if np.any(t < 0):
        raise ValueError("fixing times must be non-negative")
    n = t.size
    variance = sigma**2 * np.minimum.outer(t, t).sum() / n**2
    log_mean = np.mean(np.log(F)) - 0.5 * sigma**2 * t.mean()
    G = math.exp(log_mean + 0.5 * variance)
    if variance <= 0:
        return DF * max(cp * (G - K), 0.0)
    return black_scholes_price(G, K, math.sqrt(variance), 1.0, DF, cp)
