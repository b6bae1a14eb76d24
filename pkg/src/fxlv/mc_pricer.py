"""Monte-Carlo paths under the local volatility model, with per-step drift correction.

Each step proposes ``X = S * exp(-sigma^2 dt / 2 + sigma sqrt(dt) z)`` on every
path, then rescales all proposals by ``lambda = F(t_next) / mean(X)`` so the
path average reprices the forward exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from datetime import date
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from numba import njit
from scipy.special import ndtri

from fxlv.grid_pricer import DEFAULT_MAX_GAP_DAYS, TimeGrid, build_time_grid
from fxlv.market_data import AsianOption, DiscountCurve, ForwardCurve, format_date
from fxlv.vol_surface import LocalVolSurface, lv_many

RNG_ALGORITHM = "numpy-PCG64/SeedSequence(seed, spawn_key=(path,))/inverse-normal-cdf"
_TWO53 = float(1 << 53)


class MonteCarloError(RuntimeError):
    """Non-finite state or missing date in a Monte-Carlo run."""


@dataclass(frozen=True)
class RngSpec:
    """Master seed; path ``i`` draws from its own stream ``SeedSequence(seed, spawn_key=(i,))``.

    Draw ``n`` of a stream drives step ``n`` of that path, so a path's shocks do
    not depend on how many other paths are simulated.
    """

    seed: int = 20221012
    algorithm: str = RNG_ALGORITHM

    def normals(self, n_paths: int, n_steps: int) -> np.ndarray:
        """Standard normals, shape ``(n_paths, n_steps)``, by inverse CDF of open-interval uniforms."""
        u = np.empty((n_paths, n_steps))
        for i in range(n_paths):
            gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(i,))))
            u[i] = (gen.integers(0, 1 << 53, size=n_steps, dtype=np.uint64) + 0.5) / _TWO53
        return ndtri(u)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "algorithm": self.algorithm}


@dataclass(frozen=True, eq=False)
class PathSet:
    time_grid: TimeGrid
    states: np.ndarray  # (n_slices, n_paths)
    lambdas: np.ndarray  # (n_slices,), lambdas[0] = 1
    rng: RngSpec

    @property
    def n_paths(self) -> int:
        return self.states.shape[1]

    def at(self, d: date) -> np.ndarray:
        try:
            return self.states[self.time_grid.index(d)]
        except Exception:
            raise MonteCarloError(f"date {format_date(d)} is not in the path time series") from None


def build_mc_time_steps(valuation: date, fixing_dates: Iterable[date], expiries: Iterable[date],
                        max_gap_days: int = DEFAULT_MAX_GAP_DAYS) -> TimeGrid:
    """Time series through every (future) fixing date and expiry."""
    specials = {d for d in fixing_dates if d >= valuation} | {d for d in expiries if d >= valuation}
    return build_time_grid(valuation, specials, max_gap_days)


@njit(cache=True)
def _evolve(times, fwd, normals, tp, sp, vols, c0, states, lambdas):
    n_paths = states.shape[1]
    sig = np.empty(n_paths)
    logm = np.empty(n_paths)
    for n in range(times.shape[0] - 1):
        dt = times[n + 1] - times[n]
        sq = math.sqrt(dt)
        log_f = math.log(fwd[n])
        for i in range(n_paths):
            logm[i] = math.log(states[n, i]) - log_f
        lv_many(tp, sp, vols, c0, times[n], logm, sig)
        total = 0.0
        for i in range(n_paths):
            x = states[n, i] * math.exp(-0.5 * sig[i] * sig[i] * dt + sig[i] * sq * normals[i, n])
            states[n + 1, i] = x
            total += x
        lam = fwd[n + 1] / (total / n_paths)
        lambdas[n + 1] = lam
        for i in range(n_paths):
            states[n + 1, i] *= lam
            if not (states[n + 1, i] > 0.0 and states[n + 1, i] < np.inf):
                return n + 1, i
    return 0, 0


def generate_paths(surface: LocalVolSurface, forward_curve: ForwardCurve, time_grid: TimeGrid,
                   n_paths: int, rng: RngSpec, normals: np.ndarray | None = None) -> PathSet:
    """Simulate and drift-correct ``n_paths`` paths on ``time_grid``.

    ``normals`` (shape ``(n_paths, n_steps)``) may be passed to reuse draws
    across calls; by default they come from ``rng``.
    """
    if n_paths < 1:
        raise ValueError("need at least one path")
    times = np.asarray(time_grid.times)
    n_steps = times.size - 1
    if normals is None:
        normals = rng.normals(n_paths, n_steps)
    elif normals.shape[0] < n_paths or normals.shape[1] < n_steps:
        raise ValueError(f"normals shape {normals.shape} too small for ({n_paths}, {n_steps})")
    fwd = forward_curve.values_at_times(times)
    states = np.empty((times.size, n_paths))
    states[0] = fwd[0]
    lambdas = np.ones(times.size)
    bad_step, bad_path = _evolve(times, fwd, normals, surface.time_pillars, surface.state_pillars,
                                 surface.vols, surface.c0, states, lambdas)
    if bad_step:
        raise MonteCarloError(
            f"non-finite or non-positive state on path {bad_path} at step {bad_step} "
            f"({format_date(time_grid.dates[bad_step])})"
        )
    states.setflags(write=False)
    return PathSet(time_grid, states, lambdas, rng)


def fixing_average(values: np.ndarray, kind: str) -> np.ndarray:
    """Average over the last axis (fixings); geometric mean taken in log space."""
    values = np.asarray(values, dtype=float)
    if values.shape[-1] == 0:
        raise ValueError("no fixings to average")
    if kind == "arithmetic":
        return values.mean(axis=-1)
    if kind == "geometric":
        return np.exp(np.log(values).mean(axis=-1))
    raise ValueError(f"unknown averaging kind {kind!r}")


def asian_payoff(deal: AsianOption, average, terminal) -> np.ndarray:
    """Payoff in currency2 including notional."""
    average = np.asarray(average, dtype=float)
    if deal.family == "spot":
        if deal.strike is None:
            raise ValueError(f"Asian {deal.name}: spot family needs a strike")
        intrinsic = deal.cp * (average - deal.strike)
    else:
        intrinsic = deal.cp * (np.asarray(terminal, dtype=float) - average)
    return deal.notional * np.maximum(intrinsic, 0.0)


def fixing_matrix(paths: PathSet, deal: AsianOption) -> np.ndarray:
    """Fixings per path, shape ``(n_paths, n_fixings)``; past dates use the observed history."""
    valuation = paths.time_grid.valuation
    deal.check_history(valuation)
    cols = []
    for d in deal.fixings:
        if d < valuation:
            cols.append(np.full(paths.n_paths, deal.historical[d]))
        elif d == valuation and d in deal.historical:
            cols.append(np.full(paths.n_paths, deal.historical[d]))
        else:
            cols.append(paths.at(d))
    return np.column_stack(cols)


def price_asian(paths: PathSet, deal: AsianOption, discount_curve: DiscountCurve) -> tuple[float, float]:
    """PV (currency2) and its standard error."""
    avg = fixing_average(fixing_matrix(paths, deal), deal.average)
    terminal = paths.at(deal.expiry) if deal.family == "strike" else None
    payoff = asian_payoff(deal, avg, terminal)
    df = discount_curve.value_at(deal.payment_date)
    se = df * payoff.std(ddof=1) / math.sqrt(paths.n_paths) if paths.n_paths > 1 else 0.0
    return df * float(payoff.mean()), float(se)


def price_european_mc(paths: PathSet, instruments: Sequence, discount_curve: DiscountCurve,
                      return_se: bool = False):
    """Per-unit prices from terminal states; instruments need ``expiry``, ``strike``, ``cp``."""
    prices = np.empty(len(instruments))
    ses = np.empty(len(instruments))
    for k, inst in enumerate(instruments):
        payoff = np.maximum(inst.cp * (paths.at(inst.expiry) - inst.strike), 0.0)
        df = discount_curve.value_at(inst.expiry)
        prices[k] = df * payoff.mean()
        ses[k] = df * payoff.std(ddof=1) / math.sqrt(paths.n_paths) if paths.n_paths > 1 else 0.0
    return (prices, ses) if return_se else prices


def write_paths_csv(path: str | Path, paths: PathSet, max_paths: int | None = None) -> None:
    """Audit dump with one ``path,date,state`` row per path and date."""
    n = paths.n_paths if max_paths is None else min(max_paths, paths.n_paths)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["path", "date", "state"])
        for i in range(n):
            for d, s in zip(paths.time_grid.dates, paths.states[:, i]):
                writer.writerow([i, format_date(d), repr(float(s))])
