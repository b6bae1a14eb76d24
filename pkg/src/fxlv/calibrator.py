"""Levenberg-Marquardt calibration of the local volatility pillars to market option prices.

Residuals are relative price errors ``f_i = y_i(x) / c_i - 1`` where ``y_i`` is
the model price (grid or Monte-Carlo backend) and ``c_i`` the Black-Scholes
market price. Each step solves ``(A^T A + alpha I) w = -A^T f``; a step is kept
only if it passes both the direction check and the error-reduction check,
after which alpha is halved. Rejected steps double alpha and retry.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from fxlv.grid_pricer import (DEFAULT_MAX_GAP_DAYS, DEFAULT_STENCIL, build_state_grid, build_time_grid,
                              forward_propagate)
from fxlv.market_data import MarketSnapshot, year_fraction
from fxlv.mc_pricer import RngSpec, build_mc_time_steps, generate_paths, price_european_mc
from fxlv.reference_pricing import Instrument, market_price_vector
from fxlv.vol_surface import (VOL_FLOOR, LocalVolSurface, SurfaceError, default_state_pillars,
                              default_time_pillars, floor_params, from_params, to_params)

log = logging.getLogger(__name__)


class CalibrationError(RuntimeError):
    """Residuals could not be evaluated."""


@dataclass(frozen=True)
class SolverSettings:
    max_iterations: int = 100
    tol_f: float = 1e-6  # on ||f||
    tol_x: float = 1e-8  # on max |w_j|
    alpha0: float | None = None  # default 1e-3 * trace(A^T A) / n
    alpha_min: float = 1e-12
    alpha_max: float = 1e12
    bump_abs: float = 1e-4
    bump_rel: float = 1e-3
    floor: float = VOL_FLOOR


# ---------------------------------------------------------------------------
# pricing backends


class GridBackend:
    """Prices every instrument from one forward sweep of the grid."""

    name = "grid"

    def __init__(self, snapshot: MarketSnapshot, instruments: Sequence[Instrument],
                 half_width: int = 50, max_gap_days: int = DEFAULT_MAX_GAP_DAYS,
                 stencil: str = DEFAULT_STENCIL):
        self.snapshot = snapshot
        self.instruments = list(instruments)
        self.half_width = half_width
        self.stencil = stencil
        self.time_grid = build_time_grid(snapshot.valuation, {i.expiry for i in instruments}, max_gap_days)
        self._slices = np.array([self.time_grid.index(i.expiry) for i in instruments])
        self._strikes = np.array([i.strike for i in instruments])
        self._cp = np.array([i.cp for i in instruments], dtype=float)
        self._dfs = np.array([snapshot.discount.value_at(i.expiry) for i in instruments])

    def resolution(self) -> dict:
        return {"backend": self.name, "half_width": self.half_width, "slices": len(self.time_grid),
                "stencil": self.stencil}

    def prices(self, surface: LocalVolSurface) -> np.ndarray:
        skeleton = build_state_grid(self.time_grid, surface, self.half_width, self.snapshot.forward,
                                    self.stencil)
        grid = forward_propagate(skeleton, surface, self.snapshot.forward)
        out = np.empty(len(self.instruments))
        for k, n in enumerate(self._slices):
            payoff = np.maximum(self._cp[k] * (grid.states(n) - self._strikes[k]), 0.0)
            out[k] = self._dfs[k] * float(grid.q[n] @ payoff)
        return out


class MonteCarloBackend:
    """Terminal-state prices on a fixed set of normal draws (common random numbers)."""

    name = "mc"

    def __init__(self, snapshot: MarketSnapshot, instruments: Sequence[Instrument],
                 n_paths: int = 5000, seed: int = RngSpec.seed,
                 max_gap_days: int = DEFAULT_MAX_GAP_DAYS):
        self.snapshot = snapshot
        self.instruments = list(instruments)
        self.n_paths = n_paths
        self.rng = RngSpec(seed)
        self.time_grid = build_mc_time_steps(snapshot.valuation, (), {i.expiry for i in instruments},
                                             max_gap_days)
        self._normals = self.rng.normals(n_paths, len(self.time_grid) - 1)

    def resolution(self) -> dict:
        return {"backend": self.name, "paths": self.n_paths, **self.rng.to_dict()}

    def prices(self, surface: LocalVolSurface) -> np.ndarray:
        paths = generate_paths(surface, self.snapshot.forward, self.time_grid, self.n_paths,
                               self.rng, normals=self._normals)
        return price_european_mc(paths, self.instruments, self.snapshot.discount)


# ---------------------------------------------------------------------------
# problem


def initial_surface(snapshot: MarketSnapshot, instruments: Sequence[Instrument] | None = None,
                    n_time: int = 18, n_state: int = 11, c0: float | None = None) -> LocalVolSurface:
    """Flat-in-state surface at the ATM vol interpolated to each time pillar.

    Time pillars sit on the instrument expiries (padded to ``n_time``); ``c0``
    defaults to the 1-year ATM vol.
    """
    atm = snapshot.atm_quotes()
    if not atm:
        raise CalibrationError("initial surface needs at least one ATMF quote")
    atm_t = np.array([year_fraction(snapshot.valuation, q.expiry) for q in atm])
    atm_v = np.array([q.vol for q in atm])
    expiries = [i.T for i in instruments] if instruments else atm_t
    tp = default_time_pillars(expiries, n_time)
    sp = default_state_pillars(n_state)
    levels = np.interp(tp, atm_t, atm_v)
    c0 = float(np.interp(1.0, atm_t, atm_v)) if c0 is None else c0
    return LocalVolSurface(tp, sp, np.repeat(levels[:, None], sp.size, axis=1), c0, snapshot.forward)


@dataclass(eq=False)
class CalibrationProblem:
    snapshot: MarketSnapshot
    instruments: list[Instrument]
    initial: LocalVolSurface
    targets: np.ndarray | None = None  # market prices c_i; Black-Scholes when omitted
    backend: str = "grid"
    half_width: int = 50
    n_paths: int = 5000
    seed: int = RngSpec.seed
    max_gap_days: int = DEFAULT_MAX_GAP_DAYS
    settings: SolverSettings = field(default_factory=SolverSettings)
    stencil: str = DEFAULT_STENCIL

    def __post_init__(self) -> None:
        if not self.instruments:
            raise CalibrationError("calibration needs at least one instrument")
        if self.targets is None:
            self.targets = market_price_vector(self.snapshot, self.instruments)
        self.targets = np.asarray(self.targets, dtype=float)
        if self.targets.shape != (len(self.instruments),) or np.any(~(self.targets > 0)):
            raise CalibrationError("market prices must be positive, one per instrument")
        if self.initial.forward is None:
            self.initial = self.initial.with_forward(self.snapshot.forward)
        if self.backend == "grid":
            self.pricer = GridBackend(self.snapshot, self.instruments, self.half_width, self.max_gap_days,
                                      self.stencil)
        elif self.backend in ("mc", "monte-carlo"):
            self.pricer = MonteCarloBackend(self.snapshot, self.instruments, self.n_paths, self.seed,
                                            self.max_gap_days)
        else:
            raise CalibrationError(f"unknown backend {self.backend!r}")

    @property
    def m(self) -> int:
        return len(self.instruments)

    @property
    def n(self) -> int:
        return self.initial.n_params

    @property
    def labels(self) -> list[str]:
        return [i.label for i in self.instruments]

    def surface(self, x: np.ndarray) -> LocalVolSurface:
        return from_params(self.initial, x, self.settings.floor)

    def model_prices(self, x: np.ndarray) -> np.ndarray:
        return self.pricer.prices(self.surface(x))

    def residuals(self, x: np.ndarray) -> np.ndarray:
        y = self.model_prices(x)
        bad = ~np.isfinite(y)
        if bad.any():
            raise CalibrationError(f"pricing failed for instrument {self.labels[int(np.argmax(bad))]}")
        return y / self.targets - 1.0


# ---------------------------------------------------------------------------
# LM building blocks


def residuals(x: np.ndarray, problem) -> np.ndarray:
    return np.asarray(problem.residuals(np.asarray(x, dtype=float)), dtype=float)


def avg_error(f: np.ndarray) -> float:
    """Root-mean-square of the relative errors."""
    f = np.asarray(f, dtype=float)
    if f.size == 0:
        raise ValueError("avg_error of an empty vector")
    return math.sqrt(float(f @ f) / f.size)


def bump_sizes(x: np.ndarray, settings: SolverSettings = SolverSettings()) -> np.ndarray:
    return np.maximum(settings.bump_abs, settings.bump_rel * np.abs(x))


def jacobian_fd(x: np.ndarray, problem, f0: np.ndarray | None = None,
                settings: SolverSettings | None = None) -> np.ndarray:
    """Forward-difference Jacobian, column ``j`` bumped by ``max(bump_abs, bump_rel * |x_j|)``."""
    settings = settings or getattr(problem, "settings", SolverSettings())
    x = np.asarray(x, dtype=float)
    f0 = residuals(x, problem) if f0 is None else f0
    h = bump_sizes(x, settings)
    A = np.empty((f0.size, x.size))
    for j in range(x.size):
        xb = x.copy()
        xb[j] += h[j]
        try:
            A[:, j] = (residuals(xb, problem) - f0) / h[j]
        except Exception as exc:
            raise CalibrationError(f"Jacobian column {j}: {exc}") from exc
    return A


class DampingError(LinAlgError):
    """The damped normal matrix is not positive definite; alpha must grow."""


def lm_step(A: np.ndarray, f: np.ndarray, alpha: float) -> np.ndarray:
    """Solve ``(A^T A + alpha I) w = -A^T f`` by Cholesky."""
    if not alpha >= 0:
        raise ValueError("alpha must be non-negative")
    M = A.T @ A + alpha * np.eye(A.shape[1])
    rhs = -A.T @ f
    try:
        factor = cho_factor(M, lower=True, check_finite=True)
    except LinAlgError as exc:
        raise DampingError(str(exc)) from None
    w = cho_solve(factor, rhs)
    if not np.all(np.isfinite(w)):
        raise DampingError("non-finite step")
    return w


def lm_checks(w: np.ndarray, A: np.ndarray, f_at_x: np.ndarray, f_at_x_plus_w: np.ndarray,
              alpha: float) -> bool:
    """Accept iff ``w`` is a descent direction and does not increase ``||f||^2``."""
    direction = float(w @ (-A.T @ f_at_x + alpha * w))
    return direction > 0.0 and float(f_at_x_plus_w @ f_at_x_plus_w) <= float(f_at_x @ f_at_x)


@dataclass(frozen=True)
class TraceEntry:
    iteration: int
    alpha: float
    fnorm2: float  # ||f||^2 at the trial point (inf if it could not be priced)
    wnorm: float
    accepted: bool


@dataclass(frozen=True)
class LMResult:
    x: np.ndarray
    f: np.ndarray
    status: str  # converged-f | converged-w | max-iterations | stalled
    iterations: int
    trace: tuple[TraceEntry, ...]
    initial_fnorm2: float

    @property
    def n_accepted(self) -> int:
        return sum(e.accepted for e in self.trace)

    @property
    def n_rejected(self) -> int:
        return sum(not e.accepted for e in self.trace)


def levenberg_marquardt(problem, x0: np.ndarray, settings: SolverSettings | None = None,
                        jacobian: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None) -> LMResult:
    """Minimize ``||f(x)||^2`` for any object with a ``residuals(x)`` method."""
    settings = settings or getattr(problem, "settings", SolverSettings())
    jacobian = jacobian or (lambda x, f: jacobian_fd(x, problem, f, settings))
    x = np.array(x0, dtype=float)
    try:
        f = residuals(x, problem)
    except Exception as exc:
        raise CalibrationError(f"initial point cannot be priced: {exc}") from exc
    if not np.all(np.isfinite(f)):
        raise CalibrationError("non-finite residuals at the initial point")
    fnorm2 = float(f @ f)
    initial = fnorm2
    trace: list[TraceEntry] = []
    alpha = settings.alpha0
    status = "max-iterations"
    it = 0
    for it in range(1, settings.max_iterations + 1):
        if math.sqrt(fnorm2) <= settings.tol_f:
            status, it = "converged-f", it - 1
            break
        A = jacobian(x, f)
        if alpha is None:
            alpha = 1e-3 * float(np.einsum("ij,ij->", A, A)) / x.size or 1e-3
        accepted = False
        while alpha <= settings.alpha_max:
            try:
                w = lm_step(A, f, alpha)
            except DampingError:
                alpha *= 2.0
                continue
            trial = x + w
            try:
                f_new = residuals(trial, problem)
                ok = np.all(np.isfinite(f_new))
            except (SurfaceError, CalibrationError, ArithmeticError, RuntimeError):
                f_new, ok = None, False
            if ok and lm_checks(w, A, f, f_new, alpha):
                fnorm2 = float(f_new @ f_new)
                trace.append(TraceEntry(it, alpha, fnorm2, float(np.linalg.norm(w)), True))
                x, f = trial, f_new
                alpha = max(alpha / 2.0, settings.alpha_min)
                accepted = True
                break
            trace.append(TraceEntry(it, alpha, float(f_new @ f_new) if ok else math.inf,
                                    float(np.linalg.norm(w)), False))
            alpha *= 2.0
        log.debug("iteration %d: ||f||^2 = %.3e alpha = %.3e", it, fnorm2, alpha)
        if not accepted:
            status = "stalled"
            break
        if float(np.max(np.abs(w))) <= settings.tol_x:
            status = "converged-w"
            break
    else:
        if math.sqrt(fnorm2) <= settings.tol_f:
            status = "converged-f"
    return LMResult(x, f, status, it, tuple(trace), initial)


# ---------------------------------------------------------------------------
# report


@dataclass(frozen=True, eq=False)
class CalibrationReport:
    params: np.ndarray
    surface: LocalVolSurface
    labels: tuple[str, ...]
    market_prices: np.ndarray
    model_prices: np.ndarray
    errors: np.ndarray
    avg_error: float
    status: str
    iterations: int
    trace: tuple[TraceEntry, ...]
    initial_fnorm2: float
    n_floored: int
    settings: dict
    resolution: dict

    @property
    def n_accepted(self) -> int:
        return sum(e.accepted for e in self.trace)

    @property
    def n_rejected(self) -> int:
        return sum(not e.accepted for e in self.trace)

    def accepted_fnorm2(self) -> list[float]:
        return [self.initial_fnorm2] + [e.fnorm2 for e in self.trace if e.accepted]

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "avg_error": self.avg_error,
            "iterations": self.iterations,
            "accepted_steps": self.n_accepted,
            "rejected_steps": self.n_rejected,
            "floored_parameters": self.n_floored,
            "resolution": self.resolution,
            "settings": self.settings,
            "instruments": [
                {"label": lab, "market_price": float(c), "model_price": float(y), "error": float(e)}
                for lab, c, y, e in zip(self.labels, self.market_prices, self.model_prices, self.errors)
            ],
            "trace": [asdict(e) for e in self.trace],
            "surface": self.surface.to_dict(),
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    def write_trace_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["iteration", "alpha", "fnorm2", "wnorm", "accepted"])
            for e in self.trace:
                writer.writerow([e.iteration, repr(e.alpha), repr(e.fnorm2), repr(e.wnorm), int(e.accepted)])


def calibrate(problem: CalibrationProblem) -> CalibrationReport:
    x0 = to_params(problem.initial)
    result = levenberg_marquardt(problem, x0, problem.settings)
    x, n_floored = floor_params(result.x, problem.settings.floor)
    surface = problem.surface(x)
    y = problem.pricer.prices(surface)
    f = y / problem.targets - 1.0
    return CalibrationReport(
        params=x,
        surface=surface,
        labels=tuple(problem.labels),
        market_prices=problem.targets.copy(),
        model_prices=y,
        errors=f,
        avg_error=avg_error(f),
        status=result.status,
        iterations=result.iterations,
        trace=result.trace,
        initial_fnorm2=result.initial_fnorm2,
        n_floored=n_floored,
        settings={**asdict(problem.settings),
                  "bump": "forward difference, h_j = max(bump_abs, bump_rel * |x_j|)"},
        resolution=problem.pricer.resolution(),
    )
