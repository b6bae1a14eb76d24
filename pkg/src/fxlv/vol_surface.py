"""Fully parameterized local volatility surface sigma(t, S).

The FX level is mapped to a probability-like coordinate

    s = Phi( ln(S / F_t) / (1.3 * c0 * sqrt(t + 1/365.25)) )

and sigma is stored on a rectangular (time x s) pillar grid, bilinearly
interpolated. Time is clamped to the pillar range.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit
from scipy.special import ndtr, ndtri

from fxlv.market_data import ForwardCurve

TRANSFORM_SCALE = 1.3
TIME_SHIFT = 1.0 / 365.25
DEFAULT_TIME_PILLARS = 18
DEFAULT_STATE_PILLARS = 11
VOL_FLOOR = 1e-6

_SQRT2 = math.sqrt(2.0)


class SurfaceError(ValueError):
    """Malformed surface or parameter vector."""


def normal_cdf(x):
    """Standard normal CDF (scalar or array)."""
    return ndtr(x)


def normal_inv(p):
    """Inverse standard normal CDF; ``p`` must lie strictly inside (0, 1)."""
    arr = np.asarray(p, dtype=float)
    if np.any(~(arr > 0.0)) or np.any(~(arr < 1.0)):
        raise ValueError(f"normal_inv needs 0 < p < 1, got {p!r}")
    out = ndtri(arr)
    return float(out) if out.ndim == 0 else out


@njit(cache=True)
def _cell(pillars, x):
    """Left pillar index and linear weight for ``x`` clamped to the pillar range."""
    n = pillars.shape[0]
    if n == 1 or x <= pillars[0]:
        return 0, 0.0
    if x >= pillars[n - 1]:
        return n - 2, 1.0
    lo, hi = 0, n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if pillars[mid] <= x:
            lo = mid
        else:
            hi = mid
    return lo, (x - pillars[lo]) / (pillars[lo + 1] - pillars[lo])


@njit(cache=True)
def bilinear(tp, sp, vols, t, s):
    """Bilinear interpolation of ``vols[j, k]`` at (t, s); both clamped to the pillars."""
    j, wt = _cell(tp, t)
    k, ws = _cell(sp, s)
    j1 = j + 1 if tp.shape[0] > 1 else j
    k1 = k + 1 if sp.shape[0] > 1 else k
    lo = vols[j, k] + ws * (vols[j, k1] - vols[j, k])
    hi = vols[j1, k] + ws * (vols[j1, k1] - vols[j1, k])
    return lo + wt * (hi - lo)


@njit(cache=True)
def state_from_log_moneyness(t, log_moneyness, c0):
    z = log_moneyness / (TRANSFORM_SCALE * c0 * math.sqrt(t + TIME_SHIFT))
    return 0.5 * math.erfc(-z / _SQRT2)


@njit(cache=True)
def lv_point(tp, sp, vols, c0, t, log_moneyness):
    """sigma at time ``t`` for ``ln(S/F_t) = log_moneyness``."""
    return bilinear(tp, sp, vols, t, state_from_log_moneyness(t, log_moneyness, c0))


@njit(cache=True)
def lv_many(tp, sp, vols, c0, t, log_moneyness, out):
    for i in range(log_moneyness.shape[0]):
        out[i] = lv_point(tp, sp, vols, c0, t, log_moneyness[i])
    return out


def _frozen(a, dtype=float) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class LocalVolSurface:
    """sigma pillars ``vols[j, k]`` at time ``time_pillars[j]`` (years) and state ``state_pillars[k]``."""

    time_pillars: np.ndarray
    state_pillars: np.ndarray
    vols: np.ndarray
    c0: float
    forward: ForwardCurve | None = None

    def __post_init__(self) -> None:
        tp = _frozen(self.time_pillars)
        sp = _frozen(self.state_pillars)
        vols = _frozen(self.vols)
        object.__setattr__(self, "time_pillars", tp)
        object.__setattr__(self, "state_pillars", sp)
        object.__setattr__(self, "vols", vols)
        object.__setattr__(self, "c0", float(self.c0))
        if tp.ndim != 1 or sp.ndim != 1 or tp.size == 0 or sp.size == 0:
            raise SurfaceError("pillars must be non-empty 1-d arrays")
        if vols.shape != (tp.size, sp.size):
            raise SurfaceError(f"vols shape {vols.shape} != ({tp.size}, {sp.size})")
        if np.any(np.diff(tp) <= 0) or tp[0] < 0:
            raise SurfaceError("time pillars must be non-negative and strictly increasing")
        if sp.size > 1 and (np.any(np.diff(sp) <= 0) or sp[0] != 0.0 or sp[-1] != 1.0):
            raise SurfaceError("state pillars must increase strictly from 0 to 1")
        if not np.all(np.isfinite(vols)) or np.any(vols <= 0):
            raise SurfaceError("all pillar volatilities must be positive and finite")
        if not self.c0 > 0:
            raise SurfaceError("transform constant c0 must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.vols.shape

    @property
    def n_params(self) -> int:
        return self.vols.size

    def with_vols(self, vols: np.ndarray) -> "LocalVolSurface":
        return LocalVolSurface(self.time_pillars, self.state_pillars, vols, self.c0, self.forward)

    def with_forward(self, forward: ForwardCurve) -> "LocalVolSurface":
        return LocalVolSurface(self.time_pillars, self.state_pillars, self.vols, self.c0, forward)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LocalVolSurface):
            return NotImplemented
        return (
            self.c0 == other.c0
            and np.array_equal(self.time_pillars, other.time_pillars)
            and np.array_equal(self.state_pillars, other.state_pillars)
            and np.array_equal(self.vols, other.vols)
        )

    def _forward_at(self, t: float) -> float:
        if self.forward is None:
            raise SurfaceError("surface has no forward curve attached")
        return self.forward.value_at_time(t)

    # JSON ------------------------------------------------------------------

    def to_dict(self) -> dict:
        # float repr is the shortest string that round-trips exactly
        return {
            "time_pillars": [float(v) for v in self.time_pillars],
            "state_pillars": [float(v) for v in self.state_pillars],
            "vols": [[float(v) for v in row] for row in self.vols],
            "c0": self.c0,
        }

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=1)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, obj: dict, forward: ForwardCurve | None = None) -> "LocalVolSurface":
        try:
            return cls(obj["time_pillars"], obj["state_pillars"], obj["vols"], obj["c0"], forward)
        except KeyError as exc:
            raise SurfaceError(f"surface JSON missing key {exc}") from None

    @classmethod
    def from_json(cls, text_or_path: str | Path, forward: ForwardCurve | None = None) -> "LocalVolSurface":
        text = str(text_or_path)
        if not text.lstrip().startswith("{"):
            text = Path(text_or_path).read_text()
        return cls.from_dict(json.loads(text), forward)


def state_coordinate(t: float, S, surface: LocalVolSurface, forward: float | None = None):
    """Map FX level(s) ``S`` at time ``t`` to the state coordinate in (0, 1)."""
    S = np.asarray(S, dtype=float)
    if np.any(~(S > 0)):
        raise ValueError("state_coordinate needs S > 0")
    if t < 0:
        raise ValueError("state_coordinate needs t >= 0")
    F = surface._forward_at(t) if forward is None else forward
    z = np.log(S / F) / (TRANSFORM_SCALE * surface.c0 * math.sqrt(t + TIME_SHIFT))
    out = normal_cdf(z)
    return float(out) if out.ndim == 0 else out


def state_to_fx(t: float, s, surface: LocalVolSurface, forward: float | None = None):
    """Inverse of :func:`state_coordinate` at fixed ``t``."""
    F = surface._forward_at(t) if forward is None else forward
    z = normal_inv(s)
    out = F * np.exp(z * TRANSFORM_SCALE * surface.c0 * math.sqrt(t + TIME_SHIFT))
    return float(out) if np.ndim(out) == 0 else out


def local_vol(surface: LocalVolSurface, t: float, S, forward: float | None = None):
    """sigma(t, S), vectorized over ``S``."""
    s = np.atleast_1d(state_coordinate(t, S, surface, forward))
    out = np.array([bilinear(surface.time_pillars, surface.state_pillars, surface.vols, t, v)
                    for v in s])
    return float(out[0]) if np.ndim(S) == 0 else out


def pillar_slice(surface: LocalVolSurface, t: float) -> np.ndarray:
    """sigma(t, s_k) at every state pillar, with the same time clamping as :func:`local_vol`."""
    tp = surface.time_pillars
    return np.array([np.interp(t, tp, surface.vols[:, k]) for k in range(surface.vols.shape[1])])


def to_params(surface: LocalVolSurface) -> np.ndarray:
    """Row-major (time-major) flattening."""
    return surface.vols.reshape(-1).copy()


def from_params(template: LocalVolSurface, x: Sequence[float], floor: float = VOL_FLOOR) -> LocalVolSurface:
    x = np.asarray(x, dtype=float)
    if x.shape != (template.n_params,):
        raise SurfaceError(f"parameter vector length {x.size} != {template.n_params}")
    if np.any(~(x > floor)):
        raise SurfaceError(f"parameter vector has volatilities <= floor {floor:g}")
    return template.with_vols(x.reshape(template.shape))


def floor_params(x: np.ndarray, floor: float = VOL_FLOOR) -> tuple[np.ndarray, int]:
    """Raise entries at or below ``floor`` just above it; returns the count changed."""
    x = np.asarray(x, dtype=float)
    low = ~(x > floor)
    out = np.where(low, floor * (1.0 + 1e-9), x)
    return out, int(low.sum())


def default_state_pillars(k: int = DEFAULT_STATE_PILLARS) -> np.ndarray:
    if k == 1:
        return np.array([0.5])
    return np.linspace(0.0, 1.0, k)


def default_time_pillars(expiry_times: Sequence[float], j: int = DEFAULT_TIME_PILLARS) -> np.ndarray:
    """Quote expiries plus ``t = 0``, padded to ``j`` pillars.

    Padding splits the gap with the largest end/start ratio at its geometric
    midpoint (the gap starting at 0 is left alone). Surplus expiries are thinned
    by dropping the interior pillar nearest a neighbour.
    """
    if j < 2:
        raise SurfaceError("need at least two time pillars")
    pillars = sorted({0.0, *(float(t) for t in expiry_times if t > 0)})
    if len(pillars) == 1:
        pillars.append(1.0)
    while len(pillars) > j:
        near = [min(pillars[k] - pillars[k - 1], pillars[k + 1] - pillars[k])
                for k in range(1, len(pillars) - 1)]
        del pillars[1 + int(np.argmin(near))]
    while len(pillars) < j:
        if len(pillars) == 2:
            pillars.insert(1, 0.5 * pillars[1])
            continue
        ratios = [pillars[k + 1] / pillars[k] for k in range(1, len(pillars) - 1)]
        k = 1 + int(np.argmax(ratios))
        pillars.insert(k + 1, math.sqrt(pillars[k] * pillars[k + 1]))
    return np.array(pillars)


def flat_surface(sigma: float, time_pillars: Sequence[float] = (0.0, 1.0),
                 state_pillars: Sequence[float] | None = None, c0: float | None = None,
                 forward: ForwardCurve | None = None) -> LocalVolSurface:
    sp = default_state_pillars() if state_pillars is None else np.asarray(state_pillars, float)
    tp = np.asarray(time_pillars, dtype=float)
    return LocalVolSurface(tp, sp, np.full((tp.size, sp.size), float(sigma)),
                           sigma if c0 is None else c0, forward)
