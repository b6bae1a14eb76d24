"""Command-line front end: ``fxlv validate|calibrate|price|converge --config FILE``.

Exit codes: 0 success, 1 domain failure (validation, solver, pricing), 2 bad
input (missing or malformed files, bad config values).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from fxlv import __version__
from fxlv.calibrator import (CalibrationError, CalibrationProblem, SolverSettings, calibrate,
                             initial_surface)
from fxlv.grid_pricer import STENCILS, GridError, backward_value, build_grid, price_american
from fxlv.market_data import (AmericanOption, AsianOption, EuropeanOption, InputError,
                              MarketDataError, load_deals, load_snapshot, validate_market)
from fxlv.mc_pricer import (MonteCarloError, RngSpec, build_mc_time_steps, generate_paths,
                            price_asian, price_european_mc)
from fxlv.reference_pricing import build_instruments, parse_selection
from fxlv.vol_surface import LocalVolSurface, SurfaceError

EXIT_OK, EXIT_DOMAIN, EXIT_INPUT = 0, 1, 2
MIN_GRID_HALF_WIDTH = 10
MIN_PATHS = 100
STALL_STATUSES = ("stalled", "max-iterations")


class DomainFailure(RuntimeError):
    """Validation, solver or pricing failure (exit 1)."""


@dataclass
class RunConfig:
    forward_curve: Path
    discount_curve: Path
    vols: Path
    deals: Path | None
    out_dir: Path
    exclude: list[str] = field(default_factory=list)
    time_pillars: int = 18
    state_pillars: int = 11
    backend: str = "grid"
    calib_half_width: int = 50
    calib_paths: int = 5000
    max_iterations: int = 100
    tol_f: float = 1e-6
    tol_x: float = 1e-8
    stencil: str = "blend"
    max_gap_days: int = 3
    surface: Path | None = None
    grid_half_width: int = 100
    paths: int = 20000
    seed: int = RngSpec.seed
    european_backend: str = "grid"
    american_backend: str = "grid"
    asian_backend: str = "mc"
    converge_half_widths: list[int] = field(default_factory=lambda: [50, 100, 200])
    converge_paths: list[int] = field(default_factory=lambda: [5000, 10000, 15000, 20000])

    @property
    def surface_path(self) -> Path:
        return self.surface or self.out_dir / "surface.json"

    def check(self) -> None:
        for label, path in (("forward_curve", self.forward_curve),
                            ("discount_curve", self.discount_curve), ("vols", self.vols)):
            if not path.is_file():
                raise InputError(f"{label}: file {path} not found")
        if self.deals is not None and not self.deals.is_file():
            raise InputError(f"deals: file {self.deals} not found")
        half_widths = [self.calib_half_width, self.grid_half_width, *self.converge_half_widths]
        if min(half_widths) < MIN_GRID_HALF_WIDTH:
            raise InputError(f"grid half width must be >= {MIN_GRID_HALF_WIDTH}")
        if min([self.calib_paths, self.paths, *self.converge_paths]) < MIN_PATHS:
            raise InputError(f"path counts must be >= {MIN_PATHS}")
        if self.stencil not in STENCILS:
            raise InputError(f"grid.stencil must be one of {STENCILS}")
        if self.backend not in ("grid", "mc"):
            raise InputError("calibration.backend must be 'grid' or 'mc'")
        if self.max_gap_days < 1:
            raise InputError("grid.max_gap_days must be >= 1")
        try:
            parse_selection(self.exclude)
        except ValueError as exc:
            raise InputError(f"selection.exclude: {exc}") from None

    def to_dict(self) -> dict:
        out = {}
        for k, v in asdict(self).items():
            out[k] = str(v) if isinstance(v, Path) else v
        out["surface"] = str(self.surface_path)
        return out


def load_config(path: str | Path, seed: int | None = None, out: str | Path | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except OSError as exc:
        raise InputError(f"{path}: cannot open ({exc.strerror})") from None
    except tomllib.TOMLDecodeError as exc:
        raise InputError(f"{path}: {exc}") from None
    base = path.parent

    def section(name: str) -> dict:
        value = raw.get(name, {})
        if not isinstance(value, dict):
            raise InputError(f"{path}: [{name}] must be a table")
        return value

    def rel(value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else base / p

    market, sel, surf = section("market"), section("selection"), section("surface")
    cal, grid, pricing = section("calibration"), section("grid"), section("pricing")
    conv, output = section("converge"), section("output")
    try:
        cfg = RunConfig(
            forward_curve=rel(market["forward_curve"]),
            discount_curve=rel(market["discount_curve"]),
            vols=rel(market["vols"]),
            deals=rel(market["deals"]) if "deals" in market else None,
            out_dir=Path(out) if out is not None else rel(output.get("dir", "out")),
            exclude=[str(e) for e in sel.get("exclude", [])],
            time_pillars=int(surf.get("time_pillars", 18)),
            state_pillars=int(surf.get("state_pillars", 11)),
            backend=str(cal.get("backend", "grid")),
            calib_half_width=int(cal.get("grid_half_width", 50)),
            calib_paths=int(cal.get("paths", 5000)),
            max_iterations=int(cal.get("max_iterations", 100)),
            tol_f=float(cal.get("tol_f", 1e-6)),
            tol_x=float(cal.get("tol_x", 1e-8)),
            stencil=str(grid.get("stencil", "blend")),
            max_gap_days=int(grid.get("max_gap_days", 3)),
            surface=rel(pricing["surface"]) if "surface" in pricing else None,
            grid_half_width=int(pricing.get("grid_half_width", 100)),
            paths=int(pricing.get("paths", 20000)),
            seed=int(seed if seed is not None else pricing.get("seed", RngSpec.seed)),
            european_backend=str(pricing.get("european_backend", "grid")),
            american_backend=str(pricing.get("american_backend", "grid")),
            asian_backend=str(pricing.get("asian_backend", "mc")),
            converge_half_widths=[int(v) for v in conv.get("grid_half_widths", [50, 100, 200])],
            converge_paths=[int(v) for v in conv.get("path_counts", [5000, 10000, 15000, 20000])],
        )
    except KeyError as exc:
        raise InputError(f"{path}: missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise InputError(f"{path}: {exc}") from None
    cfg.check()
    return cfg


def write_resolved_config(cfg: RunConfig, command: str) -> Path:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    target = cfg.out_dir / f"resolved_config_{command}.json"
    payload = {
        "command": command,
        "config": cfg.to_dict(),
        "metadata": {"version": __version__,
                     "created": datetime.now(timezone.utc).isoformat(timespec="seconds")},
    }
    target.write_text(json.dumps(payload, indent=1) + "\n")
    return target


def _snapshot(cfg: RunConfig):
    return load_snapshot(cfg.forward_curve, cfg.discount_curve, cfg.vols)


def _fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.10g}"


# ---------------------------------------------------------------------------
# commands


def cmd_validate(cfg: RunConfig) -> int:
    report = validate_market(_snapshot(cfg))
    target = cfg.out_dir / "validation.json"
    target.write_text(json.dumps(report.to_dict(), indent=1) + "\n")
    for v in report.violations:
        print(f"{v.condition} violated at {v.tenor}: {v.detail}")
    print(f"validation {'passed' if report.passed else 'failed'}; report {target}")
    return EXIT_OK if report.passed else EXIT_DOMAIN


def cmd_calibrate(cfg: RunConfig, force: bool = False) -> int:
    snap = _snapshot(cfg)
    report = validate_market(snap)
    if not report.passed and not force:
        for v in report.violations:
            print(f"{v.condition} violated at {v.tenor}: {v.detail}")
        print("market failed validation; rerun with --force to calibrate anyway")
        return EXIT_DOMAIN
    try:
        instruments = build_instruments(snap, cfg.exclude)
    except MarketDataError as exc:
        raise DomainFailure(str(exc)) from None
    settings = SolverSettings(max_iterations=cfg.max_iterations, tol_f=cfg.tol_f, tol_x=cfg.tol_x)
    problem = CalibrationProblem(
        snap, instruments, initial_surface(snap, instruments, cfg.time_pillars, cfg.state_pillars),
        backend=cfg.backend, half_width=cfg.calib_half_width, n_paths=cfg.calib_paths,
        seed=cfg.seed, max_gap_days=cfg.max_gap_days, settings=settings, stencil=cfg.stencil,
    )
    result = calibrate(problem)
    result.surface.to_json(cfg.out_dir / "surface.json")
    result.to_json(cfg.out_dir / "calibration_report.json")
    result.write_trace_csv(cfg.out_dir / "calibration_trace.csv")
    print(f"AvgError {result.avg_error:.6e} after {result.iterations} iterations ({result.status})")
    if result.status in STALL_STATUSES:
        print("solver did not converge; best-so-far surface written")
        return EXIT_DOMAIN
    return EXIT_OK


def _bp(pv: float, deal, spot: float) -> float:
    return pv / (deal.notional * spot) * 1e4


def _backend_for(cfg: RunConfig, deal) -> str:
    if isinstance(deal, AmericanOption):
        backend, allowed = cfg.american_backend, ("grid",)
    elif isinstance(deal, AsianOption):
        backend, allowed = cfg.asian_backend, ("mc",)
    else:
        backend, allowed = cfg.european_backend, ("grid", "mc")
    if backend not in allowed:
        raise DomainFailure(f"deal {deal.name}: {type(deal).__name__} cannot be priced with "
                            f"backend {backend!r}")
    return backend


def _load_pricing_inputs(cfg: RunConfig):
    snap = _snapshot(cfg)
    if cfg.deals is None:
        raise InputError("market.deals is required for pricing")
    deals = load_deals(cfg.deals, snap.valuation)
    try:
        surface = LocalVolSurface.from_json(cfg.surface_path, snap.forward)
    except OSError as exc:
        raise InputError(f"{cfg.surface_path}: cannot open ({exc.strerror})") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{cfg.surface_path}: {exc}") from None
    backends = {}
    for d in deals:
        if d.expiry < snap.valuation:
            raise DomainFailure(f"deal {d.name}: expired before the valuation date")
        if not (snap.forward.covers(d.expiry) and snap.discount.covers(d.expiry)):
            raise DomainFailure(f"deal {d.name}: expiry beyond the curves")
        backends[d.name] = _backend_for(cfg, d)
    return snap, deals, surface, backends


def _price_grid_deals(snap, surface, deals, half_width: int, cfg: RunConfig) -> dict[str, float]:
    if not deals:
        return {}
    specials = {d.expiry for d in deals}
    specials |= {d.exercise_start for d in deals
                 if isinstance(d, AmericanOption) and d.exercise_start >= snap.valuation}
    grid = build_grid(surface, snap.forward, snap.valuation, specials, half_width,
                      cfg.max_gap_days, cfg.stencil)
    out = {}
    for d in deals:
        if isinstance(d, AmericanOption):
            out[d.name] = price_american(grid, surface, d, snap.discount)
        else:
            out[d.name] = d.notional * backward_value(grid, snap.discount, d.strike, d.cp, d.expiry)
    return out


def _price_mc_deals(snap, surface, deals, n_paths: int, seed: int,
                    cfg: RunConfig) -> dict[str, tuple[float, float]]:
    if not deals:
        return {}
    fixings = {f for d in deals if isinstance(d, AsianOption) for f in d.fixings}
    steps = build_mc_time_steps(snap.valuation, fixings, {d.expiry for d in deals}, cfg.max_gap_days)
    paths = generate_paths(surface, snap.forward, steps, n_paths, RngSpec(seed))
    out = {}
    for d in deals:
        if isinstance(d, AsianOption):
            out[d.name] = price_asian(paths, d, snap.discount)
        else:
            pv, se = price_european_mc(paths, [d], snap.discount, return_se=True)
            out[d.name] = (d.notional * float(pv[0]), d.notional * float(se[0]))
    return out


def _deal_type(deal) -> str:
    return {AmericanOption: "american", AsianOption: "asian", EuropeanOption: "european"}[type(deal)]


def cmd_price(cfg: RunConfig) -> int:
    snap, deals, surface, backends = _load_pricing_inputs(cfg)
    grid_deals = [d for d in deals if backends[d.name] == "grid"]
    mc_deals = [d for d in deals if backends[d.name] == "mc"]
    grid_pv = _price_grid_deals(snap, surface, grid_deals, cfg.grid_half_width, cfg)
    mc_pv = _price_mc_deals(snap, surface, mc_deals, cfg.paths, cfg.seed, cfg)
    spot = snap.forward.spot
    lines = ["deal,type,backend,resolution,pv,pv_bp_of_N_F0,se,seed"]
    for d in deals:
        if backends[d.name] == "grid":
            pv, se, res, seed = grid_pv[d.name], None, f"I={cfg.grid_half_width}", ""
        else:
            (pv, se), res, seed = mc_pv[d.name], f"paths={cfg.paths}", str(cfg.seed)
        lines.append(",".join([d.name, _deal_type(d), backends[d.name], res, _fmt(pv),
                               _fmt(_bp(pv, d, spot)), _fmt(se), seed]))
    target = cfg.out_dir / "prices.csv"
    target.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_converge(cfg: RunConfig) -> int:
    snap, deals, surface, backends = _load_pricing_inputs(cfg)
    grid_deals = [d for d in deals if backends[d.name] == "grid"]
    mc_deals = [d for d in deals if backends[d.name] == "mc"]
    table: dict[str, list[float]] = {d.name: [] for d in deals}
    for half_width in cfg.converge_half_widths:
        for name, pv in _price_grid_deals(snap, surface, grid_deals, half_width, cfg).items():
            table[name].append(pv)
    for n_paths in cfg.converge_paths:
        for name, (pv, _) in _price_mc_deals(snap, surface, mc_deals, n_paths, cfg.seed, cfg).items():
            table[name].append(pv)
    spot = snap.forward.spot
    grid_res = ";".join(str(v) for v in cfg.converge_half_widths)
    mc_res = ";".join(str(v) for v in cfg.converge_paths)
    # bp columns are PV / (notional * spot forward) * 1e4
    lines = ["deal,type,backend,resolutions,pv_bp_of_N_F0,max_pairwise_dev_bp_of_N_F0"]
    for d in deals:
        bps = [_bp(pv, d, spot) for pv in table[d.name]]
        res = grid_res if backends[d.name] == "grid" else mc_res
        lines.append(",".join([d.name, _deal_type(d), backends[d.name], res,
                               ";".join(_fmt(b) for b in bps), _fmt(max(bps) - min(bps))]))
    target = cfg.out_dir / "convergence.csv"
    target.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


COMMANDS = ("validate", "calibrate", "price", "converge")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fxlv", description="FX local volatility calibration and pricing")
    parser.add_argument("--version", action="version", version=f"fxlv {__version__}")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="TOML run configuration")
    parser.add_argument("--force", action="store_true", help="calibrate even if validation fails")
    parser.add_argument("--seed", type=int, default=None, help="override the Monte-Carlo seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed, args.out)
        write_resolved_config(cfg, args.command)
        if args.command == "validate":
            return cmd_validate(cfg)
        if args.command == "calibrate":
            return cmd_calibrate(cfg, args.force)
        if args.command == "price":
            return cmd_price(cfg)
        return cmd_converge(cfg)
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DomainFailure, MarketDataError, SurfaceError, CalibrationError, GridError,
            MonteCarloError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
