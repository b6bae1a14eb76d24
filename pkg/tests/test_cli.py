import csv
import json
import re
from datetime import date

import pytest

from fxlv.cli import load_config, main
from fxlv.market_data import load_snapshot
from fxlv.reference_pricing import black_scholes_price, geometric_asian_closed_form
from fxlv.sample_market import fridays, write_sample_inputs
from fxlv.vol_surface import flat_surface

D0 = date(2022, 9, 26)
FAST = {
    'grid_half_width = 100': 'grid_half_width = 40',
    'paths = 20000': 'paths = 2000',
    'grid_half_widths = [50, 100, 200]': 'grid_half_widths = [20, 40]',
    'path_counts = [5000, 10000, 15000, 20000]': 'path_counts = [1000, 2000]',
}


def make_inputs(directory, replace=None):
    cfg = write_sample_inputs(directory)
    text = cfg.read_text()
    for old, new in (replace or {}).items():
        assert old in text
        text = text.replace(old, new)
    cfg.write_text(text)
    return cfg


def write_deals(directory, deals):
    (directory / "deals.json").write_text(json.dumps(deals))


def write_flat_surface(cfg, sigma=0.05):
    snap = load_snapshot(cfg.parent / "forward.csv", cfg.parent / "discount.csv", cfg.parent / "vols.csv")
    out = cfg.parent / "out"
    out.mkdir(exist_ok=True)
    flat_surface(sigma, forward=snap.forward).to_json(out / "surface.json")
    return snap


def read_csv(path):
    return {row["deal"]: row for row in csv.DictReader(open(path))}


def test_validate_sample(tmp_path):
    cfg = make_inputs(tmp_path)
    assert main(["validate", "--config", str(cfg)]) == 0
    report = json.loads((tmp_path / "out" / "validation.json").read_text())
    assert report["passed"] and report["violations"] == []
    assert report["butterflies"]["1Y"]["BF25"] == pytest.approx(0.2363, abs=1e-9)
    assert (tmp_path / "out" / "resolved_config_validate.json").exists()


def test_negative_butterfly_is_reported(tmp_path, capsys):
    cfg = make_inputs(tmp_path)
    vols = tmp_path / "vols.csv"
    text = vols.read_text()
    text = text.replace("3M,20221226,25C,4.2899", "3M,20221226,25C,3.9")
    text = text.replace("3M,20221226,25P,3.968", "3M,20221226,25P,3.9")
    vols.write_text(text)
    assert main(["validate", "--config", str(cfg)]) == 1
    report = json.loads((tmp_path / "out" / "validation.json").read_text())
    assert [(v["condition"], v["tenor"]) for v in report["violations"]] == [("C2", "3M")]
    assert "3M" in capsys.readouterr().out
    assert main(["calibrate", "--config", str(cfg)]) == 1
    assert not (tmp_path / "out" / "surface.json").exists()


def test_malformed_csv_is_input_error(tmp_path, capsys):
    cfg = make_inputs(tmp_path)
    vols = tmp_path / "vols.csv"
    lines = vols.read_text().splitlines()
    lines[4] = "1D,20220927,10C,abc"
    vols.write_text("\n".join(lines) + "\n")
    assert main(["validate", "--config", str(cfg)]) == 2
    assert "vols.csv" in capsys.readouterr().err


def test_missing_file_is_input_error(tmp_path, capsys):
    cfg = make_inputs(tmp_path)
    (tmp_path / "vols.csv").unlink()
    assert main(["validate", "--config", str(cfg)]) == 2
    assert "not found" in capsys.readouterr().err


@pytest.mark.parametrize("old, new", [
    ('stencil = "blend"', 'stencil = "cubic"'),
    ("grid_half_width = 50", "grid_half_width = 3"),
    ('backend = "grid"', 'backend = "pde"'),
    ("tol_f = 1e-6", 'tol_f = "small"'),
])
def test_bad_config_values(tmp_path, old, new):
    cfg = make_inputs(tmp_path, {old: new})
    assert main(["validate", "--config", str(cfg)]) == 2


def test_broken_toml(tmp_path):
    cfg = make_inputs(tmp_path)
    cfg.write_text("[market\n")
    assert main(["validate", "--config", str(cfg)]) == 2


def test_paths_resolve_against_config(tmp_path, monkeypatch):
    cfg_path = make_inputs(tmp_path / "in")
    monkeypatch.chdir(tmp_path)
    cfg = load_config(cfg_path, seed=5, out="elsewhere")
    assert cfg.vols == tmp_path / "in" / "vols.csv"
    assert cfg.out_dir.name == "elsewhere" and cfg.seed == 5
    assert cfg.surface_path == cfg.out_dir / "surface.json"


# ---------------------------------------------------------------------------
# calibrate


@pytest.fixture(scope="module")
def calibrated(tmp_path_factory):
    directory = tmp_path_factory.mktemp("calib")
    cfg = make_inputs(directory, FAST)
    return cfg, main(["calibrate", "--config", str(cfg)])


def test_calibrate_writes_artifacts(calibrated, capsys):
    cfg, code = calibrated
    assert code == 0
    out = cfg.parent / "out"
    for name in ("surface.json", "calibration_report.json", "calibration_trace.csv",
                 "resolved_config_calibrate.json"):
        assert (out / name).exists()
    report = json.loads((out / "calibration_report.json").read_text())
    assert report["avg_error"] <= 5e-4
    assert report["status"] in ("converged-f", "converged-w")
    assert len(json.loads((out / "surface.json").read_text())["vols"]) == 18


def test_calibrate_prints_avg_error(tmp_path, capsys):
    # flat 5% quotes are consistent with a flat local vol surface
    cfg = make_inputs(tmp_path, FAST)
    vols = tmp_path / "vols.csv"
    rows = vols.read_text().splitlines()
    vols.write_text("\n".join([rows[0]] + [",".join(r.split(",")[:3] + ["5.0"]) for r in rows[1:]]) + "\n")
    code = main(["calibrate", "--config", str(cfg)])
    printed = capsys.readouterr().out
    m = re.search(r"AvgError (\S+)", printed)
    assert m and float(m.group(1)) <= 1e-6
    assert code == 0


# ---------------------------------------------------------------------------
# price and converge


def test_price_sample_deals(calibrated):
    cfg, _ = calibrated
    assert main(["price", "--config", str(cfg)]) == 0
    rows = read_csv(cfg.parent / "out" / "prices.csv")
    assert len(rows) == 9
    assert rows["AMER_1Y_ATM"]["backend"] == "grid" and rows["AMER_1Y_ATM"]["se"] == ""
    assert rows["ASIAN_1Y_ATM"]["backend"] == "mc" and float(rows["ASIAN_1Y_ATM"]["se"]) > 0
    assert rows["ASIAN_1Y_ATM"]["seed"] == "20221012"
    assert all(float(r["pv"]) > 0 for r in rows.values())


def test_price_output_is_reproducible(calibrated):
    cfg, _ = calibrated
    out = cfg.parent / "out"
    assert main(["price", "--config", str(cfg)]) == 0
    first = (out / "prices.csv").read_bytes()
    conf1 = json.loads((out / "resolved_config_price.json").read_text())
    assert main(["price", "--config", str(cfg)]) == 0
    assert (out / "prices.csv").read_bytes() == first
    conf2 = json.loads((out / "resolved_config_price.json").read_text())
    conf1.pop("metadata"), conf2.pop("metadata")
    assert conf1 == conf2


def test_seed_override(calibrated):
    cfg, _ = calibrated
    out = cfg.parent / "seeded"
    assert main(["price", "--config", str(cfg), "--seed", "7", "--out", str(out)]) == 2  # no surface there
    out.mkdir(exist_ok=True)
    (out / "surface.json").write_bytes((cfg.parent / "out" / "surface.json").read_bytes())
    assert main(["price", "--config", str(cfg), "--seed", "7", "--out", str(out)]) == 0
    rows = read_csv(out / "prices.csv")
    base = read_csv(cfg.parent / "out" / "prices.csv")
    assert rows["ASIAN_1Y_ATM"]["seed"] == "7"
    assert rows["ASIAN_1Y_ATM"]["pv"] != base["ASIAN_1Y_ATM"]["pv"]
    assert rows["AMER_1Y_ATM"]["pv"] == base["AMER_1Y_ATM"]["pv"]


def test_converge_table(calibrated):
    cfg, _ = calibrated
    assert main(["converge", "--config", str(cfg)]) == 0
    rows = read_csv(cfg.parent / "out" / "convergence.csv")
    assert rows["AMER_1Y_ATM"]["resolutions"] == "20;40"
    assert rows["ASIAN_1M_ATM"]["resolutions"] == "1000;2000"
    for r in rows.values():
        bps = [float(v) for v in r["pv_bp_of_N_F0"].split(";")]
        assert float(r["max_pairwise_dev_bp_of_N_F0"]) == pytest.approx(max(bps) - min(bps), abs=1e-6)


def test_unsupported_backend_pairing(calibrated, capsys):
    cfg, _ = calibrated
    bad = cfg.parent / "bad.toml"
    bad.write_text(cfg.read_text().replace('european_backend = "grid"',
                                           'european_backend = "grid"\nasian_backend = "grid"'))
    assert main(["price", "--config", str(bad)]) == 1
    assert "ASIAN_1M_ATM" in capsys.readouterr().err


@pytest.fixture
def flat_run(tmp_path):
    cfg = make_inputs(tmp_path, {'grid_half_width = 100': 'grid_half_width = 100'})
    snap = write_flat_surface(cfg)
    return cfg, snap


def test_flat_european_matches_black_scholes(flat_run):
    cfg, snap = flat_run
    expiry = date(2023, 3, 27)
    F = snap.forward.value_at(expiry)
    deals = [{"type": "european", "name": f"E{i}", "notional": 1e6, "strike": K,
              "expiry": "20230327", "cp": cp}
             for i, (K, cp) in enumerate([(round(F, 4), "call"), (6.8, "put"), (7.3, "call")])]
    write_deals(cfg.parent, deals)
    assert main(["price", "--config", str(cfg)]) == 0
    rows = read_csv(cfg.parent / "out" / "prices.csv")
    T, DF = (expiry - D0).days / 365, snap.discount.value_at(expiry)
    for d in deals:
        bs = 1e6 * black_scholes_price(F, d["strike"], 0.05, T, DF, 1 if d["cp"] == "call" else -1)
        assert abs(float(rows[d["name"]]["pv"]) - bs) / (1e6 * snap.forward.spot) * 1e4 <= 1.0


def test_american_without_early_window_is_european(flat_run):
    cfg, _ = flat_run
    common = {"notional": 1e6, "strike": 7.0, "expiry": "20230327", "cp": "put"}
    write_deals(cfg.parent, [{"type": "european", "name": "E", **common},
                             {"type": "american", "name": "A", "exercise_start": "20230327", **common}])
    assert main(["price", "--config", str(cfg)]) == 0
    rows = read_csv(cfg.parent / "out" / "prices.csv")
    assert float(rows["A"]["pv"]) == pytest.approx(float(rows["E"]["pv"]), rel=1e-12)


def test_geometric_asian_matches_closed_form(flat_run):
    cfg, snap = flat_run
    fix = fridays(D0, date(2023, 3, 24))
    F = [snap.forward.value_at(d) for d in fix]
    write_deals(cfg.parent, [{"type": "asian", "name": "G", "notional": 1.0,
                              "fixings": [d.strftime("%Y%m%d") for d in fix], "expiry": "20230324",
                              "average": "geometric", "family": "spot", "cp": "call", "strike": 7.0}])
    assert main(["price", "--config", str(cfg)]) == 0
    row = read_csv(cfg.parent / "out" / "prices.csv")["G"]
    cf = geometric_asian_closed_form(F, 7.0, 0.05, [(d - D0).days / 365 for d in fix],
                                     snap.discount.value_at(fix[-1]))
    assert abs(float(row["pv"]) - cf) <= 3 * float(row["se"])
    assert row["resolution"] == "paths=20000"


def test_expired_deal_is_domain_failure(flat_run, capsys):
    cfg, _ = flat_run
    write_deals(cfg.parent, [{"type": "european", "name": "OLD", "notional": 1.0, "strike": 7.0,
                              "expiry": "20220901", "cp": "call"}])
    assert main(["price", "--config", str(cfg)]) in (1, 2)
    assert "OLD" in capsys.readouterr().err


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert capsys.readouterr().out.startswith("fxlv ")
