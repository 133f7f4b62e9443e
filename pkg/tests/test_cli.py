import csv
import json
from pathlib import Path

import numpy as np
import pytest

from commodity_slv.cli import EXIT_CALIBRATION, EXIT_OK, EXIT_VALIDATION, main
from commodity_slv.index_engine import replay_index
from commodity_slv.market_data import RollCalendar
from commodity_slv.synthetic import MATURITIES, REFERENCE_DATE

SMALL = """
seed = 7
contract = "{d}/contracts/knockin.json"

[market]
futures_curve = "{d}/market/futures_curve.csv"
discount = "{d}/market/discount.csv"
vols_futures = "{d}/market/vols_futures.csv"
vols_index = "{d}/market/vols_index.csv"

[mc]
paths = 2000
calibration_paths = 2000

[micro]
a = 0.3
beta = 0.5
chi = 0.5
rho = -0.3

[macro.optimizer]
global_budget = 40
local_budget = 20
np = 8
no = 8

[macro.target]
paths = {target_paths}

[opt_bench]
seeds = 2

[greeks]
futures = 1
"""


def write_config(tmp_path, data_dir, name="run.toml", target_paths=5000, extra=""):
    p = tmp_path / name
    p.write_text(SMALL.format(d=data_dir.as_posix(), target_paths=target_paths) + extra)
    return p


def outputs(out: Path) -> dict:
    """Every artifact except the manifest, plus the manifest's output hashes."""
    files = {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}
    files["hashes"] = json.loads((out / "manifest.json").read_text())["outputs"]
    return files


def run(argv, capsys):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def error_of(captured) -> dict:
    return json.loads(captured.err.strip().splitlines()[-1])


@pytest.fixture(scope="module")
def config(tmp_path_factory, data_dir):
    return write_config(tmp_path_factory.mktemp("cfg"), data_dir)


class TestErrors:
    def test_missing_config(self, tmp_path, capsys):
        code, cap = run(["price", tmp_path / "nope.toml"], capsys)
        assert code == EXIT_VALIDATION
        err = error_of(cap)
        assert set(err) == {"error", "message", "exit_code", "command"}
        assert err["exit_code"] == EXIT_VALIDATION and err["command"] == "price"

    def test_negative_seed(self, config, tmp_path, capsys):
        code, cap = run(["opt-bench", config, "--seed", "-1", "--out", tmp_path], capsys)
        assert code == EXIT_VALIDATION and "seed" in error_of(cap)["message"]

    def test_missing_contract(self, config, tmp_path, capsys):
        code, cap = run(["price", config, "--contract", tmp_path / "none.json", "--out", tmp_path], capsys)
        assert code == EXIT_VALIDATION

    def test_bad_optimizer_population(self, tmp_path, data_dir, capsys):
        cfg = write_config(tmp_path, data_dir).read_text().replace("np = 8\nno = 8\n", "")
        (tmp_path / "bad.toml").write_text(cfg)
        code, cap = run(["calibrate-macro", tmp_path / "bad.toml", "--out", tmp_path / "o"], capsys)
        assert code == EXIT_VALIDATION and "budget" in error_of(cap)["message"]

    def test_noisy_target_is_calibration_failure(self, tmp_path, data_dir, capsys):
        cfg = write_config(tmp_path, data_dir, target_paths=2000)
        code, cap = run(["calibrate-macro", cfg, "--out", tmp_path / "o"], capsys)
        assert code == EXIT_CALIBRATION
        assert error_of(cap)["error"] == "CalibrationError"

    def test_missing_price_file(self, config, tmp_path, capsys):
        code, _ = run(["index-replay", config, "--prices", tmp_path / "p.csv", "--out", tmp_path], capsys)
        assert code == EXIT_VALIDATION


class TestIndexReplay:
    def test_matches_library(self, config, tmp_path, capsys):
        cal = RollCalendar()
        dates = [d for d in cal.business_days(REFERENCE_DATE, MATURITIES[2])][:40]
        mats = MATURITIES[:4]
        rng = np.random.default_rng(5)
        prices = 60.0 * np.exp(np.cumsum(rng.normal(0, 0.01, (len(dates), len(mats))), axis=0))
        prices[-1, -1] = np.nan
        f = tmp_path / "prices.csv"
        with f.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["date", *[m.isoformat() for m in mats]])
            for d, row in zip(dates, prices):
                w.writerow([d.isoformat(), *["" if np.isnan(x) else repr(float(x)) for x in row]])
        code, _ = run(["index-replay", config, "--prices", f, "--i0", "100", "--out", tmp_path / "o"], capsys)
        assert code == EXIT_OK
        with (tmp_path / "o" / "index.csv").open() as fh:
            got = np.array([float(r["index"]) for r in csv.DictReader(fh)])
        ref = replay_index(100.0, dates, mats, prices, cal)
        assert np.array_equal(got, ref)
        manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
        assert manifest["command"] == "index-replay" and "prices" in manifest["inputs"]


class TestOptBench:
    def test_summary(self, config, tmp_path, capsys):
        code, _ = run(["opt-bench", config, "--out", tmp_path], capsys)
        assert code == EXIT_OK
        summary = json.loads((tmp_path / "opt_bench.json").read_text())
        assert summary["seeds"] == 2 and summary["passed"]["rosenbrock2d"] == 2


@pytest.fixture(scope="module")
def runs(config, tmp_path_factory):
    """Two identical price runs and one on three RNG threads."""
    base = tmp_path_factory.mktemp("price")
    out = {}
    for label, threads in (("a", 1), ("b", 1), ("c", 3)):
        assert main(["price", str(config), "--out", str(base / label), "--threads", str(threads)]) == EXIT_OK
        out[label] = base / label
    return out


class TestPriceAndDeterminism:

    def test_artifacts(self, runs):
        names = {p.name for p in runs["a"].iterdir()}
        assert {"prices.csv", "martingale.csv", "contract.json", "manifest.json"} <= names
        with (runs["a"] / "prices.csv").open() as fh:
            rows = list(csv.DictReader(fh))
        assert [r["model"] for r in rows] == ["micro", "macro"]
        assert all(float(r["value"]) > 0 and int(r["n_paths"]) == 2000 for r in rows)

    def test_manifest(self, runs):
        m = json.loads((runs["a"] / "manifest.json").read_text())
        assert m["seed"] == 7 and m["command"] == "price"
        assert set(m["outputs"]) == {"prices.csv", "martingale.csv", "contract.json"}
        assert {"futures_curve", "discount", "contract"} <= set(m["inputs"])
        assert {"numpy", "scipy", "python", "commodity_slv"} <= set(m["versions"])

    def test_rerun_byte_identical(self, runs):
        assert outputs(runs["a"]) == outputs(runs["b"])

    def test_thread_count_byte_identical(self, runs):
        assert outputs(runs["a"]) == outputs(runs["c"])

    def test_martingale_rows(self, runs):
        with (runs["a"] / "martingale.csv").open() as fh:
            z = [float(r["z"]) for r in csv.DictReader(fh)]
        assert z and max(abs(v) for v in z) < 4.0


class TestCalibrateLV:
    def test_outputs(self, config, tmp_path, capsys):
        code, _ = run(["calibrate-lv", config, "--a", "0.3", "--out", tmp_path], capsys)
        assert code == EXIT_OK
        rep = json.loads((tmp_path / "lv_report.json").read_text())
        assert rep["a"] == 0.3 and {"spot", "index"} <= set(rep)
        with (tmp_path / "lv_spot.csv").open() as fh:
            vols = [float(r["local_vol"]) for r in csv.DictReader(fh)]
        assert vols and all(v > 0 for v in vols)
