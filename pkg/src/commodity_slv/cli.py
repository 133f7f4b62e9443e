"""Command-line front end.

Every subcommand reads a TOML run configuration, writes its artifacts into
the output directory and finishes with ``manifest.json`` recording the
input hashes, the resolved configuration, the seed, library versions and
the hashes of the artifacts written.

Exit codes: 0 success, 1 invalid input, 2 numerical failure,
3 calibration failure. Errors are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
from datetime import date, datetime, timezone
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import RunConfig
from .contracts import (
    ContractError,
    contract_to_dict,
    load_contract,
    mc_estimate,
    pathwise_values,
    with_reference_level,
)
from .heston import PricingError
from .index_engine import replay_index
from .localvol_calib import CalibrationError, calibrate_index_lv, calibrate_spot_lv
from .market_data import INDEX, MarketDataError, RollCalendar, load_market
from .mc_engine import SimulationError
from .model_calibration import (
    CalibrationTarget,
    build_micro_model,
    calibrate_macro,
    calibrate_micro,
    micro_index_surface,
)
from .optim import hybrid_minimize
from .optim.base import BoxDomain
from .pde_solver import PDEError
from .risk import (
    compare_models,
    delta_futures,
    delta_index_from_micro,
    delta_index_macro,
    index_futures_derivative,
    vega_futures,
    vega_index_macro,
)

log = logging.getLogger("commodity_slv")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_CALIBRATION = 0, 1, 2, 3


# ---------------------------------------------------------------------------
# Artifact writing
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (date, Path)):
        return str(obj)
    return obj


class Artifacts:
    """Output directory bookkeeping; every file written is hashed into the manifest."""

    def __init__(self, out: Path):
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def json(self, name: str, obj) -> Path:
        p = self.out / name
        p.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
        self.files.append(p)
        return p

    def csv(self, name: str, header, rows) -> Path:
        p = self.out / name
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in rows:
                w.writerow([_cell(x) for x in r])
        self.files.append(p)
        return p

    def manifest(self, command: str, cfg: RunConfig, inputs: dict) -> Path:
        manifest = {
            "command": command,
            "seed": cfg.seed,
            "config": cfg.resolved(),
            "inputs": {k: {"path": str(p), "sha256": _sha256(Path(p))} for k, p in sorted(inputs.items())},
            "outputs": {p.name: _sha256(p) for p in self.files},
            "versions": {"commodity_slv": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        p = self.out / "manifest.json"
        p.write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
        return p


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, date):
        return x.isoformat()
    return x


# ---------------------------------------------------------------------------
# Pipeline pieces
# ---------------------------------------------------------------------------

def _market(cfg: RunConfig):
    m = cfg.raw["market"]
    return load_market(cfg.path("futures_curve"), cfg.path("discount"), cfg.path("vols_futures"),
                       cfg.path("vols_index"), index_level=float(m["index_level"]),
                       holidays=[date.fromisoformat(str(d)) for d in m["holidays"]])


def _read_params(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise MarketDataError(f"parameter file not found: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise MarketDataError(f"{p}: invalid JSON ({exc})") from None
    return obj.get("params", obj)


def _contract(cfg: RunConfig, args):
    path = cfg.contract_path(getattr(args, "contract", None))
    return load_contract(path), path


def _horizon(market, dates) -> date:
    dates = [d for d in dates if d > market.reference_date]
    if not dates:
        raise MarketDataError("nothing to simulate: all dates are on or before the reference date")
    return max(dates)


def _micro(cfg: RunConfig, market, args, dates):
    params = cfg.micro_params(_read_params(getattr(args, "micro_params", None)))
    return build_micro_model(market, params, _horizon(market, dates), cfg.mc_config(), lv_config=cfg.lv_config())


def _target_expiries(cfg: RunConfig, market, contract=None) -> list[date]:
    fallback = []
    if market.index_vols is not None:
        fallback = market.index_vols.expiries()
    elif contract is not None:
        fallback = [d for d in contract.required_dates(market.calendar) if d > market.reference_date][-1:]
    exps = cfg.target_expiries(fallback)
    if not exps:
        raise MarketDataError("no index target expiries (set macro.target.expiries or provide vols_index)")
    return exps


def _macro_settings(cfg: RunConfig, horizon: date, fixed=None) -> dict:
    macro = cfg.raw["macro"]
    return dict(horizon=horizon, bounds=cfg.bounds("macro"), seed=cfg.seed, mc=cfg.mc_config(),
                kappa=float(macro["kappa"]), substeps=int(macro["substeps"]), lv_config=cfg.lv_config(),
                fixed_params=fixed, **cfg.optimizer("macro"))


def _micro_target(cfg: RunConfig, micro, expiries):
    t = cfg.raw["macro"]["target"]
    return micro_index_surface(micro, expiries, cfg.target_strikes(), n_paths=int(t["paths"]), seed=int(t["seed"]))


def _macro(cfg: RunConfig, micro, args, expiries, horizon):
    target = _micro_target(cfg, micro, expiries)
    fixed = cfg.macro_params(_read_params(getattr(args, "macro_params", None)))
    model, report = calibrate_macro(target, micro.market.discount, micro.market.calendar,
                                    **_macro_settings(cfg, horizon, fixed))
    return model, report, target


def _target_rows(target: CalibrationTarget):
    ses = target.std_errors or [None] * len(target.quotes)
    return [(q.expiry, q.strike, q.vol, s) for q, s in zip(target.quotes, ses)]


def _residual_rows(report):
    return [(r["expiry"], r["strike"], r["target"], r["model"], r["residual"]) for r in report.residuals]


def _model_values(model, kind: str, contract, n: int, seed: int, threads: int):
    if kind == "micro":
        market = model.market
        spec = with_reference_level(contract, market.index_level) if contract.underlier == INDEX else contract
        bundle = model.simulate(n, seed, store_dates=sorted(set(contract.required_dates(market.calendar))),
                                store_futures=contract.underlier != INDEX, n_threads=threads)
        return pathwise_values(spec, bundle, market.discount, market.calendar), bundle
    if contract.underlier != INDEX:
        raise ContractError("the macro model only prices index contracts")
    spec = with_reference_level(contract, model.index_level)
    bundle = model.simulate(n, seed, store_dates=sorted(set(contract.required_dates(model.calendar))),
                            n_threads=threads)
    return pathwise_values(spec, bundle, model.discount, model.calendar), bundle


def _martingale_rows(bundle, label: str):
    """Mean and standard error of the simulated index on each stored date against ``I_0``."""
    rows = []
    for j, d in enumerate(bundle.store_dates):
        est = mc_estimate(bundle.index[:, j])
        z = (est.value - bundle.index_level) / est.std_error if est.std_error > 0 else 0.0
        rows.append((label, d, est.value, est.std_error, z))
    return rows


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_calibrate_lv(cfg: RunConfig, args, art: Artifacts):
    market = _market(cfg)
    if args.a is not None:
        a = args.a
    else:
        a = float(cfg.raw["micro"].get("a", 0.0))
    lv, report = calibrate_spot_lv(market, a, config=cfg.lv_config())
    art.csv("lv_spot.csv", ["t", "k", "local_vol"],
            ((t, k, v) for i, t in enumerate(lv.times) for k, v in zip(lv.k, lv.values[i])))
    out = {"a": a, "spot": report.to_dict()}
    if market.index_vols is not None:
        lvi, rep_i = calibrate_index_lv(market.index_vols, market.discount, market.index_level, cfg.lv_config())
        art.csv("lv_index.csv", ["t", "k", "local_vol"],
                ((t, k, v) for i, t in enumerate(lvi.times) for k, v in zip(lvi.k, lvi.values[i])))
        out["index"] = rep_i.to_dict()
    art.json("lv_report.json", out)


def cmd_calibrate_micro(cfg: RunConfig, args, art: Artifacts):
    market = _market(cfg)
    if market.index_vols is None:
        raise MarketDataError("calibrate-micro needs market.vols_index")
    target = CalibrationTarget.from_surface(market.index_vols, market.index_level)
    model, report = calibrate_micro(market, target, cfg.bounds("micro"), seed=cfg.seed, mc=cfg.mc_config(),
                                    fixed=cfg.micro_initial(), lv_config=cfg.lv_config(), **cfg.optimizer("micro"))
    art.json("micro_params.json", report.params)
    art.json("micro_calibration.json", report.to_dict())
    art.csv("micro_residuals.csv", ["expiry", "strike", "target", "model", "residual"], _residual_rows(report))
    for w in report.warnings:
        log.warning(w)


def cmd_calibrate_macro(cfg: RunConfig, args, art: Artifacts):
    market = _market(cfg)
    expiries = _target_expiries(cfg, market)
    horizon = _horizon(market, expiries)
    micro = _micro(cfg, market, args, expiries)
    model, report, target = _macro(cfg, micro, args, expiries, horizon)
    art.csv("index_target.csv", ["expiry", "strike", "vol", "vol_std_error"], _target_rows(target))
    art.json("macro_params.json", report.params)
    art.json("macro_calibration.json", report.to_dict())
    art.csv("macro_residuals.csv", ["expiry", "strike", "target", "model", "residual"], _residual_rows(report))
    for w in report.warnings:
        log.warning(w)


def cmd_price(cfg: RunConfig, args, art: Artifacts):
    market = _market(cfg)
    contract, _ = _contract(cfg, args)
    dates = contract.required_dates(market.calendar)
    kinds = ["micro", "macro"] if args.model == "both" else [args.model]
    micro = _micro(cfg, market, args, dates)
    rows, mart = [], []
    models = {"micro": micro}
    if "macro" in kinds:
        expiries = _target_expiries(cfg, market, contract)
        models["macro"], _, _ = _macro(cfg, micro, args, expiries, _horizon(market, [*dates, *expiries]))
    for kind in kinds:
        values, bundle = _model_values(models[kind], kind, contract, cfg.n_paths, cfg.seed, cfg.threads)
        est = mc_estimate(values)
        rows.append((kind, est.value, est.std_error, est.n_paths))
        mart.extend(_martingale_rows(bundle, kind))
    art.csv("prices.csv", ["model", "value", "std_error", "n_paths"], rows)
    art.csv("martingale.csv", ["model", "date", "mean_index", "std_error", "z"], mart)
    art.json("contract.json", contract_to_dict(contract))


def cmd_greeks(cfg: RunConfig, args, art: Artifacts):
    market = _market(cfg)
    contract, _ = _contract(cfg, args)
    g = cfg.raw["greeks"]
    dates = contract.required_dates(market.calendar)
    micro = _micro(cfg, market, args, dates)
    n, seed, th = cfg.n_paths, cfg.seed, cfg.threads
    bump, central = float(g["delta_bump"]), bool(g["central"])
    rows = []
    mats = market.futures.maturities[: int(g["futures"])]
    deltas = {}
    for T in mats:
        s = delta_futures(micro, contract, T, n, seed, bump, central, th)
        deltas[T] = s
        rows.append((s.scenario, s.value, s.std_error, s.bump, s.method))
    if contract.underlier == INDEX:
        F1 = market.futures.maturities[0]
        d1 = deltas.get(F1) or delta_futures(micro, contract, F1, n, seed, bump, central, th)
        dI = index_futures_derivative(micro, F1)
        v, se = delta_index_from_micro(d1.value, dI, d1.std_error)
        rows.append(("delta_I_micro", v, se, bump, "chain_rule"))
        expiries = _target_expiries(cfg, market, contract)
        macro, _, target = _macro(cfg, micro, args, expiries, _horizon(market, [*dates, *expiries]))
        s = delta_index_macro(macro, contract, n, seed, bump, central, th)
        rows.append(("delta_I_macro", s.value, s.std_error, s.bump, s.method))
    if g["vega"]:
        shift = float(g["vega_shift"])
        for T in mats:
            s = vega_futures(micro, contract, T, n, seed, shift, th)
            rows.append((s.scenario, s.value, s.std_error, s.bump, s.method))
        if contract.underlier == INDEX:
            for e in target.expiries():
                s = vega_index_macro(macro, target, contract, e, n, seed, shift, n_threads=th)
                rows.append((s.scenario, s.value, s.std_error, s.bump, s.method))
    art.csv("greeks.csv", ["scenario", "value", "std_error", "bump", "method"], rows)


def cmd_compare(cfg: RunConfig, args, art: Artifacts):
    market = _market(cfg)
    contract, _ = _contract(cfg, args)
    if contract.underlier != INDEX:
        raise ContractError("compare needs an index contract")
    dates = contract.required_dates(market.calendar)
    expiries = _target_expiries(cfg, market, contract)
    horizon = _horizon(market, [*dates, *expiries])
    micro = _micro(cfg, market, args, [*dates, *expiries])
    c = cfg.raw["compare"]
    t = cfg.raw["macro"]["target"]
    fixed = cfg.macro_params(_read_params(getattr(args, "macro_params", None)))
    res = compare_models(micro, contract, expiries, cfg.target_strikes(), cfg.n_paths, cfg.seed,
                         macro_settings=_macro_settings(cfg, horizon, fixed), shift=float(c["vol_shift"]),
                         target_paths=int(t["paths"]), target_seed=int(t["seed"]), refit_sv=bool(c["refit_sv"]),
                         n_threads=cfg.threads)
    rep = res.report
    art.csv("compare.csv", ["quantity", "value", "std_error"], rep.rows())
    flags = [("vs_macro", rep.vs_macro), ("vs_micro", rep.vs_micro)]
    art.csv("compare_flags.csv", ["ratio", "value", "std_error", "relevant", "reliable"],
            [(k, r.ratio, r.std_error, r.relevant, r.reliable) for k, r in flags])
    art.json("compare.json", {**rep.to_dict(), "contract": contract_to_dict(contract),
                              "macro_params": res.macro.params.__dict__,
                              "macro_params_bumped": res.macro_bumped.params.__dict__})
    for label, tgt in (("index_target.csv", res.target), ("index_target_bumped.csv", res.target_bumped)):
        art.csv(label, ["expiry", "strike", "vol", "vol_std_error"], _target_rows(tgt))


def cmd_index_replay(cfg: RunConfig, args, art: Artifacts):
    """Replay the index from a business-daily futures settlement file.

    The file has a ``date`` column followed by one column per futures
    maturity (ISO dates as headers); empty cells mark missing quotes.
    """
    path = Path(args.prices)
    if not path.exists():
        raise MarketDataError(f"price file not found: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2 or rows[0][0] != "date":
        raise MarketDataError(f"{path}: expected a header 'date,<maturity>,...' and at least one row")
    try:
        mats = [date.fromisoformat(h) for h in rows[0][1:]]
        dates = [date.fromisoformat(r[0]) for r in rows[1:]]
        prices = np.array([[float(x) if x.strip() else np.nan for x in r[1:]] for r in rows[1:]])
    except ValueError as exc:
        raise MarketDataError(f"{path}: {exc}") from None
    cal = RollCalendar(frozenset(date.fromisoformat(str(d)) for d in cfg.raw["market"]["holidays"]))
    I0 = float(args.i0 if args.i0 is not None else cfg.raw["market"]["index_level"])
    try:
        index = replay_index(I0, dates, mats, prices, cal)
    except ValueError as exc:
        raise MarketDataError(str(exc)) from None
    art.csv("index.csv", ["date", "index"], zip(dates, index))
    return {"prices": path}


def _rosenbrock(x):
    return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2


def _rastrigin(x):
    x = np.asarray(x)
    return 10 * len(x) + float(np.sum(x * x - 10 * np.cos(2 * np.pi * x)))


BENCHMARKS = {
    "rosenbrock2d": (_rosenbrock, BoxDomain([-5.0, -5.0], [5.0, 5.0]), 10000, 10000, 1e-4),
    "rastrigin3d": (_rastrigin, BoxDomain([-5.12] * 3, [5.12] * 3), 20000, 10000, 1.0),
}


def cmd_opt_bench(cfg: RunConfig, args, art: Artifacts):
    n = int(cfg.raw["opt_bench"]["seeds"])
    rows = []
    for name, (f, dom, gb, lb, tol) in BENCHMARKS.items():
        for s in range(cfg.seed, cfg.seed + n):
            rep = hybrid_minimize(f, dom, seed=s, global_budget=gb, local_budget=lb)
            rows.append((name, s, rep.fun, rep.nfev, rep.reason, rep.fun <= tol, *rep.x))
    art.csv("opt_bench.csv", ["function", "seed", "fun", "nfev", "reason", "passed", "x0", "x1", "x2"],
            [r + ("",) * (9 - len(r)) for r in rows])
    summary = {name: sum(1 for r in rows if r[0] == name and r[5]) for name in BENCHMARKS}
    art.json("opt_bench.json", {"passed": summary, "seeds": n})


COMMANDS = {
    "calibrate-lv": cmd_calibrate_lv,
    "calibrate-micro": cmd_calibrate_micro,
    "calibrate-macro": cmd_calibrate_macro,
    "price": cmd_price,
    "greeks": cmd_greeks,
    "compare": cmd_compare,
    "index-replay": cmd_index_replay,
    "opt-bench": cmd_opt_bench,
}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="commodity-slv", description="Micro/macro SLV models for a commodity ER index.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_):
        s = sub.add_parser(name, help=help_)
        s.add_argument("config", help="TOML run configuration")
        s.add_argument("--seed", type=int, default=None, help="override the configured seed")
        s.add_argument("--paths", type=int, default=None, help="override the pricing path count")
        s.add_argument("--out", default=None, help="override the output directory")
        s.add_argument("--threads", type=int, default=None, help="RNG block threads (default: config or env)")
        return s

    s = add("calibrate-lv", "calibrate the spot-factor (and index) local volatility")
    s.add_argument("--a", type=float, default=None, help="mean-reversion speed (default: micro.a or 0)")
    add("calibrate-micro", "fit the micro model to index vanillas")
    for name, help_ in (("calibrate-macro", "fit the macro model to the micro-generated index smile"),
                        ("price", "price a contract"),
                        ("greeks", "bump-and-reprice sensitivities"),
                        ("compare", "micro vs macro price differences in vega units")):
        s = add(name, help_)
        s.add_argument("--micro-params", default=None, help="JSON with a, beta, chi, rho (e.g. micro_params.json)")
        s.add_argument("--macro-params", default=None, help="JSON with theta, chi, rho, v0 to skip the SV fit")
        if name != "calibrate-macro":
            s.add_argument("--contract", default=None, help="contract JSON (default: config 'contract')")
        if name == "price":
            s.add_argument("--model", choices=("micro", "macro", "both"), default="both")
    s = add("index-replay", "replay the index from a futures settlement file")
    s.add_argument("--prices", required=True, help="CSV: date,<maturity>,... business-daily settlements")
    s.add_argument("--i0", type=float, default=None, help="index level on the first date")
    add("opt-bench", "hybrid optimizer on the Rosenbrock / Rastrigin suite")
    return p


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, CalibrationError):
        return EXIT_CALIBRATION
    if isinstance(exc, (SimulationError, PDEError, PricingError, ArithmeticError)):
        return EXIT_NUMERICAL
    return EXIT_VALIDATION


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = RunConfig.load(args.config, seed=args.seed, paths=args.paths, out=args.out, threads=args.threads)
        art = Artifacts(cfg.out)
        extra = COMMANDS[args.command](cfg, args, art) or {}
        inputs = {**cfg.input_files(), **extra}
        for key in ("micro_params", "macro_params", "contract"):
            if getattr(args, key, None):
                inputs[key] = Path(getattr(args, key))
        art.manifest(args.command, cfg, inputs)
    except (MarketDataError, ContractError, ValueError, KeyError, ArithmeticError, CalibrationError,
            np.linalg.LinAlgError) as exc:
        code = _exit_code(exc)
        if isinstance(exc, np.linalg.LinAlgError):
            code = EXIT_NUMERICAL
        err = {"error": type(exc).__name__, "message": str(exc), "exit_code": code, "command": args.command}
        print(json.dumps(err, sort_keys=True), file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
