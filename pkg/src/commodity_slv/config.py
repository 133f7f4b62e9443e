"""Run configuration: TOML file, centralized defaults and flag overrides."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass
from datetime import date
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .localvol_calib import LVCalibConfig
from .market_data import ValidationError
from .mc_engine import MacroParams, MicroParams
from .model_calibration import DEFAULT_MACRO_BOUNDS, DEFAULT_MICRO_BOUNDS, MCConfig
from .pde_solver import GridConfig

THREADS_ENV = "COMMODITY_SLV_THREADS"

# every numeric knob of the pipeline; recorded verbatim in each manifest
DEFAULTS = {
    "threads": 1,
    "market": {"index_level": 1.0, "holidays": []},
    "pde": {"k_max": 3.0, "n_space": 400, "max_dt": 1.0 / 365.0, "rannacher_steps": 2},
    "lv": {"tol": 1e-4, "max_iter": 50},
    "mc": {"paths": 20000, "calibration_paths": 20000, "cross": "auto"},
    "micro": {
        "kappa": 1.0, "theta": 1.0, "v0": 1.0,
        "bounds": {k: list(v) for k, v in DEFAULT_MICRO_BOUNDS.items()},
        "optimizer": {"global_budget": 400, "local_budget": 200, "np": 40, "no": 60},
        "initial": {"a": 0.1, "beta": 0.1, "chi": 0.1, "rho": 0.0},
    },
    "macro": {
        "kappa": 1.0, "substeps": 1,
        "bounds": {k: list(v) for k, v in DEFAULT_MACRO_BOUNDS.items()},
        "optimizer": {"global_budget": 1000, "local_budget": 500, "np": 40, "no": 60},
        "target": {"expiries": [], "strikes": [0.8, 0.9, 1.0, 1.1, 1.2], "paths": 50000, "seed": 11},
    },
    "greeks": {"delta_bump": 1e-7, "vega_shift": 0.01, "futures": 3, "vega": False, "central": False},
    "compare": {"vol_shift": 0.01, "refit_sv": False},
    "opt_bench": {"seeds": 10},
}

MICRO_KEYS = ("a", "beta", "chi", "rho")
MACRO_KEYS = ("theta", "chi", "rho", "v0")


class ConfigError(ValidationError):
    pass


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass(frozen=True)
class RunConfig:
    """Resolved configuration; paths are absolute and checked to exist."""

    raw: dict
    root: Path
    seed: int
    out: Path

    # ---- construction -------------------------------------------------------

    @classmethod
    def load(cls, path, seed: int | None = None, paths: int | None = None, out=None,
             threads: int | None = None) -> "RunConfig":
        path = Path(path)
        try:
            with path.open("rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls.from_dict(data, path.resolve().parent, seed=seed, paths=paths, out=out, threads=threads)

    @classmethod
    def from_dict(cls, data: dict, root, seed: int | None = None, paths: int | None = None, out=None,
                  threads: int | None = None) -> "RunConfig":
        root = Path(root)
        raw = _merge(DEFAULTS, data)
        if seed is not None:
            raw["seed"] = seed
        if paths is not None:
            raw["mc"]["paths"] = paths
        if out is not None:
            raw["out"] = str(out)
        if threads is not None:
            raw["threads"] = threads
        elif THREADS_ENV in os.environ:
            try:
                raw["threads"] = int(os.environ[THREADS_ENV])
            except ValueError:
                raise ConfigError(f"{THREADS_ENV} must be an integer") from None
        if "seed" not in raw:
            raise ConfigError("a seed is mandatory (config key 'seed' or --seed)")
        if not isinstance(raw["seed"], int) or raw["seed"] < 0:
            raise ConfigError("seed must be a non-negative integer")
        out_dir = Path(raw.get("out", "out"))
        cfg = cls(raw, root, int(raw["seed"]), out_dir if out_dir.is_absolute() else root / out_dir)
        cfg._validate()
        return cfg

    def _validate(self) -> None:
        mc = self.raw["mc"]
        for key in ("paths", "calibration_paths"):
            if not isinstance(mc[key], int) or mc[key] < 1:
                raise ConfigError(f"mc.{key} must be a positive integer")
        if not isinstance(self.raw["threads"], int) or self.raw["threads"] < 1:
            raise ConfigError("threads must be a positive integer")
        for key in ("futures_curve", "discount"):
            if key not in self.raw["market"]:
                raise ConfigError(f"market.{key} is required")
        for key in ("futures_curve", "discount", "vols_futures", "vols_index"):
            if key in self.raw["market"]:
                self._existing(self.raw["market"][key], f"market.{key}")
        if "contract" in self.raw:
            self._existing(self.raw["contract"], "contract")
        for section, keys in (("micro", MICRO_KEYS), ("macro", MACRO_KEYS)):
            bounds = self.raw[section]["bounds"]
            for k in keys:
                lo, hi = bounds[k]
                if not lo <= hi:
                    raise ConfigError(f"{section}.bounds.{k}: lower bound above upper bound")
        self.grid_config()

    def _existing(self, value, name: str) -> Path:
        p = Path(value)
        p = p if p.is_absolute() else self.root / p
        if not p.exists():
            raise ConfigError(f"{name}: file not found: {p}")
        return p

    # ---- accessors ----------------------------------------------------------

    def path(self, key: str) -> Path | None:
        m = self.raw["market"]
        return self._existing(m[key], f"market.{key}") if key in m else None

    def contract_path(self, override=None) -> Path:
        if override is not None:
            # flag paths are relative to the working directory, not the config file
            p = Path(override).resolve()
            if not p.exists():
                raise ConfigError(f"--contract: file not found: {p}")
            return p
        if "contract" not in self.raw:
            raise ConfigError("no contract given (config key 'contract' or --contract)")
        return self._existing(self.raw["contract"], "contract")

    def input_files(self) -> dict:
        files = {k: self.path(k) for k in ("futures_curve", "discount", "vols_futures", "vols_index")}
        if "contract" in self.raw:
            files["contract"] = self.contract_path()
        return {k: v for k, v in files.items() if v is not None}

    @property
    def threads(self) -> int:
        return int(self.raw["threads"])

    @property
    def n_paths(self) -> int:
        return int(self.raw["mc"]["paths"])

    def grid_config(self) -> GridConfig:
        p = self.raw["pde"]
        try:
            return GridConfig(k_max=float(p["k_max"]), n_space=int(p["n_space"]), max_dt=float(p["max_dt"]),
                              rannacher_steps=int(p["rannacher_steps"]))
        except ValueError as exc:
            raise ConfigError(f"pde: {exc}") from None

    def lv_config(self) -> LVCalibConfig:
        lv = self.raw["lv"]
        return LVCalibConfig(tol=float(lv["tol"]), max_iter=int(lv["max_iter"]), grid=self.grid_config())

    def mc_config(self) -> MCConfig:
        mc = self.raw["mc"]
        # the particle calibration run reuses the run seed unless pinned separately
        return MCConfig(n_paths=int(mc["calibration_paths"]), seed=int(mc.get("calibration_seed", self.seed)),
                        n_threads=self.threads, cross=str(mc["cross"]))

    def micro_params(self, override: dict | None = None) -> MicroParams:
        m = {**self.raw["micro"], **(override or {})}
        missing = [k for k in MICRO_KEYS if k not in m]
        if missing:
            raise ConfigError(f"micro parameters missing: {', '.join(missing)} (set [micro] or --micro-params)")
        return MicroParams(**{k: float(m[k]) for k in (*MICRO_KEYS, "kappa", "theta", "v0")})

    def micro_initial(self) -> MicroParams:
        m = self.raw["micro"]
        return MicroParams(**{k: float(m["initial"][k]) for k in MICRO_KEYS},
                           kappa=float(m["kappa"]), theta=float(m["theta"]), v0=float(m["v0"]))

    def macro_params(self, override: dict | None = None) -> MacroParams | None:
        m = {**self.raw["macro"], **(override or {})}
        present = [k for k in MACRO_KEYS if k in m]
        if not present:
            return None
        if len(present) != len(MACRO_KEYS):
            raise ConfigError("macro parameters must be given all together (theta, chi, rho, v0) or not at all")
        return MacroParams(**{k: float(m[k]) for k in MACRO_KEYS}, kappa=float(m["kappa"]))

    def bounds(self, section: str) -> dict:
        return {k: tuple(map(float, v)) for k, v in self.raw[section]["bounds"].items()}

    def optimizer(self, section: str) -> dict:
        o = self.raw[section]["optimizer"]
        return {"global_budget": int(o["global_budget"]), "local_budget": int(o["local_budget"]),
                "np_": int(o["np"]), "no": int(o["no"])}

    def target_expiries(self, fallback) -> list[date]:
        e = self.raw["macro"]["target"]["expiries"]
        return sorted(date.fromisoformat(str(x)) for x in e) if e else sorted(set(fallback))

    def target_strikes(self) -> list[float]:
        return [float(k) for k in self.raw["macro"]["target"]["strikes"]]

    def resolved(self) -> dict:
        """The merged configuration as recorded in manifests (paths relative to the config root)."""
        return copy.deepcopy(self.raw)
