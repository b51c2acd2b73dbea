"""Experiment configuration read from TOML.

Every block and key is checked against the defaults below; unknown keys
are errors so that a misspelled parameter never passes silently.
"""

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ImportError:  # python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .graph import GraphSpec
from .kernel import KernelSpec, MultiKernelSpec
from .projector import Geometry
from .recon import ALGORITHMS, ReconConfig

__all__ = ["DEFAULTS", "ExperimentConfig", "load_config", "parse_config", "stable_hash"]

_KERNEL_DEFAULTS = {
    "kind": "gaussian", "sigma": 0.5, "gamma": 1.0, "degree": 2.0,
    "neighborhood_mode": "window", "J": 21, "knn": 48, "feature_window": 3,
    "normalize_rows": True, "G": 2,
}

DEFAULTS = {
    "seed": 0,
    "output_dir": "mkrem-out",
    "workers": 1,
    "geometry": {"image_width": 64, "image_height": 64, "n_angles": 90, "n_radial": 95,
                 "pixel_size": 1.0},
    "phantom": {"lesion": True, "lesion_in_prior": True, "prior_noise": 0.02, "n_priors": 1,
                "seed": 0},
    "noise": {"target_counts": 64000.0, "n_realizations": 10, "randoms_fraction": 0.05},
    "kernel_a": dict(_KERNEL_DEFAULTS),
    "kernel_b": dict(_KERNEL_DEFAULTS, J=3),
    "dictionary": {"patch_w": 5, "stride": 1, "n_train_patches": 400, "S": 50,
                   "sparsity_s": 50, "dl_iters": 50, "dl_seed": 0, "map_kernel": False},
    "graph": {"window_m": 9, "knn": 7, "knn_graph": 32, "eps_t": 1e-4, "t_max": 20,
              "symmetrize_Q": False, "dense": False},
    "recon": {
        "algorithms": ["mlem", "mlem_f", "kem", "krem", "mkrem"],
        "n_iters": 100, "record_every": 1, "denom_floor": 1e-8, "filter_window": 5,
        "sigma_f": 1.0, "outside_kt": False,
        "krem": {"beta1": 0.003, "beta2": 0.13},
        "mkrem": {"beta1": 0.003, "beta2": 0.13},
    },
    "report": {"profile_row": -1, "bias_variance_start": 3, "bias_variance_stop": 93,
               "bias_variance_step": 10, "sweep_J": [9, 15, 21, 27],
               "sweep_algorithms": ["kem", "krem", "mkrem"]},
}

_RECON_SCALARS = ("n_iters", "record_every", "denom_floor", "filter_window", "sigma_f",
                  "outside_kt")


def _merge(base, over, path=""):
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{where!r} must be a table")
            out[key] = _merge(base[key], val, where + ".")
            continue
        ref = base[key]
        if isinstance(ref, bool) and not isinstance(val, bool):
            raise ConfigError(f"{where!r} must be true or false")
        if isinstance(ref, (int, float)) and not isinstance(ref, bool):
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise ConfigError(f"{where!r} must be a number")
            if isinstance(ref, int) and not isinstance(ref, bool) and not float(val).is_integer():
                raise ConfigError(f"{where!r} must be an integer")
            val = type(ref)(val)
        if isinstance(ref, str) and not isinstance(val, str):
            raise ConfigError(f"{where!r} must be a string")
        if isinstance(ref, list) and not isinstance(val, list):
            raise ConfigError(f"{where!r} must be an array")
        out[key] = val
    return out


def stable_hash(obj):
    """SHA-256 of a canonical JSON rendering."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _kernel_spec(block, J=None):
    try:
        return KernelSpec(kind=block["kind"], sigma=block["sigma"], gamma=block["gamma"],
                          degree=block["degree"], neighborhood=block["neighborhood_mode"],
                          J=block["J"] if J is None else int(J), knn=block["knn"],
                          feature_window=block["feature_window"],
                          normalize_rows=block["normalize_rows"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """Validated configuration; ``raw`` holds the merged dictionary."""

    raw: dict

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def output_dir(self):
        return Path(self.raw["output_dir"])

    @property
    def seed(self):
        return self.raw["seed"]

    @property
    def geometry(self):
        try:
            return Geometry(**self.raw["geometry"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def kernel(self, which, G=None, J=None):
        """Multi-kernel spec for block ``kernel_a`` or ``kernel_b``."""
        block = self.raw[which]
        G = block["G"] if G is None else G
        if G < 1:
            raise ConfigError(f"{which}.G must be >= 1")
        return MultiKernelSpec.repeated(_kernel_spec(block, J), G)

    @property
    def graph(self):
        try:
            return GraphSpec(**self.raw["graph"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def algorithms(self):
        return list(self.raw["recon"]["algorithms"])

    def recon(self, algorithm):
        block = self.raw["recon"]
        kw = {k: block[k] for k in _RECON_SCALARS}
        if algorithm in ("krem", "mkrem"):
            kw.update(block[algorithm])
        try:
            return ReconConfig(algorithm=algorithm, seed=self.raw["seed"], **kw)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def section_hash(self, *keys):
        return stable_hash({k: self.raw[k] for k in keys})


def parse_config(data):
    """Merge a parsed TOML mapping onto the defaults and validate it."""
    raw = _merge(DEFAULTS, data)
    cfg = ExperimentConfig(raw)
    for algo in cfg.algorithms:
        if algo not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {algo!r} in recon.algorithms")
    for algo in raw["report"]["sweep_algorithms"]:
        if algo not in ("kem", "krem", "mkrem"):
            raise ConfigError(f"sweep algorithm must be a kernel method, got {algo!r}")
    if raw["noise"]["n_realizations"] < 1 or raw["noise"]["target_counts"] <= 0:
        raise ConfigError("noise needs n_realizations >= 1 and target_counts > 0")
    if not 0 <= raw["noise"]["randoms_fraction"]:
        raise ConfigError("noise.randoms_fraction must be non-negative")
    if raw["workers"] < 1:
        raise ConfigError("workers must be >= 1")
    d = raw["dictionary"]
    if min(d["patch_w"], d["stride"], d["S"], d["sparsity_s"], d["dl_iters"],
           d["n_train_patches"]) < 1:
        raise ConfigError("dictionary sizes must all be >= 1")
    # touch the typed views so invalid values surface here
    cfg.geometry, cfg.graph
    for which in ("kernel_a", "kernel_b"):
        cfg.kernel(which)
    for algo in cfg.algorithms:
        cfg.recon(algo)
    return cfg


def load_config(path=None, overrides=None):
    """Read ``path`` (or use defaults), then apply nested ``overrides``."""
    data = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    cfg = parse_config(data)
    if overrides:
        cfg = parse_config(_deep_update(copy.deepcopy(data), overrides))
    return cfg


def _deep_update(base, upd):
    for k, v in upd.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base
