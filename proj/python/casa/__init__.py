"""Python front end for the casa native core.

Structured results come back from the extension as JSON text; the wrappers
here decode them into plain dicts.
"""

from __future__ import annotations

import glob
import importlib.util
import json
import os
import sys


def _load_extension():
    try:
        from . import _casa  # installed wheel layout

        return _casa
    except ImportError:
        pass
    # development layout: the extension lives in the CMake build tree
    where = os.environ.get("CASA_EXTENSION_DIR")
    if not where:
        raise ImportError("casa._casa is not built; set CASA_EXTENSION_DIR to the build directory")
    hits = sorted(glob.glob(os.path.join(where, "_casa*.so")) + glob.glob(os.path.join(where, "_casa*.pyd")))
    if not hits:
        raise ImportError(f"no _casa extension under {where}")
    spec = importlib.util.spec_from_file_location("casa._casa", hits[0])
    module = importlib.util.module_from_spec(spec)
    sys.modules["casa._casa"] = module
    spec.loader.exec_module(module)
    return module


_ext = _load_extension()

NonFiniteError = _ext.NonFiniteError
ContractError = _ext.ContractError
ImdUnbounded = _ext.ImdUnbounded

per_class_accuracy = _ext.per_class_accuracy
target_marginal = _ext.target_marginal
largest_remainder_counts = _ext.largest_remainder_counts
ssd = _ext.ssd
cssd = _ext.cssd
joint_ssd = _ext.joint_ssd
wasserstein_1 = _ext.wasserstein_1
pca = _ext.pca
default_config = _ext.default_config
config_hash = _ext.config_hash


def _kv(config: dict | str | None) -> str:
    if config is None:
        return ""
    if isinstance(config, str):
        return config
    return "".join(f"{k}={_render(v)}\n" for k, v in config.items())


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def config(overrides: dict | str | None = None) -> dict:
    """Validated config as a dict of strings, defaults filled in."""
    text = _ext.normalize_config(_kv(overrides))
    return dict(line.split("=", 1) for line in text.splitlines() if line)


def train(overrides: dict | str | None = None) -> dict:
    """Train one run on the synthetic task and return its record."""
    return json.loads(_ext.train(_kv(overrides)))


def grid(overrides, methods, alphas, seeds, workers: int = 1) -> list[dict]:
    """Run a method x alpha x seed grid; one dict per summary row."""
    text = _ext.grid(_kv(overrides), list(methods), [_render(a) for a in alphas], list(seeds), workers)
    lines = text.splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, row.split(","))) for row in lines[1:]]


def gaussian_domains(overrides: dict | str | None = None, alpha=None, seed: int = 0) -> dict:
    """Synthetic source/target arrays for one (alpha, seed) cell."""
    return _ext.gaussian_domains(_kv(overrides), alpha, seed)


def solve_imd(points, p, q, class_of, epsilons) -> dict:
    return json.loads(_ext.solve_imd(points, p, q, class_of, epsilons))


def check_suite(seed: int = 0, instances: int = 20) -> dict:
    return json.loads(_ext.check_suite(seed, instances))


def oracle_suite(seed: int = 0, instances: int = 100) -> dict:
    return json.loads(_ext.oracle_suite(seed, instances))


__all__ = [
    "ContractError",
    "ImdUnbounded",
    "NonFiniteError",
    "check_suite",
    "config",
    "config_hash",
    "cssd",
    "default_config",
    "gaussian_domains",
    "grid",
    "joint_ssd",
    "largest_remainder_counts",
    "oracle_suite",
    "pca",
    "per_class_accuracy",
    "solve_imd",
    "ssd",
    "target_marginal",
    "train",
    "wasserstein_1",
]
