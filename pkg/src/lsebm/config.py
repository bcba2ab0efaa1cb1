"""Run configuration: INI-style file with strict key validation.

Sections mirror the module layout ([data], [model], [trainer], [run]);
unknown sections or keys are errors so typos fail fast.  Environment
variables named LSEBM_<SECTION>_<KEY> override file values.  A resolved
config written back out reproduces the run bit-for-bit on the same
build.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass

from .errors import ConfigError

ENV_PREFIX = "LSEBM"


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


@dataclass
class RunConfig:
    # [data]
    kind: str = "two_moons"
    n: int = 1000
    noise: float = 0.1
    k: int = 2
    n_labeled: int = 10
    csv_path: str = ""
    label_column: str = "label"
    triplet_path: str = ""
    vocab_path: str = ""
    labels_path: str = ""
    standardize: bool = True
    val_frac: float = 0.1
    data_seed: int = 0
    # [model]
    d: int = 8
    prior_hidden: int = 200
    enc_hidden: int = 200
    dec_hidden: int = 200
    decoder_variant: str = "gaussian"
    sigma2: float = 0.25
    # [trainer]
    iterations: int = 4000
    eta0: float = 2e-4
    eta1: float = 1e-4
    eta2: float = 1e-4
    batch_unlabeled: int = 100
    batch_labeled: int = 100
    chain_count: int = 1000
    langevin_steps: int = 20
    step_size: float = 0.6
    n_mc_label: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # [run]
    seed: int = 0
    out_dir: str = "runs/latest"
    eval_interval: int = 100
    checkpoint_interval: int = 1000
    threads: int = 1
    n_mc_eval: int = 100


_SCHEMA: dict[str, dict[str, type]] = {
    "data": {
        "kind": str, "n": int, "noise": float, "k": int, "n_labeled": int,
        "csv_path": str, "label_column": str, "triplet_path": str,
        "vocab_path": str, "labels_path": str, "standardize": _bool,
        "val_frac": float, "data_seed": int,
    },
    "model": {
        "d": int, "prior_hidden": int, "enc_hidden": int, "dec_hidden": int,
        "decoder_variant": str, "sigma2": float,
    },
    "trainer": {
        "iterations": int, "eta0": float, "eta1": float, "eta2": float,
        "batch_unlabeled": int, "batch_labeled": int, "chain_count": int,
        "langevin_steps": int, "step_size": float, "n_mc_label": int,
        "beta1": float, "beta2": float, "adam_eps": float,
    },
    "run": {
        "seed": int, "out_dir": str, "eval_interval": int,
        "checkpoint_interval": int, "threads": int, "n_mc_eval": int,
    },
}


def parse_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path, encoding="utf-8")
    if not read:
        raise ConfigError(f"config file not found: {path}")
    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            _apply(cfg, section, key, raw)
    for section, keys in _SCHEMA.items():
        for key in keys:
            env = os.environ.get(f"{ENV_PREFIX}_{section.upper()}_{key.upper()}")
            if env is not None:
                _apply(cfg, section, key, env)
    return cfg


def _apply(cfg: RunConfig, section: str, key: str, raw: str):
    keys = _SCHEMA[section]
    if key not in keys:
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    try:
        value = keys[key](raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from None
    setattr(cfg, key, value)


def write_config(cfg: RunConfig, path):
    """Emit the resolved configuration in the same INI format."""
    parser = configparser.ConfigParser()
    for section, keys in _SCHEMA.items():
        parser[section] = {k: str(getattr(cfg, k)) for k in keys}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def as_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)
