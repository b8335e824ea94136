"""Run configuration: one flat key registry shared by file, environment,
and command-line flags.

Precedence, lowest to highest: registry defaults, config file (key=value
lines), environment variables (ATTRACTORSEP_<KEY>), explicit overrides
(flags). Unknown keys are rejected everywhere, and the fully resolved
mapping can be echoed next to a run's outputs so results are reproducible
from the run directory alone.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

ENV_PREFIX = "ATTRACTORSEP_"


def _parse_int(s):
    return int(s)


def _parse_float(s):
    return float(s)


def _parse_int_list(s):
    if isinstance(s, (tuple, list)):
        return tuple(int(x) for x in s)
    parts = [p.strip() for p in str(s).split(",") if p.strip()]
    if not parts:
        raise ValueError("empty list")
    return tuple(int(p) for p in parts)


def _parse_schedule(s):
    """"150:3,225:10" -> ((150, 3.0), (225, 10.0)); empty string allowed."""
    if isinstance(s, (tuple, list)):
        return tuple((int(e), float(d)) for e, d in s)
    text = str(s).strip()
    if not text:
        return ()
    out = []
    for part in text.split(","):
        epoch, _, divisor = part.partition(":")
        out.append((int(epoch), float(divisor)))
    return tuple(out)


def _choice(*allowed):
    def parse(s):
        val = str(s)
        if val not in allowed:
            raise ValueError(f"must be one of {allowed}")
        return val

    return parse


@dataclass
class ConfigKey:
    name: str
    parse: callable
    default: object
    help: str


def _key(name, parse, default, help):
    return name, ConfigKey(name, parse, default, help)


REGISTRY = dict(
    [
        _key("seed", _parse_int, 0, "master seed for corpus, weights, and training"),
        # corpus
        _key("n_train", _parse_int, 200, "training mixtures"),
        _key("n_val", _parse_int, 8, "validation mixtures"),
        _key("n_test", _parse_int, 50, "test mixtures"),
        _key("k_set", _parse_int_list, (2,), "source counts in the corpus, e.g. 2,3"),
        _key("duration_s", _parse_float, 0.5, "seconds per mixture"),
        _key("sample_rate", _parse_int, 8000, "corpus sample rate in Hz"),
        _key("source_family", _choice("am_noise", "harmonic", "chirp"), "am_noise",
             "synthetic source family"),
        # network
        _key("embedding_dim", _parse_int, 8, "embedding width D"),
        _key("hidden", _parse_int, 128, "encoder/decoder width"),
        _key("recurrent_layers", _parse_int, 2, "bidirectional recurrent layers"),
        _key("recurrent_units", _parse_int, 64, "units per direction"),
        _key("cell", _choice("gru", "tanh"), "gru", "recurrent cell type"),
        # training
        _key("epochs", _parse_int, 30, "training epochs"),
        _key("batch_size", _parse_int, 8, "utterances per gradient step"),
        _key("learning_rate", _parse_float, 1e-3, "initial Adam learning rate"),
        _key("lr_schedule", _parse_schedule, ((150, 3.0), (225, 10.0), (300, 30.0), (325, 100.0)),
             "epoch:divisor stages applied to the initial rate"),
        _key("head", _choice("danet", "kmeans_danet"), "danet", "loss head"),
        _key("metric", _choice("euclidean", "spherical"), "spherical",
             "clustering metric"),
        _key("unfold", _parse_int, 5, "in-graph k-means iterations L"),
        _key("k", _parse_int, 2, "source count for training/inference"),
        _key("weighting", _choice("uniform", "energy"), "energy",
             "k-means point weighting"),
        _key("energy_fraction", _parse_float, 0.9, "high-energy indicator fraction"),
        _key("temperature", _parse_float, 1.0, "mask softmax temperature"),
        _key("val_every", _parse_int, 1, "epochs between validation passes"),
        # inference
        _key("strategy", _choice("e1", "e2-euclid", "e2-spherical", "unfolded"),
             "e2-spherical", "attractor estimation strategy"),
        _key("inference_iters", _parse_int, 20, "k-means iterations at inference"),
        # frontend
        _key("frame_ms", _parse_float, 64.0, "analysis frame length in ms"),
        _key("overlap", _parse_float, 0.75, "analysis frame overlap fraction"),
    ]
)


class RunConfig:
    """Resolved, typed configuration; keys readable as attributes."""

    def __init__(self, values: dict):
        self._values = dict(values)

    def __getattr__(self, name):
        try:
            return self._values[name]
        except KeyError:
            raise AttributeError(name) from None

    def __getitem__(self, name):
        return self._values[name]

    def items(self):
        return sorted(self._values.items())

    def replace(self, **updates) -> "RunConfig":
        vals = dict(self._values)
        for key, val in updates.items():
            if key not in REGISTRY:
                raise ConfigError(f"unknown config key {key!r}")
            vals[key] = val
        return RunConfig(vals)


def _parse_value(key: str, raw) -> object:
    entry = REGISTRY.get(key)
    if entry is None:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return entry.parse(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc


def load_config_file(path) -> dict:
    """key=value lines; '#' starts a comment; blank lines ignored."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, raw = text.partition("=")
        values[key.strip()] = raw.strip()
    return values


def resolve(config_file=None, overrides: dict = None, env: dict = None) -> RunConfig:
    """Merge defaults, file, environment, and overrides into a RunConfig.

    Args:
        config_file: optional path to a key=value file.
        overrides: raw flag values (strings or already-typed), highest
            precedence; None values are ignored.
        env: environment mapping, defaults to os.environ; only
            ATTRACTORSEP_-prefixed names are considered.
    """
    values = {name: entry.default for name, entry in REGISTRY.items()}
    if config_file is not None:
        for key, raw in load_config_file(config_file).items():
            values[key] = _parse_value(key, raw)
    env = os.environ if env is None else env
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX) :].lower()
        if key not in REGISTRY:
            raise ConfigError(f"unknown config key in environment: {name}")
        values[key] = _parse_value(key, raw)
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        values[key] = _parse_value(key, raw)
    return RunConfig(values)


def echo_config(cfg: RunConfig, path) -> None:
    """Write the resolved configuration as sorted key=value lines."""
    lines = []
    for key, val in cfg.items():
        if key == "k_set":
            val = ",".join(str(v) for v in val)
        elif key == "lr_schedule":
            val = ",".join(f"{e}:{d:g}" for e, d in val)
        lines.append(f"{key}={val}")
    Path(path).write_text("\n".join(lines) + "\n")
