"""Experiment configuration: flat key = value text with sections.

Every output artifact embeds the configuration hash, grid fingerprint,
seed and package version in its header so runs are reproducible from the
file alone.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import Domain

VERSION = "0.1.0"

DEFAULTS = {
    "domain": {"dim": "2", "radius": "1.0"},
    "kernel": {"type": "maxwell", "theta": "1.0"},
    "grid": {"n_angle": "64", "n_dir": "32", "n_speed": "48", "speed_max": "8.0"},
    "phase": {"n_r": "16", "n_ang": "32", "n_omega": "32"},
    "mc": {
        "particles": "10000000",
        "seed": "",
        "t_max": "200.0",
        "record": "log:20:200:16",
        "init": "speed-window",
        "window": "0.5,1.5",
        "batches": "16",
    },
    "tauberian": {
        "n": "6",
        "p": "3",
        "eta_max": "25.0",
        "eta_step": "0.05",
        "t_list": "1,5,10",
        "bdry_n_angle": "32",
        "bdry_n_dir": "16",
        "bdry_n_speed": "32",
        "phase_n_r": "12",
    },
    "output": {"dir": "out"},
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    parser: configparser.ConfigParser = field(default_factory=configparser.ConfigParser)

    def __post_init__(self):
        for section, keys in DEFAULTS.items():
            if not self.parser.has_section(section):
                self.parser.add_section(section)
            for k, v in keys.items():
                if not self.parser.has_option(section, k):
                    self.parser.set(section, k, v)
        self._validate()

    @classmethod
    def load(cls, path):
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        return cls(parser)

    @classmethod
    def from_overrides(cls, overrides=()):
        """Overrides as 'section.key=value' strings."""
        cfg = cls()
        for item in overrides:
            try:
                dotted, value = item.split("=", 1)
                section, key = dotted.strip().split(".", 1)
            except ValueError as exc:
                raise ConfigError(f"malformed override {item!r}; use section.key=value") from exc
            if section not in DEFAULTS:
                raise ConfigError(f"unknown config section {section!r} in {item!r}")
            cfg.parser.set(section, key.strip(), value.strip())
        cfg._validate()
        return cfg

    def _validate(self):
        for section, key in (
            ("domain", "radius"),
            ("grid", "n_angle"),
            ("grid", "n_dir"),
            ("grid", "n_speed"),
            ("grid", "speed_max"),
            ("mc", "particles"),
            ("tauberian", "n"),
            ("tauberian", "p"),
            ("tauberian", "eta_max"),
        ):
            try:
                val = float(self.parser.get(section, key))
            except ValueError as exc:
                raise ConfigError(f"{section}.{key} is not numeric") from exc
            if val <= 0:
                raise ConfigError(f"{section}.{key} must be positive")

    # -- typed getters -------------------------------------------------------
    def get(self, section, key):
        return self.parser.get(section, key)

    def getint(self, section, key):
        return self.parser.getint(section, key)

    def getfloat(self, section, key):
        return self.parser.getfloat(section, key)

    def domain(self) -> Domain:
        return Domain(dim=self.getint("domain", "dim"), radius=self.getfloat("domain", "radius"))

    def theta(self):
        raw = self.get("kernel", "theta")
        parts = [float(x) for x in raw.split(",") if x.strip()]
        return parts[0] if len(parts) == 1 else np.array(parts)

    def seed(self, required=False):
        raw = self.get("mc", "seed").strip()
        if not raw:
            if required:
                raise ConfigError("mc.seed is mandatory for Monte Carlo runs")
            return None
        return int(raw)

    def record_times(self):
        raw = self.get("mc", "record").strip()
        if raw.startswith("log:"):
            _, lo, hi, n = raw.split(":")
            return list(np.geomspace(float(lo), float(hi), int(n)))
        return [float(x) for x in raw.split(",") if x.strip()]

    def window(self):
        parts = [float(x) for x in self.get("mc", "window").split(",")]
        return tuple(parts[:2])

    def t_list(self):
        return [float(x) for x in self.get("tauberian", "t_list").split(",") if x.strip()]

    # -- provenance ------------------------------------------------------------
    def canonical_text(self) -> str:
        buf = io.StringIO()
        for section in sorted(self.parser.sections()):
            buf.write(f"[{section}]\n")
            for key in sorted(self.parser.options(section)):
                buf.write(f"{key} = {self.parser.get(section, key)}\n")
        return buf.getvalue()

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:12]

    def header_lines(self, grid_fingerprint="", seed=None):
        lines = [
            f"# config_hash={self.hash()}",
            f"# version={VERSION}",
        ]
        if grid_fingerprint:
            lines.append(f"# grid={grid_fingerprint}")
        if seed is not None:
            lines.append(f"# seed={seed}")
        rho_max = self.getfloat("grid", "speed_max")
        lines.append(f"# speed_cutoff={rho_max:g}")
        return lines

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.canonical_text())


def thread_count():
    raw = os.environ.get("KINRELAX_THREADS", "").strip()
    return int(raw) if raw else None


def apply_thread_limit():
    n = thread_count()
    if n:
        import numba

        numba.set_num_threads(n)
