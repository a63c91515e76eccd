"""Run configuration and the manifest that makes every number traceable.

A config is one flat JSON file; every statistical knob (seed, replica
counts, grid size, K, tolerance overrides) is a key.  A manifest records
the config hash, package version, and one row per check with its seed,
so a reported number can always be regenerated.
"""

import csv
import hashlib
import json
import os
import tempfile
import time
from dataclasses import dataclass, field, asdict

from .. import __version__


_DEFAULTS = {
    "mechanism": {"kind": "empty", "a2": 2.0},
    "domain": {"kind": "ball", "d": 2, "radius": 1.0, "n": 65},
    "z_points": [[1.0, 0.0], [-1.0, 0.0]],
    "replicas": 20000,
    "seed": 0,
    "K": 100,
    "gamma0": 0.01,
    "beta": 0.5,
    "gamma_ladder": [0.1, 0.03, 0.01, 0.003, 0.001],
    "eps_ladder": [0.4, 0.25, 0.15],
    "delta0": 0.05,
    "threads": 1,
    "tolerances": {},
    "out_dir": ".",
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = dict(_DEFAULTS)
        merged.update(self.values)
        if merged.get("seed") is None:
            raise ValueError("a seed is required; results must be "
                             "reproducible")
        for k, v in merged.get("tolerances", {}).items():
            if v <= 0:
                raise ValueError("tolerance %r must be positive" % k)
        self.values = merged

    @classmethod
    def from_file(cls, path):
        with open(path) as f:
            return cls(json.load(f))

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def canonical(self):
        return json.dumps(self.values, sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]


@dataclass
class RunManifest:
    config_hash: str
    version: str = __version__
    results: list = field(default_factory=list)
    started: float = field(default_factory=time.time)
    finished: float = None
    aborts: int = 0

    def add(self, name, passed, seed=None, seconds=None, **extra):
        row = {"check": name, "passed": bool(passed), "seed": seed,
               "seconds": seconds}
        row.update(extra)
        self.results.append(row)
        return row

    @property
    def all_passed(self):
        return all(r["passed"] for r in self.results)

    def close(self):
        self.finished = time.time()
        return self

    def to_json(self):
        return json.dumps(asdict(self), indent=2, default=str)

    def save(self, path):
        """Atomic write: manifests are never observed half-written."""
        d = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
        with os.fdopen(fd, "w") as f:
            f.write(self.to_json())
        os.replace(tmp, path)

    def write_csv(self, path):
        keys = ["check", "passed", "value", "bound", "zscore", "seed",
                "seconds", "config_hash"]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(keys)
            for r in self.results:
                row = dict(r, config_hash=self.config_hash)
                w.writerow([row.get(k, "") for k in keys])
