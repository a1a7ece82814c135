"""Run configuration and its text format.

The configuration file is a flat list of ``key = value`` lines. Values are
JSON literals (numbers, strings in double quotes, ``true``/``false``, lists
and objects); a bare word that is not valid JSON is read as a string. Lines
starting with ``#`` are comments.

Example::

    tau = 0.05
    epsilon = 0.05
    bootstrap_reps = 1000
    subsets = {"X1": ["x1"], "X2": ["x2"]}
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict, dataclass, fields, replace
from typing import Mapping

import numpy as np

from .errors import ValidationError

CONFIG_FORMAT_VERSION = 1


@dataclass(frozen=True)
class RunConfig:
    """Settings for one hierarchical run.

    Attributes
    ----------
    tau : float
        Smallest subgroup performance decay that counts, at least 0.
    epsilon : float
        Smallest subgroup prevalence of interest, in (0, 0.5].
    alpha : float
        Significance level.
    bins : int
        Number of intervals for the binned source outcome probability.
    clip : float
        Domain-classifier probabilities are clipped to ``[clip, 1 - clip]``.
    bootstrap_reps : int
        Multiplier bootstrap replicates, at least 100.
    split_fraction : float
        Fraction of each domain used for fitting nuisances and detectors.
    omega_grid_size, lambda_grid_size : int
        Covariate detector grid sizes.
    seed : int
        Master seed; every random stream is derived from it.
    subsets : tuple of (name, tuple of column names)
        Candidate feature subsets for the detailed tests. Empty means one
        subset per feature.
    corr_alpha : float
        Level of the loss-association filter for covariate tests.
    loss_filter : bool
        Restrict covariate tests to loss-associated features. When false the
        covariate tests use every feature.
    cv_folds : int
        Cross-validation folds for every learner.
    outcome_detector : {"plugin", "regression"}
        How outcome detectors are built.
    force_detailed : bool
        Run detailed tests even when the aggregate test does not reject.
    """

    tau: float = 0.0
    epsilon: float = 0.05
    alpha: float = 0.05
    bins: int = 40
    clip: float = 1e-3
    bootstrap_reps: int = 1000
    split_fraction: float = 0.5
    omega_grid_size: int = 17
    lambda_grid_size: int = 21
    seed: int = 0
    subsets: tuple = ()
    corr_alpha: float = 0.05
    loss_filter: bool = True
    cv_folds: int = 5
    outcome_detector: str = "plugin"
    force_detailed: bool = False

    def __post_init__(self):
        subsets = self.subsets
        if isinstance(subsets, Mapping):
            subsets = tuple(subsets.items())
        subsets = tuple((str(k), tuple(str(c) for c in v)) for k, v in subsets)
        object.__setattr__(self, "subsets", subsets)
        checks = [
            (self.tau >= 0, "tau must be >= 0"),
            (0 < self.epsilon <= 0.5, "epsilon must be in (0, 0.5]"),
            (0 < self.alpha < 1, "alpha must be in (0, 1)"),
            (int(self.bins) >= 1, "bins must be a positive integer"),
            (0 < self.clip < 0.5, "clip must be in (0, 0.5)"),
            (int(self.bootstrap_reps) >= 100, "bootstrap_reps must be at least 100"),
            (0 < self.split_fraction < 1, "split_fraction must be in (0, 1)"),
            (int(self.omega_grid_size) >= 1, "omega_grid_size must be positive"),
            (int(self.lambda_grid_size) >= 1, "lambda_grid_size must be positive"),
            (0 < self.corr_alpha < 1, "corr_alpha must be in (0, 1)"),
            (int(self.cv_folds) >= 2, "cv_folds must be at least 2"),
            (self.outcome_detector in ("plugin", "regression"),
             "outcome_detector must be 'plugin' or 'regression'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValidationError(msg)
        names = [k for k, _ in subsets]
        if len(set(names)) != len(names):
            raise ValidationError("subset names must be unique")
        for k, cols in subsets:
            if not cols:
                raise ValidationError(f"subset {k!r} is empty")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["subsets"] = {k: list(v) for k, v in self.subsets}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ValidationError(f"unknown configuration keys: {unknown}")
        kw = {}
        for k, v in d.items():
            kind = known[k].type
            try:
                if kind in ("float",):
                    v = float(v)
                elif kind in ("int",):
                    if isinstance(v, bool) or float(v) != int(float(v)):
                        raise ValueError
                    v = int(float(v))
                elif kind in ("bool",):
                    if not isinstance(v, bool):
                        raise ValueError
                elif kind == "str":
                    v = str(v)
            except (TypeError, ValueError):
                raise ValidationError(f"configuration key {k!r} has invalid value {v!r}") from None
            if k == "subsets" and not isinstance(v, (Mapping, list, tuple)):
                raise ValidationError("subsets must map names to lists of column names")
            kw[k] = v
        return cls(**kw)

    def updated(self, **kw) -> "RunConfig":
        return replace(self, **kw)


def parse_config_text(text: str) -> dict:
    """Parse ``key = value`` lines into a dict of raw values."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"config line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ValidationError(f"config line {lineno}: missing key")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def format_config_text(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config_text` for a full configuration."""
    return "".join(f"{k} = {json.dumps(v, sort_keys=True)}\n" for k, v in cfg.to_dict().items())


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return RunConfig.from_dict(parse_config_text(fh.read()))


def derive_seed(seed: int, *keys) -> int:
    """Stable 63-bit seed for a named sub-stream of ``seed``."""
    words = [int(seed) & 0xFFFFFFFF]
    for k in keys:
        words.append(zlib.crc32(str(k).encode()) if not isinstance(k, (int, np.integer)) else int(k))
    return int(np.random.SeedSequence(words).generate_state(2, np.uint32).astype(np.uint64)
               .dot(np.array([1 << 31, 1], dtype=np.uint64)))
