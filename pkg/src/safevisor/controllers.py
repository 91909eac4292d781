"""Unverified controllers used to exercise the supervisor.

Controllers act on a batch of runs: ``reset(runs, seed, horizon)`` prepares
per-run state and ``controller(k, x)`` maps states (B, n) to inputs (B, m).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .model import CONTROLLER_STREAM, run_stream


@dataclass
class RandomController:
    """Independent uniform inputs in a box, one stream per run."""

    bounds: np.ndarray
    _draws: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.bounds = np.atleast_2d(np.asarray(self.bounds, dtype=np.float64))
        if np.any(self.bounds[:, 0] > self.bounds[:, 1]):
            raise ConfigError("random controller bounds are empty")

    def reset(self, runs, seed: int, horizon: int):
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        self._draws = np.stack([
            run_stream(seed, r, CONTROLLER_STREAM).uniform(lo, hi, (horizon, len(lo))) for r in np.atleast_1d(runs)
        ])

    def __call__(self, k: int, x) -> np.ndarray:
        return self._draws[:, k]


def random_controller(bounds, stream: np.random.Generator | None = None):
    """Single-run sampler drawing uniformly from ``bounds`` with ``stream``."""
    bounds = np.atleast_2d(np.asarray(bounds, dtype=np.float64))
    rng = stream if stream is not None else np.random.default_rng()

    def draw(k=None, x=None):
        return rng.uniform(bounds[:, 0], bounds[:, 1])

    return draw


@dataclass
class TrackingController:
    """Saturated proportional-integral tracking of a piecewise-constant reference.

    ``schedule`` lists ``(start_step, reference)`` pairs; the reference acts
    on state coordinate ``channel``.  The integrator only accumulates while
    the output is unsaturated.
    """

    schedule: list
    kp: float
    ki: float
    bias: float
    bounds: np.ndarray
    channel: int = 0
    _integral: np.ndarray = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.schedule = sorted((int(k), float(r)) for k, r in self.schedule)
        self.bounds = np.atleast_2d(np.asarray(self.bounds, dtype=np.float64))
        if not all(np.isfinite(v) for v in (self.kp, self.ki, self.bias)):
            raise ConfigError("tracking gains must be finite")
        if not self.schedule or self.schedule[0][0] != 0:
            raise ConfigError("reference schedule must start at step 0")

    def reference(self, k: int) -> float:
        ref = self.schedule[0][1]
        for start, value in self.schedule:
            if k >= start:
                ref = value
        return ref

    def reset(self, runs, seed: int = 0, horizon: int = 0):
        self._integral = np.zeros(len(np.atleast_1d(runs)))

    def __call__(self, k: int, x) -> np.ndarray:
        x = np.atleast_2d(x)
        if self._integral is None or len(self._integral) != len(x):
            self._integral = np.zeros(len(x))
        err = self.reference(k) - x[:, self.channel]
        raw = self.bias + self.kp * err + self.ki * self._integral
        lo, hi = self.bounds[0]
        u = np.clip(raw, lo, hi)
        self._integral = np.where(raw == u, self._integral + err, self._integral)
        return u[:, None]


def tracking_controller(schedule, gains: dict, bounds, channel: int = 0) -> TrackingController:
    return TrackingController(schedule, float(gains["kp"]), float(gains["ki"]), float(gains["bias"]),
                              bounds, channel)


def controller_from_config(cfg: dict, input_bounds):
    kind = cfg.get("kind", "random")
    if kind == "random":
        return RandomController(cfg.get("bounds", input_bounds))
    if kind == "tracking":
        return tracking_controller(cfg["schedule"], cfg["gains"], input_bounds, cfg.get("channel", 0))
    raise ConfigError(f"unknown controller kind {kind!r}")
