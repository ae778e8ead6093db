"""Instance generation, random-state sampling and the CSV sample archive."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DatabaseParseError
from .model import SystemModel

RES_FAMILIES = ("weibull", "exponential", "custom")
PHASE_PLACEMENTS = ("uniform", "stratified")


@dataclass(frozen=True)
class ScenarioConfig:
    """Scenario parameters.

    ``phase_placement`` controls the phase of the same-cell covariances:
    ``"uniform"`` draws every ``(j, i, k)`` phase independently on
    ``[0, 2*pi)``; ``"stratified"`` spaces the users of each cell evenly
    around a random per-cell offset (cross-cell phases stay uniform).
    Prices are uniform on ``[price_mean - price_width/2, price_mean +
    price_width/2]``. The ``custom`` RES family yields the constant
    ``res_mean`` unless ``res_sampler(rng, shape)`` is supplied.
    """

    I: int = 4
    K: int = 4
    Nt: int = 8
    alpha: float = 0.9
    cross_gain: float = 0.25
    sinr_target: float = 1.5
    noise_var: float = 3.0
    phase_placement: str = "stratified"
    price_mean: float = 1.0
    price_width: float = 1.0
    sell_ratio: float = 0.9
    shared_prices: bool = True
    res_family: str = "weibull"
    res_mean: float = 3.75
    weibull_shape: float = 2.0
    n_samples: int = 500
    seed: int = 0
    res_sampler: Callable | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ConfigError(f"correlation alpha must lie in [0, 1), got {self.alpha}")
        if not 0.0 <= self.sell_ratio <= 1.0:
            raise ConfigError(f"sell ratio must lie in [0, 1], got {self.sell_ratio}")
        if self.n_samples < 1:
            raise ConfigError("sample count must be at least 1")
        if self.I < 1 or self.K < 1 or self.Nt < 1:
            raise ConfigError(f"I, K, Nt must be positive, got {(self.I, self.K, self.Nt)}")
        if self.sinr_target <= 0 or self.noise_var <= 0:
            raise ConfigError("SINR target and noise variance must be positive")
        if self.cross_gain < 0:
            raise ConfigError("cross-cell gain must be nonnegative")
        if self.phase_placement not in PHASE_PLACEMENTS:
            raise ConfigError(f"unknown phase placement {self.phase_placement!r}")
        if self.res_family not in RES_FAMILIES:
            raise ConfigError(f"unknown RES family {self.res_family!r}")
        if self.res_mean < 0:
            raise ConfigError("RES mean must be nonnegative")
        if self.res_family == "weibull" and self.weibull_shape <= 0:
            raise ConfigError("Weibull shape must be positive")
        lo = self.price_mean - self.price_width / 2
        if self.price_width < 0 or lo < 0:
            raise ConfigError("price support must be a nonnegative interval")

    def replace(self, **changes):
        return replace(self, **changes)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls) if f.name != "res_sampler"]


@dataclass(frozen=True)
class RandomState:
    """One realization ``(a, b, e)`` for every BS."""

    a: np.ndarray
    b: np.ndarray
    e: np.ndarray


class SampleDatabase:
    """Ordered archive of random states, stored as ``(n, I)`` arrays."""

    def __init__(self, a, b, e):
        a, b, e = (np.atleast_2d(np.asarray(x, dtype=float)) for x in (a, b, e))
        if a.size == 0:
            raise DatabaseParseError("empty database")
        if not (a.shape == b.shape == e.shape):
            raise DatabaseParseError(f"inconsistent shapes {a.shape}, {b.shape}, {e.shape}")
        if np.any(b < 0) or np.any(a < b):
            raise DatabaseParseError("prices must satisfy a >= b >= 0")
        if np.any(e < 0):
            raise DatabaseParseError("harvested energy must be nonnegative")
        if not np.all(np.isfinite(a)):
            raise DatabaseParseError("prices must be finite")
        for arr in (a, b, e):
            arr.setflags(write=False)
        self.a, self.b, self.e = a, b, e

    def __len__(self):
        return self.a.shape[0]

    def __getitem__(self, s):
        return RandomState(self.a[s], self.b[s], self.e[s])

    @property
    def I(self):
        return self.a.shape[1]

    @property
    def a_max(self):
        return float(self.a.max())

    def head(self, n):
        return SampleDatabase(self.a[:n], self.b[:n], self.e[:n])

    def with_energy(self, e):
        return SampleDatabase(self.a, self.b, np.broadcast_to(e, self.a.shape))

    def __eq__(self, other):
        if not isinstance(other, SampleDatabase):
            return NotImplemented
        return all(np.array_equal(x, y) for x, y in
                   ((self.a, other.a), (self.b, other.b), (self.e, other.e)))

    def __repr__(self):
        return f"SampleDatabase(n={len(self)}, I={self.I})"


def covariance(Nt, alpha, phase, gain=1.0):
    """Exponential-correlation covariance ``gain * alpha^|m-n| e^{j phase (m-n)}``."""
    if not 0.0 <= alpha < 1.0:
        raise ConfigError(f"correlation alpha must lie in [0, 1), got {alpha}")
    m = np.arange(Nt)
    d = m[:, None] - m[None, :]
    return gain * alpha ** np.abs(d) * np.exp(1j * phase * d)


def make_channels(cfg, rng=None):
    """Draw a :class:`SystemModel` following the exponential-correlation model."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    I, K, Nt = cfg.I, cfg.K, cfg.Nt
    phases = rng.uniform(0.0, 2 * np.pi, size=(I, I, K))
    if cfg.phase_placement == "stratified":
        offsets = rng.uniform(0.0, 2 * np.pi, size=I)
        for i in range(I):
            phases[i, i] = offsets[i] + 2 * np.pi * np.arange(K) / K
    R = np.empty((I, I, K, Nt, Nt), dtype=complex)
    for j in range(I):
        for i in range(I):
            gain = 1.0 if j == i else cfg.cross_gain
            for k in range(K):
                R[j, i, k] = covariance(Nt, cfg.alpha, phases[j, i, k], gain)
    return SystemModel(R, cfg.sinr_target, cfg.noise_var)


def weibull_scale(mean, shape):
    return mean / math.gamma(1.0 + 1.0 / shape)


def _draw_energy(cfg, rng, shape):
    if cfg.res_family == "weibull":
        return weibull_scale(cfg.res_mean, cfg.weibull_shape) * rng.weibull(cfg.weibull_shape, size=shape)
    if cfg.res_family == "exponential":
        return rng.exponential(cfg.res_mean, size=shape)
    if cfg.res_sampler is not None:
        e = np.asarray(cfg.res_sampler(rng, shape), dtype=float)
        if e.shape != shape or np.any(e < 0):
            raise ConfigError("custom RES sampler must return nonnegative values of the requested shape")
        return e
    return np.full(shape, float(cfg.res_mean))


def sample_states(cfg, rng=None, n=None):
    """Draw ``n`` i.i.d. random states (defaults to ``cfg.n_samples``)."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    n = cfg.n_samples if n is None else n
    if n < 1:
        raise ConfigError("sample count must be at least 1")
    lo = cfg.price_mean - cfg.price_width / 2
    hi = cfg.price_mean + cfg.price_width / 2
    if cfg.shared_prices:
        a = np.repeat(rng.uniform(lo, hi, size=(n, 1)), cfg.I, axis=1)
    else:
        a = rng.uniform(lo, hi, size=(n, cfg.I))
    b = cfg.sell_ratio * a
    e = _draw_energy(cfg, rng, (n, cfg.I))
    return SampleDatabase(a, b, e)


def save_database(db, path):
    """Write ``db`` as CSV rows ``sample_index,bs_index,a,b,e``."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_index", "bs_index", "a", "b", "e"])
        for s in range(len(db)):
            for i in range(db.I):
                writer.writerow([s, i, repr(float(db.a[s, i])), repr(float(db.b[s, i])),
                                 repr(float(db.e[s, i]))])


def _parse_float(text, line):
    try:
        value = float(text)
    except ValueError:
        raise DatabaseParseError(f"not a number: {text!r}", line) from None
    if not math.isfinite(value):
        raise DatabaseParseError(f"non-finite value {text!r}", line)
    return value


def load_database(path):
    """Read a sample archive.

    Accepts the five-column layout written by :func:`save_database` and a
    four-column ``bs_index,a,b,e`` layout in which a row with ``bs_index``
    0 starts a new sample.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [(n, row) for n, row in enumerate(csv.reader(fh), start=1)
                if row and any(c.strip() for c in row)]
    if not rows:
        raise DatabaseParseError("empty database")
    header = [c.strip().lower() for c in rows[0][1]]
    if header == ["sample_index", "bs_index", "a", "b", "e"]:
        ncol = 5
    elif header == ["bs_index", "a", "b", "e"]:
        ncol = 4
    else:
        raise DatabaseParseError(f"unrecognized header {rows[0][1]}", rows[0][0])
    if len(rows) == 1:
        raise DatabaseParseError("empty database")

    records = {}
    counter = -1
    for line, row in rows[1:]:
        if len(row) != ncol:
            raise DatabaseParseError(f"expected {ncol} columns, got {len(row)}", line)
        try:
            if ncol == 5:
                s, i = int(row[0]), int(row[1])
            else:
                i = int(row[0])
                if i == 0:
                    counter += 1
                s = max(counter, 0)
        except ValueError:
            raise DatabaseParseError("indices must be integers", line) from None
        a, b, e = (_parse_float(x, line) for x in row[-3:])
        if s < 0 or i < 0:
            raise DatabaseParseError("indices must be nonnegative", line)
        if b < 0 or a < b:
            raise DatabaseParseError(f"prices violate a >= b >= 0 (a={a}, b={b})", line)
        if e < 0:
            raise DatabaseParseError(f"negative harvested energy {e}", line)
        if (s, i) in records:
            raise DatabaseParseError(f"duplicate entry for sample {s}, BS {i}", line)
        records[(s, i)] = (a, b, e, line)

    samples = sorted({s for s, _ in records})
    bss = sorted({i for _, i in records})
    n, I = len(samples), len(bss)
    if samples != list(range(n)) or bss != list(range(I)) or len(records) != n * I:
        raise DatabaseParseError("archive is not a complete sample x BS grid")
    arr = np.empty((3, n, I))
    for (s, i), (a, b, e, _) in records.items():
        arr[:, s, i] = (a, b, e)
    return SampleDatabase(*arr)
