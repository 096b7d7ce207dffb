"""Poisson point process sampling: homogeneous, thinned, and the marked coupling.

Every sampler is a pure function of its inputs and an :class:`RngStream`.
Streams use the Philox counter-based generator keyed by
``seed XOR splitmix64(stream_id)``, so a (seed, stream_id) pair reproduces
the same realization on any platform.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import (Box, IntensityField, InvalidParameter, MarkedConfiguration,
                    OutOfDomain, PointConfiguration, eval_intensity)

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class RngStream:
    seed: int
    stream_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", int(self.seed) & _MASK64)
        object.__setattr__(self, "stream_id", int(self.stream_id) & _MASK64)

    def generator(self) -> np.random.Generator:
        key = self.seed ^ splitmix64(self.stream_id)
        return np.random.Generator(np.random.Philox(key=key))

    def child(self, tag: int) -> RngStream:
        """A derived stream, independent of this one and of other tags."""
        return RngStream(self.seed, splitmix64(self.stream_id ^ splitmix64(int(tag) + 1)))


def default_margin(box_side: float, radius: float = 1.0) -> float:
    """One ball radius plus a 10*log(side) allowance for cluster diameters."""
    return radius + 10.0 * math.log(max(box_side, 1.0))


def _as_box(region) -> Box:
    if isinstance(region, Box):
        return region
    if hasattr(region, "bounding_box"):
        return region.bounding_box()
    return Box.from_bounds(region)


def _uniform_points(gen: np.random.Generator, box: Box, n: int) -> np.ndarray:
    return box.lo + gen.random((n, box.d)) * box.sides


def sample_homogeneous(u: float, region, rng: RngStream, radius: float = 1.0) -> PointConfiguration:
    """Poisson process of intensity ``u`` on ``region``: Poisson count, then uniform placement.

    ``Generator.poisson`` is exact (inversion below mean 10, PTRS rejection above).
    """
    if not u >= 0:
        raise InvalidParameter(f"intensity must be nonnegative, got {u}")
    box = _as_box(region)
    gen = rng.generator()
    n = int(gen.poisson(u * box.volume)) if u > 0 else 0
    return PointConfiguration(_uniform_points(gen, box, n).reshape(n, box.d), radius)


def _check_field_covers(fld: IntensityField, box: Box):
    reg = fld.region
    if reg is None:
        return
    tol = 1e-9 * (1 + np.abs(box.hi) + np.abs(box.lo))
    if np.any(box.lo < reg.lo - tol) or np.any(box.hi > reg.hi + tol):
        raise OutOfDomain("intensity field does not cover the sampling region")


def sample_inhomogeneous(fld: IntensityField, region, rng: RngStream,
                         radius: float = 1.0, clamp: bool = False) -> PointConfiguration:
    """Thinning: sample at rate ``sup u`` and keep x with probability u(x)/sup u.

    With ``clamp`` the field is extended outside its grid by its value at the
    nearest grid point (used for margins around a domain).
    """
    box = _as_box(region)
    if not clamp:
        _check_field_covers(fld, box)
    top = fld.sup_value
    gen = rng.generator()
    if top <= 0:
        return PointConfiguration.empty(box.d, radius)
    n = int(gen.poisson(top * box.volume))
    cand = _uniform_points(gen, box, n).reshape(n, box.d)
    accept = gen.random(n)
    if fld.kind == "constant":
        return PointConfiguration(cand, radius)
    at = np.clip(cand, fld.region.lo, fld.region.hi) if clamp else cand
    keep = accept * top < eval_intensity(fld, at) if n else np.zeros(0, bool)
    return PointConfiguration(cand[keep], radius)


def sample_marked(region, u_max: float, rng: RngStream, radius: float = 1.0) -> MarkedConfiguration:
    """Points at rate ``u_max`` with i.i.d. uniform marks on ``[0, u_max)``."""
    if not u_max > 0:
        raise InvalidParameter(f"u_max must be positive, got {u_max}")
    box = _as_box(region)
    gen = rng.generator()
    n = int(gen.poisson(u_max * box.volume))
    pts = _uniform_points(gen, box, n).reshape(n, box.d)
    marks = gen.random(n) * u_max
    return MarkedConfiguration(pts, marks, u_max, radius)


def restrict(marked: MarkedConfiguration, fld) -> PointConfiguration:
    """Keep the centers whose mark is at most u(center).

    ``fld`` may be an :class:`IntensityField` or a plain number.  The result is
    the Poisson process of intensity u only when ``sup u <= marked.u_max``.
    """
    if not isinstance(fld, IntensityField):
        keep = marked.marks <= float(fld)
    elif len(marked) == 0:
        keep = np.zeros(0, bool)
    else:
        keep = marked.marks <= eval_intensity(fld, marked.centers)
    return PointConfiguration(marked.centers[keep].reshape(-1, marked.d), marked.radius)


def dump_csv(config, path=None) -> str:
    """Write centers (and marks, for marked configurations) as CSV; returns the text."""
    d = config.d
    marked = isinstance(config, MarkedConfiguration)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x_{k}" for k in range(d)] + (["mark"] if marked else []))
    for i in range(len(config)):
        row = [repr(float(v)) for v in config.centers[i]]
        if marked:
            row.append(repr(float(config.marks[i])))
        w.writerow(row)
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def load_csv(source, radius: float = 1.0):
    """Inverse of :func:`dump_csv`; accepts a path or CSV text."""
    text = source if isinstance(source, str) and "\n" in source else Path(source).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise InvalidParameter("empty CSV (missing header)")
    header = rows[0]
    d = sum(1 for h in header if h.startswith("x_"))
    if d < 1 or header[:d] != [f"x_{k}" for k in range(d)]:
        raise InvalidParameter(f"bad CSV header {header}")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise InvalidParameter(f"malformed CSV row: {exc}") from None
    data = data.reshape(-1, len(header))
    if "mark" in header:
        marks = data[:, d]
        u_max = float(marks.max()) if len(marks) else 1.0
        return MarkedConfiguration(data[:, :d], marks, np.nextafter(u_max, np.inf), radius)
    return PointConfiguration(data[:, :d], radius)
