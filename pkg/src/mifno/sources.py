"""Point-source descriptions and sampling.

Conventions: coordinates are (x=east, y=north, z=up) in meters with the
free surface at z=0, so source depths are negative z. Moment tensors are
stored in the seismological (north, east, down) frame as the 6-vector
(Mnn, Mee, Mdd, Mne, Mnd, Med) in N*m. Strike is measured clockwise from
north, dip from horizontal, rake in the fault plane.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

# paper-scale defaults
DEFAULT_M0 = 2.47e16  # N*m
DEFAULT_RISE_TIME = 0.1  # s
DOMAIN_LENGTH = 9600.0  # m

SOURCE_RANGES = {
    "x": (1200.0, 8400.0),
    "y": (1200.0, 8400.0),
    "z": (-9000.0, -600.0),
    "strike": (0.0, 360.0),
    "dip": (0.0, 90.0),
    "rake": (0.0, 360.0),
}


@dataclass
class SourceSpec:
    """A moment-tensor point source.

    Orientation may be carried as (strike, dip, rake) angles in degrees,
    as an explicit 6-component moment tensor, or both (angles with their
    derived tensor).
    """
    position: np.ndarray  # (3,) m, z negative below the surface
    angles: np.ndarray | None = None  # (3,) degrees
    moment: np.ndarray | None = None  # (6,) N*m, (Mnn, Mee, Mdd, Mne, Mnd, Med)
    m0: float = DEFAULT_M0
    rise_time: float = DEFAULT_RISE_TIME

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        if self.angles is not None:
            self.angles = np.asarray(self.angles, dtype=np.float64).reshape(3)
        if self.moment is not None:
            self.moment = np.asarray(self.moment, dtype=np.float64).reshape(6)
        if self.angles is None and self.moment is None:
            raise ValueError("SourceSpec needs angles or a moment tensor")

    def moment_vector(self) -> np.ndarray:
        """The 6-component tensor, derived from angles when not stored."""
        if self.moment is not None:
            return self.moment
        s, d, r = self.angles
        return angles_to_moment(s, d, r, self.m0)


def angles_to_moment(strike: float, dip: float, rake: float, m0: float) -> np.ndarray:
    """Double-couple moment tensor from fault angles.

    Closed form in the (north, east, down) frame; the result is symmetric
    with zero trace and Frobenius norm sqrt(2)*m0.
    """
    phi = np.deg2rad(strike)
    dlt = np.deg2rad(dip)
    lam = np.deg2rad(rake)
    sd, cd = np.sin(dlt), np.cos(dlt)
    s2d, c2d = np.sin(2 * dlt), np.cos(2 * dlt)
    sf, cf = np.sin(phi), np.cos(phi)
    s2f, c2f = np.sin(2 * phi), np.cos(2 * phi)
    sl, cl = np.sin(lam), np.cos(lam)

    mnn = -m0 * (sd * cl * s2f + s2d * sl * sf * sf)
    mee = m0 * (sd * cl * s2f - s2d * sl * cf * cf)
    mdd = m0 * s2d * sl
    mne = m0 * (sd * cl * c2f + 0.5 * s2d * sl * s2f)
    mnd = -m0 * (cd * cl * cf + c2d * sl * sf)
    med = -m0 * (cd * cl * sf - c2d * sl * cf)
    return np.array([mnn, mee, mdd, mne, mnd, med])


def moment_to_matrix(m6: np.ndarray) -> np.ndarray:
    """Symmetric 3x3 (north, east, down) matrix from the 6-vector."""
    mnn, mee, mdd, mne, mnd, med = np.asarray(m6, dtype=np.float64)
    return np.array([
        [mnn, mne, mnd],
        [mne, mee, med],
        [mnd, med, mdd],
    ])


def matrix_to_moment(M: np.ndarray) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    return np.array([M[0, 0], M[1, 1], M[2, 2], M[0, 1], M[0, 2], M[1, 2]])


def source_time_function(t, tau: float):
    """Monotone moment history 1 - (1 + t/tau) e^{-t/tau}, asymptote 1."""
    if tau <= 0:
        raise ValueError("rise time must be positive")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("source time function defined for t >= 0")
    x = t / tau
    return 1.0 - (1.0 + x) * np.exp(-x)


def moment_rate(t, tau: float):
    """Time derivative of the source time function: (t/tau^2) e^{-t/tau}."""
    if tau <= 0:
        raise ValueError("rise time must be positive")
    t = np.asarray(t, dtype=np.float64)
    return (t / tau**2) * np.exp(-t / tau)


def lhs_sample(n: int, ranges, rng: np.random.Generator) -> np.ndarray:
    """Latin hypercube: n points, one per equal stratum in every dimension,
    placed uniformly within its stratum, with independent permutations
    across dimensions. Returns (n, ndim)."""
    if n < 1:
        raise ValueError("need at least one sample")
    ranges = [tuple(map(float, r)) for r in ranges]
    for lo, hi in ranges:
        if not hi > lo:
            raise ValueError(f"empty range ({lo}, {hi})")
    cols = []
    for lo, hi in ranges:
        perm = rng.permutation(n)
        u = rng.uniform(size=n)
        cols.append(lo + (hi - lo) * (perm + u) / n)
    return np.stack(cols, axis=1)


def sample_sources(n: int, rng: np.random.Generator, ranges=None,
                   m0: float = DEFAULT_M0, rise_time: float = DEFAULT_RISE_TIME):
    """Draw n sources by Latin hypercube over position and fault angles."""
    ranges = dict(SOURCE_RANGES if ranges is None else ranges)
    order = ["x", "y", "z", "strike", "dip", "rake"]
    pts = lhs_sample(n, [ranges[k] for k in order], rng)
    out = []
    for row in pts:
        out.append(SourceSpec(position=row[:3], angles=row[3:], m0=m0,
                              rise_time=rise_time))
    return out


def normalize_source(s: SourceSpec, domain_length: float, mode: str = "angles") -> np.ndarray:
    """Model-input vector for a source.

    Position maps to the unit cube: x/L, y/L, |z|/L (depth measured
    positive). Out-of-range values are allowed and land outside [0, 1].
    Angles divide by their full ranges (360, 90, 360); moment components
    divide by the scalar moment.
    """
    L = float(domain_length)
    x, y, z = s.position
    pos = np.array([x / L, y / L, abs(z) / L])
    if mode == "position_only":
        return pos
    if mode == "angles":
        if s.angles is None:
            raise ValueError("source has no angles")
        return np.concatenate([pos, s.angles / np.array([360.0, 90.0, 360.0])])
    if mode == "moment":
        return np.concatenate([pos, s.moment_vector() / s.m0])
    raise ValueError(f"unknown source mode {mode!r}")


SOURCE_VECTOR_LENGTH = {"position_only": 3, "angles": 6, "moment": 9, "none": 0}


def rotated_source(s: SourceSpec, k: int, domain_length: float) -> SourceSpec:
    """The source after k quarter-turns of the whole scene about the
    vertical axis through the domain center.

    The rotation adds 90 degrees to every azimuth per turn, so strike
    increments by k*90 (mod 360) and the horizontal position rotates as
    (x, y) -> (cx + (y - cy), cy - (x - cx)) per turn. An explicit moment
    tensor transforms as Q M Q^T with the matching frame rotation.
    """
    k = int(k) % 4
    out = replace(s)
    cx = cy = domain_length / 2.0
    x, y, z = s.position
    for _ in range(k):
        x, y = cx + (y - cy), cy - (x - cx)
    out.position = np.array([x, y, z])
    if s.angles is not None:
        out.angles = s.angles.copy()
        out.angles[0] = (s.angles[0] + 90.0 * k) % 360.0
    if s.moment is not None:
        # azimuth rotation by k*90 degrees in the (north, east, down) frame:
        # rotation about the down axis
        a = np.deg2rad(90.0 * k)
        c, sn = np.cos(a), np.sin(a)
        Q = np.array([[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]])
        out.moment = matrix_to_moment(Q @ moment_to_matrix(s.moment) @ Q.T)
    return out
