"""Stochastic layered geologies with log-normal heterogeneities.

A geology is a 3D S-wave velocity grid over a cubic domain, axes
(x, y, depth) with cell centers at (i + 0.5)*dx and depth increasing with
the third index. P velocity and density are deterministic functions of
Vs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VS_MIN = 1071.0  # m/s, global clip bounds
VS_MAX = 4500.0
VP_OVER_VS = 1.7

HETEROGENEOUS_THICKNESS = 7800.0  # m of random layers
BOTTOM_LAYER = (1800.0, 4500.0)  # thickness m, Vs m/s; cv = 0
MEAN_VS_RANGE = (1785.0, 3214.0)
CV_MEAN, CV_STD = 0.2, 0.1
CORRELATION_LENGTHS = (1500.0, 3000.0, 4500.0, 6000.0)  # m
MAX_RANDOM_LAYERS = 6

# (Vs, density) calibration pairs, sorted by Vs; interpolated linearly and
# clamped outside
_RHO_KNOTS_VS = np.array([1200.0, 2100.0, 2300.0, 3500.0, 4500.0])
_RHO_KNOTS_RHO = np.array([1923.0, 2329.0, 2380.0, 2706.0, 3170.0])


@dataclass
class GeoLayer:
    thickness: float  # m
    mean_vs: float  # m/s
    cv: float  # coefficient of variation of the fluctuations
    lc: tuple  # (lcx, lcy, lcz) correlation lengths, m


@dataclass
class GeologyModel:
    vs: np.ndarray  # (Nx, Ny, Nz) m/s
    vp: np.ndarray
    rho: np.ndarray
    dx: float  # m
    layers: list = field(default_factory=list)  # of GeoLayer

    @property
    def shape(self):
        return self.vs.shape

    def domain_length(self) -> float:
        return self.vs.shape[0] * self.dx


def sample_layered_model(rng: np.random.Generator) -> list:
    """Draw the layer table of one geology.

    1..6 heterogeneous layers with thicknesses uniform on the simplex
    (sorted uniform break points) summing to 7.8 km, mean Vs uniform in
    [1785, 3214] m/s, coefficient of variation folded-normal |N(0.2, 0.1)|
    and per-axis correlation lengths from {1500, 3000, 4500, 6000} m; a
    fixed homogeneous bottom layer (1800 m at 4500 m/s) closes the column.
    """
    n = int(rng.integers(1, MAX_RANDOM_LAYERS + 1))
    if n == 1:
        thicknesses = np.array([HETEROGENEOUS_THICKNESS])
    else:
        breaks = np.sort(rng.uniform(0.0, HETEROGENEOUS_THICKNESS, size=n - 1))
        edges = np.concatenate([[0.0], breaks, [HETEROGENEOUS_THICKNESS]])
        thicknesses = np.diff(edges)
    layers = []
    for t in thicknesses:
        mean_vs = rng.uniform(*MEAN_VS_RANGE)
        cv = abs(rng.normal(CV_MEAN, CV_STD))
        lc = tuple(rng.choice(CORRELATION_LENGTHS) for _ in range(3))
        layers.append(GeoLayer(float(t), float(mean_vs), float(cv), lc))
    layers.append(GeoLayer(BOTTOM_LAYER[0], BOTTOM_LAYER[1], 0.0,
                           (CORRELATION_LENGTHS[0],) * 3))
    return layers


def gaussian_random_field(shape, spacing: float, lc, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean, unit-variance stationary Gaussian field.

    Spectral synthesis: white noise filtered in the Fourier domain by the
    square root of the (discretely sampled) power spectrum of the Gaussian
    correlation rho(r) = exp(-sum_i r_i^2 / lc_i^2). The field is built on
    a grid padded by 2*lc per axis and cropped, which pushes the periodic
    wrap-around correlation below e^-4.
    """
    lc = np.broadcast_to(np.asarray(lc, dtype=np.float64), (3,))
    if np.any(lc <= 0):
        raise ValueError("correlation lengths must be positive")
    shape = tuple(int(s) for s in shape)
    padded = tuple(s + int(np.ceil(2.0 * l / spacing)) for s, l in zip(shape, lc))

    # target correlation on the padded periodic grid (wrap-around metric)
    sq = []
    for n, l in zip(padded, lc):
        idx = np.arange(n)
        d = np.minimum(idx, n - idx) * spacing
        sq.append((d / l) ** 2)
    corr = np.exp(-(sq[0][:, None, None] + sq[1][None, :, None] + sq[2][None, None, :]))
    spectrum = np.fft.fftn(corr).real
    np.maximum(spectrum, 0.0, out=spectrum)  # clip tiny negative roundoff

    noise = rng.standard_normal(padded)
    field = np.fft.ifftn(np.fft.fftn(noise) * np.sqrt(spectrum)).real
    return np.ascontiguousarray(field[: shape[0], : shape[1], : shape[2]])


def layer_index_by_depth(layers, nz: int, dx: float) -> np.ndarray:
    """Which layer each depth cell belongs to (by cell-center depth)."""
    tops = np.cumsum([0.0] + [l.thickness for l in layers])
    centers = (np.arange(nz) + 0.5) * dx
    idx = np.searchsorted(tops, centers, side="right") - 1
    return np.clip(idx, 0, len(layers) - 1)


def apply_heterogeneity(layers, fields, shape, dx: float) -> GeologyModel:
    """Assemble the Vs grid from a layer table and one random field per
    layer.

    Within each layer, Vs = mean * exp(sigma*G - sigma^2/2) with
    sigma = sqrt(ln(1 + cv^2)), preserving the layer mean before the
    global clip to [1071, 4500] m/s.
    """
    if len(fields) != len(layers):
        raise ValueError("need one random field per layer")
    shape = tuple(int(s) for s in shape)
    vs = np.empty(shape, dtype=np.float64)
    which = layer_index_by_depth(layers, shape[2], dx)
    for li, (layer, G) in enumerate(zip(layers, fields)):
        mask = which == li
        if not np.any(mask):
            continue
        if layer.cv == 0.0:
            vs[:, :, mask] = layer.mean_vs
        else:
            sigma = np.sqrt(np.log1p(layer.cv**2))
            factor = np.exp(sigma * G[:, :, mask] - 0.5 * sigma**2)
            vs[:, :, mask] = layer.mean_vs * factor
    np.clip(vs, VS_MIN, VS_MAX, out=vs)
    vp, rho = derive_vp_rho(vs)
    return GeologyModel(vs=vs, vp=vp, rho=rho, dx=dx, layers=list(layers))


def derive_vp_rho(vs: np.ndarray):
    """Deterministic companions of Vs: Vp = 1.7*Vs and a monotone
    piecewise-linear density law through the calibration pairs."""
    vs = np.asarray(vs, dtype=np.float64)
    if np.any(vs <= 0):
        raise ValueError("Vs must be positive")
    vp = VP_OVER_VS * vs
    rho = np.interp(vs, _RHO_KNOTS_VS, _RHO_KNOTS_RHO)
    return vp, rho


def generate_geology(master_seed: int, index: int, shape, dx: float,
                     layers=None) -> GeologyModel:
    """One reproducible geology: the stream depends only on
    (master_seed, index), never on generation order or worker."""
    from ._rng import stream

    rng = stream(master_seed, "geology", index)
    if layers is None:
        layers = sample_layered_model(rng)
    fields = []
    for layer in layers:
        if layer.cv == 0.0:
            fields.append(np.zeros(tuple(int(s) for s in shape)))
        else:
            lc_cells = np.asarray(layer.lc, dtype=np.float64)
            fields.append(gaussian_random_field(shape, dx, lc_cells, rng))
    return apply_heterogeneity(layers, fields, shape, dx)


def load_preset(name: str) -> list:
    """Bundled layer tables.

    ``le_teil_1d``: the six-layer 1D reference model (no heterogeneity).
    ``paper_domain``: the generic stochastic domain parameters, expressed
    as the fixed bottom layer below a placeholder for sampled layers.
    """
    if name == "le_teil_1d":
        thick = [600.0, 600.0, 300.0, 600.0, 5700.0, 1800.0]
        vs = [2100.0, 3500.0, 1200.0, 2300.0, 3500.0, 4500.0]
        lc = (CORRELATION_LENGTHS[0],) * 3
        return [GeoLayer(t, v, 0.0, lc) for t, v in zip(thick, vs)]
    if name == "paper_domain":
        return [GeoLayer(HETEROGENEOUS_THICKNESS, float(np.mean(MEAN_VS_RANGE)), 0.0,
                         (CORRELATION_LENGTHS[0],) * 3),
                GeoLayer(BOTTOM_LAYER[0], BOTTOM_LAYER[1], 0.0,
                         (CORRELATION_LENGTHS[0],) * 3)]
    raise KeyError(f"unknown preset {name!r}")
