"""Reference elastic wave solver.

Staggered-grid velocity-stress finite differences, 4th order in space and
2nd order (leapfrog) in time, on a cubic domain with a free surface on
top, exponential sponge layers on the lateral and bottom faces, and a
moment-tensor point source with the rise-time source history from the
sources module.

Grid layout (x east, y north, z depth, all indices growing with the
coordinate): normal stresses and material parameters live at cell centers
(i+1/2, j+1/2, k+1/2); vx at (i, j+1/2, k+1/2); vy at (i+1/2, j, k+1/2);
vz at (i+1/2, j+1/2, k); sxy at (i, j, k+1/2); sxz at (i, j+1/2, k);
syz at (i+1/2, j, k). The free surface z = 0 passes through the vz /
sxz / syz plane, so the surface condition is sxz = syz = 0 on the plane
plus an antisymmetric image of szz above it. Recorded velocities are
(E, N, Z) = (vx, vy, -vz): the grid z axis points down.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geology import GeologyModel
from .sources import SourceSpec, moment_rate, moment_to_matrix

C1, C2 = 9.0 / 8.0, 1.0 / 24.0  # 4th-order staggered stencil
MARGIN = 2  # rigid frame cells outside the sponge


class SimulationError(RuntimeError):
    """Raised when a run is refused (CFL) or aborts (non-finite fields)."""


@dataclass
class SimConfig:
    """Discretization and recording parameters.

    dt = None picks the largest stable step that divides dt_out evenly.
    """
    duration: float = 3.2  # s
    dt_out: float = 0.02  # s, sensor sampling interval
    dt: float | None = None
    sponge_width: int = 10  # cells
    sponge_factor: float = 0.95  # damping at the outer face
    ns: int = 16  # sensors per horizontal axis
    dx: float | None = None  # m; None = take the geology's spacing


@dataclass
class WaveformRecord:
    """Three-component surface velocity movie.

    data has shape (ns, ns, Nt, 3) with component order (E, N, Z), sampled
    at t = dt_out, 2*dt_out, ..., Nt*dt_out.
    """
    data: np.ndarray
    dt_out: float
    sensor_x: np.ndarray
    sensor_y: np.ndarray
    provenance: str = "simulated"
    energy: np.ndarray | None = None  # interior kinetic energy per sample

    @property
    def times(self) -> np.ndarray:
        return self.dt_out * np.arange(1, self.data.shape[2] + 1)


def sensor_positions(ns: int, domain_length: float) -> np.ndarray:
    """Sensor coordinates along one axis: cell centers of an ns-grid."""
    return (np.arange(ns) + 0.5) * (domain_length / ns)


def max_stable_dt(vp_max: float, dx: float) -> float:
    return 0.5 * dx / (np.sqrt(3.0) * vp_max)


def stability_check(g: GeologyModel, cfg: SimConfig, freq: float = 2.0) -> dict:
    """Discretization health report: stable step, resolution, absorption."""
    dx = g.dx if cfg.dx is None else cfg.dx
    vp_max = float(g.vp.max())
    vs_min = float(g.vs.min())
    dt_max = max_stable_dt(vp_max, dx)
    n_sub = max(1, int(np.ceil(cfg.dt_out / dt_max)))
    dt = cfg.dt_out / n_sub if cfg.dt is None else cfg.dt
    ppw = vs_min / (freq * dx)
    w = cfg.sponge_width
    beta_sq = -np.log(cfg.sponge_factor)
    d = np.arange(w)
    steps_per_cell = dx / (vp_max * dt)
    two_way = np.exp(-2.0 * beta_sq * steps_per_cell
                     * np.sum((1.0 - d / w) ** 2))
    return {
        "dt_max": dt_max,
        "dt": dt,
        "points_per_wavelength": ppw,
        "under_resolved": bool(ppw < 4.0),
        "sponge_reflection_estimate": float(two_way),
    }


# ---------------------------------------------------------------------------
# stencils
# ---------------------------------------------------------------------------

def _sl(ndim, axis, lo, hi):
    s = [slice(None)] * ndim
    s[axis] = slice(lo, hi)
    return tuple(s)


def _d_node(a: np.ndarray, axis: int, dx: float) -> np.ndarray:
    """Derivative at integer points of samples living at half points.

    out[p] = (c1*(a[p] - a[p-1]) - c2*(a[p+1] - a[p-2])) / dx
    """
    n = a.shape[axis]
    out = np.zeros_like(a)
    body = _sl(a.ndim, axis, 2, n - 1)
    out[body] = (C1 * (a[_sl(a.ndim, axis, 2, n - 1)] - a[_sl(a.ndim, axis, 1, n - 2)])
                 - C2 * (a[_sl(a.ndim, axis, 3, n)]
                         - a[_sl(a.ndim, axis, 0, n - 3)])) / dx
    return out


def _d_cell(a: np.ndarray, axis: int, dx: float) -> np.ndarray:
    """Derivative at half points of samples living at integer points.

    out[p] = (c1*(a[p+1] - a[p]) - c2*(a[p+2] - a[p-1])) / dx
    """
    n = a.shape[axis]
    out = np.zeros_like(a)
    body = _sl(a.ndim, axis, 2, n - 2)
    out[body] = (C1 * (a[_sl(a.ndim, axis, 3, n - 1)] - a[_sl(a.ndim, axis, 2, n - 2)])
                 - C2 * (a[_sl(a.ndim, axis, 4, n)]
                         - a[_sl(a.ndim, axis, 1, n - 3)])) / dx
    return out


def _shift_back(a: np.ndarray, axis: int) -> np.ndarray:
    """a[p-1] with edge replication (used for material averaging)."""
    n = a.shape[axis]
    lead = a[_sl(a.ndim, axis, 0, 1)]
    return np.concatenate([lead, a[_sl(a.ndim, axis, 0, n - 1)]], axis=axis)


def _harmonic4(m: np.ndarray, ax1: int, ax2: int) -> np.ndarray:
    inv = 1.0 / m
    inv = inv + _shift_back(inv, ax1)
    inv = inv + _shift_back(inv, ax2)
    return 4.0 / inv


# ---------------------------------------------------------------------------
# source handling
# ---------------------------------------------------------------------------

def _grid_moment(s: SourceSpec) -> dict:
    """Moment components in the grid frame (x=E, y=N, z=down)."""
    M = moment_to_matrix(s.moment_vector())  # (north, east, down)
    return {
        "xx": M[1, 1], "yy": M[0, 0], "zz": M[2, 2],
        "xy": M[0, 1], "xz": M[1, 2], "yz": M[0, 2],
    }


def _trilinear(shape, fx, fy, fz):
    """(indices, weights) distributing a point over its 8 grid neighbors."""
    out = []
    ix, iy, iz = int(np.floor(fx)), int(np.floor(fy)), int(np.floor(fz))
    wx, wy, wz = fx - ix, fy - iy, fz - iz
    for dx_, wa in ((0, 1 - wx), (1, wx)):
        for dy_, wb in ((0, 1 - wy), (1, wy)):
            for dz_, wc in ((0, 1 - wz), (1, wz)):
                w = wa * wb * wc
                if w == 0.0:
                    continue
                p = (ix + dx_, iy + dy_, iz + dz_)
                if not all(0 <= q < n for q, n in zip(p, shape)):
                    raise SimulationError(f"source stencil outside grid at {p}")
                out.append((p, w))
    return out


class _Injector:
    """Precomputed stress-injection stencils for one source."""

    def __init__(self, s: SourceSpec, dx: float, shape, ox, oy, oz, length):
        x, y, z = (float(v) for v in s.position)
        d = abs(z)
        if not (0.0 <= x <= length and 0.0 <= y <= length):
            raise SimulationError(f"source at {s.position} outside the domain")
        self.moment = _grid_moment(s)
        self.tau = s.rise_time
        cell = dx ** 3
        # fractional indices per staggered sub-grid (cell axes carry -0.5)
        self.stencils = {
            "xx": _trilinear(shape, x / dx - 0.5 + ox, y / dx - 0.5 + oy,
                             d / dx - 0.5 + oz),
            "xy": _trilinear(shape, x / dx + ox, y / dx + oy, d / dx - 0.5 + oz),
            "xz": _trilinear(shape, x / dx + ox, y / dx - 0.5 + oy, d / dx + oz),
            "yz": _trilinear(shape, x / dx - 0.5 + ox, y / dx + oy, d / dx + oz),
        }
        self.stencils["yy"] = self.stencils["xx"]
        self.stencils["zz"] = self.stencils["xx"]
        self.cell_volume = cell

    def add(self, fields: dict, t: float, dt: float):
        rate = moment_rate(t, self.tau)
        if rate == 0.0:
            return
        scale = rate * dt / self.cell_volume
        for comp, arr in fields.items():
            m = self.moment[comp]
            if m == 0.0:
                continue
            for p, w in self.stencils[comp]:
                arr[p] -= m * scale * w


# ---------------------------------------------------------------------------
# main entry
# ---------------------------------------------------------------------------

def _pad_material(a: np.ndarray, w: int) -> np.ndarray:
    return np.pad(a, ((w + MARGIN, w + MARGIN), (w + MARGIN, w + MARGIN),
                      (MARGIN, w + MARGIN)), mode="edge")


def _sponge_profile(n_total: int, w: int, factor: float, kind: str,
                    top_free: bool = False) -> np.ndarray:
    """Per-axis damping profile, registered to the field's own positions.

    kind = "cell" places samples at p + 1/2, "node" at p (index units).
    Each staggered field must be damped by a profile registered to its
    actual positions; sharing one profile across staggerings makes the
    absorption left/right asymmetric.
    """
    beta = np.sqrt(-np.log(factor))
    pos = np.arange(n_total) + (0.5 if kind == "cell" else 0.0)
    d_hi = (n_total - MARGIN) - pos
    d = d_hi if top_free else np.minimum(pos - MARGIN, d_hi)
    d = np.clip(d, 0.0, w)
    return np.exp(-(beta * (1.0 - d / w)) ** 2)


def _damp_arrays(shape, w: int, factor: float) -> dict:
    """One 3D taper per field, matching its (x, y, z) staggering."""
    px = {k: _sponge_profile(shape[0], w, factor, k) for k in ("cell", "node")}
    py = {k: _sponge_profile(shape[1], w, factor, k) for k in ("cell", "node")}
    pz = {k: _sponge_profile(shape[2], w, factor, k, top_free=True)
          for k in ("cell", "node")}

    def make(kx, ky, kz):
        return (px[kx][:, None, None] * py[ky][None, :, None]
                * pz[kz][None, None, :])

    return {
        "ccc": make("cell", "cell", "cell"),   # normal stresses
        "ncc": make("node", "cell", "cell"),   # vx
        "cnc": make("cell", "node", "cell"),   # vy
        "ccn": make("cell", "cell", "node"),   # vz
        "nnc": make("node", "node", "cell"),   # sxy
        "ncn": make("node", "cell", "node"),   # sxz
        "cnn": make("cell", "node", "node"),   # syz
    }


def simulate(g: GeologyModel, sources, cfg: SimConfig) -> WaveformRecord:
    """Run one forward simulation and record the surface sensors.

    `sources` is a SourceSpec or a sequence of them (linearity makes the
    multi-source record the sum of single-source records).
    """
    if isinstance(sources, SourceSpec):
        sources = [sources]
    sources = list(sources)
    dx = g.dx if cfg.dx is None else float(cfg.dx)
    if abs(dx - g.dx) > 1e-9:
        raise SimulationError(f"config dx {dx} != geology dx {g.dx}")
    nx, ny, nz = g.shape
    if nx != ny:
        raise SimulationError("horizontal grid must be square")
    length = nx * dx

    vp_max = float(g.vp.max())
    dt_max = max_stable_dt(vp_max, dx)
    if cfg.dt is None:
        n_sub = max(1, int(np.ceil(cfg.dt_out / dt_max)))
        dt = cfg.dt_out / n_sub
    else:
        dt = float(cfg.dt)
        if dt > dt_max * (1 + 1e-12):
            raise SimulationError(
                f"dt={dt:.6g}s violates the stability bound {dt_max:.6g}s")
        n_sub = int(round(cfg.dt_out / dt))
        if abs(n_sub * dt - cfg.dt_out) > 1e-9 * cfg.dt_out:
            raise SimulationError("dt_out must be an integer multiple of dt")
    nt_out = int(round(cfg.duration / cfg.dt_out))
    if abs(nt_out * cfg.dt_out - cfg.duration) > 1e-9 * max(cfg.duration, 1.0):
        raise SimulationError("duration must be an integer multiple of dt_out")

    w = int(cfg.sponge_width)
    ox = oy = w + MARGIN
    oz = MARGIN
    shape = (nx + 2 * ox, ny + 2 * oy, nz + w + MARGIN + oz)

    # material fields at cell centers, extended through sponge and margin
    rho = _pad_material(g.rho, w)
    mu = _pad_material(g.rho * g.vs ** 2, w)
    lam = _pad_material(g.rho * g.vp ** 2, w) - 2.0 * mu
    lam2mu = lam + 2.0 * mu
    bx = dt / (0.5 * (rho + _shift_back(rho, 0)))
    by = dt / (0.5 * (rho + _shift_back(rho, 1)))
    bz = dt / (0.5 * (rho + _shift_back(rho, 2)))
    mu_xy = dt * _harmonic4(mu, 0, 1)
    mu_xz = dt * _harmonic4(mu, 0, 2)
    mu_yz = dt * _harmonic4(mu, 1, 2)
    lam_dt, lam2mu_dt = dt * lam, dt * lam2mu

    damp = _damp_arrays(shape, w, cfg.sponge_factor)

    zeros = lambda: np.zeros(shape)
    vx, vy, vz = zeros(), zeros(), zeros()
    sxx, syy, szz = zeros(), zeros(), zeros()
    sxy, sxz, syz = zeros(), zeros(), zeros()

    injectors = [_Injector(s, dx, shape, ox, oy, oz, length) for s in sources]
    stress_fields = {"xx": sxx, "yy": syy, "zz": szz,
                     "xy": sxy, "xz": sxz, "yz": syz}

    # sensor interpolation tables: bilinear per staggered sub-grid
    spos = sensor_positions(cfg.ns, length)
    sgx, sgy = np.meshgrid(spos, spos, indexing="ij")

    def bilinear_table(fx, fy):
        ix = np.floor(fx).astype(int)
        iy = np.floor(fy).astype(int)
        return ix, iy, fx - ix, fy - iy

    tab_vx = bilinear_table(sgx / dx + ox, sgy / dx - 0.5 + oy)
    tab_vy = bilinear_table(sgx / dx - 0.5 + ox, sgy / dx + oy)
    tab_vz = bilinear_table(sgx / dx - 0.5 + ox, sgy / dx - 0.5 + oy)

    def sample(plane, tab):
        ix, iy, wx, wy = tab
        return ((1 - wx) * (1 - wy) * plane[ix, iy]
                + wx * (1 - wy) * plane[ix + 1, iy]
                + (1 - wx) * wy * plane[ix, iy + 1]
                + wx * wy * plane[ix + 1, iy + 1])

    record = np.zeros((cfg.ns, cfg.ns, nt_out, 3))
    energy = np.zeros(nt_out)
    interior = np.s_[ox: ox + nx, oy: oy + ny, oz: oz + nz]
    rho_int = rho[interior]
    surf = oz  # array z-index of the free-surface plane
    nt_total = nt_out * n_sub

    for step in range(nt_total):
        t_half = (step + 0.5) * dt

        # ---- stress update from velocity gradients ----
        dvx_dx = _d_cell(vx, 0, dx)
        dvy_dy = _d_cell(vy, 1, dx)
        dvz_dz = _d_cell(vz, 2, dx)
        # free surface: one-sided 2nd-order dvz/dz on the first cell row
        dvz_dz[:, :, surf] = (vz[:, :, surf + 1] - vz[:, :, surf]) / dx
        trace = dvx_dx + dvy_dy + dvz_dz
        sxx += lam_dt * trace + 2.0 * dt * mu * dvx_dx
        syy += lam_dt * trace + 2.0 * dt * mu * dvy_dy
        szz += lam_dt * trace + 2.0 * dt * mu * dvz_dz

        sxy += mu_xy * (_d_node(vx, 1, dx) + _d_node(vy, 0, dx))
        dvx_dz = _d_node(vx, 2, dx)
        dvy_dz = _d_node(vy, 2, dx)
        # rows at and just below the surface: 2nd order, no ghosts above
        dvx_dz[:, :, surf + 1] = (vx[:, :, surf + 1] - vx[:, :, surf]) / dx
        dvy_dz[:, :, surf + 1] = (vy[:, :, surf + 1] - vy[:, :, surf]) / dx
        sxz += mu_xz * (dvx_dz + _d_node(vz, 0, dx))
        syz += mu_yz * (dvy_dz + _d_node(vz, 1, dx))

        for inj in injectors:
            inj.add(stress_fields, t_half, dt)

        # free-surface shear stresses vanish on the plane itself
        sxz[:, :, surf] = 0.0
        syz[:, :, surf] = 0.0
        sxx *= damp["ccc"]
        syy *= damp["ccc"]
        szz *= damp["ccc"]
        sxy *= damp["nnc"]
        sxz *= damp["ncn"]
        syz *= damp["cnn"]

        # ---- stress images above the free surface ----
        szz[:, :, surf - 1] = -szz[:, :, surf]
        szz[:, :, surf - 2] = -szz[:, :, surf + 1]
        sxz[:, :, surf - 1] = -sxz[:, :, surf + 1]
        sxz[:, :, surf - 2] = -sxz[:, :, surf + 2]
        syz[:, :, surf - 1] = -syz[:, :, surf + 1]
        syz[:, :, surf - 2] = -syz[:, :, surf + 2]

        # ---- velocity update from stress divergence ----
        vx += bx * (_d_node(sxx, 0, dx) + _d_cell(sxy, 1, dx) + _d_cell(sxz, 2, dx))
        vy += by * (_d_cell(sxy, 0, dx) + _d_node(syy, 1, dx) + _d_cell(syz, 2, dx))
        vz += bz * (_d_cell(sxz, 0, dx) + _d_cell(syz, 1, dx) + _d_node(szz, 2, dx))
        vx *= damp["ncc"]
        vy *= damp["cnc"]
        vz *= damp["ccn"]
        # cells above the surface are not part of the solution
        vx[:, :, :surf] = 0.0
        vy[:, :, :surf] = 0.0
        vz[:, :, :surf] = 0.0

        if (step + 1) % n_sub == 0:
            i_out = (step + 1) // n_sub - 1
            record[:, :, i_out, 0] = sample(vx[:, :, surf], tab_vx)
            record[:, :, i_out, 1] = sample(vy[:, :, surf], tab_vy)
            record[:, :, i_out, 2] = -sample(vz[:, :, surf], tab_vz)
            with np.errstate(over="ignore", invalid="ignore"):
                energy[i_out] = 0.5 * dx ** 3 * np.sum(
                    rho_int * (vx[interior] ** 2 + vy[interior] ** 2
                               + vz[interior] ** 2))
            if not np.isfinite(energy[i_out]) \
                    or not np.isfinite(record[:, :, i_out]).all():
                raise SimulationError(
                    f"non-finite fields at step {step + 1} "
                    f"(t = {(step + 1) * dt:.4f} s); unstable discretization")

    return WaveformRecord(data=record, dt_out=cfg.dt_out,
                          sensor_x=spos, sensor_y=spos.copy(),
                          provenance="simulated", energy=energy)
