"""Sample collections flowing through the pipeline.

A Dataset stacks geologies, sources, and (once simulated or predicted)
surface wavefields for n scenarios, with the metadata needed to rebuild
the per-sample domain objects. It serializes to the binary container
under canonical entry names, so every pipeline stage exchanges the same
file format.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .container import read_container, write_container
from .geology import GeologyModel
from .sources import SourceSpec

# names under which the standard arrays are stored
CANONICAL_ENTRIES = (
    "geology/vs", "geology/vp", "geology/rho",
    "source/position", "source/angles", "source/moment",
    "wavefield/data", "wavefield/dt",
    "meta/seed", "meta/provenance",
)


@dataclass
class Dataset:
    """Stacked scenario collection.

    angles rows are NaN for sources carried only as moment tensors.
    wavefields is None for input-only collections (pre-simulation).
    """

    vs: np.ndarray            # (n, S, S, Sz) m/s
    vp: np.ndarray
    rho: np.ndarray
    positions: np.ndarray     # (n, 3) m, z negative below the surface
    angles: np.ndarray        # (n, 3) degrees
    moments: np.ndarray       # (n, 6) N*m
    m0: np.ndarray            # (n,) N*m
    rise_times: np.ndarray    # (n,) s
    dx: float                 # m
    wavefields: np.ndarray | None = None   # (n, ns, ns, nt, 3) m/s
    dt: float | None = None                # s, wavefield sampling
    seed: int = 0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vs = np.asarray(self.vs, dtype=np.float64)
        self.vp = np.asarray(self.vp, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.angles = np.asarray(self.angles, dtype=np.float64)
        self.moments = np.asarray(self.moments, dtype=np.float64)
        self.m0 = np.asarray(self.m0, dtype=np.float64)
        self.rise_times = np.asarray(self.rise_times, dtype=np.float64)
        n = self.vs.shape[0] if self.vs.ndim == 4 else -1
        if n < 0 or self.vs.shape[1] != self.vs.shape[2]:
            raise ValueError(
                f"geology stack must be (n, S, S, Sz), got {self.vs.shape}")
        for name, arr, want in (
                ("vp", self.vp, self.vs.shape),
                ("rho", self.rho, self.vs.shape),
                ("positions", self.positions, (n, 3)),
                ("angles", self.angles, (n, 3)),
                ("moments", self.moments, (n, 6)),
                ("m0", self.m0, (n,)),
                ("rise_times", self.rise_times, (n,))):
            if arr.shape != want:
                raise ValueError(f"{name} has shape {arr.shape}, want {want}")
        if self.wavefields is not None:
            self.wavefields = np.asarray(self.wavefields, dtype=np.float64)
            w = self.wavefields
            if w.ndim != 5 or w.shape[0] != n or w.shape[-1] != 3:
                raise ValueError(
                    f"wavefields must be (n, ns, ns, nt, 3), got {w.shape}")
            if self.dt is None:
                raise ValueError("wavefields need their sampling step dt")

    def __len__(self) -> int:
        return self.vs.shape[0]

    @property
    def domain_length(self) -> float:
        return self.vs.shape[1] * self.dx

    def geology(self, i: int) -> GeologyModel:
        return GeologyModel(vs=self.vs[i], vp=self.vp[i], rho=self.rho[i],
                            dx=self.dx)

    def source(self, i: int) -> SourceSpec:
        ang = self.angles[i]
        return SourceSpec(
            position=self.positions[i].copy(),
            angles=None if np.any(np.isnan(ang)) else ang.copy(),
            moment=self.moments[i].copy(),
            m0=float(self.m0[i]),
            rise_time=float(self.rise_times[i]))

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.intp)
        return replace(
            self,
            vs=self.vs[idx], vp=self.vp[idx], rho=self.rho[idx],
            positions=self.positions[idx], angles=self.angles[idx],
            moments=self.moments[idx], m0=self.m0[idx],
            rise_times=self.rise_times[idx],
            wavefields=None if self.wavefields is None
            else self.wavefields[idx],
            provenance=dict(self.provenance))

    @classmethod
    def from_samples(cls, samples, dx: float, dt: float | None = None,
                     seed: int = 0, provenance: dict | None = None) -> "Dataset":
        """Build from (GeologyModel, SourceSpec, record-or-None) triples.

        Records may be raw (ns, ns, nt, 3) arrays or objects with a
        ``data`` attribute; either all samples carry one or none do.
        """
        if not samples:
            raise ValueError("need at least one sample")
        geos, srcs, recs = zip(*samples)
        have = [r is not None for r in recs]
        if any(have) and not all(have):
            raise ValueError("mixed with/without wavefields")
        wf = None
        if all(have):
            wf = np.stack([np.asarray(getattr(r, "data", r)) for r in recs])
            if dt is None:
                dt = getattr(recs[0], "dt_out", None)
        angles = np.stack([
            s.angles if s.angles is not None else np.full(3, np.nan)
            for s in srcs])
        return cls(
            vs=np.stack([g.vs for g in geos]),
            vp=np.stack([g.vp for g in geos]),
            rho=np.stack([g.rho for g in geos]),
            positions=np.stack([s.position for s in srcs]),
            angles=angles,
            moments=np.stack([s.moment_vector() for s in srcs]),
            m0=np.array([s.m0 for s in srcs]),
            rise_times=np.array([s.rise_time for s in srcs]),
            dx=float(dx), wavefields=wf, dt=dt, seed=int(seed),
            provenance=dict(provenance or {}))

    @staticmethod
    def concatenate(parts) -> "Dataset":
        parts = list(parts)
        if not parts:
            raise ValueError("nothing to concatenate")
        first = parts[0]
        for p in parts[1:]:
            if p.dx != first.dx or (p.wavefields is None) != (
                    first.wavefields is None) or p.dt != first.dt:
                raise ValueError("incompatible dataset parts")
        def cat(name):
            return np.concatenate([getattr(p, name) for p in parts])

        return replace(
            first,
            vs=cat("vs"), vp=cat("vp"), rho=cat("rho"),
            positions=cat("positions"), angles=cat("angles"),
            moments=cat("moments"), m0=cat("m0"),
            rise_times=cat("rise_times"),
            wavefields=None if first.wavefields is None else cat("wavefields"),
            provenance=dict(first.provenance))

    def to_entries(self) -> dict:
        entries = {
            "geology/vs": self.vs, "geology/vp": self.vp,
            "geology/rho": self.rho,
            "source/position": self.positions, "source/angles": self.angles,
            "source/moment": self.moments, "source/m0": self.m0,
            "source/rise_time": self.rise_times,
            "meta/dx": np.float64(self.dx),
            "meta/seed": np.int64(self.seed),
            "meta/provenance": np.frombuffer(
                json.dumps(self.provenance, sort_keys=True).encode("utf-8"),
                dtype=np.uint8),
        }
        if self.wavefields is not None:
            entries["wavefield/data"] = self.wavefields
            entries["wavefield/dt"] = np.float64(self.dt)
        return entries

    def save(self, path) -> None:
        write_container(path, self.to_entries())

    @classmethod
    def load(cls, path) -> "Dataset":
        e = read_container(path)
        try:
            wf = e.get("wavefield/data")
            return cls(
                vs=e["geology/vs"], vp=e["geology/vp"], rho=e["geology/rho"],
                positions=e["source/position"], angles=e["source/angles"],
                moments=e["source/moment"], m0=e["source/m0"],
                rise_times=e["source/rise_time"],
                dx=float(e["meta/dx"]),
                wavefields=wf,
                dt=float(e["wavefield/dt"]) if wf is not None else None,
                seed=int(e["meta/seed"]),
                provenance=json.loads(bytes(e["meta/provenance"]).decode("utf-8")))
        except KeyError as exc:
            raise ValueError(f"{path}: missing dataset entry {exc}") from None


def split_indices(n: int, fractions, seed: int) -> dict:
    """Deterministic disjoint train/val/test index arrays.

    fractions: (train, val, test) summing to at most 1; val gets at least
    one sample whenever its fraction is positive, train always does.
    """
    from ._rng import stream

    f_train, f_val, f_test = (float(f) for f in fractions)
    if min(f_train, f_val, f_test) < 0 or f_train + f_val + f_test > 1 + 1e-9:
        raise ValueError(f"bad split fractions {fractions}")
    n_val = int(round(n * f_val))
    if f_val > 0:
        n_val = max(1, n_val)
    n_test = int(round(n * f_test))
    if f_train + f_val + f_test >= 1 - 1e-9:
        n_train = n - n_val - n_test
    else:
        n_train = min(int(round(n * f_train)), n - n_val - n_test)
    if n_train < 1:
        raise ValueError(
            f"split {fractions} of {n} samples leaves no training data")
    perm = stream(seed, "split").permutation(n)
    return {"train": np.sort(perm[:n_train]),
            "val": np.sort(perm[n_train:n_train + n_val]),
            "test": np.sort(perm[n_train + n_val:n_train + n_val + n_test])}
