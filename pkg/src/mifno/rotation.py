"""Quarter-turn rotations of whole samples about the vertical axis.

A rotated sample obeys the same physics as the original, so rotations of
(geology, source, wavefield) triples serve as data augmentation. One
turn adds 90 degrees to every azimuth: north maps to east. For grids
this sends cell (i, j) to (j, N-1-i); for horizontal vector components
(E, N) -> (N, -E); for sources, strike increases by 90 degrees and the
position rotates about the domain center. Vertical structure and the Z
component are untouched.
"""
from __future__ import annotations

from dataclasses import replace

import numpy as np

from .geology import GeologyModel
from .sources import SourceSpec, rotated_source


def _check_square(shape):
    if shape[0] != shape[1]:
        raise ValueError(f"rotation needs a square horizontal grid, got {shape[:2]}")


def rotate_grid(a: np.ndarray, k: int) -> np.ndarray:
    """Rotate a (Nx, Ny, ...) grid k quarter turns azimuthally.

    One turn: new[i, j] = old[N-1-j, i], which is numpy's rot90 with a
    negative k in the leading two axes.
    """
    _check_square(a.shape)
    return np.ascontiguousarray(np.rot90(a, k=-int(k) % 4, axes=(0, 1)))


def rotate_wavefield(data: np.ndarray, k: int) -> np.ndarray:
    """Rotate sensor-grid velocity data (ns, ns, Nt, 3), remapping the
    horizontal components as vectors: (E, N) -> (N, -E) per turn."""
    _check_square(data.shape)
    out = np.asarray(data, dtype=np.float64)
    for _ in range(int(k) % 4):
        out = np.rot90(out, k=-1, axes=(0, 1))
        e, n, z = out[..., 0], out[..., 1], out[..., 2]
        out = np.stack([n, -e, z], axis=-1)
    return np.ascontiguousarray(out)


def rotate_sample_90(geology: GeologyModel, source: SourceSpec,
                     wavefield, k: int):
    """Rotate a (geology, source, wavefield) triple by k quarter turns.

    The wavefield may be a raw (ns, ns, Nt, 3) array, an object carrying
    one in a `data` attribute (a surface record), or None.
    """
    k = int(k) % 4
    if k == 0:
        return geology, source, wavefield
    geo = replace(
        geology,
        vs=rotate_grid(geology.vs, k),
        vp=rotate_grid(geology.vp, k),
        rho=rotate_grid(geology.rho, k),
    )
    src = rotated_source(source, k, geology.domain_length())
    if wavefield is None:
        wf = None
    elif isinstance(wavefield, np.ndarray):
        wf = rotate_wavefield(wavefield, k)
    else:
        wf = replace(wavefield, data=rotate_wavefield(wavefield.data, k))
    return geo, src, wf
