"""Neural-operator building blocks.

Tensors are channels-last throughout: an activation field has shape
(..., n1, n2, n3, c) where the leading ... is an optional batch axis, n1
and n2 are the horizontal axes, and n3 is depth early in the network and
time near the output. All blocks work on both batched and unbatched
fields because every operation addresses axes from the end.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad

AX1, AX2, AX3 = -4, -3, -2  # spatial axes relative to channels-last layout


def coordinate_grids(shape):
    """Unit-cube coordinate meshes for a (n1, n2, n3) field.

    Each grid holds the cell-center coordinate of its own axis, normalized
    to [0, 1]: position (i + 0.5)/n.
    """
    n1, n2, n3 = shape
    gx = (np.arange(n1) + 0.5) / n1
    gy = (np.arange(n2) + 0.5) / n2
    gz = (np.arange(n3) + 0.5) / n3
    X, Y, Z = np.meshgrid(gx, gy, gz, indexing="ij")
    return X, Y, Z


def stack_input_channels(a: np.ndarray, extra_cubes=()):
    """Geology plus coordinate grids (plus optional extra cubes) as a
    channels-last array. `a` may carry a leading batch axis."""
    batched = a.ndim == 4
    spatial = a.shape[-3:]
    X, Y, Z = coordinate_grids(spatial)
    grids = [X, Y, Z] + [np.broadcast_to(c, spatial) for c in extra_cubes]
    if batched:
        b = a.shape[0]
        chans = [a] + [np.broadcast_to(g, (b,) + spatial) for g in grids]
    else:
        chans = [a] + grids
    return np.stack(chans, axis=-1)


def uplift(a, grids, W, b) -> ad.Tensor:
    """Pointwise linear lift of the (geology, x, y, z) channels to d_v.

    `a` is the normalized geology array; `grids` the three coordinate
    meshes (matching shapes). Positions are treated independently.
    """
    a = np.asarray(a, dtype=np.float64)
    if any(np.shape(g) != a.shape[-3:] for g in grids):
        raise ValueError("uplift: grid/geology shape mismatch")
    stacked = stack_input_channels(a) if len(grids) == 3 else None
    if stacked is None:
        raise ValueError("uplift expects exactly three coordinate grids")
    return ad.pointwise_linear(ad.Tensor(stacked), W, b)


def effective_modes(weights: ad.Tensor, n_in: int, n_out: int) -> ad.Tensor:
    """Clamp spectral weights to the modes the working resolution supports.

    Mode k of an n-point axis exists only for k <= n//2, so when the field
    is shorter than the weights allow, the surplus rows are sliced away
    (their gradient is zero-padded back). Runs the full tensor through
    untouched when nothing needs clamping.
    """
    limit = min(n_in // 2 + 1, n_out // 2 + 1)
    m = weights.data.shape[0]
    if m <= limit:
        return weights
    return ad.slice_axis(weights, 0, limit)


def spectral_conv(v, R1, R2, R3, out_len3=None) -> ad.Tensor:
    """Sum of three per-axis truncated spectral multiplications.

    Axes 1 and 2 keep their lengths; the axis-3 term is synthesized
    directly at ``out_len3`` and the axis-1/2 terms are Fourier-resampled
    to match, so the three summands always share one shape.
    """
    n1, n2, n3 = v.shape[AX1], v.shape[AX2], v.shape[AX3]
    out3 = int(out_len3) if out_len3 is not None else n3
    t1 = ad.spectral_conv_1d(v, effective_modes(R1, n1, n1), axis=v.ndim + AX1)
    t2 = ad.spectral_conv_1d(v, effective_modes(R2, n2, n2), axis=v.ndim + AX2)
    t3 = ad.spectral_conv_1d(v, effective_modes(R3, n3, out3), axis=v.ndim + AX3,
                             out_len=out3)
    t12 = ad.add(t1, t2)
    if out3 != n3:
        t12 = ad.resample_axis(t12, v.ndim + AX3, out3)
    return ad.add(t12, t3)


def modify_dimensions(v, new_len: int) -> ad.Tensor:
    """Fourier-domain length change of the third spatial axis.

    Coefficients are kept lowest-first, zero-padded (or folded) to the new
    length and rescaled by new_len/n3 so a constant stays the same
    constant; band-limited signals are interpolated exactly.
    """
    v = ad.as_tensor(v)
    return ad.resample_axis(v, v.ndim + AX3, new_len)


def layer_mlp(k, W1, b1, W2, b2, activation="gelu") -> ad.Tensor:
    act = ad.ACTIVATIONS[activation]
    return ad.pointwise_linear(act(ad.pointwise_linear(k, W1, b1)), W2, b2)


def factorized_fourier_layer(v, weights: dict, out_len3=None, activation="gelu") -> ad.Tensor:
    """Residual update v + MLP(spectral_conv(v)).

    When the layer grows the third axis, the residual path is resampled
    with the same Fourier zero-padding before the addition.
    """
    v = ad.as_tensor(v)
    n3 = v.shape[AX3]
    out3 = int(out_len3) if out_len3 is not None else n3
    k = spectral_conv(v, weights["R1"], weights["R2"], weights["R3"], out_len3=out3)
    h = layer_mlp(k, weights["W1"], weights["b1"], weights["W2"], weights["b2"],
                  activation=activation)
    res = v if out3 == n3 else modify_dimensions(v, out3)
    return ad.add(res, h)


def project(vL, weights: dict, activation="gelu"):
    """Three independent two-stage pointwise maps d -> hidden -> 1.

    Returns the (E, N, Z) component fields with the channel axis dropped.
    """
    act = ad.ACTIVATIONS[activation]
    outs = []
    for comp in ("E", "N", "Z"):
        h = act(ad.pointwise_linear(vL, weights[f"{comp}_W1"], weights[f"{comp}_b1"]))
        o = ad.pointwise_linear(h, weights[f"{comp}_W2"], weights[f"{comp}_b2"])
        outs.append(ad.reshape(o, o.shape[:-1]))
    return tuple(outs)


def combine_branches(vK, vs) -> ad.Tensor:
    """concat(vK+vs, vK-vs, vK*vs) along channels: 3x the channel count."""
    if vK.shape != vs.shape:
        raise ValueError(f"combine_branches: shape mismatch {vK.shape} vs {vs.shape}")
    return ad.concat([ad.add(vK, vs), ad.sub(vK, vs), ad.mul(vK, vs)], axis=-1)
