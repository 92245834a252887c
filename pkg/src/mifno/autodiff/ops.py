"""Differentiable primitive operations.

Everything here is a pure function from Tensors to a Tensor that records
its own backward rule. Shapes are validated strictly: binary elementwise
operations demand identical shapes (no implicit broadcasting; the only
scalar form is ``scale``).

FFT convention: forward transforms are unnormalized, inverse transforms
carry the 1/n factor. Spectral primitives (``spectral_conv_1d``,
``resample_axis``) are fused: their backward rules apply the adjoint of
the whole linear map rather than chaining elementary FFT nodes, which
keeps tapes short and memory flat.
"""
from __future__ import annotations

import numpy as np
import scipy.fft as sfft
from scipy.special import erf

from .tensor import COMPLEX, REAL, Tensor, as_tensor, make_op

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _require_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise family
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape(a, b, "add")

    def backprop(g):
        a.accumulate(g)
        b.accumulate(g)

    return make_op(a.data + b.data, (a, b), backprop)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape(a, b, "sub")

    def backprop(g):
        a.accumulate(g)
        b.accumulate(-g)

    return make_op(a.data - b.data, (a, b), backprop)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _require_same_shape(a, b, "mul")

    def backprop(g):
        a.accumulate(g * np.conj(b.data))
        b.accumulate(g * np.conj(a.data))

    return make_op(a.data * b.data, (a, b), backprop)


def scale(a, s) -> Tensor:
    """Multiply by a python scalar (the one sanctioned broadcast)."""
    a = as_tensor(a)
    s = complex(s) if isinstance(s, complex) else float(s)

    def backprop(g):
        a.accumulate(g * np.conj(s))

    return make_op(a.data * s, (a,), backprop)


def neg(a) -> Tensor:
    return scale(a, -1.0)


def gelu(a) -> Tensor:
    a = as_tensor(a)
    if a.data.dtype == COMPLEX:
        raise TypeError("gelu expects a real tensor")
    x = a.data
    cdf = x * (1.0 / _SQRT2)
    erf(cdf, out=cdf)
    cdf += 1.0
    cdf *= 0.5
    out = x * cdf

    def backprop(g):
        t = x * x
        t *= -0.5
        np.exp(t, out=t)
        t *= _INV_SQRT_2PI
        t *= x
        t += cdf
        t *= g
        a.accumulate(t)

    return make_op(out, (a,), backprop)


def relu(a) -> Tensor:
    a = as_tensor(a)
    if a.data.dtype == COMPLEX:
        raise TypeError("relu expects a real tensor")

    def backprop(g):
        a.accumulate(g * (a.data > 0))

    return make_op(np.maximum(a.data, 0.0), (a,), backprop)


def absolute(a) -> Tensor:
    """|x| for real tensors; subgradient 0 at the kink."""
    a = as_tensor(a)
    if a.data.dtype == COMPLEX:
        raise TypeError("absolute expects a real tensor")

    def backprop(g):
        a.accumulate(g * np.sign(a.data))

    return make_op(np.abs(a.data), (a,), backprop)


def real_part(a) -> Tensor:
    """Re(z); the imaginary direction receives no gradient."""
    a = as_tensor(a)

    def backprop(g):
        a.accumulate(g.astype(COMPLEX) if a.data.dtype == COMPLEX else g)

    return make_op(np.real(a.data), (a,), backprop)


def imag_part(a) -> Tensor:
    """Im(z); gradient flows into the imaginary direction."""
    a = as_tensor(a)
    if a.data.dtype != COMPLEX:
        raise TypeError("imag_part expects a complex tensor")

    def backprop(g):
        a.accumulate(1j * g)

    return make_op(np.imag(a.data), (a,), backprop)


def elementwise(op_kind: str, a, b=None) -> Tensor:
    """Dispatch by name: {add, sub, mul, scale, gelu, relu}."""
    unary = {"gelu": gelu, "relu": relu}
    binary = {"add": add, "sub": sub, "mul": mul}
    if op_kind in unary:
        if b is not None:
            raise ValueError(f"{op_kind} is unary")
        return unary[op_kind](a)
    if op_kind in binary:
        if b is None:
            raise ValueError(f"{op_kind} needs two operands")
        return binary[op_kind](a, b)
    if op_kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


ACTIVATIONS = {"gelu": gelu, "relu": relu}


# ---------------------------------------------------------------------------
# reductions and shape plumbing
# ---------------------------------------------------------------------------

def sum_all(a) -> Tensor:
    a = as_tensor(a)

    def backprop(g):
        a.accumulate(np.broadcast_to(g, a.data.shape))

    return make_op(np.sum(a.data, keepdims=False), (a,), backprop)


def sum_axes(a, axes) -> Tensor:
    """Sum over the given axes (kept out of the result's shape)."""
    a = as_tensor(a)
    axes = tuple(int(ax) % a.data.ndim for ax in axes)

    def backprop(g):
        ge = np.expand_dims(g, axes)
        a.accumulate(np.broadcast_to(ge, a.data.shape))

    return make_op(np.sum(a.data, axis=axes), (a,), backprop)


def mean_all(a) -> Tensor:
    a = as_tensor(a)
    return scale(sum_all(a), 1.0 / a.data.size)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)

    def backprop(g):
        a.accumulate(g.reshape(a.data.shape))

    return make_op(a.data.reshape(shape), (a,), backprop)


def concat(tensors, axis: int) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = int(axis) % tensors[0].data.ndim
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backprop(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            t.accumulate(piece)

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backprop)


# ---------------------------------------------------------------------------
# linear maps
# ---------------------------------------------------------------------------

def slice_axis(a, axis: int, stop: int) -> Tensor:
    """Keep the first `stop` entries along one axis; the gradient zero-pads
    back to the original length."""
    a = as_tensor(a)
    axis = axis % a.data.ndim
    if not 0 < stop <= a.data.shape[axis]:
        raise ValueError("slice_axis: stop out of range")
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(0, stop)

    def backprop(g):
        full = np.zeros(a.data.shape, dtype=g.dtype)
        full[tuple(sl)] = g
        a.accumulate(full)

    return make_op(a.data[tuple(sl)].copy(), (a,), backprop)


def pointwise_linear(v, W, b=None) -> Tensor:
    """y[..., o] = sum_i v[..., i] W[i, o] (+ b[o]): the same affine map at
    every leading position."""
    v, W = as_tensor(v), as_tensor(W)
    if v.data.shape[-1] != W.data.shape[0]:
        raise ValueError(
            f"pointwise_linear: channel mismatch {v.data.shape[-1]} vs {W.data.shape[0]}"
        )
    c_in, c_out = W.data.shape
    # one flat gemm instead of a gemm per leading index
    X2 = np.ascontiguousarray(v.data).reshape(-1, c_in)
    out = (X2 @ W.data).reshape(v.data.shape[:-1] + (c_out,))
    parents = [v, W]
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (c_out,):
            raise ValueError("pointwise_linear: bias shape mismatch")
        out += b.data
        parents.append(b)

    def backprop(g):
        g2 = np.ascontiguousarray(g).reshape(-1, c_out)
        v.accumulate((g2 @ np.conj(W.data).T).reshape(v.data.shape))
        W.accumulate(np.conj(X2).T @ g2)
        if b is not None:
            b.accumulate(g2.sum(axis=0))

    return make_op(out, tuple(parents), backprop)


def _conv_nd(v: Tensor, K: Tensor, nd: int) -> Tensor:
    """Cross-correlation with a 3^nd kernel, zero padding 1, channels last.

    Accepts an optional leading batch axis: rank nd+1 (unbatched) or
    nd+2 (batched).
    """
    if K.data.ndim != nd + 2 or K.data.shape[:nd] != (3,) * nd:
        raise ValueError(f"conv{nd}d: kernel must be shaped {(3,) * nd} + (c_in, c_out)")
    if v.data.ndim not in (nd + 1, nd + 2):
        raise ValueError(f"conv{nd}d: input rank must be {nd + 1} or {nd + 2}")
    if v.data.shape[-1] != K.data.shape[nd]:
        raise ValueError(
            f"conv{nd}d: channel mismatch {v.data.shape[-1]} vs {K.data.shape[nd]}"
        )
    batched = v.data.ndim == nd + 2
    spatial = v.data.shape[-nd - 1:-1]

    pad = [(0, 0)] * v.data.ndim
    for ax in range(-nd - 1, -1):
        pad[ax] = (1, 1)
    vpad = np.pad(v.data, pad)

    offsets = np.ndindex(*(3,) * nd)

    def window(arr, off):
        sl = [slice(None)] * arr.ndim
        for d, o in enumerate(off):
            ax = arr.ndim - nd - 1 + d
            sl[ax] = slice(o, o + spatial[d])
        return arr[tuple(sl)]

    out = None
    for off in offsets:
        term = window(vpad, off) @ K.data[off]
        out = term if out is None else out + term

    def backprop(g):
        gpad = np.zeros_like(vpad)
        lead = tuple(range(g.ndim - 1))
        gK = np.zeros_like(K.data)
        for off in np.ndindex(*(3,) * nd):
            sl = [slice(None)] * vpad.ndim
            for d, o in enumerate(off):
                ax = vpad.ndim - nd - 1 + d
                sl[ax] = slice(o, o + spatial[d])
            gpad[tuple(sl)] += g @ np.conj(K.data[off]).T
            gK[off] = np.tensordot(np.conj(window(vpad, off)), g, axes=(lead, lead))
        crop = [slice(None)] * vpad.ndim
        for ax in range(-nd - 1, -1):
            crop[ax] = slice(1, 1 + vpad.shape[ax] - 2)
        v.accumulate(gpad[tuple(crop)])
        K.accumulate(gK)

    del batched
    return make_op(out, (v, K), backprop)


def conv2d(v, K) -> Tensor:
    """3x3 cross-correlation preserving spatial shape, channels last."""
    return _conv_nd(as_tensor(v), as_tensor(K), 2)


def conv3d(v, K) -> Tensor:
    """3x3x3 cross-correlation preserving spatial shape, channels last."""
    return _conv_nd(as_tensor(v), as_tensor(K), 3)


# ---------------------------------------------------------------------------
# Fourier primitives
# ---------------------------------------------------------------------------

def fft_axis(t, axis: int, direction: str = "forward") -> Tensor:
    """1D discrete Fourier transform along one axis.

    Forward is unnormalized; inverse carries 1/n. The backward rule is the
    adjoint under the same convention: n*ifft for forward, fft/n for
    inverse.
    """
    t = as_tensor(t)
    if not -t.data.ndim <= axis < t.data.ndim:
        raise ValueError(f"fft_axis: axis {axis} out of range for rank {t.data.ndim}")
    axis = axis % t.data.ndim
    n = t.data.shape[axis]

    if direction == "forward":
        out = np.fft.fft(t.data, axis=axis)

        def backprop(g):
            t.accumulate(n * np.fft.ifft(g, axis=axis))

    elif direction == "inverse":
        if t.data.dtype != COMPLEX:
            raise TypeError("fft_axis: inverse expects complex input")
        out = np.fft.ifft(t.data, axis=axis)

        def backprop(g):
            t.accumulate(np.fft.fft(g, axis=axis) / n)

    else:
        raise ValueError("direction must be 'forward' or 'inverse'")

    return make_op(out, (t,), backprop)


def _mode_major(X: np.ndarray, axis: int):
    """(mode-count, everything-else, channels) view for batched matmul."""
    Xt = np.moveaxis(X, axis, 0)
    shape = Xt.shape
    return np.ascontiguousarray(Xt).reshape(shape[0], -1, shape[-1]), shape


def _mode_restore(Y: np.ndarray, shape, axis: int) -> np.ndarray:
    out = Y.reshape(shape[:-1] + (Y.shape[-1],))
    return np.moveaxis(out, 0, axis)


def _contract_modes(X: np.ndarray, R: np.ndarray, axis: int) -> np.ndarray:
    """out[..,k,..,o] = sum_i X[..,k,..,i] R[k,i,o], k at `axis`,
    channels last; one zgemm per mode via broadcasting."""
    Xt, shape = _mode_major(X, axis)
    return _mode_restore(Xt @ R, shape, axis)


def _irfft_adjoint(g: np.ndarray, out: int, axis: int) -> np.ndarray:
    """One-sided spectrum gradient for ``y = irfft(Y, out, axis)``.

    Interior bins feed both half-spectra, so they carry weight 2/out;
    DC and the even-length Nyquist bin carry 1/out.
    """
    Gh = sfft.rfft(g, axis=axis)
    nb = Gh.shape[axis]
    w = np.full(nb, 2.0 / out)
    w[0] = 1.0 / out
    if out % 2 == 0:
        w[-1] = 1.0 / out
    shape = [1] * Gh.ndim
    shape[axis] = nb
    Gh *= w.reshape(shape)
    return Gh


def _rfft_adjoint(Gh: np.ndarray, n: int, axis: int) -> np.ndarray:
    """Signal-space gradient for ``X = rfft(x, axis)`` given dL/dX on the
    leading ``Gh.shape[axis]`` one-sided bins.

    Evaluates sum_k Re(Gh[k] e^{+2pi i k t / n}) with a half-spectrum
    inverse transform: interior bins are pre-halved because the inverse
    doubles them, and the DC/Nyquist imaginary parts are dropped since
    those components of an rfft never depend on the input.
    """
    nb = n // 2 + 1
    kept = Gh.shape[axis]
    spec = list(Gh.shape)
    spec[axis] = nb
    W = np.zeros(spec, dtype=COMPLEX)
    dst = [slice(None)] * Gh.ndim
    dst[axis] = slice(0, kept)
    W[tuple(dst)] = Gh
    w = np.full(nb, 0.5)
    w[0] = 1.0
    if n % 2 == 0:
        w[-1] = 1.0
    shape = [1] * W.ndim
    shape[axis] = nb
    W *= w.reshape(shape)
    pick = [slice(None)] * W.ndim
    pick[axis] = slice(0, 1)
    W[tuple(pick)] = W[tuple(pick)].real
    if n % 2 == 0 and kept == nb:
        pick[axis] = slice(nb - 1, nb)
        W[tuple(pick)] = W[tuple(pick)].real
    return n * sfft.irfft(W, n=n, axis=axis)


def spectral_conv_1d(v, R, axis: int, out_len: int | None = None) -> Tensor:
    """Truncated spectral multiplication along one axis.

    Real input, channels last. FFT along `axis`, keep the `m` lowest
    nonnegative-frequency modes, contract input channels with the complex
    weights R[m, c_in, c_out], mirror conjugates to the negative
    frequencies, zero everything else, inverse FFT at length ``out_len``
    (default: unchanged). When the length changes, retained coefficients
    are rescaled by out_len/n so mode amplitudes are preserved.
    """
    v, R = as_tensor(v), as_tensor(R)
    if v.data.dtype == COMPLEX:
        raise TypeError("spectral_conv_1d expects a real tensor")
    if R.data.ndim != 3:
        raise ValueError("spectral weights must be [modes, c_in, c_out]")
    axis = axis % v.data.ndim
    if axis == v.data.ndim - 1:
        raise ValueError("last axis holds channels; pick a spatial axis")
    n = v.data.shape[axis]
    out = int(out_len) if out_len is not None else n
    m, c_in, c_out = R.data.shape
    if c_in != v.data.shape[-1]:
        raise ValueError(f"spectral_conv_1d: channel mismatch {v.data.shape[-1]} vs {c_in}")
    limit = min(n // 2 + 1, out // 2 + 1)
    if m > limit:
        raise ValueError(f"spectral_conv_1d: {m} modes exceed the {limit}-bin spectrum")

    scale_f = out / n
    X = sfft.rfft(v.data, axis=axis)
    sl = [slice(None)] * X.ndim
    sl[axis] = slice(0, m)
    Xm = X[tuple(sl)]
    Ym = _contract_modes(Xm, R.data, axis)

    spec_shape = list(Ym.shape)
    spec_shape[axis] = out // 2 + 1
    Yhat = np.zeros(spec_shape, dtype=COMPLEX)
    dst = [slice(None)] * Yhat.ndim
    dst[axis] = slice(0, m)
    Yhat[tuple(dst)] = Ym * scale_f
    y = sfft.irfft(Yhat, n=out, axis=axis)

    def backprop(g):
        gYm = _irfft_adjoint(g, out, axis)[tuple(dst)] * scale_f
        # contraction adjoints, batched over the mode axis like the forward
        gYt, shape_y = _mode_major(gYm, axis)
        gXm = _mode_restore(gYt @ np.conj(np.swapaxes(R.data, 1, 2)),
                            shape_y, axis)
        Xt, _ = _mode_major(Xm, axis)
        R.accumulate(np.conj(np.swapaxes(Xt, 1, 2)) @ gYt)
        v.accumulate(_rfft_adjoint(gXm, n, axis))

    return make_op(y, (v, R), backprop)


def _resample_plan(n: int, N: int):
    """(src, dst, weight) index triples mapping an n-bin spectrum to N bins.

    Symmetric placement: nonnegative and negative frequency blocks are
    copied, an even-length source Nyquist bin is split in half when
    growing, and the two bins folding onto an even-length target Nyquist
    are summed when shrinking. Matches scipy.signal.resample.
    """
    triples = []
    if N >= n:
        p = (n - 1) // 2
        for k in range(p + 1):
            triples.append((k, k, 1.0))
        for k in range(1, p + 1):
            triples.append((n - k, N - k, 1.0))
        if n % 2 == 0:
            ny = n // 2
            if N == n:
                triples.append((ny, ny, 1.0))
            else:
                triples.append((ny, ny, 0.5))
                triples.append((ny, N - ny, 0.5))
    else:
        p = (N - 1) // 2
        for k in range(p + 1):
            triples.append((k, k, 1.0))
        for k in range(1, p + 1):
            triples.append((n - k, N - k, 1.0))
        if N % 2 == 0:
            ny = N // 2
            triples.append((ny, ny, 1.0))
            triples.append((n - ny, ny, 1.0))
    return triples


def resample_axis(v, axis: int, new_len: int) -> Tensor:
    """Fourier interpolation along one axis to a new length.

    FFT, place the retained coefficients symmetrically in a new_len-bin
    spectrum, inverse FFT, rescale by new_len/n so a constant signal maps
    to the same constant. Band-limited signals are interpolated exactly.
    """
    v = as_tensor(v)
    axis = axis % v.data.ndim
    n = v.data.shape[axis]
    N = int(new_len)
    if N < 1:
        raise ValueError("resample_axis: new length must be >= 1")
    if N == n:
        def backprop_id(g):
            v.accumulate(g)

        return make_op(v.data.copy(), (v,), backprop_id)

    if v.data.dtype == REAL:
        # one-sided route: the negative-frequency half of the plan is
        # implied by Hermitian symmetry, so only shared bins are copied
        Xh = sfft.rfft(v.data, axis=axis)
        kept = min(n // 2 + 1, N // 2 + 1)
        spec_shape = list(Xh.shape)
        spec_shape[axis] = N // 2 + 1
        Yh = np.zeros(spec_shape, dtype=COMPLEX)
        head = [slice(None)] * Xh.ndim
        head[axis] = slice(0, kept)
        Yh[tuple(head)] = Xh[tuple(head)]
        last = [slice(None)] * Xh.ndim
        last[axis] = slice(kept - 1, kept)
        if N > n and n % 2 == 0:
            Yh[tuple(last)] *= 0.5
        elif N < n and N % 2 == 0:
            # the +N/2 and -N/2 source bins fold onto one target bin
            Yh[tuple(last)] = 2.0 * Yh[tuple(last)].real
        y = sfft.irfft(Yh, n=N, axis=axis) * (N / n)

        def backprop(g):
            Gh = _irfft_adjoint(g, N, axis)
            Gh *= N / n
            gXh = Gh[tuple(head)]
            if N > n and n % 2 == 0:
                gXh[tuple(last)] *= 0.5
            elif N < n and N % 2 == 0:
                gXh[tuple(last)] = 2.0 * gXh[tuple(last)].real
            v.accumulate(_rfft_adjoint(gXh, n, axis))

        return make_op(y, (v,), backprop)

    plan = _resample_plan(n, N)
    X = sfft.fft(v.data, axis=axis)
    spec_shape = list(X.shape)
    spec_shape[axis] = N
    Y = np.zeros(spec_shape, dtype=COMPLEX)
    src_sl = [slice(None)] * X.ndim
    dst_sl = [slice(None)] * X.ndim
    for src, dst, w in plan:
        src_sl[axis] = src
        dst_sl[axis] = dst
        Y[tuple(dst_sl)] += w * X[tuple(src_sl)]
    y = sfft.ifft(Y, axis=axis) * (N / n)

    def backprop(g):
        # adjoint: gather with the transposed plan; the n/N and 1/n FFT
        # factors cancel against the forward's N/n exactly
        G = sfft.fft(g, axis=axis)
        gX = np.zeros(list(G.shape[:axis]) + [n] + list(G.shape[axis + 1:]), dtype=COMPLEX)
        for src, dst, w in plan:
            src_sl[axis] = src
            dst_sl[axis] = dst
            gX[tuple(src_sl)] += w * G[tuple(dst_sl)]
        v.accumulate(sfft.ifft(gX, axis=axis))

    return make_op(y, (v,), backprop)
