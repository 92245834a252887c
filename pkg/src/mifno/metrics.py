"""Evaluation quantities for surface wavefields.

Relative trace errors (rMAE, rRMSE), band-limited spectral amplitude
biases, envelope and phase goodness-of-fit scores from a Morlet wavelet
transform, the per-sensor energy integral, and two intrinsic-dimension
estimators. Everything here is deterministic and stateless.

Committed definitions
---------------------
The wavelet transform uses the analytic Morlet atom
``psi(u) = pi^(-1/4) exp(-u^2/2) exp(i w0 u)`` with ``w0 = 6``,
L2 scale normalization, and support truncated at ``|u| <= 5``. Scales
map to center frequencies via ``a = w0 / (2 pi f)``. The envelope
misfit is the Frobenius-norm relative error of ``|W|``; the phase
misfit weights the phase difference (in units of pi) by the reference
envelope. Both map to a 0-10 score via ``10 exp(-|misfit|)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

EPSILON = 0.01
OMEGA0 = 6.0
NSIGMA = 5.0
GOF_BAND = (0.1, 5.0)
GOF_VOICES = 40

# [lo, hi) in Hz
FREQUENCY_BANDS = {"low": (0.0, 1.0), "mid": (1.0, 2.0), "high": (2.0, 5.0)}

COLUMNS = ("rmae", "rrmse", "rfft_low", "rfft_mid", "rfft_high",
           "eg", "pg", "rei")


class UndefinedMetricError(ValueError):
    """A metric's denominator vanished (zero reference)."""


def _as_traces(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(
            f"trace shape mismatch: {pred.shape} vs {ref.shape}")
    return pred, ref


def rrmse(pred, ref, eps=EPSILON):
    """Relative root-mean-square error of a trace pair.

    sqrt(mean((pred - ref)^2 / (ref^2 + eps^2))), eps in the same
    (normalized) units as the traces.
    """
    pred, ref = _as_traces(pred, ref)
    return float(np.sqrt(np.mean((pred - ref) ** 2 / (ref ** 2 + eps ** 2))))


def rmae(pred, ref, eps=EPSILON):
    """Relative mean absolute error: mean(|pred - ref| / |ref + eps|)."""
    pred, ref = _as_traces(pred, ref)
    return float(np.mean(np.abs(pred - ref) / np.abs(ref + eps)))


def _band_edges(band):
    if isinstance(band, str):
        try:
            return FREQUENCY_BANDS[band]
        except KeyError:
            raise ValueError(
                f"unknown band {band!r}; expected one of "
                f"{sorted(FREQUENCY_BANDS)} or a (lo, hi) pair") from None
    lo, hi = band
    if not hi > lo >= 0.0:
        raise ValueError(f"bad band edges ({lo}, {hi})")
    return float(lo), float(hi)


def frequency_bias(pred, ref, band, dt):
    """Relative error of the band-averaged Fourier amplitude.

    (mean in-band |FFT(pred)| - mean in-band |FFT(ref)|) / the reference
    mean. Band edges are inclusive below, exclusive above. Bounded below
    by -1; a zero prediction attains the bound.
    """
    pred, ref = _as_traces(pred, ref)
    lo, hi = _band_edges(band)
    freqs = np.fft.rfftfreq(len(ref), d=dt)
    mask = (freqs >= lo) & (freqs < hi)
    if not mask.any():
        raise ValueError(
            f"band [{lo}, {hi}) Hz contains no frequency bin at this "
            f"trace length and dt")
    ap = np.mean(np.abs(np.fft.rfft(pred))[mask])
    ar = np.mean(np.abs(np.fft.rfft(ref))[mask])
    if ar == 0.0:
        raise UndefinedMetricError(
            f"reference has no spectral amplitude in [{lo}, {hi}) Hz")
    return float((ap - ar) / ar)


_CWT_PLANS = {}


def _cwt_plan(n, dt, f_min, f_max, voices):
    """Frequency grid and padded kernel spectra for traces of length n.

    Kernels are laid out for circular convolution with the center tap at
    index 0. Scales are grouped by padded length, each group's length
    guaranteeing no wraparound reaches b < n for its own kernels, so
    short-support (high-frequency) scales use short transforms.
    """
    key = (n, dt, f_min, f_max, voices)
    plan = _CWT_PLANS.get(key)
    if plan is not None:
        return plan
    freqs = np.logspace(np.log10(f_min), np.log10(f_max), voices)
    scales = OMEGA0 / (2.0 * np.pi * freqs)
    halves = np.ceil(NSIGMA * scales / dt).astype(int)
    by_len = {}
    for j, h in enumerate(halves):
        m = sfft.next_fast_len(n + 2 * int(h))
        by_len.setdefault(m, []).append(j)
    groups = []
    for m, idx in sorted(by_len.items()):
        kfft = np.empty((len(idx), m), dtype=np.complex128)
        for row, j in enumerate(idx):
            a, h = scales[j], int(halves[j])
            u = np.arange(-h, h + 1) * (dt / a)
            psi = np.pi ** -0.25 * np.exp(-0.5 * u * u) * np.exp(1j * OMEGA0 * u)
            kern = psi * (dt / np.sqrt(a))
            buf = np.zeros(m, dtype=np.complex128)
            buf[:h + 1] = kern[h:]
            buf[m - h:] = kern[:h]
            kfft[row] = sfft.fft(buf)
        groups.append((m, np.asarray(idx), kfft))
    plan = (freqs, groups)
    _CWT_PLANS[key] = plan
    return plan


def morlet_cwt(trace, dt, band=GOF_BAND, voices=GOF_VOICES):
    """Wavelet transform of one trace on log-spaced frequencies.

    Returns (freqs, coefficients) with coefficients of shape
    (voices, len(trace)).
    """
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim != 1:
        raise ValueError("expected a 1D trace")
    f_min, f_max = _band_edges(band)
    if f_min <= 0.0:
        raise ValueError("wavelet band must start above 0 Hz")
    if f_max >= 0.5 / dt:
        raise ValueError(
            f"band top {f_max} Hz is not below the Nyquist frequency "
            f"{0.5 / dt} Hz")
    n = len(trace)
    freqs, groups = _cwt_plan(n, dt, f_min, f_max, voices)
    w = np.empty((voices, n), dtype=np.complex128)
    for m, idx, kfft in groups:
        spec = sfft.fft(trace, m)
        w[idx] = sfft.ifft(spec[None, :] * kfft, axis=-1, overwrite_x=True)[:, :n]
    return freqs, w


def _gof_many(preds, refs, dt, band, voices):
    """Envelope/phase scores for a batch of trace pairs.

    preds, refs: (T, n). Returns (eg, pg) arrays of shape (T,); pairs
    whose reference is identically zero come back NaN.
    """
    t_count, n = preds.shape
    f_min, f_max = _band_edges(band)
    if f_min <= 0.0:
        raise ValueError("wavelet band must start above 0 Hz")
    if f_max >= 0.5 / dt:
        raise ValueError(
            f"band top {f_max} Hz is not below the Nyquist frequency "
            f"{0.5 / dt} Hz")
    _, groups = _cwt_plan(n, dt, f_min, f_max, voices)
    env_sq = np.zeros(t_count)
    em_sq = np.zeros(t_count)
    pm_sq = np.zeros(t_count)
    # one scale at a time keeps the working set at one (T, m) panel
    for m, _, kfft in groups:
        spec_p = sfft.fft(preds, m, axis=-1)
        spec_r = sfft.fft(refs, m, axis=-1)
        for row in range(kfft.shape[0]):
            wp = sfft.ifft(spec_p * kfft[row], axis=-1, overwrite_x=True)[:, :n]
            wr = sfft.ifft(spec_r * kfft[row], axis=-1, overwrite_x=True)[:, :n]
            ep = np.abs(wp)
            er = np.abs(wr)
            env_sq += np.sum(er * er, axis=-1)
            em_sq += np.sum((ep - er) ** 2, axis=-1)
            phase = np.angle(wp * np.conj(wr)) / np.pi
            pm_sq += np.sum((er * phase) ** 2, axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        em = np.sqrt(em_sq / env_sq)
        pm = np.sqrt(pm_sq / env_sq)
        eg = np.clip(10.0 * np.exp(-np.abs(em)), 0.0, 10.0)
        pg = np.clip(10.0 * np.exp(-np.abs(pm)), 0.0, 10.0)
    dead = env_sq == 0.0
    eg[dead] = np.nan
    pg[dead] = np.nan
    return eg, pg


def envelope_phase_gof(pred, ref, dt, band=GOF_BAND, voices=GOF_VOICES):
    """Envelope and phase goodness-of-fit of a trace pair, each in [0, 10].

    10 means perfect agreement; the phase score is invariant under
    positive rescaling of the prediction.
    """
    pred, ref = _as_traces(pred, ref)
    if pred.ndim != 1:
        raise ValueError("expected 1D traces")
    if not np.any(ref):
        raise UndefinedMetricError("reference trace is identically zero")
    eg, pg = _gof_many(pred[None, :], ref[None, :], dt, band, voices)
    return float(eg[0]), float(pg[0])


def energy_integral(rec):
    """Normalized energy integral over the sensor grid.

    Accepts a surface record (anything with a ``data`` attribute) or a
    raw (ns, ns, nt, 3) array; returns the per-sensor sum of squared
    component velocities averaged over components, scaled so the maximum
    over sensors is 1.
    """
    data = np.asarray(getattr(rec, "data", rec), dtype=np.float64)
    if data.ndim != 4 or data.shape[-1] != 3:
        raise ValueError(f"expected (ns, ns, nt, 3) data, got {data.shape}")
    ei = np.sum(data * data, axis=(-2, -1)) / 3.0
    top = ei.max()
    if top == 0.0:
        raise UndefinedMetricError("record is identically zero")
    return ei / top


def intrinsic_dim_pca(data, threshold=0.95):
    """Linear intrinsic dimension: smallest component count whose
    cumulative explained variance reaches the threshold."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError("need a (samples >= 2, features) matrix")
    centered = data - data.mean(axis=0)
    sing = np.linalg.svd(centered, compute_uv=False)
    var = sing * sing
    total = var.sum()
    if total == 0.0:
        return 0
    cum = np.cumsum(var) / total
    hit = np.nonzero(cum >= threshold)[0]
    return int(hit[0]) + 1 if hit.size else len(cum)


def intrinsic_dim_mle(data, k=10):
    """Neighborhood-growth maximum-likelihood intrinsic dimension.

    Per point x with ascending neighbor distances T_1..T_k:
    m(x) = [ 1/(k-1) * sum_{j<k} ln(T_k / T_j) ]^-1, averaged over points.
    Points with duplicate (zero-distance) neighbors are excluded.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError("need a (samples, features) matrix")
    n = data.shape[0]
    if n <= k:
        raise ValueError(f"need more than k={k} samples, got {n}")
    sq = np.sum(data * data, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (data @ data.T)
    np.fill_diagonal(d2, np.inf)
    dist = np.sqrt(np.maximum(d2, 0.0))
    neigh = np.sort(dist, axis=1)[:, :k]
    ok = neigh[:, 0] > 0.0
    if not ok.all():
        warnings.warn(
            f"excluded {int((~ok).sum())} points with duplicate neighbors",
            stacklevel=2)
        neigh = neigh[ok]
        if neigh.shape[0] == 0:
            raise UndefinedMetricError("all points have duplicate neighbors")
    logs = np.log(neigh[:, -1:] / neigh[:, :-1])
    inv = logs.mean(axis=1)
    return float(np.mean(1.0 / inv))


def record_metrics(pred, ref, dt, gof_band=GOF_BAND, voices=GOF_VOICES):
    """All per-sensor metric columns for one record pair.

    pred, ref: records or (ns, ns, nt, 3) arrays in normalized units.
    Returns an (ns, ns, len(COLUMNS)) array ordered as COLUMNS. Trace
    errors, spectral biases, and goodness-of-fit are computed per
    component and averaged over the three components; ``rei`` is the
    normalized energy integral of the reference. Sensors whose reference
    component vanishes in a band (or entirely, for the wavelet scores)
    get NaN in the affected columns.
    """
    p = np.asarray(getattr(pred, "data", pred), dtype=np.float64)
    r = np.asarray(getattr(ref, "data", ref), dtype=np.float64)
    if p.shape != r.shape:
        raise ValueError(f"record shape mismatch: {p.shape} vs {r.shape}")
    if p.ndim != 4 or p.shape[-1] != 3:
        raise ValueError(f"expected (ns, ns, nt, 3) data, got {p.shape}")
    ns1, ns2, nt, _ = p.shape
    out = np.empty((ns1, ns2, len(COLUMNS)))

    diff = p - r
    out[:, :, 0] = np.mean(
        np.abs(diff) / np.abs(r + EPSILON), axis=2).mean(axis=-1)
    out[:, :, 1] = np.sqrt(
        np.mean(diff ** 2 / (r ** 2 + EPSILON ** 2), axis=2)).mean(axis=-1)

    freqs = np.fft.rfftfreq(nt, d=dt)
    amp_p = np.abs(np.fft.rfft(p, axis=2))
    amp_r = np.abs(np.fft.rfft(r, axis=2))
    for b, name in enumerate(("low", "mid", "high")):
        lo, hi = FREQUENCY_BANDS[name]
        mask = (freqs >= lo) & (freqs < hi)
        if not mask.any():
            out[:, :, 2 + b] = np.nan
            continue
        mp = amp_p[:, :, mask, :].mean(axis=2)
        mr = amp_r[:, :, mask, :].mean(axis=2)
        with np.errstate(invalid="ignore", divide="ignore"):
            bias = np.where(mr > 0.0, (mp - mr) / mr, np.nan)
        out[:, :, 2 + b] = bias.mean(axis=-1)

    traces_p = np.moveaxis(p, 2, 3).reshape(-1, nt)
    traces_r = np.moveaxis(r, 2, 3).reshape(-1, nt)
    eg, pg = _gof_many(traces_p, traces_r, dt, gof_band, voices)
    out[:, :, 5] = eg.reshape(ns1, ns2, 3).mean(axis=-1)
    out[:, :, 6] = pg.reshape(ns1, ns2, 3).mean(axis=-1)

    ei = np.sum(r * r, axis=(-2, -1)) / 3.0
    top = ei.max()
    out[:, :, 7] = ei / top if top > 0.0 else np.nan
    return out


@dataclass
class MetricReport:
    """Per-sensor metric values for a batch of record pairs.

    values: (n_samples, ns, ns, len(columns)). Aggregation is the mean
    and standard deviation over every (sample, sensor) cell, ignoring
    NaNs from degenerate references.
    """

    values: np.ndarray
    columns: tuple = COLUMNS

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4 or self.values.shape[-1] != len(self.columns):
            raise ValueError(
                f"expected (samples, ns, ns, {len(self.columns)}) values, "
                f"got {self.values.shape}")

    def aggregate(self):
        """dict of column -> (mean, std) over all samples and sensors."""
        flat = self.values.reshape(-1, self.values.shape[-1])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            means = np.nanmean(flat, axis=0)
            stds = np.nanstd(flat, axis=0)
        return {c: (float(means[i]), float(stds[i]))
                for i, c in enumerate(self.columns)}

    def to_table(self):
        """Tab-delimited text: one row per (sample, sensor), then
        aggregate mean and std rows."""
        lines = ["sample\tix\tiy\t" + "\t".join(self.columns)]
        n, ns1, ns2, _ = self.values.shape
        for s in range(n):
            for i in range(ns1):
                for j in range(ns2):
                    cells = "\t".join(
                        f"{v:.6g}" for v in self.values[s, i, j])
                    lines.append(f"{s}\t{i}\t{j}\t{cells}")
        agg = self.aggregate()
        lines.append("mean\t\t\t" + "\t".join(
            f"{agg[c][0]:.6g}" for c in self.columns))
        lines.append("std\t\t\t" + "\t".join(
            f"{agg[c][1]:.6g}" for c in self.columns))
        return "\n".join(lines) + "\n"

    def to_entries(self, prefix="metrics"):
        """Named arrays for container storage."""
        return {f"{prefix}/{c}": np.ascontiguousarray(self.values[..., i])
                for i, c in enumerate(self.columns)}

    @classmethod
    def from_entries(cls, entries, prefix="metrics"):
        stack = [np.asarray(entries[f"{prefix}/{c}"]) for c in COLUMNS]
        return cls(values=np.stack(stack, axis=-1))
