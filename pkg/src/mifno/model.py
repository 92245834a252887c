"""Full surrogate model assembly.

Combines the geology branch (uplift + factorized Fourier layers), the
source branch (dense + convolutional encoder padded into the volume), the
branch combination, the remaining Fourier layers with their third-axis
growth schedule, and the three output projections. Also hosts the
single-input baseline variants, the input/output normalization rules,
parameter accounting, and weight checkpoints.

Channel counts, mode counts, and layer sizes all derive from ModelConfig;
the runtime input resolution only changes the padding targets, never any
trainable shape.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import container
from ._rng import stream
from .layers import (AX1, AX2, AX3, combine_branches, coordinate_grids,
                     factorized_fourier_layer, project, stack_input_channels)
from .sources import SOURCE_VECTOR_LENGTH, SourceSpec, normalize_source

BASELINES = ("mifno", "ffno_cubes", "ffno_binary", "ffno_plain")
SOURCE_MODES = ("angles", "moment", "position_only", "none")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    `resolution` is the build-time input resolution (Sx, Sy, Sz): it fixes
    the source-branch sizes and the growth schedule's starting length.
    Inputs at other resolutions are accepted at runtime as long as the
    depth axis matches.
    """
    L: int = 16
    K: int = 4
    d_v: int = 16
    modes: tuple = (16, 16, 32)
    m3_first: int | None = 16
    source_mode: str = "angles"
    baseline: str = "mifno"
    domain_length: float = 9600.0
    resolution: tuple = (32, 32, 32)
    out_len: int = 320
    activation: str = "gelu"
    mlp_hidden: int | None = None
    q_hidden: int = 128

    def __post_init__(self):
        self.modes = tuple(int(m) for m in self.modes)
        self.resolution = tuple(int(s) for s in self.resolution)
        if not (1 <= self.K < self.L):
            raise ValueError(f"need 1 <= K < L, got K={self.K}, L={self.L}")
        if len(self.modes) != 3 or any(m < 1 for m in self.modes):
            raise ValueError(f"modes must be three positive ints, got {self.modes}")
        if len(self.resolution) != 3 or any(s < 2 for s in self.resolution):
            raise ValueError(f"bad resolution {self.resolution}")
        if self.baseline not in BASELINES:
            raise ValueError(f"unknown baseline {self.baseline!r}")
        if self.source_mode not in SOURCE_MODES:
            raise ValueError(f"unknown source_mode {self.source_mode!r}")
        if self.baseline in ("mifno", "ffno_cubes", "ffno_binary") \
                and self.source_mode == "none":
            raise ValueError(f"{self.baseline} requires a source parameterization")
        if self.out_len < self.resolution[2]:
            raise ValueError("out_len must be at least the depth resolution")
        if self.activation not in ad.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def hidden(self) -> int:
        return self.d_v if self.mlp_hidden is None else self.mlp_hidden

    @property
    def n_source(self) -> int:
        return SOURCE_VECTOR_LENGTH[self.source_mode]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        raw = json.loads(text)
        return cls(**raw)


def paper_config(**overrides) -> ModelConfig:
    """Published configuration: 32^3 input, (32, 32, 320, 3) output."""
    base = dict(L=16, K=4, d_v=16, modes=(16, 16, 32), m3_first=16,
                resolution=(32, 32, 32), out_len=320)
    base.update(overrides)
    return ModelConfig(**base)


def desk_config(**overrides) -> ModelConfig:
    """Scaled-down configuration for commodity hardware."""
    base = dict(L=8, K=2, d_v=8, modes=(8, 8, 8), m3_first=None,
                resolution=(16, 16, 16), out_len=64, q_hidden=32)
    base.update(overrides)
    return ModelConfig(**base)


def growth_schedule(cfg: ModelConfig) -> list:
    """Target third-axis length after each layer (None = keep).

    Layers past the branch point interpolate linearly from the depth
    resolution to the output length, rounded to the nearest even number,
    with the final layer landing exactly on out_len.
    """
    sz, st = cfg.resolution[2], cfg.out_len
    sched = [None] * cfg.K
    n_grow = cfg.L - cfg.K
    for j in range(1, n_grow + 1):
        target = sz + (st - sz) * j / n_grow
        sched.append(int(round(target / 2.0)) * 2)
    sched[-1] = st
    return sched


def _layer_plan(cfg: ModelConfig) -> list:
    """Per-layer (c_in, c_out, m1, m2, m3) with build-time mode clamping.

    Rows of a spectral weight beyond what the build resolution can ever
    excite would be dead parameters, so they are not allocated; runtime
    clamping still guards smaller inputs.
    """
    sx, sy, sz = cfg.resolution
    m1 = min(cfg.modes[0], sx // 2 + 1)
    m2 = min(cfg.modes[1], sy // 2 + 1)
    sched = growth_schedule(cfg)
    wide = 3 * cfg.d_v if cfg.baseline == "mifno" else cfg.d_v
    plan = []
    len3 = sz
    for ell in range(cfg.L):
        c = cfg.d_v if ell < cfg.K else wide
        out3 = sched[ell] if sched[ell] is not None else len3
        m3_req = cfg.m3_first if (ell == 0 and cfg.m3_first is not None) else cfg.modes[2]
        m3 = min(m3_req, len3 // 2 + 1, out3 // 2 + 1)
        plan.append((c, c, m1, m2, m3))
        len3 = out3
    return plan


def source_branch_modes(cfg: ModelConfig) -> tuple:
    """Mode counts (mx, my, mz) sizing the source-branch tensors.

    Chosen so the doubled counts fit the build resolution: 2·m <= S per
    axis, capped by the configured mode counts.
    """
    sx, sy, sz = cfg.resolution
    return (min(cfg.modes[0], sx // 2),
            min(cfg.modes[1], sy // 2),
            min(cfg.modes[2], sz // 2))


def input_channels(cfg: ModelConfig) -> int:
    base = 4  # geology + three coordinate grids
    if cfg.baseline in ("mifno", "ffno_plain"):
        return base
    if cfg.baseline == "ffno_binary":
        return base + 1
    return base + cfg.n_source  # ffno_cubes


def weight_shapes(cfg: ModelConfig) -> dict:
    """Ordered {name: (shape, is_complex)} for every trainable array."""
    shapes = {}
    shapes["uplift/W"] = ((input_channels(cfg), cfg.d_v), False)
    shapes["uplift/b"] = ((cfg.d_v,), False)
    for ell, (cin, cout, m1, m2, m3) in enumerate(_layer_plan(cfg)):
        pre = f"layer{ell:02d}"
        shapes[f"{pre}/R1"] = ((m1, cin, cout), True)
        shapes[f"{pre}/R2"] = ((m2, cin, cout), True)
        shapes[f"{pre}/R3"] = ((m3, cin, cout), True)
        shapes[f"{pre}/W1"] = ((cout, cfg.hidden), False)
        shapes[f"{pre}/b1"] = ((cfg.hidden,), False)
        shapes[f"{pre}/W2"] = ((cfg.hidden, cout), False)
        shapes[f"{pre}/b2"] = ((cout,), False)
    if cfg.baseline == "mifno":
        mx, my, mz = source_branch_modes(cfg)
        shapes["source/fc1_W"] = ((cfg.n_source, 128), False)
        shapes["source/fc1_b"] = ((128,), False)
        shapes["source/fc2_W"] = ((128, 4 * mx * my), False)
        shapes["source/fc2_b"] = ((4 * mx * my,), False)
        shapes["source/conv2a_K"] = ((3, 3, 1, 8), False)
        shapes["source/conv2b_K"] = ((3, 3, 8, 2 * mz), False)
        shapes["source/conv3a_K"] = ((3, 3, 3, 1, 8), False)
        shapes["source/conv3b_K"] = ((3, 3, 3, 8, cfg.d_v), False)
    c_last = 3 * cfg.d_v if cfg.baseline == "mifno" else cfg.d_v
    for comp in ("E", "N", "Z"):
        shapes[f"proj_{comp}/W1"] = ((c_last, cfg.q_hidden), False)
        shapes[f"proj_{comp}/b1"] = ((cfg.q_hidden,), False)
        shapes[f"proj_{comp}/W2"] = ((cfg.q_hidden, 1), False)
        shapes[f"proj_{comp}/b2"] = ((1,), False)
    return shapes


def _init_sigma(name: str, shape: tuple) -> float:
    if name.endswith(("/b", "_b", "b1", "b2")):
        return 0.0
    if "/R" in name:
        _, cin, cout = shape
        return np.sqrt(2.0 / (cin + cout))
    if "conv" in name:
        k = int(np.prod(shape[:-2]))
        return np.sqrt(2.0 / (k * (shape[-2] + shape[-1])))
    fin, fout = shape[-2], shape[-1]
    return np.sqrt(2.0 / (fin + fout))


def init_weights(cfg: ModelConfig, master_seed: int) -> dict:
    """Fresh trainable parameters, keyed by group/name."""
    rng = stream(master_seed, "init")
    weights = {}
    for name, (shape, is_complex) in weight_shapes(cfg).items():
        sigma = _init_sigma(name, shape)
        if sigma == 0.0:
            data = np.zeros(shape, dtype=np.complex128 if is_complex else np.float64)
        elif is_complex:
            s = sigma / np.sqrt(2.0)
            data = rng.normal(0.0, s, shape) + 1j * rng.normal(0.0, s, shape)
        else:
            data = rng.normal(0.0, sigma, shape)
        weights[name] = ad.parameter(data, name=name)
    return weights


def _group(weights: dict, prefix: str) -> dict:
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in weights.items() if k.startswith(prefix + "/")}


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

@dataclass
class NormalizationSpec:
    """Training-set statistics fixing the input/output scaling."""
    mean_geology: np.ndarray
    sigma: float
    domain_length: float

    @classmethod
    def from_training_set(cls, geologies: np.ndarray, domain_length: float):
        """`geologies` stacked (n_samples, Sx, Sy, Sz)."""
        geologies = np.asarray(geologies, dtype=np.float64)
        if geologies.ndim != 4:
            raise ValueError("expected a (n, Sx, Sy, Sz) stack")
        mean = geologies.mean(axis=0)
        sigma = float((geologies - mean).std())
        if sigma <= 0:
            sigma = 1.0  # degenerate single-geology sets stay finite
        return cls(mean_geology=mean, sigma=sigma, domain_length=float(domain_length))


def _apply_affine(a, fn):
    if isinstance(a, ad.Tensor):
        return ad.Tensor(fn(a.data.real), requires_grad=a.requires_grad)
    return fn(np.asarray(a, dtype=np.float64))


def normalize_geology(a, spec: NormalizationSpec):
    """(a - mean)/(4 sigma); training values land roughly in [-0.5, 0.5]."""
    if spec.mean_geology is None or not np.isfinite(spec.sigma):
        raise ValueError("normalization statistics missing")
    return _apply_affine(a, lambda x: (x - spec.mean_geology) / (4.0 * spec.sigma))


def denormalize_geology(a, spec: NormalizationSpec):
    if spec.mean_geology is None or not np.isfinite(spec.sigma):
        raise ValueError("normalization statistics missing")
    return _apply_affine(a, lambda x: x * (4.0 * spec.sigma) + spec.mean_geology)


def output_norm_factor(vs_at_source: float, z_s: float, domain_length: float) -> float:
    """Per-sample output scale; targets are trained as u/c."""
    vs = float(vs_at_source)
    if vs <= 0:
        raise ValueError(f"source-cell shear velocity must be positive, got {vs}")
    return vs * np.sqrt(float(z_s) ** 2 + (float(domain_length) / 4.0) ** 2)


def nearest_cell(position, domain_length: float, shape) -> tuple:
    """Cell whose center is nearest the source; ties toward lower index.

    Depth uses |z| so both sign conventions land on the same cell.
    Out-of-range positions clamp to the boundary cell.
    """
    x, y, z = (float(p) for p in position)
    coords = (x, y, abs(z))
    idx = []
    for p, n in zip(coords, shape):
        dx = domain_length / n
        i = int(np.ceil(p / dx)) - 1
        idx.append(min(max(i, 0), n - 1))
    return tuple(idx)


def vs_at_source(vs_cube: np.ndarray, position, domain_length: float) -> float:
    i, j, k = nearest_cell(position, domain_length, np.shape(vs_cube))
    return float(np.asarray(vs_cube)[i, j, k])


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _as_source_vector(s, cfg: ModelConfig) -> np.ndarray:
    if isinstance(s, SourceSpec):
        return normalize_source(s, cfg.domain_length, cfg.source_mode)
    arr = np.asarray(s, dtype=np.float64)
    want = cfg.n_source
    if arr.shape[-1:] != (want,) or arr.ndim not in (1, 2):
        raise ValueError(
            f"source vector must end in {want} entries for mode "
            f"{cfg.source_mode!r}, got shape {arr.shape}")
    return arr


def source_branch(s_normalized, weights: dict, cfg: ModelConfig,
                  target_resolution=None) -> ad.Tensor:
    """Encode a normalized source vector as a (Sx, Sy, Sz, d_v) field.

    A two-layer perceptron lays the source out in the horizontal plane,
    two 2D convolutions extrude the vertical axis, two 3D convolutions
    build the channel axis, and Fourier-domain padding stretches the
    result to the working resolution. Only the padding stage sees the
    resolution, so trainable shapes never depend on it.
    """
    act = ad.ACTIVATIONS[cfg.activation]
    sv = _as_source_vector(s_normalized, cfg)
    v = ad.as_tensor(sv)
    lead = v.shape[:-1]
    mx, my, mz = source_branch_modes(cfg)
    w = _group(weights, "source")

    h = ad.pointwise_linear(act(ad.pointwise_linear(v, w["fc1_W"], w["fc1_b"])),
                            w["fc2_W"], w["fc2_b"])
    h = ad.reshape(h, lead + (2 * mx, 2 * my, 1))
    h = ad.conv2d(act(ad.conv2d(h, w["conv2a_K"])), w["conv2b_K"])
    h = ad.reshape(h, lead + (2 * mx, 2 * my, 2 * mz, 1))
    h = ad.conv3d(act(ad.conv3d(h, w["conv3a_K"])), w["conv3b_K"])

    target = tuple(target_resolution) if target_resolution else cfg.resolution
    for ax_rel, n in zip((AX1, AX2, AX3), target):
        if h.shape[ax_rel] != n:
            h = ad.resample_axis(h, h.data.ndim + ax_rel, n)
    return h


def _stack_components(e: ad.Tensor, n: ad.Tensor, z: ad.Tensor) -> ad.Tensor:
    parts = [ad.reshape(t, t.shape + (1,)) for t in (e, n, z)]
    return ad.concat(parts, axis=-1)


def _layer_weights(weights: dict, ell: int) -> dict:
    return _group(weights, f"layer{ell:02d}")


def _proj_weights(weights: dict) -> dict:
    out = {}
    for comp in ("E", "N", "Z"):
        g = _group(weights, f"proj_{comp}")
        for k, v in g.items():
            out[f"{comp}_{k}"] = v
    return out


def mifno_forward(a, s, weights: dict, cfg: ModelConfig) -> ad.Tensor:
    """Normalized geology + source -> normalized three-component movie.

    `a` is the normalized geology cube, optionally with a leading batch
    axis; `s` a SourceSpec or normalized source vector (batched to match).
    Output shape (..., n1, n2, out_len, 3).
    """
    if cfg.baseline != "mifno":
        raise ValueError("config selects a baseline; use ffno_baseline_forward")
    a = np.asarray(a, dtype=np.float64)
    if a.ndim not in (3, 4):
        raise ValueError(f"geology must be rank 3 or 4, got {a.ndim}")
    if a.shape[-1] != cfg.resolution[2]:
        raise ValueError(
            f"depth axis {a.shape[-1]} does not match the trained {cfg.resolution[2]}")
    sched = growth_schedule(cfg)

    v = ad.pointwise_linear(ad.Tensor(stack_input_channels(a)),
                            weights["uplift/W"], weights["uplift/b"])
    for ell in range(cfg.K):
        v = factorized_fourier_layer(v, _layer_weights(weights, ell),
                                     out_len3=sched[ell], activation=cfg.activation)
    vs = source_branch(s, weights, cfg, target_resolution=a.shape[-3:])
    v = combine_branches(v, vs)
    for ell in range(cfg.K, cfg.L):
        v = factorized_fourier_layer(v, _layer_weights(weights, ell),
                                     out_len3=sched[ell], activation=cfg.activation)
    e, n, z = project(v, _proj_weights(weights), activation=cfg.activation)
    return _stack_components(e, n, z)


def one_hot_source_cube(s_normalized: np.ndarray, shape) -> np.ndarray:
    """Zero cube with a single 1 at the cell nearest the source."""
    sv = np.asarray(s_normalized, dtype=np.float64)
    cube = np.zeros(shape, dtype=np.float64)
    idx = []
    for p, n in zip(sv[:3], shape):
        i = int(np.ceil(p * n)) - 1
        idx.append(min(max(i, 0), n - 1))
    cube[tuple(idx)] = 1.0
    return cube


def ffno_baseline_forward(a, s, weights: dict, cfg: ModelConfig) -> ad.Tensor:
    """Single-branch baselines differing only in how the source enters."""
    if cfg.baseline == "mifno":
        raise ValueError("config selects the two-branch model; use mifno_forward")
    a = np.asarray(a, dtype=np.float64)
    if a.ndim not in (3, 4):
        raise ValueError(f"geology must be rank 3 or 4, got {a.ndim}")
    if a.shape[-1] != cfg.resolution[2]:
        raise ValueError(
            f"depth axis {a.shape[-1]} does not match the trained {cfg.resolution[2]}")
    batched = a.ndim == 4
    spatial = a.shape[-3:]
    sched = growth_schedule(cfg)

    if cfg.baseline == "ffno_plain":
        stacked = stack_input_channels(a)
    else:
        sv = _as_source_vector(s, cfg)
        sv2 = sv.reshape(-1, sv.shape[-1])
        if batched and sv2.shape[0] not in (1, a.shape[0]):
            raise ValueError("source batch does not match geology batch")
        if batched and sv2.shape[0] == 1:
            sv2 = np.repeat(sv2, a.shape[0], axis=0)
        if cfg.baseline == "ffno_binary":
            cubes = np.stack([one_hot_source_cube(row, spatial) for row in sv2])
            cubes = cubes[:, :, :, :, None]  # one channel
        else:  # ffno_cubes: constant cube per normalized source entry
            cubes = np.ones((sv2.shape[0],) + spatial + (1,)) \
                * sv2[:, None, None, None, :]
        if batched:
            base = stack_input_channels(a)
        else:
            base = stack_input_channels(a[None])
        stacked = np.concatenate([base, cubes], axis=-1)
        if not batched:
            stacked = stacked[0]

    v = ad.pointwise_linear(ad.Tensor(stacked),
                            weights["uplift/W"], weights["uplift/b"])
    for ell in range(cfg.L):
        v = factorized_fourier_layer(v, _layer_weights(weights, ell),
                                     out_len3=sched[ell], activation=cfg.activation)
    e, n, z = project(v, _proj_weights(weights), activation=cfg.activation)
    return _stack_components(e, n, z)


def forward(a, s, weights: dict, cfg: ModelConfig) -> ad.Tensor:
    if cfg.baseline == "mifno":
        return mifno_forward(a, s, weights, cfg)
    return ffno_baseline_forward(a, s, weights, cfg)


def count_parameters(weights: dict, per_group: bool = False):
    """Trainable scalar count; complex entries count as two reals."""
    groups = {}
    for name, t in weights.items():
        n = t.data.size * (2 if np.iscomplexobj(t.data) else 1)
        key = name.split("/")[0]
        groups[key] = groups.get(key, 0) + n
    total = sum(groups.values())
    return (total, groups) if per_group else total


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, weights: dict, cfg: ModelConfig,
                    norm: NormalizationSpec | None = None,
                    extra_entries: dict | None = None) -> None:
    """`extra_entries` ride along under their own names (e.g. a training
    history); loading ignores everything outside config/param/norm."""
    entries = {
        "config/json": np.frombuffer(cfg.to_json().encode("utf-8"), dtype=np.uint8),
    }
    for name, t in weights.items():
        entries[f"param/{name}"] = t.data
    if norm is not None:
        entries["norm/mean_geology"] = norm.mean_geology
        entries["norm/sigma"] = np.float64(norm.sigma)
        entries["norm/domain_length"] = np.float64(norm.domain_length)
    for name, value in (extra_entries or {}).items():
        if name in entries:
            raise ValueError(f"extra entry {name!r} collides with a "
                             "checkpoint entry")
        entries[name] = value
    container.write_container(path, entries)


def load_checkpoint(path):
    """-> (weights, cfg, norm_or_None); validates names and shapes."""
    data = container.read_container(path)
    if "config/json" not in data:
        raise container.ContainerError(f"{path}: not a model checkpoint")
    cfg = ModelConfig.from_json(bytes(data["config/json"]).decode("utf-8"))
    expected = weight_shapes(cfg)
    weights = {}
    for name, (shape, is_complex) in expected.items():
        key = f"param/{name}"
        if key not in data:
            raise container.ContainerError(f"{path}: missing parameter {name!r}")
        arr = data[key]
        if arr.shape != shape:
            raise container.ContainerError(
                f"{path}: parameter {name!r} has shape {arr.shape}, expected {shape}")
        if is_complex:
            arr = arr.astype(np.complex128, copy=False)
        weights[name] = ad.parameter(arr, name=name)
    extra = [k for k in data if k.startswith("param/")
             and k[len("param/"):] not in expected]
    if extra:
        raise container.ContainerError(f"{path}: unexpected parameters {extra}")
    norm = None
    if "norm/mean_geology" in data:
        norm = NormalizationSpec(
            mean_geology=data["norm/mean_geology"],
            sigma=float(data["norm/sigma"]),
            domain_length=float(data["norm/domain_length"]),
        )
    return weights, cfg, norm
