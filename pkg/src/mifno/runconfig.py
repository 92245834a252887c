"""Strict text configuration shared by every pipeline command.

One TOML document drives generation, simulation, training, and
evaluation. Sections mirror the typed configs of the library modules,
and parsing is strict: an unknown section or key is an error, so a typo
never silently falls back to a default.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .model import ModelConfig
from .simulator import SimConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed or unknown run-configuration content."""


# (type tag, default, unit/meaning comment). Type tags: int, float, str,
# float2 (two-element range), float3, int3. The same table validates
# parsed documents and renders the commented template.
SCHEMA = {
    "domain": {
        "dx_m": ("float", 300.0, "grid spacing, m"),
        "nx": ("int", 32, "cells along x"),
        "ny": ("int", 32, "cells along y"),
        "nz": ("int", 32, "cells along z (depth)"),
    },
    "geology": {
        "preset": ("str", "", "named layer preset; empty samples random layered models"),
    },
    "source": {
        "x_m": ("float2", (1200.0, 8400.0), "epicenter east range, m"),
        "y_m": ("float2", (1200.0, 8400.0), "epicenter north range, m"),
        "z_m": ("float2", (-9000.0, -600.0), "depth range, m (negative below surface)"),
        "strike_deg": ("float2", (0.0, 360.0), "strike range, degrees"),
        "dip_deg": ("float2", (0.0, 90.0), "dip range, degrees"),
        "rake_deg": ("float2", (0.0, 360.0), "rake range, degrees"),
        "m0_nm": ("float", 2.47e16, "scalar seismic moment, N*m"),
        "rise_time_s": ("float", 0.1, "source rise time, s"),
    },
    "sim": {
        "duration_s": ("float", 6.4, "recorded window, s"),
        "dt_out_s": ("float", 0.02, "sensor sampling interval, s"),
        "dt_s": ("float", 0.0, "solver step, s; 0 picks the largest stable step"),
        "sponge_width": ("int", 10, "absorbing boundary width, cells"),
        "sponge_factor": ("float", 0.95, "damping at the outer sponge face"),
        "ns": ("int", 32, "surface sensors per horizontal axis"),
    },
    "model": {
        "L": ("int", 16, "Fourier layers"),
        "K": ("int", 4, "layers before temporal growth starts"),
        "d_v": ("int", 16, "hidden channel width"),
        "modes": ("int3", (16, 16, 32), "kept Fourier modes per axis"),
        "m3_first": ("int", 16, "depth modes in the pre-growth block; 0 disables the override"),
        "source_mode": ("str", "angles", "source vector: angles | moment | position_only"),
        "baseline": ("str", "mifno", "architecture: mifno | ffno_cubes | ffno_binary"),
        "out_len": ("int", 320, "output time samples"),
        "q_hidden": ("int", 128, "projection head hidden width"),
        "activation": ("str", "gelu", "nonlinearity between layers"),
        "mlp_hidden": ("int", 0, "per-layer MLP width; 0 matches d_v"),
    },
    "train": {
        "lr": ("float", 4e-4, "initial Adam learning rate"),
        "plateau_patience": ("int", 10, "epochs without improvement before an lr cut"),
        "plateau_factor": ("float", 0.5, "lr multiplier on plateau"),
        "min_rel_improvement": ("float", 1e-4, "relative val-loss drop that counts as progress"),
        "epochs": ("int", 200, "optimization epochs"),
        "batch_size": ("int", 4, "samples per gradient step"),
        "seed": ("int", 0, "master seed: init, splits, and sample order"),
        "augmentation": ("str", "none", "none | rotations4"),
        "split": ("float3", (0.8, 0.2, 0.0), "train/val/test fractions"),
        "clip_norm": ("float", 1.0, "global gradient-norm ceiling"),
    },
    "eval": {
        "band_hz": ("float2", (0.1, 5.0), "goodness-of-fit frequency band, Hz"),
        "voices": ("int", 40, "wavelet voices across the band"),
        "batch_size": ("int", 8, "samples per inference batch"),
    },
}

# Small-domain preset: 16^3 cells, 64 output steps, and the compact
# model. The moment is calibrated so normalized wavefield amplitudes
# land near 0.3 at this domain size.
DESK_OVERRIDES = {
    "domain": {"dx_m": 200.0, "nx": 16, "ny": 16, "nz": 16},
    "source": {
        "x_m": (400.0, 2800.0),
        "y_m": (400.0, 2800.0),
        "z_m": (-3000.0, -200.0),
        "m0_nm": 2e21,
    },
    "sim": {"duration_s": 1.28, "ns": 16},
    "model": {
        "L": 8, "K": 2, "d_v": 8, "modes": (8, 8, 8), "m3_first": 0,
        "out_len": 64, "q_hidden": 32,
    },
    "train": {"epochs": 50},
}


@dataclass
class RunConfig:
    """Validated configuration values, one dict per section."""

    domain: dict
    geology: dict
    source: dict
    sim: dict
    model: dict
    eval: dict
    train: dict

    @property
    def shape(self) -> tuple:
        return (self.domain["nx"], self.domain["ny"], self.domain["nz"])

    @property
    def dx(self) -> float:
        return self.domain["dx_m"]

    @property
    def domain_length(self) -> float:
        return self.domain["nx"] * self.domain["dx_m"]

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            L=m["L"], K=m["K"], d_v=m["d_v"], modes=m["modes"],
            m3_first=m["m3_first"] or None,
            source_mode=m["source_mode"], baseline=m["baseline"],
            domain_length=self.domain_length, resolution=self.shape,
            out_len=m["out_len"], activation=m["activation"],
            mlp_hidden=m["mlp_hidden"] or None, q_hidden=m["q_hidden"])

    def sim_config(self) -> SimConfig:
        s = self.sim
        return SimConfig(
            duration=s["duration_s"], dt_out=s["dt_out_s"],
            dt=s["dt_s"] or None, sponge_width=s["sponge_width"],
            sponge_factor=s["sponge_factor"], ns=s["ns"], dx=self.dx)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            lr=t["lr"], plateau_patience=t["plateau_patience"],
            plateau_factor=t["plateau_factor"],
            min_rel_improvement=t["min_rel_improvement"],
            epochs=t["epochs"], batch_size=t["batch_size"], seed=t["seed"],
            augmentation=t["augmentation"], split=t["split"],
            clip_norm=t["clip_norm"])

    def source_ranges(self) -> dict:
        s = self.source
        return {"x": s["x_m"], "y": s["y_m"], "z": s["z_m"],
                "strike": s["strike_deg"], "dip": s["dip_deg"],
                "rake": s["rake_deg"]}

    def geology_layers(self):
        """Preset layer list, or None for random layered models."""
        if not self.geology["preset"]:
            return None
        from .geology import load_preset
        return load_preset(self.geology["preset"])


def _coerce(section: str, key: str, tag: str, value):
    def bad(expected):
        raise ConfigError(
            f"[{section}] {key}: expected {expected}, got {value!r}")

    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            bad("an integer")
        return value
    if tag == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            bad("a number")
        return float(value)
    if tag == "str":
        if not isinstance(value, str):
            bad("a string")
        return value
    n = {"float2": 2, "float3": 3, "int3": 3}[tag]
    if not isinstance(value, (list, tuple)) or len(value) != n:
        bad(f"a {n}-element list")
    out = []
    for v in value:
        if isinstance(v, bool):
            bad(f"a {n}-element list of numbers")
        if tag == "int3":
            if not isinstance(v, int):
                bad("a 3-element list of integers")
            out.append(v)
        else:
            if not isinstance(v, (int, float)):
                bad(f"a {n}-element list of numbers")
            out.append(float(v))
    return tuple(out)


def parse_run_config(text: str) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config syntax: {exc}") from exc
    sections = {}
    for name, table in doc.items():
        if name not in SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table of keys")
        fields = SCHEMA[name]
        values = {}
        for key, raw in table.items():
            if key not in fields:
                raise ConfigError(f"[{name}] unknown key {key!r}")
            values[key] = _coerce(name, key, fields[key][0], raw)
        sections[name] = values
    resolved = {}
    for name, fields in SCHEMA.items():
        given = sections.get(name, {})
        resolved[name] = {key: given.get(key, spec[1])
                          for key, spec in fields.items()}
    return RunConfig(**resolved)


def load_run_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_run_config(fh.read())


def _toml_value(v) -> str:
    if isinstance(v, bool):
        raise TypeError("no boolean keys in the schema")
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    return "[" + ", ".join(_toml_value(x) for x in v) + "]"


def template(scale: str = "paper") -> str:
    """Commented TOML template at the published or desk scale."""
    if scale not in ("paper", "desk"):
        raise ConfigError(f"unknown template scale {scale!r}")
    over = DESK_OVERRIDES if scale == "desk" else {}
    lines = [f"# {scale}-scale pipeline configuration", ""]
    for section, fields in SCHEMA.items():
        lines.append(f"[{section}]")
        width = max(len(k) + len(_toml_value(
            over.get(section, {}).get(k, spec[1])))
            for k, spec in fields.items())
        for key, (tag, default, comment) in fields.items():
            value = over.get(section, {}).get(key, default)
            pair = f"{key} = {_toml_value(value)}"
            lines.append(f"{pair:<{width + 4}}# {comment}")
        lines.append("")
    return "\n".join(lines)
