"""Command-line pipeline around the container format.

Every stage reads and writes the binary container, so a full run
(generate, simulate, train, predict, evaluate) needs nothing but config
files and these subcommands. Errors print as one-line JSON records on
stderr; exit codes are 0 success, 1 usage, 2 data, 3 numerical.
"""
from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys

import numpy as np

from ._rng import stream
from .container import ContainerError, list_entries, read_container, write_container
from .dataset import Dataset
from .geology import GeologyModel, generate_geology
from .metrics import GOF_BAND, GOF_VOICES, MetricReport, record_metrics
from .model import load_checkpoint, save_checkpoint
from .runconfig import ConfigError, load_run_config, template
from .simulator import SimulationError, simulate
from .sources import SourceSpec, sample_sources
from .training import (
    TrainingError,
    augment_rotations,
    fine_tune,
    predict,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Bad flags or arguments; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit 2; we want 1
        raise UsageError(message)


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")


def _fail(kind: str, exc) -> None:
    record = {"error": kind, "message": " ".join(str(exc).split())}
    sys.stderr.write(json.dumps(record, sort_keys=True) + "\n")


def _workers(requested: int) -> int:
    cap = os.environ.get("MIFNO_THREADS")
    if cap is not None:
        try:
            requested = min(requested, max(1, int(cap)))
        except ValueError:
            raise UsageError(f"MIFNO_THREADS must be an integer, got {cap!r}")
    return max(1, requested)


def _provenance_bytes(info: dict) -> np.ndarray:
    return np.frombuffer(json.dumps(info, sort_keys=True).encode("utf-8"),
                         dtype=np.uint8)


# Worker payload inherited through fork; keys set right before the pool
# spawns so children never repeat the parent's setup work.
_POOL_CTX: dict = {}


def _pool_map(fn, n: int, workers: int) -> list:
    if workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    ctx = multiprocessing.get_context("fork")
    with ctx.Pool(min(workers, n)) as pool:
        return pool.map(fn, range(n))


def _geo_worker(i: int):
    c = _POOL_CTX
    g = generate_geology(c["seed"], i, c["shape"], c["dx"], c["layers"])
    return g.vs, g.vp, g.rho


def cmd_gen_geology(args) -> int:
    rc = load_run_config(args.config)
    _POOL_CTX.clear()
    _POOL_CTX.update(seed=args.seed, shape=rc.shape, dx=rc.dx,
                     layers=rc.geology_layers())
    rows = _pool_map(_geo_worker, args.n, _workers(args.workers))
    entries = {
        "geology/vs": np.stack([r[0] for r in rows]),
        "geology/vp": np.stack([r[1] for r in rows]),
        "geology/rho": np.stack([r[2] for r in rows]),
        "meta/dx": np.float64(rc.dx),
        "meta/seed": np.int64(args.seed),
        "meta/provenance": _provenance_bytes(
            {"origin": "gen-geology", "count": args.n}),
    }
    write_container(args.out, entries)
    _emit({"written": args.out, "samples": args.n})
    return EXIT_OK


def cmd_gen_sources(args) -> int:
    rc = load_run_config(args.config)
    specs = sample_sources(args.n, stream(args.seed, "sources"),
                           ranges=rc.source_ranges(),
                           m0=rc.source["m0_nm"],
                           rise_time=rc.source["rise_time_s"])
    entries = {
        "source/position": np.stack([s.position for s in specs]),
        "source/angles": np.stack([s.angles for s in specs]),
        "source/moment": np.stack([s.moment_vector() for s in specs]),
        "source/m0": np.array([s.m0 for s in specs]),
        "source/rise_time": np.array([s.rise_time for s in specs]),
        "meta/seed": np.int64(args.seed),
        "meta/provenance": _provenance_bytes(
            {"origin": "gen-sources", "count": args.n}),
    }
    write_container(args.out, entries)
    _emit({"written": args.out, "samples": args.n})
    return EXIT_OK


def _load_sources(entries: dict) -> list:
    pos = entries["source/position"]
    angles = entries["source/angles"]
    moment = entries["source/moment"]
    m0 = entries["source/m0"]
    rise = entries["source/rise_time"]
    specs = []
    for i in range(pos.shape[0]):
        ang = angles[i] if np.isfinite(angles[i]).all() else None
        specs.append(SourceSpec(position=pos[i], angles=ang,
                                moment=moment[i], m0=float(m0[i]),
                                rise_time=float(rise[i])))
    return specs


def _sim_worker(i: int):
    c = _POOL_CTX
    g = GeologyModel(vs=c["vs"][i], vp=c["vp"][i], rho=c["rho"][i],
                     dx=c["dx"])
    rec = simulate(g, [c["specs"][i]], c["cfg"])
    return rec.data


def cmd_simulate(args) -> int:
    rc = load_run_config(args.config)
    geo = read_container(args.geology)
    src = read_container(args.sources)
    vs, vp, rho = geo["geology/vs"], geo["geology/vp"], geo["geology/rho"]
    specs = _load_sources(src)
    if vs.shape[0] != len(specs):
        raise ValueError(
            f"sample count mismatch: {vs.shape[0]} geologies vs "
            f"{len(specs)} sources")
    dx = float(geo["meta/dx"])
    cfg = rc.sim_config()
    _POOL_CTX.clear()
    _POOL_CTX.update(vs=vs, vp=vp, rho=rho, dx=dx, specs=specs, cfg=cfg)
    fields = _pool_map(_sim_worker, len(specs), _workers(args.workers))
    n = len(specs)
    angles = np.stack([
        s.angles if s.angles is not None else np.full(3, np.nan)
        for s in specs])
    ds = Dataset(
        vs=vs, vp=vp, rho=rho,
        positions=np.stack([s.position for s in specs]),
        angles=angles,
        moments=np.stack([s.moment_vector() for s in specs]),
        m0=np.array([s.m0 for s in specs]),
        rise_times=np.array([s.rise_time for s in specs]),
        dx=dx,
        wavefields=np.stack(fields),
        dt=cfg.dt_out,
        seed=int(geo["meta/seed"]),
        provenance={"origin": "simulate", "count": n},
    )
    ds.save(args.out)
    _emit({"written": args.out, "samples": n,
           "wavefield_shape": list(ds.wavefields.shape)})
    return EXIT_OK


def _history_entries(res) -> dict:
    extra = res.history.to_entries()
    extra["history/best_epoch"] = np.int64(res.best_epoch)
    extra["history/best_val"] = np.float64(res.best_val)
    return extra


def cmd_train(args) -> int:
    rc = load_run_config(args.config)
    ds = Dataset.load(args.data)
    model_cfg = rc.model_config()
    log = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        res = train(model_cfg, ds, rc.train_config(), log_stream=log)
    finally:
        if log is not None:
            log.close()
    save_checkpoint(args.out, res.weights, model_cfg, res.norm,
                    extra_entries=_history_entries(res))
    _emit({"written": args.out, "epochs": len(res.history),
           "best_epoch": res.best_epoch, "best_val": res.best_val})
    return EXIT_OK


def cmd_finetune(args) -> int:
    rc = load_run_config(args.config)
    ds = Dataset.load(args.data)
    weights, model_cfg, norm = load_checkpoint(args.checkpoint)
    log = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        res = fine_tune((weights, model_cfg, norm), ds, rc.train_config(),
                        log_stream=log)
    finally:
        if log is not None:
            log.close()
    save_checkpoint(args.out, res.weights, model_cfg, res.norm,
                    extra_entries=_history_entries(res))
    _emit({"written": args.out, "epochs": len(res.history),
           "best_epoch": res.best_epoch, "best_val": res.best_val})
    return EXIT_OK


def cmd_predict(args) -> int:
    ds = Dataset.load(args.data)
    weights, model_cfg, norm = load_checkpoint(args.checkpoint)
    if norm is None:
        raise ValueError(f"{args.checkpoint}: checkpoint carries no "
                         "normalization statistics")
    if ds.dt is not None:
        dt = ds.dt
    elif args.config:
        dt = load_run_config(args.config).sim["dt_out_s"]
    else:
        raise ValueError("prediction sampling step unknown: dataset has "
                         "no wavefields and no --config was given")
    out = predict(weights, model_cfg, norm, ds,
                  batch_size=args.batch_size,
                  denormalize=not args.normalized)
    entries = {
        "wavefield/data": out,
        "wavefield/dt": np.float64(dt),
        "meta/seed": np.int64(ds.seed),
        "meta/provenance": _provenance_bytes(
            {"origin": "predict", "normalized": bool(args.normalized),
             "checkpoint": os.path.basename(args.checkpoint)}),
    }
    write_container(args.out, entries)
    _emit({"written": args.out, "samples": len(ds),
           "wavefield_shape": list(out.shape)})
    return EXIT_OK


def _wavefields_of(path: str):
    entries = read_container(path)
    if "wavefield/data" not in entries:
        raise ValueError(f"{path}: no wavefield entries")
    return entries["wavefield/data"], float(entries["wavefield/dt"])


def cmd_evaluate(args) -> int:
    pred, dt_p = _wavefields_of(args.pred)
    ref, dt_r = _wavefields_of(args.ref)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: predictions {pred.shape} vs "
                         f"references {ref.shape}")
    if abs(dt_p - dt_r) > 1e-12:
        raise ValueError(f"sampling mismatch: predictions dt {dt_p} vs "
                         f"references dt {dt_r}")
    band, voices = GOF_BAND, GOF_VOICES
    if args.config:
        rc = load_run_config(args.config)
        band, voices = rc.eval["band_hz"], rc.eval["voices"]
    # per-pair peak scaling: the trace-error floor is calibrated for
    # roughly unit-scale records, and the wavelet scores ignore scale
    values = []
    for i in range(pred.shape[0]):
        peak = np.abs(ref[i]).max() or 1.0
        values.append(record_metrics(pred[i] / peak, ref[i] / peak,
                                     dt_r, band, voices))
    values = np.stack(values)
    report = MetricReport(values=values)
    if args.out:
        write_container(args.out, {
            "metrics/values": report.values,
            "metrics/columns": _provenance_bytes(list(report.columns)),
            "meta/provenance": _provenance_bytes(
                {"origin": "evaluate", "band_hz": list(band),
                 "voices": voices}),
        })
    if args.table:
        with open(args.table, "w", encoding="utf-8") as fh:
            fh.write(report.to_table())
    summary = {col: round(mean, 6)
               for col, (mean, _) in report.aggregate().items()}
    payload = {"samples": int(pred.shape[0]), "aggregate": summary}
    if args.out:
        payload["written"] = args.out
    _emit(payload)
    return EXIT_OK


def cmd_augment(args) -> int:
    ds = Dataset.load(args.data)
    out = augment_rotations(ds)
    out.save(args.out)
    _emit({"written": args.out, "samples": len(out)})
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ds = Dataset.load(args.data)
    if not 0 <= args.sample < len(ds):
        raise ValueError(f"sample {args.sample} outside dataset of "
                         f"{len(ds)}")
    os.makedirs(args.out, exist_ok=True)
    written = []
    i = args.sample

    fig, ax = plt.subplots(figsize=(5, 4))
    mid = ds.vs.shape[3] // 2
    im = ax.imshow(ds.vs[i, :, :, mid].T, origin="lower", cmap="viridis")
    fig.colorbar(im, ax=ax, label="Vs (m/s)")
    ax.set_title(f"sample {i}: Vs at mid depth")
    path = os.path.join(args.out, f"geology_{i}.png")
    fig.savefig(path, dpi=110)
    plt.close(fig)
    written.append(path)

    pred = None
    if args.pred:
        pred, _ = _wavefields_of(args.pred)
        if pred.shape[0] != len(ds):
            raise ValueError(
                f"prediction count {pred.shape[0]} != dataset {len(ds)}")

    if ds.wavefields is not None or pred is not None:
        wf = ds.wavefields if ds.wavefields is not None else pred
        ns = wf.shape[1]
        t = ds.dt * np.arange(1, wf.shape[3] + 1) if ds.dt else \
            np.arange(1, wf.shape[3] + 1)
        fig, axes = plt.subplots(3, 1, figsize=(7, 6), sharex=True)
        comp = "ENZ"
        for c in range(3):
            if ds.wavefields is not None:
                axes[c].plot(t, ds.wavefields[i, ns // 2, ns // 2, :, c],
                             label="reference", lw=1.2)
            if pred is not None:
                axes[c].plot(t, pred[i, ns // 2, ns // 2, :, c],
                             label="predicted", lw=1.0, ls="--")
            axes[c].set_ylabel(comp[c])
        axes[0].legend(loc="upper right", fontsize=8)
        axes[2].set_xlabel("time (s)")
        fig.suptitle(f"sample {i}: center-sensor velocity")
        path = os.path.join(args.out, f"traces_{i}.png")
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)

        nt = wf.shape[3]
        picks = [nt // 4, nt // 2, (3 * nt) // 4]
        fig, axes = plt.subplots(1, 3, figsize=(10, 3.4))
        mag = np.linalg.norm(wf[i], axis=-1)
        vmax = mag.max() or 1.0
        for ax, k in zip(axes, picks):
            im = ax.imshow(mag[:, :, k].T, origin="lower", cmap="magma",
                           vmin=0.0, vmax=vmax)
            label = f"t = {k * ds.dt:.2f} s" if ds.dt else f"step {k}"
            ax.set_title(label, fontsize=9)
        fig.colorbar(im, ax=axes, label="|u|", shrink=0.85)
        path = os.path.join(args.out, f"snapshot_{i}.png")
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)

    if pred is not None and ds.wavefields is not None:
        cap = min(len(ds), 16)  # metric cost, not plotting, dominates
        values = np.stack([
            record_metrics(pred[j], ds.wavefields[j], ds.dt)
            for j in range(cap)])
        report = MetricReport(values=values)
        cols = {c: k for k, c in enumerate(report.columns)}
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        for ax, name in zip(axes, ("eg", "pg")):
            data = report.values[..., cols[name]].ravel()
            data = data[np.isfinite(data)]
            ax.hist(data, bins=np.linspace(0, 10, 41), color="#4878a8")
            ax.set_xlabel(name.upper())
            ax.set_ylabel("sensors")
        fig.suptitle(f"goodness of fit over {cap} samples")
        fig.tight_layout()
        path = os.path.join(args.out, "gof_hist.png")
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)

    _emit({"written": written})
    return EXIT_OK


def cmd_inspect(args) -> int:
    rows = list_entries(args.path)
    total = 0
    sys.stdout.write("name\tdtype\tshape\tbytes\n")
    for row in rows:
        shape = "x".join(str(s) for s in row["shape"]) or "scalar"
        sys.stdout.write(
            f"{row['name']}\t{row['dtype']}\t{shape}\t{row['bytes']}\n")
        total += row["bytes"]
    sys.stdout.write(f"total\t\t{len(rows)} entries\t{total}\n")
    return EXIT_OK


def cmd_init_config(args) -> int:
    text = template(args.scale)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        _emit({"written": args.out, "scale": args.scale})
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> _Parser:
    p = _Parser(prog="mifno",
                description="elastic wavefield surrogate pipeline")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)

    def add(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.set_defaults(func=fn)
        return s

    s = add("gen-geology", cmd_gen_geology,
            "sample random geologies into a container")
    s.add_argument("--config", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)

    s = add("gen-sources", cmd_gen_sources,
            "Latin hypercube source sampling into a container")
    s.add_argument("--config", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)

    s = add("simulate", cmd_simulate,
            "run the reference solver over geology/source containers")
    s.add_argument("--config", required=True)
    s.add_argument("--geology", required=True)
    s.add_argument("--sources", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)

    s = add("train", cmd_train, "fit the surrogate on a dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log", default=None,
                   help="per-epoch JSON lines (timing included; diagnostic)")

    s = add("finetune", cmd_finetune,
            "continue training from a checkpoint")
    s.add_argument("--config", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--log", default=None)

    s = add("predict", cmd_predict,
            "surrogate wavefields for a dataset's inputs")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None,
                   help="needed when the dataset has no wavefields (dt)")
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--normalized", action="store_true",
                   help="keep outputs in normalized units")

    s = add("evaluate", cmd_evaluate,
            "metric tables for predictions against references")
    s.add_argument("--pred", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--out", default=None, help="metric container")
    s.add_argument("--table", default=None, help="tab-delimited text table")
    s.add_argument("--config", default=None)

    s = add("augment", cmd_augment,
            "quadruple a dataset with quarter-turn rotations")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)

    s = add("plot", cmd_plot,
            "geology, trace, snapshot, and GOF figures")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--pred", default=None)
    s.add_argument("--sample", type=int, default=0)

    s = add("inspect", cmd_inspect, "summarize a container's entries")
    s.add_argument("path")

    s = add("init-config", cmd_init_config,
            "write a commented configuration template")
    s.add_argument("--scale", choices=("paper", "desk"), default="paper")
    s.add_argument("--out", default=None)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            raise UsageError("a subcommand is required (see --help)")
        return args.func(args)
    except UsageError as exc:
        _fail("usage", exc)
        return EXIT_USAGE
    except (TrainingError, SimulationError, FloatingPointError,
            ZeroDivisionError) as exc:
        _fail("numerical", exc)
        return EXIT_NUMERIC
    except (ConfigError, ContainerError, ValueError, KeyError, OSError) as exc:
        _fail("data", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
