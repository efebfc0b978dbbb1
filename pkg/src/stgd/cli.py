"""Command-line entry point.

One binary, six subcommands: ``gen-data``, ``train``, ``generate``,
``metrics``, ``validate``, ``bench``. Every subcommand resolves its
configuration from defaults < config file < explicit flags < ``--set``
overrides, prints the resolved configuration, and writes a manifest with
the seed and SHA-256 hashes of its inputs next to its outputs.

Exit codes: 0 ok, 1 validation failure, 2 usage error, 3 I/O failure,
4 divergence / numeric failure, 5 artifact mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import bench as bench_mod
from . import data as data_mod
from . import diffusion, metrics as metrics_mod, model as model_mod, train as train_mod
from . import validate as validate_mod
from .errors import (ArtifactMismatchError, BenchError, ConfigError,
                     DivergenceError, FormatError, NumericError, ShapeError)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4
EXIT_MISMATCH = 5


@dataclass
class Opt:
    type: type
    default: object
    help: str
    choices: tuple | None = None


SPECS: dict[str, dict[str, Opt]] = {
    "gen-data": {
        "out": Opt(str, "runs/data", "output directory"),
        "preset": Opt(str, "", "shape preset (short: 3x120, long: 3x400)",
                      ("", "short", "long")),
        "dancers": Opt(int, 3, "number of dancers"),
        "frames": Opt(int, 120, "frames per clip"),
        "style": Opt(str, "circle", "trajectory style or 'all' to cycle"),
        "count": Opt(int, 8, "number of clips"),
        "seed": Opt(int, 0, "generator seed"),
        "tempo": Opt(float, 0.05, "beats per frame"),
        "clearance": Opt(float, 0.1, "minimum inter-dancer distance"),
        "d_in": Opt(int, 8, "motion channels (2 root + limbs)"),
    },
    "train": {
        "out": Opt(str, "runs/train", "output directory"),
        "data": Opt(str, "runs/data", "directory of .stgd clips"),
        "resume": Opt(str, "", "checkpoint to continue from"),
        "epochs": Opt(int, 200, "training epochs"),
        "batch_size": Opt(int, 0, "0 = full dataset per step"),
        "lr": Opt(float, 2e-4, "Adam learning rate"),
        "lr_schedule": Opt(str, "step", "lr schedule", ("constant", "step")),
        "seed": Opt(int, 0, "training seed"),
        "steps": Opt(int, 50, "diffusion steps T"),
        "beta_start": Opt(float, 1e-4, "schedule start"),
        "beta_end": Opt(float, 0.2, "schedule end"),
        "lambda_pos": Opt(float, 1.0, "position loss weight"),
        "lambda_vel": Opt(float, 1.0, "velocity loss weight"),
        "lambda_contact": Opt(float, 1.0, "contact loss weight"),
        "checkpoint_every": Opt(int, 50, "epochs between checkpoints"),
        "d_model": Opt(int, 64, "feature width"),
        "gcn_layers": Opt(int, 2, "graph conv layers"),
        "decoder_layers": Opt(int, 4, "temporal layers (even)"),
        "heads": Opt(int, 4, "attention heads"),
        "window": Opt(int, 64, "linear attention window"),
        "top_k": Opt(int, 0, "edge budget (0 = automatic)"),
        "epsilon": Opt(float, 0.1, "distance floor in adjacency"),
    },
    "generate": {
        "out": Opt(str, "runs/generate", "output directory"),
        "ckpt": Opt(str, "runs/train/model.ckpt", "trained checkpoint"),
        "frames": Opt(int, 120, "frames to generate"),
        "dancers": Opt(int, 3, "dancers to generate"),
        "steps": Opt(int, 50, "diffusion steps T"),
        "beta_start": Opt(float, 1e-4, "schedule start"),
        "beta_end": Opt(float, 0.2, "schedule end"),
        "seed": Opt(int, 0, "sampling seed"),
        "style": Opt(str, "circle", "conditioning style"),
        "tempo": Opt(float, 0.05, "conditioning tempo"),
        "metrics": Opt(int, 1, "1 = evaluate metrics on the output"),
        "delta": Opt(float, 0.1, "clearance threshold for metrics"),
    },
    "metrics": {
        "out": Opt(str, "runs/metrics", "output directory"),
        "input": Opt(str, "", "motion file to evaluate"),
        "delta": Opt(float, 0.1, "clearance threshold"),
        "pairs_csv": Opt(int, 0, "1 = also write per-frame pair distances"),
        "seed": Opt(int, 0, "recorded for provenance (metrics are deterministic)"),
    },
    "validate": {
        "out": Opt(str, "", "optional directory for the JSON report"),
        "fault": Opt(str, "", "inject a gradient fault into this check (self-test)"),
        "seed": Opt(int, 0, "recorded for provenance"),
    },
    "bench": {
        "out": Opt(str, "runs/bench", "output directory"),
        "kernel": Opt(str, "all", "which benchmark", ("all", "attention", "gcn")),
        "grid": Opt(str, "512,1024,2048,4096", "sequence lengths"),
        "gcn_grid": Opt(str, "4,8,16,32,64", "dancer counts"),
        "reps": Opt(int, 9, "repetitions per grid point"),
        "d": Opt(int, 64, "attention feature width"),
        "gcn_d": Opt(int, 32, "gcn feature width"),
        "length": Opt(int, 64, "frames for the gcn sweep"),
        "window": Opt(int, 64, "linear attention window"),
        "seed": Opt(int, 0, "input seed"),
    },
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stgd",
        description="group-dance diffusion toolkit: data, training, "
                    "generation, metrics, invariants, benchmarks")
    subs = parser.add_subparsers(dest="subcommand", required=True)
    for name, spec in SPECS.items():
        sp = subs.add_parser(name, help=f"{name} subcommand")
        sp.add_argument("--config", default="", help="flat key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="K=V",
                        help="override a config key (repeatable)")
        for key, opt in spec.items():
            flag = "--" + key.replace("_", "-")
            kwargs = {"help": f"{opt.help} (default {opt.default!r})",
                      "default": None, "type": opt.type}
            if opt.choices and "" not in opt.choices:
                kwargs["choices"] = opt.choices
            sp.add_argument(flag, dest=key, **kwargs)
    return parser


def _coerce(key: str, raw: str, spec: dict[str, Opt]):
    if key not in spec:
        raise ConfigError(f"unknown config key {key!r}; valid keys: "
                          + ", ".join(sorted(spec)))
    try:
        return spec[key].type(raw)
    except ValueError as err:
        raise ConfigError(f"config key {key!r}: {err}") from err


def _resolve_config(args, spec: dict[str, Opt]) -> dict:
    cfg = {k: o.default for k, o in spec.items()}
    if args.config:
        with open(args.config) as fh:
            for lineno, row in enumerate(fh, 1):
                row = row.strip()
                if not row or row.startswith("#"):
                    continue
                if "=" not in row:
                    raise ConfigError(f"{args.config}:{lineno}: expected key=value")
                k, v = row.split("=", 1)
                cfg[k.strip()] = _coerce(k.strip(), v.strip(), spec)
    for key in spec:
        val = getattr(args, key)
        if val is not None:
            cfg[key] = val
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg[k] = _coerce(k, v, spec)
    for key, opt in spec.items():
        if opt.choices and cfg[key] not in opt.choices:
            raise ConfigError(f"{key}={cfg[key]!r} not in {opt.choices}")
    return cfg


def _print_config(sub: str, cfg: dict):
    print(f"[{sub}] resolved config:")
    for k in sorted(cfg):
        print(f"  {k}={cfg[k]}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir, sub: str, cfg: dict, inputs: list[str]):
    lines = [f"subcommand={sub}"]
    lines += [f"{k}={cfg[k]}" for k in sorted(cfg)]
    lines += [f"input.{os.path.basename(p)}={_sha256(p)}" for p in sorted(inputs)]
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(cfg: dict) -> int:
    if cfg["preset"]:
        cfg = dict(cfg, **{"dancers": data_mod.PRESETS[cfg["preset"]]["n_dancers"],
                           "frames": data_mod.PRESETS[cfg["preset"]]["length"]})
    styles = data_mod.STYLES if cfg["style"] == "all" else (cfg["style"],)
    for s in styles:
        if s not in data_mod.STYLES:
            raise ConfigError(
                f"unknown style {s!r}; valid styles: {', '.join(data_mod.STYLES)}")
    os.makedirs(cfg["out"], exist_ok=True)
    ds = data_mod.make_dataset(
        n_samples=cfg["count"], n_dancers=cfg["dancers"], length=cfg["frames"],
        d_in=cfg["d_in"], styles=tuple(styles), tempo=cfg["tempo"],
        seed=cfg["seed"], clearance=cfg["clearance"])
    paths = []
    for i in range(cfg["count"]):
        mf = data_mod.motion_file_from_sample(ds, i)
        mf.extras["clearance"] = repr(cfg["clearance"])
        path = os.path.join(cfg["out"], f"motion_{i:03d}.stgd")
        data_mod.save_motion(mf, path)
        paths.append(path)
    worst = min(
        data_mod.min_pairwise_distance(s.motion[:, :, :2]) for s in ds.samples)
    print(f"[gen-data] wrote {len(paths)} clips: {cfg['dancers']} dancers x "
          f"{cfg['frames']} frames x {cfg['d_in']} channels")
    print(f"[gen-data] min pairwise root distance {worst:.4f} "
          f"(clearance {cfg['clearance']})")
    _write_manifest(cfg["out"], "gen-data", cfg, [])
    return EXIT_OK


def _dataset_from_dir(path: str) -> tuple[data_mod.SyntheticDataset, list[str]]:
    files = sorted(
        os.path.join(path, f) for f in os.listdir(path) if f.endswith(".stgd"))
    if not files:
        raise ConfigError(f"no .stgd files under {path!r}")
    mfs = [data_mod.load_motion(f) for f in files]
    first = mfs[0]
    for f, mf in zip(files, mfs):
        if mf.motion.shape != first.motion.shape or mf.cond.shape != first.cond.shape:
            raise ArtifactMismatchError(f"{f}: clip shape differs from {files[0]}")
        if not (np.array_equal(mf.mean, first.mean)
                and np.array_equal(mf.std, first.std)):
            raise ArtifactMismatchError(f"{f}: normalization stats differ")
    samples = [
        data_mod.Sample(
            motion=mf.denormalized(), cond=mf.cond, contact_mask=mf.contact_mask,
            style=mf.extras.get("style", "?"),
            tempo=float(mf.extras.get("tempo", "0.05")),
            seed=int(mf.extras.get("seed", "0")))
        for mf in mfs
    ]
    clearance = float(mfs[0].extras.get("clearance", "0.0"))
    ds = data_mod.SyntheticDataset(
        samples=samples, mean=first.mean, std=first.std,
        position_channels=first.position_channels, clearance=clearance,
        seed=int(mfs[0].extras.get("seed", "0")))
    return ds, files


def cmd_train(cfg: dict) -> int:
    ds, files = _dataset_from_dir(cfg["data"])
    os.makedirs(cfg["out"], exist_ok=True)
    tcfg = train_mod.TrainConfig(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
        lr_schedule=cfg["lr_schedule"], seed=cfg["seed"],
        diffusion_steps=cfg["steps"], beta_start=cfg["beta_start"],
        beta_end=cfg["beta_end"], lambda_pos=cfg["lambda_pos"],
        lambda_vel=cfg["lambda_vel"], lambda_contact=cfg["lambda_contact"],
        checkpoint_every=cfg["checkpoint_every"])
    net = opt = None
    start_epoch = 0
    if cfg["resume"]:
        net, lines, opt_state = model_mod.restore_denoiser(cfg["resume"])
        if net.cfg.d_in != ds.d_in or net.cfg.cond_dim != ds.cond_dim:
            raise ArtifactMismatchError(
                "checkpoint channel layout does not match the dataset")
        opt = train_mod.make_adam(net.store, lr=tcfg.lr)
        if opt_state is not None:
            opt.step = opt_state["step"]
            opt.m = opt_state["m"]
            opt.v = opt_state["v"]
        start_epoch = int(lines.get("train.epochs_done", "0"))
        mcfg = net.cfg
    else:
        mcfg = model_mod.DenoiserConfig(
            d_in=ds.d_in, d_model=cfg["d_model"], gcn_layers=cfg["gcn_layers"],
            decoder_layers=cfg["decoder_layers"], heads=cfg["heads"],
            window=cfg["window"], top_k=cfg["top_k"], epsilon=cfg["epsilon"],
            cond_dim=ds.cond_dim, position_channels=ds.position_channels)

    every = max(1, (cfg["epochs"] // 10))
    net, opt, history = train_mod.train_toy(
        ds, tcfg, model_cfg=mcfg, net=net, opt=opt, start_epoch=start_epoch,
        out_dir=cfg["out"],
        log=lambda row: (row.epoch % every == 0) and print(
            f"[train] epoch {row.epoch:4d} loss {row.total:.5f}"))

    extras = {
        "data.mean": ",".join(repr(float(v)) for v in ds.mean),
        "data.std": ",".join(repr(float(v)) for v in ds.std),
        "data.channel_names": ",".join(data_mod.channel_names(ds.d_in)),
        "train.epochs_done": str(start_epoch + cfg["epochs"]),
        "train.seed": str(cfg["seed"]),
    }
    model_mod.save_checkpoint(
        os.path.join(cfg["out"], "model.ckpt"), net.config_lines(), net.store,
        extras=extras, opt_state={"step": opt.step, "m": opt.m, "v": opt.v})
    train_mod.write_loss_csv(history, os.path.join(cfg["out"], "loss.csv"))
    _write_manifest(cfg["out"], "train", cfg, files)
    ratio = history[-1].total / history[0].total
    print(f"[train] {len(history)} epochs; loss {history[0].total:.5f} -> "
          f"{history[-1].total:.5f} (final/initial ratio {ratio:.3f})")
    return EXIT_OK


def cmd_generate(cfg: dict) -> int:
    net, lines, _ = model_mod.restore_denoiser(cfg["ckpt"])
    if cfg["dancers"] > net.cfg.max_dancers:
        raise ArtifactMismatchError(
            f"{cfg['dancers']} dancers exceeds the checkpoint's identity table "
            f"({net.cfg.max_dancers})")
    if cfg["style"] not in data_mod.STYLES:
        raise ConfigError(
            f"unknown style {cfg['style']!r}; valid: {', '.join(data_mod.STYLES)}")
    music = data_mod.make_conditioning(cfg["frames"], cfg["style"], cfg["tempo"])
    if music.shape[1] != net.cfg.cond_dim:
        raise ArtifactMismatchError(
            f"conditioning width {music.shape[1]} != checkpoint cond_dim "
            f"{net.cfg.cond_dim}")
    sched = diffusion.make_schedule(cfg["steps"], cfg["beta_start"], cfg["beta_end"])
    motion = diffusion.generate(
        music, cfg["dancers"], cfg["frames"], net, sched, cfg["seed"])

    mean = np.array([float(v) for v in lines["data.mean"].split(",")])
    std = np.array([float(v) for v in lines["data.std"].split(",")])
    names = lines.get("data.channel_names", "").split(",")
    os.makedirs(cfg["out"], exist_ok=True)
    mf = data_mod.MotionFile(
        motion=motion, cond=music, contact_mask=np.zeros(motion.shape[:2]),
        mean=mean, std=std, position_channels=net.cfg.position_channels,
        names=names,
        extras={"style": cfg["style"], "tempo": repr(cfg["tempo"]),
                "seed": str(cfg["seed"]), "steps": str(cfg["steps"])})
    out_path = os.path.join(cfg["out"], "motion.stgd")
    data_mod.save_motion(mf, out_path)
    print(f"[generate] wrote {out_path}: {cfg['dancers']} dancers x "
          f"{cfg['frames']} frames, seed {cfg['seed']}")
    if cfg["metrics"]:
        raw = mf.denormalized()
        report = metrics_mod.MetricReport(
            tif=metrics_mod.tif(raw, cfg["delta"], net.cfg.position_channels),
            gmc_proxy=metrics_mod.gmc_proxy(raw, net.cfg.position_channels),
            diversity=None, delta=cfg["delta"])
        with open(os.path.join(cfg["out"], "metrics.json"), "w") as fh:
            fh.write(report.to_json() + "\n")
        print(f"[generate] metrics: {report.to_json()}")
    _write_manifest(cfg["out"], "generate", cfg, [cfg["ckpt"]])
    return EXIT_OK


def cmd_metrics(cfg: dict) -> int:
    if not cfg["input"]:
        raise ConfigError("metrics needs --input pointing at a motion file")
    mf = data_mod.load_motion(cfg["input"])
    raw = mf.denormalized()
    report = metrics_mod.MetricReport(
        tif=metrics_mod.tif(raw, cfg["delta"], mf.position_channels),
        gmc_proxy=metrics_mod.gmc_proxy(raw, mf.position_channels),
        diversity=None, delta=cfg["delta"])
    print(report.to_json())
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "metrics.json"), "w") as fh:
        fh.write(report.to_json() + "\n")
    if cfg["pairs_csv"]:
        dists = metrics_mod.pair_distances(raw, mf.position_channels)
        with open(os.path.join(cfg["out"], "pair_distances.csv"), "w") as fh:
            fh.write("frame," + ",".join(
                f"pair_{i}" for i in range(dists.shape[0])) + "\n")
            for l in range(dists.shape[1]):
                fh.write(f"{l}," + ",".join(repr(v) for v in dists[:, l]) + "\n")
    _write_manifest(cfg["out"], "metrics", cfg, [cfg["input"]])
    return EXIT_OK


def cmd_validate(cfg: dict) -> int:
    results = validate_mod.run_validation(fault=cfg["fault"] or None)
    failures = [r for r in results if not r.ok]
    for r in results:
        print(f"[{'PASS' if r.ok else 'FAIL'}] {r.name}: {r.detail}")
    summary = {"checks": len(results), "failures": [r.name for r in failures]}
    print(json.dumps(summary, sort_keys=True))
    if cfg["out"]:
        os.makedirs(cfg["out"], exist_ok=True)
        with open(os.path.join(cfg["out"], "validate.json"), "w") as fh:
            json.dump([r.__dict__ for r in results], fh, indent=1, sort_keys=True)
    return EXIT_VALIDATION if failures else EXIT_OK


def cmd_bench(cfg: dict) -> int:
    os.makedirs(cfg["out"], exist_ok=True)
    results: dict[str, bench_mod.BenchResult] = {}
    if cfg["kernel"] in ("all", "attention"):
        grid = [int(v) for v in cfg["grid"].split(",")]
        results.update(bench_mod.bench_attention(
            grid, d=cfg["d"], window=cfg["window"], repetitions=cfg["reps"],
            seed=cfg["seed"]))
    if cfg["kernel"] in ("all", "gcn"):
        grid = [int(v) for v in cfg["gcn_grid"].split(",")]
        results["gcn"] = bench_mod.bench_gcn(
            grid, length=cfg["length"], d=cfg["gcn_d"], repetitions=cfg["reps"],
            seed=cfg["seed"])
    bench_mod.write_bench_csv(results, os.path.join(cfg["out"], "bench.csv"))
    for res in results.values():
        print(f"[bench] {res.kernel}: slope={res.slope:.3f} r2={res.r2:.4f} "
              f"stable={res.stable}")
    _write_manifest(cfg["out"], "bench", cfg, [])
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "generate": cmd_generate,
    "metrics": cmd_metrics,
    "validate": cmd_validate,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    sub = args.subcommand
    try:
        cfg = _resolve_config(args, SPECS[sub])
        _print_config(sub, cfg)
        return COMMANDS[sub](cfg)
    except (ConfigError, ShapeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ArtifactMismatchError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISMATCH
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except BenchError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
