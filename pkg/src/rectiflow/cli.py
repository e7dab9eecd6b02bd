"""Command-line entry point.

Every command writes into its own output directory: the resolved config, a
seed log, and its artifacts. A ``RUNNING`` marker exists while a command is in
progress and is replaced by ``FAILED`` (holding the error) if it aborts.

Exit codes: 0 success, 2 configuration/usage error, 3 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .codec import CodecFitError, fit_autoencoder
from .config import ConfigError, RunConfig, load_config, write_config
from .flow import FlowModel, euler_solve, straightness
from .persist import (
    CheckpointError,
    export_dataset,
    import_dataset,
    load_codec,
    load_flow,
    read_pgm,
    save_codec,
    save_flow,
    write_pgm,
)
from .phantom import LesionCase, Phantom, make_lesion_cases, make_normals
from .pipeline import encode_set, phantom_arrays, reflow_flow, texture_bank, train_flow
from .scoring import anomaly_map, correct_images, evaluate_dataset

log = logging.getLogger("rectiflow")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
OUT_ENV = "RECTIFLOW_OUT"


class UsageError(Exception):
    pass


# -- run directory -------------------------------------------------------------------


def resolve_out(args: argparse.Namespace) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ENV) or "runs"
    return Path(root) / args.command


def prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    (out / "FAILED").unlink(missing_ok=True)
    (out / "RUNNING").write_text("incomplete: command still running or was interrupted\n")


def seed_log(cfg: RunConfig) -> dict:
    return {
        "run": cfg.seed,
        "data": cfg.data.seed,
        "textures": cfg.data.texture_seed,
        "corruption": cfg.corruption.seed,
        "train": cfg.train.seed,
        "eval": cfg.eval.seed,
    }


def write_run_files(out: Path, cfg: RunConfig) -> None:
    write_config(cfg, out / "resolved_config.json")
    (out / "seeds.json").write_text(json.dumps(seed_log(cfg), indent=2, sort_keys=True))


def write_loss_csv(path: Path, flow: FlowModel) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss"])
        for i, v in enumerate(flow.loss_curve, 1):
            w.writerow([i, f"{v:.8g}"])


def _need(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} path {p} does not exist")
    return p


def _load_flow_and_codec(path: str | None):
    flow, codec = load_flow(_need(path, "checkpoint"))
    if codec is None:
        raise CheckpointError(f"checkpoint {path} holds no codec")
    return flow, codec


def _normalised(a: np.ndarray) -> np.ndarray:
    lo, hi = float(a.min()), float(a.max())
    return np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)


# -- commands ------------------------------------------------------------------------


def cmd_fit_codec(args, cfg: RunConfig, out: Path) -> None:
    images, _ = phantom_arrays(cfg.data.n_normals, cfg.data.seed, cfg.data.image_size)
    try:
        codec = fit_autoencoder(images, cfg.codec, seed=cfg.seed)
    except CodecFitError as exc:
        save_codec(out / "codec.partial", exc.codec)
        raise
    save_codec(out / "codec", codec)
    (out / "codec_fit.json").write_text(json.dumps({"heldout_mse": codec.fit_mse, "loss_curve": codec.loss_curve}, indent=2))


def cmd_train(args, cfg: RunConfig, out: Path) -> None:
    codec = load_codec(_need(args.codec, "codec"))
    images, fgs = phantom_arrays(cfg.data.n_normals, cfg.data.seed, cfg.data.image_size)
    data = encode_set(codec, images, fgs)
    bank = texture_bank(codec, cfg.data.n_textures, cfg.data.image_size, cfg.data.texture_seed, cfg.data.texture_dir) if cfg.data.n_textures or cfg.data.texture_dir else None
    flow = train_flow(data, cfg.corruption, cfg.train, bank, cfg.net.preset)
    save_flow(out / "checkpoint", flow, codec)
    write_loss_csv(out / "loss.csv", flow)
    log.info("train status: %s", flow.status)


def cmd_reflow(args, cfg: RunConfig, out: Path) -> None:
    teacher, codec = _load_flow_and_codec(_need(args.teacher, "teacher"))
    images, fgs = phantom_arrays(cfg.data.n_normals, cfg.data.seed, cfg.data.image_size)
    data = encode_set(codec, images, fgs)
    bank = texture_bank(codec, cfg.data.n_textures, cfg.data.image_size, cfg.data.texture_seed, cfg.data.texture_dir) if cfg.data.n_textures or cfg.data.texture_dir else None
    student = reflow_flow(teacher, data, cfg.corruption, cfg.train, bank)
    save_flow(out / "checkpoint", student, codec)
    write_loss_csv(out / "loss.csv", student)


def cmd_correct(args, cfg: RunConfig, out: Path) -> None:
    flow, codec = _load_flow_and_codec(args.checkpoint)
    files = sorted(_need(args.input, "input").glob("*.pgm"))
    if not files:
        raise UsageError(f"no .pgm files in {args.input}")
    images = np.stack([read_pgm(f).astype(np.float32) / 255.0 for f in files])
    steps = args.steps or cfg.eval.steps[0]
    res = correct_images(flow, codec, images, steps)
    (out / "reconstructions").mkdir(exist_ok=True)
    (out / "maps").mkdir(exist_ok=True)
    with open(out / "maps.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "steps", "map_mean", "raw_map_mean", "raw_map_max"])
        for i, f in enumerate(files):
            amap = anomaly_map(res.x[i], res.x_rec[i], res.y[i], res.y_rec[i])
            write_pgm(out / "reconstructions" / f.name, np.clip(res.x_rec[i], 0, 1))
            write_pgm(out / "maps" / f.name, amap)
            raw = anomaly_map(res.x[i], res.x_rec[i], res.y[i], res.y_rec[i], normalize=False)
            w.writerow([f.name, steps, f"{amap.mean():.6f}", f"{raw.mean():.6f}", f"{raw.max():.6f}"])


def _eval_cases(args, cfg: RunConfig) -> list[LesionCase]:
    if not args.cases:
        return make_lesion_cases(cfg.eval.n_cases, cfg.eval.seed, cfg.data.image_size, severity_range=cfg.eval.severity_range)
    items, _ = import_dataset(_need(args.cases, "cases"))
    cases = []
    for it in items:
        if "gt_mask" not in it:
            raise UsageError(f"dataset {args.cases} has items without lesion masks")
        ph = Phantom(it["image"], it["foreground"], it["phantom_seed"])
        cases.append(LesionCase(it["image"], it["gt_mask"], it["severity"], it["kind"], it["lesion_seed"], ph))
    return cases


def cmd_eval(args, cfg: RunConfig, out: Path) -> None:
    flow, codec = _load_flow_and_codec(args.checkpoint)
    cases = _eval_cases(args, cfg)
    report = evaluate_dataset(flow, codec, cases, cfg.eval.steps, keep_maps=cfg.eval.dump_maps, out_dir=out)
    if cfg.eval.dump_maps:
        for steps, reps in report.reports.items():
            d = out / f"maps_steps{steps}"
            d.mkdir(exist_ok=True)
            for r in reps:
                if r.anomaly_map is not None:
                    write_pgm(d / f"{r.case_id:05d}.pgm", r.anomaly_map)
    log.info("eval summary: %s", json.dumps(report.summary()))


def cmd_phantom_gen(args, cfg: RunConfig, out: Path) -> None:
    n = args.n if args.n is not None else cfg.data.n_normals
    seed = args.seed if args.seed is not None else cfg.data.seed
    if args.lesions:
        items = make_lesion_cases(n, seed, cfg.data.image_size, severity_range=cfg.eval.severity_range)
    else:
        items = make_normals(n, seed, cfg.data.image_size)
    export_dataset(out / "dataset", items, {"n": n, "seed": seed, "size": cfg.data.image_size, "lesions": bool(args.lesions)})


def cmd_trajectory(args, cfg: RunConfig, out: Path) -> None:
    """Per-step snapshots of the reverse transport for a few lesion cases, plus straightness."""
    flow, codec = _load_flow_and_codec(args.checkpoint)
    cases = make_lesion_cases(args.n, cfg.eval.seed, cfg.data.image_size, severity_range=cfg.eval.severity_range)
    x = np.stack([c.image for c in cases])
    y = codec.encode(x)
    _, traj = euler_solve(flow, y, args.steps, "reverse")
    one_step, _ = euler_solve(flow, y, 1, "reverse")
    for i in range(len(cases)):
        d = out / f"case{i:02d}"
        d.mkdir(exist_ok=True)
        write_pgm(d / "input.pgm", x[i])
        write_pgm(d / "single_step.pgm", np.clip(codec.decode(one_step[i]), 0, 1))
        for k, z in enumerate(traj.states):
            write_pgm(d / f"latent_{k:02d}.pgm", _normalised(z[i].mean(axis=0)))
            write_pgm(d / f"image_{k:02d}.pgm", np.clip(codec.decode(z[i]), 0, 1))
    gap = float(np.mean(np.sum((traj.states[-1] - one_step) ** 2, axis=(1, 2, 3))))
    with open(out / "straightness.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["generation", "steps", "straightness", "one_vs_multi_step_msd"])
        w.writerow([flow.generation, args.steps, f"{straightness(flow, y, max(args.steps, 2)):.8g}", f"{gap:.8g}"])


COMMANDS = {
    "fit-codec": cmd_fit_codec,
    "train": cmd_train,
    "reflow": cmd_reflow,
    "correct": cmd_correct,
    "eval": cmd_eval,
    "phantom-gen": cmd_phantom_gen,
    "trajectory": cmd_trajectory,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted override, e.g. train.lr=5e-4")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command> or runs/<command>)")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")

    p = argparse.ArgumentParser(prog="rectiflow", description="Rectified-flow anomaly correction on latent codes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("fit-codec", parents=[common], help="train the autoencoder codec on normal phantoms")
    s = sub.add_parser("train", parents=[common], help="train a 1-reflect velocity model")
    s.add_argument("--codec", help="codec checkpoint directory")
    s = sub.add_parser("reflow", parents=[common], help="distil a 2-reflect model from a 1-reflect teacher")
    s.add_argument("--teacher", help="flow checkpoint directory")
    s = sub.add_parser("correct", parents=[common], help="correct a directory of PGM images and write anomaly maps")
    s.add_argument("--checkpoint")
    s.add_argument("--input", help="directory of .pgm images")
    s.add_argument("--steps", type=int)
    s = sub.add_parser("eval", parents=[common], help="max-Dice evaluation on lesion cases")
    s.add_argument("--checkpoint")
    s.add_argument("--cases", help="dataset directory from phantom-gen --lesions (default: generate)")
    s = sub.add_parser("phantom-gen", parents=[common], help="export a phantom dataset as PGM + manifest")
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--lesions", action="store_true")
    s = sub.add_parser("trajectory", parents=[common], help="per-step reverse-transport snapshots")
    s.add_argument("--checkpoint")
    s.add_argument("--steps", type=int, default=10)
    s.add_argument("--n", type=int, default=4)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides)
        out = resolve_out(args)
        prepare_out(out, args.force)
    except (ConfigError, UsageError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    write_run_files(out, cfg)
    try:
        COMMANDS[args.command](args, cfg, out)
    except UsageError as exc:
        (out / "FAILED").write_text(f"{exc}\n")
        (out / "RUNNING").unlink(missing_ok=True)
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, CodecFitError, FloatingPointError, ValueError, OSError) as exc:
        (out / "FAILED").write_text(f"{type(exc).__name__}: {exc}\n")
        (out / "RUNNING").unlink(missing_ok=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    (out / "RUNNING").unlink(missing_ok=True)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
