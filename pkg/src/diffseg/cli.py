"""Command-line entry point: data generation, training, evaluation, reports.

Every command resolves its full configuration, writes an atomic
run_manifest.json into its output directory before producing results, and
rewrites it with the wall-clock and final artifact list afterwards. Output
bytes depend only on the arguments, so re-running a manifest's argv
reproduces the artifacts exactly.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    derivative_weights,
    fingerprint,
    fingerprint_to_csv,
    ece,
    iou,
    load_profile_csv,
    load_weights_csv,
    profile_mask_error,
    profile_to_csv,
    profile_training_loss,
    smooth,
    weights_to_csv,
)
from .data import DatasetSpec, generate_dataset, load_dataset, save_dataset, save_pgm, split_train_val
from .diffusion import linear_schedule
from .errors import (
    ConfigError,
    DataError,
    DiffsegError,
    FormatError,
    IoError,
    ShapeError,
    SingularityError,
    StateError,
)
from .models import ModelConfig
from .plots import line_plot
from .training import ENSEMBLE_PRESETS, TrainConfig, ensemble_predict, load_checkpoint, train

KINDS = ("lesion", "nuclei", "tumor")
VARIANTS = ("concat", "encoder_sum", "ff_parser")


def _out_root() -> Path:
    return Path(os.environ.get("DIFFSEG_OUT", "diffseg_out"))


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_text(text)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def _write_manifest(out_dir: Path, command: str, argv, config: dict,
                    seed: int, wall: float | None) -> None:
    skip = {"run_manifest.json", "run_manifest.json.tmp"}
    outputs = sorted(
        str(p.relative_to(out_dir))
        for p in out_dir.rglob("*")
        if p.is_file() and p.name not in skip
    )
    payload = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "outputs": outputs,
        "wall_clock": wall,
    }
    _atomic_write(out_dir / "run_manifest.json", json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _start(out_dir: Path, command: str, argv, config: dict, seed: int) -> float:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_manifest(out_dir, command, argv, config, seed, None)
    return time.perf_counter()


def _finish(started: float, out_dir: Path, command: str, argv, config: dict, seed: int) -> None:
    _write_manifest(out_dir, command, argv, config, seed, time.perf_counter() - started)


def _parse_t_grid(spec: str) -> list[int]:
    """'a:b:s' are zero-based inclusive timestep indices; returned as 1-based t."""
    parts = spec.split(":")
    if len(parts) != 3:
        raise ConfigError(f"t-grid must look like start:stop:step, got {spec!r}")
    try:
        a, b, s = (int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"t-grid {spec!r}: {exc}") from exc
    if a < 0 or b < a or s < 1:
        raise ConfigError(f"t-grid {spec!r} must satisfy 0 <= start <= stop, step >= 1")
    return [i + 1 for i in range(a, b + 1, s)]


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args, argv) -> int:
    out = Path(args.out) if args.out else _out_root() / "data" / args.kind
    spec = DatasetSpec(args.kind, args.count, args.size, args.seed)
    config = {
        "kind": spec.kind, "count": spec.count, "size": spec.size,
        "seed": spec.seed, "train_fraction": args.train_fraction,
    }
    started = _start(out, "gen-data", argv, config, args.seed)
    pairs = generate_dataset(spec)
    train_pairs, val_pairs = split_train_val(pairs, args.train_fraction, seed=args.seed)
    save_dataset(out, train_pairs, val_pairs, spec.kind)
    _finish(started, out, "gen-data", argv, config, args.seed)
    print(f"dataset: {out} ({len(train_pairs)} train / {len(val_pairs)} val pairs)")
    return 0


def _train_config(args, size: int) -> TrainConfig:
    experiment = args.experiment.upper()
    conditional = experiment in ("E1", "E2")
    if not conditional and args.variant != "concat":
        raise ConfigError(
            f"--variant {args.variant} conflicts with experiment {args.experiment}: "
            "unconditional regimes take no image encoder"
        )
    if args.weights and experiment not in ("E2", "E3"):
        raise ConfigError(
            f"--weights conflicts with experiment {args.experiment}: "
            "timestep weighting applies to e2/e3"
        )
    weights = load_weights_csv(args.weights) if args.weights else None
    model = ModelConfig(
        variant=args.variant,
        base_channels=args.base_channels,
        depth=args.depth,
        time_embed_dim=args.time_embed_dim,
        image_channels=1 if conditional else 0,
        image_size=size,
        total_timesteps=args.timesteps,
    )
    return TrainConfig(
        experiment, model, lr=args.lr, batch_size=args.batch_size, steps=args.steps,
        seed=args.seed, beta_start=args.beta_start, beta_end=args.beta_end,
        weights=weights, log_interval=args.log_interval,
    )


def cmd_train(args, argv) -> int:
    train_pairs, val_pairs, kind = load_dataset(args.data)
    size = train_pairs[0].mask.shape[0]
    config = _train_config(args, size)
    out = Path(args.out) if args.out else _out_root() / "train" / f"{args.experiment}_{args.variant}"
    manifest_cfg = {
        "train": {k: v for k, v in asdict(config).items() if k != "weights"},
        "weights_file": args.weights,
        "data": str(args.data),
        "data_kind": kind,
    }
    started = _start(out, "train", argv, manifest_cfg, args.seed)
    _, record = train(config, (train_pairs, val_pairs), out_dir=out)
    _finish(started, out, "train", argv, manifest_cfg, args.seed)
    print(f"checkpoint: {record.checkpoint_path}")
    print(f"final loss: {record.losses[-1]:.6f} (val_iou {record.val_iou[-1]:.4f})")
    return 0


def cmd_eval(args, argv) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    train_pairs, val_pairs, kind = load_dataset(args.data)
    pairs = val_pairs if args.split == "val" else train_pairs
    if not pairs:
        raise DataError(f"no {args.split} samples in {args.data}")
    if args.ensemble_n == "auto":
        n = ENSEMBLE_PRESETS[kind]
    else:
        try:
            n = int(args.ensemble_n)
        except ValueError as exc:
            raise ConfigError(f"--ensemble-n must be an integer or 'auto': {exc}") from exc
    sched = linear_schedule(
        model.config.total_timesteps,
        extra.get("beta_start", 1e-4),
        extra.get("beta_end", 0.02),
    )
    out = Path(args.out) if args.out else _out_root() / "eval"
    config = {
        "checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split,
        "ensemble_n": n, "seed": args.seed,
    }
    started = _start(out, "eval", argv, config, args.seed)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 1]))
    rows, means, gts = [], [], []
    for pair in pairs:
        mean, std, binary = ensemble_predict(model, pair.image, n, sched, rng)
        save_pgm(out / f"{pair.id}_mean.pgm", mean)
        save_pgm(out / f"{pair.id}_std.pgm", np.clip(std, 0.0, 1.0))
        rows.append((pair.id, iou(binary, pair.mask)))
        means.append(mean)
        gts.append(pair.mask)
    mean_iou = float(np.mean([r[1] for r in rows]))
    pooled_ece = ece(np.stack(means), np.stack(gts)).ece
    lines = ["id,iou"]
    lines += [f"{pid},{val!r}" for pid, val in rows]
    lines += [f"mean_iou,{mean_iou!r}", f"ece,{pooled_ece!r}"]
    _atomic_write(out / "summary.csv", "\n".join(lines) + "\n")
    _finish(started, out, "eval", argv, config, args.seed)
    print(f"summary: {out / 'summary.csv'}")
    print(f"mean_iou: {mean_iou:.4f}  ece: {pooled_ece:.4f}")
    return 0


_LOSS_BY_MODE = {("eps", True): "eq3", ("x0", False): "eq2", ("eps", False): "eq1"}


def cmd_profile(args, argv) -> int:
    checkpoints = args.checkpoint
    datas = args.data
    if len(datas) == 1:
        datas = datas * len(checkpoints)
    if len(datas) != len(checkpoints):
        raise ConfigError(
            f"{len(checkpoints)} checkpoints but {len(datas)} --data directories; "
            "give one shared directory or one per checkpoint"
        )
    out = Path(args.out) if args.out else _out_root() / "profile"
    config = {
        "checkpoints": [str(c) for c in checkpoints], "data": [str(d) for d in datas],
        "t_grid": args.t_grid, "conditioned": args.conditioned, "n_eval": args.n_eval,
        "smooth_window": args.smooth_window, "split": args.split, "seed": args.seed,
    }
    started = _start(out, "profile", argv, config, args.seed)

    mask_curves, loss_curves, smoothed_by_label = [], [], {}
    total_t = None
    for ck, dd in zip(checkpoints, datas):
        model, extra = load_checkpoint(ck)
        if model.predicts == "logits":
            raise ConfigError(f"{ck}: feed-forward checkpoints have no timestep profile")
        if total_t is None:
            total_t = model.config.total_timesteps
        elif model.config.total_timesteps != total_t:
            raise ConfigError("all checkpoints must share one timestep count")
        conditional = model.config.image_channels > 0
        if args.conditioned == "on" and not conditional:
            raise ConfigError(f"{ck}: --conditioned on, but the model takes no image")
        if args.conditioned == "off" and conditional:
            raise ConfigError(f"{ck}: --conditioned off, but the model requires its image")

        tr, vl, kind = load_dataset(dd)
        pairs = vl if args.split == "val" else tr
        sched = linear_schedule(total_t, extra.get("beta_start", 1e-4), extra.get("beta_end", 0.02))
        if args.t_grid:
            t_grid = _parse_t_grid(args.t_grid)
        else:
            t_grid = _parse_t_grid(f"0:{total_t - 1}:{max(1, total_t // 200)}")
            if t_grid[-1] != total_t:
                t_grid.append(total_t)  # keep the terminal point on the curve
        window = args.smooth_window or None

        base = f"{extra.get('experiment', model.predicts).lower()}_{kind}"
        base += "_cond" if conditional else "_uncond"
        label, k = base, 2
        while label in smoothed_by_label:
            label, k = f"{base}_{k}", k + 1

        prof = profile_mask_error(
            model, pairs, sched, t_grid, conditioned=conditional,
            n_eval=args.n_eval, seed=args.seed, smoothing_window=window, label=label,
        )
        profile_to_csv(prof, out / f"mask_error_{label}.csv")
        smoothed = smooth(prof, prof.smoothing_window)
        smoothed_by_label[label] = smoothed
        mask_curves.append((label, prof.t_grid, smoothed.values))

        objective = _LOSS_BY_MODE[(model.predicts, conditional)]
        lprof = profile_training_loss(
            model, pairs, objective, sched, t_grid,
            n_eval=args.n_eval, seed=args.seed, smoothing_window=window, label=label,
        )
        profile_to_csv(lprof, out / f"loss_{label}.csv")
        loss_curves.append((f"{label} ({objective})", lprof.t_grid,
                            smooth(lprof, lprof.smoothing_window).values))

    line_plot(mask_curves, out / "mask_error.svg", title="Mask prediction error vs timestep",
              xlabel="timestep", ylabel="MSE")
    line_plot(loss_curves, out / "loss.svg", title="Training objective vs timestep",
              xlabel="timestep", ylabel="loss")
    summary = fingerprint(smoothed_by_label)
    fingerprint_to_csv(summary, out / "fingerprint.csv")
    _finish(started, out, "profile", argv, config, args.seed)
    print(f"profiles: {out}")
    for entry in summary.entries:
        print(f"t_half[{entry.kind}] = {entry.t_half} (converged: {entry.converged})")
    return 0


def cmd_weights(args, argv) -> int:
    out = Path(args.out) if args.out else _out_root() / "weights"
    config = {"profile_csv": str(args.profile_csv), "floor": args.floor,
              "column": args.column, "total": args.total}
    started = _start(out, "weights", argv, config, 0)
    profile = load_profile_csv(args.profile_csv, column=args.column)
    weights = derivative_weights(profile, floor=args.floor, total=args.total)
    weights_to_csv(weights, out / "weights.csv")
    load_weights_csv(out / "weights.csv")  # re-checks the mean-1 invariant on disk
    _finish(started, out, "weights", argv, config, 0)
    print(f"weights: {out / 'weights.csv'} ({weights.weights.size} timesteps)")
    return 0


def cmd_report(args, argv) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise IoError(f"run directory {run_dir} does not exist")
    manifests = []
    for path in sorted(run_dir.rglob("run_manifest.json")):
        try:
            payload = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: {exc}") from exc
        if payload.get("command") != "report":
            manifests.append((path, payload))
    if not manifests:
        raise DataError(f"no run manifests under {run_dir}")
    out = Path(args.out) if args.out else run_dir / "report"
    config = {"run_dir": str(run_dir)}
    started = _start(out, "report", argv, config, 0)

    lines = ["# Run report", ""]
    for path, payload in manifests:
        rel = path.parent.relative_to(run_dir)
        lines.append(f"## {payload['command']} ({rel if str(rel) != '.' else 'top level'})")
        lines.append("")
        lines.append("```")
        lines.append("diffseg " + " ".join(payload.get("argv", [])))
        lines.append("```")
        lines.append("")
        lines.append(f"- seed: {payload.get('seed')}")
        lines.append(f"- tool version: {payload.get('tool_version')}")
        # wall-clock timing is deliberately left out: the report must be a pure
        # function of the run's stable records so regenerating it never churns
        lines.append(f"- outputs: {len(payload.get('outputs', []))} file(s)")
        for table in ("summary.csv", "fingerprint.csv"):
            table_path = path.parent / table
            if table_path.exists():
                lines.append("")
                lines.append(f"### {table}")
                lines.append("")
                lines.append("```")
                lines.extend(table_path.read_text().splitlines())
                lines.append("```")
        lines.append("")
    _atomic_write(out / "report.md", "\n".join(lines).rstrip() + "\n")
    _finish(started, out, "report", argv, config, 0)
    print(f"report: {out / 'report.md'}")
    return 0


# -- argument parsing ----------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffseg",
        description="Train and analyze diffusion-based segmentation on synthetic data.",
    )
    parser.add_argument("--version", action="version", version=f"diffseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic mask/image dataset")
    g.add_argument("kind", choices=KINDS)
    g.add_argument("--count", type=int, default=64, help="number of mask/image pairs")
    g.add_argument("--size", type=int, default=32, help="square image size in pixels")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train-fraction", type=float, default=0.8)
    g.add_argument("--out", default=None, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train one of the four regimes")
    t.add_argument("experiment", choices=["e1", "e2", "e3", "e4"])
    t.add_argument("--data", required=True, help="dataset directory from gen-data")
    t.add_argument("--variant", choices=VARIANTS, default="concat")
    t.add_argument("--lr", type=float, default=1e-5)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--steps", type=int, default=5000)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--base-channels", type=int, default=16)
    t.add_argument("--depth", type=int, default=2)
    t.add_argument("--time-embed-dim", type=int, default=32)
    t.add_argument("--timesteps", type=int, default=1000)
    t.add_argument("--beta-start", type=float, default=1e-4)
    t.add_argument("--beta-end", type=float, default=0.02)
    t.add_argument("--weights", default=None, help="timestep-weights CSV (e2/e3 only)")
    t.add_argument("--log-interval", type=int, default=100)
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="ensembled evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ensemble-n", default="auto",
                   help="member count, or 'auto' for the per-kind preset (25/10/5)")
    e.add_argument("--split", choices=["val", "train"], default="val")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="timestep profiles, fingerprints, and plots")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="repeatable; one curve set per checkpoint")
    p.add_argument("--data", action="append", required=True,
                   help="one directory shared by all checkpoints, or one per checkpoint")
    p.add_argument("--t-grid", default=None,
                   help="start:stop:step over zero-based timestep indices, e.g. 0:999:10")
    p.add_argument("--conditioned", choices=["auto", "on", "off"], default="auto")
    p.add_argument("--n-eval", type=int, default=8)
    p.add_argument("--smooth-window", type=int, default=0, help="odd window; 0 = automatic")
    p.add_argument("--split", choices=["val", "train"], default="val")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_profile)

    w = sub.add_parser("weights", help="derivative-based timestep weights from a profile")
    w.add_argument("profile_csv")
    w.add_argument("--floor", type=float, default=0.05)
    w.add_argument("--column", choices=["value", "smoothed_value"], default="smoothed_value")
    w.add_argument("--total", type=int, default=None,
                   help="extend the weights to this many timesteps (a full schedule)")
    w.add_argument("--out", default=None)
    w.set_defaults(func=cmd_weights)

    r = sub.add_parser("report", help="summarize the run manifests under a directory")
    r.add_argument("run_dir")
    r.add_argument("--out", default=None)
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args, argv)
    except (ConfigError, ShapeError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, IoError, SingularityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except DiffsegError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return 4
    except Exception as exc:  # noqa: BLE001 — last-resort CLI boundary
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
