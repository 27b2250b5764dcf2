"""Command line driver: ``avdepth {gen-data,train,eval,inspect}``.

Every command accepts ``--config FILE`` holding ``key=value`` lines named
after the long flags (dashes or underscores). Flags given on the command
line override the file. Exit codes: 0 ok, 2 I/O, 3 numeric, 4 artifact format.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .audio import PROFILES, write_wav
from .formats import FormatError, atomic_write, write_pgm8, write_pgm16, write_ppm
from .model import FUSIONS, MODALITY_SETS, AVDepthModel, build_model
from .nets import NetConfig
from .scene import DatasetConfig, build_dataset, load_split, read_manifest, render_sample, spectro_from_manifest
from .tensor import Tensor, no_grad
from .train import (
    AdamConfig,
    NumericError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    report_table,
    resolution_sweep,
    save_checkpoint,
    train,
)

EXIT_OK, EXIT_IO, EXIT_NUMERIC, EXIT_FORMAT = 0, 2, 3, 4
DEPTH_METERS_PER_LEVEL = 0.001
EVAL_HEADER = ("scale", "rmse", "rel", "log10", "d1", "d2", "d3", "n_valid")

logger = logging.getLogger("avdepth")


class ConfigFileError(ValueError):
    pass


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avdepth", description="Material-aware audio-visual depth estimation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--size", type=int, choices=(32, 64, 128), default=32)
    g.add_argument("--n-train", type=int, default=512)
    g.add_argument("--n-val", type=int, default=64)
    g.add_argument("--n-test", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--profile", choices=sorted(PROFILES), default="replica")

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--epochs", type=int, default=60)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--seed", type=int, default=0, help="seeds both init and shuffling")
    t.add_argument("--fusion", choices=FUSIONS, default="bilinear")
    t.add_argument("--modalities", choices=sorted(MODALITY_SETS), default="all")
    t.add_argument("--k", type=int, default=16, help="bilinear output channels per modality pair")
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--l2-decay", action="store_true", help="fold weight decay into the gradient")
    t.add_argument("--max-steps", type=int, default=None)
    t.add_argument("--log", default=None, help="metrics CSV (default: <out>.csv)")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test")
    e.add_argument("--resolution-sweep", action="store_true", help="degrade RGB input at scales 1 .. 1/32")
    e.add_argument("--csv", default=None, help="report CSV (default: <ckpt>.<split>.csv)")

    i = sub.add_parser("inspect", help="dump one scene and optionally its attention map")
    i.add_argument("--scene-seed", type=int, required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--size", type=int, choices=(32, 64, 128), default=32)
    i.add_argument("--profile", choices=sorted(PROFILES), default="replica")
    i.add_argument("--ckpt", default=None)

    for p in (g, t, e, i):
        p.add_argument("--config", default=None, help="key=value file; flags override it")
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def read_config_file(path: str, sub: argparse.ArgumentParser) -> dict:
    """Parse ``key=value`` lines into typed defaults for ``sub``."""
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        dest = key.lstrip("-").replace("-", "_")
        if dest not in actions:
            raise ConfigFileError(f"{path}:{lineno}: unknown key {key!r}")
        action = actions[dest]
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ConfigFileError(f"{path}:{lineno}: {key} expects a boolean")
            values[dest] = value.lower() in ("1", "true", "yes")
            continue
        try:
            typed = action.type(value) if action.type else value
        except ValueError as exc:
            raise ConfigFileError(f"{path}:{lineno}: {key}: {exc}") from exc
        if action.choices is not None and typed not in action.choices:
            raise ConfigFileError(f"{path}:{lineno}: {key}={value} not in {sorted(action.choices)}")
        values[dest] = typed
    return values


def _scan_config(argv: list[str]) -> tuple[str | None, str | None]:
    """Find the subcommand and ``--config`` value before full parsing."""
    command = next((a for a in argv if a in COMMANDS), None)
    path = None
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            path = argv[i + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
    return command, path


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    command, path = _scan_config(argv)
    if command and path:
        sub = _subparser(parser, command)
        try:
            defaults = read_config_file(path, sub)
        except (OSError, ConfigFileError) as exc:
            parser.error(str(exc))
        for a in sub._actions:
            if a.dest in defaults:
                a.required = False
        sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg = DatasetConfig(
        image_size=args.size,
        n_train=args.n_train,
        n_val=args.n_val,
        n_test=args.n_test,
        spectro=PROFILES[args.profile],
        seed=args.seed,
    )
    out = build_dataset(cfg, args.out)
    print(f"wrote {cfg.n_train + cfg.n_val + cfg.n_test} samples to {out}")
    return EXIT_OK


def net_config_for(data_dir: str) -> NetConfig:
    manifest = read_manifest(data_dir)
    spec = spectro_from_manifest(manifest)
    return NetConfig.toy(image_size=int(manifest["image_size"]), spectro_shape=(spec.n_bins, spec.n_frames))


def cmd_train(args) -> int:
    net_cfg = net_config_for(args.data)
    train_set = load_split(args.data, "train")
    val_set = load_split(args.data, "val")
    model = build_model(net_cfg, args.modalities, args.fusion, args.k, seed=args.seed)
    tcfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        seed=args.seed,
        max_steps=args.max_steps,
        adam=AdamConfig(lr=args.lr, weight_decay=args.weight_decay, decoupled=not args.l2_decay),
    )
    log_path = args.log or f"{args.out}.csv"
    result = train(model, train_set, val_set, tcfg, log_path)
    run_text = f"model_seed={args.seed}\nmodalities={args.modalities}\n" + tcfg.to_text()
    save_checkpoint(model, args.out, run_text)
    manifest = "".join(f"data.{k}={v}\n" for k, v in read_manifest(args.data).items())
    manifest += run_text + f"log={log_path}\ncheckpoint={args.out}\n"
    atomic_write(f"{args.out}.manifest.txt", manifest.encode())
    print(f"trained {len(result.step_losses)} steps, final loss {result.step_losses[-1]:.5f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    arrays = load_split(args.data, args.split)
    if args.resolution_sweep:
        sweep = resolution_sweep(model, arrays)
        rows = [(r.label, r.report) for r in sweep if r.report is not None]
        for r in sweep:
            if r.report is None:
                print(r.note, file=sys.stderr)
    else:
        rows = [("1", evaluate(model, arrays))]
    print(report_table(rows))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EVAL_HEADER)
    for label, rep in rows:
        writer.writerow([label] + rep.row())
    atomic_write(args.csv or f"{args.ckpt}.{args.split}.csv", buf.getvalue().encode())
    return EXIT_OK


def heatmap(values: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Linear map of ``values`` onto 0..255."""
    lo = float(values.min()) if lo is None else lo
    hi = float(values.max()) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    return np.clip((values - lo) * scale, 0, 255)


def cmd_inspect(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = DatasetConfig(image_size=args.size, spectro=PROFILES[args.profile])
    sample = render_sample(args.scene_seed, cfg)
    write_pgm16(out / "depth.pgm", sample.depth / DEPTH_METERS_PER_LEVEL)
    (out / "depth.txt").write_text(f"meters_per_level={DEPTH_METERS_PER_LEVEL!r}\nzero=invalid\n")
    write_ppm(out / "image.ppm", sample.image)
    write_wav(out / "echo.wav", sample.echo)
    log_spec = np.log1p(sample.spectrogram.values)
    for ch, name in enumerate(("left", "right")):
        # low frequencies at the bottom row
        write_pgm8(out / f"spectrogram_{name}.pgm", heatmap(log_spec[ch][::-1], 0.0, float(log_spec.max())))
    written = ["depth.pgm", "depth.txt", "image.ppm", "echo.wav", "spectrogram_left.pgm", "spectrogram_right.pgm"]
    if args.ckpt:
        model, _ = load_checkpoint(args.ckpt)
        if not isinstance(model, AVDepthModel):
            print(f"checkpoint holds a {model.kind} model; no attention map to export", file=sys.stderr)
        else:
            model.eval()
            with no_grad():
                res = model(Tensor(sample.spectrogram.values[None]), Tensor(sample.image[None]))
            write_pgm8(out / "attention.pgm", heatmap(res["alpha"].data[0, 0], 0.0, 1.0))
            write_pgm16(out / "prediction.pgm", np.maximum(res["depth"].data[0, 0], 0) / DEPTH_METERS_PER_LEVEL)
            written += ["attention.pgm", "prediction.pgm"]
    print("\n".join(str(out / name) for name in written))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None) -> int:
    args = parse_args(argv)
    level = logging.INFO if args.verbose or os.environ.get("AVDEPTH_VERBOSE") else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"error: bad artifact: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
