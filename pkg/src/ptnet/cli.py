"""``ptnet`` command line: data generation, training, synthesis, evaluation and diagnostics.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError, PTNetError

log = logging.getLogger("ptnet")

CONFIG_KEYS = {"preset", "model", "train"}


def load_run_config(path) -> dict:
    """Read ``{"preset": name, "model": {...}, "train": {...}}``; every key is optional."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise DataError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"{p}: top level must be an object")
    unknown = sorted(set(cfg) - CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"{p}: unknown config keys: {', '.join(unknown)}")
    return cfg


def resolve_model_config(run: dict, default_preset="ptnet_s"):
    from .model import PRESETS, PTNetConfig

    name = run.get("preset", default_preset)
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    base = PRESETS[name]().to_dict()
    overrides = run.get("model", {})
    unknown = sorted(set(overrides) - set(base))
    if unknown:
        raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
    return PTNetConfig.from_dict({**base, **overrides})


def write_snapshot(out: Path, command: str, seed: int, **parts) -> None:
    out.mkdir(parents=True, exist_ok=True)
    snap = {"command": command, "seed": seed, **parts}
    (out / "resolved_config.json").write_text(json.dumps(snap, indent=2, sort_keys=True) + "\n")


def _extents(text: str) -> tuple[int, int]:
    try:
        x, y = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected XxY, got {text!r}") from None
    return x, y


def _seed(args, fallback=0) -> int:
    return fallback if args.seed is None else args.seed


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    from .data import generate_dataset

    out = Path(args.out)
    seed = _seed(args)
    X, Y = args.size
    manifest = generate_dataset(out, args.volumes, X, Y, seed, args.depth)
    write_snapshot(out, "gen-data", seed, volumes=args.volumes, size=[X, Y], depth=args.depth)
    log.info("wrote %d slices of %d volumes to %s", len(manifest), args.volumes, out)
    return 0


def cmd_train(args) -> int:
    from .data import load_split, read_manifest
    from .model import PTNet
    from .training import TrainPlan, train

    run = load_run_config(args.config)
    cfg = resolve_model_config(run)
    train_cfg = dict(run.get("train", {}))
    if args.seed is not None:
        train_cfg["seed"] = args.seed
    plan = TrainPlan.from_dict(train_cfg)
    entries, root = read_manifest(args.manifest)
    tr = load_split(entries, root, "train")
    va = load_split(entries, root, "val")
    if tr is None or va is None:
        raise DataError(f"{args.manifest}: need non-empty train and val splits")
    out = Path(args.out)
    write_snapshot(out, "train", plan.seed, model=cfg.to_dict(), train=plan.__dict__, manifest=str(args.manifest))
    model = PTNet(cfg, seed=plan.seed)
    res = train(model, tr[0], tr[1], va[0], va[1], plan, out_dir=out, val_groups=va[2], max_steps=args.max_steps)
    print(f"best epoch {res.best_epoch} val_ssim {res.best_val_ssim:.4f} -> {out / 'best.ptck'}")
    return 0


def cmd_synthesize(args) -> int:
    from .eval import model_predictor, synthesize_volume
    from .model import load_checkpoint
    from .tensor import load_tensor, save_tensor

    model, _ = load_checkpoint(args.checkpoint)
    src = Path(args.input)
    if not src.is_file():
        raise DataError(f"input volume not found: {src}")
    vol = load_tensor(src)
    flat = vol.ndim == 2
    if flat:
        vol = vol[:, :, None]
    if vol.ndim != 3:
        raise ConfigError(f"input must be (X, Y) or (X, Y, Z), got shape {vol.shape}")
    X, Y = vol.shape[:2]
    mult = model.cfg.multiple
    px, py = -X % mult, -Y % mult
    if px or py:
        if not args.pad:
            raise ConfigError(f"input extents {X}x{Y} are not multiples of {mult}; pass --pad to reflect-pad")
        vol = np.pad(vol, ((0, px), (0, py), (0, 0)), mode="reflect")
    out = synthesize_volume(model_predictor(model), vol)[:X, :Y]
    if flat:
        out = out[:, :, 0]
    dest = Path(args.out)
    dest.parent.mkdir(parents=True, exist_ok=True)
    save_tensor(dest, out.astype(np.float32))
    write_snapshot(dest.parent, "synthesize", _seed(args), checkpoint=str(args.checkpoint), input=str(src), pad=args.pad)
    log.info("wrote %s %s", dest, out.shape)
    return 0


def cmd_evaluate(args) -> int:
    from .eval import evaluate

    out = Path(args.out)
    report = evaluate(args.checkpoint, args.manifest, out, args.split, args.compare, args.error_maps, args.pgm)
    write_snapshot(out, "evaluate", _seed(args), checkpoint=str(args.checkpoint), manifest=str(args.manifest),
                   split=args.split, compare=args.compare)
    sys.stdout.write(report.to_json())
    return 0


def cmd_bench_attention(args) -> int:
    from .bench import bench_attention, rows_to_csv

    rows = bench_attention(args.L, args.d, args.m, args.repeats, _seed(args))
    text = rows_to_csv(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "bench_attention.csv").write_text(text)
        write_snapshot(out, "bench-attention", _seed(args), L=args.L, d=args.d, m=args.m, repeats=args.repeats)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .model import check_model_gradients

    run = load_run_config(args.config)
    cfg = resolve_model_config(run, default_preset="gradcheck")
    rep = check_model_gradients(cfg, args.size, args.batch, _seed(args), args.h, args.tol, args.corrupt, args.max_entries)
    print("\n".join(rep.lines()))
    if args.out:
        write_snapshot(Path(args.out), "gradcheck", _seed(args), model=cfg.to_dict(), size=args.size, h=args.h, tol=args.tol)
    return 0 if rep.passed else NumericError.exit_code


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0, or the config's train.seed)")
    common.add_argument("-c", "--config", default=None, help="JSON run config with optional preset/model/train sections")
    common.add_argument("-o", "--out", default=None, help="output directory (output file for synthesize)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ptnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", parents=[common], help="write a synthetic paired dataset and manifest")
    s.add_argument("--volumes", type=int, default=10)
    s.add_argument("--size", type=_extents, default=(64, 64), metavar="XxY", help="slice extents, e.g. 64x64")
    s.add_argument("--depth", type=int, default=8)
    s.set_defaults(func=cmd_gen_data, need_out=True)

    s = sub.add_parser("train", parents=[common], help="train on a manifest's train/val splits")
    s.add_argument("-m", "--manifest", required=True)
    s.add_argument("--max-steps", type=int, default=None, help="cap on steps per epoch")
    s.set_defaults(func=cmd_train, need_out=True)

    s = sub.add_parser("synthesize", parents=[common], help="translate one PTT1 volume with a checkpoint")
    s.add_argument("-k", "--checkpoint", required=True)
    s.add_argument("-i", "--input", required=True)
    s.add_argument("--pad", action="store_true", help="reflect-pad to the model's extent multiple and crop back")
    s.set_defaults(func=cmd_synthesize, need_out=True)

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a manifest split")
    s.add_argument("-k", "--checkpoint", required=True)
    s.add_argument("-m", "--manifest", required=True)
    s.add_argument("--split", default="test")
    s.add_argument("--compare", default=None, help="another report CSV for paired t-tests")
    s.add_argument("--error-maps", action="store_true", help="write per-volume |truth - pred| as PTT1")
    s.add_argument("--pgm", action="store_true", help="also write error maps as 8-bit PGM")
    s.set_defaults(func=cmd_evaluate, need_out=True)

    s = sub.add_parser("bench-attention", parents=[common], help="time exact vs. FAVOR+ attention")
    s.add_argument("--L", type=int, nargs="+", default=[256, 1024, 4096])
    s.add_argument("--d", type=int, default=16)
    s.add_argument("--m", type=int, nargs="+", default=[64])
    s.add_argument("--repeats", type=int, default=5)
    s.set_defaults(func=cmd_bench_attention, need_out=False)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of a small float64 model")
    s.add_argument("--size", type=int, default=16)
    s.add_argument("--batch", type=int, default=2)
    s.add_argument("--h", type=float, default=1e-6)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--max-entries", type=int, default=None, help="perturb at most this many entries per parameter")
    s.add_argument("--corrupt", default=None, metavar="PARAM", help="test hook: scale PARAM's analytic gradient")
    s.set_defaults(func=cmd_gradcheck, need_out=False)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        if args.need_out and not args.out:
            raise ConfigError(f"{args.command}: --out is required")
        return args.func(args)
    except PTNetError as e:
        print(f"ptnet {args.command}: error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"ptnet {args.command}: error: {e}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
