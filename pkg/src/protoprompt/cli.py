"""Command line entry point: gen-data, train, eval, gradcheck, export-sim."""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

from . import data
from .config import config_values, load_config, serialize_config
from .errors import DataIOError, NumericError, ProtoPromptError

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERIC = 2
EXIT_GRADCHECK = 3


class Logger:
    def __init__(self, deterministic: bool):
        self.deterministic = deterministic
        self.started = time.perf_counter()

    def __call__(self, message: str):
        if not self.deterministic:
            message = f"[{time.perf_counter() - self.started:8.2f}s] {message}"
        print(message, flush=True)


def _resolve(base: Path, value: str) -> str:
    if not value:
        return value
    p = Path(value)
    return str(p if p.is_absolute() else base / p)


def _load(path):
    synth, train = load_config(path)
    base = Path(path).resolve().parent
    train.train_manifest = _resolve(base, train.train_manifest)
    train.eval_manifest = _resolve(base, train.eval_manifest)
    train.out_dir = _resolve(base, train.out_dir)
    return synth, train


def cmd_gen_data(args, log) -> int:
    synth, _ = _load(args.config)
    out = Path(args.out)
    manifests = data.gen_synthetic(synth, out)
    total = sum(f.stat().st_size for f in out.rglob("*") if f.is_file())
    log(
        f"gen-data: {synth.samples} train + {synth.eval_samples} eval samples, "
        f"{synth.num_classes} classes, {total} bytes -> {', '.join(str(p) for p in manifests.values())}"
    )
    return EXIT_OK


def cmd_train(args, log) -> int:
    from .model import save_checkpoint
    from .trainer import fit

    synth, train = _load(args.config)
    if args.out_dir:
        train.out_dir = args.out_dir
    if not train.out_dir:
        raise DataIOError("config needs out_dir (or pass --out-dir)")
    out = Path(train.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def on_step(step, b, _elapsed):
        log(f"step {step} dice={b.dice:.6f} pcl={b.pcl:.6f} total={b.total:.6f}")

    state, history = fit(train, log=on_step)
    ckpt = out / "checkpoint.ssck"
    save_checkpoint(state, ckpt)
    (out / "checkpoint.config.txt").write_text(serialize_config(config_values(synth, train)), encoding="utf-8")
    (out / "history.csv").write_text(history.to_csv(include_time=not args.deterministic_logs), encoding="utf-8")
    log(f"train: {len(history)} steps -> {ckpt}")
    return EXIT_OK


def cmd_eval(args, log) -> int:
    from .metrics import evaluate
    from .model import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    samples = data.load_dataset(args.manifest, state.num_classes)
    report = evaluate(state, samples)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv(), encoding="utf-8")
    log(
        f"eval: {len(report.pairs)} pairs challenge_iou={report.challenge_iou:.6f} "
        f"iou={report.iou:.6f} mc_iou={report.mc_iou:.6f} -> {out}"
    )
    return EXIT_OK


def cmd_gradcheck(args, log) -> int:
    from . import gradcheck

    try:
        scale = gradcheck.parse_scale(args.scale)
    except ValueError as exc:
        print(f"gradcheck: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.inject_wrong_gradient:
        with gradcheck.wrong_relu_gradient():
            report = gradcheck.full_model_gradcheck(args.seed, scale, eps=args.eps)
    else:
        report = gradcheck.full_model_gradcheck(args.seed, scale, eps=args.eps)
    for group, err in report.errors.items():
        log(f"gradcheck {group}: max_rel_err={err:.3e}")
    log(f"gradcheck frozen (polarity): max_abs_grad={report.frozen_grad_max:.3e}")
    if report.passed:
        log("gradcheck: pass")
        return EXIT_OK
    bad = report.failing + (["polarity"] if report.frozen_grad_max != 0.0 else [])
    print(f"gradcheck failed for: {', '.join(bad)} (tol {report.tol:g})", file=sys.stderr)
    return EXIT_GRADCHECK


def cmd_export_sim(args, log) -> int:
    from .encoder import compute_similarity, export_similarity_map
    from .errors import ClassError
    from .model import load_checkpoint

    state = load_checkpoint(args.checkpoint)
    if not 1 <= args.class_id <= state.num_classes:
        raise ClassError(f"class id {args.class_id} outside 1..{state.num_classes}")
    samples = data.load_dataset(args.manifest, state.num_classes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for s in samples:
        sim = compute_similarity(s.embedding, state.prototypes)
        norm = export_similarity_map(sim, args.class_id)
        data.write_grid(out / f"{s.sample_id}.grid", norm)
        data.write_pgm(out / f"{s.sample_id}.pgm", norm)
    log(f"export-sim: class {args.class_id}, {len(samples)} samples -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="protoprompt", description=__doc__)
    parser.add_argument("--deterministic-logs", action="store_true", help="omit timestamps from stdout")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset and manifests")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", default="", help="overrides out_dir from the config")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", default="", help="e.g. h=4,w=4,d=8,C=2,n=2,r=8,L=1")
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--inject-wrong-gradient", action="store_true", help="negative control: corrupt ReLU backward")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-sim", help="export normalized similarity maps for one class")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--class-id", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_sim)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    log = Logger(args.deterministic_logs)
    try:
        return args.func(args, log)
    except NumericError as exc:
        print(f"{args.command}: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ProtoPromptError as exc:
        print(f"{args.command}: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"{args.command}: io-error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
