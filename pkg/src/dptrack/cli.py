"""Command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 verification failure,
3 I/O or file-format error. ``DPT_THREADS`` caps the BLAS thread pool.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("dptrack")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _echo_config(path: Path, cfg, args: argparse.Namespace) -> None:
    """Write the effective run config next to an artifact."""
    doc = {"command": args.command, "argv": sys.argv[1:], "config": cfg.to_dict()}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _run_config(args):
    from .config import RunConfig

    cfg = RunConfig.load(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.apply_seed(args.seed)
    return cfg


def _parse_box(text: str):
    from .geometry import BBox

    try:
        x, y, w, h = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--init expects x,y,w,h, got {text!r}") from None
    return BBox(x, y, w, h)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------
def cmd_gen(args) -> int:
    from .data import gen_dataset, write_dataset

    cfg = _run_config(args)
    k = args.seqs if args.seqs is not None else cfg.dataset.n_sequences
    if k < 1:
        raise UsageError("--seqs must be >= 1")
    out = Path(args.out)
    dirs = write_dataset(out, gen_dataset(cfg.scene, k))
    _echo_config(out / "run.json", cfg, args)
    print(f"wrote {len(dirs)} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .data import read_dataset
    from .training import train

    cfg = _run_config(args)
    if args.steps is not None:
        cfg.tracker.steps = args.steps
        cfg.tracker.validate()
    seqs = read_dataset(args.data)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tracker, tlog = train(cfg.tracker, seqs)
    save_checkpoint(out, tracker)
    loss_path = Path(args.log) if args.log else out.with_name(out.name + ".loss.csv")
    tlog.write_csv(loss_path)
    _echo_config(out.with_name(out.name + ".run.json"), cfg, args)
    print(f"trained {cfg.tracker.steps} steps in {tlog.seconds:.1f}s; checkpoint {out}, loss log {loss_path}")
    return EXIT_OK


def cmd_track(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import read_sequence, save_annotations, sequence_dirs
    from .inference import track_sequence

    cfg = _run_config(args)
    tracker = load_checkpoint(args.ckpt)
    use_prompts = not args.no_prompts
    out = Path(args.out)
    if args.data:
        if args.init:
            raise UsageError("--init applies to a single --seq, not a whole --data root")
        out.mkdir(parents=True, exist_ok=True)
        for d in sequence_dirs(args.data):
            seq = read_sequence(d)
            save_annotations(out / f"{d.name}.jsonl",
                             track_sequence(tracker, seq.frames, seq.annotations[0], use_prompts))
        _echo_config(out / "run.json", cfg, args)
        print(f"wrote predictions for {len(sequence_dirs(args.data))} sequences to {out}")
        return EXIT_OK
    seq = read_sequence(args.seq, require_gt=args.init is None)
    init = _parse_box(args.init) if args.init else seq.annotations[0]
    boxes = track_sequence(tracker, seq.frames, init, use_prompts)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_annotations(out, boxes)
    _echo_config(out.with_name(out.name + ".run.json"), cfg, args)
    print(f"tracked {len(boxes)} frames; predictions in {out}")
    return EXIT_OK


def _pairs_from_files(pred: Path, gt: Path):
    from .data import load_annotations, sequence_dirs

    if pred.is_file() and gt.is_file():
        return {gt.parent.name or "seq": (load_annotations(pred), load_annotations(gt))}
    if pred.is_dir() and gt.is_dir():
        pairs = {}
        for d in sequence_dirs(gt):
            p = pred / f"{d.name}.jsonl"
            if not p.exists():
                raise FileNotFoundError(f"no predictions {p} for ground truth {d}")
            pairs[d.name] = (load_annotations(p), load_annotations(d / "gt.jsonl"))
        return pairs
    raise UsageError("--pred and --gt must both be files or both be directories")


def cmd_eval(args) -> int:
    from .evaluation import MetricReport, aggregate, run_ope, write_curves_csv, write_report_json

    cfg = _run_config(args)
    if args.pred or args.gt:
        if not (args.pred and args.gt) or args.ckpt or args.data:
            raise UsageError("use either --pred with --gt, or --ckpt with --data")
        per_seq = {name: MetricReport.from_trajectories(p, g)
                   for name, (p, g) in _pairs_from_files(Path(args.pred), Path(args.gt)).items()}
        agg = aggregate(list(per_seq.values()))
    else:
        if not (args.ckpt and args.data):
            raise UsageError("use either --pred with --gt, or --ckpt with --data")
        from .checkpoint import load_checkpoint
        from .data import read_dataset

        per_seq, agg, _ = run_ope(load_checkpoint(args.ckpt), read_dataset(args.data),
                                  use_prompts=not args.no_prompts, workers=args.workers)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        write_report_json(out, per_seq, agg)
        _echo_config(out.with_name(out.name + ".run.json"), cfg, args)
    if args.curves:
        write_curves_csv(args.curves, per_seq, agg)
    summary = {"aggregate": agg.summary(), "sequences": {k: v.summary() for k, v in per_seq.items()}}
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuites import SUITES, run_suite

    scopes = sorted(SUITES) if args.scope == "all" else [args.scope]
    seed = args.seed if args.seed is not None else 0
    ok = True
    for scope in scopes:
        print(f"[{scope}]")
        results = run_suite(scope, seed=seed, report=print)
        ok &= all(r.passed for r in results)
    print("all gradient checks passed" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_pyramid(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint
    from .data import read_ppm, write_ppm
    from .model import Tracker
    from .tensor import Tensor, no_grad

    cfg = _run_config(args)
    tracker = load_checkpoint(args.ckpt) if args.ckpt else Tracker(cfg.tracker)
    prompter = tracker.backbone.illum_prompter
    image = read_ppm(args.image)
    dtype = prompter.levels[0].blur.dtype
    with no_grad():
        levels = prompter.pyramid(Tensor(image.astype(dtype)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"source": str(args.image), "weights": args.ckpt or "init", "gaussians": [], "laplacians": []}
    for i, g in enumerate(levels.gaussians):
        arr = g.data[0].astype(np.float64)
        name = f"gaussian_{i}.ppm"
        write_ppm(out / name, np.clip(arr, 0.0, 1.0))
        meta["gaussians"].append({"file": name, "shape": list(arr.shape), "min": float(arr.min()),
                                  "max": float(arr.max())})
    for i, lap in enumerate(levels.laplacians):
        arr = lap.data[0].astype(np.float64)
        lo, hi = float(arr.min()), float(arr.max())
        scaled = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
        name = f"laplacian_{i}.ppm"
        write_ppm(out / name, scaled)
        meta["laplacians"].append({"file": name, "shape": list(arr.shape), "min": lo, "max": hi})
    (out / "levels.json").write_text(json.dumps(meta, indent=2))
    _echo_config(out / "run.json", cfg, args)
    print(f"wrote {len(levels.gaussians)} gaussian and {len(levels.laplacians)} laplacian levels to {out}")
    return EXIT_OK


def cmd_defaults(args) -> int:
    from .config import RunConfig

    text = RunConfig().dumps()
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="dptrack", formatter_class=fmt,
                     description="Prompted low-light tracker: synthetic data, training, tracking, evaluation and gradient checks.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, seed=True):
        p.add_argument("--config", default=None, help="run config JSON; omitted fields use defaults")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="override the config seed")

    p = sub.add_parser("gen", formatter_class=fmt, help="write synthetic sequences")
    common(p)
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--seqs", type=int, default=None, help="number of sequences (default: dataset.n_sequences)")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", formatter_class=fmt, help="train a tracker on a dataset")
    common(p)
    p.add_argument("--data", required=True, help="dataset root with seq_<k> directories")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--steps", type=int, default=None, help="override tracker.steps")
    p.add_argument("--log", default=None, help="loss CSV path (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", formatter_class=fmt, help="track one sequence or every sequence of a dataset")
    common(p)
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--seq", default=None, help="sequence directory")
    src.add_argument("--data", default=None, help="dataset root; writes <out>/seq_<k>.jsonl")
    p.add_argument("--out", required=True, help="predictions JSONL (or directory with --data)")
    p.add_argument("--init", default=None, help="initial box x,y,w,h (default: first gt.jsonl entry)")
    p.add_argument("--no-prompts", action="store_true", help="run the prompt-free backbone")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", formatter_class=fmt, help="one-pass evaluation metrics")
    common(p)
    p.add_argument("--pred", default=None, help="predictions JSONL, or a directory of seq_<k>.jsonl")
    p.add_argument("--gt", default=None, help="ground-truth JSONL, or a dataset root")
    p.add_argument("--ckpt", default=None, help="checkpoint to run before scoring")
    p.add_argument("--data", default=None, help="dataset root to track with --ckpt")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--curves", default=None, help="precision/success curve CSV path")
    p.add_argument("--workers", type=int, default=1, help="sequences tracked concurrently")
    p.add_argument("--no-prompts", action="store_true", help="run the prompt-free backbone")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", formatter_class=fmt, help="finite-difference gradient suites")
    p.add_argument("--scope", choices=["ops", "prompters", "block", "model", "all"], default="ops",
                   help="which suite to run")
    p.add_argument("--seed", type=int, default=None, help="instance seed (default 0)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pyramid", formatter_class=fmt, help="dump Gaussian/Laplacian levels as PPM")
    common(p, seed=True)
    w = p.add_mutually_exclusive_group(required=True)
    w.add_argument("--ckpt", default=None, help="use the prompter of this checkpoint")
    w.add_argument("--init", action="store_true", help="use freshly initialised prompter weights")
    p.add_argument("--image", required=True, help="input PPM; sides divisible by 2**n_pyramid_levels")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_pyramid)

    p = sub.add_parser("defaults", formatter_class=fmt, help="print the default run config")
    p.add_argument("--out", default=None, help="write to this path instead of stdout")
    p.set_defaults(func=cmd_defaults)
    return parser


def _limit_threads():
    value = os.environ.get("DPT_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"DPT_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"DPT_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .checkpoint import CheckpointError
    from .data import DataFormatError

    try:
        limiter = _limit_threads()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (DataFormatError, CheckpointError, OSError) as exc:
        print(f"dptrack {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ValueError) as exc:
        print(f"dptrack {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
