"""``pstconv`` command-line entry point.

Subcommands: generate, train, eval, predict, gradcheck, inspect. Exit codes
are 0 on success, 1 on validation or parse errors and 2 when training hits a
non-finite value. ``PSTCONV_THREADS`` caps the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, nn
from .checks import DEFAULT_TOL, gradient_suite
from .data import (SUBSETS, ParseError, generate_classification_set, generate_segmentation_set, load_digit_pools,
                   load_digit_images, load_split, read_manifest, read_sequence, write_manifest,
                   write_sequence, N_MOTIONS, SEQ_LEN, VELOCITIES)
from .net import (NetConfig, PSTNet, build_classification_net, build_segmentation_net, evaluate_sequence,
                  load_checkpoint, load_velocity)
from .train import NumericalError, evaluate, fit
from .tube import TubeSpec, build_tube

log = logging.getLogger("pstconv")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

# name -> (builder, default base radius, reduced widths or None for the full-size defaults)
PRESETS = {
    "cls": (build_classification_net, 2.0, None),
    "cls-small": (build_classification_net, 2.0, (32, 64, 64, 128, 128, 128)),
    "seg": (build_segmentation_net, 3.0, None),
    "seg-small": (build_segmentation_net, 3.0, (32, 64, 64, 128, 128, 64, 64, 32)),
}
SEG_SMALL_K = 16

# a small worked tube: 5 x 8 frames encoded to 3 x 2
EXAMPLE_TUBE = {"l": 3, "s_t": 2, "p": [1, 1], "s_s": 4, "r": 1.0, "K": 3}


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; 2 is reserved for numerical failures here."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def resolve_config(source: str, num_classes: int | None = None, base_radius: float | None = None) -> NetConfig:
    """A preset name or a NetConfig JSON file."""
    if source in PRESETS:
        builder, radius, widths = PRESETS[source]
        if num_classes is None:
            raise ValueError(f"preset {source!r} needs the number of classes (take it from --data)")
        kw = {} if widths is None else {"widths": widths}
        if source == "seg-small":
            kw["K"] = SEG_SMALL_K
        return builder(num_classes, base_radius or radius, **kw)
    path = Path(source)
    if not path.is_file():
        raise ValueError(f"{source!r} is neither a preset ({', '.join(PRESETS)}) nor a config file")
    try:
        return NetConfig.from_json(path)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: invalid network config ({exc})") from exc


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: cannot read JSON ({exc})") from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    out = Path(args.out)
    train_seed, test_seed = (int(s) for s in np.random.SeedSequence(args.seed).generate_state(2))
    digits = None
    if args.digits != "builtin":
        if args.task == "cls":
            digits = load_digit_images(args.digits, seed=args.seed)
        elif args.digit_labels is None:
            raise ValueError("--task seg with an IDX image file also needs --digit-labels")
        else:
            digits = load_digit_pools(args.digits, args.digit_labels, seed=args.seed)
    test_count = args.test_count if args.test_count is not None else max(1, args.count // 4)
    if args.task == "cls":
        make = lambda n, s: generate_classification_set(n, s, args.subset, digits)  # noqa: E731
        num_classes = N_MOTIONS if args.subset == "full" else len(VELOCITIES)
    else:
        make = lambda n, s: generate_segmentation_set(n, s, digits, args.frames)  # noqa: E731
        num_classes = 2
    records = []
    for split, n, seed in (("train", args.count, train_seed), ("test", test_count, test_seed)):
        (out / split).mkdir(parents=True, exist_ok=True)
        for i, seq in enumerate(make(n, seed)):
            rel = f"{split}/{i:05d}.pcsq"
            write_sequence(out / rel, seq)
            records.append({"path": rel, "split": split, "label": int(seq.label)})
    meta = {"task": "classification" if args.task == "cls" else "segmentation", "num_classes": num_classes,
            "subset": args.subset if args.task == "cls" else None, "seed": args.seed,
            "digits": str(args.digits)}
    write_manifest(out, records, meta)
    print(f"wrote {len(records)} sequences to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = read_manifest(args.data)
    meta = manifest.get("meta", {})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    start_epoch, best = 0, -math.inf
    sgd = nn.SGDState(lr=args.lr, momentum_coeff=args.momentum, decay_epochs=list(args.decay_epochs))
    if args.resume:
        model, extra = load_checkpoint(args.resume)
        sgd.velocity = load_velocity(args.resume)
        start_epoch = int(extra.get("epoch", -1)) + 1
        best_path = out / "best.ckpt"
        if best_path.exists():
            best = float(load_checkpoint(best_path)[1].get("metric", -math.inf))
    else:
        config = resolve_config(args.config, meta.get("num_classes"), args.base_radius)
        model = PSTNet(config, seed=args.seed)
    config = model.config
    if meta.get("task") and meta["task"] != config.task:
        raise ValueError(f"dataset is for {meta['task']} but the network is a {config.task} net")
    train_set = load_split(manifest, "train")
    test_set = load_split(manifest, "test")
    if not train_set:
        raise ValueError(f"{args.data}: no training sequences")
    config.shapes(args.clip_len or train_set[0].L, train_set[0].N)
    config.to_json(out / "config.json")
    run = {"config": args.config, "resume": args.resume, "data": str(args.data), "seed": args.seed,
           "epochs": args.epochs, "start_epoch": start_epoch, "batch_size": args.batch, "out": str(out),
           "metrics": "metrics.csv", "lr": args.lr, "momentum": args.momentum,
           "decay_epochs": list(args.decay_epochs), "clip_len": args.clip_len, "frame_stride": args.frame_stride,
           "version": __version__}
    (out / "run.json").write_text(json.dumps(run, indent=2))
    history = fit(model, train_set, test_set, args.epochs, args.batch, args.seed, sgd, args.clip_len,
                  args.frame_stride, out, start_epoch, best_metric=best)
    last = [h for h in history if h.split == "test"]
    if last:
        print(f"final test metric {last[-1].metric:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    sequences = _load_sequences(args.data, args.split)
    res = evaluate(model, sequences, args.clip_len, args.frame_stride)
    res.pop("predictions", None)
    print(json.dumps(res))
    return EXIT_OK


def _load_sequences(path, split):
    p = Path(path)
    if p.is_file() and p.suffix == ".pcsq":
        return [read_sequence(p)]
    return load_split(read_manifest(p), split)


def cmd_predict(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    sequences = _load_sequences(args.data, args.split)
    results = []
    for i, seq in enumerate(sequences):
        if model.config.task == "classification":
            cls, probs = evaluate_sequence(model, seq.coords, seq.feats, args.clip_len, args.frame_stride)
            results.append({"index": i, "class": cls, "confidence": float(probs[cls])})
        else:
            probs = model.predict_proba(seq.coords, seq.feats)
            results.append({"index": i, "labels": np.argmax(probs, axis=-1).tolist()})
    text = json.dumps(results)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = None
    if args.config:
        config = resolve_config(args.config, args.num_classes)
    reports = gradient_suite(args.seed, args.tol, config, args.L, args.N)
    for r in reports:
        print(r)
    failed = [r for r in reports if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(reports)} checks failed: {', '.join(r.name for r in failed)}")
        return EXIT_INVALID
    print(f"all {len(reports)} checks passed")
    return EXIT_OK


def _tube_table(spec: TubeSpec, L: int, N: int, seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    tube = build_tube(rng.uniform(size=(L, N, 3)), spec)
    Lp, Np = tube.shape
    padded = int((~tube.slice_valid).sum())
    valid = tube.slice_valid[:, :, None]
    n_clamped = int((tube.clamped & valid).sum())
    return [
        f"input   L={L} N={N}",
        f"output  L'={Lp} N'={Np}",
        f"anchor frames {tube.anchor_frames.tolist()}",
        f"window offsets {spec.offsets.tolist()}, padded slots {padded} of {tube.slice_valid.size}",
        f"neighborhoods with no point in radius (uniform unit-cube cloud): {n_clamped} of {int(valid.sum()) * Np}",
    ]


def cmd_inspect(args) -> int:
    if args.config == "example-tube":
        doc = dict(EXAMPLE_TUBE)
    elif args.config in PRESETS:
        doc = resolve_config(args.config, args.num_classes).to_dict()
    else:
        doc = _load_json(args.config)
    if "layers" not in doc:
        spec = TubeSpec.from_dict(doc)
        print("\n".join(_tube_table(spec, args.L, args.N, args.seed)))
        return EXIT_OK
    config = NetConfig.from_dict(doc)
    rows = config.shapes(args.L, args.N)
    print(f"{'layer':<14}{'kind':<10}{'L':>6}{'N':>8}{'C':>8}")
    print(f"{'input':<14}{'':<10}{args.L:>6}{args.N:>8}{config.in_channels:>8}")
    for row in rows:
        print(f"{row['name']:<14}{row['kind']:<10}{row['L']:>6}{row['N']:>8}{row['C']:>8}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pstconv", description="Point spatio-temporal convolution toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic moving-digit dataset")
    g.add_argument("--task", choices=["cls", "seg"], required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True, help="training sequences")
    g.add_argument("--test-count", type=int, default=None, help="test sequences (default count // 4)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--digits", default="builtin", help="IDX image file or 'builtin'")
    g.add_argument("--frames", type=int, default=SEQ_LEN, help="frames per segmentation sequence")
    g.add_argument("--digit-labels", default=None,
                   help="IDX label file matching --digits (seg task: digit A is a 0, digit B a 1)")
    g.add_argument("--subset", choices=SUBSETS, default="full", help="classification label set")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a network on a generated dataset")
    t.add_argument("--config", default="cls-small", help=f"config JSON or preset ({', '.join(PRESETS)})")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=35)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--decay-epochs", type=int, nargs="*", default=[10, 20])
    t.add_argument("--base-radius", type=float, default=None, help="override the preset radius")
    t.add_argument("--clip-len", type=int, default=None)
    t.add_argument("--frame-stride", type=int, default=1)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    for name, func, help_text in (("eval", cmd_eval, "score a checkpoint"),
                                  ("predict", cmd_predict, "run inference with a checkpoint")):
        e = sub.add_parser(name, help=help_text)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True, help="dataset directory or a single .pcsq file")
        e.add_argument("--split", default="test")
        e.add_argument("--clip-len", type=int, default=None)
        e.add_argument("--frame-stride", type=int, default=1)
        if name == "predict":
            e.add_argument("--out", default=None, help="write JSON here instead of stdout")
        e.set_defaults(func=func)

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and a micro-net")
    c.add_argument("--config", default=None, help="net config JSON or preset replacing the micro-nets")
    c.add_argument("--num-classes", type=int, default=2)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tol", type=float, default=DEFAULT_TOL)
    c.add_argument("--L", type=int, default=4)
    c.add_argument("--N", type=int, default=8)
    c.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("inspect", help="print shapes for a tube spec or network config")
    s.add_argument("--config", required=True, help="TubeSpec JSON, NetConfig JSON, a preset, or 'example-tube'")
    s.add_argument("--L", type=int, required=True)
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--num-classes", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("PSTCONV_THREADS")
    try:
        limit = int(threads) if threads else None
        if limit is not None and limit < 1:
            raise ValueError
    except ValueError:
        print(f"error: PSTCONV_THREADS must be a positive integer, got {threads!r}", file=sys.stderr)
        return EXIT_INVALID
    try:
        with threadpool_limits(limits=limit):
            return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
