"""``deformcast`` command line. Every command prints a JSON report on stdout;
failures print ``{"error": ..., "message": ...}`` on stderr and exit nonzero."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import DeformcastError, InvalidArgumentError
from .mesh import load_mesh
from .shapes import SOFT_OBJECTS


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _fail({"error": "usage", "message": message}, 2)


def _fail(payload, code=1):
    print(json.dumps(payload), file=sys.stderr)
    sys.exit(code)


def _patch_size(text):
    if text.lower() == "none":
        return None
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"patch size must be an integer or 'none', got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("patch size must be >= 1")
    return value


def _objects(spec):
    """Names (comma separated, or "all") or a directory of OBJ/OFF meshes."""
    path = Path(spec)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in (".obj", ".off"))
        if not files:
            raise InvalidArgumentError(f"no .obj or .off meshes in {path}")
        return [(p.stem, load_mesh(p), 1.0, 0.02) for p in files]
    names = list(SOFT_OBJECTS) if spec == "all" else [s for s in spec.split(",") if s]
    unknown = [n for n in names if n not in SOFT_OBJECTS]
    if unknown:
        raise InvalidArgumentError(f"unknown objects {unknown}; known: {sorted(SOFT_OBJECTS)}")
    return names


def _write_report(report, path):
    text = json.dumps(report, indent=1, default=str)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")
    print(text)


def cmd_simulate(args):
    from .dataset import generate_dataset

    manifest = generate_dataset(_objects(args.objects), args.scenarios, args.seed, args.out,
                                workers=args.workers)
    _write_report({"out": args.out, "counts": manifest["counts"], "skipped": manifest["skipped"]}, None)


def cmd_train(args):
    from .train import TrainConfig, train

    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
                      lambda_g=args.lambda_g, patch_size=args.patch_size, seed=args.seed,
                      checkpoint_dir=args.out, lr_schedule=args.lr_schedule)
    results = train(cfg, args.data, scope=args.scope)
    _write_report({tag: {"final": str(r.final_checkpoint), "best": str(r.best_checkpoint),
                         "log": r.log, "skipped": r.skipped} for tag, r in results.items()}, None)


def cmd_eval(args):
    from .train import evaluate

    _write_report(evaluate(args.ckpt, args.data, args.split).as_dict(), args.report)


def cmd_ablate(args):
    from .train import TrainConfig, run_ablation

    cfg = TrainConfig(epochs=args.epochs, seed=args.seed, patch_size=args.patch_size,
                      checkpoint_dir=args.out)
    _write_report(run_ablation(args.data, cfg), args.report)


def cmd_predict(args):
    from .train import predict_files

    out = predict_files(args.rest, args.rigid, args.meta, args.ckpt, args.out)
    _write_report({"out": str(out)}, None)


def cmd_bench(args):
    from .train import bench

    _write_report(bench(args.ckpt, args.data, batches=args.batches, batch_size=args.batch), args.report)


def build_parser():
    p = _Parser(prog="deformcast", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="generate a contact dataset")
    s.add_argument("--objects", default="all", help="comma-separated names, 'all', or a mesh directory")
    s.add_argument("--scenarios", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="train per-object or all-object networks")
    t.add_argument("--data", required=True)
    t.add_argument("--scope", choices=("per-object", "all"), default="all")
    t.add_argument("--epochs", type=int, default=40)
    t.add_argument("--batch", type=int, default=4)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lambda-g", type=float, default=0.1)
    t.add_argument("--lr-schedule", choices=("constant", "cosine"), default="constant")
    t.add_argument("--patch-size", type=_patch_size, default=1024)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-object metrics on a split")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="compare the three encoding variants")
    a.add_argument("--data", required=True)
    a.add_argument("--epochs", type=int, default=10)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--patch-size", type=_patch_size, default=1024)
    a.add_argument("--out", help="optional checkpoint directory")
    a.add_argument("--report")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("predict", help="deform one mesh with a trained network")
    r.add_argument("--rest", required=True)
    r.add_argument("--rigid", required=True)
    r.add_argument("--meta", required=True)
    r.add_argument("--ckpt", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_predict)

    b = sub.add_parser("bench", help="data/network time per batch")
    b.add_argument("--ckpt", required=True)
    b.add_argument("--data", required=True)
    b.add_argument("--batches", type=int, default=20)
    b.add_argument("--batch", type=int, default=4)
    b.add_argument("--report")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except DeformcastError as exc:
        _fail(exc.to_dict())
    except FileNotFoundError as exc:
        _fail({"error": "not-found", "message": str(exc)})
    except OSError as exc:
        _fail({"error": "io-error", "message": str(exc), "path": getattr(exc, "filename", None)})
    return 0


if __name__ == "__main__":
    sys.exit(main())
