"""Command-line entry point.

Subcommands: make-toy, train, predict, eval, cosegment, serve.
Exit codes: 0 ok; 2 usage; 3 training divergence; 4 evaluation pair
universe mismatch; 5 bad input data; 6 bind failure.
"""

from __future__ import annotations

import argparse
import json
import os
import socket
import sys
from dataclasses import asdict
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3
EXIT_EVAL_MISMATCH = 4
EXIT_BAD_INPUT = 5
EXIT_BIND_FAILURE = 6

DATA_ROOT_ENV = "DOPPEL_DATA_ROOT"


def _resolve(path: str | None) -> Path | None:
    """Relative paths resolve under $DOPPEL_DATA_ROOT when it is set."""
    if path is None:
        return None
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def cmd_make_toy(args) -> int:
    from .toydata import make_toy_dataset

    try:
        manifest = make_toy_dataset(
            _resolve(args.out), args.scenes, args.seed, split=args.split
        )
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as e:
        print(f"write failure: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    n_pairs = sum(len(s.pairs) for s in manifest.scenes)
    print(f"wrote {len(manifest.scenes)} scenes, {n_pairs} pairs to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    import torch

    from .config import load_run_config
    from .manifest import complete_negative_pairs, load_manifest
    from .model import build_model, save_checkpoint
    from .trainer import DivergenceError, train
    from .types import DoppelError

    overrides = {
        "train": {
            "epochs": args.epochs,
            "learning_rate": args.lr,
            "seed": args.seed,
            "k_views": args.views,
        },
        "backbone": {"kind": args.backbone},
    }
    try:
        run = load_run_config(args.config, overrides)
        manifest = load_manifest(_resolve(args.data))
    except (OSError, ValueError, DoppelError) as e:
        print(f"bad input: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    completed = complete_negative_pairs(manifest, run.train.seed)
    if completed.uncompleted:
        print(
            f"warning: {len(completed.uncompleted)} anchors lack out-of-class "
            f"negatives", file=sys.stderr,
        )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(run.train.seed)
    model = build_model(run.backbone, run.encoder)
    try:
        state = train(
            completed.manifest, model, run.train, out_dir,
            resume_from=args.resume,
        )
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    save_checkpoint(out_dir / "model.pt", model, extra={"steps": state.step})
    (out_dir / "run_config.json").write_text(
        json.dumps(
            {
                "backbone": asdict(run.backbone),
                "encoder": asdict(run.encoder),
                "train": asdict(run.train),
                "thresholds": asdict(run.thresholds),
                "margins": asdict(run.margins),
            },
            indent=2,
        )
        + "\n"
    )
    final = state.history[-1][3] if state.history else float("nan")
    print(f"trained {state.step} steps; final loss {final:.4f}; model at "
          f"{out_dir / 'model.pt'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    import torch

    from .classifier import Thresholds
    from .manifest import load_manifest
    from .model import load_checkpoint
    from .pipeline import predict_manifest
    from .types import DoppelError

    torch.manual_seed(args.seed)
    try:
        model, _ = load_checkpoint(args.ckpt)
        manifest = load_manifest(_resolve(args.data))
    except (OSError, ValueError, DoppelError) as e:
        print(f"bad input: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    thresholds = Thresholds(args.t1, args.t2)
    written = predict_manifest(
        model, manifest, args.out, k=args.views, thresholds=thresholds
    )
    print(f"wrote {len(written)} prediction documents to {args.out}")
    return EXIT_OK


def _print_report(name: str, report) -> None:
    print(
        f"{name}: iou_id={report.iou_id:.4f} iou_sim={report.iou_sim:.4f} "
        f"iou_diff={report.iou_diff:.4f} overall={report.overall:.4f} "
        f"n_pairs={report.n_pairs}"
    )


def cmd_eval(args) -> int:
    from .evaluator import UniverseMismatchError
    from .manifest import load_manifest
    from .pipeline import evaluate_gt_instances, evaluate_with_overlaps
    from .types import DoppelError

    try:
        manifest = load_manifest(_resolve(args.data))
        if args.pred_instances:
            if not args.overlaps:
                print("error: --pred-instances requires --overlaps",
                      file=sys.stderr)
                return EXIT_USAGE
            overlaps_doc = json.loads(Path(args.overlaps).read_text())
            reports = evaluate_with_overlaps(
                manifest, args.pred, overlaps_doc,
                threshold=args.iou_threshold, per_scene=args.per_scene,
            )
        else:
            reports = evaluate_gt_instances(
                manifest, args.pred, per_scene=args.per_scene
            )
    except UniverseMismatchError as e:
        print(f"pair universe mismatch: {e}", file=sys.stderr)
        return EXIT_EVAL_MISMATCH
    except (OSError, ValueError, KeyError, DoppelError) as e:
        print(f"bad input: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    for name in sorted(k for k in reports if k != "aggregate"):
        _print_report(name, reports[name])
    _print_report("aggregate", reports["aggregate"])
    if args.out:
        Path(args.out).write_text(
            json.dumps(
                {name: r.as_dict() for name, r in reports.items()}, indent=2
            )
            + "\n"
        )
    return EXIT_OK


def cmd_cosegment(args) -> int:
    from .cosegment import (
        DegenerateGeometryError,
        LabeledPointCloud,
        icp_align,
        load_pointcloud,
        save_pointcloud_binary,
        save_pointcloud_txt,
        transfer_labels,
    )

    try:
        source = load_pointcloud(args.source)
        target = load_pointcloud(args.target)
        if source.labels is None:
            raise ValueError(f"{args.source}: source cloud carries no labels")
        transform, residual = icp_align(
            source, target, yaw_bins=args.yaw_bins,
            max_iters=args.max_iters, tol=args.tol,
        )
        labels = transfer_labels(source, target, transform, k=args.k)
    except (OSError, ValueError, DegenerateGeometryError) as e:
        print(f"bad input: {e}", file=sys.stderr)
        return EXIT_BAD_INPUT
    labeled = LabeledPointCloud(target.points, labels)
    out = Path(args.out)
    if out.suffix == ".bin":
        save_pointcloud_binary(labeled, out)
    else:
        save_pointcloud_txt(labeled, out)
    print(f"residual={residual:.6g}; labeled target written to {out}")
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .server import create_app, load_review_predictions

    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((args.host, args.port))
    except OSError as e:
        print(f"cannot bind {args.host}:{args.port}: {e}", file=sys.stderr)
        return EXIT_BIND_FAILURE
    finally:
        probe.close()
    review = (
        load_review_predictions(args.review) if args.review else None
    )
    app = create_app(
        _resolve(args.data), args.log, review_predictions=review,
        ui_dir=args.ui,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="doppel",
        description="Lookalike object detection toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-toy", help="generate a synthetic toy dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "val"), default="train")
    p.set_defaults(func=cmd_make_toy)

    p = sub.add_parser("train", help="train a pair scorer")
    p.add_argument("--config", help="run configuration JSON")
    p.add_argument("--data", required=True, help="train manifest path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--backbone", choices=("toy", "foundation"), default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--views", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="score all intra-class pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--views", type=int, default=5)
    p.add_argument("--t1", type=float, default=0.33)
    p.add_argument("--t2", type=float, default=0.66)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="pair IoU against manifest labels")
    p.add_argument("--data", required=True, help="manifest with GT labels")
    p.add_argument("--pred", required=True, help="prediction documents dir")
    p.add_argument("--pred-instances", action="store_true",
                   help="use the predicted-instance protocol")
    p.add_argument("--overlaps", help="pred/gt instance overlap matrix JSON")
    p.add_argument("--iou-threshold", type=float, default=0.5)
    p.add_argument("--per-scene", action="store_true")
    p.add_argument("--out", help="write the report JSON here")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cosegment", help="transfer part labels between clouds")
    p.add_argument("--source", required=True, help="labeled source cloud")
    p.add_argument("--target", required=True, help="unlabeled target cloud")
    p.add_argument("--out", required=True, help="labeled target output")
    p.add_argument("--yaw-bins", type=int, default=8)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--max-iters", type=int, default=50)
    p.add_argument("--tol", type=float, default=1e-7)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_cosegment)

    p = sub.add_parser("serve", help="run the annotation service")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--log", required=True, help="annotation event log path")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8080)
    p.add_argument("--review", help="prediction dir for review ordering")
    p.add_argument("--ui", help="static frontend directory to serve at /")
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
