"""Command-line entry point: split, train, evaluate, predict, import-weights.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime/divergence error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import checkpoint
from .data import (
    CLASS_NAMES,
    ImageFileDataset,
    SplitManifest,
    atomic_write_text,
    make_batches,
    parse_labels,
    stratified_split,
)
from .errors import ContractError, DataError, LeafnetError, ShapeError
from .imaging import IMAGENET_MEAN, IMAGENET_STD, AugmentConfig, load_image, normalize
from .metrics import report, roc_to_csv
from .nn import build_resnet34, build_toy_resnet
from .tensor import Tensor, no_grad
from .train import TrainConfig, evaluate, fine_tune, fit

logger = logging.getLogger("leafnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def class_names_for(num_classes: int) -> List[str]:
    if num_classes == len(CLASS_NAMES):
        return list(CLASS_NAMES)
    return [f"class{i}" for i in range(num_classes)]


def _require_file(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"file not found: {path}")
    return path


def _build(arch: str, num_classes: int, seed: int):
    if arch == "resnet34":
        return build_resnet34(num_classes, seed=seed)
    if arch == "toy":
        return build_toy_resnet(num_classes, seed=seed)
    raise UsageError(f"unknown architecture {arch!r}")


def _log_config(command: str, args: argparse.Namespace) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    logger.info("resolved config for %s: %s", command, json.dumps(resolved, sort_keys=True, default=str))


# split


def cmd_split(args) -> int:
    records = parse_labels(_require_file(args.labels))
    manifest = stratified_split(records, args.fraction, args.seed)
    manifest.save(args.out)
    counts = ", ".join(f"{n} {manifest.test_counts[n]}/{manifest.test_counts[n] + manifest.train_counts[n]}"
                       for n in sorted(manifest.test_counts))
    print(f"wrote {args.out}: {len(manifest.train)} train, {len(manifest.test)} test ({counts})")
    return EXIT_OK


# train


def _datasets(args):
    records = parse_labels(_require_file(args.labels), image_dir=args.images)
    manifest = SplitManifest.load(_require_file(args.manifest))
    train = ImageFileDataset.from_manifest(records, manifest, "train", args.resolution)
    test = ImageFileDataset.from_manifest(records, manifest, "test", args.resolution)
    return train, test


def _train_config(args) -> TrainConfig:
    augment = AugmentConfig.identity() if args.no_augment else AugmentConfig()
    return TrainConfig(
        batch_size=args.batch_size,
        max_lr=args.max_lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        seed=args.seed,
        augment=augment,
        mean=tuple(args.mean),
        std=tuple(args.std),
        prefetch=args.prefetch,
    )


def cmd_train(args) -> int:
    if bool(args.pretrained) == bool(args.from_scratch):
        raise UsageError("pass exactly one of --pretrained CHECKPOINT or --from-scratch")
    train_ds, test_ds = _datasets(args)
    model = _build(args.arch, args.num_classes, args.seed)
    config = _train_config(args)
    if args.pretrained:
        summary = checkpoint.import_pretrained(_require_file(args.pretrained), model)
        logger.info("pretrained import: %s", summary.to_text())
        result = fine_tune(model, train_ds, test_ds, args.phase1_epochs, args.phase2_epochs, config)
    else:
        result = fit(model, train_ds, test_ds, args.phase1_epochs + args.phase2_epochs, config)
    checkpoint.save(model, args.out_checkpoint)
    atomic_write_text(args.report, result.to_csv())
    print(f"wrote {args.out_checkpoint} and {args.report}; final test accuracy {result.final_accuracy:.3f}")
    return EXIT_OK


# evaluate


def _read_scores(path):
    with open(_require_file(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["image_id", "label"] or len(rows[0]) < 4:
        raise DataError(f"{path}: expected header image_id,label,<class>,<class>,...")
    names = rows[0][2:]
    ids, labels, scores = [], [], []
    for line_no, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(rows[0]) or row[1] not in names:
            raise DataError(f"{path}: malformed row {line_no}")
        ids.append(row[0])
        labels.append(names.index(row[1]))
        scores.append([float(v) for v in row[2:]])
    if not ids:
        raise DataError(f"{path}: no score rows")
    return ids, np.array(labels), np.array(scores), names


def _scores_csv(ids, labels, scores, names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "label"] + list(names))
    for i, y, s in zip(ids, labels, scores):
        w.writerow([i, names[int(y)]] + [repr(float(v)) for v in s])
    return buf.getvalue()


def cmd_evaluate(args) -> int:
    if args.scores:
        ids, labels, scores, names = _read_scores(args.scores)
    else:
        missing = [f for f in ("checkpoint", "images", "labels", "manifest") if getattr(args, f) is None]
        if missing:
            raise UsageError("evaluate needs --scores or all of --checkpoint --images --labels --manifest")
        model = checkpoint.load_model(_require_file(args.checkpoint))
        _, test_ds = _datasets(args)
        names = class_names_for(model.num_classes)
        spec = TrainConfig(batch_size=args.batch_size, mean=tuple(args.mean), std=tuple(args.std)).batch_spec(False)
        result = evaluate(model, make_batches(test_ds, spec))
        ids, labels, scores = test_ds.ids, result.labels, result.scores
    rep = report(scores, labels, len(names), names)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "metrics.txt", rep.to_text())
    atomic_write_text(out / "metrics.csv", rep.to_csv())
    atomic_write_text(out / "scores.csv", _scores_csv(ids, labels, scores, names))
    for name, curve in zip(names, rep.curves):
        if curve is not None:
            atomic_write_text(out / f"roc_{name}.csv", roc_to_csv(curve))
    sys.stdout.write(rep.to_text())
    return EXIT_OK


# predict


def cmd_predict(args) -> int:
    model = checkpoint.load_model(_require_file(args.checkpoint))
    model.eval()
    names = class_names_for(model.num_classes)
    for path in args.images:
        img = load_image(_require_file(path), args.resolution)
        x = normalize(img, args.mean, args.std).data[None]
        with no_grad():
            probs = model.predict_proba(Tensor(x)).data[0].astype(np.float64)
        best = int(probs.argmax())
        print("\t".join([str(path), names[best]] + [f"{p:.6f}" for p in probs]))
    return EXIT_OK


# import-weights


def cmd_import_weights(args) -> int:
    model = _build(args.arch, args.num_classes, args.seed)
    name_map = checkpoint.NameMap.load(_require_file(args.namemap)) if args.namemap else None
    summary = checkpoint.import_pretrained(_require_file(args.dump), model, name_map, strict=not args.relaxed)
    checkpoint.save(model, args.out)
    print(summary.to_text())
    print(f"wrote {args.out}")
    return EXIT_OK


# parser


def _add_model_flags(p):
    p.add_argument("--arch", choices=("resnet34", "toy"), default="resnet34")
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0, help="seed for initialisation, shuffling and augmentation")


def _add_norm_flags(p):
    p.add_argument("--mean", type=float, nargs=3, default=list(IMAGENET_MEAN), metavar=("R", "G", "B"))
    p.add_argument("--std", type=float, nargs=3, default=list(IMAGENET_STD), metavar=("R", "G", "B"))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="leafnet", description="Leaf-disease classification pipeline.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("split", help="write a stratified train/test manifest")
    p.add_argument("--labels", required=True, help="one-hot label CSV")
    p.add_argument("--fraction", type=float, default=0.2, help="test fraction (default 0.2)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="fine-tune (or train from scratch) and write a checkpoint")
    p.add_argument("--config", help="JSON file of flag defaults; explicit flags win")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--report", required=True, help="per-epoch CSV report")
    p.add_argument("--pretrained", help="checkpoint whose backbone is imported before fine-tuning")
    p.add_argument("--from-scratch", action="store_true")
    p.add_argument("--phase1-epochs", type=int, default=1, help="head-only epochs")
    p.add_argument("--phase2-epochs", type=int, default=4, help="full-network epochs")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--max-lr", type=float, default=1e-2)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=1e-2)
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--prefetch", type=int, default=2, help="batches prepared ahead (0 disables)")
    _add_model_flags(p)
    _add_norm_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="accuracy, confusion matrix, ROC curves and AUC")
    p.add_argument("--scores", help="precomputed scores CSV instead of a model")
    p.add_argument("--checkpoint")
    p.add_argument("--images")
    p.add_argument("--labels")
    p.add_argument("--manifest")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--resolution", type=int, default=224)
    _add_norm_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="classify image files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--resolution", type=int, default=224)
    _add_norm_flags(p)
    p.add_argument("images", nargs="+")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("import-weights", help="convert a flat weight dump into a checkpoint")
    p.add_argument("--dump", required=True)
    p.add_argument("--namemap", help="external->internal name map (default: identity)")
    p.add_argument("--out", required=True)
    p.add_argument("--relaxed", action="store_true", help="record unmatched names instead of failing")
    _add_model_flags(p)
    p.set_defaults(func=cmd_import_weights)
    return parser


def _apply_config_file(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    config_path = getattr(args, "config", None)
    if not config_path:
        return args
    try:
        with open(_require_file(config_path), encoding="utf-8") as fh:
            overrides = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"{config_path}: invalid JSON ({exc})") from None
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(overrides) - known)
    if unknown:
        raise UsageError(f"{config_path}: unknown key(s) {', '.join(unknown)}")
    sub.set_defaults(**overrides)
    return parser.parse_args(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config_file(parser, argv)
        logging.basicConfig(
            level=logging.WARNING if args.quiet else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
        )
        _log_config(args.command, args)
        return args.func(args)
    except UsageError as exc:
        print(f"leafnet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractError as exc:
        print(f"leafnet: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, OSError) as exc:
        print(f"leafnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except LeafnetError as exc:
        print(f"leafnet: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
