"""Command-line entry point: ``sdct-auxnet {gen-data,train,eval,sweep-theta,gradcheck}``.

Every flag can also be set through an environment variable named after it,
e.g. ``--epochs`` <- ``SDCT_EPOCHS``; explicit flags win. Each run writes a
``config.json`` echo of its effective settings into the output directory.

Exit codes: 0 success, 2 input error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import BackboneConfig
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DatasetManifest,
    ImageFormatError,
    ManifestError,
    SyntheticConfig,
    generate_synthetic,
    load_image,
    load_images,
    load_manifest,
)
from .metrics import REPORT_ROWS, model_columns, score_table, subject_level_accuracy, write_table_csv
from .pipeline import (
    DEFAULT_THETAS,
    DESK_SCALE,
    CVResult,
    MemberOutputs,
    SingleClassSelectionError,
    TrainConfig,
    TrainingDivergedError,
    cross_validate,
    majority_vote,
)
from .sdct import sparsity_stats

log = logging.getLogger("sdct_auxnet")

ENV_PREFIX = "SDCT_"
EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3
PRESETS = {"full": {}, "desk": DESK_SCALE}


class InputError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _floats(text: str) -> list[float]:
    return [float(v) for v in str(text).replace(" ", "").split(",") if v]


def _ints(text: str) -> list[int]:
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


def _echo_config(out: Path, args: argparse.Namespace, extra: dict | None = None) -> None:
    settings = {k: v for k, v in vars(args).items() if k != "func"}
    payload = {"command": args.command, "settings": settings, "version": __version__,
               "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z")}
    payload.update(extra or {})
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _infer_side(manifest: DatasetManifest) -> int:
    from PIL import Image

    with Image.open(manifest.resolve(manifest.records[0])) as im:
        return max(im.size)


def _split_or_fail(manifest: DatasetManifest, name: str) -> DatasetManifest:
    part = manifest.split(name)
    if len(part) == 0:
        raise InputError(f"manifest has no '{name}' records")
    return part


# ---------------------------------------------------------------------------
# reports shared by train / eval


def _evaluate_outputs(out: Path, outputs: list[MemberOutputs], part: DatasetManifest, theta: float) -> dict:
    """Write metrics, per-image predictions, subject-level results and auxiliary-usage counts."""
    truths = part.labels()
    k = len(outputs)
    member_preds = [o.gate(theta) for o in outputs]
    voted = majority_vote(np.stack(member_preds))
    table = score_table(member_preds, voted, truths)
    sids = part.subject_ids()
    for col, preds in zip(model_columns(k), member_preds + [voted]):
        subj = subject_level_accuracy(preds, truths, sids)
        table[col]["SubjectAccuracy"] = float(np.mean([s.accuracy for s in subj.values()]))
    write_table_csv(out / "metrics.csv", table, list(REPORT_ROWS) + ["SubjectAccuracy"])

    header = ["image_path", "subject_id", "label"]
    for m in range(1, k + 1):
        header += [f"tau_Model{m}", f"used_auxiliary_Model{m}", f"label_Model{m}"]
    header.append("voted")
    taus = [o.tau for o in outputs]
    routed = [o.routed(theta) for o in outputs]
    rows = []
    for i, r in enumerate(part.records):
        row = [r.image_path, r.subject_id, r.label]
        for m in range(k):
            row += [_fmt(taus[m][i]), int(routed[m][i]), int(member_preds[m][i])]
        rows.append(row + [int(voted[i])])
    _write_rows(out / "predictions.csv", header, rows)

    subj = subject_level_accuracy(voted, truths, sids)
    labels = part.subjects()
    _write_rows(out / "subjects.csv", ["subject_id", "label", "n_images", "n_correct", "accuracy"],
                [[s.subject_id, labels[s.subject_id], s.n_images, s.n_correct, _fmt(s.accuracy)] for s in subj.values()])

    n = len(truths)
    aux = [int(r.sum()) for r in routed]
    _write_rows(out / "aux_usage.csv", ["classifier"] + model_columns(k)[:-1],
                [["SDCT-Net"] + [n - a for a in aux], ["Auxiliary"] + aux])
    return table


def _write_curves(out: Path, histories) -> None:
    rows = []
    for m, hist in enumerate(histories, start=1):
        for e in hist:
            rows.append([f"Model{m}", e.epoch, _fmt(e.lr), _fmt(e.train_loss), _fmt(e.train_acc),
                         _fmt(e.val_loss), _fmt(e.val_acc)])
    _write_rows(out / "curves.csv", ["model", "epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc"], rows)


def _write_features(out: Path, ensemble, outputs_feats: list[np.ndarray], part: DatasetManifest) -> None:
    d = outputs_feats[0].shape[1]
    rows = []
    for m, feats in enumerate(outputs_feats, start=1):
        for r, f in zip(part.records, feats):
            rows.append([r.image_path, r.label, f"Model{m}"] + [_fmt(v) for v in f])
    _write_rows(out / "features.csv", ["image_path", "label", "model"] + [f"f{j}" for j in range(d)], rows)


def _member_outputs_with_features(ensemble, images: np.ndarray):
    outs, feats = [], []
    for m in ensemble.members:
        logp, f = m.net.predict_outputs(images)
        outs.append(MemberOutputs(logp, m.svm.predict(f)))
        feats.append(f)
    return outs, feats


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = SyntheticConfig(
        side=args.side,
        train_subjects_per_class=args.subjects_per_class,
        test_subjects_per_class=args.test_subjects_per_class,
        images_per_subject=args.images_per_subject,
        texture_amplitude=args.texture_amplitude,
        seed=args.seed,
    )
    out = _out_dir(args.out)
    manifest = generate_synthetic(cfg, out)
    images = [load_image(manifest.resolve(r), cfg.side) for r in manifest.records]
    report = sparsity_stats(images, manifest.labels().tolist(), image_ids=[r.image_path for r in manifest.records])
    report.to_csv(out / "sparsity.csv")
    _echo_config(out, args, {"synthetic": cfg.to_dict()})
    print(out / "manifest.csv")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    base = TrainConfig(**{**PRESETS[args.preset], "seed": args.seed})
    updates = {}
    for flag in ("lr", "batch_size", "epochs", "dtype"):
        if getattr(args, flag) is not None:
            updates[flag] = getattr(args, flag)
    if args.lr_drop_epochs is not None:
        updates["lr_drop_epochs"] = tuple(_ints(args.lr_drop_epochs))
    elif "epochs" in updates:
        updates["lr_drop_epochs"] = tuple(e for e in base.lr_drop_epochs if e < updates["epochs"])
    if args.no_augment:
        updates["augment"] = False
    d = base.to_dict()
    d.update(updates)
    return TrainConfig.from_dict(d)


def cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    train, test = _split_or_fail(manifest, "train"), _split_or_fail(manifest, "test")
    config = _train_config(args)
    side = args.side or _infer_side(manifest)
    backbone = BackboneConfig(input_side=side)
    out = _out_dir(args.out)
    _echo_config(out, args, {"train_config": config.to_dict(), "backbone": backbone.to_dict()})
    log.info("loading %d train / %d test images at %dx%d", len(train), len(test), side, side)
    train_images, test_images = load_images(train, side), load_images(test, side)
    result: CVResult = cross_validate(
        train_images, train.labels(), train.subject_ids(), test_images, test.labels(),
        config, args.theta, args.folds, backbone, args.threads,
    )
    save_checkpoint(result.ensemble, out / "checkpoint.sdct")
    _write_rows(out / "folds.csv", ["subject_id", "fold"], sorted(result.folds.subject_to_fold.items()))
    _write_curves(out, result.histories)
    table = _evaluate_outputs(out, result.test_outputs, test, args.theta)
    log.info("voted WF1 %.4f BAC %.4f", table["MajorityVoting"]["WF1"], table["MajorityVoting"]["BAC"])
    print(out / "metrics.csv")
    return EXIT_OK


def _load_for_eval(args):
    ensemble = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    part = _split_or_fail(manifest, args.split)
    images = load_images(part, ensemble.backbone.input_side)
    return ensemble, part, images


def cmd_eval(args) -> int:
    ensemble, part, images = _load_for_eval(args)
    theta = ensemble.theta if args.theta is None else args.theta
    out = _out_dir(args.out)
    _echo_config(out, args, {"effective_theta": theta})
    outputs, feats = _member_outputs_with_features(ensemble, images)
    _evaluate_outputs(out, outputs, part, theta)
    _write_features(out, ensemble, feats, part)
    print(out / "metrics.csv")
    return EXIT_OK


def cmd_sweep_theta(args) -> int:
    ensemble, part, images = _load_for_eval(args)
    thetas = _floats(args.thetas) if args.thetas else list(DEFAULT_THETAS)
    out = _out_dir(args.out)
    _echo_config(out, args, {"thetas": thetas})
    outputs = ensemble.outputs(images)  # one forward pass per member, reused for every theta
    truths = part.labels()
    k = ensemble.k
    cols = model_columns(k)
    rows, usage = [], []
    for theta in thetas:
        preds = [o.gate(theta) for o in outputs]
        table = score_table(preds, majority_vote(np.stack(preds)), truths)
        for metric in REPORT_ROWS:
            rows.append([_fmt(theta), metric] + [_fmt(table[c][metric]) for c in cols])
        usage.append([_fmt(theta)] + [int(o.routed(theta).sum()) for o in outputs])
    _write_rows(out / "sweep.csv", ["theta", "metric"] + cols, rows)
    _write_rows(out / "aux_usage_sweep.csv", ["theta"] + cols[:-1], usage)
    print(out / "sweep.csv")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    results = run_suite(tol=args.tol, side=args.side, seed=args.seed)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{r.name:<{width}}  max_rel_error={r.max_error:.3e}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    if args.out:
        out = _out_dir(args.out)
        _write_rows(out / "gradcheck.csv", ["op", "max_rel_error", "passed"],
                    [[r.name, _fmt(r.max_error), int(r.passed)] for r in results])
        _echo_config(out, args)
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sdct-auxnet", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write the synthetic two-class dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--side", type=int, default=96)
    g.add_argument("--subjects-per-class", type=int, default=14, help="training subjects per class")
    g.add_argument("--test-subjects-per-class", type=int, default=4)
    g.add_argument("--images-per-subject", type=int, default=30)
    g.add_argument("--texture-amplitude", type=float, default=SyntheticConfig.texture_amplitude)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="k-fold two-step training, then test-set evaluation")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--preset", choices=sorted(PRESETS), default="full",
                   help="full: 130 epochs at lr 0.001; desk: short float32 schedule for synthetic data")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr-drop-epochs", help="comma-separated epoch indices")
    t.add_argument("--dtype", choices=["float64", "float32"])
    t.add_argument("--no-augment", action="store_true")
    t.add_argument("--theta", type=float, default=0.9)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--folds", type=int, default=7)
    t.add_argument("--side", type=int, help="canvas side; default: largest dimension of the first image")
    t.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="fold members trained in parallel")
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "gated, voted evaluation of a checkpoint"),
                                 ("sweep-theta", cmd_sweep_theta, "metrics over a grid of theta values")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--manifest", required=True)
        e.add_argument("--out", required=True)
        e.add_argument("--split", choices=["test", "train"], default="test")
        if name == "eval":
            e.add_argument("--theta", type=float, help="default: the checkpoint's theta")
        else:
            e.add_argument("--thetas", help="comma-separated grid; default 0,0.6,0.65,...,0.95,1")
        e.set_defaults(func=func)

    c = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--side", type=int, default=32)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_gradcheck)
    return p


def _truthy(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes", "on")


def apply_env_defaults(parser: argparse.ArgumentParser, environ=os.environ) -> None:
    """``SDCT_<FLAG>`` (upper case, dashes as underscores) becomes the flag's default."""
    parsers = [parser]
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            parsers.extend(action.choices.values())
    for sp in parsers:
        for action in sp._actions:
            if not action.option_strings or action.dest in ("help", "version"):
                continue
            key = ENV_PREFIX + action.dest.upper()
            if key not in environ:
                continue
            raw = environ[key]
            if isinstance(action, argparse._StoreTrueAction):
                value = _truthy(raw)
            else:
                value = action.type(raw) if action.type else raw
                if action.choices is not None and value not in action.choices:
                    raise InputError(f"{key}={raw!r} is not one of {sorted(action.choices)}")
            action.default = value
            action.required = False


def main(argv=None) -> int:
    parser = build_parser()
    try:
        apply_env_defaults(parser)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (TrainingDivergedError, SingleClassSelectionError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (InputError, ManifestError, ImageFormatError, CheckpointError, KeyError, ValueError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
