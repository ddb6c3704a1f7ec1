"""Command-line front end.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from . import augment, corpus, ensemble, eval as evaluation, synthetic, train
from .config import ConfigError, RunConfig, dump_config, load_config
from .model import ModelError, PretrainedWeightsUnavailable

log = logging.getLogger("padensemble")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

VALIDATION_ERRORS = (
    ConfigError,
    corpus.CorpusError,
    augment.AugmentError,
    ModelError,
    ensemble.EnsembleError,
    evaluation.EvalError,
    train.CheckpointError,
)


class CommandError(ValueError):
    pass


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    selection = {"val": "validation_loss", "train": "training_loss"}.get(args.selection)
    backbones = tuple(b.strip() for b in args.backbones.split(",") if b.strip()) if args.backbones else None
    return config.with_overrides(
        seed=args.seed,
        output_dir=args.out,
        dataset_root=getattr(args, "data", None),
        members=args.members,
        epochs=args.epochs,
        learning_rate=args.lr,
        momentum=args.momentum,
        selection_mode=selection,
        backbones=backbones,
        pretrained=False if args.no_pretrained else None,
    )


def _load_labeled(config: RunConfig) -> List[corpus.ImageSample]:
    root = Path(config.dataset_root)
    labels = root / "labels.csv"
    if not labels.is_file():
        raise corpus.CorpusError(f"labels table not found: {labels}")
    samples = [s for s in corpus.load_corpus(root, labels) if s.label is not None]
    if not samples:
        raise corpus.CorpusError(f"{labels}: no labeled samples")
    return samples


def cmd_prepare(config: RunConfig) -> int:
    samples = _load_labeled(config)
    out = Path(config.output_dir)
    stats = corpus.compute_stats(samples)
    corpus.write_stats(stats, out)
    tc = config.train_config()

    balanced = augment.balance_corpus(samples, config.jitter, tc.seed)
    augment.write_manifest(augment.manifest_rows(balanced, [s.id for s in samples]), out / "manifest.csv")

    # the split and training-side manifest that `train` will actually use
    data = train.prepare_training_data(
        samples, config.jitter, tc,
        fill_value=config.padding.fill_value, placement=config.padding.placement, target=config.padding.target(),
    )
    val_ids = {s.id for s in data.val}
    with open(out / "split.csv", "w", newline="") as fh:
        fh.write("id,split\n")
        for s in samples:
            fh.write(f"{s.id},{'validation' if s.id in val_ids else 'train'}\n")
    augment.write_manifest(
        augment.manifest_rows(data.train, [s.id for s in samples]), out / "train_manifest.csv"
    )
    sys.stdout.write(corpus.format_stats(stats))
    synthetic_rows = len(balanced) - len(samples)
    print(f"balanced corpus: {len(balanced)} samples ({synthetic_rows} jittered copies) -> {out / 'manifest.csv'}")
    print(f"padding target: {data.padding.target_height} x {data.padding.target_width}")
    return EXIT_OK


def cmd_train(config: RunConfig) -> int:
    samples = _load_labeled(config)
    out = Path(config.output_dir)
    checkpoints = train.train_ensemble(
        config.ensemble.spec(), samples, config.jitter, config.train_config(),
        fill_value=config.padding.fill_value, placement=config.padding.placement, target=config.padding.target(),
    )
    ckpt_dir = out / "checkpoints"
    for cp in checkpoints:
        path = train.save_checkpoint(cp, ckpt_dir / f"member_{cp.member_index}_{cp.spec.architecture_name}.ckpt")
        print(f"member {cp.member_index} ({cp.spec.architecture_name}): best loss {cp.best_loss:.6f} "
              f"at epoch {cp.best_epoch} -> {path}")
    train.write_training_log(checkpoints, out / "training_log.csv")
    (out / "run_config.yaml").write_text(dump_config(config))
    return EXIT_OK


def _checkpoint_paths(config: RunConfig, given: Optional[Sequence[str]]) -> List[Path]:
    if given:
        return [Path(p) for p in given]
    found = sorted((Path(config.output_dir) / "checkpoints").glob("*.ckpt"))
    if not found:
        raise CommandError(f"no checkpoints given and none found in {Path(config.output_dir) / 'checkpoints'}")
    return found


def cmd_predict(config: RunConfig, checkpoint_paths: Optional[Sequence[str]], input_dir: Optional[str]) -> int:
    paths = _checkpoint_paths(config, checkpoint_paths)
    checkpoints = [train.load_checkpoint(p) for p in paths]
    if not checkpoint_paths:
        checkpoints.sort(key=lambda cp: cp.member_index)
    source = Path(input_dir) if input_dir else Path(config.dataset_root) / "test"
    samples = corpus.load_corpus(source)
    inputs = ensemble.prepare_inputs(checkpoints, samples)
    preds = ensemble.predict(checkpoints, inputs, mode=config.ensemble.averaging)
    out = Path(config.output_dir)
    ensemble.write_predictions(preds, out / "predictions.csv")
    evaluation.write_submission(preds, out / "submission.csv")
    print(f"{len(preds)} predictions from {len(checkpoints)} member(s) -> {out / 'submission.csv'}")
    return EXIT_OK


def cmd_evaluate(truth_path: str, predictions_path: str, out_dir: Optional[str]) -> int:
    truth = corpus.read_labels(Path(truth_path))
    pred = ensemble.read_prediction_labels(predictions_path)
    missing, extra = sorted(set(truth) - set(pred)), sorted(set(pred) - set(truth))
    if missing or extra:
        raise CommandError(
            f"id mismatch: {len(missing)} truth id(s) without prediction {missing[:10]}, "
            f"{len(extra)} predicted id(s) without truth {extra[:10]}"
        )
    ids = sorted(truth)
    cm = evaluation.confusion([truth[i] for i in ids], [pred[i] for i in ids])
    report = evaluation.f1_report(cm)
    if out_dir:
        evaluation.write_report(cm, report, out_dir)
    sys.stdout.write(evaluation.format_report(cm, report))
    return EXIT_OK


def cmd_ablate(config: RunConfig, seeds: Optional[Sequence[int]] = None) -> int:
    samples = _load_labeled(config)
    variants = evaluation.default_variants(config.ensemble.spec())
    rows = evaluation.ablation_report(
        variants, samples, list(seeds) if seeds else list(config.ablation.seeds),
        config.jitter, config.train_config(), holdout_fraction=config.ablation.holdout_fraction,
    )
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = evaluation.format_ablation(rows)
    (out / "ablation.csv").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def cmd_synth(out: str, counts: str, min_size: int, max_size: int, n_test: int, seed: int) -> int:
    parsed = {}
    for part in counts.split(","):
        cls, _, n = part.partition(":")
        parsed[int(cls)] = int(n)
    root = Path(out)
    labeled = synthetic.make_corpus(parsed, min_size, max_size, seed)
    corpus.save_corpus(labeled, root)
    if n_test:
        test = synthetic.make_corpus(
            _split_evenly(n_test), min_size, max_size, seed + 1, prefix="test"
        )
        corpus.save_corpus([s.replace(label=None) for s in test], root / "test", write_labels=False)
        with open(root / "test_labels.csv", "w") as fh:
            fh.write("id,label\n" + "".join(f"{s.id},{s.label}\n" for s in test))
    print(f"wrote {len(labeled)} labeled images to {root / 'images'}" + (f" and {n_test} test images" if n_test else ""))
    return EXIT_OK


def _split_evenly(n: int) -> dict:
    base, rem = divmod(n, 3)
    return {c: base + (1 if i < rem else 0) for i, c in enumerate(corpus.CLASSES)}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run-config document (YAML or JSON)")
    p.add_argument("--data", help="dataset root (overrides dataset_root)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--members", type=int, help="number of ensemble members (cycles through --backbones)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--selection", choices=("val", "train"))
    p.add_argument("--backbones", help="comma-separated backbone names")
    p.add_argument("--no-pretrained", action="store_true", help="train backbones from scratch")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="padensemble", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (
        ("prepare", "corpus statistics and augmented-corpus manifest"),
        ("train", "train one checkpoint per ensemble member"),
        ("predict", "ensemble predictions and submission file"),
        ("ablate", "pad/resize/crop x ensemble/best-single comparison"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_run_flags(p)
        if name == "predict":
            p.add_argument("--checkpoints", nargs="+", help="checkpoint files (default: <out>/checkpoints/*.ckpt)")
            p.add_argument("--input", help="directory of unlabeled images (default: <data>/test)")
        if name == "ablate":
            p.add_argument("--seeds", type=int, nargs="+")

    p = sub.add_parser("evaluate", help="F1 report for predictions against a labels table")
    p.add_argument("--truth", required=True, help="id,label table")
    p.add_argument("--predictions", required=True, help="prediction dump or submission file")
    p.add_argument("--out", help="directory for report.json / report.txt")

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--counts", default="-1:30,0:18,1:12")
    p.add_argument("--min-size", type=int, default=32)
    p.add_argument("--max-size", type=int, default=64)
    p.add_argument("--test", type=int, default=0, help="number of unlabeled test images")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "evaluate":
            return cmd_evaluate(args.truth, args.predictions, args.out)
        if args.command == "synth":
            return cmd_synth(args.out, args.counts, args.min_size, args.max_size, args.test, args.seed)
        config = _resolve_config(args)
        if args.command == "prepare":
            return cmd_prepare(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "predict":
            return cmd_predict(config, args.checkpoints, args.input)
        if args.command == "ablate":
            return cmd_ablate(config, args.seeds)
    except (CommandError, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (train.TrainError, PretrainedWeightsUnavailable, OSError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
