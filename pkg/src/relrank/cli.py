"""Command-line entry point: synth, build-pairs, train, eval, gradcheck.

Exit codes: 0 success, 1 input or format error (including usage errors),
2 infeasible or empty result.
"""

from __future__ import annotations

import argparse
import contextlib
import math
import sys
import time
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

from threadpoolctl import threadpool_limits

from . import tensor
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .data import (
    ImageStore,
    InfeasibleSplit,
    ManifestError,
    PairConstraints,
    PreprocessConfig,
    SplitSpec,
    build_pairs,
    category_of,
    load_manifest,
    load_pairs,
    pair_images,
    split_disjoint,
    write_pairs,
)
from .evaluate import (
    RATING_THRESHOLD,
    adapt_to_classifier,
    classification_accuracy,
    classifier_rank_baseline,
    corpus_midpoint,
    emit_report,
    ranker_scorer,
    ranking_accuracy,
    accuracy_curve_svg,
    train_binary_baseline,
)
from .gradcheck import CHECKS, TOLERANCE
from .network import (
    PAPER_COLUMN,
    PAPER_HIDDEN,
    TINY_COLUMN,
    TINY_HIDDEN,
    ColumnConfig,
    ConfigError,
    SiameseRanker,
    init_parameters,
)
from .synth import synth_generate
from .tensor import ContractError, RngStream
from .training import TrainConfig, TrainReport, fit

EXIT_OK, EXIT_INPUT, EXIT_EMPTY = 0, 1, 2
CHECKPOINT = "checkpoint.rrnk"

COLUMNS = {"tiny": (TINY_COLUMN, TINY_HIDDEN), "paper": (PAPER_COLUMN, PAPER_HIDDEN)}


class UsageError(Exception):
    pass


class EmptyResult(Exception):
    pass


# --------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    """Every knob of a run, flat, so it can live in a ``key=value`` file.

    ``hidden_dim``, ``warp_side`` and ``patch_side`` of 0 mean "follow the
    column preset". Split sizes up to 1 are image fractions; if any exceeds
    1, all three are pair counts.
    """

    column: str = "tiny"
    hidden_dim: int = 0
    warp_side: int = 0
    patch_side: int = 0
    patch_mode_train: str = "random"
    patch_mode_eval: str = "center"
    input_scale: float = 1.0 / 255.0
    min_gap: float = 1.0
    max_variance: float = 2.6
    same_category: bool = True
    max_pairs: int = 0
    split_train: float = 0.6
    split_val: float = 0.2
    split_test: float = 0.2
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 1e-6
    nesterov: bool = True
    batch_size: int = 50
    lr_decay: float = 0.15
    lr_step: int = 10
    delta: float = 3.0
    patience: int = 10
    max_epochs: int = 100
    min_improvement: float = 1e-4
    seed: int = 0
    threshold: float = RATING_THRESHOLD
    deterministic: bool = False

    def resolved(self) -> "RunConfig":
        if self.column not in COLUMNS:
            raise ConfigError(f"column must be one of {sorted(COLUMNS)}, got {self.column!r}")
        col, hidden = COLUMNS[self.column]
        return replace(
            self,
            hidden_dim=self.hidden_dim or hidden,
            warp_side=self.warp_side or col.input_side,
            patch_side=self.patch_side or col.input_side,
        )

    def column_config(self) -> ColumnConfig:
        col = COLUMNS[self.column][0]
        return col if col.input_side == self.warp_side else replace(col, input_side=self.warp_side)

    def patch_column_config(self) -> ColumnConfig:
        col = COLUMNS[self.column][0]
        return col if col.input_side == self.patch_side else replace(col, input_side=self.patch_side)

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def pair_constraints(self) -> PairConstraints:
        return PairConstraints(self.min_gap, self.max_variance, self.same_category, self.max_pairs or None, self.seed)

    def preprocess(self) -> PreprocessConfig:
        return PreprocessConfig(self.warp_side, self.patch_side, self.patch_mode_train, self.patch_mode_eval,
                                input_scale=self.input_scale)

    def split_spec(self) -> SplitSpec:
        sizes = (self.split_train, self.split_val, self.split_test)
        if any(v > 1 for v in sizes):
            if any(v != int(v) or v < 0 for v in sizes):
                raise ConfigError(f"split pair counts must be non-negative integers, got {sizes}")
            return SplitSpec(*(int(v) for v in sizes))
        return SplitSpec(*sizes)

    def to_text(self) -> str:
        return "".join(f"{k}={_show(v)}\n" for k, v in asdict(self).items())


def _show(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(name: str, text: str, kind: type):
    text = text.strip()
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(f"not a boolean: {text!r}")
            return low in ("true", "1", "yes")
        return kind(text)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


_KINDS = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}


def apply_settings(cfg: RunConfig, items: dict[str, str], origin: str) -> RunConfig:
    unknown = sorted(set(items) - set(_KINDS))
    if unknown:
        raise ConfigError(f"{origin}: unknown key(s) {', '.join(unknown)}")
    return replace(cfg, **{k: _coerce(k, v, _KINDS[k]) for k, v in items.items()})


def read_config_file(path: Path) -> dict[str, str]:
    """Line-based ``key=value`` (UTF-8); blank lines and ``#`` comments ignored."""
    items = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        items[key.strip()] = value.strip()
    return items


def base_config(spec: str) -> RunConfig:
    if spec in COLUMNS:
        return RunConfig(column=spec)
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(f"--config: {spec!r} is neither a preset ({'|'.join(COLUMNS)}) nor a file")
    return apply_settings(RunConfig(), read_config_file(path), str(path))


# flag name -> RunConfig field, for the per-command overrides
OVERRIDES = {
    "min_gap": "min_gap",
    "max_variance": "max_variance",
    "max_pairs": "max_pairs",
    "max_epochs": "max_epochs",
    "delta": "delta",
    "lr0": "lr0",
    "batch_size": "batch_size",
    "patience": "patience",
    "threshold": "threshold",
}


def resolve(args: argparse.Namespace) -> RunConfig:
    cfg = base_config(args.config)
    flags = {}
    for flag, key in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            flags[key] = str(value)
    if getattr(args, "any_category", False):
        flags["same_category"] = "false"
    for item in args.set or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        flags[key.strip()] = value
    if args.seed is not None:
        flags["seed"] = str(args.seed)
    if args.deterministic:
        flags["deterministic"] = "true"
    return apply_settings(cfg, flags, "flags").resolved()


def persist(cfg: RunConfig, out: Path, command: str) -> None:
    """Write the fully resolved configuration next to the command's outputs."""
    out.mkdir(parents=True, exist_ok=True)
    (out / f"config_{command}.txt").write_text(cfg.to_text(), encoding="utf-8")


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig, out: Path) -> int:
    if args.n < 2:
        raise UsageError("synth: --n must be at least 2")
    records, _ = synth_generate(args.n, cfg.seed, out)
    persist(cfg, out, "synth")
    print(f"synth: wrote {len(records)} images, manifest.csv and ground_truth.csv to {out}")
    return EXIT_OK


def cmd_build_pairs(args, cfg: RunConfig, out: Path) -> int:
    records = load_manifest(args.manifest)
    result = build_pairs(records, cfg.pair_constraints())
    persist(cfg, out, "build-pairs")
    write_pairs(result.pairs, out / "pairs.csv")
    with open(out / "pair_rejections.csv", "w", encoding="utf-8") as fh:
        fh.write("constraint,rejected\n")
        for name, count in result.rejected.items():
            fh.write(f"{name},{count}\n")
    rejected = ", ".join(f"{k}={v}" for k, v in result.rejected.items())
    print(f"build-pairs: {len(result.pairs)} pairs from {result.candidates} candidates (rejected: {rejected})")
    if not result.pairs:
        raise EmptyResult("build-pairs: no pair satisfies the constraints")
    return EXIT_OK


def _manifest_root(manifest: Path) -> Path:
    return Path(manifest).resolve().parent


def split_pairs(pairs, cfg: RunConfig):
    train, val, test = split_disjoint(pairs, cfg.split_spec(), seed=cfg.seed)
    sizes = {"train": len(train), "val": len(val), "test": len(test)}
    if not all(sizes.values()):
        raise InfeasibleSplit(f"image-disjoint split left an empty part: {sizes}", sizes)
    return train, val, test


def train_ranker(cfg: RunConfig, train, val, store: ImageStore) -> tuple[SiameseRanker, TrainReport]:
    ranker = SiameseRanker(cfg.column_config(), cfg.patch_column_config(), cfg.hidden_dim)
    init_parameters(ranker, RngStream(cfg.seed))
    report = fit(ranker, train, val, store, cfg.train_config())
    return ranker, report


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    records = load_manifest(args.manifest)
    pairs = load_pairs(args.pairs)
    train, val, test = split_pairs(pairs, cfg)
    persist(cfg, out, "train")
    for name, part in zip(("train", "val", "test"), (train, val, test)):
        write_pairs(part, out / f"split_{name}.csv")
    store = ImageStore(records, _manifest_root(args.manifest), cfg.preprocess())
    mean = store.fit_mean(pair_images(train))
    t0 = time.perf_counter()
    ranker, report = train_ranker(cfg, train, val, store)
    elapsed = time.perf_counter() - t0
    extra = {"preprocess": asdict(store.pre), "run_config": asdict(cfg)}
    save_checkpoint(ranker, asdict(cfg.train_config()), mean, out / CHECKPOINT, extra)
    report.write_csv(out / "train_report.csv")
    accuracy_curve_svg({"ranker": [r.val_accuracy for r in report.rows]}, out / "val_accuracy.svg")
    best = report.best
    print(f"train: {len(report.rows)} epochs in {elapsed:.1f}s, best epoch {best.epoch} "
          f"(val accuracy {best.val_accuracy:.4f}); {report.stop_reason}")
    return EXIT_OK


def _store_for(header: dict, records, manifest: Path) -> ImageStore:
    pre = header.get("extra", {}).get("preprocess")
    if pre is None:
        raise CheckpointFormatError("checkpoint carries no preprocessing settings")
    pre = dict(pre, rgb_mean=tuple(header["rgb_mean"]))
    return ImageStore(records, _manifest_root(manifest), PreprocessConfig(**pre))


def _sibling(args_value: Optional[str], checkpoint: Path, name: str) -> Path:
    return Path(args_value) if args_value else checkpoint.parent / name


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    checkpoint = Path(args.checkpoint)
    ranker, header = load_checkpoint(checkpoint)
    records = load_manifest(args.manifest)
    by_id = {r.image_id: r for r in records}
    store = _store_for(header, records, args.manifest)
    test = load_pairs(_sibling(args.pairs, checkpoint, "split_test.csv"))
    if not test:
        raise EmptyResult("eval: no evaluation pairs")
    missing = sorted(pair_images(test) - set(by_id))
    if missing:
        raise ManifestError(f"eval: pairs reference images absent from the manifest: {missing[:5]}")
    categories = category_of(records)
    test_records = [by_id[i] for i in sorted(pair_images(test))]
    threshold = corpus_midpoint(records) if args.midpoint else cfg.threshold
    persist(cfg, out, "eval")

    rank, classify, curves = [], [], {}
    if args.mode in ("rank", "baseline"):
        rank.append(ranking_accuracy(ranker_scorer(ranker, store), test, "ranker", categories))
    if args.mode in ("classify", "baseline"):
        classify.append(classification_accuracy(adapt_to_classifier(ranker), test_records, store, threshold,
                                                "adapted_ranker"))
    if args.mode == "baseline":
        train = load_pairs(_sibling(args.train_pairs, checkpoint, "split_train.csv"))
        val = load_pairs(_sibling(args.val_pairs, checkpoint, "split_val.csv"))
        tcfg = cfg.train_config()
        clf, report = train_binary_baseline(
            [by_id[i] for i in sorted(pair_images(train))],
            [by_id[i] for i in sorted(pair_images(val))],
            store, tcfg, ranker.image_column.config, ranker.patch_column.config,
            hidden_dim=ranker.comparator.hidden_dim, threshold=cfg.threshold,
            steps_per_epoch=math.ceil(len(train) / tcfg.batch_size),
        )
        rank.append(classifier_rank_baseline(clf, test, store, "binary_baseline", categories))
        classify.append(classification_accuracy(clf, test_records, store, threshold, "binary_baseline"))
        curves["binary_baseline"] = [r.val_accuracy for r in report.rows]
    emit_report(out, rank, classify, curves)
    for r in rank:
        print(f"eval: {r.model} ranking accuracy {r.accuracy:.4f} ({r.correct}/{r.total}, {r.undecided} undecided)")
    for c in classify:
        print(f"eval: {c.model} classification accuracy {c.accuracy:.4f} at threshold {c.threshold:g}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig, out: Path) -> int:
    if args.fault_conv_backward:
        tensor._CONV_BACKWARD_FAULT = args.fault_conv_backward
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    failed = 0
    try:
        for name, check in CHECKS.items():
            worst = max(check(s) for s in seeds)
            ok = worst < TOLERANCE
            failed += not ok
            print(f"{name:10s} max_rel_err={worst:.3e} {'PASS' if ok else 'FAIL'}")
    finally:
        tensor._CONV_BACKWARD_FAULT = 0.0
    print(f"gradcheck: {len(CHECKS) - failed}/{len(CHECKS)} operations within {TOLERANCE:g} over {args.seeds} seeds")
    return EXIT_OK if failed == 0 else EXIT_INPUT


# --------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser, top: bool) -> None:
    d = (lambda v: v) if top else (lambda v: argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=d(None), help="master seed (default: config value, 0)")
    p.add_argument("--config", default=d("tiny"), help="preset (tiny|paper) or key=value file")
    p.add_argument("--deterministic", action="store_true", default=d(False),
                   help="single-threaded BLAS for bit-reproducible runs")
    p.add_argument("--out", default=d("run"), help="output directory")
    p.add_argument("--set", action="append", default=d(None), metavar="KEY=VALUE",
                   help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relrank", description="Pairwise image-aesthetics ranking toolkit.")
    _global_flags(parser, top=True)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic rated corpus")
    _global_flags(p, top=False)
    p.add_argument("--n", type=int, default=200, help="number of images (>= 2)")

    p = sub.add_parser("build-pairs", help="build constrained image pairs from a manifest")
    _global_flags(p, top=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--min-gap", type=float)
    p.add_argument("--max-variance", type=float)
    p.add_argument("--max-pairs", type=int)
    p.add_argument("--any-category", action="store_true", help="drop the same-category constraint")

    p = sub.add_parser("train", help="train the Siamese ranker")
    _global_flags(p, top=False)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--delta", type=float)
    p.add_argument("--lr0", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)

    p = sub.add_parser("eval", help="ranking / classification reports and the binary baseline")
    _global_flags(p, top=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", choices=("rank", "classify", "baseline"), default="rank")
    p.add_argument("--pairs", help="evaluation pairs (default: split_test.csv next to the checkpoint)")
    p.add_argument("--train-pairs", help="baseline training pairs (default: split_train.csv)")
    p.add_argument("--val-pairs", help="baseline validation pairs (default: split_val.csv)")
    p.add_argument("--threshold", type=float, help="rating threshold for the beautiful class")
    p.add_argument("--midpoint", action="store_true", help="threshold at the corpus rating midpoint")
    p.add_argument("--max-epochs", type=int, help="baseline training epochs")
    p.add_argument("--patience", type=int)

    p = sub.add_parser("gradcheck", help="finite-difference check of every operation")
    _global_flags(p, top=False)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--fault-conv-backward", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "build-pairs": cmd_build_pairs,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve(args)
        limits = threadpool_limits(limits=1) if cfg.deterministic else contextlib.nullcontext()
        with limits:
            return COMMANDS[args.command](args, cfg, Path(args.out))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"relrank: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InfeasibleSplit, EmptyResult, ContractError) as exc:
        print(f"relrank: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (ManifestError, CheckpointFormatError, ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"relrank: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
