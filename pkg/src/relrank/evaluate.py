"""Ranking accuracy, classifier adaptation, the binary-label baseline and reports."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .data import ImageStore, PairSample, RatingRecord
from .network import Column, ColumnConfig, ComparatorHead, SiameseRanker, fresh_stream, init_parameters
from .tensor import (
    ContractError,
    RngStream,
    Tape,
    Tensor,
    backward,
    concat,
    dense,
    make_op,
    no_record,
    relu,
    reshape,
    stable_sigmoid,
)
from .training import OptimizerState, TrainConfig, TrainReport, EpochRow, lr_at, sgd_nesterov_step

RATING_THRESHOLD = 5.5

PairScorer = Callable[[Sequence[PairSample]], np.ndarray]


@dataclass
class RankReport:
    model: str
    total: int
    correct: int
    undecided: int
    by_category: dict = field(default_factory=dict)

    @property
    def accuracy(self) -> float:
        return self.correct / self.total

    @property
    def incorrect(self) -> int:
        return self.total - self.correct - self.undecided


def rank_report(model: str, scores: np.ndarray, pairs: Sequence[PairSample],
                categories: Optional[Mapping[str, str]] = None) -> RankReport:
    if len(pairs) == 0:
        raise ContractError("ranking accuracy needs at least one pair")
    scores = np.asarray(scores)
    labels = np.array([p.label for p in pairs])
    hits = np.sign(scores).astype(np.int64) == labels
    undecided = scores == 0
    by_cat = {}
    if categories:
        groups = defaultdict(list)
        for k, p in enumerate(pairs):
            groups[categories.get(p.first, "")].append(k)
        by_cat = {c: (len(ix), int(hits[ix].sum())) for c, ix in sorted(groups.items())}
    return RankReport(model, len(pairs), int(hits.sum()), int(undecided.sum()), by_cat)


def ranking_accuracy(scorer: PairScorer, pairs: Sequence[PairSample], model: str = "ranker",
                     categories: Optional[Mapping[str, str]] = None) -> RankReport:
    """Score every pair and compare sign(d) with the label; d == 0 counts as wrong."""
    if len(pairs) == 0:
        raise ContractError("ranking accuracy needs at least one pair")
    return rank_report(model, scorer(pairs), pairs, categories)


def ranker_scorer(ranker: SiameseRanker, store: ImageStore, batch_size: int = 50) -> PairScorer:
    from .training import score_pairs

    return lambda pairs: score_pairs(ranker, pairs, store, batch_size)


# --------------------------------------------------------------------------
# single-image classifiers


class ZeroReferenceHead:
    """Comparator evaluated against an all-zero second channel: w2 . relu(w1 . C)."""

    def __init__(self, comparator: ComparatorHead):
        self.comparator = comparator

    def __call__(self, features: Tensor) -> Tensor:
        return self.comparator(features)

    def parameters(self) -> dict[str, Tensor]:
        return {"head.w1": self.comparator.w1, "head.w2": self.comparator.w2}


class DenseHead:
    """``channel_dim -> hidden -> 1`` with biases, for the separately trained baseline."""

    def __init__(self, channel_dim: int, hidden_dim: int, dtype=np.float32):
        self.params = {
            "head.dense0.weight": Tensor(np.zeros((hidden_dim, channel_dim), dtype), requires_grad=True),
            "head.dense0.bias": Tensor(np.zeros(hidden_dim, dtype), requires_grad=True),
            "head.dense1.weight": Tensor(np.zeros((1, hidden_dim), dtype), requires_grad=True),
            "head.dense1.bias": Tensor(np.zeros(1, dtype), requires_grad=True),
        }

    def __call__(self, features: Tensor) -> Tensor:
        p = self.params
        h = relu(dense(features, p["head.dense0.weight"], p["head.dense0.bias"]))
        out = dense(h, p["head.dense1.weight"], p["head.dense1.bias"])
        return reshape(out, out.shape[:-1])

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.params)


class BinaryClassifier:
    """One channel (image column + patch column) followed by a scalar head and a sigmoid."""

    def __init__(self, image_column: Column, patch_column: Column, head):
        self.image_column = image_column
        self.patch_column = patch_column
        self.head = head

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for col in (self.image_column, self.patch_column):
            for name, t in col.params.items():
                out[f"{col.prefix}.{name}"] = t
        out.update(self.head.parameters())
        return out

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def logit(self, images, patches, train: bool = False, rng: Optional[RngStream] = None) -> Tensor:
        dtype = self.image_column.params["conv0.weight"].dtype
        rng = fresh_stream(rng)
        f1 = self.image_column.forward(Tensor(np.asarray(images, dtype)), train, None if rng is None else rng.spawn(0))
        f2 = self.patch_column.forward(Tensor(np.asarray(patches, dtype)), train, None if rng is None else rng.spawn(1))
        return self.head(concat(f1, f2))

    def probability(self, images, patches) -> np.ndarray:
        """p(beautiful | image) in eval mode, computed in 64-bit from the logit."""
        with no_record():
            z = self.logit(images, patches).data
        return stable_sigmoid(np.asarray(z, dtype=np.float64))


def adapt_to_classifier(ranker: SiameseRanker) -> BinaryClassifier:
    """Channel-1 columns plus the comparator against a zero reference, then a sigmoid.

    No parameter is copied or modified: the classifier holds the ranker's own tensors.
    """
    return BinaryClassifier(ranker.image_column, ranker.patch_column, ZeroReferenceHead(ranker.comparator))


def classifier_probabilities(clf: BinaryClassifier, store: ImageStore, image_ids: Sequence[str],
                             batch_size: int = 50) -> np.ndarray:
    out = []
    for k in range(0, len(image_ids), batch_size):
        imgs, patches = store.views(image_ids[k : k + batch_size])
        out.append(np.atleast_1d(clf.probability(imgs, patches)))
    return np.concatenate(out) if out else np.zeros(0)


@dataclass
class ClassifyReport:
    model: str
    total: int
    correct: int
    threshold: float

    @property
    def accuracy(self) -> float:
        return self.correct / self.total


def beautiful(records: Sequence[RatingRecord], threshold: float = RATING_THRESHOLD) -> np.ndarray:
    """Ground-truth class: mean rating strictly above the threshold."""
    means = []
    for r in records:
        if r.mean is None or (isinstance(r.mean, float) and math.isnan(r.mean)):
            raise ValueError(f"{r.image_id}: missing mean rating")
        means.append(r.mean)
    return np.array(means) > threshold


def classification_report(model: str, probabilities: np.ndarray, records: Sequence[RatingRecord],
                          threshold: float = RATING_THRESHOLD) -> ClassifyReport:
    if len(records) == 0:
        raise ContractError("classification accuracy needs at least one image")
    truth = beautiful(records, threshold)
    pred = np.asarray(probabilities) > 0.5
    return ClassifyReport(model, len(records), int((truth == pred).sum()), threshold)


def classification_accuracy(clf: BinaryClassifier, records: Sequence[RatingRecord], store: ImageStore,
                            threshold: float = RATING_THRESHOLD, model: str = "classifier") -> ClassifyReport:
    probs = classifier_probabilities(clf, store, [r.image_id for r in records])
    return classification_report(model, probs, records, threshold)


def corpus_midpoint(records: Sequence[RatingRecord]) -> float:
    """Midway between the lowest and highest mean rating of a corpus."""
    means = [r.mean for r in records]
    return (min(means) + max(means)) / 2


def probability_scorer(prob_of: Mapping[str, float]) -> PairScorer:
    """Pair score p(first) - p(second); equal probabilities give an undecided pair."""
    return lambda pairs: np.array([np.sign(prob_of[p.first] - prob_of[p.second]) for p in pairs])


def classifier_rank_baseline(clf: BinaryClassifier, pairs: Sequence[PairSample], store: ImageStore,
                             model: str = "baseline", categories: Optional[Mapping[str, str]] = None) -> RankReport:
    """Rank each pair by comparing the two images' beautiful-class probabilities."""
    ids = sorted({i for p in pairs for i in (p.first, p.second)})
    probs = dict(zip(ids, classifier_probabilities(clf, store, ids)))
    return ranking_accuracy(probability_scorer(probs), pairs, model, categories)


def bce_with_logits(z: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of sigmoid(z) against 0/1 targets."""
    t = np.asarray(target, dtype=z.dtype).reshape(z.shape)
    x = z.data
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    n = max(x.size, 1)
    out = np.asarray(per.sum() / n, dtype=z.dtype)
    return make_op("bce", out, (z,), lambda g: ((stable_sigmoid(x) - t).astype(z.dtype) * (g / n),))


def new_binary_classifier(image_config: ColumnConfig, patch_config: ColumnConfig, hidden_dim: int,
                          rng: RngStream) -> BinaryClassifier:
    # Borrow the ranker's column construction and He initialisation.
    host = SiameseRanker(image_config, patch_config, hidden_dim)
    init_parameters(host, rng)
    head = DenseHead(host.channel_dim, hidden_dim)
    w = head.params["head.dense0.weight"]
    w.data[...] = rng.normal(w.shape) * np.sqrt(2.0 / w.shape[1])
    # zero output layer: p = 0.5 for every image at initialisation
    return BinaryClassifier(host.image_column, host.patch_column, head)


def train_binary_baseline(
    train_records: Sequence[RatingRecord],
    val_records: Sequence[RatingRecord],
    store: ImageStore,
    cfg: TrainConfig,
    image_config: ColumnConfig,
    patch_config: Optional[ColumnConfig] = None,
    hidden_dim: int = 16,
    threshold: float = RATING_THRESHOLD,
    steps_per_epoch: Optional[int] = None,
) -> tuple[BinaryClassifier, TrainReport]:
    """Train a single-channel classifier on beautiful / not-beautiful labels.

    Same optimizer, schedule and batch size as the ranker. Early stopping and
    model selection follow validation cross-entropy: accuracy of a freshly
    initialised classifier plateaus at the majority class for many epochs
    while its loss is still falling.
    An epoch is one shuffled pass over the images unless ``steps_per_epoch``
    asks for more batches, in which case further reshuffled passes are
    chained (used to match the ranker's update budget).
    """
    y_train = beautiful(train_records, threshold)
    if y_train.all() or not y_train.any():
        raise ContractError("binary baseline needs both classes in the training set")
    if len(val_records) == 0:
        raise ContractError("binary baseline needs validation images")
    rng = RngStream(cfg.seed).spawn(0xB1)
    clf = new_binary_classifier(image_config, patch_config or image_config, hidden_dim, rng.spawn(1))
    params = clf.parameters()
    state = OptimizerState.for_params(params)
    ids = [r.image_id for r in train_records]
    val_ids = [r.image_id for r in val_records]
    y_val = beautiful(val_records, threshold)

    report = TrainReport()
    best = {k: t.data.copy() for k, t in params.items()}
    best_loss, stale = math.inf, 0
    for epoch in range(cfg.max_epochs):
        state.epoch, state.lr = epoch, lr_at(epoch, cfg)
        n_batches = max(steps_per_epoch or 0, math.ceil(len(ids) / cfg.batch_size))
        order = np.concatenate([rng.permutation(len(ids)) for _ in range(math.ceil(n_batches * cfg.batch_size / len(ids)))])
        total, seen = 0.0, 0
        for b in range(n_batches):
            sel = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            imgs, patches = store.views([ids[i] for i in sel], train=True, rng=rng)
            clf.zero_grad()
            with Tape() as tape:
                loss = bce_with_logits(clf.logit(imgs, patches, train=True, rng=rng), y_train[sel])
            backward(tape, loss)
            sgd_nesterov_step(params, state, cfg)
            total += float(loss.data) * len(sel)
            seen += len(sel)
        p_val = classifier_probabilities(clf, store, val_ids, cfg.batch_size)
        acc = float(((p_val > 0.5) == y_val).mean())
        eps = 1e-12
        vloss = float(-np.mean(y_val * np.log(p_val + eps) + (~y_val) * np.log(1 - p_val + eps)))
        report.rows.append(EpochRow(epoch, total / seen, acc, vloss, state.lr))
        significant = vloss < best_loss - cfg.min_improvement * abs(best_loss)
        if vloss < best_loss:
            best_loss = vloss
            report.best_epoch = epoch
            best = {k: t.data.copy() for k, t in params.items()}
        stale = 0 if significant else stale + 1
        if stale >= cfg.patience:
            report.stop_reason = f"no improvement for {cfg.patience} epochs"
            break
    else:
        report.stop_reason = f"reached max_epochs={cfg.max_epochs}"
    for k, t in params.items():
        t.data[...] = best[k]
    return clf, report


# --------------------------------------------------------------------------
# reports


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_rank_reports(reports: Sequence[RankReport], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "total", "correct", "undecided", "accuracy"])
        for r in reports:
            w.writerow([r.model, r.total, r.correct, r.undecided, _fmt(r.accuracy)])


def write_classify_reports(reports: Sequence[ClassifyReport], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "total", "accuracy", "threshold"])
        for r in reports:
            w.writerow([r.model, r.total, _fmt(r.accuracy), _fmt(r.threshold)])


def write_comparison(rank: Mapping[str, RankReport], classify: Mapping[str, ClassifyReport],
                     path: Union[str, Path]) -> None:
    """One row per model: ranking accuracy next to classification accuracy (percent)."""
    models = list(dict.fromkeys([*rank, *classify]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "ranking_accuracy_pct", "classification_accuracy_pct"])
        for m in models:
            ra = f"{100 * rank[m].accuracy:.2f}" if m in rank else ""
            ca = f"{100 * classify[m].accuracy:.2f}" if m in classify else ""
            w.writerow([m, ra, ca])


def accuracy_curve_svg(curves: Mapping[str, Sequence[float]], path: Union[str, Path],
                       width: int = 480, height: int = 300) -> None:
    """Line chart of per-epoch validation accuracy, one polyline per model."""
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]
    pad = 40
    longest = max((len(v) for v in curves.values()), default=1)
    xs = lambda i: pad + (width - 2 * pad) * (i / max(longest - 1, 1))
    ys = lambda a: height - pad - (height - 2 * pad) * a
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 8}" font-size="12" text-anchor="middle">epoch</text>',
        f'<text x="12" y="{height / 2:.1f}" font-size="12" transform="rotate(-90 12 {height / 2:.1f})" '
        f'text-anchor="middle">validation accuracy</text>',
    ]
    for tick in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{pad - 4}" y="{ys(tick) + 4:.1f}" font-size="10" text-anchor="end">{tick:.1f}</text>')
    for k, (name, vals) in enumerate(curves.items()):
        color = colors[k % len(colors)]
        pts = " ".join(f"{xs(i):.2f},{ys(v):.2f}" for i, v in enumerate(vals))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{width - pad}" y="{pad + 14 * k}" font-size="11" fill="{color}" text-anchor="end">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n", encoding="utf-8")


def emit_report(out_dir: Union[str, Path], rank: Sequence[RankReport] = (), classify: Sequence[ClassifyReport] = (),
                curves: Optional[Mapping[str, Sequence[float]]] = None) -> list[Path]:
    """Write whichever report files have content; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if rank:
        write_rank_reports(rank, out / "rank_report.csv")
        written.append(out / "rank_report.csv")
    if classify:
        write_classify_reports(classify, out / "classify_report.csv")
        written.append(out / "classify_report.csv")
    if rank and classify:
        write_comparison({r.model: r for r in rank}, {c.model: c for c in classify}, out / "comparison.csv")
        written.append(out / "comparison.csv")
    if curves:
        accuracy_curve_svg(curves, out / "val_accuracy.svg")
        written.append(out / "val_accuracy.svg")
    return written
