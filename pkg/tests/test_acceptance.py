"""Acceptance suite: one PASS/FAIL line per criterion, at the stated tolerances.

The end-to-end criteria share one seed-0 pipeline run through the command
line (synth -> build-pairs -> train -> eval). Seed 0 is the default seed and
was fixed before any result was seen.
"""

import csv
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from relrank.checkpoint import load_checkpoint, save_checkpoint
from relrank.cli import EXIT_OK, main
from relrank.data import (
    ImageStore,
    PairConstraints,
    PairSample,
    PreprocessConfig,
    RatingRecord,
    SplitSpec,
    build_pairs,
    load_manifest,
    load_pairs,
    pair_images,
    split_disjoint,
)
from relrank.evaluate import adapt_to_classifier, classification_accuracy, corpus_midpoint
from relrank.gradcheck import CHECKS, TOLERANCE, ranker_probe, run_suite
from relrank.network import (
    PAPER_COLUMN,
    PAPER_HIDDEN,
    TINY_COLUMN,
    TINY_HIDDEN,
    PairViews,
    SiameseRanker,
    channel_features,
    column_forward,
    init_parameters,
    score_pair,
)
from relrank.tensor import RngStream, Tape, Tensor, backward, no_record
from relrank.training import OptimizerState, TrainConfig, hinge, lr_at, margin_loss, score_pairs, sgd_nesterov_step

SEED = 0
GAP_POINTS = 3.0


def read_rows(path: Path) -> dict[str, dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["model"]: row for row in csv.DictReader(fh)}


def tree_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def tiny_ranker(seed: int) -> SiameseRanker:
    return init_parameters(SiameseRanker(TINY_COLUMN, TINY_COLUMN, TINY_HIDDEN), RngStream(seed))


def random_views(rng: np.random.Generator, n: int, side: int = 32) -> PairViews:
    return PairViews(*(rng.uniform(-0.5, 0.5, (n, 3, side, side)).astype(np.float32) for _ in range(4)))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    corpus, pairs, run = root / "corpus", root / "pairs", root / "run"
    manifest = corpus / "manifest.csv"
    common = ["--seed", str(SEED), "--deterministic"]
    t0 = time.perf_counter()
    assert main(["synth", "--n", "200", *common, "--out", str(corpus)]) == EXIT_OK
    assert main(["build-pairs", "--manifest", str(manifest), *common, "--out", str(pairs)]) == EXIT_OK
    assert main(["train", "--manifest", str(manifest), "--pairs", str(pairs / "pairs.csv"), "--max-epochs", "50",
                 "--batch-size", "50", "--delta", "3", *common, "--out", str(run)]) == EXIT_OK
    assert main(["eval", "--checkpoint", str(run / "checkpoint.rrnk"), "--manifest", str(manifest), *common,
                 "--out", str(root / "eval_rank")]) == EXIT_OK
    e2e_seconds = time.perf_counter() - t0
    assert main(["eval", "--checkpoint", str(run / "checkpoint.rrnk"), "--manifest", str(manifest), "--mode", "baseline",
                 "--midpoint", "--max-epochs", "50", *common, "--out", str(root / "eval_baseline")]) == EXIT_OK
    return {"root": root, "manifest": manifest, "run": run, "e2e_seconds": e2e_seconds}


def test_paper_scale_not_reproduced(verdicts):
    # Full-scale accuracies need a large real rated corpus; only the paper-sized network is exercised here.
    ranker = SiameseRanker(PAPER_COLUMN, PAPER_COLUMN, PAPER_HIDDEN)
    init_parameters(ranker, RngStream(0))
    x = np.random.default_rng(0).uniform(-0.5, 0.5, (3, 224, 224)).astype(np.float32)
    with no_record():
        f = column_forward(ranker.image_column, x)
    ok = f.shape == (256,) and ranker.channel_dim == 512
    assert verdicts.record(
        "paper-scale results", ok,
        "not reproduced at desk scale (needs the full rated corpus); paper-size network builds and runs, "
        "replaced by the property suite below",
    )


def test_gradient_suite(verdicts):
    t0 = time.perf_counter()
    worst = run_suite(range(20))
    seconds = time.perf_counter() - t0
    probe = ranker_probe(0)
    failing = [k for k, v in worst.items() if not v < TOLERANCE]
    ok = not failing and seconds < 60 and set(worst) == set(CHECKS)
    detail = (f"{len(worst)} checks x 20 seeds, worst {max(worst.values()):.2e} ({max(worst, key=worst.get)}), "
              f"ranker worst {worst['ranker']:.2e} over {probe.probed} probed coords/seed, {seconds:.1f}s")
    if failing:
        detail += f"; failing: {failing}"
    assert verdicts.record("gradient suite < 1e-4 in < 60 s", ok, detail)


def test_architectural_invariants(verdicts):
    rng = np.random.default_rng(0)
    self_zero, swap_ok = True, True
    for seed in range(20):
        r = tiny_ranker(seed)
        pv = random_views(rng, 3)
        same = PairViews(pv.image1, pv.patch1, pv.image1, pv.patch1)
        with no_record():
            self_zero &= bool(np.all(score_pair(r, same).data == 0.0))
            c1, c2 = channel_features(r, pv)
            s1, s2 = channel_features(r, pv.swapped())
            pre = r.comparator.preactivation(Tensor(c1.data - c2.data)).data
            pre_s = r.comparator.preactivation(Tensor(s1.data - s2.data)).data
        swap_ok &= s1.data.tobytes() == c2.data.tobytes() and s2.data.tobytes() == c1.data.tobytes()
        swap_ok &= bool(np.array_equal(pre_s, -pre))

    r = tiny_ranker(1)
    cfg = TrainConfig(lr0=0.01)
    params = r.parameters()
    state = OptimizerState.for_params(params, lr=cfg.lr0)
    stream = RngStream(5)
    for _ in range(100):
        pv = random_views(rng, 4)
        y = np.where(rng.uniform(size=4) < 0.5, -1, 1)
        r.zero_grad()
        with Tape() as tape:
            loss = hinge(score_pair(r, pv, train=True, rng=stream), y, cfg.delta)
        backward(tape, loss)
        sgd_nesterov_step(params, state, cfg)
    pv = random_views(rng, 2)
    same = PairViews(pv.image1, pv.patch1, pv.image1, pv.patch1)
    with no_record():
        c1, c2 = channel_features(r, same)
    shared = c1.data.tobytes() == c2.data.tobytes()

    trace = [side for name, side in PAPER_COLUMN.shape_trace() if name not in ("input", "flatten", "dense0")]
    trace_ok = trace == [230, 112, 56, 54, 27, 27, 25, 256]
    ok = self_zero and swap_ok and shared and trace_ok
    assert verdicts.record(
        "architectural invariants", ok,
        f"d(I,I)=0 {self_zero}; swap bitwise {swap_ok}; channels share weights after 100 steps {shared}; "
        f"paper trace {trace}",
    )


def test_loss_law(verdicts):
    rng = np.random.default_rng(0)
    d = rng.uniform(-10, 10, 10_000)
    d[:500] = rng.choice([-3.0, 3.0, 0.0, 1.5], 500)
    y = np.where(rng.uniform(size=10_000) < 0.5, -1, 1)
    delta = rng.choice([0.0, 0.5, 1.0, 3.0, 5.0], 10_000)
    loss = np.array([margin_loss(a, b, c) for a, b, c in zip(d, y, delta)])
    nonneg = bool(np.all(loss >= 0))
    zero_iff = bool(np.all((loss == 0) == (y * d >= delta)))
    h = rng.uniform(-1, 1, 10_000)
    moved = np.array([margin_loss(a + e, b, c) for a, e, b, c in zip(d, h, y, delta)])
    lipschitz = bool(np.all(np.abs(moved - loss) <= np.abs(h) + 1e-12))

    r = tiny_ranker(0)
    r.comparator.w2.data[...] = 0.0
    pv = random_views(rng, 6)
    labels = np.array([1, -1, 1, -1, 1, -1])
    with no_record():
        scores = score_pair(r, pv)
        degenerate = float(hinge(scores, labels, 0.0).data)
        margin = float(hinge(scores, labels, 3.0).data)
    ok = nonneg and zero_iff and lipschitz and degenerate == 0.0 and margin == 3.0
    assert verdicts.record(
        "loss law", ok,
        f"10^4 triples: L>=0 {nonneg}, L=0 iff y*d>=delta {zero_iff}, 1-Lipschitz {lipschitz}; "
        f"zero head loss {degenerate} at delta 0, {margin} at delta 3",
    )


def test_schedule_law(verdicts):
    cfg = TrainConfig()
    exact = all(lr_at(e, cfg) == 0.001 * 0.85 ** (e // 10) for e in range(101))
    first = all(lr_at(e, cfg) == 0.001 for e in range(10))
    tenth = lr_at(10, cfg)
    ok = exact and first and abs(tenth - 0.00085) <= 1e-18
    assert verdicts.record("schedule law", ok, f"exact over 0..100 {exact}; epochs 0-9 at 0.001 {first}; epoch 10 {tenth!r}")


def test_pair_oracle(verdicts):
    t0 = time.perf_counter()
    mismatches, violations, total = 0, 0, 0
    c = PairConstraints()
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 201))
        recs = [RatingRecord(f"i{k}", "p", str(rng.choice(["a", "b", "c"])), float(np.round(rng.uniform(1, 10), 1)),
                             float(rng.choice([rng.uniform(0, 4), 2.6])), 10) for k in range(n)]
        by = {r.image_id: r for r in recs}
        got = build_pairs(recs, c).pairs
        oracle = {frozenset((a.image_id, b.image_id)) for a, b in itertools.combinations(recs, 2)
                  if a.category == b.category and a.variance < 2.6 and b.variance < 2.6 and abs(a.mean - b.mean) >= 1.0}
        mismatches += {p.key for p in got} != oracle
        for p in got:
            a, b = by[p.first], by[p.second]
            violations += not (abs(a.mean - b.mean) >= 1.0 and a.variance < 2.6 and b.variance < 2.6
                               and a.category == b.category and p.label == (1 if a.mean > b.mean else -1))
        total += len(got)
    seconds = time.perf_counter() - t0
    ok = mismatches == 0 and violations == 0 and seconds < 30
    assert verdicts.record("pair-builder oracle", ok,
                           f"50 manifests, {total} pairs, {mismatches} set mismatches, {violations} violations, {seconds:.1f}s")


def test_split_disjointness(verdicts, pipeline):
    leaks = 0
    splits_checked = 0
    run_sets = [pair_images(load_pairs(pipeline["run"] / f"split_{s}.csv")) for s in ("train", "val", "test")]
    leaks += sum(len(a & b) for a, b in itertools.combinations(run_sets, 2))
    splits_checked += 1
    for seed in range(50):
        rng = np.random.default_rng(seed)
        ids = [f"x{k}" for k in range(int(rng.integers(50, 400)))]
        raw = {tuple(sorted(rng.choice(len(ids), 2, replace=False))) for _ in range(1000)}
        pairs = [PairSample(ids[a], ids[b], 1, 1.0) for a, b in sorted(raw)]
        parts = split_disjoint(pairs, SplitSpec(0.6, 0.2, 0.2), seed=seed)
        sets = [pair_images(p) for p in parts]
        leaks += sum(len(a & b) for a, b in itertools.combinations(sets, 2))
        splits_checked += 1
    assert verdicts.record("split disjointness", leaks == 0, f"{splits_checked} splits, {leaks} shared image ids")


def test_end_to_end_recovery(verdicts, pipeline):
    rank = read_rows(pipeline["root"] / "eval_rank" / "rank_report.csv")["ranker"]
    epochs = len((pipeline["run"] / "train_report.csv").read_text().splitlines()) - 1
    acc = float(rank["accuracy"])
    seconds = pipeline["e2e_seconds"]
    ok = acc >= 0.9 and seconds < 600 and epochs <= 50
    assert verdicts.record(
        "end-to-end ranking recovery >= 90% in < 10 min", ok,
        f"test accuracy {acc:.4f} on {rank['total']} image-disjoint pairs, {epochs} epochs, {seconds:.0f}s",
    )


def test_ranker_beats_binary_baseline(verdicts, pipeline):
    rows = read_rows(pipeline["root"] / "eval_baseline" / "rank_report.csv")
    ranker, baseline = float(rows["ranker"]["accuracy"]), float(rows["binary_baseline"]["accuracy"])
    gap = 100 * (ranker - baseline)
    assert verdicts.record(
        "ranker exceeds binary baseline by >= 3 points", gap >= GAP_POINTS,
        f"ranker {ranker:.4f}, baseline {baseline:.4f}, gap {gap:+.2f} points (seed {SEED})",
    )


def test_zero_retraining_adaptation(verdicts, pipeline):
    ranker, header = load_checkpoint(pipeline["run"] / "checkpoint.rrnk")
    records = load_manifest(pipeline["manifest"])
    by_id = {r.image_id: r for r in records}
    test_ids = sorted(pair_images(load_pairs(pipeline["run"] / "split_test.csv")))
    pre = dict(header["extra"]["preprocess"], rgb_mean=tuple(header["rgb_mean"]))
    store = ImageStore(records, pipeline["manifest"].parent, PreprocessConfig(**pre))
    before = {k: t.data.tobytes() for k, t in ranker.parameters().items()}
    clf = adapt_to_classifier(ranker)
    midpoint = corpus_midpoint(records)
    report = classification_accuracy(clf, [by_id[i] for i in test_ids], store, midpoint)
    unchanged = before == {k: t.data.tobytes() for k, t in ranker.parameters().items()}
    cli = float(read_rows(pipeline["root"] / "eval_baseline" / "classify_report.csv")["adapted_ranker"]["accuracy"])
    ok = unchanged and report.accuracy > 0.5 and abs(cli - report.accuracy) < 1e-6
    assert verdicts.record(
        "zero-retraining adaptation > 50%", ok,
        f"accuracy {report.accuracy:.4f} on {report.total} test images at midpoint {midpoint:.3f}; "
        f"weights bit-identical {unchanged}",
    )


def test_determinism_and_persistence(verdicts, pipeline, tmp_path):
    manifest = pipeline["manifest"]
    pairs = pipeline["root"] / "pairs" / "pairs.csv"
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", "--manifest", str(manifest), "--pairs", str(pairs), "--max-epochs", "3", "--seed", "4",
                     "--deterministic", "--out", str(out)]) == EXIT_OK
        assert main(["eval", "--checkpoint", str(out / "checkpoint.rrnk"), "--manifest", str(manifest),
                     "--deterministic", "--out", str(out / "eval")]) == EXIT_OK
        outs.append(tree_bytes(out))
    identical = outs[0] == outs[1]

    src = pipeline["run"] / "checkpoint.rrnk"
    ranker, header = load_checkpoint(src)
    save_checkpoint(ranker, header["train"], header["rgb_mean"], tmp_path / "copy.rrnk", header["extra"])
    bytes_equal = src.read_bytes() == (tmp_path / "copy.rrnk").read_bytes()
    again, _ = load_checkpoint(tmp_path / "copy.rrnk")
    records = load_manifest(manifest)
    pre = dict(header["extra"]["preprocess"], rgb_mean=tuple(header["rgb_mean"]))
    store = ImageStore(records, manifest.parent, PreprocessConfig(**pre))
    test = load_pairs(pipeline["run"] / "split_test.csv")
    scores_equal = np.array_equal(score_pairs(ranker, test, store), score_pairs(again, test, store))
    tensors_equal = all(np.array_equal(t.data, again.parameters()[k].data) for k, t in ranker.parameters().items())
    ok = identical and bytes_equal and scores_equal and tensors_equal
    assert verdicts.record(
        "determinism and persistence", ok,
        f"two seeded runs byte-identical {identical} ({len(outs[0])} files); checkpoint re-save byte-identical "
        f"{bytes_equal}; tensors {tensors_equal}; pair scores {scores_equal}",
    )
