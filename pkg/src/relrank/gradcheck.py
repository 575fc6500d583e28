"""Finite-difference checks for every differentiable operation.

Each check builds small random 64-bit inputs from a seed, reduces the
operation's output to a scalar through a fixed random projection and
compares analytic and central-difference gradients with ``grad_check``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .evaluate import bce_with_logits
from .network import TINY_COLUMN, TINY_HIDDEN, PairViews, SiameseRanker, init_parameters, score_pair
from .tensor import (
    ContractError,
    ConvSpec,
    RngStream,
    Tape,
    Tensor,
    backward,
    concat,
    conv2d,
    dense,
    dropout,
    flatten,
    grad_check,
    maxpool2,
    mean,
    no_record,
    pad2d,
    relu,
    reshape,
    scale,
    sigmoid,
    subtract,
    total,
)
from .training import hinge

TOLERANCE = 1e-4
STEP = 1e-5


def _leaf(rng: RngStream, *shape: int) -> Tensor:
    return Tensor(rng.normal(shape), requires_grad=True)


def _project(x: Tensor, rng_seed: int) -> Tensor:
    """Scalar <x, w> for a seeded random w, so every output element matters."""
    w = np.random.default_rng(rng_seed).standard_normal((1, x.data.size))
    return total(dense(flatten(x), Tensor(w)))


def _distinct(rng: RngStream, *shape: int, gap: float = 1e-2) -> Tensor:
    # Well separated values keep max-pool and relu away from their kinks.
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2 + 0.5) * gap * 10
    vals = vals[rng.permutation(n)] + rng.uniform(n) * gap
    return Tensor(vals.reshape(shape), requires_grad=True)


def check_conv2d(seed: int) -> float:
    rng = RngStream(seed)
    x, w, b = _leaf(rng, 2, 3, 7, 7), _leaf(rng, 4, 3, 3, 3), _leaf(rng, 4)
    return grad_check(lambda: _project(conv2d(x, w, b, ConvSpec(1, 4, 3, 2)), seed), [x, w, b], STEP)


def check_pad2d(seed: int) -> float:
    rng = RngStream(seed)
    x = _leaf(rng, 2, 4, 4)
    return grad_check(lambda: _project(pad2d(x, 2), seed), [x], STEP)


def check_maxpool2(seed: int) -> float:
    rng = RngStream(seed)
    x = _distinct(rng, 2, 2, 5, 5)
    return grad_check(lambda: _project(maxpool2(x), seed), [x], STEP)


def check_relu(seed: int) -> float:
    rng = RngStream(seed)
    x = _distinct(rng, 3, 8)
    return grad_check(lambda: _project(relu(x), seed), [x], STEP)


def check_dense(seed: int) -> float:
    rng = RngStream(seed)
    x, w, b = _leaf(rng, 4, 6), _leaf(rng, 5, 6), _leaf(rng, 5)
    return grad_check(lambda: _project(dense(x, w, b), seed), [x, w, b], STEP)


def check_dropout(seed: int) -> float:
    rng = RngStream(seed)
    x = _leaf(rng, 4, 6)
    # a fresh stream per evaluation gives the same mask every time
    return grad_check(lambda: _project(dropout(x, 0.5, True, RngStream(seed + 1)), seed), [x], STEP)


def check_concat(seed: int) -> float:
    rng = RngStream(seed)
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 2)
    return grad_check(lambda: _project(concat(a, b), seed), [a, b], STEP)


def check_subtract(seed: int) -> float:
    rng = RngStream(seed)
    a, b = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    return grad_check(lambda: _project(subtract(a, b), seed), [a, b], STEP)


def check_flatten(seed: int) -> float:
    rng = RngStream(seed)
    x = _leaf(rng, 2, 3, 4)
    return grad_check(lambda: _project(flatten(x, batched=True), seed), [x], STEP)


def check_reshape(seed: int) -> float:
    rng = RngStream(seed)
    x = _leaf(rng, 2, 6)
    return grad_check(lambda: _project(reshape(x, (3, 4)), seed), [x], STEP)


def check_sum(seed: int) -> float:
    rng = RngStream(seed)
    x = _leaf(rng, 3, 5)
    return grad_check(lambda: total(x), [x], STEP)


def check_mean(seed: int) -> float:
    rng = RngStream(seed)
    x = _leaf(rng, 3, 5)
    return grad_check(lambda: mean(x), [x], STEP)


def check_scale(seed: int) -> float:
    rng = RngStream(seed)
    x = _leaf(rng, 3, 5)
    return grad_check(lambda: _project(scale(x, -1.7), seed), [x], STEP)


def check_sigmoid(seed: int) -> float:
    rng = RngStream(seed)
    x = _leaf(rng, 3, 5)
    return grad_check(lambda: _project(sigmoid(x), seed), [x], STEP)


def check_hinge(seed: int) -> float:
    rng = RngStream(seed)
    d = _distinct(rng, 8, gap=0.5)
    y = np.where(rng.uniform(8) < 0.5, -1, 1)
    # some pairs inside the margin, some beyond it
    return grad_check(lambda: hinge(d, y, 3.0), [d], STEP)


def check_bce(seed: int) -> float:
    rng = RngStream(seed)
    z = _leaf(rng, 8)
    t = rng.uniform(8) < 0.5
    return grad_check(lambda: bce_with_logits(z, t), [z], STEP)


def kink_state(fn: Callable[[], Tensor]) -> tuple[float, list[np.ndarray]]:
    """Value and discrete state of one forward pass (relu on/off pattern, max-pool winners)."""
    with Tape() as tape:
        value = float(fn().data)
    state = []
    for rec in tape.records:
        if rec.op == "relu":
            state.append(rec.output.data > 0)
        elif rec.op == "maxpool2":
            x = rec.inputs[0].data
            h, w = x.shape[-2] // 2, x.shape[-1] // 2
            win = x[..., : 2 * h, : 2 * w].reshape(*x.shape[:-2], h, 2, w, 2)
            state.append(np.moveaxis(win, -3, -2).reshape(*x.shape[:-2], h, w, 4).argmax(-1))
    return value, state


def _same_state(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


@dataclass
class ProbeResult:
    worst: float
    probed: int
    skipped: int


def boundary_aware_check(fn: Callable[[], Tensor], params: Iterable[Tensor], coords: int, rng: RngStream,
                         step: float = STEP) -> ProbeResult:
    """``grad_check`` restricted to points where the loss is smooth.

    A coordinate whose +/- ``step`` probes change the relu pattern or a pool
    winner straddles a kink, so central differences say nothing there; it is
    skipped. An analytic gradient of exactly zero is accepted when the numeric
    one is within float64 roundoff of the loss value.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = fn()
    backward(tape, out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    _, base = kink_state(fn)
    roundoff = 8 * np.finfo(np.float64).eps * max(1.0, abs(float(out.data))) / step
    worst, probed, skipped = 0.0, 0, 0
    for p, a in zip(params, analytic):
        flat, af = p.data.reshape(-1), a.reshape(-1)
        picks = range(flat.size) if flat.size <= coords else rng.choice(flat.size, coords, replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + step
            up, up_state = kink_state(fn)
            flat[i] = orig - step
            down, down_state = kink_state(fn)
            flat[i] = orig
            smooth = _same_state(up_state, base) and _same_state(down_state, base)
            if not smooth:
                skipped += 1
                continue
            num = (up - down) / (2 * step)
            probed += 1
            if af[i] == 0.0 and abs(num) <= roundoff:
                continue
            worst = max(worst, abs(af[i] - num) / max(abs(af[i]), abs(num), 1e-8))
    for p in params:
        p.zero_grad()
    return ProbeResult(worst, probed, skipped)


def ranker_probe(seed: int, coords: int = 6) -> ProbeResult:
    """Tiny Siamese ranker in train mode (fixed dropout masks) under the margin loss."""
    rng = RngStream(seed)
    ranker = SiameseRanker(TINY_COLUMN, TINY_COLUMN, TINY_HIDDEN, dtype=np.float64)
    init_parameters(ranker, rng.spawn(1))
    # Zero biases put every all-padding receptive field exactly on a relu kink.
    for name, t in ranker.parameters().items():
        if name.endswith(".bias"):
            t.data[...] = 0.1 * rng.normal(t.shape)
    side = TINY_COLUMN.input_side
    # inputs on the scale the pipeline feeds the network (mean-subtracted, /255)
    pv = PairViews(*(rng.uniform((2, 3, side, side)) - 0.5 for _ in range(4)))
    y = np.array([1, -1])
    delta = 3.0

    def scores():
        return score_pair(ranker, pv, train=True, rng=RngStream(seed + 7))

    with no_record():
        d = scores().data
    if np.any(np.abs(y * d - delta) <= 1e-3):
        raise ContractError("ranker probe landed on the hinge boundary")
    return boundary_aware_check(lambda: hinge(scores(), y, delta), ranker.parameters().values(), coords, rng.spawn(2))


def check_ranker(seed: int) -> float:
    return ranker_probe(seed).worst


CHECKS: dict[str, Callable[[int], float]] = {
    "conv2d": check_conv2d,
    "pad2d": check_pad2d,
    "maxpool2": check_maxpool2,
    "relu": check_relu,
    "dense": check_dense,
    "dropout": check_dropout,
    "concat": check_concat,
    "subtract": check_subtract,
    "flatten": check_flatten,
    "reshape": check_reshape,
    "sum": check_sum,
    "mean": check_mean,
    "scale": check_scale,
    "sigmoid": check_sigmoid,
    "hinge": check_hinge,
    "bce": check_bce,
    "ranker": check_ranker,
}


def run_suite(seeds: Iterable[int]) -> dict[str, float]:
    """Worst relative error per operation over all seeds."""
    seeds = list(seeds)
    return {name: max(fn(s) for s in seeds) for name, fn in CHECKS.items()}
