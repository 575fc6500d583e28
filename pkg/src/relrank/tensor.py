"""Minimal reverse-mode autodiff over numpy arrays.

Only the operations the ranking network needs are provided. Every op accepts
either a single item (``C x H x W`` images, rank-1 vectors) or a batch with a
leading axis; the math is identical per item.

Recording is explicit: operations executed inside ``with Tape() as tape:``
are appended to ``tape`` in execution order, so the record list is already
topologically sorted and ``backward`` is a single reverse sweep.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation's preconditions."""


class Tensor:
    """Dense array plus an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def _not_scalar(t: Tensor):
    raise ContractError(f"expected a scalar tensor, got shape {t.shape}")


@dataclass
class Record:
    op: str
    inputs: tuple
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None


@contextlib.contextmanager
def no_record():
    """Suspend recording (used by finite-difference probes)."""
    saved = Tape._stack
    Tape._stack = []
    try:
        yield
    finally:
        Tape._stack = saved


def make_op(op: str, out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    """Wrap ``out_data`` and record it on the active tape when any input needs a gradient.

    ``backward`` maps the output gradient to one gradient per input (``None``
    for inputs that need none).
    """
    tape = Tape.active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data)
    if needs:
        out.requires_grad = True
        tape.records.append(Record(op, tuple(inputs), out, backward))
    return out


def backward(tape: Tape, output: Tensor) -> None:
    """Accumulate d(output)/d(leaf) into every tracked leaf's ``grad``.

    Gradients of intermediate results are dropped once consumed; leaf tensors
    (parameters, inputs created with ``requires_grad=True``) keep theirs.
    """
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return
    output.grad = np.ones_like(output.data)
    for rec in reversed(tape.records):
        g = rec.output.grad
        if g is None:
            continue
        grads = rec.backward(g)
        for t, gi in zip(rec.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.data.shape:
                raise DimensionError(f"{rec.op}: gradient shape {gi.shape} != input shape {t.data.shape}")
            if t.grad is None:
                t.grad = np.array(gi, dtype=t.data.dtype)
            else:
                t.grad += gi
        if rec.output is not output:
            rec.output.grad = None


# --------------------------------------------------------------------------
# random streams


class RngStream:
    """Seeded PCG64 stream that counts how many draws it has served."""

    algorithm = "PCG64"

    def __init__(self, seed: int):
        self.seed = int(seed) & ((1 << 64) - 1)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))
        self.draws = 0

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, size=None) -> np.ndarray:
        self.draws += 1
        return self._gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        self.draws += 1
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        self.draws += 1
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        self.draws += 1
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        self.draws += 1
        return self._gen.choice(n, size=size, replace=replace)

    def spawn(self, key: int) -> "RngStream":
        """Independent child stream, derived deterministically from seed and key."""
        child = np.random.SeedSequence([self.seed, int(key)]).generate_state(1, dtype=np.uint64)[0]
        return RngStream(int(child))


# --------------------------------------------------------------------------
# convolution


@dataclass(frozen=True)
class ConvSpec:
    """(padding, filters, kernel, stride), as listed in column tables."""

    padding: int
    filters: int
    kernel: int
    stride: int = 1

    def __post_init__(self):
        if self.padding < 0 or self.filters < 1 or self.kernel < 1 or self.stride < 1:
            raise ValueError(f"invalid convolution spec {self}")

    def out_extent(self, extent: int) -> int:
        return conv_out_extent(extent, self.padding, self.kernel, self.stride)


def conv_out_extent(extent: int, padding: int, kernel: int, stride: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def _batched(x: np.ndarray, rank: int) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise DimensionError(f"expected rank {rank} or {rank + 1}, got shape {x.shape}")


# Test hook: set to a non-zero value to perturb the conv weight gradient.
_CONV_BACKWARD_FAULT = 0.0


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], spec: ConvSpec) -> Tensor:
    """Zero-padded 2-D cross-correlation.

    Args:
        x: ``C x H x W`` or ``N x C x H x W``.
        weight: ``F x C x K x K``.
        bias: ``F`` or None.
        spec: padding / filter count / kernel / stride.
    """
    xb, squeeze = _batched(x.data, 3)
    w = weight.data
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise DimensionError(f"conv2d: weight must be F x C x K x K, got {w.shape}")
    n, c, h, wd = xb.shape
    f, wc, k, _ = w.shape
    if wc != c:
        raise DimensionError(f"conv2d: channel axis mismatch, input has {c}, weight expects {wc}")
    if f != spec.filters or k != spec.kernel:
        raise DimensionError(f"conv2d: weight shape {w.shape} disagrees with {spec}")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"conv2d: bias axis 0 must be {f}, got {bias.shape}")
    p, s = spec.padding, spec.stride
    ho = conv_out_extent(h, p, k, s)
    wo = conv_out_extent(wd, p, k, s)
    if ho < 1:
        raise DimensionError(f"conv2d: height axis collapses ({h} with {spec})")
    if wo < 1:
        raise DimensionError(f"conv2d: width axis collapses ({wd} with {spec})")

    xp = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p))) if p else xb
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * s + 1 : s, : (wo - 1) * s + 1 : s]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = w.reshape(f, c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    if squeeze:
        out = out[0]

    def grad_fn(g):
        gb = g[None] if squeeze else g
        gm = gb.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        dw = (gm.T @ cols).reshape(w.shape)
        if _CONV_BACKWARD_FAULT:
            dw = dw + _CONV_BACKWARD_FAULT
        db = gm.sum(axis=0) if bias is not None else None
        dcols = (gm @ wmat).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros_like(xp)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p : p + h, p : p + wd] if p else dxp
        if squeeze:
            dx = dx[0]
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("conv2d", out, inputs, grad_fn)


def pad2d(x: Tensor, padding: int) -> Tensor:
    """Zero-pad the two trailing (spatial) axes by ``padding`` on every side."""
    if padding == 0:
        return x
    spec = [(0, 0)] * (x.ndim - 2) + [(padding, padding), (padding, padding)]
    out = np.pad(x.data, spec)

    def grad_fn(g):
        return (g[..., padding:-padding, padding:-padding],)

    return make_op("pad2d", out, (x,), grad_fn)


def maxpool2(x: Tensor) -> Tensor:
    """Non-overlapping 2x2 max-pool; odd trailing rows/columns are dropped."""
    if x.ndim < 2:
        raise DimensionError(f"maxpool2: need spatial axes, got shape {x.shape}")
    h, w = x.shape[-2:]
    if h < 2:
        raise DimensionError(f"maxpool2: height axis extent {h} < 2")
    if w < 2:
        raise DimensionError(f"maxpool2: width axis extent {w} < 2")
    ho, wo = h // 2, w // 2
    lead = x.shape[:-2]
    xc = x.data[..., : 2 * ho, : 2 * wo]
    # window entries ordered (0,0),(0,1),(1,0),(1,1) so argmax picks the first row-major max
    win = xc.reshape(*lead, ho, 2, wo, 2).swapaxes(-3, -2).reshape(*lead, ho, wo, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[..., : 2 * ho, : 2 * wo] = gwin.reshape(*lead, ho, wo, 2, 2).swapaxes(-3, -2).reshape(*lead, 2 * ho, 2 * wo)
        return (gx,)

    return make_op("maxpool2", out, (x,), grad_fn)


# --------------------------------------------------------------------------
# elementwise and dense


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return make_op("relu", out, (x,), lambda g: (g * mask,))


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``weight @ x + bias`` with ``weight`` of shape ``M x N``."""
    if weight.ndim != 2:
        raise DimensionError(f"dense: weight must be M x N, got {weight.shape}")
    m, nin = weight.shape
    if x.ndim not in (1, 2) or x.shape[-1] != nin:
        raise DimensionError(f"dense: input feature axis is {x.shape[-1:]} but weight expects {nin}")
    if bias is not None and bias.shape != (m,):
        raise DimensionError(f"dense: bias axis 0 must be {m}, got {bias.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        dx = g @ weight.data
        dw = np.outer(g, x.data) if x.ndim == 1 else g.T @ x.data
        db = (g if g.ndim == 1 else g.sum(axis=0)) if bias is not None else None
        return dx, dw, db

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return make_op("dense", out, inputs, grad_fn)


def dropout(x: Tensor, rate: float, train: bool, rng: Optional[RngStream]) -> Tensor:
    """Inverted dropout: identity in eval mode, mask-and-rescale in train mode."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("train-mode dropout needs an RngStream")
    keep = (rng.uniform(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return make_op("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Join along the last axis (rank-1 vectors or batches of them)."""
    if a.ndim != b.ndim or a.ndim not in (1, 2) or a.shape[:-1] != b.shape[:-1]:
        raise DimensionError(f"concat: incompatible ranks/shapes {a.shape} and {b.shape}")
    na = a.shape[-1]
    out = np.concatenate([a.data, b.data], axis=-1)
    return make_op("concat", out, (a, b), lambda g: (g[..., :na], g[..., na:]))


def subtract(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"subtract: shape mismatch {a.shape} vs {b.shape}")
    return make_op("subtract", a.data - b.data, (a, b), lambda g: (g, -g))


def flatten(x: Tensor, batched: bool = False) -> Tensor:
    """Collapse everything (or everything after the batch axis) to one axis."""
    shape = x.shape
    out = x.data.reshape(shape[0], -1) if batched else x.data.reshape(-1)
    return make_op("flatten", out, (x,), lambda g: (g.reshape(shape),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    shape = x.shape
    out = np.asarray(x.data.sum(), dtype=x.dtype)
    return make_op("sum", out, (x,), lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    out = np.asarray(x.data.sum() / n, dtype=x.dtype)
    return make_op("mean", out, (x,), lambda g: (np.broadcast_to(g / n, shape).astype(x.dtype),))


def scale(x: Tensor, factor: float) -> Tensor:
    return make_op("scale", x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x: Tensor) -> Tensor:
    out = stable_sigmoid(x.data)
    return make_op("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype if z.dtype.kind == "f" else np.float64)


# --------------------------------------------------------------------------
# finite-difference verification


def grad_check(fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5,
               max_coords: Optional[int] = None, rng: Optional[RngStream] = None) -> float:
    """Largest relative disagreement between analytic and central-difference gradients.

    ``fn`` is re-evaluated many times and must be deterministic; it is
    evaluated twice up front to confirm that. With ``max_coords`` only that
    many coordinates per parameter are probed, chosen by ``rng``.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("grad_check requires 64-bit parameters")
        p.zero_grad()
    with no_record():
        first = float(fn().data)
        second = float(fn().data)
    if first != second:
        raise ContractError("grad_check: fn is not deterministic (dropout in train mode?)")
    with Tape() as tape:
        out = fn()
    backward(tape, out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    with no_record():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            af = a.reshape(-1)
            coords = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = (rng or RngStream(0)).choice(flat.size, max_coords, replace=False)
            for i in coords:
                orig = flat[i]
                flat[i] = orig + step
                up = float(fn().data)
                flat[i] = orig - step
                down = float(fn().data)
                flat[i] = orig
                num = (up - down) / (2 * step)
                err = abs(af[i] - num) / max(abs(af[i]), abs(num), 1e-8)
                worst = max(worst, err)
    return worst
