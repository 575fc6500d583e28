"""Two-channel, four-column Siamese ranker.

Each channel sees one image of the pair as two views (the warped whole image
and a local patch). The image column and the patch column each have a single
parameter set that both channels use, so channel 1 and channel 2 are the same
function. The comparator head maps the channel-feature difference to a scalar
score ``d = w2 . relu(w1 . (C1 - C2))``; ``d > 0`` means the first image is
ranked above the second.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .tensor import (
    ConvSpec,
    DimensionError,
    RngStream,
    Tensor,
    concat,
    conv2d,
    dense,
    dropout,
    flatten,
    maxpool2,
    no_record,
    pad2d,
    relu,
    reshape,
    subtract,
)


class ConfigError(ValueError):
    """A column configuration cannot be realized (some extent underflows)."""


@dataclass(frozen=True)
class ColumnConfig:
    input_side: int
    pre_pad: int
    conv_specs: tuple[ConvSpec, ...]
    pool_after: tuple[int, ...]
    dense_sizes: tuple[int, ...]
    dropout_rate: float = 0.5
    in_channels: int = 3

    def shape_trace(self) -> list[tuple[str, int]]:
        """Spatial extent after every stage, ending with flatten and dense widths.

        Raises ConfigError naming the first stage whose output would be empty.
        """
        side = self.input_side + 2 * self.pre_pad
        trace = [("input", self.input_side), ("pre_pad", side)]
        for i, spec in enumerate(self.conv_specs):
            side = spec.out_extent(side)
            if side < 1:
                raise ConfigError(f"conv{i}: output extent {side} < 1 for {spec}")
            trace.append((f"conv{i}", side))
            if i in self.pool_after:
                if side < 2:
                    raise ConfigError(f"pool{i}: input extent {side} < 2")
                side //= 2
                trace.append((f"pool{i}", side))
        filters = self.conv_specs[-1].filters if self.conv_specs else self.in_channels
        trace.append(("flatten", filters * side * side))
        for j, width in enumerate(self.dense_sizes):
            if width < 1:
                raise ConfigError(f"dense{j}: width {width} < 1")
            trace.append((f"dense{j}", width))
        return trace

    @property
    def flat_dim(self) -> int:
        return dict(self.shape_trace())["flatten"]

    @property
    def feature_dim(self) -> int:
        return self.dense_sizes[-1] if self.dense_sizes else self.flat_dim

    def to_dict(self) -> dict:
        return {
            "input_side": self.input_side,
            "pre_pad": self.pre_pad,
            "conv_specs": [[s.padding, s.filters, s.kernel, s.stride] for s in self.conv_specs],
            "pool_after": list(self.pool_after),
            "dense_sizes": list(self.dense_sizes),
            "dropout_rate": self.dropout_rate,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnConfig":
        return cls(
            input_side=int(d["input_side"]),
            pre_pad=int(d["pre_pad"]),
            conv_specs=tuple(ConvSpec(*map(int, s)) for s in d["conv_specs"]),
            pool_after=tuple(int(i) for i in d["pool_after"]),
            dense_sizes=tuple(int(w) for w in d["dense_sizes"]),
            dropout_rate=float(d["dropout_rate"]),
            in_channels=int(d.get("in_channels", 3)),
        )


PAPER_COLUMN = ColumnConfig(
    input_side=224,
    pre_pad=3,
    conv_specs=(ConvSpec(2, 64, 11, 2), ConvSpec(1, 64, 5, 1), ConvSpec(1, 64, 3, 1), ConvSpec(0, 64, 3, 1)),
    pool_after=(0, 1),
    dense_sizes=(1000, 256),
    dropout_rate=0.5,
)

TINY_COLUMN = ColumnConfig(
    input_side=32,
    pre_pad=3,
    conv_specs=(ConvSpec(2, 8, 5, 2), ConvSpec(1, 8, 3, 1)),
    pool_after=(0, 1),
    dense_sizes=(32, 16),
    dropout_rate=0.5,
)

PAPER_HIDDEN = 256
TINY_HIDDEN = 16


class Column:
    """One convolutional stack with its own parameters."""

    def __init__(self, config: ColumnConfig, prefix: str, dtype=np.float32):
        config.shape_trace()
        self.config = config
        self.prefix = prefix
        self.params: dict[str, Tensor] = {}
        cin = config.in_channels
        for i, spec in enumerate(config.conv_specs):
            self._add(f"conv{i}.weight", (spec.filters, cin, spec.kernel, spec.kernel), dtype)
            self._add(f"conv{i}.bias", (spec.filters,), dtype)
            cin = spec.filters
        width = config.flat_dim
        for j, out in enumerate(config.dense_sizes):
            self._add(f"dense{j}.weight", (out, width), dtype)
            self._add(f"dense{j}.bias", (out,), dtype)
            width = out

    def _add(self, name: str, shape: tuple, dtype) -> None:
        self.params[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=f"{self.prefix}.{name}")

    def forward(self, view: Tensor, train: bool = False, rng: Optional[RngStream] = None) -> Tensor:
        cfg = self.config
        if view.shape[-1] != cfg.input_side or view.shape[-2] != cfg.input_side:
            raise DimensionError(
                f"{self.prefix}: view side {view.shape[-2:]} does not match input_side {cfg.input_side}"
            )
        batched = view.ndim == 4
        x = pad2d(view, cfg.pre_pad)
        for i, spec in enumerate(cfg.conv_specs):
            x = relu(conv2d(x, self.params[f"conv{i}.weight"], self.params[f"conv{i}.bias"], spec))
            if i in cfg.pool_after:
                x = maxpool2(x)
        x = dropout(x, cfg.dropout_rate, train, rng)
        x = flatten(x, batched=batched)
        for j in range(len(cfg.dense_sizes)):
            x = relu(dense(x, self.params[f"dense{j}.weight"], self.params[f"dense{j}.bias"]))
            x = dropout(x, cfg.dropout_rate, train, rng)
        return x


@dataclass
class ComparatorHead:
    """Bias-free ``channel_dim -> hidden -> 1`` map."""

    w1: Tensor
    w2: Tensor

    @classmethod
    def create(cls, channel_dim: int, hidden_dim: int, dtype=np.float32) -> "ComparatorHead":
        return cls(
            Tensor(np.zeros((hidden_dim, channel_dim), dtype=dtype), requires_grad=True, name="head.w1"),
            Tensor(np.zeros((1, hidden_dim), dtype=dtype), requires_grad=True, name="head.w2"),
        )

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    def preactivation(self, diff: Tensor) -> Tensor:
        return dense(diff, self.w1)

    def __call__(self, diff: Tensor) -> Tensor:
        out = dense(relu(self.preactivation(diff)), self.w2)
        return reshape(out, out.shape[:-1])


@dataclass
class PairViews:
    """Preprocessed views for one pair, or a batch of pairs (leading axis)."""

    image1: np.ndarray
    patch1: np.ndarray
    image2: np.ndarray
    patch2: np.ndarray

    def __post_init__(self):
        shapes = {a.shape for a in (self.image1, self.patch1, self.image2, self.patch2)}
        if len(shapes) != 1:
            raise DimensionError(f"pair views disagree in shape: {sorted(shapes)}")
        shape = shapes.pop()
        if len(shape) not in (3, 4) or shape[-3] != 3 or shape[-1] != shape[-2]:
            raise DimensionError(f"pair views must be 3 x S x S (optionally batched), got {shape}")

    def swapped(self) -> "PairViews":
        return PairViews(self.image2, self.patch2, self.image1, self.patch1)

    def __len__(self) -> int:
        return self.image1.shape[0] if self.image1.ndim == 4 else 1


class Ordering(enum.Enum):
    FIRST = "first_more_beautiful"
    SECOND = "second_more_beautiful"
    UNDECIDED = "undecided"


class SiameseRanker:
    def __init__(
        self,
        image_config: ColumnConfig = TINY_COLUMN,
        patch_config: Optional[ColumnConfig] = None,
        hidden_dim: int = TINY_HIDDEN,
        dtype=np.float32,
    ):
        patch_config = patch_config or image_config
        self.image_column = Column(image_config, "image", dtype)
        self.patch_column = Column(patch_config, "patch", dtype)
        channel_dim = image_config.feature_dim + patch_config.feature_dim
        self.comparator = ComparatorHead.create(channel_dim, hidden_dim, dtype)

    @property
    def channel_dim(self) -> int:
        return self.comparator.w1.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        """Every trainable tensor, in a fixed order (image column, patch column, head)."""
        out = {}
        for col in (self.image_column, self.patch_column):
            for name, t in col.params.items():
                out[f"{col.prefix}.{name}"] = t
        out["head.w1"] = self.comparator.w1
        out["head.w2"] = self.comparator.w2
        return out

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def astype(self, dtype) -> "SiameseRanker":
        """Cast every parameter in place (64-bit for gradient checks)."""
        for t in self.parameters().values():
            t.data = t.data.astype(dtype)
            t.zero_grad()
        return self

    def config_dict(self) -> dict:
        return {
            "image_column": self.image_column.config.to_dict(),
            "patch_column": self.patch_column.config.to_dict(),
            "hidden_dim": self.comparator.hidden_dim,
        }

    @classmethod
    def from_config_dict(cls, d: dict, dtype=np.float32) -> "SiameseRanker":
        return cls(
            ColumnConfig.from_dict(d["image_column"]),
            ColumnConfig.from_dict(d["patch_column"]),
            int(d["hidden_dim"]),
            dtype,
        )


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _draw(rng: Optional[RngStream], key: int) -> Optional[RngStream]:
    return None if rng is None else rng.spawn(key)


def fresh_stream(rng: Optional[RngStream]) -> Optional[RngStream]:
    """Child stream keyed by a draw from ``rng``, so every call gets new dropout masks."""
    return None if rng is None else rng.spawn(int(rng.integers(0, 1 << 62)))


def init_parameters(ranker: SiameseRanker, rng: RngStream) -> SiameseRanker:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
    for name, t in ranker.parameters().items():
        if name.endswith(".bias"):
            t.data[...] = 0
            continue
        fan_in = int(np.prod(t.shape[1:]))
        t.data[...] = rng.normal(t.shape) * np.sqrt(2.0 / fan_in)
    ranker.zero_grad()
    return ranker


def column_forward(col: Column, view, train: bool = False, rng: Optional[RngStream] = None) -> Tensor:
    return col.forward(_as_tensor(view, col.params["conv0.weight"].dtype), train, rng)


def channel_forward(ranker: SiameseRanker, image, patch, train: bool = False, rng: Optional[RngStream] = None) -> Tensor:
    """Concatenated (image-column, patch-column) feature for one channel."""
    f_img = column_forward(ranker.image_column, image, train, _draw(rng, 0))
    f_patch = column_forward(ranker.patch_column, patch, train, _draw(rng, 1))
    return concat(f_img, f_patch)


def channel_features(ranker: SiameseRanker, pv: PairViews, train: bool = False, rng: Optional[RngStream] = None):
    # Both channels run with identical shapes so that equal inputs give bit-equal features.
    c1 = channel_forward(ranker, pv.image1, pv.patch1, train, _draw(rng, 10))
    c2 = channel_forward(ranker, pv.image2, pv.patch2, train, _draw(rng, 20))
    return c1, c2


def score_pair(ranker: SiameseRanker, pv: PairViews, train: bool = False, rng: Optional[RngStream] = None) -> Tensor:
    """Aesthetic difference score d(I1, I2); a scalar, or one value per pair when batched."""
    c1, c2 = channel_features(ranker, pv, train, fresh_stream(rng))
    return ranker.comparator(subtract(c1, c2))


def predict(ranker: SiameseRanker, pv: PairViews) -> Ordering:
    with no_record():
        d = float(score_pair(ranker, pv).data)
    return ordering_from_score(d)


def ordering_from_score(d: float) -> Ordering:
    if d > 0:
        return Ordering.FIRST
    if d < 0:
        return Ordering.SECOND
    return Ordering.UNDECIDED


def score_batches(ranker: SiameseRanker, batches: Iterable[PairViews]) -> np.ndarray:
    """Eval-mode scores for a stream of batched views, concatenated."""
    out = []
    with no_record():
        for pv in batches:
            out.append(np.atleast_1d(score_pair(ranker, pv).data))
    return np.concatenate(out) if out else np.zeros(0)


def swap_consistency(ranker: SiameseRanker, pv: PairViews) -> float:
    """Fraction of pairs whose decision reverses when the two images are swapped.

    The ReLU head does not force d(I1, I2) = -d(I2, I1), so this is a
    diagnostic rather than an invariant; 1.0 means perfectly order-consistent.
    """
    with no_record():
        fwd = np.atleast_1d(score_pair(ranker, pv).data)
        rev = np.atleast_1d(score_pair(ranker, pv.swapped()).data)
    return float(np.mean(np.sign(fwd) == -np.sign(rev)))
