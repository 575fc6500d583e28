"""Manifests, pair construction, image-disjoint splits and preprocessing."""

from __future__ import annotations

import bisect
import csv
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .network import PairViews
from .tensor import ContractError, RngStream


class ManifestError(ValueError):
    """A manifest or pairs file is malformed."""


class InfeasibleSplit(ValueError):
    """Requested split sizes cannot be met without sharing images."""

    def __init__(self, message: str, achievable: dict):
        super().__init__(message)
        self.achievable = achievable


# --------------------------------------------------------------------------
# ratings


def rating_stats(ratings: Sequence[int]) -> tuple[float, float]:
    """Arithmetic mean and population variance (divide by n)."""
    if len(ratings) == 0:
        raise ContractError("rating_stats: empty ratings")
    # plain floats: pvariance keeps numpy integer types and would truncate
    values = [float(r) for r in ratings]
    return statistics.fmean(values), statistics.pvariance(values)


@dataclass(frozen=True)
class RatingRecord:
    image_id: str
    path: str
    category: str
    mean: float
    variance: float
    count: int
    ratings: Optional[tuple[int, ...]] = None

    def __post_init__(self):
        if self.ratings is not None and any(not 1 <= r <= 10 for r in self.ratings):
            raise ValueError(f"{self.image_id}: ratings must lie in [1, 10]")
        if self.count < 1:
            raise ValueError(f"{self.image_id}: count must be >= 1")
        if not 1.0 <= self.mean <= 10.0:
            raise ValueError(f"{self.image_id}: mean {self.mean} outside [1, 10]")
        if self.variance < 0:
            raise ValueError(f"{self.image_id}: negative variance")

    @classmethod
    def from_ratings(cls, image_id: str, path: str, category: str, ratings: Sequence[int]) -> "RatingRecord":
        ratings = tuple(int(r) for r in ratings)
        if any(not 1 <= r <= 10 for r in ratings):
            raise ValueError(f"{image_id}: ratings must lie in [1, 10]")
        m, v = rating_stats(ratings)
        return cls(image_id, path, category, m, v, len(ratings), ratings)


RATINGS_HEADER = ["image_id", "path", "category", "ratings"]
STATS_HEADER = ["image_id", "path", "category", "mean", "variance", "count"]


def load_manifest(path: Union[str, Path]) -> list[RatingRecord]:
    """Read a manifest CSV in either the raw-ratings or the precomputed-stats layout."""
    path = Path(path)
    records: list[RatingRecord] = []
    seen: set[str] = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header not in (RATINGS_HEADER, STATS_HEADER):
            raise ManifestError(f"{path}:1: unrecognized header {header}")
        raw = header == RATINGS_HEADER
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                if raw:
                    ratings = [int(r) for r in row[3].split(";") if r.strip()]
                    if not ratings:
                        raise ValueError("no ratings")
                    rec = RatingRecord.from_ratings(row[0], row[1], row[2], ratings)
                else:
                    rec = RatingRecord(row[0], row[1], row[2], float(row[3]), float(row[4]), int(row[5]))
            except ValueError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if rec.image_id in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
            records.append(rec)
    return records


def write_manifest(records: Sequence[RatingRecord], path: Union[str, Path]) -> None:
    raw = all(r.ratings is not None for r in records)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if raw:
            w.writerow(RATINGS_HEADER)
            for r in records:
                w.writerow([r.image_id, r.path, r.category, ";".join(str(x) for x in r.ratings)])
        else:
            w.writerow(STATS_HEADER)
            for r in records:
                w.writerow([r.image_id, r.path, r.category, repr(r.mean), repr(r.variance), r.count])


# --------------------------------------------------------------------------
# pairs


@dataclass(frozen=True)
class PairSample:
    first: str
    second: str
    label: int
    gap: float

    def __post_init__(self):
        if self.first == self.second:
            raise ValueError("a pair needs two distinct images")
        if self.label not in (1, -1):
            raise ValueError(f"label must be +1 or -1, got {self.label}")

    @property
    def key(self) -> frozenset:
        return frozenset((self.first, self.second))


@dataclass(frozen=True)
class PairConstraints:
    min_gap: float = 1.0
    max_variance: float = 2.6
    same_category: bool = True
    max_pairs: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.min_gap <= 0 or self.max_variance <= 0:
            raise ValueError("min_gap and max_variance must be positive")


@dataclass
class PairBuildResult:
    pairs: list[PairSample]
    candidates: int
    rejected: dict = field(default_factory=dict)

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self) -> int:
        return len(self.pairs)


def _c2(n: int) -> int:
    return n * (n - 1) // 2


def build_pairs(records: Sequence[RatingRecord], c: PairConstraints = PairConstraints()) -> PairBuildResult:
    """All pairs satisfying the gap, variance and category constraints.

    Each qualifying unordered pair is emitted once; which image goes first is
    a seeded coin flip, so both labels occur. When more than ``max_pairs``
    qualify a seeded uniform subset is kept. Rejection counts are attributed
    in order category -> variance -> gap.
    """
    rng = RngStream(c.seed)
    groups: dict[str, list[RatingRecord]] = defaultdict(list)
    for r in records:
        groups[r.category if c.same_category else ""].append(r)

    n = len(records)
    same = sum(_c2(len(g)) for g in groups.values())
    low_var_same = 0
    found: list[tuple[RatingRecord, RatingRecord]] = []
    for cat in sorted(groups):
        ok = sorted((r for r in groups[cat] if r.variance < c.max_variance), key=lambda r: (r.mean, r.image_id))
        low_var_same += _c2(len(ok))
        means = [r.mean for r in ok]
        for i, lo in enumerate(ok):
            # first index whose mean clears the gap; scan back over float-rounding near the boundary
            j = bisect.bisect_left(means, lo.mean + c.min_gap, lo=i + 1)
            while j > i + 1 and means[j - 1] - lo.mean >= c.min_gap:
                j -= 1
            while j < len(ok) and means[j] - lo.mean < c.min_gap:
                j += 1
            found.extend((lo, hi) for hi in ok[j:])

    rejected = {
        "category": _c2(n) - same,
        "variance": same - low_var_same,
        "gap": low_var_same - len(found),
    }
    candidates = len(found)
    if c.max_pairs is not None and candidates > c.max_pairs:
        keep = np.sort(rng.choice(candidates, size=c.max_pairs, replace=False))
        found = [found[k] for k in keep]
    flips = rng.uniform(len(found)) < 0.5 if found else []
    pairs = []
    for (lo, hi), flip in zip(found, flips):
        a, b = (hi, lo) if flip else (lo, hi)
        pairs.append(PairSample(a.image_id, b.image_id, 1 if a.mean > b.mean else -1, abs(a.mean - b.mean)))
    return PairBuildResult(pairs, candidates, rejected)


PAIRS_HEADER = ["first", "second", "label", "gap"]


def write_pairs(pairs: Iterable[PairSample], path: Union[str, Path]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIRS_HEADER)
        for p in pairs:
            w.writerow([p.first, p.second, p.label, repr(p.gap)])


def load_pairs(path: Union[str, Path]) -> list[PairSample]:
    path = Path(path)
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != PAIRS_HEADER:
            raise ManifestError(f"{path}:1: expected header {','.join(PAIRS_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                out.append(PairSample(row[0], row[1], int(row[2]), float(row[3])))
            except (ValueError, IndexError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitSpec:
    """Target sizes for train / val / test.

    Integers are pair counts; floats in (0, 1] are fractions of the images,
    assigned at random before dropping pairs that would straddle splits.
    """

    train: Union[int, float] = 0.6
    val: Union[int, float] = 0.2
    test: Union[int, float] = 0.2

    @property
    def by_fraction(self) -> bool:
        return all(isinstance(v, float) for v in (self.train, self.val, self.test))


SPLITS = ("train", "val", "test")


def pair_images(pairs: Iterable[PairSample]) -> set[str]:
    return {i for p in pairs for i in (p.first, p.second)}


def split_disjoint(pairs: Sequence[PairSample], spec: SplitSpec = SplitSpec(), seed: int = 0):
    """Partition pairs so that no image occurs in more than one split.

    Pairs that would connect two splits are dropped. Returns ``(train, val, test)``.
    """
    rng = RngStream(seed)
    if spec.by_fraction:
        fr = np.array([spec.train, spec.val, spec.test], dtype=float)
        if np.any(fr < 0) or fr.sum() > 1 + 1e-9:
            raise ValueError(f"split fractions must be non-negative and sum to <= 1: {spec}")
        images = sorted(pair_images(pairs))
        order = rng.permutation(len(images))
        bounds = np.floor(np.cumsum(fr) * len(images) + 1e-9).astype(int)
        where = {}
        for rank, idx in enumerate(order):
            s = int(np.searchsorted(bounds, rank, side="right"))
            if s < 3:
                where[images[idx]] = s
        out = ([], [], [])
        for p in pairs:
            a, b = where.get(p.first), where.get(p.second)
            if a is not None and a == b:
                out[a].append(p)
        return out

    targets = [int(spec.train), int(spec.val), int(spec.test)]
    where: dict[str, int] = {}
    out = ([], [], [])
    for k in rng.permutation(len(pairs)):
        p = pairs[k]
        a, b = where.get(p.first), where.get(p.second)
        if a is not None and b is not None and a != b:
            continue
        forced = a if a is not None else b
        if forced is not None:
            s = forced
            if len(out[s]) >= targets[s]:
                continue
        else:
            deficits = [t - len(o) for t, o in zip(targets, out)]
            s = int(np.argmax(deficits))
            if deficits[s] <= 0:
                continue
        where[p.first] = where[p.second] = s
        out[s].append(p)
    achieved = {name: len(o) for name, o in zip(SPLITS, out)}
    if any(len(o) < t for o, t in zip(out, targets)):
        raise InfeasibleSplit(
            f"cannot build an image-disjoint split of {targets}; achieved {achieved}", achieved
        )
    return out


# --------------------------------------------------------------------------
# images


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    """Decode a binary P6 PPM (maxval 255) into an ``H x W x 3`` uint8 array."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace() and blob[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise OSError(f"cannot decode image {path}: truncated header")
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise OSError(f"cannot decode image {path}: not a binary PPM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise OSError(f"cannot decode image {path}: bad header") from exc
    if maxval != 255:
        raise OSError(f"cannot decode image {path}: maxval {maxval} unsupported")
    pos += 1
    body = blob[pos : pos + w * h * 3]
    if len(body) != w * h * 3:
        raise OSError(f"cannot decode image {path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path: Union[str, Path], image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"write_ppm expects H x W x 3 uint8, got {image.shape} {image.dtype}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def _axis_weights(n_in: int, n_out: int):
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of an ``H x W x C`` array to float64."""
    img = np.asarray(image, dtype=np.float64)
    r0, r1, fr = _axis_weights(img.shape[0], height)
    c0, c1, fc = _axis_weights(img.shape[1], width)
    rows = img[r0] * (1 - fr)[:, None, None] + img[r1] * fr[:, None, None]
    return rows[:, c0] * (1 - fc)[None, :, None] + rows[:, c1] * fc[None, :, None]


def warp(image: np.ndarray, side: int) -> np.ndarray:
    """Aspect-ignoring bilinear resize to ``3 x side x side`` float32 in [0, 255]."""
    return np.ascontiguousarray(resize_bilinear(image, side, side).transpose(2, 0, 1)).astype(np.float32)


def crop_patch(image: np.ndarray, side: int, mode: str = "center", rng: Optional[RngStream] = None) -> np.ndarray:
    """``3 x side x side`` crop of the un-warped image.

    Images narrower or shorter than ``side`` are first upscaled on that axis.
    """
    h, w = image.shape[:2]
    if h < side or w < side:
        image = resize_bilinear(image, max(h, side), max(w, side))
        h, w = image.shape[:2]
    if mode == "center":
        top, left = (h - side) // 2, (w - side) // 2
    elif mode == "random":
        if rng is None:
            raise ContractError("random crop needs an RngStream")
        top, left = (int(v) for v in rng.integers(0, [h - side + 1, w - side + 1]))
    else:
        raise ValueError(f"unknown crop mode {mode!r}")
    patch = np.asarray(image[top : top + side, left : left + side], dtype=np.float32)
    return np.ascontiguousarray(patch.transpose(2, 0, 1))


def compute_rgb_mean(images: Iterable[np.ndarray]) -> np.ndarray:
    """Per-channel mean over ``3 x S x S`` warped training images."""
    acc = np.zeros(3, dtype=np.float64)
    count = 0
    for im in images:
        acc += im.reshape(3, -1).sum(axis=1, dtype=np.float64)
        count += im[0].size
    if count == 0:
        raise ContractError("compute_rgb_mean: empty training set")
    return acc / count


def apply_mean_subtract(view: np.ndarray, mean: Sequence[float]) -> np.ndarray:
    m = np.asarray(mean, dtype=np.float64).reshape(3, 1, 1)
    return (view - m).astype(np.float32)


@dataclass
class PreprocessConfig:
    warp_side: int = 224
    patch_side: int = 224
    patch_mode_train: str = "random"
    patch_mode_eval: str = "center"
    rgb_mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # applied after mean subtraction; keeps He-initialised columns stable
    input_scale: float = 1.0 / 255.0


class ImageStore:
    """Decodes images referenced by a manifest and serves network views.

    Decoded rasters and warped views are cached; patches are cut per request
    because training crops are random.
    """

    def __init__(self, records: Iterable[RatingRecord], root: Union[str, Path], pre: PreprocessConfig):
        self.records = {r.image_id: r for r in records}
        self.root = Path(root)
        self.pre = pre
        self._raw: dict[str, np.ndarray] = {}
        self._warped: dict[str, np.ndarray] = {}

    def raster(self, image_id: str) -> np.ndarray:
        if image_id not in self._raw:
            path = Path(self.records[image_id].path)
            self._raw[image_id] = read_ppm(path if path.is_absolute() else self.root / path)
        return self._raw[image_id]

    def warped(self, image_id: str) -> np.ndarray:
        if image_id not in self._warped:
            self._warped[image_id] = warp(self.raster(image_id), self.pre.warp_side)
        return self._warped[image_id]

    def fit_mean(self, image_ids: Iterable[str]) -> np.ndarray:
        mean = compute_rgb_mean(self.warped(i) for i in sorted(set(image_ids)))
        self.pre.rgb_mean = tuple(float(v) for v in mean)
        return mean

    def views(self, image_ids: Sequence[str], train: bool = False, rng: Optional[RngStream] = None):
        """Batched (image, patch) arrays for the given ids, mean-subtracted."""
        mode = self.pre.patch_mode_train if train else self.pre.patch_mode_eval
        imgs = np.stack([self.warped(i) for i in image_ids])
        patches = np.stack([crop_patch(self.raster(i), self.pre.patch_side, mode, rng) for i in image_ids])
        k = np.float32(self.pre.input_scale)
        return apply_mean_subtract(imgs, self.pre.rgb_mean) * k, apply_mean_subtract(patches, self.pre.rgb_mean) * k

    def pair_views(self, pairs: Sequence[PairSample], train: bool = False, rng: Optional[RngStream] = None) -> PairViews:
        i1, p1 = self.views([p.first for p in pairs], train, rng)
        i2, p2 = self.views([p.second for p in pairs], train, rng)
        return PairViews(i1, p1, i2, p2)

    def batches(self, pairs: Sequence[PairSample], batch_size: int = 50):
        for k in range(0, len(pairs), batch_size):
            yield self.pair_views(pairs[k : k + batch_size])


def labels_of(pairs: Sequence[PairSample]) -> np.ndarray:
    return np.array([p.label for p in pairs], dtype=np.int64)


def category_of(records: Iterable[RatingRecord]) -> dict[str, str]:
    return {r.image_id: r.category for r in records}

