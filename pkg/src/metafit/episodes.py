"""Datasets, synthetic task pools, augmentation and the 2-way k-shot episode sampler.

An :class:`Episode` is one binary task: ``k`` support and ``q`` query samples
from each of two classes.  The first sampled class gets label 0, the second
label 1; the pair order is random.

All randomness comes from an explicit :class:`numpy.random.Generator`
argument.  Nothing here touches global random state.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, DataError, UsageError

log = logging.getLogger(__name__)

META_TRAIN = "meta-train"
META_TEST = "meta-test"
ROLES = (META_TRAIN, META_TEST)

NPT_MAGIC = b"NPT1"
DEFAULT_RESOLUTION = (84, 84)


class Sample(NamedTuple):
    payload: np.ndarray
    source_id: str


@dataclass(frozen=True)
class Dataset:
    """Class table ``class id -> samples`` with a role tag.

    Class ids keep the order given at construction (lexicographic for data
    loaded from disk).  Payloads are stacked per class once, at construction.
    """

    classes: dict[str, tuple[Sample, ...]]
    role: str = META_TRAIN
    _stacked: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ConfigError(f"dataset role must be one of {ROLES}, got {self.role!r}")
        if not self.classes:
            raise DataError("dataset has no classes")
        frozen = {}
        shape = None
        for cid, samples in self.classes.items():
            samples = tuple(Sample(np.asarray(s.payload, dtype=np.float64), str(s.source_id)) for s in samples)
            if not samples:
                raise DataError(f"class {cid!r} has 0 samples")
            for s in samples:
                if shape is None:
                    shape = s.payload.shape
                elif s.payload.shape != shape:
                    raise DataError(f"sample {s.source_id} has shape {s.payload.shape}, expected {shape}")
            ids = [s.source_id for s in samples]
            if len(set(ids)) != len(ids):
                raise DataError(f"class {cid!r} has duplicate source ids")
            frozen[cid] = samples
            self._stacked[cid] = np.stack([s.payload for s in samples])
        object.__setattr__(self, "classes", frozen)

    @property
    def class_ids(self) -> list[str]:
        return list(self.classes)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return next(iter(self._stacked.values())).shape[1:]

    def counts(self) -> dict[str, int]:
        return {cid: len(s) for cid, s in self.classes.items()}

    def stacked(self, cid: str) -> np.ndarray:
        return self._stacked[cid]

    def with_role(self, role: str) -> "Dataset":
        return Dataset(self.classes, role)

    def validate_protocol(self, k: int, q: int) -> None:
        """Raise if any class has fewer than ``k + q`` samples."""
        short = {cid: n for cid, n in self.counts().items() if n < k + q}
        if short:
            listing = ", ".join(f"{cid} ({n})" for cid, n in short.items())
            raise DataError(f"classes with fewer than k+q={k + q} samples: {listing}")


def make_dataset_pair(train: Dataset, test: Dataset) -> tuple[Dataset, Dataset]:
    """Tag roles and enforce disjoint class ids between meta-train and meta-test."""
    overlap = sorted(set(train.class_ids) & set(test.class_ids))
    if overlap:
        raise DataError(f"meta-train and meta-test share class ids: {overlap}")
    return train.with_role(META_TRAIN), test.with_role(META_TEST)


@dataclass(frozen=True)
class Episode:
    classes: tuple[str, str]
    support_x: np.ndarray
    support_y: np.ndarray
    query_x: np.ndarray
    query_y: np.ndarray
    support_ids: tuple[str, ...]
    query_ids: tuple[str, ...]

    @property
    def k(self) -> int:
        return len(self.support_y) // 2

    @property
    def q(self) -> int:
        return len(self.query_y) // 2


def sample_episode(dataset: Dataset, k: int, q: int, rng: np.random.Generator) -> Episode:
    """Draw one 2-way task: a random ordered class pair, then k + q samples per class."""
    if k < 1 or q < 1:
        raise UsageError(f"k and q must be >= 1, got k={k}, q={q}")
    ids = dataset.class_ids
    if len(ids) < 2:
        raise DataError(f"episode sampling needs >= 2 classes, dataset has {len(ids)}")
    pair = rng.choice(len(ids), size=2, replace=False)
    sx, sy, qx, qy, sid, qid = [], [], [], [], [], []
    for label, ci in enumerate(pair):
        cid = ids[ci]
        samples = dataset.classes[cid]
        if len(samples) < k + q:
            raise DataError(f"class {cid!r} has {len(samples)} samples, episode needs k+q={k + q}")
        pick = rng.choice(len(samples), size=k + q, replace=False)
        block = dataset.stacked(cid)[pick]
        sx.append(block[:k])
        qx.append(block[k:])
        sy.append(np.full(k, label, dtype=np.float64))
        qy.append(np.full(q, label, dtype=np.float64))
        sid.extend(samples[i].source_id for i in pick[:k])
        qid.extend(samples[i].source_id for i in pick[k:])
    return Episode(
        classes=(ids[pair[0]], ids[pair[1]]),
        support_x=np.concatenate(sx),
        support_y=np.concatenate(sy),
        query_x=np.concatenate(qx),
        query_y=np.concatenate(qy),
        support_ids=tuple(sid),
        query_ids=tuple(qid),
    )


def synth_pools(
    seed: int,
    n_train_classes: int,
    n_test_classes: int,
    samples_per_class: int,
    dim: int,
    min_separation: float = 2.0,
) -> tuple[Dataset, Dataset]:
    """Gaussian-cluster task pools standing in for common (train) and rare (test) classes.

    Each class is an anisotropic Gaussian: the mean has norm in [1, 3], the
    per-axis standard deviations are drawn from [0.3, 1.0].  Meta-train means
    lie in the positive half-space of the first axis and meta-test means in
    the negative one, so test classes come from a region never seen during
    meta-training.  Means within a pool are kept ``min_separation`` apart when
    the geometry allows; the threshold is relaxed gradually otherwise (only
    relevant in very low dimension).
    """
    if dim < 2:
        raise ConfigError(f"synthetic pools need dim >= 2, got {dim}")
    for name, v in (
        ("n_train_classes", n_train_classes),
        ("n_test_classes", n_test_classes),
        ("samples_per_class", samples_per_class),
    ):
        if v < 1:
            raise ConfigError(f"{name} must be positive, got {v}")
    rng = np.random.default_rng(seed)

    def draw_means(n: int, sign: float) -> list[np.ndarray]:
        sep = min_separation
        means: list[np.ndarray] = []
        misses = 0
        while len(means) < n:
            direction = rng.standard_normal(dim)
            direction /= np.linalg.norm(direction)
            direction[0] = sign * abs(direction[0])
            m = direction * rng.uniform(1.0, 3.0)
            if all(np.linalg.norm(m - other) >= sep for other in means):
                means.append(m)
                misses = 0
            else:
                misses += 1
                if misses >= 200:
                    sep *= 0.9
                    misses = 0
        return means

    def build(prefix: str, n: int, sign: float, role: str) -> Dataset:
        classes = {}
        for ci, mean in enumerate(draw_means(n, sign)):
            scales = rng.uniform(0.3, 1.0, size=dim)
            pts = mean + scales * rng.standard_normal((samples_per_class, dim))
            cid = f"{prefix}_{ci:02d}"
            classes[cid] = tuple(Sample(p, f"{cid}/{i:04d}") for i, p in enumerate(pts))
        return Dataset(classes, role)

    train = build("train", n_train_classes, 1.0, META_TRAIN)
    test = build("test", n_test_classes, -1.0, META_TEST)
    return make_dataset_pair(train, test)


# .npt raw tensor files: "NPT1", u32 rank, u32 extents (little-endian), float32 row-major


def write_npt(path, array) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    with open(path, "wb") as fh:
        fh.write(NPT_MAGIC)
        fh.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        fh.write(arr.tobytes())


def read_npt(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if blob[:4] != NPT_MAGIC or len(blob) < 8:
        raise DataError(f"{path}: bad .npt header")
    (rank,) = struct.unpack_from("<I", blob, 4)
    head = 8 + 4 * rank
    if len(blob) < head:
        raise DataError(f"{path}: truncated .npt header")
    shape = struct.unpack_from(f"<{rank}I", blob, 8)
    count = int(np.prod(shape)) if rank else 1
    if len(blob) != head + 4 * count:
        raise DataError(f"{path}: payload has {len(blob) - head} bytes, expected {4 * count}")
    return np.frombuffer(blob, dtype="<f4", offset=head).reshape(shape).astype(np.float32)


def _decode_png(path: Path, channels: int | None, resolution) -> np.ndarray:
    from PIL import Image

    try:
        with Image.open(path) as img:
            img.load()
            if img.mode not in ("L", "RGB"):
                raise DataError(f"{path}: unsupported PNG mode {img.mode} (need 8-bit L or RGB)")
            if channels == 3 and img.mode == "L":
                img = img.convert("RGB")
            elif channels == 1 and img.mode == "RGB":
                img = img.convert("L")
            if resolution is not None and img.size != (resolution[1], resolution[0]):
                img = img.resize((resolution[1], resolution[0]), Image.BILINEAR)
            arr = np.asarray(img, dtype=np.float64) / 255.0
    except DataError:
        raise
    except Exception as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = arr.transpose(2, 0, 1)
    return arr


def _resize_chw(arr: np.ndarray, resolution) -> np.ndarray:
    from PIL import Image

    if arr.shape[1:] == tuple(resolution):
        return arr
    planes = [
        np.asarray(Image.fromarray(p.astype(np.float32), mode="F").resize((resolution[1], resolution[0]), Image.BILINEAR))
        for p in arr
    ]
    return np.stack(planes).astype(np.float64)


def load_directory(
    path,
    role: str = META_TRAIN,
    resolution: Sequence[int] | None = DEFAULT_RESOLUTION,
    channels: int | None = 3,
    min_samples: int = 1,
) -> Dataset:
    """Load ``path/<class>/<file>`` trees of PNG images or ``.npt`` tensors.

    PNGs are scaled to [0, 1]; images (PNG or rank-3 ``.npt``) are resized to
    ``resolution``.  Vector ``.npt`` files are taken as is.  Class ids are the
    subdirectory names in lexicographic order.
    """
    root = Path(path)
    if not root.is_dir():
        raise DataError(f"{root}: not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not class_dirs:
        raise DataError(f"{root}: no class subdirectories")
    classes = {}
    short = []
    for cdir in class_dirs:
        samples = []
        for f in sorted(cdir.iterdir()):
            suffix = f.suffix.lower()
            if suffix == ".png":
                arr = _decode_png(f, channels, resolution)
            elif suffix == ".npt":
                arr = read_npt(f).astype(np.float64)
                if arr.ndim == 3 and resolution is not None:
                    arr = _resize_chw(arr, resolution)
            else:
                continue
            samples.append(Sample(arr, f"{cdir.name}/{f.name}"))
        if len(samples) < max(min_samples, 1):
            short.append((cdir.name, len(samples)))
        classes[cdir.name] = tuple(samples)
    if short:
        listing = ", ".join(f"{c} ({n})" for c, n in short)
        raise DataError(f"{root}: classes with too few samples (need {max(min_samples, 1)}): {listing}")
    return Dataset(classes, role)


def export_npt_tree(dataset: Dataset, path) -> dict[str, int]:
    """Write ``path/<class>/<nnnn>.npt``; returns the per-class counts."""
    root = Path(path)
    for cid, samples in dataset.classes.items():
        cdir = root / cid
        cdir.mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(samples):
            write_npt(cdir / f"{i:04d}.npt", s.payload)
    return dataset.counts()


@dataclass(frozen=True)
class AugmentPolicy:
    """Random rotation, flips and scale-with-crop for (C, H, W) images."""

    rotate: bool = True
    rotation_range: float = 30.0
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    scale: bool = True
    scale_range: tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(float(v) for v in self.scale_range))
        if self.rotate and not self.rotation_range > 0:
            raise ConfigError(f"rotation enabled with degenerate range {self.rotation_range}")
        for name in ("hflip_prob", "vflip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {p}")
        lo, hi = self.scale_range
        if self.scale and not (0 < lo < hi):
            raise ConfigError(f"scale enabled with degenerate range {self.scale_range}")

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(rotate=False, hflip_prob=0.0, vflip_prob=0.0, scale=False)

    @property
    def enabled(self) -> bool:
        return self.rotate or self.scale or self.hflip_prob > 0 or self.vflip_prob > 0


def _check_image(img: np.ndarray) -> None:
    if img.ndim != 3:
        raise UsageError(f"augment expects a (C, H, W) image, got shape {img.shape}")


def _resample(img: np.ndarray, degrees: float, factor: float) -> np.ndarray:
    """Nearest-neighbour rotation about the centre plus isotropic scaling, zero fill."""
    _, h, w = img.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = (yy - cy) / factor, (xx - cx) / factor
    # inverse map: rotate output offsets by -theta
    sy = cy + cos * dy - sin * dx
    sx = cx + sin * dy + cos * dx
    iy = np.floor(sy + 0.5).astype(np.int64)
    ix = np.floor(sx + 0.5).astype(np.int64)
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    out = np.zeros_like(img)
    out[:, valid] = img[:, iy[valid], ix[valid]]
    return out


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    _check_image(img)
    return _resample(img, degrees, 1.0)


def rescale(img: np.ndarray, factor: float) -> np.ndarray:
    """Scale about the centre and crop (or zero-pad) back to the input size."""
    _check_image(img)
    if not factor > 0:
        raise UsageError(f"scale factor must be positive, got {factor}")
    return _resample(img, 0.0, factor)


def flip(img: np.ndarray, horizontal: bool = True) -> np.ndarray:
    _check_image(img)
    return img[:, :, ::-1].copy() if horizontal else img[:, ::-1, :].copy()


def augment(sample: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Rotation, then flips, then scale-with-crop; the output keeps the input shape."""
    img = np.asarray(sample)
    _check_image(img)
    out = img
    if policy.rotate:
        out = _resample(out, rng.uniform(-policy.rotation_range, policy.rotation_range), 1.0)
    if policy.hflip_prob > 0 and rng.random() < policy.hflip_prob:
        out = out[:, :, ::-1]
    if policy.vflip_prob > 0 and rng.random() < policy.vflip_prob:
        out = out[:, ::-1, :]
    if policy.scale:
        out = _resample(out, 0.0, rng.uniform(*policy.scale_range))
    return np.array(out, copy=True) if out is img else np.ascontiguousarray(out)


def augment_batch(batch: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """Augment every image of a (B, C, H, W) batch.

    Batches of non-image samples (e.g. feature vectors) are returned
    unchanged: the transforms are only defined for images.
    """
    if not policy.enabled or batch.ndim != 4:
        return batch
    return np.stack([augment(x, policy, rng) for x in batch])
