"""Synthetic shifted domains, IDX digit files and paired mini-batching."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .rng import stream_rng

NOISE_LABEL = -1
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DIGIT_SIDE = 28


class DataError(ValueError):
    pass


class IDXFormatError(DataError):
    pass


@dataclass(frozen=True)
class DomainDataset:
    features: np.ndarray
    labels: np.ndarray | None
    domain: str = "source"
    n_classes: int = 2

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        if x.ndim != 2 or len(x) == 0:
            raise DataError(f"features must be a non-empty [N x d] array, got {x.shape}")
        if not np.isfinite(x).all():
            raise DataError("features contain non-finite values")
        object.__setattr__(self, "features", x)
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (len(x),):
                raise DataError(f"{len(y)} labels for {len(x)} rows")
            if ((y < NOISE_LABEL) | (y >= self.n_classes)).any():
                raise DataError(f"labels must lie in [0, {self.n_classes}) or be {NOISE_LABEL}")
            object.__setattr__(self, "labels", y)
        if self.domain not in ("source", "target"):
            raise DataError(f"domain must be 'source' or 'target', got {self.domain!r}")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def as_domain(self, domain: str) -> "DomainDataset":
        return replace(self, domain=domain)


@dataclass(frozen=True)
class ShiftSpec:
    rotation_deg: float = 0.0
    translation: tuple = ()
    noise_sigma: float = 0.0
    dropped_classes: tuple = ()
    extra_noise_classes: int = 0
    class_prior: tuple = ()

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.extra_noise_classes < 0:
            raise ValueError("extra_noise_classes must be >= 0")
        if self.class_prior:
            prior = np.asarray(self.class_prior, dtype=np.float64)
            if (prior < 0).any() or abs(prior.sum() - 1.0) > 1e-9:
                raise ValueError(f"class_prior must be non-negative and sum to 1, got {self.class_prior}")


@dataclass
class DomainBatch:
    xs: np.ndarray
    ys: np.ndarray
    xt: np.ndarray | None
    alpha_s: np.ndarray | None = None
    alpha_t: np.ndarray | None = None
    source_index: np.ndarray = field(default=None, repr=False)
    target_index: np.ndarray = field(default=None, repr=False)


# generators ----------------------------------------------------------------

def _moons_clean(n: int) -> tuple[np.ndarray, np.ndarray]:
    n0 = n // 2 + n % 2
    n1 = n // 2
    t0 = np.linspace(0.0, np.pi, n0)
    t1 = np.linspace(0.0, np.pi, n1)
    upper = np.column_stack([np.cos(t0), np.sin(t0)])
    lower = np.column_stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)])
    return np.vstack([upper, lower]), np.r_[np.zeros(n0, np.int64), np.ones(n1, np.int64)]


def gen_two_moons(n: int, noise_sigma: float = 0.1, seed: int = 0) -> DomainDataset:
    """Two interleaved half circles; class 0 on top, class 1 below."""
    if n < 2:
        raise DataError(f"two moons needs n >= 2, got {n}")
    x, y = _moons_clean(n)
    if noise_sigma > 0:
        x = x + stream_rng(seed, "data/moons").normal(0.0, noise_sigma, size=x.shape)
    return DomainDataset(x, y, "source", 2)


def gen_blobs(n: int, n_classes: int = 3, dim: int = 2, separation: float = 4.0,
              seed: int = 0, sigma: float = 1.0) -> DomainDataset:
    """Isotropic Gaussian clusters whose means sit on a circle of radius
    ``separation`` in the first two coordinates."""
    if n_classes < 2 or dim < 2 or n < n_classes:
        raise DataError(f"invalid blob setup n={n}, C={n_classes}, d={dim}")
    counts = np.full(n_classes, n // n_classes)
    counts[: n % n_classes] += 1
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    means = np.zeros((n_classes, dim))
    means[:, 0] = separation * np.cos(angles)
    means[:, 1] = separation * np.sin(angles)
    rng = stream_rng(seed, "data/blobs")
    y = np.repeat(np.arange(n_classes), counts)
    x = means[y] + rng.normal(0.0, sigma, size=(n, dim))
    return DomainDataset(x, y, "source", n_classes)


def _rotation(deg: float) -> np.ndarray:
    r = np.deg2rad(deg)
    return np.array([[np.cos(r), -np.sin(r)], [np.sin(r), np.cos(r)]])


def apply_shift(ds: DomainDataset, spec: ShiftSpec, seed: int = 0) -> DomainDataset:
    """Rotate (2-D only, about the origin), translate, add noise, drop classes,
    resample to ``class_prior`` and finally append unlabeled noise clusters."""
    x = ds.features
    y = ds.labels
    rng = stream_rng(seed, "data/shift")
    if spec.rotation_deg:
        if ds.dim != 2:
            raise DataError("rotation is only defined for 2-D features")
        x = x @ _rotation(spec.rotation_deg).T
    if len(spec.translation) and np.any(spec.translation):
        t = np.asarray(spec.translation, dtype=np.float64)
        if t.shape != (ds.dim,):
            raise DataError(f"translation has {t.size} components, data has {ds.dim}")
        x = x + t
    if spec.noise_sigma > 0:
        x = x + rng.normal(0.0, spec.noise_sigma, size=x.shape)
    if spec.dropped_classes:
        bad = [c for c in spec.dropped_classes if not 0 <= c < ds.n_classes]
        if bad:
            raise DataError(f"dropped classes {bad} outside [0, {ds.n_classes})")
        if y is None:
            raise DataError("cannot drop classes from an unlabeled dataset")
        keep = ~np.isin(y, spec.dropped_classes)
        x, y = x[keep], y[keep]
        if len(x) == 0:
            raise DataError("no samples left after dropping classes")
    if spec.class_prior:
        if y is None:
            raise DataError("cannot resample an unlabeled dataset")
        x, y = _resample_to_prior(x, y, np.asarray(spec.class_prior), ds.n_classes, rng)
    if spec.extra_noise_classes:
        x, y = _append_noise_clusters(x, y, spec.extra_noise_classes, ds.n_classes, rng)
    if x is ds.features:
        return ds
    return DomainDataset(x, y, ds.domain, ds.n_classes)


def _resample_to_prior(x, y, prior, n_classes, rng):
    if prior.shape != (n_classes,):
        raise DataError(f"class_prior has {prior.size} entries for {n_classes} classes")
    counts = np.bincount(y[y >= 0], minlength=n_classes)
    live = prior > 0
    if (counts[live] == 0).any():
        raise DataError("class_prior puts mass on a class with no samples")
    # largest subsample that hits the prior without replacement
    total = np.min(counts[live] / prior[live])
    take = np.floor(prior * total + 1e-9).astype(int)
    idx = []
    for c in range(n_classes):
        members = np.flatnonzero(y == c)
        if take[c]:
            idx.append(np.sort(rng.permutation(members)[: take[c]]))
    idx = np.concatenate(idx)
    if len(idx) == 0:
        raise DataError("empty dataset after prior resampling")
    return x[idx], y[idx]


def _append_noise_clusters(x, y, k, n_classes, rng):
    centre = x.mean(axis=0)
    spread = x.std(axis=0).mean()
    per = max(len(x) // max(n_classes, 1), 1)
    blocks = [x]
    for _ in range(k):
        mu = centre + rng.normal(0.0, 2.0 * spread, size=x.shape[1])
        blocks.append(mu + rng.normal(0.0, 0.5 * spread, size=(per, x.shape[1])))
    new_y = None if y is None else np.r_[y, np.full(k * per, NOISE_LABEL, np.int64)]
    return np.vstack(blocks), new_y


def standardize(source: np.ndarray, *others: np.ndarray):
    """Standardize with the source's per-column statistics.

    Returns ``(mean, scale, [source, *others] transformed)``.
    """
    mu = source.mean(axis=0)
    sd = source.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return mu, sd, [(a - mu) / sd for a in (source, *others)]


# IDX -------------------------------------------------------------------------

def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse an unsigned-byte IDX file into a uint8 array of its declared shape."""
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 4:
        raise IDXFormatError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise IDXFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08 or not 1 <= (magic & 0xFF) <= 3:
        raise IDXFormatError(f"{path}: bad magic 0x{magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IDXFormatError(f"{path}: truncated dimension table")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    need = int(np.prod(dims))
    if len(raw) - head < need:
        raise IDXFormatError(f"{path}: truncated, {len(raw) - head} of {need} data bytes present")
    if len(raw) - head > need:
        raise IDXFormatError(f"{path}: {len(raw) - head - need} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.asarray(array)
    if a.dtype != np.uint8 or a.ndim not in (1, 3):
        raise ValueError("write_idx takes uint8 labels [N] or images [N, H, W]")
    magic = IDX_LABELS_MAGIC if a.ndim == 1 else IDX_IMAGES_MAGIC
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{a.ndim}I", *a.shape))
        f.write(np.ascontiguousarray(a).tobytes())


def pad_to(images: np.ndarray, side: int = DIGIT_SIDE) -> np.ndarray:
    """Zero-pad (centred) or centre-crop ``[N, H, W]`` images to ``side x side``."""
    n, h, w = images.shape
    out = np.zeros((n, side, side), dtype=images.dtype)
    sh, sw = min(h, side), min(w, side)
    src_r, src_c = (h - sh) // 2, (w - sw) // 2
    dst_r, dst_c = (side - sh) // 2, (side - sw) // 2
    out[:, dst_r:dst_r + sh, dst_c:dst_c + sw] = images[:, src_r:src_r + sh, src_c:src_c + sw]
    return out


def load_idx(images_path, labels_path, limit: int | None = None,
             domain: str = "source") -> DomainDataset:
    images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IDXFormatError(f"{len(images)} images but {len(labels)} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    x = pad_to(images).reshape(len(images), -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    return DomainDataset(x, y, domain, max(int(y.max()) + 1, 10))


# batching --------------------------------------------------------------------

def _stream(n: int, seed: int, name: str, epoch: int) -> Iterator[int]:
    cycle = 0
    while True:
        yield from stream_rng(seed, name, epoch, cycle).permutation(n)
        cycle += 1


def batch_iter(source: DomainDataset, target: DomainDataset | None, batch_size: int,
               seed: int = 0, epoch: int = 0) -> Iterator[DomainBatch]:
    """One epoch of paired batches: ``len(source) // batch_size`` of them.

    The target index stream is a chain of fresh permutations, so a shorter
    target domain is reused only after every sample has been seen.
    """
    limit = len(source) if target is None else min(len(source), len(target))
    if not 1 <= batch_size <= limit:
        raise DataError(f"batch_size must lie in [1, {limit}], got {batch_size}")
    if source.labels is None:
        raise DataError("source domain needs labels")
    src = stream_rng(seed, "shuffle/source", epoch).permutation(len(source))
    tgt = None if target is None else _stream(len(target), seed, "shuffle/target", epoch)
    for b in range(len(source) // batch_size):
        si = src[b * batch_size:(b + 1) * batch_size]
        ti = None if tgt is None else np.fromiter((next(tgt) for _ in range(batch_size)), np.int64, batch_size)
        yield DomainBatch(
            xs=source.features[si],
            ys=source.labels[si],
            xt=None if ti is None else target.features[ti],
            source_index=si,
            target_index=ti,
        )


# CSV ---------------------------------------------------------------------------

def dataset_rows(ds: DomainDataset) -> Iterator[list]:
    labels = ds.labels if ds.labels is not None else np.full(len(ds), NOISE_LABEL)
    for row, label in zip(ds.features, labels):
        yield [*(repr(float(v)) for v in row), int(label), ds.domain]


def write_dataset_csv(path, datasets: Sequence[DomainDataset]) -> None:
    dim = datasets[0].dim
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(dim)] + ["label", "domain"])
        for ds in datasets:
            w.writerows(dataset_rows(ds))


def read_dataset_csv(path, n_classes: int | None = None) -> list[DomainDataset]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    if header[-2:] != ["label", "domain"]:
        raise DataError(f"{path}: last two columns must be label, domain")
    d = len(header) - 2
    out = []
    for domain in ("source", "target"):
        part = [r for r in body if r[-1] == domain]
        if not part:
            continue
        x = np.array([[float(v) for v in r[:d]] for r in part])
        y = np.array([int(r[d]) for r in part])
        c = n_classes or int(y.max()) + 1
        out.append(DomainDataset(x, y, domain, c))
    return out
