"""4-D volumes: synthetic generation, normalization, frame sampling, storage.

Binary volume layout (little-endian)::

    bytes 0-7    b"BMT4VOL1"
    bytes 8-23   u32 T, H, W, D
    bytes 24-27  u32 flags (bit 0: foreground mask follows the payload)
    bytes 28-31  u32 tr_index_origin
    payload      T*H*W*D float64, row-major with T outermost
    [mask]       H*W*D uint8, present when flags bit 0 is set
"""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from brainmt.errors import (
    BadMagicError,
    ConfigurationError,
    DataError,
    DimMismatchError,
    TruncatedPayloadError,
)

MAGIC = b"BMT4VOL1"
HEADER = struct.Struct("<8s4III")
FLAG_MASK = 1
SPATIAL_MULTIPLE = 16
AR_COEF = 0.5
MANIFEST_FIELDS = ("id", "path", "split", "fold")


@dataclass
class Volume4D:
    data: np.ndarray  # (T, H, W, D)
    mask: np.ndarray  # (H, W, D) bool
    tr_index_origin: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.data.ndim != 4 or self.data.shape[0] < 1:
            raise DimMismatchError(f"volume data must be (T>=1, H, W, D), got {self.data.shape}")
        if self.mask.shape != self.data.shape[1:]:
            raise DimMismatchError(f"mask {self.mask.shape} does not match spatial dims {self.data.shape[1:]}")
        if not self.mask.any():
            raise DataError("mask has no foreground voxel")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


@dataclass
class Subject:
    id: str
    volume: Volume4D
    sex_label: int
    cognition_score: float
    cognition_raw: float = float("nan")


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    fold_index: int = 0

    def __post_init__(self):
        sets = [set(self.train), set(self.val), set(self.test)]
        if sum(map(len, sets)) != len(set().union(*sets)):
            raise DataError("split lists overlap")


def check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 or d % SPATIAL_MULTIPLE for d in dims):
        raise ConfigurationError(f"spatial dims {dims} must each be a positive multiple of {SPATIAL_MULTIPLE}")
    return dims


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticLayout:
    """Planted-signal geometry, as boolean voxel masks."""

    brain: np.ndarray
    roi_a: np.ndarray
    roi_b: np.ndarray
    sex_blob: np.ndarray


def synthetic_layout(dims) -> SyntheticLayout:
    H, W, D = check_dims(dims)
    grid = np.indices((H, W, D), dtype=np.float64)
    centre = np.array([H, W, D], dtype=np.float64)[:, None, None, None] / 2 - 0.5
    radius = 0.45 * np.array([H, W, D], dtype=np.float64)[:, None, None, None]
    brain = (((grid - centre) / radius) ** 2).sum(axis=0) <= 1.0

    # one adjacent pair of cubes (a, then b along the first axis) in each
    # octant, near the centre so every octant's pair sits inside the brain;
    # at 32^3 each octant is one final token
    s = np.array([H, W, D]) / 32.0
    side = np.maximum(np.round(4 * s).astype(int), 1)
    roi_a = np.zeros((H, W, D), dtype=bool)
    roi_b = np.zeros((H, W, D), dtype=bool)
    for octant in np.ndindex(2, 2, 2):
        lo = np.where(octant, np.round(16 * s), np.round(12 * s) - side).astype(int)
        lo[0] = round(8 * s[0]) if octant[0] == 0 else round(16 * s[0])
        a = tuple(slice(lo[i], lo[i] + side[i]) for i in range(3))
        b = (slice(lo[0] + side[0], lo[0] + 2 * side[0]),) + a[1:]
        roi_a[a] = True
        roi_b[b] = True
    blob_centre = np.array([H, W, D]) * 0.7
    blob = (((grid - blob_centre[:, None, None, None]) / (3.0 * np.maximum(s, 0.5))[:, None, None, None]) ** 2).sum(
        axis=0
    ) <= 1.0
    blob &= brain & ~roi_a & ~roi_b
    return SyntheticLayout(brain, roi_a & brain, roi_b & brain, blob)


def _smooth_noise(rng, T, dims, sigma):
    e = ndimage.gaussian_filter(rng.standard_normal((T,) + dims), sigma=(0, sigma, sigma, sigma))
    out = np.empty_like(e)
    out[0] = e[0]
    innov = np.sqrt(1.0 - AR_COEF**2)
    for t in range(1, T):
        out[t] = AR_COEF * out[t - 1] + innov * e[t]
    return out / out.std()


def _standardize(x):
    x = x - x.mean()
    return x / x.std()


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64) - np.mean(a)
    b = np.asarray(b, dtype=np.float64) - np.mean(b)
    den = np.sqrt((a * a).sum() * (b * b).sum())
    return float((a * b).sum() / den) if den > 0 else 0.0


def roi_correlation(volume: Volume4D | np.ndarray, layout: SyntheticLayout) -> float:
    """Lag-zero Pearson correlation of the two ROI-mean time courses."""
    data = volume.data if isinstance(volume, Volume4D) else volume
    return pearson(data[:, layout.roi_a].mean(axis=1), data[:, layout.roi_b].mean(axis=1))


def generate_synthetic_dataset(
    n_subjects: int,
    dims=(32, 32, 32),
    T_total: int = 16,
    seed: int = 0,
    signal_amp: float = 2.0,
    sex_amp: float = 1.0,
    noise_sigma: float = 1.5,
) -> list[Subject]:
    """Subjects with smooth AR(1) background noise and two planted signals.

    * sex flips the sign of a constant offset inside a fixed blob;
    * cognition is the correlation between the ROI-mean time courses of two
      adjacent cubes, z-scored over the dataset.
    """
    dims = check_dims(dims)
    if n_subjects < 2:
        raise ConfigurationError("n_subjects must be at least 2")
    if T_total < 3:
        raise ConfigurationError("T_total must be at least 3 frames")
    rng = np.random.default_rng(seed)
    layout = synthetic_layout(dims)
    sexes = rng.permutation(np.arange(n_subjects) % 2)
    rhos = rng.uniform(-0.9, 0.9, size=n_subjects)

    subjects = []
    raws = np.empty(n_subjects)
    for i in range(n_subjects):
        noise = _smooth_noise(rng, T_total, dims, noise_sigma)
        s_a = _standardize(rng.standard_normal(T_total))
        s_b = _standardize(rhos[i] * s_a + np.sqrt(1.0 - rhos[i] ** 2) * rng.standard_normal(T_total))
        data = 5.0 + noise
        data[:, layout.roi_a] += signal_amp * s_a[:, None]
        data[:, layout.roi_b] += signal_amp * s_b[:, None]
        data[:, layout.sex_blob] += sex_amp if sexes[i] else -sex_amp
        data[:, ~layout.brain] = 0.0
        vol = Volume4D(data, layout.brain.copy())
        raws[i] = roi_correlation(vol, layout)
        subjects.append(Subject(f"sub-{i:04d}", vol, int(sexes[i]), 0.0, float(raws[i])))

    z = (raws - raws.mean()) / raws.std()
    for s, zi in zip(subjects, z):
        s.cognition_score = float(zi)
    return subjects


def shuffle_frames(v: Volume4D, seed: int) -> Volume4D:
    """Control input: every voxel's time course is permuted independently,
    destroying cross-voxel temporal alignment while keeping each voxel's
    value distribution."""
    rng = np.random.default_rng(seed)
    return replace(v, data=rng.permuted(v.data, axis=0))


# ---------------------------------------------------------------------------
# preprocessing


def zscore_normalize(v: Volume4D) -> Volume4D:
    """Z-score foreground voxels jointly over all frames; background gets
    the minimum normalized foreground value."""
    fg = v.data[:, v.mask]
    mu = fg.mean()
    sd = fg.std()
    if not sd > 0:
        raise DataError("zero foreground variance; cannot z-score")
    out = (v.data - mu) / sd
    out[:, ~v.mask] = out[:, v.mask].min()
    return replace(v, data=out)


def sample_frames(v: Volume4D, T: int, seed, mode: str = "window") -> Volume4D:
    """Pick T frames: a contiguous window at a uniform random offset, or
    (mode="subset") a sorted random subset."""
    if T < 1 or T > v.T:
        raise ConfigurationError(f"cannot sample {T} frames from a volume with {v.T}")
    rng = np.random.default_rng(seed)
    if mode == "window":
        offset = int(rng.integers(0, v.T - T + 1))
        return replace(v, data=v.data[offset : offset + T].copy(), tr_index_origin=v.tr_index_origin + offset)
    if mode == "subset":
        idx = np.sort(rng.choice(v.T, size=T, replace=False))
        return replace(v, data=v.data[idx].copy(), tr_index_origin=v.tr_index_origin + int(idx[0]))
    raise ConfigurationError(f"frame sampling mode must be 'window' or 'subset', got {mode!r}")


# ---------------------------------------------------------------------------
# splits


def make_splits(ids, seed: int = 0, fold_index: int = 0) -> DatasetSplit:
    """70/15/15 train/val/test partition of ``ids``."""
    ids = list(ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(round(0.70 * len(ids)))
    n_val = int(round(0.15 * len(ids)))
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :], fold_index
    )


def cv_splits(ids, folds: int = 3, seed: int = 0) -> list[DatasetSplit]:
    """k-fold partition; each fold's remainder is split into train and a
    validation set of ~15% of all subjects."""
    ids = list(ids)
    if folds < 2 or folds > len(ids):
        raise ConfigurationError(f"need 2 <= folds <= n_subjects, got folds={folds}, n={len(ids)}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    chunks = np.array_split(order, folds)
    n_val = max(1, int(round(0.15 * len(ids))))
    out = []
    for f, chunk in enumerate(chunks):
        rest = [i for i in order if i not in set(chunk)]
        rest = list(rng.permutation(rest))
        out.append(
            DatasetSplit(
                [ids[i] for i in rest[n_val:]],
                [ids[i] for i in rest[:n_val]],
                [ids[i] for i in chunk],
                f,
            )
        )
    return out


# ---------------------------------------------------------------------------
# persistence


def save_volume(path, v: Volume4D) -> None:
    T, H, W, D = v.data.shape
    header = HEADER.pack(MAGIC, T, H, W, D, FLAG_MASK, v.tr_index_origin)
    payload = np.ascontiguousarray(v.data, dtype="<f8").tobytes()
    Path(path).write_bytes(header + payload + v.mask.astype(np.uint8).tobytes())


def load_volume(path) -> Volume4D:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) or raw[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"{path}: not a BMT4VOL1 file")
    if len(raw) < HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated ({len(raw)} bytes)")
    _, T, H, W, D, flags, origin = HEADER.unpack_from(raw)
    if min(T, H, W, D) == 0:
        raise DimMismatchError(f"{path}: header declares an empty extent {(T, H, W, D)}")
    n = T * H * W * D
    mask_bytes = H * W * D if flags & FLAG_MASK else 0
    expected = HEADER.size + 8 * n + mask_bytes
    if len(raw) < expected:
        raise TruncatedPayloadError(f"{path}: header declares {expected} bytes, file has {len(raw)}")
    if len(raw) > expected:
        raise DimMismatchError(f"{path}: {len(raw) - expected} bytes beyond the declared {T}x{H}x{W}x{D} payload")
    data = np.frombuffer(raw, dtype="<f8", count=n, offset=HEADER.size).reshape(T, H, W, D).astype(np.float64)
    if mask_bytes:
        mask = np.frombuffer(raw, dtype=np.uint8, count=mask_bytes, offset=HEADER.size + 8 * n)
        mask = mask.reshape(H, W, D).astype(bool)
    else:
        mask = np.ones((H, W, D), dtype=bool)
    return Volume4D(data, mask, int(origin))


@dataclass
class Dataset:
    subjects: list[Subject]
    manifest: list[dict] = field(default_factory=list)

    def by_id(self) -> dict[str, Subject]:
        return {s.id: s for s in self.subjects}

    def split(self) -> DatasetSplit:
        groups = {"train": [], "val": [], "test": []}
        for row in self.manifest:
            groups[row["split"]].append(row["id"])
        return DatasetSplit(groups["train"], groups["val"], groups["test"])


def write_dataset(subjects, out_dir, seed: int = 0, folds: int = 3) -> Path:
    """Volumes + JSON sidecars under ``out_dir/volumes`` and ``manifest.csv``."""
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    vol_dir.mkdir(parents=True, exist_ok=True)
    ids = [s.id for s in subjects]
    split = make_splits(ids, seed)
    which = {i: "train" for i in split.train} | {i: "val" for i in split.val} | {i: "test" for i in split.test}
    fold_of = {}
    for sp in cv_splits(ids, folds=min(folds, len(ids)), seed=seed):
        fold_of.update({i: sp.fold_index for i in sp.test})
    manifest = out_dir / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for s in subjects:
            rel = f"volumes/{s.id}.bmt"
            save_volume(out_dir / rel, s.volume)
            sidecar = {"id": s.id, "sex": s.sex_label, "cognition": s.cognition_score, "cognition_raw": s.cognition_raw}
            (vol_dir / f"{s.id}.json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")
            writer.writerow({"id": s.id, "path": rel, "split": which[s.id], "fold": fold_of[s.id]})
    return manifest


def read_dataset(root) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"no manifest.csv under {root}")
    with manifest.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    subjects = []
    for row in rows:
        vol = load_volume(root / row["path"])
        side = json.loads((root / row["path"]).with_suffix(".json").read_text())
        subjects.append(
            Subject(row["id"], vol, int(side["sex"]), float(side["cognition"]), float(side.get("cognition_raw", "nan")))
        )
    return Dataset(subjects, rows)
