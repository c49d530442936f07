"""Integrated-gradients attribution for any batched scalar model."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from brainmt.errors import ConfigurationError, DimensionError
from brainmt.tensor import Tensor, backward, no_grad, zero_grads
from brainmt.volume import Volume4D, save_volume


@dataclass
class AttributionMap:
    values: np.ndarray  # same shape as the input, e.g. (T, H, W, D)
    baseline: float | str
    m: int
    f_x: float
    f_baseline: float

    @property
    def completeness_residual(self) -> float:
        return abs(float(self.values.sum()) - (self.f_x - self.f_baseline))

    def completeness_ok(self) -> bool:
        gap = abs(self.f_x - self.f_baseline)
        return self.completeness_residual < 1e-3 * gap + 1e-6

    def time_averaged(self) -> np.ndarray:
        """Mean over the leading (frame) axis."""
        return self.values.mean(axis=0)

    def top_k(self, k: int = 10) -> list[tuple[int, int, tuple[int, ...], float]]:
        """Per frame, the ``k`` voxels of largest absolute attribution as
        ``(frame, rank, coords, value)`` rows."""
        rows = []
        for t, frame in enumerate(self.values):
            flat = np.abs(frame).ravel()
            k_eff = min(k, flat.size)
            idx = np.argpartition(-flat, k_eff - 1)[:k_eff]
            # ties broken by flat index so output is reproducible
            idx = idx[np.lexsort((idx, -flat[idx]))]
            for rank, i in enumerate(idx):
                coords = tuple(int(c) for c in np.unravel_index(i, frame.shape))
                rows.append((t, rank, coords, float(frame.ravel()[i])))
        return rows

    def save(self, out_dir, stem: str = "attribution", k: int = 10) -> tuple[Path, Path]:
        """Write the map in the volume format plus a top-k CSV."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        if self.values.ndim != 4:
            raise DimensionError(f"only (T, H, W, D) maps can be saved, got {self.values.shape}")
        vol_path = out_dir / f"{stem}.bmt"
        save_volume(vol_path, Volume4D(self.values, np.ones(self.values.shape[1:], dtype=bool)))
        csv_path = out_dir / f"{stem}_topk.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "rank", "h", "w", "d", "attribution"])
            for t, rank, (h, ww, d), v in self.top_k(k):
                w.writerow([t, rank, h, ww, d, repr(v)])
        return vol_path, csv_path


def min_baseline(x: np.ndarray) -> np.ndarray:
    """Constant volume at the input's minimum (the background level after z-scoring)."""
    return np.full_like(x, x.min())


def _scalar(model, batch: np.ndarray) -> np.ndarray:
    with no_grad():
        return np.asarray(model(Tensor(batch)).data, dtype=np.float64).reshape(len(batch))


def integrated_gradients(model, x, baseline=None, m: int = 256, batch_size: int = 4) -> AttributionMap:
    """Right-endpoint Riemann approximation of the path integral from
    ``baseline`` to ``x``.

    ``model`` maps a (B, *x.shape) batch to B scalars. Samples in a batch
    must not interact, which holds for every module here. The path points
    are visited in a fixed order so the sum is reproducible.
    """
    if m < 1:
        raise ConfigurationError(f"step count m must be >= 1, got {m}")
    x = np.asarray(x.data if isinstance(x, Volume4D) else x, dtype=np.float64)
    if baseline is None:
        base = min_baseline(x)
        desc = "min"
    else:
        base = np.asarray(baseline, dtype=np.float64)
        if base.ndim and base.shape != x.shape:
            raise DimensionError(f"baseline shape {base.shape} does not match input {x.shape}")
        base = np.broadcast_to(base, x.shape).copy()
        desc = float(base.flat[0]) if np.all(base == base.flat[0]) else "array"

    diff = x - base
    grad_sum = np.zeros_like(x)
    alphas = np.arange(1, m + 1) / m
    if np.any(diff):
        for lo in range(0, m, batch_size):
            a = alphas[lo : lo + batch_size].reshape((-1,) + (1,) * x.ndim)
            pts = Tensor(base + a * diff, requires_grad=True)
            backward(model(pts).sum())
            grad_sum += pts.grad.sum(axis=0)
        if hasattr(model, "parameters"):
            zero_grads(model.parameters())
    values = diff * grad_sum / m
    f = _scalar(model, np.stack([x, base]))
    return AttributionMap(values, desc, m, float(f[0]), float(f[1]))
