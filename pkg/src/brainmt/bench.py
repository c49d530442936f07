"""Sequence-length scaling benchmark: analytic activation counts plus timing."""

from __future__ import annotations

import csv
import math
import statistics
import time
from dataclasses import astuple, dataclass, field

import numpy as np

from brainmt.errors import ConfigurationError
from brainmt.model import BrainMT, ModelConfig
from brainmt.tensor import no_grad
from brainmt.tensor.ops import _ATTN_CAP

HEADER = (
    "T",
    "L",
    "activation_elements",
    "param_count",
    "param_count_no_pt",
    "wall_time_s",
    "peak_workspace_elements",
)


def mamba_activation_elements(cfg: ModelConfig, L: int, batch: int = 1) -> int:
    """Elements a Mamba block keeps for its backward pass.

    Scan states are recomputed during backward, so nothing here grows
    faster than L.
    """
    Z, N = cfg.Z, cfg.state_dim
    d = cfg.expansion * Z
    r = math.ceil(Z / 16)
    # xz, conv, silu(conv), dt_down, dt_up, softplus, B, C, scan, +Dx, silu(z), gate, out_proj
    per_dir = 2 * d + d + d + r + d + d + N + N + d + d + d + d + Z
    # reorder, cls concat, norm, reversal in/out, sum, residual, inverse reorder
    shared = 8 * Z
    return batch * L * (2 * per_dir + shared)


def transformer_activation_elements(cfg: ModelConfig, L: int, batch: int = 1) -> int:
    """Elements a transformer block keeps, counting the fused attention
    residue (output plus one log-sum-exp per row and head)."""
    Z, h, hidden = cfg.Z, cfg.heads, cfg.mlp_ratio * cfg.Z
    attn = 3 * Z + Z + h + Z  # q, k, v, attention output, lse, out projection
    mlp = hidden + hidden + Z  # fc1, gelu, fc2
    return batch * L * (Z + attn + Z + Z + mlp + Z)  # two norms, two residual sums


def stack_activation_elements(cfg: ModelConfig, T: int | None = None, batch: int = 1) -> int:
    T = cfg.T if T is None else T
    L = T * cfg.K + 1
    return cfg.mamba_layers * mamba_activation_elements(cfg, L, batch) + cfg.transformer_layers * (
        transformer_activation_elements(cfg, L, batch)
    )


def attention_workspace_elements(cfg: ModelConfig, T: int | None = None, batch: int = 1) -> int:
    """Largest score block the streaming attention materializes at once."""
    if cfg.transformer_layers == 0:
        return 0
    T = cfg.T if T is None else T
    L = T * cfg.K + 1
    G = batch * cfg.heads
    rows = max(1, min(L, _ATTN_CAP // max(G * L, 1)))
    return G * rows * L


@dataclass(frozen=True)
class BenchRow:
    T: int
    L: int
    activation_elements: int
    param_count: int
    param_count_no_pt: int
    wall_time_s: float
    peak_workspace_elements: int


@dataclass
class BenchReport:
    rows: list[BenchRow] = field(default_factory=list)

    def __post_init__(self):
        self.rows = sorted(self.rows, key=lambda r: r.T)

    def row(self, T: int) -> BenchRow:
        for r in self.rows:
            if r.T == T:
                return r
        raise KeyError(T)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(HEADER)
            for r in self.rows:
                w.writerow(astuple(r))


def time_forward(model: BrainMT, x: np.ndarray, repeats: int = 5) -> float:
    """Median wall time of ``repeats`` gradient-free forward passes."""
    times = []
    with no_grad():
        model(x)  # warm-up (kernel compilation, allocator)
        for _ in range(repeats):
            t0 = time.perf_counter()
            model(x)
            times.append(time.perf_counter() - t0)
    return statistics.median(times)


def run_bench(cfg: ModelConfig, t_list, repeats: int = 5, batch: int = 1, measure: bool = True) -> BenchReport:
    t_list = sorted({int(t) for t in t_list})
    if len(t_list) < 2:
        raise ConfigurationError("the benchmark needs at least two values of T")
    if t_list[0] < 1:
        raise ConfigurationError("T values must be positive")
    rows = []
    for T in t_list:
        c = cfg.replace(T=T)
        model = BrainMT(c)
        wall = float("nan")
        if measure:
            x = np.random.default_rng(c.seed).normal(size=(batch, T) + c.dims)
            wall = time_forward(model, x, repeats)
        rows.append(
            BenchRow(
                T=T,
                L=c.L,
                activation_elements=stack_activation_elements(c, batch=batch),
                param_count=model.param_count(),
                param_count_no_pt=model.param_count(include_temporal=False),
                wall_time_s=wall,
                peak_workspace_elements=attention_workspace_elements(c, batch=batch),
            )
        )
    return BenchReport(rows)
