"""Model configuration, presets and the full encoder -> Mamba -> transformer cascade."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass

import numpy as np

from brainmt.attention import TransformerBlock
from brainmt.encoder import ConvEncoder
from brainmt.errors import ConfigurationError, DimensionError
from brainmt.nn import LayerNorm, Linear, Module
from brainmt.positional import PositionalCls
from brainmt.ssm import MambaBlock, ScanOrder
from brainmt.tensor import Tensor, as_tensor, gelu, no_grad
from brainmt.volume import Volume4D, check_dims

TASKS = ("regression", "classification")
FRAME_SAMPLING = ("window", "subset")


@dataclass
class ModelConfig:
    dims: tuple[int, int, int] = (32, 32, 32)
    T: int = 16
    C: int = 8
    mamba_layers: int = 4
    transformer_layers: int = 2
    heads: int = 8
    state_dim: int = 16
    expansion: int = 2
    d_conv: int = 4
    mlp_ratio: int = 4
    scan_order: str = "temporal_first"
    task: str = "regression"
    frame_sampling: str = "window"
    seed: int = 0
    # optimisation
    lr: float = 2e-4
    weight_decay: float = 0.05
    epochs: int = 20
    warmup_epochs: int = 5
    batch_size: int = 2
    patience: int = 5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        check_dims(self.dims)
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.frame_sampling not in FRAME_SAMPLING:
            raise ConfigurationError(f"frame_sampling must be one of {FRAME_SAMPLING}, got {self.frame_sampling!r}")
        try:
            ScanOrder(self.scan_order)
        except ValueError:
            raise ConfigurationError(f"unknown scan_order {self.scan_order!r}") from None
        for name in ("T", "C", "heads", "state_dim", "expansion", "d_conv", "batch_size", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.mamba_layers < 0 or self.transformer_layers < 0:
            raise ConfigurationError("layer counts must be non-negative")
        if self.Z % self.heads:
            raise ConfigurationError(f"token width Z={self.Z} is not divisible by heads={self.heads}")

    @property
    def Z(self) -> int:
        return 4 * self.C

    @property
    def K(self) -> int:
        H, W, D = self.dims
        return (H // 16) * (W // 16) * (D // 16)

    @property
    def L(self) -> int:
        return self.T * self.K + 1

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["dims"] = list(self.dims)
        d["betas"] = list(self.betas)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


# Paper-scale spatial size and embedding width are not published; 64^3 and C=32
# keep one forward pass within a few GB.
PRESETS = {
    "desk": ModelConfig(),
    "paper": ModelConfig(dims=(64, 64, 64), T=200, C=32, mamba_layers=12, transformer_layers=8),
    "large": ModelConfig(dims=(64, 64, 64), T=200, C=32, mamba_layers=24, transformer_layers=16),
    "small": ModelConfig(dims=(64, 64, 64), T=200, C=32, mamba_layers=6, transformer_layers=4),
}


def preset(name: str, **overrides) -> ModelConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides)


class BrainMT(Module):
    """Volumes (B, T, H, W, D) -> one scalar per subject (prediction or logit)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator | None = None):
        cfg.validate()
        rng = np.random.default_rng(cfg.seed) if rng is None else rng
        self.cfg = cfg
        Z = cfg.Z
        self.encoder = ConvEncoder(rng, cfg.C)
        self.pos = PositionalCls(rng, cfg.T, cfg.K, Z)
        self.mamba = [
            MambaBlock(rng, Z, cfg.state_dim, cfg.expansion, cfg.d_conv, cfg.scan_order)
            for _ in range(cfg.mamba_layers)
        ]
        self.transformer = [TransformerBlock(rng, Z, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.transformer_layers)]
        self.head_norm = LayerNorm(Z)
        self.head_fc1 = Linear(rng, Z, Z)
        self.head_fc2 = Linear(rng, Z, 1)

    def tokens(self, x) -> Tensor:
        """Token sequence (B, L, Z) entering the Mamba stack."""
        x = as_tensor(x)
        cfg = self.cfg
        if x.ndim != 5 or tuple(x.shape[1:]) != (cfg.T,) + cfg.dims:
            raise DimensionError(f"expected input (B, {cfg.T}, {cfg.dims}), got {x.shape}")
        return self.pos(self.encoder(x)).tokens

    def forward(self, x) -> Tensor:
        cfg = self.cfg
        h = self.tokens(x)
        for block in self.mamba:
            h = block(h, cfg.T, cfg.K)
        for block in self.transformer:
            h = block(h)
        cls = self.head_norm(h[:, 0])
        return self.head_fc2(gelu(self.head_fc1(cls))).reshape(h.shape[0])

    def param_count(self, include_temporal: bool = True) -> int:
        n = self.num_parameters()
        return n if include_temporal else n - self.pos.P_t.size


def brainmt_forward(volume, cfg: ModelConfig, model: BrainMT) -> float:
    """Scalar output for a single (T, H, W, D) volume."""
    if cfg != model.cfg:
        raise ConfigurationError("config does not match the model it is paired with")
    data = volume.data if isinstance(volume, Volume4D) else np.asarray(volume)
    with no_grad():
        return model(data[None]).item()
