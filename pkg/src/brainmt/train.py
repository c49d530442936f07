"""Losses, AdamW, warmup-cosine schedule, training loop, checkpoints and CV."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from brainmt.errors import BadMagicError, ConfigurationError, DataError, NumericError, TruncatedPayloadError
from brainmt.metrics import evaluate_classification, evaluate_regression
from brainmt.model import BrainMT, ModelConfig
from brainmt.tensor import Tensor, backward, bce_with_logits, mse_loss, no_grad, zero_grads
from brainmt.volume import Subject, cv_splits, sample_frames, zscore_normalize

log = logging.getLogger(__name__)

CKPT_MAGIC = b"BMTCKPT1"
CKPT_VERSION = 1

# names matching these never receive weight decay
_NO_DECAY = ("A_log", "P_s", "P_t", "cls")


def loss_fn(pred: Tensor, target, task: str) -> Tensor:
    if task == "regression":
        return mse_loss(pred, target)
    if task == "classification":
        return bce_with_logits(pred, target)
    raise ConfigurationError(f"unknown task {task!r}")


def lr_schedule(step: int, cfg: ModelConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0 over ``warmup_epochs``, then half-cosine to 0 at
    the last step; steps past the end stay at the final value."""
    total = max(1, cfg.epochs * steps_per_epoch)
    warm = min(total, cfg.warmup_epochs * steps_per_epoch)
    step = min(max(step, 0), total)
    if step < warm:
        return cfg.lr * step / warm
    if total == warm:
        return cfg.lr
    progress = (step - warm) / (total - warm)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay applied to matrices and kernels."""

    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.05):
        self.params = OrderedDict(named_params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.decay = {k: p.ndim >= 2 and not k.endswith(_NO_DECAY) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            if self.decay[k] and self.weight_decay:
                p.data = p.data * (1.0 - lr * self.weight_decay)
            if p.grad is None:
                continue
            g = p.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params.values())


@dataclass
class TrainState:
    params: OrderedDict
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_val: float = float("inf")
    best_epoch: int = -1
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# data plumbing


class Inputs:
    """Normalized volumes plus targets for a fixed subject list."""

    def __init__(self, subjects: list[Subject], cfg: ModelConfig):
        self.ids = [s.id for s in subjects]
        self.volumes = [zscore_normalize(s.volume) for s in subjects]
        if cfg.task == "regression":
            self.targets = np.array([s.cognition_score for s in subjects], dtype=np.float64)
        else:
            self.targets = np.array([s.sex_label for s in subjects], dtype=np.float64)
        self.cfg = cfg

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, idx, epoch: int | None = None) -> np.ndarray:
        """Frame-sampled batch; ``epoch=None`` gives the fixed evaluation window."""
        cfg = self.cfg
        out = []
        for i in idx:
            key = (cfg.seed, i) if epoch is None else (cfg.seed, epoch, i, 1)
            out.append(sample_frames(self.volumes[i], cfg.T, key, cfg.frame_sampling).data)
        return np.stack(out)


def predict(model: BrainMT, inputs: Inputs, batch_size: int = 4) -> np.ndarray:
    preds = []
    with no_grad():
        for lo in range(0, len(inputs), batch_size):
            idx = range(lo, min(len(inputs), lo + batch_size))
            preds.append(model(inputs.batch(idx)).data.copy())
    return np.concatenate(preds) if preds else np.empty(0)


def metrics_for(preds, targets, task: str) -> dict[str, float]:
    if task == "regression":
        return evaluate_regression(preds, targets)
    return evaluate_classification(preds, targets)


def _mean_loss(preds, targets, task) -> float:
    with no_grad():
        return loss_fn(Tensor(np.asarray(preds)), targets, task).item()


# ---------------------------------------------------------------------------
# training


def train(
    subjects: list[Subject],
    cfg: ModelConfig,
    split,
    max_steps: int | None = None,
    model: BrainMT | None = None,
) -> tuple[BrainMT, TrainState]:
    """Fit on ``split.train`` with per-epoch validation and early stopping.

    The returned model holds the best-validation parameters (the final
    ones when there is no validation set).
    """
    by_id = {s.id: s for s in subjects}
    missing = [i for i in list(split.train) + list(split.val) if i not in by_id]
    if missing:
        raise DataError(f"split references unknown subjects: {missing[:3]}")
    if not split.train:
        raise DataError("training split is empty")
    train_in = Inputs([by_id[i] for i in split.train], cfg)
    val_in = Inputs([by_id[i] for i in split.val], cfg) if split.val else None

    model = BrainMT(cfg) if model is None else model
    opt = AdamW(model.named_parameters(), cfg.betas, cfg.adam_eps, cfg.weight_decay)
    steps_per_epoch = math.ceil(len(train_in) / cfg.batch_size)
    state = TrainState(model.state_dict())
    rng = np.random.default_rng(cfg.seed)
    stale = 0

    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_in))
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            lr = lr_schedule(state.step + 1, cfg, steps_per_epoch)
            pred = model(train_in.batch(idx, epoch))
            loss = loss_fn(pred, train_in.targets[idx], cfg.task)
            if not np.isfinite(loss.data).all():
                ids = [train_in.ids[i] for i in idx]
                raise NumericError(f"non-finite loss at epoch {epoch}, step {state.step}, subjects {ids}")
            backward(loss)
            opt.step(lr)
            opt.zero_grad()
            state.step += 1
            losses.append(loss.item())
            if max_steps is not None and state.step >= max_steps:
                break
        state.epoch = epoch + 1
        state.history.append({"epoch": epoch, "split": "train", "loss": float(np.mean(losses)), "lr": lr})

        if val_in is not None:
            preds = predict(model, val_in)
            val_loss = _mean_loss(preds, val_in.targets, cfg.task)
            row = {"epoch": epoch, "split": "val", "loss": val_loss, "lr": lr}
            row.update(metrics_for(preds, val_in.targets, cfg.task))
            state.history.append(row)
            log.info("epoch %d train %.4f val %.4f", epoch, state.history[-2]["loss"], val_loss)
            if val_loss < state.best_val:
                state.best_val, state.best_epoch, stale = val_loss, epoch, 0
                state.params = model.state_dict()
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
        else:
            log.info("epoch %d train %.4f", epoch, state.history[-1]["loss"])
        if max_steps is not None and state.step >= max_steps:
            break

    if val_in is None:
        state.params = model.state_dict()
        state.best_epoch = state.epoch - 1
    model.load_state_dict(state.params)
    state.m, state.v = opt.m, opt.v
    return model, state


def evaluate(model: BrainMT, subjects: list[Subject], cfg: ModelConfig | None = None) -> dict[str, float]:
    cfg = model.cfg if cfg is None else cfg
    inputs = Inputs(subjects, cfg)
    preds = predict(model, inputs)
    out = metrics_for(preds, inputs.targets, cfg.task)
    out["loss"] = _mean_loss(preds, inputs.targets, cfg.task)
    return out


# ---------------------------------------------------------------------------
# checkpoints and CSV output


def save_checkpoint(path, model: BrainMT, state: TrainState | None = None) -> None:
    """Magic, u32 version, u32 JSON length, JSON header, then float64 arrays."""
    params = model.state_dict()
    moments = bool(state and state.m)
    header = {
        "config": model.cfg.to_dict(),
        "params": [[k, list(v.shape)] for k, v in params.items()],
        "moments": moments,
        "step": state.step if state else 0,
        "epoch": state.epoch if state else 0,
        "best_val": None if state is None or not math.isfinite(state.best_val) else state.best_val,
        "best_epoch": state.best_epoch if state else -1,
        "history": state.history if state else [],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    arrays = list(params.values())
    if moments:
        arrays += [state.m[k] for k in params] + [state.v[k] for k in params]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[BrainMT, TrainState]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise BadMagicError(f"{path}: not a BMTCKPT1 checkpoint")
    if len(raw) < 16:
        raise TruncatedPayloadError(f"{path}: checkpoint header truncated")
    version, n = struct.unpack_from("<II", raw, 8)
    if version != CKPT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + n])
    cfg = ModelConfig.from_dict(header["config"])
    offset = 16 + n

    def read(shape):
        nonlocal offset
        count = int(np.prod(shape))
        if offset + 8 * count > len(raw):
            raise TruncatedPayloadError(f"{path}: parameter payload truncated")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
        return arr

    names = [(k, tuple(s)) for k, s in header["params"]]
    params = OrderedDict((k, read(s)) for k, s in names)
    m = v = {}
    if header["moments"]:
        m = {k: read(s) for k, s in names}
        v = {k: read(s) for k, s in names}
    model = BrainMT(cfg)
    model.load_state_dict(params)
    best = header["best_val"]
    state = TrainState(
        params, m, v, header["step"], header["epoch"],
        float("inf") if best is None else best, header["best_epoch"], header["history"],
    )
    return model, state


def write_history_csv(path, history: list[dict], task: str) -> None:
    cols = ["epoch", "split", "loss", "lr"] + (
        ["mse", "mae", "pearson_r"] if task == "regression" else ["acc", "bacc", "auroc"]
    )
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({c: row.get(c, "") for c in cols})


# ---------------------------------------------------------------------------
# cross-validation


def run_cv(subjects: list[Subject], cfg: ModelConfig, folds: int = 3, repeats: int = 1, csv_path=None) -> dict:
    """Repeated k-fold CV. Reports per-fold rows, the mean and std over all
    folds, and the std of per-repeat means."""
    ids = [s.id for s in subjects]
    by_id = {s.id: s for s in subjects}
    rows = []
    for r in range(repeats):
        for split in cv_splits(ids, folds, seed=cfg.seed + r):
            model, _ = train(subjects, cfg, split)
            m = evaluate(model, [by_id[i] for i in split.test])
            rows.append({"repeat": r, "fold": split.fold_index, **m})
    keys = [k for k in rows[0] if k not in ("repeat", "fold")]
    summary = {}
    for k in keys:
        vals = np.array([row[k] for row in rows])
        per_repeat = np.array([np.mean([row[k] for row in rows if row["repeat"] == r]) for r in range(repeats)])
        summary[k] = {
            "mean": float(vals.mean()),
            "std_folds": float(vals.std()),
            "std_repeats": float(per_repeat.std()),
        }
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["repeat", "fold"] + keys)
            for row in rows:
                w.writerow([row["repeat"], row["fold"]] + [row[k] for k in keys])
            for stat in ("mean", "std_folds", "std_repeats"):
                w.writerow([stat, ""] + [summary[k][stat] for k in keys])
    return {"rows": rows, "summary": summary}
