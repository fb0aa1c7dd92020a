"""Adam, EMA shadow weights, and the seeded train/validate loop.

One training step: draw a shuffled batch of windows across all sessions,
forward with dropout, loss on core frames only, backward, Adam update, EMA
update. Validation runs on the EMA weights with clamped predictions and CCC.
Everything is driven by explicit generators seeded from the config, so a
fixed seed reproduces history and checkpoints bit for bit in single-threaded
mode.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .metrics import mse, ccc_loss, evaluate_sessions, EvalReport
from .model import save_checkpoint
from .segmentation import make_segments, build_mixed_batch


class DivergenceError(ArithmeticError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    lr: float = 5e-5
    batch_size: int = 128
    epochs: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.999
    seed: int = 0
    loss: str = "mse"                    # "mse" | "ccc"
    ccc_per_window: bool = False
    grad_clip: float = 0.0               # 0 disables
    weight_decay: float = 0.0            # 0 disables
    lr_schedule: str = "none"            # "none" | "cosine" (per-epoch decay)
    log_interval: int = 0                # batches between progress lines; 0 = off
    eval_interval: int = 1               # epochs between validation passes

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.loss not in ("mse", "ccc"):
            raise ValueError(f"loss must be 'mse' or 'ccc', got {self.loss!r}")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.eval_interval < 1:
            raise ValueError("eval_interval must be >= 1")
        if self.lr_schedule not in ("none", "cosine"):
            raise ValueError(f"lr_schedule must be 'none' or 'cosine', "
                             f"got {self.lr_schedule!r}")


class Adam:
    """Standard Adam with bias correction over a named parameter list."""

    def __init__(self, named_params, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(named_params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, (name, p) in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in parameter '{name}'")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class EmaState:
    """Exponentially smoothed shadow copy of the parameters."""

    def __init__(self, named_params, decay: float):
        self.params = list(named_params)
        self.decay = decay
        self.shadow = {name: p.data.copy() for name, p in self.params}

    def update(self) -> None:
        d = self.decay
        for name, p in self.params:
            if self.shadow[name].shape != p.data.shape:
                raise ValueError(f"EMA shadow shape drifted for '{name}'")
            self.shadow[name] = d * self.shadow[name] + (1.0 - d) * p.data

    def swap(self) -> None:
        """Exchange live parameters with the shadow; call twice to restore."""
        for name, p in self.params:
            self.shadow[name], p.data = p.data, self.shadow[name]

    class _Swapped:
        def __init__(self, ema):
            self.ema = ema

        def __enter__(self):
            self.ema.swap()
            return self.ema

        def __exit__(self, *exc):
            self.ema.swap()
            return False

    def swapped(self) -> "_Swapped":
        return EmaState._Swapped(self)


def evaluate_with_ema(model, ema: EmaState, sessions, batch_size: int = 64) -> EvalReport:
    """Evaluate using the smoothed weights; live parameters are untouched."""
    with ema.swapped():
        return evaluate_sessions(model, sessions, batch_size=batch_size)


def clip_gradients(named_params, max_norm: float) -> float:
    total = 0.0
    grads = [(p, p.grad) for _, p in named_params if p.grad is not None]
    for _, g in grads:
        total += float(np.sum(g * g))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for p, g in grads:
            p.grad = g * factor
    return norm


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_ccc: float = float("-inf")
    best_path: str | None = None
    last_path: str | None = None

    def write_history_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", "val_ccc"])
            for row in self.history:
                writer.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_ccc"])])


def _batch_loss(model, batch, loss_kind: str, ccc_per_window: bool, rng):
    pred = model.forward(batch.target, batch.partner, train=True, rng=rng)
    pred = T.reshape(pred, pred.shape[:-1])
    mask = batch.mask.astype(pred.data.dtype)
    if loss_kind == "mse":
        return mse(pred, batch.labels, mask)
    return ccc_loss(pred, batch.labels, mask, per_window=ccc_per_window)


def train(model, train_sessions, val_sessions, cfg: TrainConfig,
          out_dir=None, quiet: bool = False) -> TrainResult:
    """Train a model; returns history plus best/last checkpoint paths.

    Checkpoints store the EMA weights, i.e. exactly what validation scored.
    Raises DivergenceError with the epoch/batch position if the loss or any
    gradient goes non-finite.
    """
    labeled = [s for s in train_sessions if s.roles["target"].labels is not None]
    if not labeled:
        raise ValueError("no labeled training sessions")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    ss = np.random.SeedSequence(cfg.seed)
    shuffle_rng, dropout_rng = (np.random.default_rng(s) for s in ss.spawn(2))

    pairs = []
    for si, session in enumerate(labeled):
        for seg in make_segments(session.num_frames, model.core_len, model.context_len):
            pairs.append((si, seg))

    params = model.named_parameters()
    optimizer = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    ema = EmaState(params, cfg.ema_decay)
    result = TrainResult()

    def checkpoint(path, label):
        with ema.swapped():
            save_checkpoint(path, model, extra={"checkpoint": label})
        return str(path)

    for epoch in range(cfg.epochs):
        t0 = time.time()
        if cfg.lr_schedule == "cosine":
            optimizer.lr = cfg.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))
        order = shuffle_rng.permutation(len(pairs))
        losses = []
        for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
            chosen = [pairs[j] for j in order[lo:lo + cfg.batch_size]]
            batch = build_mixed_batch((labeled[si], seg) for si, seg in chosen)
            model.zero_grad()
            loss = _batch_loss(model, batch, cfg.loss, cfg.ccc_per_window, dropout_rng)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}")
            T.backward(loss)
            if cfg.grad_clip:
                clip_gradients(params, cfg.grad_clip)
            optimizer.step()
            ema.update()
            losses.append(float(loss.data))
            if cfg.log_interval and (bi + 1) % cfg.log_interval == 0 and not quiet:
                print(f"  epoch {epoch} batch {bi + 1}: loss {losses[-1]:.6f}")
        train_loss = float(np.mean(losses)) if losses else float("nan")

        val_ccc = float("nan")
        due = (epoch + 1) % cfg.eval_interval == 0 or epoch == cfg.epochs - 1
        if val_sessions and due:
            val_report = evaluate_with_ema(model, ema, val_sessions)
            val_ccc = val_report.mean_ccc
        result.history.append({"epoch": epoch, "train_loss": train_loss, "val_ccc": val_ccc})
        if not quiet:
            print(f"epoch {epoch}: train_loss {train_loss:.6f} val_ccc {val_ccc:.4f} "
                  f"({time.time() - t0:.1f}s)")
        if val_sessions and val_ccc > result.best_val_ccc:
            result.best_val_ccc = val_ccc
            result.best_epoch = epoch
            if out_dir is not None:
                result.best_path = checkpoint(out_dir / "best.ckpt", f"best@epoch{epoch}")

    if out_dir is not None:
        result.last_path = checkpoint(out_dir / "last.ckpt", "last")
        if result.best_path is None:
            result.best_path = result.last_path
        result.write_history_csv(out_dir / "history.csv")
    return result
