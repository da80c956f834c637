"""MSE training with Adam and step learning-rate decay."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import AugmentPolicy, PatientRecord, Segment, augment, derive_seed, patient_segments
from .model import BabyNet
from .ops import mse_loss
from .tensor import DTYPE, Tensor, backward, no_grad

log = logging.getLogger(__name__)

__all__ = [
    "AdamOptimizer",
    "LrSchedule",
    "NumericError",
    "TargetScaler",
    "TrainConfig",
    "TrainResult",
    "mse_loss",
    "predict_patient",
    "predict_segments",
    "train",
]


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class LrSchedule:
    initial_lr: float = 1e-4
    decay: float = 0.1
    step_epochs: int = 160
    total_epochs: int = 200

    def lr_at_epoch(self, epoch: int) -> float:
        return self.initial_lr * self.decay ** (epoch // self.step_epochs)


def lr_at_epoch(schedule: LrSchedule, epoch: int) -> float:
    return schedule.lr_at_epoch(epoch)


class AdamOptimizer:
    """Adam with bias correction and coupled L2 weight decay (``g += wd * theta``)."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params: list[Tensor] = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        if not any(p.grad is not None for p in self.params):
            raise RuntimeError("optimizer step called with no populated gradients")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(DTYPE)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(optimizer: AdamOptimizer) -> None:
    optimizer.step()


@dataclass
class TargetScaler:
    mean: float = 0.0
    std: float = 1.0

    @classmethod
    def fit(cls, weights) -> "TargetScaler":
        w = np.asarray(weights, dtype=np.float64)
        std = float(w.std())
        return cls(float(w.mean()), std if std > 0 else 1.0)

    def transform(self, w):
        return (np.asarray(w, dtype=np.float64) - self.mean) / self.std

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.std + self.mean


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 2
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_step_epochs: int = 160
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    raw_targets: bool = False
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    # fixed scaler instead of one fitted to the fold (a single patient has zero spread)
    target_scaler: TargetScaler | None = None

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.lr_decay, self.lr_step_epochs, self.epochs)


@dataclass
class TrainResult:
    losses: list[float]
    lrs: list[float]
    scaler: TargetScaler


def _input_shape(model: BabyNet) -> tuple[int, tuple[int, int]]:
    c = model.config
    return c.in_frames, (c.in_height, c.in_width)


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a singleton batch gives zero batch variance in every BN layer
    if len(batches) > 1 and len(batches[-1]) == 1 and batch_size > 1:
        batches.pop()
    return batches


def train(model: BabyNet, records: list[PatientRecord], config: TrainConfig, out_dir=None) -> TrainResult:
    """Fit ``model`` on every segment of ``records``.

    With ``out_dir`` set, writes ``loss.csv`` (``epoch,lr,train_mse``) and a
    ``checkpoint/`` directory whose manifest carries the target scaler.
    """
    if not records:
        raise ValueError("training fold is empty")
    seg_len, size = _input_shape(model)
    segments: list[Segment] = []
    weights: dict[str, float] = {}
    for r in records:
        segments.extend(patient_segments(r, seg_len, size))
        weights[r.patient_id] = r.birth_weight_g
    if not segments:
        raise ValueError(f"training patients yield no {seg_len}-frame segments")
    if config.target_scaler is not None:
        scaler = config.target_scaler
    elif config.raw_targets:
        scaler = TargetScaler()
    else:
        scaler = TargetScaler.fit(list(weights.values()))
    targets = scaler.transform([weights[s.patient_id] for s in segments]).astype(DTYPE)

    opt = AdamOptimizer(
        model.parameters(),
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        eps=config.adam_eps,
        weight_decay=config.weight_decay,
    )
    schedule = config.schedule
    losses, lrs = [], []
    model.train()
    for epoch in range(config.epochs):
        opt.lr = schedule.lr_at_epoch(epoch)
        rng = np.random.default_rng(derive_seed(config.seed, "shuffle", epoch))
        total, count = 0.0, 0
        for idx in _batches(len(segments), config.batch_size, rng):
            frames = np.stack(
                [
                    augment(
                        segments[i].frames,
                        derive_seed(config.seed, segments[i].patient_id, segments[i].video_index, segments[i].segment_index, epoch),
                        config.augment,
                    )
                    for i in idx
                ]
            )
            # [B, T, 1, H, W] -> [B, 1, T, H, W]
            x = Tensor(frames.transpose(0, 2, 1, 3, 4))
            y = Tensor(targets[idx].reshape(-1, 1))
            opt.zero_grad()
            loss = mse_loss(model(x), y)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            backward(loss)
            opt.step()
            total += value * len(idx)
            count += len(idx)
        losses.append(total / count)
        lrs.append(opt.lr)
        log.info("epoch %d lr %.3g train_mse %.6f", epoch, opt.lr, losses[-1])

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_loss_csv(out_dir / "loss.csv", losses, lrs)
        model.save(out_dir / "checkpoint", {"scaler_mean": repr(scaler.mean), "scaler_std": repr(scaler.std)})
    return TrainResult(losses, lrs, scaler)


def write_loss_csv(path, losses, lrs) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_mse"])
        for e, (loss, lr) in enumerate(zip(losses, lrs)):
            w.writerow([e, repr(lr), repr(loss)])


def predict_segments(model: BabyNet, segments: list[Segment], batch_size: int = 8) -> np.ndarray:
    """Eval-mode model outputs (scaled units), one per segment."""
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(segments), batch_size):
            frames = np.stack([s.frames for s in segments[i : i + batch_size]])
            out.append(model(Tensor(frames.transpose(0, 2, 1, 3, 4))).data[:, 0])
    return np.concatenate(out) if out else np.zeros(0, dtype=DTYPE)


def predict_patient(model: BabyNet, patient: PatientRecord, scaler: TargetScaler) -> float:
    """Mean of the per-segment predictions over all of a patient's videos, in grams."""
    seg_len, size = _input_shape(model)
    segments = patient_segments(patient, seg_len, size)
    if not segments:
        raise ValueError(f"patient {patient.patient_id} yields no {seg_len}-frame segments")
    grams = scaler.inverse(predict_segments(model, segments))
    return float(np.mean(grams))
