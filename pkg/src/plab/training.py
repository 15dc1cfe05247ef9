"""Minibatch SGD training, PGD adversarial training and flip/crop augmentation."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset
from .pgd import pgd_attack, per_sample_ce
from .tensor import DTYPE, SGD, make_rng

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class AdvConfig:
    steps: int = 10
    budget: float = 8 / 255
    step_size: float | None = None


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.01
    lr_milestones: tuple = (10, 20)
    lr_factor: float = 0.8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    augment: bool = False
    crop_pad: int = 4
    adversarial: AdvConfig | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_milestones", tuple(int(m) for m in self.lr_milestones))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.lr_factor <= 1:
            raise ValueError("lr_factor must lie in (0, 1]")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ValueError("lr_milestones must be sorted")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if isinstance(self.adversarial, dict):
            object.__setattr__(self, "adversarial", AdvConfig(**self.adversarial))

    def lr_at(self, epoch: int) -> float:
        k = sum(1 for m in self.lr_milestones if epoch >= m)
        return self.lr * self.lr_factor ** k

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_milestones"] = list(self.lr_milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# full-scale reference recipes, recorded in reports next to the desk defaults
REFERENCE_VICTIM = TrainConfig(epochs=150, lr=0.01, lr_milestones=(40, 80, 120), lr_factor=0.8,
                           augment=True)
REFERENCE_F1 = TrainConfig(epochs=200, lr=0.01, lr_milestones=(100, 150), lr_factor=0.5,
                       augment=True, adversarial=AdvConfig(steps=10, budget=8 / 255))
REFERENCE_F2 = TrainConfig(epochs=40, lr=0.01, lr_milestones=(), augment=True)


def hflip(batch: np.ndarray) -> np.ndarray:
    return batch[..., ::-1].copy()


def augment(batch: np.ndarray, rng: np.random.Generator, pad: int = 4,
            flip: bool | None = None) -> np.ndarray:
    """Per-image random horizontal flip (p = 0.5) and padded random crop.

    ``flip`` forces (True) or suppresses (False) flipping for every image.
    """
    batch = np.asarray(batch, dtype=DTYPE)
    n, _, h, w = batch.shape
    flips = rng.random(n) < 0.5 if flip is None else np.full(n, bool(flip))
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2)) if pad else np.zeros((n, 2), int)
    out = np.empty_like(batch)
    padded = np.pad(batch, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else batch
    for i in range(n):
        img = padded[i, :, offs[i, 0]:offs[i, 0] + h, offs[i, 1]:offs[i, 1] + w]
        out[i] = img[..., ::-1] if flips[i] else img
    return out


@dataclass
class History:
    rows: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, i):
        return self.rows[i]

    def to_csv(self) -> str:
        cols = ["epoch", "lr", "loss", "acc"]
        if self.rows and "adv_loss" in self.rows[0]:
            cols += ["adv_loss", "adv_acc"]
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(cols)
        for r in self.rows:
            wr.writerow([r["epoch"]] + [repr(float(r[c])) for c in cols[1:]])
        return buf.getvalue()


def _epoch_order(config: TrainConfig, epoch: int, n: int) -> np.ndarray:
    return make_rng(config.seed, "shuffle", epoch).permutation(n)


def train(net, dataset: Dataset, config: TrainConfig, extra_perturb=None):
    """Train ``net`` in place; returns ``(net, history)``.

    ``extra_perturb`` (N-aligned array) is added to the inputs before the
    forward pass; the min-min shortcut trainer uses it for its noise map.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    opt = SGD(net.params, config.lr, config.momentum, config.weight_decay)
    hist = History()
    adv = config.adversarial
    for epoch in range(config.epochs):
        opt.lr = config.lr_at(epoch)
        aug_rng = make_rng(config.seed, "augment", epoch)
        order = _epoch_order(config, epoch, len(dataset))
        tot = {"loss": 0.0, "acc": 0.0, "adv_loss": 0.0, "adv_acc": 0.0}
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            x, y = dataset.images[idx], dataset.labels[idx]
            if extra_perturb is not None:
                x = np.clip(x + extra_perturb[idx], 0.0, 1.0).astype(DTYPE)
            if adv is not None:
                clean_logits = net.logits(x).data
                tot["loss"] += float(per_sample_ce(clean_logits, y).sum())
                tot["acc"] += float((clean_logits.argmax(1) == y).sum())
                if adv.budget > 0:
                    x = x + pgd_attack(net, x, y, adv.budget, adv.steps, adv.step_size)
            if config.augment:
                x = augment(x, aug_rng, config.crop_pad)
            opt.zero_grad()
            try:
                z = net.logits(x)
                loss = T.cross_entropy(z, y)
                loss.backward()
                opt.step()
            except T.NonFiniteError as exc:
                raise TrainingDiverged(f"epoch {epoch}, batch at {start}: {exc}") from exc
            key = "adv_" if adv is not None else ""
            tot[key + "loss"] += float(loss.data) * len(idx)
            tot[key + "acc"] += float((z.data.argmax(1) == y).sum())
        n = len(dataset)
        row = {"epoch": epoch, "lr": opt.lr, "loss": tot["loss"] / n, "acc": tot["acc"] / n}
        if adv is not None:
            row.update(adv_loss=tot["adv_loss"] / n, adv_acc=tot["adv_acc"] / n)
        if not np.isfinite(row["loss"]):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
        hist.rows.append(row)
        log.debug("epoch %d %s", epoch, row)
    return net, hist


def train_adversarial(net, dataset: Dataset, config: TrainConfig):
    """Adversarial training: each batch is replaced by PGD examples before the step."""
    if config.adversarial is None:
        raise ValueError("config.adversarial must be set for adversarial training")
    return train(net, dataset, config)


def empirical_risk(net, dataset: Dataset) -> float:
    """Mean cross-entropy of ``net`` over ``dataset``."""
    z = np.concatenate([net.logits(dataset.images[i:i + 512]).data
                        for i in range(0, len(dataset), 512)])
    return float(per_sample_ce(z, dataset.labels).mean())
