"""Trigger construction: masked adversarial noise + min-min shortcut, and baselines.

The composed trigger for a sample x with label y is

    P(x) = U * delta_adv(x) + (1 - U) * delta_scut(x + U * delta_adv(x))

where ``U`` is a binary mask (zero on an upper-left corner), ``delta_adv`` is
L-inf PGD against the classifier ``f1`` and ``delta_scut`` is error-minimising
noise toward class 0 of the two-class shortcut network ``f2``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Dataset
from .pgd import error_minimizing_noise, input_gradient, pgd_attack, per_sample_ce
from .tensor import DTYPE, f32_floor, make_rng
from .training import TrainConfig, train

TRIGGER_KINDS = ("ours", "rn_linf", "rn_l0", "ua", "adv", "scut")


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class Mask:
    """Binary mask U over one image; ``complement`` is 1 - U."""
    values: np.ndarray
    corner: tuple = (0, 0)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=DTYPE)
        if not np.isin(v, (0.0, 1.0)).all():
            raise ValueError("mask entries must be 0 or 1")
        object.__setattr__(self, "values", v)

    @property
    def complement(self) -> np.ndarray:
        return (DTYPE(1) - self.values).astype(DTYPE)


def build_mask(shape, corner=(8, 8)) -> Mask:
    """Zeros on rows [0, h) x cols [0, w) of every channel, ones elsewhere."""
    c, height, width = (int(s) for s in shape)
    h, w = (int(v) for v in corner)
    if h < 0 or w < 0 or h > height or w > width:
        raise ValueError(f"corner {corner} does not fit in image {shape}")
    u = np.ones((c, height, width), dtype=DTYPE)
    u[:, :h, :w] = 0
    return Mask(u, (h, w))


def full_mask(shape) -> Mask:
    return build_mask(shape, (0, 0))


def empty_mask(shape) -> Mask:
    _, h, w = shape
    return build_mask(shape, (h, w))


@dataclass
class TriggerSet:
    perturbations: np.ndarray        # (N, C, H, W), aligned with a dataset
    eta: float                       # L-inf radius, or pixel count for rn_l0
    kind: str = "ours"
    mask: Mask | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.perturbations = np.asarray(self.perturbations, dtype=DTYPE)
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")

    @property
    def norm(self) -> str:
        return "l0" if self.kind == "rn_l0" else "linf"

    def __len__(self) -> int:
        return len(self.perturbations)

    def subset(self, idx) -> "TriggerSet":
        return TriggerSet(self.perturbations[np.asarray(idx)], self.eta, self.kind,
                          self.mask, dict(self.meta))

    def max_linf(self) -> float:
        return float(np.abs(self.perturbations).max()) if self.perturbations.size else 0.0

    def check_budget(self, idx=None) -> None:
        p = self.perturbations if idx is None else self.perturbations[np.asarray(idx)]
        if self.norm == "linf":
            if p.size and float(np.abs(p).max()) > self.eta:
                raise BudgetError(f"trigger exceeds L-inf budget {self.eta}")
        else:
            allowed = np.zeros(p.shape[2:], dtype=bool)
            flat = np.asarray(self.meta.get("positions", []), dtype=np.int64)
            allowed.flat[flat] = True
            if np.any(p[:, :, ~allowed] != 0):
                raise BudgetError("L0 trigger modifies undeclared positions")

    def save(self, directory, stem: str = "triggers") -> list[Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays = [self.perturbations]
        if self.mask is not None:
            arrays.append(self.mask.values)
        tpath = directory / f"{stem}.plab"
        T.save_tensors(tpath, arrays)
        meta = {"kind": self.kind, "eta": self.eta, "norm": self.norm,
                "mask_corner": None if self.mask is None else list(self.mask.corner),
                "meta": self.meta}
        mpath = directory / f"{stem}.json"
        mpath.write_text(json.dumps(meta, indent=2, sort_keys=True))
        return [tpath, mpath]

    @classmethod
    def load(cls, directory, stem: str = "triggers") -> "TriggerSet":
        directory = Path(directory)
        arrays = T.load_tensors(directory / f"{stem}.plab")
        meta = json.loads((directory / f"{stem}.json").read_text())
        mask = None
        if meta["mask_corner"] is not None:
            mask = Mask(arrays[1], tuple(meta["mask_corner"]))
        return cls(arrays[0], meta["eta"], meta["kind"], mask, meta["meta"])


# --------------------------------------------------------------------------
# Algorithm pieces


def adversarial_pair_set(f1, dataset: Dataset, eta: float, mask: Mask, steps: int,
                         step_size: float | None = None) -> tuple[Dataset, np.ndarray]:
    """Two-class set {(x_adv, 0)} + {(x, 1)} with x_adv = x + U * PGD(f1).

    Returns the dataset (adversarial copies first) and the adversarial deltas.
    """
    delta = pgd_attack(f1, dataset.images, dataset.labels, eta, steps, step_size,
                       mask=mask.values)
    x_adv = (dataset.images + delta).astype(DTYPE)
    n = len(dataset)
    t1 = Dataset(np.concatenate([x_adv, dataset.images]),
                 np.concatenate([np.zeros(n, np.int64), np.ones(n, np.int64)]),
                 f"{dataset.name}:T1", 2)
    return t1, delta


@dataclass(frozen=True)
class MinMinSchedule:
    rounds: int = 10
    model_epochs: int = 2
    eps_steps: int = 20
    step_size: float | None = None     # default eta / 8
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    stop_acc: float | None = 0.99
    final_epochs: int = 0
    clip: tuple | None = (0.0, 1.0)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["clip"] = None if self.clip is None else list(self.clip)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MinMinSchedule":
        d = dict(d)
        if d.get("clip") is not None:
            d["clip"] = tuple(d["clip"])
        return cls(**d)


def train_minmin_shortcut(f2, t1: Dataset, eta: float, region, schedule: MinMinSchedule,
                          seed: int):
    """Alternate model epochs and error-minimising steps on the class-0 noise.

    ``region`` is the 0/1 array where the noise may live (``1 - U`` in the
    composed trigger).  Returns ``(f2, eps)`` with ``eps`` aligned to ``t1``
    and zero on every class-1 sample.
    """
    if not np.isin(t1.labels, (0, 1)).all():
        raise ValueError("min-min needs binary labels in {0, 1}")
    idx0 = np.flatnonzero(t1.labels == 0)
    if idx0.size == 0:
        raise ValueError("min-min needs at least one class-0 sample")
    region = np.asarray(region, dtype=DTYPE)
    eps = np.zeros_like(t1.images)
    step = eta / 8 if schedule.step_size is None else schedule.step_size
    x0 = t1.images[idx0]
    y0 = np.zeros(idx0.size, np.int64)

    def _cfg(epochs, r):
        return TrainConfig(epochs=epochs, lr=schedule.lr, lr_milestones=(),
                           lr_factor=1.0, momentum=schedule.momentum,
                           weight_decay=schedule.weight_decay,
                           batch_size=schedule.batch_size, seed=seed * 1000 + r)

    for r in range(schedule.rounds):
        if schedule.model_epochs:
            train(f2, t1, _cfg(schedule.model_epochs, r), extra_perturb=eps)
        eps[idx0] = error_minimizing_noise(f2, x0, y0, eta, schedule.eps_steps, step,
                                           mask=region, init=eps[idx0], clip=schedule.clip)
        if schedule.stop_acc is not None:
            x = t1.images + eps
            if schedule.clip is not None:
                x = np.clip(x, *schedule.clip)
            acc = float((f2.predict_proba(x).argmax(1) == t1.labels).mean())
            if acc >= schedule.stop_acc:
                break
    if schedule.final_epochs:
        train(f2, t1, _cfg(schedule.final_epochs, schedule.rounds), extra_perturb=eps)
    return f2, eps


def compose_trigger(x, y, f1, f2, mask: Mask, eta: float, pgd_steps: int = 8,
                    pgd_step_size: float | None = None, scut_steps: int = 20,
                    scut_step_size: float | None = None) -> tuple[np.ndarray, dict]:
    """Per-sample trigger U * delta_adv + (1 - U) * delta_scut.

    Returns the trigger and its two parts (``{"adv": ..., "scut": ...}``).
    """
    x = np.asarray(x, dtype=DTYPE)
    u, region = mask.values, mask.complement
    if u.any():
        d_adv = pgd_attack(f1, x, y, eta, pgd_steps, pgd_step_size, mask=u)
    else:
        d_adv = np.zeros_like(x)
    x_a = x + d_adv
    if region.any():
        target = np.zeros(len(x), np.int64)
        d_scut = error_minimizing_noise(f2, x_a, target, eta, scut_steps, scut_step_size,
                                        mask=region)
    else:
        d_scut = np.zeros_like(x)
    p = (u * d_adv + region * d_scut).astype(DTYPE)
    return p, {"adv": d_adv, "scut": d_scut}


def ours_trigger(dataset: Dataset, f1, f2, mask: Mask, eta: float, **kw) -> TriggerSet:
    p, _ = compose_trigger(dataset.images, dataset.labels, f1, f2, mask, eta, **kw)
    return TriggerSet(p, float(eta), "ours", mask)


# --------------------------------------------------------------------------
# baselines


def universal_perturbation(f1, dataset: Dataset, eta: float, iterations: int = 10,
                           step_size: float | None = None, batch_size: int = 256) -> np.ndarray:
    """Simplified universal adversarial perturbation.

    One shared vector v is refined by signed steps along the gradient of the
    summed loss over each batch (averaged-sign accumulation), projected to
    the L-inf ball after every step.
    """
    step = eta / 4 if step_size is None else step_size
    bound = f32_floor(eta)
    v = np.zeros(dataset.shape, dtype=DTYPE)
    for _ in range(iterations):
        for i in range(0, len(dataset), batch_size):
            x = np.clip(dataset.images[i:i + batch_size] + v, 0, 1)
            _, g = input_gradient(f1, x, dataset.labels[i:i + batch_size])
            v = np.clip(v + DTYPE(step) * np.sign(g.sum(axis=0)), -bound, bound).astype(DTYPE)
    return v


def baseline_trigger(kind: str, params: dict, dataset: Dataset, seed: int,
                     f1=None, f2=None) -> TriggerSet:
    """Comparison triggers: random L-inf / L0 noise, universal, per-sample adversarial,
    and pure shortcut noise.

    params: ``eta`` (L-inf kinds) or ``pixels`` (rn_l0); ``steps``/``step_size``
    for adv, ua and scut.
    """
    n = len(dataset)
    shape = dataset.shape
    rng = make_rng(seed, "baseline", kind)
    if kind == "rn_linf":
        eta = float(params["eta"])
        if eta <= 0:
            raise ValueError("eta must be positive")
        v = np.where(rng.random(shape) < 0.5, -1.0, 1.0) * f32_floor(eta)
        p = np.broadcast_to(v.astype(DTYPE), (n,) + shape).copy()
        return TriggerSet(p, eta, kind, None, {"shared": True})
    if kind == "rn_l0":
        k = int(params["pixels"])
        c, h, w = shape
        if not 0 < k <= h * w:
            raise ValueError(f"pixel count {k} outside (0, {h * w}]")
        pos = np.sort(rng.choice(h * w, size=k, replace=False))
        sel = np.zeros(h * w, dtype=bool)
        sel[pos] = True
        sel = sel.reshape(h, w)
        p = np.where(sel, -dataset.images, 0).astype(DTYPE)
        return TriggerSet(p, k, kind, None, {"positions": pos.tolist(), "shared": True})
    eta = float(params["eta"])
    if eta <= 0:
        raise ValueError("eta must be positive")
    if kind == "ua":
        if f1 is None:
            raise ValueError("ua needs the classifier f1")
        v = universal_perturbation(f1, dataset, eta, params.get("iterations", 10),
                                   params.get("step_size"))
        return TriggerSet(np.broadcast_to(v, (n,) + shape).copy(), eta, kind, None,
                          {"shared": True, "variant": "averaged-sign accumulation"})
    if kind == "adv":
        if f1 is None:
            raise ValueError("adv needs the classifier f1")
        p = pgd_attack(f1, dataset.images, dataset.labels, eta, params.get("steps", 40),
                       params.get("step_size"))
        return TriggerSet(p, eta, kind, full_mask(shape))
    if kind == "scut":
        if f2 is None:
            raise ValueError("scut needs a shortcut network f2 trained with an empty mask")
        p = error_minimizing_noise(f2, dataset.images, np.zeros(n, np.int64), eta,
                                   params.get("steps", 20), params.get("step_size"))
        return TriggerSet(p, eta, kind, empty_mask(shape))
    raise ValueError(f"unknown baseline kind {kind!r}")


def budget_ok(triggers: TriggerSet) -> bool:
    try:
        triggers.check_budget()
    except BudgetError:
        return False
    return True


def mean_loss_increase(net, x, y, delta) -> np.ndarray:
    """Per-sample CE(x + delta) - CE(x) for ``net`` (used to audit adversarial noise)."""
    base = per_sample_ce(net.logits(x).data, y)
    pert = per_sample_ce(net.logits(np.clip(x + delta, 0, 1)).data, y)
    return pert - base
