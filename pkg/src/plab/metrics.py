"""Attack-goal metrics and condition proxies for a trained backdoor.

Rates (clean accuracy, target-class accuracy, ASR), the adversarial
condition epsilon, the trigger-similarity proxy k, the bare-trigger
response gap tau, the validation losses V_adv / V_sc, and the linear
shortcut checkers used for the simple-feature argument.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.optimize import linprog
from scipy.spatial.distance import pdist

from .data import Dataset, apply_trigger
from .models import build_f2_binary, classify
from .pgd import per_sample_ce
from .tensor import DTYPE
from .training import TrainConfig, train


class PreconditionError(ValueError):
    pass


def _perturbations(triggers) -> np.ndarray:
    return np.asarray(getattr(triggers, "perturbations", triggers), dtype=DTYPE)


def _aligned(triggers, n: int) -> np.ndarray:
    p = _perturbations(triggers)
    if p.shape[0] == 1 and n != 1:
        p = np.broadcast_to(p, (n,) + p.shape[1:])
    if p.shape[0] != n:
        raise ValueError(f"{p.shape[0]} triggers for {n} samples")
    return p


def _logits(net, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    return np.concatenate([net.logits(x[i:i + batch_size]).data
                           for i in range(0, len(x), batch_size)])


# --------------------------------------------------------------------------
# attack goals


def eval_accuracy(net, dataset: Dataset, label: int | None = None) -> float:
    """Fraction classified correctly, optionally restricted to one class."""
    if label is not None:
        dataset = dataset.with_label(label)
    if len(dataset) == 0:
        raise ValueError("accuracy of an empty dataset is undefined")
    return float((classify(net, dataset.images) == dataset.labels).mean())


def eval_asr(net, dataset: Dataset, triggers, target: int) -> float:
    """Fraction of non-target samples sent to ``target`` once triggered."""
    p = _aligned(triggers, len(dataset))
    keep = np.flatnonzero(dataset.labels != target)
    if keep.size == 0:
        raise ValueError(f"every sample already has label {target}")
    x = apply_trigger(dataset.images[keep], p[keep])
    return float((classify(net, x) == target).mean())


# --------------------------------------------------------------------------
# condition proxies


def measure_c1_epsilon(g_clean, dataset: Dataset, triggers, target: int) -> float:
    """Mean clean-model probability of the true label at triggered target-class inputs."""
    p = _aligned(triggers, len(dataset))
    idx = np.flatnonzero(dataset.labels == target)
    if idx.size == 0:
        raise ValueError(f"no samples with label {target}")
    probs = g_clean.predict_proba(apply_trigger(dataset.images[idx], p[idx]))
    return float(probs[:, target].astype(np.float64).mean())


def measure_similarity_k(triggers, mask=None) -> dict:
    """Largest pairwise L2 distance between triggers, overall and on the 1 - U region."""
    p = _perturbations(triggers)
    if len(p) < 2:
        raise ValueError("need at least two triggers to measure similarity")
    flat = p.reshape(len(p), -1).astype(np.float64)
    out = {"k": float(pdist(flat).max())}
    if mask is not None:
        region = (1.0 - np.asarray(getattr(mask, "values", mask), np.float64)).reshape(-1)
        out["k_region"] = float(pdist(flat * region).max())
    return out


def _diff_at(f, g, x: np.ndarray, target: int) -> np.ndarray:
    return (f.predict_proba(x)[:, target].astype(np.float64)
            - g.predict_proba(x)[:, target].astype(np.float64))


def measure_c3_tau(f_poison, g_clean, dataset: Dataset, triggers, target: int,
                   offset: float = 0.0) -> float:
    """Mean |(F - G)_t(P(x)) - (F - G)_t(x + P(x))|.

    The bare trigger is fed as the image clamp(offset + P(x)); ``offset=0.5``
    gives the mid-grey variant.
    """
    if f_poison.spec.classes != g_clean.spec.classes:
        raise ValueError("networks must share their output dimension")
    p = _aligned(triggers, len(dataset))
    bare = apply_trigger(np.full_like(p, offset), p)
    full = apply_trigger(dataset.images, p)
    gap = _diff_at(f_poison, g_clean, bare, target) - _diff_at(f_poison, g_clean, full, target)
    return float(np.abs(gap).mean())


def v_adv(f_clean, dataset: Dataset, triggers) -> float:
    """Mean cross-entropy of a clean model on triggered inputs with their true labels."""
    p = _aligned(triggers, len(dataset))
    z = _logits(f_clean, apply_trigger(dataset.images, p))
    return float(per_sample_ce(z.astype(np.float64), dataset.labels).mean())


V_SC_TRAIN = TrainConfig(epochs=40, lr=0.01, lr_milestones=(), lr_factor=1.0)


def v_sc(dataset: Dataset, triggers, config: TrainConfig = V_SC_TRAIN, seed: int = 0,
         channels: int = 64) -> float:
    """Minimised binary loss E[L(F(x + P(x)), 0) + L(F(x), 1)] over a fresh two-layer net."""
    p = _aligned(triggers, len(dataset))
    n = len(dataset)
    pair = Dataset(np.concatenate([apply_trigger(dataset.images, p), dataset.images]),
                   np.concatenate([np.zeros(n, np.int64), np.ones(n, np.int64)]),
                   "v_sc", 2)
    net = build_f2_binary(dataset.shape, seed, channels)
    train(net, pair, TrainConfig(**{**config.to_dict(), "seed": seed}))
    ce = per_sample_ce(_logits(net, pair.images).astype(np.float64), pair.labels)
    return float(ce[:n].mean() + ce[n:].mean())


# --------------------------------------------------------------------------
# linear shortcut checks


@dataclass(frozen=True)
class AffineWitness:
    """h(x) = w . x + b with ||w||_2 = 1."""
    w: np.ndarray
    b: float

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
        return x @ self.w + self.b

    def linear(self, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64).reshape(len(x), -1) @ self.w


@dataclass(frozen=True)
class ShortcutResult:
    separable: bool
    witness: AffineWitness | None
    gap: float                  # best unit-normal gap found; negative when overlapping
    linearly_separable: bool


def _binary_points(dataset: Dataset, triggers):
    if not np.isin(dataset.labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    n0 = int((dataset.labels == 0).sum())
    if n0 == 0 or n0 == len(dataset):
        raise ValueError("need samples from both classes")
    x = dataset.images.reshape(len(dataset), -1).astype(np.float64)
    if triggers is not None:
        p = _aligned(triggers, len(dataset)).reshape(len(dataset), -1).astype(np.float64)
        x = x.copy()
        x[dataset.labels == 0] += p[dataset.labels == 0]
    return x[dataset.labels == 0], x[dataset.labels == 1]


def _strictly_separable(a: np.ndarray, c: np.ndarray) -> bool:
    """LP feasibility of w.a + b >= 1 on ``a`` and w.c + b <= -1 on ``c``."""
    d = a.shape[1]
    a_ub = np.vstack([np.hstack([-a, -np.ones((len(a), 1))]),
                      np.hstack([c, np.ones((len(c), 1))])])
    b_ub = -np.ones(len(a) + len(c))
    res = linprog(np.zeros(d + 1), A_ub=a_ub, b_ub=b_ub, bounds=[(None, None)] * (d + 1),
                  method="highs")
    return res.status == 0


def _max_margin_direction(a: np.ndarray, c: np.ndarray) -> np.ndarray:
    import cvxpy as cp

    w = cp.Variable(a.shape[1])
    b = cp.Variable()
    prob = cp.Problem(cp.Minimize(cp.sum_squares(w)), [a @ w + b >= 1, c @ w + b <= -1])
    prob.solve(solver=cp.CLARABEL)
    if w.value is None:
        raise RuntimeError(f"max-margin solve failed: {prob.status}")
    return np.asarray(w.value, dtype=np.float64)


def check_binary_shortcut(dataset: Dataset, triggers, eta1: float) -> ShortcutResult:
    """Is there a unit-normal affine h with h >= 1 - eta1 on triggered class 0
    and h <= eta1 on class 1?

    Separability is an exact LP; the unit-normal gap comes from the
    hard-margin quadratic program.  The witness puts class 1 exactly at
    the eta1 level.  ``triggers=None`` checks the untriggered set.
    """
    if not 0 < eta1 < 0.5:
        raise ValueError("eta1 must lie in (0, 0.5)")
    a, c = _binary_points(dataset, triggers)
    if not _strictly_separable(a, c):
        return ShortcutResult(False, None, -math.inf, False)
    w = _max_margin_direction(a, c)
    w = w / np.linalg.norm(w)
    gap = float((a @ w).min() - (c @ w).max())
    if gap < 1 - 2 * eta1:
        return ShortcutResult(False, None, gap, True)
    witness = AffineWitness(w, float(eta1 - (c @ w).max()))
    return ShortcutResult(True, witness, gap, True)


def verify_simple_feature_bound(h: AffineWitness, dataset: Dataset, triggers, eta1: float,
                                tol: float = 1e-9) -> dict:
    """Check the simple-feature inequalities for a linear witness.

    For every class-0 x0 and every sample x1:
      h(x1 + P(x0)) - h(x1) >= 1 - 2 eta1 - k   (shift)
      w . P(x0)              >= 1 - 2 eta1 - k   (bare trigger, linear part)
    with k the largest pairwise trigger distance over class 0.
    """
    a, c = _binary_points(dataset, triggers)
    if (h(a) < 1 - eta1 - tol).any() or (h(c) > eta1 + tol).any():
        raise PreconditionError("h does not meet the shortcut margins on the triggered set")
    p = _aligned(triggers, len(dataset))
    p0 = p[dataset.labels == 0].reshape(-1, a.shape[1]).astype(np.float64)
    k = float(pdist(p0).max()) if len(p0) > 1 else 0.0
    rhs = 1 - 2 * eta1 - k
    x_all = dataset.images.reshape(len(dataset), -1).astype(np.float64)
    h_all = h(x_all)
    shift = math.inf
    for row in p0:
        shift = min(shift, float((h(x_all + row) - h_all).min()))
    bare = float(h.linear(p0).min())
    return {"k": k, "rhs": rhs, "slack_shift": shift - rhs, "slack_bare": bare - rhs,
            "bare_affine_min": float(h(p0).min()),
            "holds": shift - rhs >= -tol and bare - rhs >= -tol,
            "base_inseparable": not _strictly_separable(*_binary_points(dataset, None))}


# --------------------------------------------------------------------------
# report


@dataclass
class ConditionReport:
    epsilon_c1: float
    similarity_k: float
    tau_c3: float
    v_adv: float
    v_sc: float
    clean_acc: float
    target_acc: float
    asr: float
    similarity_k_region: float | None = None
    tau_c3_grey: float | None = None

    def __post_init__(self):
        for name in ("clean_acc", "target_acc", "asr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.similarity_k < 0 or self.v_sc < 0:
            raise ValueError("similarity_k and v_sc must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        cols = [f.name for f in fields(self)]
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(cols)
        wr.writerow(["" if getattr(self, c) is None else repr(getattr(self, c)) for c in cols])
        return buf.getvalue()
