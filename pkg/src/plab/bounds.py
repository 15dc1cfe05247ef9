"""Generalisation-bound evaluators and their oracles.

Every evaluator returns a :class:`BoundReport` with named terms whose sum is
the total.  Hidden O(.) constants are surfaced as ``c_scale`` and flagged.
"""
from __future__ import annotations

import itertools
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import binom

from .tensor import make_rng

SHAPE_FLAG = "bound-shape, not certified constant"
EXACT_MAX_SAMPLES = 20


@dataclass(frozen=True)
class BoundInputs:
    N: int = 1
    alpha: float = 0.0
    eta_frac: float = 0.1       # prior of the target class
    delta: float = 0.05
    lam: float = 1.0
    epsilon: float = 0.0
    tau: float = 0.0
    emp_error: float = 0.0
    emp_risk: float = 0.0
    rad_neq: float = 0.0
    rad_eq: float = 0.0
    W: float = 1.0
    D: float = 1.0
    m: float = 2.0
    n: float = 1.0
    A: float = 1.0
    c_scale: float = 1.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha={self.alpha} must lie in [0, 1)")
        if self.rad_neq < 0 or self.rad_eq < 0:
            raise ValueError("Rademacher terms must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BoundReport:
    name: str
    terms: dict
    extras: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def total(self) -> float:
        return math.fsum(self.terms.values())

    def to_dict(self) -> dict:
        return {"name": self.name, "terms": dict(self.terms), "total": self.total,
                "extras": dict(self.extras), "flags": list(self.flags)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# Rademacher complexity


@dataclass(frozen=True)
class RademacherEstimate:
    value: float
    stderr: float
    exact: bool
    num_sigma: int
    lower_estimate: bool = True   # sup over a finite candidate list

    def to_dict(self) -> dict:
        return asdict(self)


def _hypothesis_matrix(hypotheses, samples) -> np.ndarray:
    if hypotheses is None or len(hypotheses) == 0:
        raise ValueError("empty hypothesis class")
    if callable(hypotheses[0]):
        vals = np.array([np.asarray(h(samples), dtype=np.float64).reshape(-1)
                         for h in hypotheses])
    else:
        vals = np.asarray(hypotheses, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[None, :]
    if vals.shape[1] == 0:
        raise ValueError("need at least one sample")
    if vals.min() < 0 or vals.max() > 1:
        raise ValueError("hypothesis values must lie in [0, 1]")
    return vals


def _all_signs(k: int) -> np.ndarray:
    return np.array(list(itertools.product((-1.0, 1.0), repeat=k)))


def empirical_rademacher(hypotheses, samples=None, num_sigma: int = 2000, seed: int = 0,
                         method: str = "auto") -> RademacherEstimate:
    """E_sigma sup_h (1/k) sum_i sigma_i h(x_i) over a finite class.

    ``hypotheses`` is either a list of callables evaluated on ``samples`` or
    an (H, k) array of precomputed values.  ``method="auto"`` enumerates all
    2^k sign vectors when k <= 20 and samples otherwise; sign vectors are
    drawn in fixed-size blocks with per-block derived seeds.
    """
    vals = _hypothesis_matrix(hypotheses, samples)
    k = vals.shape[1]
    if method not in ("auto", "exact", "mc"):
        raise ValueError(f"unknown method {method!r}")
    exact = method == "exact" or (method == "auto" and k <= EXACT_MAX_SAMPLES)
    if exact:
        if k > EXACT_MAX_SAMPLES:
            raise ValueError(f"exact enumeration limited to k <= {EXACT_MAX_SAMPLES}")
        total = 0.0
        count = 2 ** k
        chunk_bits = min(k, 14)
        tail = _all_signs(chunk_bits)
        for head in itertools.product((-1.0, 1.0), repeat=k - chunk_bits):
            s = np.hstack([np.broadcast_to(np.array(head), (len(tail), k - chunk_bits)), tail])
            total += math.fsum((s @ vals.T).max(axis=1))
        return RademacherEstimate(total / (count * k), 0.0, True, count)
    if num_sigma < 2:
        raise ValueError("num_sigma must be >= 2")
    block = 1024
    sups = []
    for b, start in enumerate(range(0, num_sigma, block)):
        size = min(block, num_sigma - start)
        s = make_rng(seed, "rademacher", b).choice((-1.0, 1.0), size=(size, k))
        sups.append((s @ vals.T).max(axis=1) / k)
    sups = np.concatenate(sups)
    return RademacherEstimate(float(sups.mean()), float(sups.std(ddof=1) / math.sqrt(num_sigma)),
                              False, num_sigma)


# --------------------------------------------------------------------------
# explicit bounds


def _check_delta(delta: float) -> None:
    if delta >= 2 or delta <= 0:
        raise ValueError(f"delta={delta} must lie in (0, 2)")


def clean_coefficient(alpha: float) -> float:
    if not 0.0 <= alpha < 1.0:
        raise ValueError(f"alpha={alpha} must lie in [0, 1)")
    return (4 - 2 * alpha) / (1 - alpha)


def clean_bound_rhs(inp: BoundInputs) -> BoundReport:
    """Population-error bound on clean data trained on a poisoned set."""
    _check_delta(inp.delta)
    a = inp.alpha
    coef = clean_coefficient(a)
    terms = {
        "empirical": coef * inp.emp_error,
        "rad_non_target": 4 * inp.rad_neq,
        "rad_target": 4 / (1 - a) * inp.rad_eq,
        "confidence": 2 * math.sqrt(math.log(2 / inp.delta) / (inp.N * (1 - a))),
    }
    extras = {"coefficient": coef}
    e = inp.eta_frac
    if 0 < e < 1:
        n = inp.N
        extras["probability"] = (1 - inp.delta - 4 * e / (4 * e + (1 - e) * n)
                                 - 4 * (1 - e) / (e * n + 4 * (1 - e)))
    return BoundReport("clean", terms, extras)


POISON_FORMS = ("plain", "doubled")


def poison_bound_rhs(inp: BoundInputs, rad: float, form: str = "doubled") -> BoundReport:
    """Bound on the triggered-input error of the poisoned model.

    ``plain`` uses the 0-1 empirical error and a 2 Rad term; ``doubled``
    scales everything by two and uses the cross-entropy empirical risk with
    a 4 Rad / (alpha eta) term.
    """
    if form not in POISON_FORMS:
        raise ValueError(f"form must be one of {POISON_FORMS}")
    _check_delta(inp.delta)
    ae = inp.alpha * inp.eta_frac
    if ae <= 0:
        raise ValueError("alpha * eta_frac must be positive")
    if rad < 0:
        raise ValueError("rad must be non-negative")
    lam, eta = inp.lam, inp.eta_frac
    conf = math.sqrt(math.log(2 / inp.delta) / (inp.N * ae))
    if form == "plain":
        s = 1.0
        inner = {"empirical": 2 * inp.emp_error / ae, "rad": 2 * rad}
    else:
        s = 2.0
        inner = {"empirical": 2 * inp.emp_risk / ae, "rad": 4 * rad / ae}
    inner.update(confidence=conf, tau_over_eta=inp.tau / eta, epsilon=inp.epsilon)
    terms = {k: s * lam * v for k, v in inner.items()}
    terms["tau"] = s * inp.tau
    terms["lambda_gap"] = s * (lam - 1) * eta
    extras = {"probability": 1 - inp.delta - (4 - 4 * eta) / (4 - 4 * eta + eta * inp.N),
              "form": form}
    return BoundReport(f"poison_{form}", terms, extras)


def vc_rad_bound(W: float, D: float, m: float, N: float, c_scale: float = 1.0) -> float:
    """c * sqrt(m W^2 D^2 / N)."""
    if min(W, D, m, N) < 1:
        raise ValueError("W, D, m, N must be >= 1")
    return c_scale * math.sqrt(m * W * W * D * D / N)


def covering_rad_bound(W: float, D: float, A: float, m: float, n: float, N: float,
                       c_scale: float = 1.0) -> float:
    """c * W * D * ln(A D m n) / sqrt(N); requires A D m n >= e."""
    prod = A * D * m * n
    if prod < math.e:
        raise ValueError(f"A*D*m*n = {prod} must be >= e")
    if N < 1:
        raise ValueError("N must be >= 1")
    return c_scale * W * D * math.log(prod) / math.sqrt(N)


def capacity_report(inp: BoundInputs) -> BoundReport:
    terms = {"vc": vc_rad_bound(inp.W, inp.D, inp.m, inp.N, inp.c_scale)}
    extras = {}
    try:
        extras["covering"] = covering_rad_bound(inp.W, inp.D, inp.A, inp.m, inp.n, inp.N,
                                                inp.c_scale)
    except ValueError as exc:
        extras["covering_error"] = str(exc)
    return BoundReport("capacity", terms, extras, [SHAPE_FLAG])


# --------------------------------------------------------------------------
# balanced-gap oracle


EXACT_GAP_MAX_N = 4000


def gap_probability_exact(N: int, c: float, k: float) -> float:
    """P(|1/2 - N1/N| < c / N^k) for N1 ~ Binomial(N, 1/2).

    Sums the probability of the integers inside the open interval
    (N/2 - c N^(1-k), N/2 + c N^(1-k)); integer arithmetic for moderate N.
    """
    if N < 1 or c <= 0 or k <= 0:
        raise ValueError("need N >= 1, c > 0, k > 0")
    if k <= 0.5:
        warnings.warn("k <= 0.5 lies outside the range where the gap shrinks", stacklevel=2)
    r = c * N ** (1 - k)
    lo = max(math.floor(N / 2 - r) + 1, 0)
    hi = min(math.ceil(N / 2 + r) - 1, N)
    if hi < lo:
        return 0.0
    if N <= EXACT_GAP_MAX_N:
        return float(Fraction(sum(math.comb(N, i) for i in range(lo, hi + 1)), 2 ** N))
    return float(binom.cdf(hi, N, 0.5) - binom.cdf(lo - 1, N, 0.5))
