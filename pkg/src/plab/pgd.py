"""Sign-gradient projected descent/ascent on input perturbations under an L-inf ball."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import DTYPE, Tensor, f32_floor


def input_gradient(net, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample cross-entropy values and d(sum CE)/dx at ``x``."""
    xt = Tensor(x, requires_grad=True)
    z = net.logits(xt)
    loss = T.cross_entropy(z, y, reduction="sum")
    (g,) = T.grad(loss, [xt])
    per = per_sample_ce(z.data, y)
    return per, g


def per_sample_ce(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(y)), np.asarray(y)]


def project(delta: np.ndarray, x: np.ndarray, eta, mask=None,
            clip: tuple | None = (0.0, 1.0)) -> np.ndarray:
    """Clip to the L-inf ball, keep x + delta inside ``clip``, zero masked-out entries."""
    eta = f32_floor(eta)
    delta = np.clip(delta, -eta, eta)
    if clip is not None:
        lo, hi = clip
        delta = np.clip(delta, DTYPE(lo) - x, DTYPE(hi) - x)
    if mask is not None:
        delta = delta * mask
    return delta.astype(DTYPE, copy=False)


def sign_gradient_steps(net, x, y, eta: float, steps: int, step_size: float,
                        mask=None, ascend: bool = True, init=None,
                        clip: tuple | None = (0.0, 1.0), batch_size: int = 256) -> np.ndarray:
    """Run ``steps`` signed-gradient updates on delta, projecting after each.

    ``ascend=True`` maximises the cross-entropy of ``net`` at labels ``y``
    (adversarial noise); ``ascend=False`` minimises it (error-minimising
    noise).  ``mask`` (broadcastable to x) selects the coordinates allowed to
    move.
    """
    if eta < 0:
        raise ValueError("budget must be non-negative")
    if steps < 0:
        raise ValueError("steps must be non-negative")
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=np.int64)
    if mask is not None:
        mask = np.asarray(mask, dtype=DTYPE)
    delta = np.zeros_like(x) if init is None else project(np.array(init, DTYPE), x, eta, mask, clip)
    if eta == 0:
        return np.zeros_like(x)
    direction = DTYPE(1.0 if ascend else -1.0) * DTYPE(step_size)
    for _ in range(steps):
        for i in range(0, len(x), batch_size):
            sl = slice(i, i + batch_size)
            _, g = input_gradient(net, x[sl] + delta[sl], y[sl])
            if not np.isfinite(g).all():
                raise T.NonFiniteError("non-finite input gradient during PGD")
            delta[sl] = project(delta[sl] + direction * np.sign(g), x[sl], eta,
                                mask, clip)
    return delta


def pgd_attack(net, x, y, eta: float, steps: int, step_size: float | None = None,
               mask=None, clip: tuple | None = (0.0, 1.0)) -> np.ndarray:
    """Untargeted L-inf PGD: returns delta with |delta| <= eta, zero where mask is 0.

    The default step size is eta / 8 per step, matching the reference
    schedule of 1/255 per step for an 8/255 budget.
    """
    if eta <= 0:
        raise ValueError("PGD budget must be positive")
    if steps < 1:
        raise ValueError("PGD needs at least one step")
    if step_size is None:
        step_size = eta / 8
    return sign_gradient_steps(net, x, y, eta, steps, step_size, mask, True, clip=clip)


def error_minimizing_noise(net, x, y, eta: float, steps: int, step_size: float | None = None,
                           mask=None, init=None, clip: tuple | None = (0.0, 1.0)) -> np.ndarray:
    """Sign-gradient descent of the loss toward labels ``y`` within the budget."""
    if step_size is None:
        step_size = eta / 8
    return sign_gradient_steps(net, x, y, eta, steps, step_size, mask, False, init, clip)
