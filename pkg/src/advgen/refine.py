"""Momentum-accumulated, L-infinity bounded sign-gradient refinement.

The engine perturbs an image (any real ndarray, typically H x W x C in
[0, 1]) by repeatedly accumulating the L1-normalized loss gradient into a
momentum buffer, stepping along its sign, projecting back into the
epsilon-ball around the start image, and clipping to the valid pixel
range. Every step of the loop is exposed as a small pure function so the
pieces can be tested in isolation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .models import ClassifierOutput

# Callback contract: (image, label) -> (loss, d loss / d image, classifier output).
# The loss is the quantity the attack ASCENDS (classification loss of the true
# label for untargeted attacks, its negation against the target for targeted
# ones). The classifier output may be None when only loss/gradient are known.
LossAndGrad = Callable[[np.ndarray, int], tuple[float, np.ndarray, Optional[ClassifierOutput]]]


@dataclass(frozen=True)
class AttackConfig:
    """Parameters of the refinement loop.

    alpha is derived as epsilon / t_attack so that t_attack full-size steps
    exactly exhaust the L-infinity budget.
    """

    epsilon: float
    mu: float = 1.0
    t_attack: int = 30
    delta_guard: float = 1e-12
    targeted: bool = False
    target_label: int | None = None

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.mu < 0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.t_attack < 1:
            raise ValueError(f"t_attack must be >= 1, got {self.t_attack}")
        if self.delta_guard <= 0:
            raise ValueError(f"delta_guard must be > 0, got {self.delta_guard}")
        if self.targeted and self.target_label is None:
            raise ValueError("targeted attack requires target_label")

    @property
    def alpha(self) -> float:
        return self.epsilon / self.t_attack


@dataclass(frozen=True)
class MomentumState:
    """Accumulated gradient buffer plus 0-based iteration counter."""

    m: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape) -> "MomentumState":
        return cls(m=np.zeros(shape, dtype=np.float64), t=0)


@dataclass
class RefineStep:
    """One refinement iteration.

    loss, predicted_label and confidence are evaluated at the iterate the
    gradient was taken at; m_l1 and linf_norm describe the state after the
    step was applied.
    """

    iteration: int
    loss: float
    m_l1: float
    linf_norm: float
    predicted_label: int | None = None
    confidence: float | None = None
    image: np.ndarray | None = field(default=None, repr=False)


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.isfinite(a).all():
        bad = np.flatnonzero(~np.isfinite(np.asarray(a).ravel()))[0]
        val = np.asarray(a).ravel()[bad]
        raise ValueError(f"{what} has non-finite value {val!r} at flat index {bad}")


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def normalize_gradient(g: np.ndarray, delta_guard: float = 1e-12) -> np.ndarray:
    """Divide by the global L1 norm plus a small guard.

    An all-zero gradient maps to all zeros; the result always has L1 norm
    at most 1.
    """
    g = np.asarray(g, dtype=np.float64)
    _check_finite(g, "gradient")
    if delta_guard < 0:
        raise ValueError(f"delta_guard must be >= 0, got {delta_guard}")
    denom = float(np.abs(g).sum()) + delta_guard
    if denom == 0.0:
        return np.zeros_like(g)
    return g / denom


def update_momentum(state: MomentumState, g_norm: np.ndarray, mu: float) -> MomentumState:
    """Return a new state with m <- mu * m + g_norm and t advanced by one."""
    g_norm = np.asarray(g_norm, dtype=np.float64)
    _check_same_shape(state.m, g_norm, "momentum update")
    return MomentumState(m=mu * state.m + g_norm, t=state.t + 1)


def apply_step(x: np.ndarray, m: np.ndarray, alpha: float) -> np.ndarray:
    """Step alpha in the sign direction of m; sign(0) is 0, so zero momentum
    leaves the image untouched. The result is not yet projected or clipped."""
    x = np.asarray(x, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    _check_same_shape(x, m, "sign step")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    return x + alpha * np.sign(m)


def project_linf(x: np.ndarray, x0: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp x elementwise into [x0 - epsilon, x0 + epsilon]."""
    x = np.asarray(x, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    _check_same_shape(x, x0, "L-inf projection")
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    return np.clip(x, x0 - epsilon, x0 + epsilon)


def clip_pixels(x: np.ndarray) -> np.ndarray:
    """Clamp into the valid pixel range [0, 1]."""
    return np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)


def momentum_refine(
    x0: np.ndarray,
    loss_and_grad: LossAndGrad,
    label: int,
    cfg: AttackConfig,
    keep_images: bool = False,
) -> tuple[np.ndarray, list[RefineStep]]:
    """Run the full refinement loop for cfg.t_attack iterations.

    Each iteration evaluates the loss callback at the current iterate,
    L1-normalizes the gradient, folds it into the momentum buffer with
    decay cfg.mu, steps cfg.alpha along the momentum sign, projects back
    into the epsilon-ball around x0 and clips to [0, 1].

    Args:
        x0: start image, all values in [0, 1]; never mutated.
        loss_and_grad: callback evaluating the ascended loss, its gradient
            with respect to the image, and optionally the classifier output.
        label: class index forwarded to the callback.
        cfg: attack parameters.
        keep_images: when True each trace row carries a copy of the iterate
            (memory grows with t_attack; default keeps scalars only).

    Returns:
        (refined image, per-iteration trace). The result is guaranteed to
        satisfy max|result - x0| <= epsilon and to lie in [0, 1].
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.size and (x0.min() < 0.0 or x0.max() > 1.0):
        raise ValueError("start image must lie in [0, 1]")

    x = x0.copy()
    state = MomentumState.zeros(x0.shape)
    trace: list[RefineStep] = []

    for k in range(cfg.t_attack):
        loss, grad, output = loss_and_grad(x, label)
        if not np.isfinite(loss):
            raise ValueError(f"loss callback returned non-finite loss {loss!r} at iteration {k}")
        grad = np.asarray(grad, dtype=np.float64)
        if not np.isfinite(grad).all():
            raise ValueError(f"loss callback returned non-finite gradient at iteration {k}")
        _check_same_shape(x, grad, "loss gradient")

        g_norm = normalize_gradient(grad, cfg.delta_guard)
        state = update_momentum(state, g_norm, cfg.mu)
        x = apply_step(x, state.m, cfg.alpha)
        x = project_linf(x, x0, cfg.epsilon)
        x = clip_pixels(x)

        trace.append(
            RefineStep(
                iteration=k,
                loss=float(loss),
                m_l1=float(np.abs(state.m).sum()),
                linf_norm=float(np.abs(x - x0).max()) if x0.size else 0.0,
                predicted_label=None if output is None else int(output.top1),
                confidence=None if output is None else float(output.confidence),
                image=x.copy() if keep_images else None,
            )
        )

    return x, trace
