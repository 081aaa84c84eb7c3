"""Class-token embedding optimization against a differentiable backend.

Phase one of the attack: the embedding of the class token is updated with
Adam to minimize an adversarial classification loss plus a cosine term
that keeps the perturbed embedding close to the original. Only the class
token moves; every other token embedding stays bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import ClassifierOutput, ModelStack, TokenEmbeddingSet

REGULARIZERS = ("one_minus_cos", "raw_cos")


@dataclass(frozen=True)
class EmbedOptConfig:
    """Embedding-phase settings. t_embed = 0 disables the phase entirely."""

    t_embed: int = 25
    eta: float = 0.001
    lam: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_guard: float = 1e-8
    regularizer: str = "one_minus_cos"

    def __post_init__(self):
        if self.t_embed < 0:
            raise ValueError(f"t_embed must be >= 0, got {self.t_embed}")
        if self.eta <= 0:
            raise ValueError(f"eta must be > 0, got {self.eta}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {b}")
        if self.adam_guard <= 0:
            raise ValueError(f"adam_guard must be > 0, got {self.adam_guard}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")


@dataclass
class EmbedStep:
    """One optimization step, evaluated before the update is applied."""

    step: int
    objective: float
    cosine_sim: float
    predicted_label: int
    confidence: float
    image: np.ndarray | None = field(default=None, repr=False)


def cross_entropy_with_grad(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Cross-entropy of softmax(logits) against label and its logit gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise IndexError(f"label {label} out of range for {logits.shape[0]} classes")
    shifted = logits - logits.max()
    log_z = np.log(np.exp(shifted).sum())
    loss = float(log_z - shifted[label])
    grad = np.exp(shifted - log_z)
    grad[label] -= 1.0
    return loss, grad


def adversarial_loss(logits: np.ndarray, label: int, target: int | None = None) -> float:
    """Loss minimized by the attack: -CE(label) untargeted, +CE(target) targeted."""
    return adversarial_loss_with_grad(logits, label, target)[0]


def adversarial_loss_with_grad(
    logits: np.ndarray, label: int, target: int | None = None
) -> tuple[float, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.isfinite(logits).all():
        raise ValueError("logits contain non-finite values")
    if target is None:
        ce, grad = cross_entropy_with_grad(logits, label)
        return -ce, -grad
    ce, grad = cross_entropy_with_grad(logits, target)
    return ce, grad


def cosine_regularizer(perturbed: np.ndarray, original: np.ndarray) -> float:
    """1 - cos(perturbed, original): zero at the original embedding, 2 when antipodal."""
    return _cosine_terms(perturbed, original)[0]


def cosine_regularizer_with_grad(perturbed: np.ndarray, original: np.ndarray) -> tuple[float, np.ndarray]:
    value, cos, perturbed, unit_original, norm_perturbed = _cosine_terms(perturbed, original)
    grad = -(unit_original - cos * perturbed / norm_perturbed) / norm_perturbed
    return value, grad


def _cosine_terms(perturbed, original):
    perturbed = np.asarray(perturbed, dtype=np.float64)
    original = np.asarray(original, dtype=np.float64)
    if perturbed.shape != original.shape:
        raise ValueError(f"embedding shape mismatch {perturbed.shape} vs {original.shape}")
    norm_perturbed = float(np.linalg.norm(perturbed))
    norm_original = float(np.linalg.norm(original))
    if norm_perturbed == 0.0 or norm_original == 0.0:
        raise ValueError("cosine regularizer undefined for zero-norm embedding")
    cos = float(perturbed @ original) / (norm_perturbed * norm_original)
    return 1.0 - cos, cos, perturbed, original / norm_original, norm_perturbed


def total_objective(
    logits: np.ndarray,
    label: int,
    perturbed: np.ndarray,
    original: np.ndarray,
    lam: float,
    target: int | None = None,
    regularizer: str = "one_minus_cos",
) -> float:
    """adversarial_loss + lam * regularizer(perturbed, original).

    regularizer "one_minus_cos" penalizes deviation from the original
    embedding; "raw_cos" adds the raw cosine similarity instead (a fidelity
    mode that rewards deviation and only exists for comparison runs).
    """
    adv = adversarial_loss(logits, label, target)
    reg = cosine_regularizer(perturbed, original)
    if regularizer == "raw_cos":
        reg = 1.0 - reg  # cos itself
    elif regularizer != "one_minus_cos":
        raise ValueError(f"unknown regularizer {regularizer!r}")
    return adv + lam * reg


def objective_value_and_grad(
    tokens: TokenEmbeddingSet,
    stack: ModelStack,
    z: np.ndarray,
    label: int,
    lam: float,
    target: int | None = None,
    regularizer: str = "one_minus_cos",
) -> tuple[float, np.ndarray, ClassifierOutput, np.ndarray]:
    """Evaluate the full objective and its gradient w.r.t. the class token.

    Returns (objective, gradient, classifier output, generated image). The
    gradient chains the classifier, generator and encoder VJPs with the
    analytic regularizer gradient.
    """
    text_embedding = stack.encode(tokens)
    image = stack.generate(z, text_embedding)
    out = stack.classify(image)
    adv, grad_logits = adversarial_loss_with_grad(out.logits, label, target)
    reg, grad_reg = cosine_regularizer_with_grad(
        tokens.class_embedding, tokens.original_class_embedding
    )
    if regularizer == "raw_cos":
        reg, grad_reg = 1.0 - reg, -grad_reg
    grad_image = stack.classify_vjp(image, grad_logits)
    grad_text_embedding = stack.generate_vjp(z, text_embedding, grad_image)
    grad = stack.encode_vjp(tokens, grad_text_embedding) + lam * grad_reg
    return adv + lam * reg, grad, out, image


def optimize_embeddings(
    tokens: TokenEmbeddingSet,
    stack: ModelStack,
    z: np.ndarray,
    label: int,
    cfg: EmbedOptConfig,
    target: int | None = None,
    keep_images: bool = False,
) -> tuple[TokenEmbeddingSet, list[EmbedStep]]:
    """Run cfg.t_embed Adam steps on the class-token embedding.

    The trace records, per step, the objective/prediction at the point the
    gradient was evaluated and the cosine similarity of that iterate to the
    original embedding. cfg.t_embed = 0 returns the input set unchanged.
    """
    if not stack.differentiable:
        raise TypeError(f"backend {stack.name!r} does not declare differentiability")
    if cfg.t_embed == 0:
        return tokens, []

    current = tokens
    dim = tokens.embeddings.shape[1]
    m = np.zeros(dim)
    v = np.zeros(dim)
    trace: list[EmbedStep] = []

    for t in range(1, cfg.t_embed + 1):
        obj, grad, out, image = objective_value_and_grad(
            current, stack, z, label, cfg.lam, target, cfg.regularizer
        )
        if not np.isfinite(obj) or not np.isfinite(grad).all():
            raise ValueError(f"non-finite objective or gradient at embedding step {t}")
        cos = 1.0 - cosine_regularizer(current.class_embedding, tokens.original_class_embedding)
        trace.append(
            EmbedStep(
                step=t,
                objective=float(obj),
                cosine_sim=float(cos),
                predicted_label=out.top1,
                confidence=out.confidence,
                image=image.copy() if keep_images else None,
            )
        )
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        m_hat = m / (1.0 - cfg.beta1**t)
        v_hat = v / (1.0 - cfg.beta2**t)
        step = cfg.eta * m_hat / (np.sqrt(v_hat) + cfg.adam_guard)
        current = current.with_class_embedding(current.class_embedding - step)

    return current, trace
