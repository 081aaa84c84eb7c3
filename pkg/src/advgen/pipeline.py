"""Two-phase attack orchestration and result assembly.

A run starts from a benign generation (unperturbed tokens), drops the
instance if the classifier already gets it wrong (pre-filter), optimizes
the class-token embedding, and refines the regenerated image with the
momentum engine. The literal nested variant, which interleaves one
refinement loop into every embedding step, is available behind
phase_mode="nested".
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .embedding import (
    EmbedOptConfig,
    EmbedStep,
    adversarial_loss_with_grad,
    optimize_embeddings,
)
from .models import DEFAULT_PROMPT_TEMPLATE, ClassifierOutput, ModelStack
from .refine import AttackConfig, RefineStep, momentum_refine

PHASE_MODES = ("two_phase", "nested")


@dataclass
class PrefilteredInstance:
    """Instance dropped before any attack: the benign generation was already
    misclassified, so adversarial effects could not be attributed."""

    class_name: str
    true_label: int
    benign_pred: ClassifierOutput
    benign_image: np.ndarray = field(repr=False)
    seeds: tuple[int | None, int | None] = (None, None)


@dataclass
class AdversarialResult:
    class_name: str
    true_label: int
    target_label: int | None
    benign_image: np.ndarray = field(repr=False)
    benign_pred: ClassifierOutput
    anchor_image: np.ndarray = field(repr=False)  # refinement start
    adversarial_image: np.ndarray = field(repr=False)
    adv_pred: ClassifierOutput
    linf_norm: float  # vs the refinement anchor
    mse: float  # vs the benign image
    success: bool
    seeds: tuple[int | None, int | None] = (None, None)
    embed_trace: list[EmbedStep] = field(default_factory=list, repr=False)
    refine_trace: list[RefineStep] = field(default_factory=list, repr=False)


def make_refinement_callback(stack: ModelStack, target: int | None = None):
    """Loss callback for the refinement engine.

    Returns the classification loss the attack ascends: cross-entropy of the
    true label for untargeted attacks, negated cross-entropy of the target
    for targeted ones (so ascent pushes toward the target).
    """
    stages = getattr(stack, "differentiable_stages", None)
    if stages is not None and "classifier" not in stages:
        raise TypeError(
            f"backend {stack.name!r} does not declare a differentiable classifier"
        )

    def loss_and_grad(image: np.ndarray, label: int):
        out = stack.classify(image)
        adv, grad_logits = adversarial_loss_with_grad(out.logits, label, target)
        grad_image = stack.classify_vjp(image, -grad_logits)
        return -adv, grad_image, out

    return loss_and_grad


def _success(pred: ClassifierOutput, true_label: int, target: int | None) -> bool:
    if target is None:
        return pred.top1 != true_label
    return pred.top1 == target


def run_attack_pipeline(
    stack: ModelStack,
    class_name: str,
    true_label: int,
    z: np.ndarray,
    embed_cfg: EmbedOptConfig,
    attack_cfg: AttackConfig,
    template: str = DEFAULT_PROMPT_TEMPLATE,
    phase_mode: str = "two_phase",
    latent_seed: int | None = None,
    keep_trace_images: bool = False,
) -> AdversarialResult | PrefilteredInstance:
    """Run the full attack for one (class, latent) instance.

    two_phase runs the embedding optimization to completion, regenerates,
    then refines once. nested anchors the refinement at the image of the
    last embedding step instead (the image generated before that step's
    token update), which is exactly what interleaving a refinement loop
    into every embedding step returns: only the last inner loop survives,
    the earlier ones are overwritten without feeding back.

    Returns a PrefilteredInstance when the benign generation is not
    classified as true_label; otherwise an AdversarialResult whose
    invariants have been revalidated from the raw images.
    """
    if phase_mode not in PHASE_MODES:
        raise ValueError(f"phase_mode must be one of {PHASE_MODES}, got {phase_mode!r}")
    target = attack_cfg.target_label if attack_cfg.targeted else None
    if target is not None and not 0 <= target < stack.n_classes:
        raise ValueError(f"target label {target} out of range for {stack.n_classes} classes")

    _, tokens = stack.encode_text(class_name, template)
    benign = stack.generate(z, stack.encode(tokens))
    benign_pred = stack.classify(benign)
    seeds = (latent_seed, stack.seed)

    if benign_pred.top1 != true_label:
        return PrefilteredInstance(
            class_name=class_name,
            true_label=true_label,
            benign_pred=benign_pred,
            benign_image=benign,
            seeds=seeds,
        )

    keep_embed_images = keep_trace_images or phase_mode == "nested"
    final_tokens, embed_trace = optimize_embeddings(
        tokens, stack, z, true_label, embed_cfg, target, keep_images=keep_embed_images
    )
    if phase_mode == "two_phase" or not embed_trace:
        anchor = stack.generate(z, stack.encode(final_tokens))
    else:
        anchor = embed_trace[-1].image
        if not keep_trace_images:
            for row in embed_trace:
                row.image = None

    adversarial, refine_trace = momentum_refine(
        anchor,
        make_refinement_callback(stack, target),
        true_label,
        attack_cfg,
        keep_images=keep_trace_images,
    )

    adv_pred = stack.classify(adversarial)
    result = AdversarialResult(
        class_name=class_name,
        true_label=true_label,
        target_label=target,
        benign_image=benign,
        benign_pred=benign_pred,
        anchor_image=anchor,
        adversarial_image=adversarial,
        adv_pred=adv_pred,
        linf_norm=float(np.abs(adversarial - anchor).max()),
        mse=mean_squared_error(adversarial, benign),
        success=_success(adv_pred, true_label, target),
        seeds=seeds,
        embed_trace=embed_trace,
        refine_trace=refine_trace,
    )
    problems = check_result(result, attack_cfg, stack)
    if problems:
        raise RuntimeError("attack produced an invalid result: " + "; ".join(problems))
    return result


def mean_squared_error(a: np.ndarray, b: np.ndarray) -> float:
    if np.asarray(a).shape != np.asarray(b).shape:
        raise ValueError(f"image shape mismatch {np.asarray(a).shape} vs {np.asarray(b).shape}")
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.mean(diff * diff))


def check_result(
    result: AdversarialResult, attack_cfg: AttackConfig, stack: ModelStack | None = None
) -> list[str]:
    """Independent revalidation of a result's invariants from raw arrays.

    Recomputes the L-inf distance, pixel range, MSE, success predicate and
    confidence instead of trusting the producer's fields. Returns a list of
    violation descriptions (empty when sound).
    """
    problems = []
    adv = np.asarray(result.adversarial_image, dtype=np.float64)
    anchor = np.asarray(result.anchor_image, dtype=np.float64)
    benign = np.asarray(result.benign_image, dtype=np.float64)

    linf = float(np.abs(adv - anchor).max())
    if linf > attack_cfg.epsilon + 1e-6:
        problems.append(f"L-inf distance {linf} exceeds epsilon {attack_cfg.epsilon}")
    if abs(linf - result.linf_norm) > 1e-12:
        problems.append(f"stored linf_norm {result.linf_norm} != recomputed {linf}")
    if adv.min() < 0.0 or adv.max() > 1.0:
        problems.append("adversarial pixels leave [0, 1]")

    mse = float(np.mean((adv - benign) ** 2))
    if abs(mse - result.mse) > 1e-12:
        problems.append(f"stored mse {result.mse} != recomputed {mse}")

    pred = result.adv_pred
    if result.target_label is None:
        expected = pred.top1 != result.true_label
    else:
        expected = pred.top1 == result.target_label
    if bool(result.success) != expected:
        problems.append(f"success flag {result.success} contradicts predictions")

    probs = np.asarray(pred.probabilities, dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-6:
        problems.append(f"probabilities sum to {probs.sum()}")
    if abs(pred.confidence - probs.max()) > 1e-12:
        problems.append("confidence is not the max probability")

    if stack is not None:
        recheck = stack.classify(adv)
        if recheck.top1 != pred.top1:
            problems.append(f"stored prediction {pred.top1} != reclassified {recheck.top1}")
    return problems
