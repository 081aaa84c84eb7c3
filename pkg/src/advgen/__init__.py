"""Adversarial image generation toolkit.

Two attack phases against a text-conditioned generator / classifier pair:
class-token embedding optimization, then momentum-accumulated L-infinity
bounded sign-gradient refinement of the generated image. Ships with a
deterministic toy backend, an evaluation harness (misclassification rate,
MSE, confidence histograms, epsilon/mu sweeps) and an experiment CLI.
"""

__version__ = "0.1.0"

from .embedding import (
    EmbedOptConfig,
    adversarial_loss,
    cosine_regularizer,
    optimize_embeddings,
    total_objective,
)
from .metrics import (
    MetricsRow,
    SweepGrid,
    build_prefiltered_instances,
    confidence_histogram,
    is_nae,
    misclassification_rate,
    mse,
    run_sweep,
)
from .models import (
    DEFAULT_CLASSES,
    DEFAULT_PROMPT_TEMPLATE,
    ClassifierOutput,
    GenConfig,
    ModelStack,
    TokenEmbeddingSet,
    ToyDims,
    get_backend,
    make_toy_stack,
    register_backend,
)
from .pipeline import (
    AdversarialResult,
    PrefilteredInstance,
    check_result,
    run_attack_pipeline,
)
from .refine import (
    AttackConfig,
    MomentumState,
    apply_step,
    clip_pixels,
    momentum_refine,
    normalize_gradient,
    project_linf,
    update_momentum,
)

__all__ = [
    "__version__",
    "AdversarialResult",
    "AttackConfig",
    "ClassifierOutput",
    "DEFAULT_CLASSES",
    "DEFAULT_PROMPT_TEMPLATE",
    "EmbedOptConfig",
    "GenConfig",
    "MetricsRow",
    "ModelStack",
    "MomentumState",
    "PrefilteredInstance",
    "SweepGrid",
    "TokenEmbeddingSet",
    "ToyDims",
    "adversarial_loss",
    "apply_step",
    "build_prefiltered_instances",
    "check_result",
    "clip_pixels",
    "confidence_histogram",
    "cosine_regularizer",
    "get_backend",
    "is_nae",
    "make_toy_stack",
    "misclassification_rate",
    "momentum_refine",
    "mse",
    "normalize_gradient",
    "optimize_embeddings",
    "project_linf",
    "register_backend",
    "run_attack_pipeline",
    "run_sweep",
    "total_objective",
    "update_momentum",
]
