"""Attack-effectiveness metrics and (epsilon, mu) sweep protocols.

Rates reported here are raw: an instance counts as misclassified from its
success flag alone. Whether the adversarial image still resembles its
class is left to human review of the exported galleries, so tables and
plots label the figure "raw".
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .embedding import EmbedOptConfig, optimize_embeddings
from .models import DEFAULT_PROMPT_TEMPLATE, ModelStack, stable_seed
from .pipeline import (
    AdversarialResult,
    PrefilteredInstance,
    check_result,
    make_refinement_callback,
    mean_squared_error,
    run_attack_pipeline,
)
from .refine import AttackConfig, momentum_refine

mse = mean_squared_error

CSV_HEADER = "epsilon,mu,n,rate,mean_mse," + ",".join(f"b{i}" for i in range(10))

SWEEP_PRESETS = {
    # epsilon 0.0 .. 2.0 step 0.1 at the best momentum setting
    "eps_mu1": ([i / 10 for i in range(21)], [1.0]),
    # same epsilon range with momentum disabled
    "eps_mu0": ([i / 10 for i in range(21)], [0.0]),
    # momentum 0.0 .. 2.2 step 0.2 at a small fixed budget
    "mu_eps003": ([0.03], [i / 5 for i in range(12)]),
}


@dataclass(frozen=True)
class SweepGrid:
    epsilon_values: tuple[float, ...]
    mu_values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "epsilon_values", tuple(float(e) for e in self.epsilon_values))
        object.__setattr__(self, "mu_values", tuple(float(m) for m in self.mu_values))
        for name in ("epsilon_values", "mu_values"):
            vals = getattr(self, name)
            if not vals:
                raise ValueError(f"{name} must be non-empty")
            if any(v < 0 for v in vals):
                raise ValueError(f"{name} must be non-negative, got {vals}")
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} must be strictly increasing, got {vals}")

    @classmethod
    def preset(cls, name: str) -> "SweepGrid":
        if name not in SWEEP_PRESETS:
            raise ValueError(f"unknown sweep preset {name!r}; available: {sorted(SWEEP_PRESETS)}")
        eps, mu = SWEEP_PRESETS[name]
        return cls(epsilon_values=tuple(eps), mu_values=tuple(mu))


@dataclass(frozen=True)
class MetricsRow:
    epsilon: float
    mu: float
    n_instances: int
    misclassification_rate: float  # raw percentage, no semantic verification
    mean_mse: float
    confidence_histogram: tuple[int, ...]
    n_failures: int = 0


def misclassification_rate(results: list[AdversarialResult]) -> float:
    """Percentage of results whose success flag is set. Raw figure: no
    semantic-similarity verification is applied."""
    if not results:
        raise ValueError("misclassification_rate needs a non-empty result list")
    return 100.0 * sum(1 for r in results if r.success) / len(results)


def confidence_histogram(results: list[AdversarialResult], n_buckets: int = 10) -> np.ndarray:
    """Decile counts of adversarial prediction confidence among successful
    attacks. Buckets are left-closed; 1.0 lands in the top bucket."""
    counts = np.zeros(n_buckets, dtype=np.int64)
    for r in results:
        if not r.success:
            continue
        idx = min(int(np.floor(r.adv_pred.confidence * n_buckets)), n_buckets - 1)
        counts[idx] += 1
    return counts


def is_nae(image: np.ndarray, true_label: int, classifier: ModelStack) -> bool:
    """True when the classifier's top-1 already disagrees with the label,
    i.e. the unattacked image is a natural adversarial example."""
    return classifier.classify(image).top1 != true_label


@dataclass(frozen=True)
class BenchmarkInstance:
    """One pre-filtered (class, latent) attack instance."""

    class_name: str
    true_label: int
    latent_seed: int
    z: np.ndarray

    @property
    def key(self) -> str:
        return f"{self.class_name}:{self.latent_seed}"


def derive_latent_seed(seed_base: int, class_name: str, instance_index: int) -> int:
    """seed_base XOR a stable hash of (class, instance); adding classes never
    reshuffles existing seeds."""
    return (int(seed_base) ^ stable_seed("latent", class_name, instance_index)) & (2**63 - 1)


def latent_vector(stack: ModelStack, latent_seed: int) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(latent_seed))
    return rng.standard_normal(stack.latent_dim)


def build_prefiltered_instances(
    stack: ModelStack,
    classes: list[str],
    labels: list[str],
    per_class: int,
    seed_base: int = 0,
    template: str = DEFAULT_PROMPT_TEMPLATE,
    max_attempts_factor: int = 20,
) -> list[BenchmarkInstance]:
    """Scan candidate latents per class, keeping the first per_class whose
    benign generation is classified correctly. Mirrors preparing more
    candidates than needed and attacking only correctly classified ones."""
    instances = []
    for class_name in classes:
        true_label = labels.index(class_name)
        _, tokens = stack.encode_text(class_name, template)
        text_embedding = stack.encode(tokens)
        kept = 0
        for idx in range(per_class * max_attempts_factor):
            latent_seed = derive_latent_seed(seed_base, class_name, idx)
            z = latent_vector(stack, latent_seed)
            benign = stack.generate(z, text_embedding)
            if is_nae(benign, true_label, stack):
                continue
            instances.append(
                BenchmarkInstance(
                    class_name=class_name, true_label=true_label, latent_seed=latent_seed, z=z
                )
            )
            kept += 1
            if kept == per_class:
                break
        if kept < per_class:
            raise RuntimeError(
                f"could not collect {per_class} correctly classified instances for "
                f"{class_name!r} within {per_class * max_attempts_factor} attempts"
            )
    return instances


def run_sweep(
    grid: SweepGrid,
    instances: list[BenchmarkInstance],
    stack: ModelStack,
    embed_cfg: EmbedOptConfig,
    attack_cfg: AttackConfig,
    template: str = DEFAULT_PROMPT_TEMPLATE,
    phase_mode: str = "two_phase",
) -> list[MetricsRow]:
    """One MetricsRow per (epsilon, mu) grid point over a pre-filtered
    instance set.

    In two_phase mode the embedding phase does not depend on (epsilon, mu),
    so each instance's phase-1 anchor is computed once and shared across
    grid points. Per-instance failures are recorded on the row, which is
    still emitted with reduced n.
    """
    if not instances:
        raise ValueError("run_sweep needs a non-empty instance set")

    anchors: dict[str, tuple] = {}
    if phase_mode == "two_phase":
        for inst in instances:
            try:
                anchors[inst.key] = _phase1_anchor(stack, inst, embed_cfg, attack_cfg, template)
            except Exception as exc:  # noqa: BLE001 - per-instance fault tolerance
                anchors[inst.key] = ("error", exc)

    rows = []
    for eps in grid.epsilon_values:
        for mu in grid.mu_values:
            cfg = replace(attack_cfg, epsilon=eps, mu=mu)
            results = []
            failures = 0
            for inst in instances:
                try:
                    results.append(
                        _attack_instance(stack, inst, embed_cfg, cfg, template, phase_mode, anchors)
                    )
                except Exception:  # noqa: BLE001
                    failures += 1
            rows.append(summarize_results(results, eps, mu, n_failures=failures))
    return rows


def _phase1_anchor(stack, inst, embed_cfg, attack_cfg, template):
    target = attack_cfg.target_label if attack_cfg.targeted else None
    _, tokens = stack.encode_text(inst.class_name, template)
    benign = stack.generate(inst.z, stack.encode(tokens))
    if stack.classify(benign).top1 != inst.true_label:
        return ("prefiltered", None)
    final_tokens, _ = optimize_embeddings(tokens, stack, inst.z, inst.true_label, embed_cfg, target)
    anchor = stack.generate(inst.z, stack.encode(final_tokens))
    return ("ok", (benign, anchor))


def _attack_instance(stack, inst, embed_cfg, attack_cfg, template, phase_mode, anchors):
    target = attack_cfg.target_label if attack_cfg.targeted else None
    cached = anchors.get(inst.key)
    if cached is not None:
        status, payload = cached
        if status == "error":
            raise payload
        if status == "prefiltered":
            raise RuntimeError(f"instance {inst.key} failed the pre-filter")
        benign, anchor = payload
        adversarial, _ = momentum_refine(
            anchor, make_refinement_callback(stack, target), inst.true_label, attack_cfg
        )
        adv_pred = stack.classify(adversarial)
        success = adv_pred.top1 == target if target is not None else adv_pred.top1 != inst.true_label
        result = AdversarialResult(
            class_name=inst.class_name,
            true_label=inst.true_label,
            target_label=target,
            benign_image=benign,
            benign_pred=stack.classify(benign),
            anchor_image=anchor,
            adversarial_image=adversarial,
            adv_pred=adv_pred,
            linf_norm=float(np.abs(adversarial - anchor).max()),
            mse=mean_squared_error(adversarial, benign),
            success=success,
            seeds=(inst.latent_seed, stack.seed),
        )
        problems = check_result(result, attack_cfg, stack)
        if problems:
            raise RuntimeError("sweep produced an invalid result: " + "; ".join(problems))
        return result
    result = run_attack_pipeline(
        stack,
        inst.class_name,
        inst.true_label,
        inst.z,
        embed_cfg,
        attack_cfg,
        template=template,
        phase_mode=phase_mode,
        latent_seed=inst.latent_seed,
    )
    if isinstance(result, PrefilteredInstance):
        raise RuntimeError(f"instance {inst.key} failed the pre-filter")
    return result


def summarize_results(
    results: list[AdversarialResult], epsilon: float, mu: float, n_failures: int = 0
) -> MetricsRow:
    """Fold results into one MetricsRow; an empty list yields a zero row so
    sweeps stay total even when every instance failed."""
    if results:
        rate = misclassification_rate(results)
        mean_mse = float(np.mean([r.mse for r in results]))
    else:
        rate = 0.0
        mean_mse = 0.0
    hist = confidence_histogram(results) if results else np.zeros(10, dtype=np.int64)
    return MetricsRow(
        epsilon=float(epsilon),
        mu=float(mu),
        n_instances=len(results),
        misclassification_rate=rate,
        mean_mse=mean_mse,
        confidence_histogram=tuple(int(c) for c in hist),
        n_failures=n_failures,
    )


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_csv(rows: list[MetricsRow]) -> str:
    """Render rows as the delimited table: epsilon,mu,n,rate,mean_mse,b0..b9."""
    lines = [CSV_HEADER]
    for r in rows:
        cells = [
            _fmt(r.epsilon),
            _fmt(r.mu),
            str(r.n_instances),
            _fmt(r.misclassification_rate),
            _fmt(r.mean_mse),
            *[str(b) for b in r.confidence_histogram],
        ]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
