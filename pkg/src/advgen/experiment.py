"""Experiment configuration, execution and persistence.

A config is a JSON document; every omitted key falls back to the
reference protocol defaults (epsilon 0.2, momentum 1.0, 30 refinement
iterations, 25 Adam steps at learning rate 0.001, guidance 8.5 with 20
sampler steps, 128x128 generations resized to 224x224, 10 instances for
each of 10 default classes). A run writes, under its output directory:

    manifest.json            config snapshot + per-instance records
    metrics.csv              epsilon,mu,n,rate,mean_mse,b0..b9
    plots/*.png              report figures
    instances/<class>_<i>/   benign.png, adversarial.png, gallery.png,
                             trace.csv

The manifest embeds the fully resolved config, so a run can be repeated
bit-identically (metrics CSV included) from the manifest alone on the
deterministic toy backend.
"""

from __future__ import annotations

import inspect
import json
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .embedding import REGULARIZERS, EmbedOptConfig
from .metrics import (
    MetricsRow,
    SweepGrid,
    build_prefiltered_instances,
    derive_latent_seed,
    latent_vector,
    metrics_csv,
    run_sweep,
    summarize_results,
)
from .models import (
    DEFAULT_CLASSES,
    DEFAULT_PROMPT_TEMPLATE,
    GenConfig,
    ModelStack,
    ToyDims,
    get_backend_factory,
    load_labels,
    make_toy_stack,
)
from .pipeline import PHASE_MODES, PrefilteredInstance, run_attack_pipeline
from .plots import emit_plots, save_gallery, save_image_png
from .refine import AttackConfig

OUTPUT_ROOT_ENV = "ADVGEN_OUTPUT_ROOT"

MODES = ("benign", "embedding_only", "full")
TARGET_RULES = ("class_id_minus_1",)

TRACE_COLUMNS = (
    "phase,iteration,loss,cosine_sim,m_l1,linf_norm,predicted_label,confidence,mse"
)


class ConfigError(ValueError):
    """Config validation failure carrying one line per problem."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass(frozen=True)
class ExperimentConfig:
    backend_name: str
    backend_params: dict
    classes: tuple[str, ...]
    labels: tuple[str, ...]
    instances_per_class: int
    seed_base: int
    mode: str
    phase_mode: str
    template: str
    output_dir: str
    embed: EmbedOptConfig
    attack: AttackConfig  # untargeted base; per-instance targets resolved at run time
    targeted: bool
    target_rule: str | None
    target_label: int | None
    gen: GenConfig
    sweep: SweepGrid | None
    sweep_preset: str | None

    def snapshot(self) -> dict:
        """Fully resolved, JSON-serializable config that parse_config accepts
        back; embedded in manifests for reproducibility."""
        snap = {
            "backend": {"name": self.backend_name, **self.backend_params},
            "classes": list(self.classes),
            "labels": list(self.labels),
            "instances_per_class": self.instances_per_class,
            "seed_base": self.seed_base,
            "mode": self.mode,
            "phase_mode": self.phase_mode,
            "template": self.template,
            "output_dir": self.output_dir,
            "embed": {
                "t_embed": self.embed.t_embed,
                "eta": self.embed.eta,
                "lambda": self.embed.lam,
                "beta1": self.embed.beta1,
                "beta2": self.embed.beta2,
                "adam_guard": self.embed.adam_guard,
                "regularizer": self.embed.regularizer,
            },
            "attack": {
                "epsilon": self.attack.epsilon,
                "mu": self.attack.mu,
                "t_attack": self.attack.t_attack,
                "delta_guard": self.attack.delta_guard,
                "targeted": self.targeted,
                "target_rule": self.target_rule,
                "target_label": self.target_label,
            },
            "gen": {
                "sampler_steps": self.gen.sampler_steps,
                "guidance_scale": self.gen.guidance_scale,
                "resolution": list(self.gen.resolution),
                "classifier_input_resolution": list(self.gen.classifier_input_resolution),
            },
        }
        if self.sweep_preset:
            snap["sweep"] = {"preset": self.sweep_preset}
        elif self.sweep is not None:
            snap["sweep"] = {
                "epsilon_values": list(self.sweep.epsilon_values),
                "mu_values": list(self.sweep.mu_values),
            }
        return snap


def _check_number(raw, section, key, problems, minimum=None, exclusive_minimum=None,
                  integer=False, default=None):
    if key not in raw:
        return default
    val = raw[key]
    name = f"{section}.{key}" if section else key
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        problems.append(f"{name} must be a number, got {val!r}")
        return default
    if integer and not isinstance(val, int):
        problems.append(f"{name} must be an integer, got {val!r}")
        return default
    if minimum is not None and val < minimum:
        problems.append(f"{name} must be >= {minimum}, got {val}")
        return default
    if exclusive_minimum is not None and val <= exclusive_minimum:
        problems.append(f"{name} must be > {exclusive_minimum}, got {val}")
        return default
    return val


def _check_unknown(raw, section, allowed, problems):
    for key in raw:
        if key not in allowed:
            where = f"{section}.{key}" if section else key
            problems.append(f"unknown key {where!r}")


def _check_resolution(raw, section, key, problems, default):
    if key not in raw:
        return default
    val = raw[key]
    name = f"{section}.{key}"
    if (not isinstance(val, (list, tuple)) or len(val) != 2
            or not all(isinstance(v, int) and v > 0 for v in val)):
        problems.append(f"{name} must be a pair of positive integers, got {val!r}")
        return default
    return (val[0], val[1])


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON config; an empty document means defaults.

    Raises ConfigError with one itemized diagnostic per problem: unknown
    keys, out-of-range values, and mode constraints (benign implies
    t_embed = 0 and epsilon = 0; embedding_only implies epsilon = 0).
    """
    text = text.strip()
    if not text:
        raw = {}
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config is not valid JSON: {exc}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError([f"config root must be an object, got {type(raw).__name__}"])

    problems: list[str] = []
    _check_unknown(
        raw,
        "",
        {
            "backend", "classes", "labels", "labels_file", "instances_per_class",
            "seed_base", "mode", "phase_mode", "template", "output_dir",
            "embed", "attack", "gen", "sweep",
        },
        problems,
    )

    mode = raw.get("mode", "full")
    if mode not in MODES:
        problems.append(f"mode must be one of {MODES}, got {mode!r}")
        mode = "full"
    phase_mode = raw.get("phase_mode", "two_phase")
    if phase_mode not in PHASE_MODES:
        problems.append(f"phase_mode must be one of {PHASE_MODES}, got {phase_mode!r}")
        phase_mode = "two_phase"

    template = raw.get("template", DEFAULT_PROMPT_TEMPLATE)
    if not isinstance(template, str) or template.split().count("{class}") != 1:
        problems.append(
            "template must be a string containing the {class} placeholder exactly once "
            f"as a standalone word, got {template!r}"
        )
        template = DEFAULT_PROMPT_TEMPLATE
    output_dir = raw.get("output_dir", "runs/experiment")
    if not isinstance(output_dir, str) or not output_dir:
        problems.append(f"output_dir must be a non-empty string, got {output_dir!r}")
        output_dir = "runs/experiment"

    # labels and classes
    labels = None
    if "labels" in raw and "labels_file" in raw:
        problems.append("give either labels or labels_file, not both")
    if "labels" in raw:
        if (not isinstance(raw["labels"], list) or not raw["labels"]
                or not all(isinstance(c, str) and c.strip() for c in raw["labels"])):
            problems.append("labels must be a non-empty list of non-empty strings")
        else:
            labels = [c.strip() for c in raw["labels"]]
    elif "labels_file" in raw:
        try:
            labels = load_labels(raw["labels_file"])
        except (OSError, ValueError) as exc:
            problems.append(f"labels_file: {exc}")
    if labels is None:
        labels = list(DEFAULT_CLASSES)
    if len(set(labels)) != len(labels):
        problems.append("labels contain duplicates")

    classes = raw.get("classes", list(labels))
    if (not isinstance(classes, list) or not classes
            or not all(isinstance(c, str) and c.strip() for c in classes)):
        problems.append("classes must be a non-empty list of non-empty strings")
        classes = list(labels)
    else:
        classes = [c.strip() for c in classes]
        for c in classes:
            if c not in labels:
                problems.append(f"class {c!r} is not in the labels list")
        classes = [c for c in classes if c in labels]
        if not classes:
            classes = list(labels)

    instances_per_class = _check_number(
        raw, "", "instances_per_class", problems, minimum=1, integer=True, default=10
    )
    seed_base = _check_number(raw, "", "seed_base", problems, minimum=0, integer=True, default=0)

    # backend
    backend_raw = raw.get("backend", {})
    if not isinstance(backend_raw, dict):
        problems.append(f"backend must be an object, got {backend_raw!r}")
        backend_raw = {}
    backend_name = backend_raw.get("name", "toy")
    backend_params = {k: v for k, v in backend_raw.items() if k != "name"}
    if backend_name == "toy":
        _check_unknown(backend_raw, "backend", {"name", "seed", "dims"}, problems)
        _check_number(backend_raw, "backend", "seed", problems, minimum=0, integer=True, default=0)
        dims_raw = backend_raw.get("dims")
        if dims_raw is not None:
            if not isinstance(dims_raw, dict):
                problems.append(f"backend.dims must be an object, got {dims_raw!r}")
            else:
                allowed = set(ToyDims.__dataclass_fields__)
                _check_unknown(dims_raw, "backend.dims", allowed, problems)
                try:
                    make_toy_stack(seed=0, dims={k: v for k, v in dims_raw.items() if k in allowed})
                except (TypeError, ValueError) as exc:
                    problems.append(f"backend.dims: {exc}")

    # embedding phase
    embed_raw = raw.get("embed", {})
    if not isinstance(embed_raw, dict):
        problems.append(f"embed must be an object, got {embed_raw!r}")
        embed_raw = {}
    _check_unknown(
        embed_raw, "embed",
        {"t_embed", "eta", "lambda", "beta1", "beta2", "adam_guard", "regularizer"},
        problems,
    )
    t_embed = _check_number(embed_raw, "embed", "t_embed", problems, minimum=0, integer=True,
                            default=25)
    eta = _check_number(embed_raw, "embed", "eta", problems, exclusive_minimum=0.0, default=0.001)
    lam = _check_number(embed_raw, "embed", "lambda", problems, minimum=0.0, default=0.1)
    beta1 = _check_number(embed_raw, "embed", "beta1", problems, minimum=0.0, default=0.9)
    beta2 = _check_number(embed_raw, "embed", "beta2", problems, minimum=0.0, default=0.999)
    for name, val in (("beta1", beta1), ("beta2", beta2)):
        if val >= 1.0:
            problems.append(f"embed.{name} must be < 1, got {val}")
            if name == "beta1":
                beta1 = 0.9
            else:
                beta2 = 0.999
    adam_guard = _check_number(embed_raw, "embed", "adam_guard", problems,
                               exclusive_minimum=0.0, default=1e-8)
    regularizer = embed_raw.get("regularizer", "one_minus_cos")
    if regularizer not in REGULARIZERS:
        problems.append(f"embed.regularizer must be one of {REGULARIZERS}, got {regularizer!r}")
        regularizer = "one_minus_cos"

    # attack phase
    attack_raw = raw.get("attack", {})
    if not isinstance(attack_raw, dict):
        problems.append(f"attack must be an object, got {attack_raw!r}")
        attack_raw = {}
    _check_unknown(
        attack_raw, "attack",
        {"epsilon", "mu", "t_attack", "delta_guard", "targeted", "target_rule", "target_label"},
        problems,
    )
    epsilon = _check_number(attack_raw, "attack", "epsilon", problems, minimum=0.0, default=0.2)
    mu = _check_number(attack_raw, "attack", "mu", problems, minimum=0.0, default=1.0)
    t_attack = _check_number(attack_raw, "attack", "t_attack", problems, minimum=1, integer=True,
                             default=30)
    delta_guard = _check_number(attack_raw, "attack", "delta_guard", problems,
                                exclusive_minimum=0.0, default=1e-12)
    targeted = attack_raw.get("targeted", False)
    if not isinstance(targeted, bool):
        problems.append(f"attack.targeted must be a boolean, got {targeted!r}")
        targeted = False
    target_rule = attack_raw.get("target_rule")
    if target_rule is not None and target_rule not in TARGET_RULES:
        problems.append(f"attack.target_rule must be one of {TARGET_RULES}, got {target_rule!r}")
        target_rule = None
    target_label = attack_raw.get("target_label")
    if target_label is not None and (isinstance(target_label, bool)
                                     or not isinstance(target_label, int)):
        problems.append(f"attack.target_label must be an integer, got {target_label!r}")
        target_label = None
    if targeted and target_rule is None and target_label is None:
        target_rule = "class_id_minus_1"
    if targeted and target_rule is not None and target_label is not None:
        problems.append("attack.target_rule and attack.target_label are mutually exclusive")
    if target_label is not None and not 0 <= target_label < len(labels):
        problems.append(
            f"attack.target_label {target_label} out of range for {len(labels)} labels"
        )

    # generator settings
    gen_raw = raw.get("gen", {})
    if not isinstance(gen_raw, dict):
        problems.append(f"gen must be an object, got {gen_raw!r}")
        gen_raw = {}
    _check_unknown(
        gen_raw, "gen",
        {"sampler_steps", "guidance_scale", "resolution", "classifier_input_resolution"},
        problems,
    )
    sampler_steps = _check_number(gen_raw, "gen", "sampler_steps", problems, minimum=1,
                                  integer=True, default=20)
    guidance = _check_number(gen_raw, "gen", "guidance_scale", problems,
                             exclusive_minimum=0.0, default=8.5)
    resolution = _check_resolution(gen_raw, "gen", "resolution", problems, (128, 128))
    cls_resolution = _check_resolution(gen_raw, "gen", "classifier_input_resolution",
                                       problems, (224, 224))

    # sweep
    sweep_raw = raw.get("sweep")
    sweep = None
    sweep_preset = None
    if sweep_raw is not None:
        if not isinstance(sweep_raw, dict):
            problems.append(f"sweep must be an object, got {sweep_raw!r}")
        else:
            _check_unknown(sweep_raw, "sweep", {"preset", "epsilon_values", "mu_values"}, problems)
            if "preset" in sweep_raw and ("epsilon_values" in sweep_raw or "mu_values" in sweep_raw):
                problems.append("sweep.preset and explicit sweep values are mutually exclusive")
            elif "preset" in sweep_raw:
                try:
                    sweep = SweepGrid.preset(sweep_raw["preset"])
                    sweep_preset = sweep_raw["preset"]
                except ValueError as exc:
                    problems.append(f"sweep.preset: {exc}")
            else:
                try:
                    sweep = SweepGrid(
                        epsilon_values=tuple(sweep_raw.get("epsilon_values", [])),
                        mu_values=tuple(sweep_raw.get("mu_values", [])),
                    )
                except (TypeError, ValueError) as exc:
                    problems.append(f"sweep: {exc}")

    # mode constraints: benign means no attack at all, embedding_only means
    # no pixel-space refinement; explicit conflicting values are rejected.
    if mode == "benign":
        if "t_embed" in embed_raw and embed_raw["t_embed"] != 0:
            problems.append(
                f"mode=benign requires embed.t_embed = 0, got {embed_raw['t_embed']}"
            )
        if "epsilon" in attack_raw and attack_raw["epsilon"] != 0:
            problems.append(
                f"mode=benign requires attack.epsilon = 0, got {attack_raw['epsilon']}"
            )
        t_embed = 0
        epsilon = 0.0
    elif mode == "embedding_only":
        if "epsilon" in attack_raw and attack_raw["epsilon"] != 0:
            problems.append(
                f"mode=embedding_only requires attack.epsilon = 0, got {attack_raw['epsilon']}"
            )
        epsilon = 0.0

    if problems:
        raise ConfigError(problems)

    return ExperimentConfig(
        backend_name=backend_name,
        backend_params=backend_params,
        classes=tuple(classes),
        labels=tuple(labels),
        instances_per_class=instances_per_class,
        seed_base=seed_base,
        mode=mode,
        phase_mode=phase_mode,
        template=template,
        output_dir=output_dir,
        embed=EmbedOptConfig(
            t_embed=t_embed, eta=eta, lam=lam, beta1=beta1, beta2=beta2,
            adam_guard=adam_guard, regularizer=regularizer,
        ),
        attack=AttackConfig(epsilon=epsilon, mu=mu, t_attack=t_attack, delta_guard=delta_guard),
        targeted=targeted,
        target_rule=target_rule,
        target_label=target_label,
        gen=GenConfig(
            sampler_steps=sampler_steps,
            guidance_scale=guidance,
            resolution=resolution,
            classifier_input_resolution=cls_resolution,
        ),
        sweep=sweep,
        sweep_preset=sweep_preset,
    )


def parse_config_file(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def resolve_output_dir(output_dir: str) -> Path:
    """Resolve the run directory; ADVGEN_OUTPUT_ROOT re-roots relative paths."""
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root:
        return Path(root) / output_dir
    return Path(output_dir)


def build_backend(cfg: ExperimentConfig) -> ModelStack:
    """Construct the configured backend; the toy backend gets the label list
    as its class vocabulary so the calibrated classifier and the experiment
    agree on the index mapping. Plugin factories that accept a gen_config
    keyword receive the config's generator settings."""
    if cfg.backend_name == "toy":
        return make_toy_stack(
            seed=cfg.backend_params.get("seed", 0),
            dims=cfg.backend_params.get("dims"),
            class_names=list(cfg.labels),
        )
    params = dict(cfg.backend_params)
    factory = get_backend_factory(cfg.backend_name)
    if "gen_config" in inspect.signature(factory).parameters:
        params.setdefault("gen_config", cfg.gen)
    return factory(**params)


def resolve_target(cfg: ExperimentConfig, true_label: int, n_classes: int) -> int | None:
    if not cfg.targeted:
        return None
    if cfg.target_label is not None:
        return cfg.target_label
    # class_id_minus_1, wrapping at zero so every class has a valid target
    return (true_label - 1) % n_classes


def _trace_csv_text(result) -> str:
    """Per-iteration trace table covering both phases; the mse column is the
    full-precision MSE of that iteration's image against the benign image."""
    lines = [TRACE_COLUMNS]

    def fmt(val):
        if val is None:
            return ""
        if isinstance(val, (int, np.integer)):
            return str(int(val))
        return repr(float(val))

    benign = result.benign_image
    for row in result.embed_trace:
        m = None if row.image is None else float(np.mean((row.image - benign) ** 2))
        lines.append(",".join([
            "embed", str(row.step), fmt(row.objective), fmt(row.cosine_sim), "", "",
            fmt(row.predicted_label), fmt(row.confidence), fmt(m),
        ]))
    for row in result.refine_trace:
        m = None if row.image is None else float(np.mean((row.image - benign) ** 2))
        lines.append(",".join([
            "refine", str(row.iteration), fmt(row.loss), "", fmt(row.m_l1), fmt(row.linf_norm),
            fmt(row.predicted_label), fmt(row.confidence), fmt(m),
        ]))
    return "\n".join(lines) + "\n"


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Execute the configured run and return the manifest dict.

    Every (class, instance) pair gets a deterministic latent seed derived
    from seed_base; instances whose benign generation is misclassified are
    recorded as pre-filtered and skipped; per-instance errors are recorded
    and do not abort the run. Metrics, plots and the manifest are written
    under the resolved output directory.
    """
    t_start = time.time()
    out_dir = resolve_output_dir(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "instances").mkdir(exist_ok=True)

    stack = build_backend(cfg)
    records = []
    results = []
    n_failures = 0

    for class_name in cfg.classes:
        true_label = cfg.labels.index(class_name)
        for idx in range(cfg.instances_per_class):
            latent_seed = derive_latent_seed(cfg.seed_base, class_name, idx)
            z = latent_vector(stack, latent_seed)
            inst_dir = out_dir / "instances" / f"{class_name}_{idx:03d}"
            inst_dir.mkdir(parents=True, exist_ok=True)
            record = {
                "class": class_name,
                "class_label": true_label,
                "instance": idx,
                "latent_seed": latent_seed,
                "backend_seed": stack.seed,
                "status": "ok",
                "error": None,
                "benign_top1": None,
                "benign_confidence": None,
                "result": None,
                "artifacts": {},
            }
            try:
                attack_cfg = cfg.attack
                target = resolve_target(cfg, true_label, stack.n_classes)
                if target is not None:
                    attack_cfg = replace(attack_cfg, targeted=True, target_label=target)
                outcome = run_attack_pipeline(
                    stack,
                    class_name,
                    true_label,
                    z,
                    cfg.embed,
                    attack_cfg,
                    template=cfg.template,
                    phase_mode=cfg.phase_mode,
                    latent_seed=latent_seed,
                    keep_trace_images=True,
                )
            except Exception as exc:  # noqa: BLE001 - per-instance fault tolerance
                record["status"] = "error"
                record["error"] = f"{type(exc).__name__}: {exc}"
                n_failures += 1
                records.append(record)
                continue

            record["benign_top1"] = outcome.benign_pred.top1
            record["benign_confidence"] = outcome.benign_pred.confidence
            benign_png = inst_dir / "benign.png"
            save_image_png(benign_png, outcome.benign_image)
            record["artifacts"]["benign_png"] = str(benign_png.relative_to(out_dir))

            if isinstance(outcome, PrefilteredInstance):
                record["status"] = "prefiltered"
                records.append(record)
                continue

            adv_png = inst_dir / "adversarial.png"
            gallery_png = inst_dir / "gallery.png"
            trace_csv = inst_dir / "trace.csv"
            save_image_png(adv_png, outcome.adversarial_image)
            save_gallery(gallery_png, outcome.benign_image, outcome.adversarial_image)
            trace_csv.write_text(_trace_csv_text(outcome), encoding="utf-8")
            record["artifacts"].update(
                adversarial_png=str(adv_png.relative_to(out_dir)),
                gallery_png=str(gallery_png.relative_to(out_dir)),
                trace_csv=str(trace_csv.relative_to(out_dir)),
            )
            record["result"] = {
                "success": bool(outcome.success),
                "adv_top1": outcome.adv_pred.top1,
                "adv_confidence": outcome.adv_pred.confidence,
                "linf_norm": outcome.linf_norm,
                "mse": outcome.mse,
                "target_label": outcome.target_label,
            }
            results.append(outcome)
            records.append(record)

    row = summarize_results(results, cfg.attack.epsilon, cfg.attack.mu, n_failures=n_failures)
    (out_dir / "metrics.csv").write_text(metrics_csv([row]), encoding="utf-8")

    manifest = {
        "kind": "run",
        "toolkit_version": __version__,
        "config": cfg.snapshot(),
        "instances": records,
        "metrics": [metrics_row_dict(row)],
        "n_prefiltered": sum(1 for r in records if r["status"] == "prefiltered"),
        "n_errors": n_failures,
        "plots": [],
        "timings": {},
    }
    manifest["plots"] = [
        str(Path(p).relative_to(out_dir)) for p in emit_plots_for(manifest, out_dir)
    ]

    missing = verify_artifacts(manifest, out_dir)
    if missing:
        raise RuntimeError("missing artifacts after run: " + ", ".join(missing))

    manifest["timings"] = {
        "total_seconds": round(time.time() - t_start, 3),
        "instances": len(records),
    }
    write_manifest(out_dir / "manifest.json", manifest)
    return manifest


def run_sweep_experiment(cfg: ExperimentConfig, preset: str | None = None) -> dict:
    """Run the (epsilon, mu) sweep protocol over a pre-filtered instance set
    and return the sweep manifest."""
    t_start = time.time()
    if preset is not None:
        grid = SweepGrid.preset(preset)
        preset_name = preset
    elif cfg.sweep is not None:
        grid = cfg.sweep
        preset_name = cfg.sweep_preset
    else:
        raise ConfigError(["sweep requires a sweep section in the config or a --preset"])

    out_dir = resolve_output_dir(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stack = build_backend(cfg)

    instances = build_prefiltered_instances(
        stack,
        list(cfg.classes),
        list(cfg.labels),
        cfg.instances_per_class,
        seed_base=cfg.seed_base,
        template=cfg.template,
    )
    attack_cfg = cfg.attack
    if cfg.targeted and cfg.target_label is not None:
        attack_cfg = replace(attack_cfg, targeted=True, target_label=cfg.target_label)
    elif cfg.targeted:
        raise ConfigError(["sweep supports targeted mode only with a fixed attack.target_label"])

    rows = run_sweep(
        grid,
        instances,
        stack,
        cfg.embed,
        attack_cfg,
        template=cfg.template,
        phase_mode=cfg.phase_mode,
    )
    (out_dir / "metrics.csv").write_text(metrics_csv(rows), encoding="utf-8")

    manifest = {
        "kind": "sweep",
        "toolkit_version": __version__,
        "config": cfg.snapshot(),
        "sweep_preset": preset_name,
        "grid": {
            "epsilon_values": list(grid.epsilon_values),
            "mu_values": list(grid.mu_values),
        },
        "instances": [
            {"class": i.class_name, "class_label": i.true_label, "latent_seed": i.latent_seed}
            for i in instances
        ],
        "metrics": [metrics_row_dict(r) for r in rows],
        "plots": [],
        "timings": {},
    }
    manifest["plots"] = [
        str(Path(p).relative_to(out_dir)) for p in emit_plots_for(manifest, out_dir)
    ]
    manifest["timings"] = {"total_seconds": round(time.time() - t_start, 3)}
    write_manifest(out_dir / "manifest.json", manifest)
    return manifest


def metrics_row_dict(row: MetricsRow) -> dict:
    return {
        "epsilon": row.epsilon,
        "mu": row.mu,
        "n": row.n_instances,
        "rate": row.misclassification_rate,
        "mean_mse": row.mean_mse,
        "buckets": list(row.confidence_histogram),
        "n_failures": row.n_failures,
    }


def emit_plots_for(manifest: dict, run_dir) -> list[str]:
    """Render report figures into <run_dir>/plots, resolving instance trace
    paths relative to the run directory."""
    run_dir = Path(run_dir)
    resolved = dict(manifest)
    resolved["instances"] = [
        {**rec, "artifacts": {k: str(run_dir / v) for k, v in rec.get("artifacts", {}).items()}}
        for rec in manifest.get("instances", [])
    ]
    return emit_plots(resolved, run_dir / "plots")


def verify_artifacts(manifest: dict, run_dir) -> list[str]:
    """Check that every file the manifest points at exists; returns missing
    relative paths."""
    run_dir = Path(run_dir)
    missing = []
    for rec in manifest.get("instances", []):
        for rel in rec.get("artifacts", {}).values():
            if rel and not (run_dir / rel).exists():
                missing.append(rel)
    for rel in manifest.get("plots", []):
        if not (run_dir / rel).exists():
            missing.append(rel)
    if not (run_dir / "metrics.csv").exists():
        missing.append("metrics.csv")
    return missing


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def load_manifest(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)
