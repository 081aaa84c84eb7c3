"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line (run with -s to see them) and enforcing its runtime budget.

Criteria:
  1. engine iterates match an independent transcription of the recurrence
  2. L-inf soundness over 500 randomized refinement runs
  3. analytic gradients match central finite differences (embedding chain
     and image chain through the differentiable resize)
  4. positive-scale invariance of the refinement trajectory
  5. reductions: zero budget, single sign-gradient step, zero embed steps
  6. directional trends on the frozen 50-instance toy benchmark
  7. CLI end-to-end run with reproducible metrics
  8. closed-form metric values
"""

import json
import time
from contextlib import contextmanager

import numpy as np

from advgen.cli import main
from advgen.embedding import EmbedOptConfig, objective_value_and_grad, optimize_embeddings
from advgen.experiment import OUTPUT_ROOT_ENV
from advgen.metrics import (
    SweepGrid,
    confidence_histogram,
    latent_vector,
    misclassification_rate,
    mse,
    run_sweep,
)
from advgen.models import DEFAULT_CLASSES
from advgen.pipeline import make_refinement_callback, run_attack_pipeline
from advgen.refine import AttackConfig, momentum_refine

from conftest import BENCH_EMBED, BENCH_STACK_SEED
from test_refine import quadratic_loss, reference_refinement


@contextmanager
def criterion(number, description, budget_seconds):
    start = time.perf_counter()
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE {number} FAIL: {description}")
        raise
    elapsed = time.perf_counter() - start
    print(f"ACCEPTANCE {number} PASS: {description} [{elapsed:.1f}s]")
    assert elapsed < budget_seconds, f"criterion {number} exceeded {budget_seconds}s budget"


def test_criterion_1_oracle_recurrence(rng):
    with criterion(1, "iterates match brute-force recurrence on 100 random instances", 5.0):
        for _ in range(100):
            n = int(rng.integers(2, 17))
            x0 = rng.uniform(0.0, 1.0, n)
            cb = quadratic_loss(rng.standard_normal(n), rng.standard_normal(n))
            mu = float(rng.choice([0.0, 0.5, 1.0]))
            t = int(rng.integers(1, 6))
            eps = float(rng.uniform(0.0, 0.4))
            out, trace = momentum_refine(
                x0, cb, 0, AttackConfig(epsilon=eps, mu=mu, t_attack=t), keep_images=True
            )
            ref, ref_iterates = reference_refinement(x0, cb, 0, eps, mu, t)
            np.testing.assert_allclose(out, ref, atol=1e-6)
            for row, ref_x in zip(trace, ref_iterates):
                np.testing.assert_allclose(row.image, ref_x, atol=1e-6)


def test_criterion_2_linf_soundness(bench_stack, rng):
    with criterion(2, "500 randomized refinements stay in the budget and in [0, 1]", 30.0):
        cb = make_refinement_callback(bench_stack)
        embeddings = {}
        for name in DEFAULT_CLASSES:
            _, tes = bench_stack.encode_text(name)
            embeddings[name] = bench_stack.encode(tes)
        for _ in range(500):
            name = str(rng.choice(DEFAULT_CLASSES))
            label = DEFAULT_CLASSES.index(name)
            z = rng.standard_normal(bench_stack.latent_dim)
            x0 = bench_stack.generate(z, embeddings[name])
            cfg = AttackConfig(
                epsilon=float(rng.uniform(0.0, 0.5)),
                mu=float(rng.uniform(0.0, 1.5)),
                t_attack=int(rng.integers(1, 9)),
            )
            out, _ = momentum_refine(x0, cb, label, cfg)
            assert np.abs(out - x0).max() <= cfg.epsilon + 1e-6
            assert out.min() >= 0.0 and out.max() <= 1.0


def test_criterion_3_gradient_checks(bench_stack, rng):
    with criterion(3, "analytic gradients match central finite differences (<= 1e-3)", 60.0):
        # embedding chain: full objective w.r.t. the class token at 10 random
        # points; evaluated against a non-predicted label so the sharp
        # classifier leaves finite-difference signal
        _, tokens = bench_stack.encode_text("tiger")
        z = latent_vector(bench_stack, 42)
        base_top1 = bench_stack.classify(
            bench_stack.generate(z, bench_stack.encode(tokens))
        ).top1
        fd_label = (base_top1 + 1) % bench_stack.n_classes
        h = 1e-4
        for _ in range(10):
            e = tokens.original_class_embedding + 0.3 * rng.standard_normal(bench_stack.token_dim)
            cur = tokens.with_class_embedding(e)
            _, grad, _, _ = objective_value_and_grad(cur, bench_stack, z, fd_label, lam=0.1)
            fd = np.zeros_like(grad)
            for i in range(len(e)):
                ep, em = e.copy(), e.copy()
                ep[i] += h
                em[i] -= h
                fd[i] = (
                    objective_value_and_grad(cur.with_class_embedding(ep), bench_stack, z, fd_label, 0.1)[0]
                    - objective_value_and_grad(cur.with_class_embedding(em), bench_stack, z, fd_label, 0.1)[0]
                ) / (2 * h)
            assert np.linalg.norm(fd - grad) / np.linalg.norm(fd) <= 1e-3

        # image chain through the differentiable resize at 10 random points
        cb = make_refinement_callback(bench_stack)
        for _ in range(10):
            x = rng.uniform(0.0, 1.0, (16, 16, 3))
            label = (bench_stack.classify(x).top1 + 1) % bench_stack.n_classes
            _, grad, _ = cb(x, label)
            flat = x.ravel()
            idx = rng.choice(flat.size, size=64, replace=False)
            fd = np.zeros(len(idx))
            for j, i in enumerate(idx):
                xp, xm = flat.copy(), flat.copy()
                xp[i] += h
                xm[i] -= h
                fd[j] = (cb(xp.reshape(x.shape), label)[0]
                         - cb(xm.reshape(x.shape), label)[0]) / (2 * h)
            assert np.linalg.norm(fd - grad.ravel()[idx]) / np.linalg.norm(fd) <= 1e-3


def test_criterion_4_positive_scale_invariance(bench_stack, bench_instances):
    with criterion(4, "scaling the loss by 0.1 or 10 leaves every iterate unchanged", 30.0):
        cb = make_refinement_callback(bench_stack)
        cfg = AttackConfig(epsilon=0.2, mu=1.0, t_attack=30)
        for inst in bench_instances[:5]:
            _, tes = bench_stack.encode_text(inst.class_name)
            x0 = bench_stack.generate(inst.z, bench_stack.encode(tes))
            _, base_trace = momentum_refine(x0, cb, inst.true_label, cfg, keep_images=True)
            for c in (0.1, 10.0):
                def scaled(x, label, _c=c):
                    loss, grad, out = cb(x, label)
                    return _c * loss, _c * grad, out

                _, trace = momentum_refine(x0, scaled, inst.true_label, cfg, keep_images=True)
                for row, ref in zip(trace, base_trace):
                    np.testing.assert_allclose(row.image, ref.image, atol=1e-6)


def test_criterion_5_reductions(bench_stack, bench_instances):
    with criterion(5, "zero-budget, single-step and zero-embed-step reductions", 30.0):
        cb = make_refinement_callback(bench_stack)
        inst = bench_instances[0]
        _, tokens = bench_stack.encode_text(inst.class_name)
        x0 = bench_stack.generate(inst.z, bench_stack.encode(tokens))

        out, _ = momentum_refine(x0, cb, inst.true_label,
                                 AttackConfig(epsilon=0.0, mu=1.0, t_attack=30))
        assert (out == x0).all()

        eps = 0.08
        out, _ = momentum_refine(x0, cb, inst.true_label,
                                 AttackConfig(epsilon=eps, mu=0.0, t_attack=1))
        _, g0, _ = cb(x0, inst.true_label)
        fgsm = np.clip(np.clip(x0 + eps * np.sign(g0), x0 - eps, x0 + eps), 0.0, 1.0)
        np.testing.assert_allclose(out, fgsm, atol=1e-12)

        same, trace = optimize_embeddings(tokens, bench_stack, inst.z, inst.true_label,
                                          EmbedOptConfig(t_embed=0))
        assert trace == []
        assert (same.embeddings == tokens.embeddings).all()


def test_criterion_6_benchmark_trends(bench_stack, bench_instances):
    with criterion(6, "mode ordering, epsilon monotonicity and momentum gain "
                      "on the 50-instance toy benchmark", 120.0):
        def mode_rate(embed_cfg, attack_cfg):
            results = []
            for inst in bench_instances:
                res = run_attack_pipeline(
                    bench_stack, inst.class_name, inst.true_label, inst.z,
                    embed_cfg, attack_cfg, latent_seed=inst.latent_seed,
                )
                results.append(res)
            return misclassification_rate(results)

        benign = mode_rate(EmbedOptConfig(t_embed=0), AttackConfig(epsilon=0.0, t_attack=30))
        embedding_only = mode_rate(BENCH_EMBED, AttackConfig(epsilon=0.0, t_attack=30))
        full = mode_rate(BENCH_EMBED, AttackConfig(epsilon=0.2, mu=1.0, t_attack=30))
        assert full >= embedding_only >= benign
        assert benign == 0.0

        rows = run_sweep(
            SweepGrid(epsilon_values=(0.0, 0.1, 0.2), mu_values=(1.0,)),
            bench_instances, bench_stack, BENCH_EMBED,
            AttackConfig(epsilon=0.2, mu=1.0, t_attack=30),
        )
        rates = [r.misclassification_rate for r in rows]
        assert rates[0] <= rates[1] <= rates[2]

        rows = run_sweep(
            SweepGrid(epsilon_values=(0.03,), mu_values=(0.0, 1.0)),
            bench_instances, bench_stack, BENCH_EMBED,
            AttackConfig(epsilon=0.03, mu=1.0, t_attack=30),
        )
        by_mu = {r.mu: r.misclassification_rate for r in rows}
        assert by_mu[1.0] >= by_mu[0.0]


def test_criterion_7_cli_end_to_end(tmp_path, monkeypatch):
    with criterion(7, "CLI run on 10 classes x 5 instances, reproducible metrics", 60.0):
        config = {
            "backend": {"name": "toy", "seed": BENCH_STACK_SEED},
            "instances_per_class": 5,
            "mode": "full",
            "embed": {"t_embed": 25, "eta": 0.05},
            "attack": {"epsilon": 0.2, "mu": 1.0, "t_attack": 30},
            "output_dir": "acceptance_run",
        }
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps(config), encoding="utf-8")

        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "first"))
        assert main(["run", str(config_path)]) == 0
        out = tmp_path / "first" / "acceptance_run"
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["instances"]) == 50
        assert manifest["n_errors"] == 0
        for rec in manifest["instances"]:
            for rel in rec["artifacts"].values():
                assert (out / rel).exists()
        row = manifest["metrics"][0]
        successes = sum(1 for r in manifest["instances"]
                        if r["result"] and r["result"]["success"])
        assert sum(row["buckets"]) == successes
        assert row["n"] + manifest["n_prefiltered"] == 50
        for rel in manifest["plots"]:
            assert (out / rel).exists()
        assert (out / "metrics.csv").exists()

        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "second"))
        assert main(["run", str(config_path)]) == 0
        again = tmp_path / "second" / "acceptance_run"
        assert (out / "metrics.csv").read_bytes() == (again / "metrics.csv").read_bytes()


def test_criterion_8_metric_closed_forms():
    with criterion(8, "closed-form metric values and histogram boundary", 10.0):
        x0 = np.full((8, 8, 3), 0.25)
        assert mse(x0, x0) == 0.0
        assert abs(mse(x0, x0 + 0.1) - 0.01) <= 1e-12
        one = np.zeros((10, 10, 1))
        x = one.copy()
        x[4, 2, 0] = 1.0
        assert abs(mse(one, x) - 1.0 / one.size) <= 1e-12

        from types import SimpleNamespace

        def res(success, conf):
            return SimpleNamespace(success=success, mse=0.0,
                                   adv_pred=SimpleNamespace(confidence=conf))

        results = [res(True, 0.95)] * 79 + [res(False, 0.5)] * 21
        assert misclassification_rate(results) == 79.0
        assert misclassification_rate([res(False, 0.5)] * 10) == 0.0
        assert misclassification_rate([res(True, 0.5)] * 7 + [res(False, 0.5)] * 93) == 7.0

        hist = confidence_histogram([res(True, 0.9), res(True, 1.0), res(True, 0.89)])
        assert hist[9] == 2
        assert hist[8] == 1
