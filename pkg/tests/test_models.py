"""Tests for the backend contracts and the toy stack."""

import numpy as np
import pytest

from advgen.models import (
    DEFAULT_CLASSES,
    ClassifierOutput,
    GenConfig,
    TokenEmbeddingSet,
    ToyDims,
    bilinear_matrix,
    get_backend,
    load_labels,
    make_toy_stack,
    register_backend,
    resize_bilinear,
)


def assert_stack_contract(stack, rng):
    """Contract suite any backend must pass: declared dims, generator range,
    classifier output invariants, and (when differentiable) VJPs consistent
    with directional finite differences."""
    assert stack.n_classes >= 2
    assert stack.latent_dim >= 1

    tokens_list, tokens = stack.encode_text(DEFAULT_CLASSES[0])
    assert 0 <= tokens.class_index < len(tokens_list)
    text_embedding = stack.encode(tokens)

    z = rng.standard_normal(stack.latent_dim)
    image = stack.generate(z, text_embedding)
    assert image.ndim == 3
    assert image.min() >= 0.0 and image.max() <= 1.0

    out = stack.classify(image)
    assert abs(out.probabilities.sum() - 1.0) <= 1e-6
    assert 0 <= out.top1 < stack.n_classes
    assert out.confidence == out.probabilities.max()

    if stack.differentiable:
        h = 1e-6
        gl = rng.standard_normal(stack.n_classes)
        # classifier VJP vs directional derivative
        v = rng.standard_normal(image.shape)
        lhs = float((stack.classify_vjp(image, gl) * v).sum())
        f = lambda img: float(gl @ stack.classify(img).logits)
        rhs = (f(image + h * v) - f(image - h * v)) / (2 * h)
        assert abs(lhs - rhs) <= 1e-3 * max(abs(rhs), 1.0)
        # generator VJP vs directional derivative
        gi = rng.standard_normal(image.shape)
        w = rng.standard_normal(text_embedding.shape)
        lhs = float(stack.generate_vjp(z, text_embedding, gi) @ w)
        g = lambda e: float((gi * stack.generate(z, e)).sum())
        rhs = (g(text_embedding + h * w) - g(text_embedding - h * w)) / (2 * h)
        assert abs(lhs - rhs) <= 1e-3 * max(abs(rhs), 1.0)
        # encoder VJP vs directional derivative on the class token
        ge = rng.standard_normal(text_embedding.shape)
        u = rng.standard_normal(tokens.embeddings.shape[1])
        lhs = float(stack.encode_vjp(tokens, ge) @ u)
        e0 = tokens.class_embedding.copy()
        enc = lambda vec: float(ge @ stack.encode(tokens.with_class_embedding(vec)))
        rhs = (enc(e0 + h * u) - enc(e0 - h * u)) / (2 * h)
        assert abs(lhs - rhs) <= 1e-3 * max(abs(rhs), 1.0)


class TestClassifierOutput:
    def test_tie_breaks_to_lowest_index(self):
        out = ClassifierOutput.from_logits(np.array([1.0, 1.0]))
        assert out.top1 == 0

    def test_softmax_invariants(self, rng):
        for _ in range(100):
            out = ClassifierOutput.from_logits(rng.standard_normal(10) * 5)
            assert abs(out.probabilities.sum() - 1.0) <= 1e-6
            assert out.confidence == out.probabilities.max()
            assert 0 <= out.top1 < 10


class TestTokenEmbeddingSet:
    def test_original_copy_is_frozen(self, rng):
        emb = rng.standard_normal((4, 6))
        tes = TokenEmbeddingSet(embeddings=emb, class_index=2,
                                original_class_embedding=emb[2].copy())
        with pytest.raises(ValueError):
            tes.original_class_embedding[0] = 99.0
        with pytest.raises(ValueError):
            tes.embeddings[0, 0] = 99.0

    def test_with_class_embedding_touches_only_class_row(self, rng):
        emb = rng.standard_normal((4, 6))
        tes = TokenEmbeddingSet(embeddings=emb, class_index=2,
                                original_class_embedding=emb[2].copy())
        new = tes.with_class_embedding(np.zeros(6))
        np.testing.assert_array_equal(new.embeddings[2], np.zeros(6))
        for i in (0, 1, 3):
            assert (new.embeddings[i] == tes.embeddings[i]).all()
        np.testing.assert_array_equal(new.original_class_embedding, emb[2])
        # source set untouched
        np.testing.assert_array_equal(tes.embeddings, emb)

    def test_class_index_bounds(self, rng):
        emb = rng.standard_normal((3, 4))
        with pytest.raises(ValueError):
            TokenEmbeddingSet(embeddings=emb, class_index=3,
                              original_class_embedding=emb[0].copy())


class TestBilinearResize:
    def test_rows_sum_to_one(self):
        for n_in, n_out in [(16, 24), (128, 224), (8, 8), (10, 3)]:
            m = bilinear_matrix(n_in, n_out)
            np.testing.assert_allclose(m.sum(axis=1), np.ones(n_out), atol=1e-12)

    def test_same_size_is_identity(self):
        np.testing.assert_array_equal(bilinear_matrix(7, 7), np.eye(7))

    def test_constant_image_stays_constant(self, rng):
        img = np.full((6, 5, 3), 0.37)
        out = resize_bilinear(img, (9, 11))
        np.testing.assert_allclose(out, 0.37, atol=1e-12)

    def test_shapes(self):
        out = resize_bilinear(np.zeros((16, 16, 3)), (24, 24))
        assert out.shape == (24, 24, 3)


class TestToyDims:
    def test_pool_divisibility(self):
        with pytest.raises(ValueError, match="divisible"):
            ToyDims(classifier_resolution=(25, 25), pool_grid=12)

    def test_positive_fields(self):
        with pytest.raises(ValueError):
            ToyDims(token_dim=0)
        with pytest.raises(ValueError):
            ToyDims(resolution=(0, 4))


class TestToyStack:
    def test_seeded_determinism(self, rng):
        a = make_toy_stack(seed=0)
        b = make_toy_stack(seed=0)
        _, ta = a.encode_text("hamster")
        _, tb = b.encode_text("hamster")
        assert (ta.embeddings == tb.embeddings).all()
        z = rng.standard_normal(a.latent_dim)
        ea, eb = a.encode(ta), b.encode(tb)
        assert (ea == eb).all()
        assert (a.generate(z, ea) == b.generate(z, eb)).all()

    def test_different_seeds_differ(self, rng):
        a = make_toy_stack(seed=0)
        b = make_toy_stack(seed=1)
        _, ta = a.encode_text("hamster")
        _, tb = b.encode_text("hamster")
        assert not (ta.embeddings == tb.embeddings).all()

    def test_generate_deterministic_and_in_range(self, rng):
        stack = make_toy_stack(seed=3)
        _, tes = stack.encode_text("zebra")
        e = stack.encode(tes)
        for _ in range(100):
            z = rng.standard_normal(stack.latent_dim)
            e_rand = rng.standard_normal(e.shape)
            img = stack.generate(z, e_rand)
            assert img.min() >= 0.0 and img.max() <= 1.0
        z = rng.standard_normal(stack.latent_dim)
        assert (stack.generate(z, e) == stack.generate(z, e)).all()

    def test_zero_inputs_give_sigmoid_bias(self):
        stack = make_toy_stack(seed=5)
        img = stack.generate(np.zeros(stack.latent_dim), np.zeros(stack.dims.text_dim))
        expected = 1.0 / (1.0 + np.exp(-stack.gen_bias))
        h, w = stack.dims.resolution
        np.testing.assert_allclose(img, expected.reshape(h, w, stack.dims.channels), atol=1e-12)

    def test_latent_dimension_mismatch(self):
        stack = make_toy_stack(seed=0)
        with pytest.raises(ValueError, match=r"expected \(8,\).*\(5,\)"):
            stack.generate(np.zeros(5), np.zeros(stack.dims.text_dim))

    def test_image_shape_mismatch(self):
        stack = make_toy_stack(seed=0)
        with pytest.raises(ValueError, match="shape mismatch"):
            stack.classify(np.zeros((4, 4, 3)))

    def test_resolution_override_rejected(self):
        stack = make_toy_stack(seed=0)
        cfg = GenConfig(resolution=(64, 64))
        with pytest.raises(ValueError, match="fixed at resolution"):
            stack.generate(np.zeros(stack.latent_dim), np.zeros(stack.dims.text_dim), cfg)

    def test_classifier_probabilities_sum(self, rng):
        stack = make_toy_stack(seed=2)
        for _ in range(100):
            img = rng.uniform(0, 1, (16, 16, 3))
            out = stack.classify(img)
            assert abs(out.probabilities.sum() - 1.0) <= 1e-6
            assert 0 <= out.top1 < 10

    def test_classification_stable_across_calls(self, rng):
        stack = make_toy_stack(seed=2)
        img = rng.uniform(0, 1, (16, 16, 3))
        first = stack.classify(img)
        for _ in range(5):
            again = stack.classify(img)
            assert again.top1 == first.top1
            assert (again.logits == first.logits).all()

    def test_benign_generations_mostly_classified_correctly(self, bench_stack):
        correct = 0
        total = 0
        gen = np.random.default_rng(77)
        for label, name in enumerate(DEFAULT_CLASSES):
            _, tes = bench_stack.encode_text(name)
            e = bench_stack.encode(tes)
            for _ in range(10):
                z = gen.standard_normal(bench_stack.latent_dim)
                total += 1
                correct += bench_stack.classify(bench_stack.generate(z, e)).top1 == label
        assert correct / total >= 0.8

    def test_seed_isolation_distinct_latents_distinct_images(self, bench_stack):
        _, tes = bench_stack.encode_text("castle")
        e = bench_stack.encode(tes)
        seen = set()
        for seed in range(100):
            z = np.random.Generator(np.random.PCG64(seed)).standard_normal(bench_stack.latent_dim)
            img = bench_stack.generate(z, e)
            seen.add(img.tobytes())
        assert len(seen) == 100

    def test_contract_suite(self, rng):
        assert_stack_contract(make_toy_stack(seed=0), rng)
        assert_stack_contract(make_toy_stack(seed=9, dims=ToyDims(
            token_dim=6, text_dim=8, latent_dim=4, resolution=(10, 12),
            classifier_resolution=(15, 18), pool_grid=3, n_classes=4)), rng)

    def test_classifier_gradient_matches_finite_differences(self, bench_stack, rng):
        # cross-entropy against a non-predicted label so the gradient has
        # numerically meaningful magnitude
        from advgen.pipeline import make_refinement_callback

        cb = make_refinement_callback(bench_stack)
        x = rng.uniform(0, 1, (16, 16, 3))
        label = (bench_stack.classify(x).top1 + 1) % bench_stack.n_classes
        _, grad, _ = cb(x, label)
        h = 1e-4
        flat = x.ravel()
        idx = rng.choice(flat.size, size=40, replace=False)
        fd = np.zeros(len(idx))
        for j, i in enumerate(idx):
            xp, xm = flat.copy(), flat.copy()
            xp[i] += h
            xm[i] -= h
            fd[j] = (cb(xp.reshape(x.shape), label)[0] - cb(xm.reshape(x.shape), label)[0]) / (2 * h)
        rel = np.linalg.norm(fd - grad.ravel()[idx]) / np.linalg.norm(fd)
        assert rel <= 1e-4


class TestEncodeText:
    def test_class_index_points_at_class_token(self):
        stack = make_toy_stack(seed=0)
        tokens, tes = stack.encode_text("hamster")
        assert tokens == ["a", "high-quality", "image", "of", "a", "hamster"]
        assert tes.class_index == 5
        np.testing.assert_array_equal(tes.class_embedding, stack.token_embedding("hamster"))

    def test_empty_class_name_rejected(self):
        stack = make_toy_stack(seed=0)
        with pytest.raises(ValueError, match="non-empty"):
            stack.encode_text("   ")

    def test_template_placeholder_required(self):
        stack = make_toy_stack(seed=0)
        with pytest.raises(ValueError, match="placeholder"):
            stack.encode_text("hamster", template="A photo of a dog")
        with pytest.raises(ValueError, match="placeholder"):
            stack.encode_text("hamster", template="{class} and {class}")

    def test_multi_token_class_warns_and_uses_first(self):
        stack = make_toy_stack(seed=0)
        with pytest.warns(UserWarning, match="2 tokens"):
            tokens, tes = stack.encode_text("monarch butterfly")
        assert tokens[tes.class_index] == "monarch"
        np.testing.assert_array_equal(tes.original_class_embedding,
                                      stack.token_embedding("monarch"))

    def test_deterministic_embeddings_across_calls(self):
        stack = make_toy_stack(seed=4)
        _, a = stack.encode_text("koala")
        _, b = stack.encode_text("koala")
        assert (a.embeddings == b.embeddings).all()


class TestLabelsFile:
    def test_line_number_is_class_index(self, tmp_path):
        path = tmp_path / "labels.txt"
        path.write_text("castle\nflamingo\nforklift\n", encoding="utf-8")
        labels = load_labels(path)
        assert labels == ["castle", "flamingo", "forklift"]
        assert labels.index("flamingo") == 1

    def test_blank_line_rejected(self, tmp_path):
        path = tmp_path / "labels.txt"
        path.write_text("castle\n\nforklift\n", encoding="utf-8")
        with pytest.raises(ValueError, match="line 2"):
            load_labels(path)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "labels.txt"
        path.write_text("", encoding="utf-8")
        with pytest.raises(ValueError, match="empty"):
            load_labels(path)


class TestBackendRegistry:
    def test_toy_constructible(self):
        stack = get_backend("toy", seed=1)
        assert stack.name == "toy"
        assert stack.seed == 1

    def test_unknown_backend_lists_available(self):
        with pytest.raises(ValueError, match="toy"):
            get_backend("latent-diffusion-xl")

    def test_plugin_registration(self, rng):
        calls = {}

        def factory(**params):
            calls.update(params)
            return make_toy_stack(seed=0)

        register_backend("test-plugin", factory)
        try:
            stack = get_backend("test-plugin", seed=3)
            assert calls == {"seed": 3}
            assert_stack_contract(stack, rng)
        finally:
            from advgen.models import _BACKENDS

            _BACKENDS.pop("test-plugin", None)
