"""Backend contracts and the built-in deterministic toy model stack.

A backend bundles three stages behind one interface: a text encoder
turning token embeddings into a prompt embedding, a generator mapping
(latent, prompt embedding) to an image in [0, 1], and a classifier.
Backends that declare stages differentiable additionally expose
vector-Jacobian products for them, which is all the optimization layers
need.

The toy stack is a seeded, closed-form stand-in small enough for desk
testing: a linear token mixer, a sigmoid(affine) generator, and an
affine-over-pooled-features classifier whose rows are calibrated against
per-class prototype generations so that unperturbed generations are
mostly classified as their own class. All stages are smooth and their
gradients are coded analytically.
"""

from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass

import numpy as np

DEFAULT_PROMPT_TEMPLATE = "A high-quality image of a {class}"

DEFAULT_CLASSES = [
    "castle",
    "flamingo",
    "forklift",
    "fountain",
    "hamster",
    "koala",
    "knot",
    "monarch",
    "tiger",
    "zebra",
]


def stable_seed(*parts) -> int:
    """64-bit seed derived from the parts; stable across processes and runs."""
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big")


def _rng(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(stable_seed(*parts)))


def load_labels(path) -> list[str]:
    """Read a labels file: one class name per line, line number = class index."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line.rstrip("\n") for line in fh]
    while lines and lines[-1] == "":
        lines.pop()
    labels = [line.strip() for line in lines]
    if not labels:
        raise ValueError(f"labels file {path} is empty")
    for i, name in enumerate(labels):
        if not name:
            raise ValueError(f"labels file {path}: blank label at line {i + 1}")
    return labels


@dataclass(frozen=True)
class GenConfig:
    """Generator settings; resolutions are (height, width)."""

    sampler_steps: int = 20
    guidance_scale: float = 8.5
    resolution: tuple[int, int] = (128, 128)
    classifier_input_resolution: tuple[int, int] = (224, 224)

    def __post_init__(self):
        if self.sampler_steps < 1:
            raise ValueError(f"sampler_steps must be >= 1, got {self.sampler_steps}")
        for name in ("resolution", "classifier_input_resolution"):
            h, w = getattr(self, name)
            if h <= 0 or w <= 0:
                raise ValueError(f"{name} must be positive, got {(h, w)}")


@dataclass(frozen=True)
class ClassifierOutput:
    logits: np.ndarray
    probabilities: np.ndarray
    top1: int
    confidence: float

    @classmethod
    def from_logits(cls, logits: np.ndarray) -> "ClassifierOutput":
        logits = np.asarray(logits, dtype=np.float64)
        shifted = logits - logits.max()
        expd = np.exp(shifted)
        probs = expd / expd.sum()
        top1 = int(np.argmax(probs))  # argmax breaks ties toward the lowest index
        return cls(logits=logits, probabilities=probs, top1=top1, confidence=float(probs[top1]))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass
class TokenEmbeddingSet:
    """Ordered token embeddings with one designated class token.

    Optimization only ever touches the class-token row; updates go through
    with_class_embedding, which copies. The arrays are kept read-only and
    original_class_embedding is frozen at construction.
    """

    embeddings: np.ndarray  # (n_tokens, token_dim)
    class_index: int
    original_class_embedding: np.ndarray

    def __post_init__(self):
        self.embeddings = _frozen(self.embeddings)
        if self.embeddings.ndim != 2:
            raise ValueError(f"embeddings must be 2-D, got shape {self.embeddings.shape}")
        if not 0 <= self.class_index < len(self.embeddings):
            raise ValueError(
                f"class_index {self.class_index} out of range for {len(self.embeddings)} tokens"
            )
        self.original_class_embedding = _frozen(self.original_class_embedding)

    @property
    def n_tokens(self) -> int:
        return self.embeddings.shape[0]

    @property
    def class_embedding(self) -> np.ndarray:
        return self.embeddings[self.class_index]

    def with_class_embedding(self, vec: np.ndarray) -> "TokenEmbeddingSet":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.embeddings.shape[1],):
            raise ValueError(
                f"class embedding shape mismatch {vec.shape} vs ({self.embeddings.shape[1]},)"
            )
        new = self.embeddings.copy()
        new[self.class_index] = vec
        return TokenEmbeddingSet(
            embeddings=new,
            class_index=self.class_index,
            original_class_embedding=self.original_class_embedding,
        )


STAGES = ("encoder", "generator", "classifier")


class ModelStack:
    """Encoder/generator/classifier bundle every pipeline stage runs against.

    Concrete backends declare which stages support gradients (the matching
    VJP methods must then work) and whether calls are safe to issue from
    several workers at once.
    """

    name: str = "abstract"
    differentiable_stages: frozenset[str] = frozenset()
    concurrency_safe: bool = False
    gen_config: GenConfig
    n_classes: int
    token_dim: int
    latent_dim: int
    seed: int | None = None

    @property
    def differentiable(self) -> bool:
        """True when the whole composition is differentiable with respect to
        any token embedding."""
        return set(STAGES) <= set(self.differentiable_stages)

    def encode_text(self, class_name: str, template: str = DEFAULT_PROMPT_TEMPLATE):
        raise NotImplementedError

    def encode(self, tokens: TokenEmbeddingSet) -> np.ndarray:
        raise NotImplementedError

    def generate(self, z: np.ndarray, text_embedding: np.ndarray, cfg: GenConfig | None = None) -> np.ndarray:
        raise NotImplementedError

    def classify(self, image: np.ndarray) -> ClassifierOutput:
        raise NotImplementedError

    # VJPs, defined for stages declared differentiable:

    def classify_vjp(self, image: np.ndarray, grad_logits: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def generate_vjp(self, z: np.ndarray, text_embedding: np.ndarray, grad_image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def encode_vjp(self, tokens: TokenEmbeddingSet, grad_text_embedding: np.ndarray) -> np.ndarray:
        """Gradient with respect to the class-token embedding."""
        raise NotImplementedError


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """1-D bilinear interpolation matrix (n_out x n_in), half-pixel centers,
    no antialiasing. Rows sum to 1, so the operator and its transpose give an
    exactly matching forward/VJP pair."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    scale = n_in / n_out
    for i in range(n_out):
        src = (i + 0.5) * scale - 0.5
        i0 = int(np.floor(src))
        w = src - i0
        lo = min(max(i0, 0), n_in - 1)
        hi = min(max(i0 + 1, 0), n_in - 1)
        m[i, lo] += 1.0 - w
        m[i, hi] += w
    return m


def _apply_separable(mh: np.ndarray, image: np.ndarray, mw: np.ndarray) -> np.ndarray:
    """Per-channel mh @ image @ mw.T for an H x W x C image."""
    t = np.tensordot(mh, image, axes=(1, 0))  # (h_out, W, C)
    return np.tensordot(t, mw, axes=(1, 1)).transpose(0, 2, 1)  # (h_out, w_out, C)


def resize_bilinear(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize an H x W x C image with separable bilinear interpolation."""
    rh = bilinear_matrix(image.shape[0], size[0])
    rw = bilinear_matrix(image.shape[1], size[1])
    return _apply_separable(rh, np.asarray(image, dtype=np.float64), rw)


@dataclass(frozen=True)
class ToyDims:
    token_dim: int = 12
    text_dim: int = 16
    latent_dim: int = 8
    resolution: tuple[int, int] = (16, 16)
    channels: int = 3
    classifier_resolution: tuple[int, int] = (24, 24)
    pool_grid: int = 12
    n_classes: int = 10

    def __post_init__(self):
        for name in ("token_dim", "text_dim", "latent_dim", "channels", "pool_grid", "n_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("resolution", "classifier_resolution"):
            h, w = getattr(self, name)
            if h < 1 or w < 1:
                raise ValueError(f"{name} must be positive, got {(h, w)}")
        ch, cw = self.classifier_resolution
        if ch % self.pool_grid or cw % self.pool_grid:
            raise ValueError(
                f"classifier_resolution {self.classifier_resolution} must be divisible "
                f"by pool_grid {self.pool_grid}"
            )


# Scale constants for the toy stack, chosen so that unperturbed generations
# are mostly classified correctly while pixel budgets around 0.03-0.2 sit in
# the hard-but-reachable attack regime.
_GEN_TEXT_SCALE = 10.0
_GEN_Z_SCALE = 1.3
_GEN_BIAS_SCALE = 1.0
_LOGIT_SCALE = 26.0
_CALIB_SAMPLES = 24


class ToyStack(ModelStack):
    """Seeded closed-form backend; see the module docstring.

    All weights are frozen at construction, every call is a pure function
    of its arguments, and identical seeds give bit-identical stacks.
    """

    name = "toy"
    differentiable_stages = frozenset(STAGES)
    concurrency_safe = True

    def __init__(self, seed: int = 0, dims: ToyDims | None = None,
                 class_names: list[str] | None = None):
        dims = dims or ToyDims()
        if class_names is None:
            if dims.n_classes == len(DEFAULT_CLASSES):
                class_names = list(DEFAULT_CLASSES)
            else:
                class_names = [f"class{i}" for i in range(dims.n_classes)]
        if len(class_names) != dims.n_classes:
            raise ValueError(
                f"{len(class_names)} class names for n_classes={dims.n_classes}"
            )
        self.seed = int(seed)
        self.dims = dims
        self.class_names = list(class_names)
        self.n_classes = dims.n_classes
        self.token_dim = dims.token_dim
        self.latent_dim = dims.latent_dim
        self.gen_config = GenConfig(
            resolution=dims.resolution,
            classifier_input_resolution=dims.classifier_resolution,
        )

        h, w = dims.resolution
        n_pix = h * w * dims.channels
        gen_rng = _rng(self.seed, "generator")
        self.gen_w_z = gen_rng.normal(0.0, _GEN_Z_SCALE / np.sqrt(dims.latent_dim), (n_pix, dims.latent_dim))
        self.gen_w_text = gen_rng.normal(0.0, _GEN_TEXT_SCALE / np.sqrt(dims.text_dim), (n_pix, dims.text_dim))
        self.gen_bias = gen_rng.normal(0.0, _GEN_BIAS_SCALE, n_pix)

        ch, cw = dims.classifier_resolution
        self.resize_h = bilinear_matrix(h, ch)
        self.resize_w = bilinear_matrix(w, cw)
        self.pool_h = self._pool_matrix(ch, dims.pool_grid)
        self.pool_w = self._pool_matrix(cw, dims.pool_grid)
        # resize and mean-pool are both linear, so the classifier folds them
        # into one operator pair per axis
        self.feat_h = self.pool_h @ self.resize_h
        self.feat_w = self.pool_w @ self.resize_w

        self._token_cache: dict[str, np.ndarray] = {}
        self._mixer_cache: dict[int, np.ndarray] = {}

        self.cls_weight, self.cls_bias = self._calibrate_classifier()

    @staticmethod
    def _pool_matrix(n_in: int, grid: int) -> np.ndarray:
        patch = n_in // grid
        m = np.zeros((grid, n_in), dtype=np.float64)
        for g in range(grid):
            m[g, g * patch:(g + 1) * patch] = 1.0 / patch
        return m

    # --- text encoding ---------------------------------------------------

    def token_embedding(self, token: str) -> np.ndarray:
        if token not in self._token_cache:
            rng = _rng(self.seed, "token", token)
            self._token_cache[token] = _frozen(rng.standard_normal(self.dims.token_dim))
        return self._token_cache[token]

    def _mixer(self, position: int) -> np.ndarray:
        if position not in self._mixer_cache:
            rng = _rng(self.seed, "mixer", position)
            m = rng.normal(0.0, 1.0 / np.sqrt(self.dims.token_dim),
                           (self.dims.text_dim, self.dims.token_dim))
            self._mixer_cache[position] = _frozen(m)
        return self._mixer_cache[position]

    def encode_text(self, class_name: str, template: str = DEFAULT_PROMPT_TEMPLATE):
        """Tokenize the prompt and embed each token.

        Returns (token list, TokenEmbeddingSet) with class_index pointing at
        the first token of the class name. Multi-token class names trigger a
        warning; only the first token is tracked for optimization.
        """
        class_name = class_name.strip()
        if not class_name:
            raise ValueError("class name must be non-empty")
        template_words = template.split()
        if template_words.count("{class}") != 1:
            raise ValueError(
                "template must contain the {class} placeholder exactly once, "
                f"as a standalone word: {template!r}"
            )
        placeholder = template_words.index("{class}")
        name_tokens = [t.lower() for t in class_name.split()]
        if len(name_tokens) > 1:
            warnings.warn(
                f"class name {class_name!r} tokenizes to {len(name_tokens)} tokens; "
                "optimizing the first one",
                stacklevel=2,
            )
        tokens = (
            [t.lower() for t in template_words[:placeholder]]
            + name_tokens
            + [t.lower() for t in template_words[placeholder + 1:]]
        )
        embeddings = np.stack([self.token_embedding(t) for t in tokens])
        tes = TokenEmbeddingSet(
            embeddings=embeddings,
            class_index=placeholder,
            original_class_embedding=embeddings[placeholder].copy(),
        )
        return tokens, tes

    def encode(self, tokens: TokenEmbeddingSet) -> np.ndarray:
        k = tokens.n_tokens
        out = np.zeros(self.dims.text_dim, dtype=np.float64)
        for pos in range(k):
            out += self._mixer(pos) @ tokens.embeddings[pos]
        return out / k

    def encode_vjp(self, tokens: TokenEmbeddingSet, grad_text_embedding: np.ndarray) -> np.ndarray:
        return (self._mixer(tokens.class_index).T @ np.asarray(grad_text_embedding)) / tokens.n_tokens

    # --- generation -------------------------------------------------------

    def _pre_activation(self, z: np.ndarray, text_embedding: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.dims.latent_dim,):
            raise ValueError(
                f"latent shape mismatch: expected ({self.dims.latent_dim},), got {z.shape}"
            )
        text_embedding = np.asarray(text_embedding, dtype=np.float64)
        if text_embedding.shape != (self.dims.text_dim,):
            raise ValueError(
                f"text embedding shape mismatch: expected ({self.dims.text_dim},), got {text_embedding.shape}"
            )
        return self.gen_w_z @ z + self.gen_w_text @ text_embedding + self.gen_bias

    def generate(self, z: np.ndarray, text_embedding: np.ndarray, cfg: GenConfig | None = None) -> np.ndarray:
        if cfg is not None and cfg.resolution != self.dims.resolution:
            raise ValueError(
                f"toy generator is fixed at resolution {self.dims.resolution}, "
                f"requested {cfg.resolution}"
            )
        u = self._pre_activation(z, text_embedding)
        h, w = self.dims.resolution
        return _sigmoid(u).reshape(h, w, self.dims.channels)

    def generate_vjp(self, z: np.ndarray, text_embedding: np.ndarray, grad_image: np.ndarray) -> np.ndarray:
        s = _sigmoid(self._pre_activation(z, text_embedding))
        grad_u = s * (1.0 - s) * np.asarray(grad_image, dtype=np.float64).ravel()
        return self.gen_w_text.T @ grad_u

    # --- classification ---------------------------------------------------

    def _check_image(self, image: np.ndarray) -> np.ndarray:
        image = np.asarray(image, dtype=np.float64)
        h, w = self.dims.resolution
        if image.shape != (h, w, self.dims.channels):
            raise ValueError(
                f"image shape mismatch: expected {(h, w, self.dims.channels)}, got {image.shape}"
            )
        return image

    def _features(self, image: np.ndarray) -> np.ndarray:
        return _apply_separable(self.feat_h, image, self.feat_w).ravel()

    def classify(self, image: np.ndarray) -> ClassifierOutput:
        image = self._check_image(image)
        logits = self.cls_weight @ self._features(image) + self.cls_bias
        return ClassifierOutput.from_logits(logits)

    def classify_vjp(self, image: np.ndarray, grad_logits: np.ndarray) -> np.ndarray:
        image = self._check_image(image)
        grad_feat = self.cls_weight.T @ np.asarray(grad_logits, dtype=np.float64)
        g = self.dims.pool_grid
        grad_pooled = grad_feat.reshape(g, g, self.dims.channels)
        # transpose of the feature map: feat_h.T @ grad @ feat_w
        t = np.tensordot(self.feat_h, grad_pooled, axes=(0, 0))  # (H, g, C)
        return np.tensordot(t, self.feat_w, axes=(1, 0)).transpose(0, 2, 1)

    def _calibrate_classifier(self) -> tuple[np.ndarray, np.ndarray]:
        # Nearest-centroid rows over prototype generations per class, so the
        # frozen classifier recognizes the frozen generator's class outputs.
        calib_rng = _rng(self.seed, "calibration")
        z_samples = calib_rng.standard_normal((_CALIB_SAMPLES, self.dims.latent_dim))
        protos = []
        for name in self.class_names:
            _, tes = self.encode_text(name)
            text_embedding = self.encode(tes)
            feats = [self._features(self.generate(z, text_embedding)) for z in z_samples]
            protos.append(np.mean(feats, axis=0))
        protos = np.stack(protos)
        weight = _LOGIT_SCALE * protos
        bias = -0.5 * _LOGIT_SCALE * np.sum(protos * protos, axis=1)
        return weight, bias


def _sigmoid(u: np.ndarray) -> np.ndarray:
    out = np.empty_like(u)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


def make_toy_stack(seed: int = 0, dims: ToyDims | dict | None = None,
                   class_names: list[str] | None = None) -> ToyStack:
    """Build the deterministic toy backend; dims may be a ToyDims or a dict
    of overrides for its fields."""
    if isinstance(dims, dict):
        dims = ToyDims(**{k: tuple(v) if isinstance(v, list) else v for k, v in dims.items()})
    return ToyStack(seed=seed, dims=dims, class_names=class_names)


_BACKENDS = {"toy": make_toy_stack}


def get_backend_factory(name: str):
    """Look up a registered backend factory by name."""
    try:
        return _BACKENDS[name]
    except KeyError:
        raise ValueError(
            f"unknown backend {name!r}; available: {sorted(_BACKENDS)}"
        ) from None


def get_backend(name: str, **params) -> ModelStack:
    """Construct a backend by name. Only "toy" ships built in; other names
    raise with the list of known backends so optional plugins can fail
    cleanly when absent."""
    return get_backend_factory(name)(**params)


def register_backend(name: str, factory) -> None:
    """Register a plugin backend factory under a config-addressable name."""
    _BACKENDS[name] = factory
