"""Text/region embedding providers and softmax category probabilities.

Real image/text encoders stay outside the package.  Their role is an
oracle interface: embed_texts(names) and embed_region(image_ref, region).
A deterministic toy oracle ships for desk-scale runs, and a file-backed
oracle replays precomputed embeddings.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .errors import UnknownCategoryError
from .geometry import AABB2D, iou2d

DEFAULT_EMBEDDING_DIM = 64
# Logit scale applied before the softmax; unit-norm dot products are small,
# so a bare softmax would wash out to near-uniform for any sizable vocabulary.
DEFAULT_TEMPERATURE = 100.0


@dataclass(frozen=True, eq=False)
class Embedding:
    """A unit-norm feature vector."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).reshape(-1)
        n = float(np.linalg.norm(v))
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"embedding must be unit length, |v| = {n}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return len(self.values)


def normalize(v: np.ndarray) -> Embedding:
    v = np.asarray(v, dtype=float).reshape(-1)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("cannot normalize the zero vector")
    return Embedding(v / n)


@dataclass(eq=False)
class CategoryVocabulary:
    """Ordered category names with text embeddings and a base/novel split."""

    names: list[str]
    base_mask: np.ndarray
    text_embeddings: np.ndarray  # (C, d), unit rows
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        self.names = list(self.names)
        self.base_mask = np.asarray(self.base_mask, dtype=bool).reshape(-1)
        self.text_embeddings = np.asarray(self.text_embeddings, dtype=float)
        c = len(self.names)
        if self.base_mask.shape != (c,):
            raise ValueError("base_mask length must match names")
        if not (1 <= int(self.base_mask.sum()) < c):
            raise ValueError("base categories must be a nonempty strict subset")
        if self.text_embeddings.shape[0] != c:
            raise ValueError("one text embedding per category is required")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.text_embeddings.shape[1]

    def is_base(self, category: int) -> bool:
        return bool(self.base_mask[category])

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise UnknownCategoryError(f"category {name!r} not in vocabulary") from None

    def base_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.base_mask) if b]

    def novel_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.base_mask) if not b]


@dataclass(frozen=True, eq=False)
class ClassProbabilities:
    """A probability distribution over the vocabulary."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float).reshape(-1)
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be nonnegative and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    @property
    def max_prob(self) -> float:
        return float(self.probs.max())


def classify(region_feature: Embedding, vocab: CategoryVocabulary) -> ClassProbabilities:
    """softmax(temperature * dot(feature, text_c)) over the vocabulary."""
    if region_feature.dim != vocab.dim:
        raise ValueError(
            f"feature dim {region_feature.dim} != vocabulary dim {vocab.dim}"
        )
    logits = vocab.temperature * (vocab.text_embeddings @ region_feature.values)
    logits -= logits.max()
    e = np.exp(logits)
    return ClassProbabilities(e / e.sum())


def _stable_rng(*parts) -> np.random.Generator:
    """A generator seeded from a stable digest of the given parts."""
    key = "|".join(str(p) for p in parts).encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def _region_key(region: AABB2D) -> str:
    return ",".join(f"{v:.6f}" for v in region.as_array())


class ToyOracle:
    """Deterministic stand-in for a pretrained image/text encoder.

    Text embeddings are seeded unit vectors on the d-sphere, one per name.
    Region embeddings look up the tagged ground-truth region with the best
    2D overlap and return that category's text embedding plus seeded noise;
    untagged regions give a pure-noise direction.
    """

    def __init__(self, seed: int, vocab_names: list[str], noise_sigma: float = 0.0,
                 dim: int = DEFAULT_EMBEDDING_DIM, tag_match_iou: float = 0.25):
        if noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        self.seed = int(seed)
        self.vocab_names = list(vocab_names)
        self.noise_sigma = float(noise_sigma)
        self.dim = int(dim)
        self.tag_match_iou = float(tag_match_iou)
        self._tags: dict[str, list[tuple[AABB2D, str]]] = {}

    # -- text side ----------------------------------------------------------

    def text_embedding(self, name: str) -> Embedding:
        g = _stable_rng(self.seed, "text", self.dim, name)
        return normalize(g.standard_normal(self.dim))

    def embed_texts(self, names: list[str]) -> list[Embedding]:
        return [self.text_embedding(n) for n in names]

    # -- region side --------------------------------------------------------

    def tag_region(self, image_ref: str, region: AABB2D, category: str) -> None:
        """Declare that a region of an image shows an object of a category."""
        if category not in self.vocab_names:
            raise UnknownCategoryError(f"cannot tag unknown category {category!r}")
        self._tags.setdefault(image_ref, []).append((region, category))

    def clear_tags(self, image_ref: str | None = None) -> None:
        if image_ref is None:
            self._tags.clear()
        else:
            self._tags.pop(image_ref, None)

    def _lookup(self, image_ref: str, region: AABB2D) -> str | None:
        best_iou, best_cat = 0.0, None
        for tagged, cat in self._tags.get(image_ref, []):
            v = iou2d(region, tagged)
            if v > best_iou:
                best_iou, best_cat = v, cat
        return best_cat if best_iou >= self.tag_match_iou else None

    def embed_region(self, image_ref: str, region: AABB2D) -> Embedding:
        cat = self._lookup(image_ref, region)
        g = _stable_rng(self.seed, "region", image_ref, _region_key(region), cat)
        noise = g.standard_normal(self.dim)
        if cat is None:
            return normalize(noise)
        base = self.text_embedding(cat).values
        if self.noise_sigma == 0.0:
            return Embedding(base)
        return normalize(base + self.noise_sigma * noise)

    def noisy_category_embedding(self, name: str, sigma: float,
                                 rng: np.random.Generator) -> Embedding:
        """A category embedding perturbed with caller-supplied randomness."""
        if name not in self.vocab_names:
            raise UnknownCategoryError(f"unknown category {name!r}")
        v = self.text_embedding(name).values
        if sigma <= 0:
            return Embedding(v)
        return normalize(v + sigma * rng.standard_normal(self.dim))

    def random_unit(self, rng: np.random.Generator) -> Embedding:
        return normalize(rng.standard_normal(self.dim))


def toy_oracle(seed: int, vocab_names: list[str], noise_sigma: float = 0.0,
               dim: int = DEFAULT_EMBEDDING_DIM, tag_match_iou: float = 0.25) -> ToyOracle:
    return ToyOracle(seed, vocab_names, noise_sigma, dim, tag_match_iou)


def build_vocabulary(names: list[str], num_base: int, oracle: ToyOracle,
                     temperature: float = DEFAULT_TEMPERATURE) -> CategoryVocabulary:
    """Vocabulary whose first num_base names are the base split."""
    mask = np.zeros(len(names), dtype=bool)
    mask[:num_base] = True
    rows = np.stack([e.values for e in oracle.embed_texts(names)])
    return CategoryVocabulary(list(names), mask, rows, temperature)


# ---------------------------------------------------------------------------
# File-backed embeddings: precomputed text vectors and a region replay cache.
# ---------------------------------------------------------------------------


def save_text_embeddings(path: str, names: list[str], vectors: np.ndarray) -> None:
    vecs = np.asarray(vectors, dtype=float)
    doc = {"dim": int(vecs.shape[1]), "names": list(names), "vectors": vecs.tolist()}
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def load_text_embeddings(path: str) -> tuple[list[str], np.ndarray]:
    with open(path) as f:
        doc = json.load(f)
    vecs = np.asarray(doc["vectors"], dtype=float)
    if vecs.shape != (len(doc["names"]), doc["dim"]):
        raise ValueError(f"{path}: vector block does not match names/dim")
    return list(doc["names"]), vecs


class RegionCacheOracle:
    """Replays stored region embeddings; text side comes from a vector file."""

    def __init__(self, names: list[str], text_vectors: np.ndarray,
                 region_cache: dict[str, np.ndarray]):
        self._names = list(names)
        self._text = {n: normalize(v) for n, v in zip(names, np.asarray(text_vectors))}
        self._cache = {k: normalize(v) for k, v in region_cache.items()}

    @staticmethod
    def cache_key(image_ref: str, region: AABB2D) -> str:
        return f"{image_ref}|{_region_key(region)}"

    def embed_texts(self, names: list[str]) -> list[Embedding]:
        out = []
        for n in names:
            if n not in self._text:
                raise UnknownCategoryError(f"no stored embedding for {n!r}")
            out.append(self._text[n])
        return out

    def embed_region(self, image_ref: str, region: AABB2D) -> Embedding:
        key = self.cache_key(image_ref, region)
        if key not in self._cache:
            raise KeyError(f"region embedding not cached: {key}")
        return self._cache[key]


def save_region_cache(path: str, entries: dict[str, np.ndarray]) -> None:
    doc = {k: np.asarray(v, dtype=float).tolist() for k, v in entries.items()}
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True)
        f.write("\n")


def load_region_cache(path: str) -> dict[str, np.ndarray]:
    with open(path) as f:
        doc = json.load(f)
    return {k: np.asarray(v, dtype=float) for k, v in doc.items()}
