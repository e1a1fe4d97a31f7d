"""Writing actions: hashed sentence embeddings, k-means++ clustering, oracle labels."""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .corpus import Document, SegmentedCorpus


class ActionError(ValueError):
    pass


class SentenceEncoder:
    """Deterministic stand-in for a pretrained sentence encoder.

    Character trigrams (with start/end markers) are hashed into ``hash_dim``
    buckets, weighted by term frequency, projected with a fixed seeded Gaussian
    matrix and L2-normalized.
    """

    def __init__(self, hash_dim: int = 4096, dim: int = 64, seed: int = 0):
        self.hash_dim = hash_dim
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng([seed, 0x5E7])
        self.projection = rng.normal(0.0, 1.0 / np.sqrt(dim), (hash_dim, dim))

    @property
    def config(self) -> dict:
        return {"hash_dim": self.hash_dim, "dim": self.dim, "seed": self.seed}

    @property
    def fingerprint(self) -> str:
        blob = json.dumps({"encoder": "trigram-hash-v1", **self.config}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def features(self, text: str) -> tuple[np.ndarray, np.ndarray]:
        """Hashed trigram bucket ids and their term frequencies."""
        text = text.strip()
        if not text:
            raise ActionError("cannot encode an empty sentence")
        data = b"\x02" + text.encode("utf-8") + b"\x03"
        ids = [zlib.crc32(data[i:i + 3]) % self.hash_dim for i in range(len(data) - 2)]
        buckets, counts = np.unique(np.asarray(ids, dtype=np.int64), return_counts=True)
        return buckets, counts / counts.sum()

    def encode(self, text: str) -> np.ndarray:
        buckets, tf = self.features(text)
        z = tf @ self.projection[buckets]
        return z / np.linalg.norm(z)

    def encode_many(self, texts) -> np.ndarray:
        return np.stack([self.encode(t) for t in texts]) if texts else np.zeros((0, self.dim))


def encode_sentence(text: str, encoder: SentenceEncoder | None = None) -> np.ndarray:
    return (encoder or SentenceEncoder()).encode(text)


def kmeans_objective(x: np.ndarray, centroids: np.ndarray) -> float:
    return float(_sq_dists(x, centroids).min(axis=1).sum())


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_plus_plus(x: np.ndarray, k: int, rng: np.random.Generator,
                     n_trials: int | None = None) -> np.ndarray:
    """Greedy k-means++ seeding: each step keeps the best of ``n_trials`` D^2 draws."""
    n = len(x)
    n_trials = n_trials or 2 + int(np.log(k))
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None]).ravel()
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            cand = rng.choice(n, size=n_trials)
        else:
            cand = np.searchsorted(np.cumsum(closest), rng.random(n_trials) * total)
            cand = np.minimum(cand, n - 1)
        d = np.minimum(closest[None, :], _sq_dists(x[cand], x))
        best = int(np.argmin(d.sum(1)))
        centers.append(x[cand[best]])
        closest = d[best]
    return np.array(centers)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    history: list[float]     # objective after seeding, then after every Lloyd iteration
    n_iter: int


def lloyd(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if k < 1 or n < k:
        raise ActionError(f"need at least K={k} points, got {n}")
    rng = np.random.default_rng(seed)
    c = kmeans_plus_plus(x, k, rng)
    d = _sq_dists(x, c)
    labels = d.argmin(1)
    history = [float(d[np.arange(n), labels].sum())]
    it = 0
    for it in range(1, max_iter + 1):
        new_c = c.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_c[j] = x[members].mean(0)
        empty = [j for j in range(k) if not (labels == j).any()]
        if empty:
            own = d[np.arange(n), labels]
            taken: set[int] = set()
            for j in empty:
                # farthest point from its current centroid
                order = np.argsort(-own, kind="stable")
                pick = next(int(i) for i in order if int(i) not in taken)
                taken.add(pick)
                new_c[j] = x[pick]
        c = new_c
        d = _sq_dists(x, c)
        new_labels = d.argmin(1)
        history.append(float(d[np.arange(n), new_labels].sum()))
        if np.array_equal(new_labels, labels) and not empty:
            labels = new_labels
            break
        labels = new_labels
    return KMeansResult(c, labels, history, it)


@dataclass
class ActionVocabulary:
    centroids: np.ndarray
    encoder: SentenceEncoder = field(default_factory=SentenceEncoder)

    def __post_init__(self):
        if self.centroids.ndim != 2 or len(self.centroids) < 2:
            raise ActionError("an action vocabulary needs K >= 2 centroids")
        if not np.isfinite(self.centroids).all():
            raise ActionError("centroids must be finite")

    @property
    def K(self) -> int:
        return len(self.centroids)

    @property
    def encoder_fingerprint(self) -> str:
        return self.encoder.fingerprint

    def assign(self, z: np.ndarray) -> int:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.centroids.shape[1],):
            raise ActionError(f"embedding dim {z.shape} != {self.centroids.shape[1]}")
        d = ((self.centroids - z) ** 2).sum(1)
        return int(np.argmin(d))

    def assign_many(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.centroids.shape[1]:
            raise ActionError(f"embedding dim {z.shape} incompatible with {self.centroids.shape}")
        # direct differences (not the expanded form) so ties and rounding match ``assign``
        out = np.empty(len(z), dtype=np.int64)
        for a in range(0, len(z), 2048):
            d = ((z[a:a + 2048, None, :] - self.centroids[None]) ** 2).sum(-1)
            out[a:a + 2048] = d.argmin(1)
        return out

    def label_text(self, text: str) -> int:
        return self.assign(self.encoder.encode(text))


def fit_kmeans(embeddings: np.ndarray, K: int, seed: int = 0,
               encoder: SentenceEncoder | None = None, max_iter: int = 100) -> ActionVocabulary:
    result = lloyd(embeddings, K, seed, max_iter)
    vocab = ActionVocabulary(result.centroids, encoder or SentenceEncoder(dim=embeddings.shape[1]))
    vocab.fit_result = result
    return vocab


def assign_action(vocab: ActionVocabulary, z: np.ndarray) -> int:
    return vocab.assign(z)


def oracle_actions(vocab: ActionVocabulary, doc: Document) -> np.ndarray:
    z = vocab.encoder.encode_many(doc.sentences())
    return vocab.assign_many(z)


def cluster_corpus(corpus: SegmentedCorpus, K: int = 32, dim: int = 64, hash_dim: int = 4096,
                   seed: int = 0, max_sentences: int | None = None,
                   storage_dtype=None) -> ActionVocabulary:
    """Fit the action vocabulary on training-split sentences and label every document.

    ``storage_dtype`` rounds the centroids through that dtype before labelling,
    so labels stay consistent with centroids reloaded from a float32 checkpoint.
    """
    encoder = SentenceEncoder(hash_dim, dim, seed)
    per_doc = [encoder.encode_many(doc.sentences()) for doc in corpus.documents]
    train = np.concatenate([per_doc[i] for i in corpus.indices("train")])
    if max_sentences is not None and len(train) > max_sentences:
        rng = np.random.default_rng([seed, 7])
        train = train[np.sort(rng.choice(len(train), max_sentences, replace=False))]
    vocab = fit_kmeans(train, K, seed, encoder)
    if storage_dtype is not None:
        vocab.centroids = vocab.centroids.astype(storage_dtype).astype(np.float64)
    corpus.actions = [vocab.assign_many(z) for z in per_doc]
    return vocab


def label_corpus(corpus: SegmentedCorpus, vocab: ActionVocabulary) -> None:
    corpus.actions = [oracle_actions(vocab, doc) for doc in corpus.documents]
