"""Linear probes on frozen LM representations around the adapter merge point."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field

import numpy as np

from .condlm import ConditionedLM
from .corpus import VOCAB_SIZE, SegmentedCorpus, iterate_batches
from .evaluation import eval_weights
from .nn import Linear
from .optim import Adam
from .planner import PlannerModel
from .tensor import Tape, Tensor, cross_entropy, no_grad


class ProbeError(ValueError):
    pass


class Location(str, enum.Enum):
    PRE_MERGE = "pre_merge"     # adapter input: mixed action embedding of the sentence
    POST_MERGE = "post_merge"   # attention aggregate after the projected action vector is added


@dataclass
class ProbeSpec:
    location: Location
    layer: int
    distance: int = 1
    train_steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 256

    def __post_init__(self):
        self.location = Location(self.location)
        if self.distance < 1:
            raise ProbeError("probe distance must be >= 1")

    @property
    def key(self) -> str:
        return f"{self.location.value}/{self.layer}/{self.distance}"


@dataclass
class Representations:
    tokens: np.ndarray                        # (N, W)
    reps: dict[tuple[str, int], np.ndarray]   # (location, layer) -> (N, W, dim)

    def pairs(self, location, layer: int, distance: int) -> tuple[np.ndarray, np.ndarray]:
        """Representation at p with the token at p + distance; positions past the window are skipped."""
        x = self.reps[(Location(location).value, layer)]
        w = self.tokens.shape[1]
        if distance >= w:
            return np.zeros((0, x.shape[-1]), dtype=x.dtype), np.zeros(0, dtype=np.int64)
        feats = x[:, :w - distance].reshape(-1, x.shape[-1])
        targets = self.tokens[:, distance:].reshape(-1)
        return feats, targets


def extract_representations(lm: ConditionedLM, planner: PlannerModel | None, corpus: SegmentedCorpus,
                            split: str = "val", mode="soft", max_windows: int | None = None,
                            batch_size: int = 32) -> Representations:
    """Run the frozen model over ``split`` and keep both probe locations of every adapter layer."""
    windows = corpus.windows(split)
    if max_windows is not None:
        windows = windows[:max_windows]
    if not windows:
        raise ProbeError(f"split {split!r} has no windows")
    toks, store = [], {}
    with no_grad():
        for batch in iterate_batches(corpus, windows, batch_size):
            w = eval_weights(lm, planner, corpus, batch, mode)
            cap: list = []
            lm(batch.tokens, batch.slot_index, w, batch.slot_mask, capture=cap)
            toks.append(batch.tokens)
            for c in cap:
                for loc in Location:
                    store.setdefault((loc.value, c["layer"]), []).append(c[loc.value].data.copy())
    return Representations(np.concatenate(toks), {k: np.concatenate(v) for k, v in store.items()})


@dataclass
class LinearProbe:
    mean: np.ndarray
    scale: np.ndarray
    weight: np.ndarray     # (dim, V)
    bias: np.ndarray       # (V,)

    def logits(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mean) / self.scale) @ self.weight + self.bias

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        if len(y) == 0:
            raise ProbeError("no pairs to score")
        return float((self.logits(x).argmax(-1) == y).mean())


def train_probe(x: np.ndarray, y: np.ndarray, steps: int = 2000, lr: float = 1e-3,
                batch_size: int = 256, seed: int = 0, n_classes: int = VOCAB_SIZE) -> LinearProbe:
    """Softmax regression from representations to token ids.

    Features are standardized and the bias starts at the log class prior.
    """
    if len(y) == 0:
        raise ProbeError("cannot train a probe on an empty pair set")
    x = np.asarray(x, dtype=np.float32)
    mean = x.mean(0)
    scale = x.std(0) + 1e-6
    xs = (x - mean) / scale
    rng = np.random.default_rng([seed, 61])
    head = Linear(x.shape[1], n_classes, rng, zero=True)
    # start from the training-split class prior so an early stop scores at the majority baseline
    counts = np.bincount(y, minlength=n_classes) + 1e-2
    head.bias.data[...] = np.log(counts / counts.sum())
    opt = Adam({"probe": list(head.named_parameters())}, lr)
    n = len(y)
    for _ in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        with Tape() as tape:
            loss = cross_entropy(head(Tensor(xs[idx])), y[idx])
        tape.backward(loss)
        opt.step()
        opt.zero_grad()
    return LinearProbe(mean, scale, head.weight.data.copy(), head.bias.data.copy())


def majority_baseline(y_train: np.ndarray, y_eval: np.ndarray) -> float:
    top = np.bincount(y_train, minlength=VOCAB_SIZE).argmax()
    return float((y_eval == top).mean())


@dataclass
class ProbeReport:
    accuracy: dict[str, float] = field(default_factory=dict)   # "location/layer/distance"
    chance: dict[str, float] = field(default_factory=dict)     # distance -> majority baseline

    def get(self, location, layer: int, distance: int) -> float:
        return self.accuracy[f"{Location(location).value}/{layer}/{distance}"]

    def matrix(self, layers, distances) -> dict[str, list[list[float]]]:
        """location -> [layer][distance] accuracy grid."""
        return {loc.value: [[self.get(loc, l, d) for d in distances] for l in layers] for loc in Location}

    def to_json(self) -> str:
        return json.dumps({"accuracy": self.accuracy, "chance": self.chance}, sort_keys=True, indent=2)


def run_probes(lm: ConditionedLM, planner: PlannerModel | None, corpus: SegmentedCorpus,
               distances=(1, 2, 4, 8), layers=None, mode="soft", train_split: str = "train",
               eval_split: str = "val", max_train_windows: int | None = 200,
               max_eval_windows: int | None = 100, steps: int = 2000, lr: float = 1e-3,
               seed: int = 0) -> ProbeReport:
    """Probe every (location, adapter layer, distance) combination."""
    layers = list(lm.adapter_layers if layers is None else layers)
    train = extract_representations(lm, planner, corpus, train_split, mode, max_train_windows)
    held = extract_representations(lm, planner, corpus, eval_split, mode, max_eval_windows)
    report = ProbeReport()
    for d in distances:
        for layer in layers:
            for loc in Location:
                spec = ProbeSpec(loc, layer, d, steps, lr)
                xt, yt = train.pairs(loc, layer, d)
                xe, ye = held.pairs(loc, layer, d)
                probe = train_probe(xt, yt, spec.train_steps, spec.lr, spec.batch_size, seed)
                report.accuracy[spec.key] = probe.accuracy(xe, ye)
        _, yt = train.pairs(Location.POST_MERGE, layers[0], d)
        _, ye = held.pairs(Location.POST_MERGE, layers[0], d)
        report.chance[str(d)] = majority_baseline(yt, ye)
    return report
