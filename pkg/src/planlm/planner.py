"""Sentence-level planner predicting logits over writing actions for the next sentence."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .corpus import VOCAB_SIZE, Batch, Document, SegmentedCorpus
from .nn import Block, Embedding, LayerNorm, Linear, Module, _param
from .optim import Adam
from .tensor import Tape, Tensor, cross_entropy, matmul, no_grad

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    pass


@dataclass
class PlannerInput:
    """Tokens of the visible history and the pooling matrix producing shifted sentence vectors.

    Row ``r`` of a document predicts the action of document sentence
    ``offset + r`` from sentences ``offset .. offset + r - 1``.
    """

    tokens: np.ndarray      # (B, L) token ids, 0-padded
    pool: np.ndarray        # (B, m, L) row r averages tokens of sentence offset + r - 1
    offsets: np.ndarray     # (B,) first predicted document sentence
    n_rows: np.ndarray      # (B,) valid rows per document


def build_input(docs: list[Document], n_predict: list[int], max_sentences: int = 64,
                dtype=np.float32) -> PlannerInput:
    """Planner input predicting sentences ``0 .. n_predict[b]-1`` of each document.

    Only the last ``max_sentences`` of those are kept; earlier history is dropped.
    """
    offsets = np.array([max(0, n - max_sentences) for n in n_predict], dtype=np.int64)
    rows = np.array([n - o for n, o in zip(n_predict, offsets)], dtype=np.int64)
    m = int(rows.max())
    spans = []
    for doc, n, off in zip(docs, n_predict, offsets):
        hist = doc.sentence_spans[off:n - 1] if n > 1 else []
        spans.append(hist)
    lengths = [s[-1][1] - s[0][0] if s else 1 for s in spans]
    L = max(lengths)
    tokens = np.zeros((len(docs), L), dtype=np.int64)
    pool = np.zeros((len(docs), m, L), dtype=dtype)
    for b, (doc, hist) in enumerate(zip(docs, spans)):
        if not hist:
            continue
        base = hist[0][0]
        seg = doc.tokens[base:hist[-1][1]]
        tokens[b, :len(seg)] = seg
        for r, (a, e) in enumerate(hist, start=1):
            pool[b, r, a - base:e - base] = 1.0 / (e - a)
    return PlannerInput(tokens, pool, offsets, rows)


class PlannerModel(Module):
    """Mean-pooled sentence vectors contextualized by a causal transformer.

    Row 0 sees only a learned start vector; row j sees the start vector and
    sentences ``1..j``-shifted history, so logits for sentence j never depend on
    sentence j itself or anything after it.
    """

    def __init__(self, K: int, d: int = 128, n_layers: int = 2, n_heads: int = 4,
                 max_sentences: int = 64, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.K = K
        self.d = d
        self.max_sentences = max_sentences
        self.token_embed = Embedding(VOCAB_SIZE, d, rng)
        self.start = _param(rng.normal(0.0, 0.02, (1, d)))
        self.position = Embedding(max_sentences, d, rng)
        self.blocks = [Block(d, n_heads, rng, n_layers) for _ in range(n_layers)]
        self.ln_f = LayerNorm(d)
        self.head = Linear(d, K, rng, zero=True)

    @property
    def config(self) -> dict:
        return {"K": self.K, "d": self.d, "n_layers": len(self.blocks),
                "n_heads": self.blocks[0].attn.n_heads, "max_sentences": self.max_sentences}

    def __call__(self, inp: PlannerInput) -> Tensor:
        """Logits (B, m, K); rows past ``inp.n_rows`` are padding."""
        b, m, _ = inp.pool.shape
        emb = self.token_embed(inp.tokens)
        x = matmul(Tensor(inp.pool.astype(emb.dtype, copy=False)), emb)
        first = np.zeros((m, 1), dtype=emb.dtype)
        first[0, 0] = 1.0
        x = x + matmul(Tensor(first), self.start)
        x = x + self.position(np.arange(m))
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_f(x))

    def plan_logits(self, doc: Document, j: int) -> np.ndarray:
        """Logit row for 0-based sentence ``j`` of ``doc`` given sentences before it."""
        with no_grad():
            out = self(build_input([doc], [j + 1], self.max_sentences))
        inp_rows = min(j + 1, self.max_sentences)
        return out.data[0, inp_rows - 1].copy()

    def next_logits(self, doc: Document) -> np.ndarray:
        """Logits for the sentence that would follow all sentences of ``doc``."""
        n = doc.n_sentences + 1
        with no_grad():
            out = self(_append_empty(doc, self.max_sentences))
        return out.data[0, min(n, self.max_sentences) - 1].copy()


def _append_empty(doc: Document, max_sentences: int) -> PlannerInput:
    # predict row n for a document that has n sentences: history = all of them
    n = doc.n_sentences + 1
    off = max(0, n - max_sentences)
    hist = doc.sentence_spans[off:]
    base = hist[0][0]
    seg = doc.tokens[base:hist[-1][1]]
    m = n - off
    pool = np.zeros((1, m, len(seg)), dtype=np.float32)
    for r, (a, e) in enumerate(hist, start=1):
        pool[0, r, a - base:e - base] = 1.0 / (e - a)
    return PlannerInput(seg[None].copy(), pool, np.array([off]), np.array([m]))


def document_input(corpus: SegmentedCorpus, doc_ids: list[int], max_sentences: int) -> tuple:
    """Planner input over whole documents plus the oracle targets per row (-1 padded)."""
    docs = [corpus.documents[i] for i in doc_ids]
    n_pred = [d.n_sentences for d in docs]
    inp = build_input(docs, n_pred, max_sentences)
    targets = np.full(inp.pool.shape[:2], -1, dtype=np.int64)
    if corpus.actions is not None:
        for b, i in enumerate(doc_ids):
            acts = corpus.actions[i][inp.offsets[b]:n_pred[b]]
            targets[b, :len(acts)] = acts
    return inp, targets


def batch_input(corpus: SegmentedCorpus, batch: Batch, max_sentences: int) -> tuple:
    """Planner input for the documents behind ``batch``.

    Returns (input, row_targets, gather) where ``gather`` (B, S, m) selects the
    logit row for every window slot.
    """
    docs = [corpus.documents[i] for i in batch.docs]
    n_pred = [int(s[s >= 0].max()) + 1 for s in batch.slots]
    inp = build_input(docs, n_pred, max_sentences)
    b, m = inp.pool.shape[:2]
    targets = np.full((b, m), -1, dtype=np.int64)
    gather = np.zeros((b, batch.slots.shape[1], m), dtype=inp.pool.dtype)
    for r, doc_id in enumerate(batch.docs):
        off = inp.offsets[r]
        if corpus.actions is not None:
            acts = corpus.actions[doc_id][off:n_pred[r]]
            targets[r, :len(acts)] = acts
        for s, sent in enumerate(batch.slots[r]):
            if sent >= 0:
                row = sent - off
                if row < 0:
                    raise ValueError("slot sentence precedes planner history window")
                gather[r, s, row] = 1.0
    return inp, targets, gather


def slot_logits(planner: PlannerModel, corpus: SegmentedCorpus, batch: Batch) -> tuple[Tensor, Tensor, np.ndarray]:
    """Planner logits per window slot (B, S, K), full row logits, and row targets."""
    inp, targets, gather = batch_input(corpus, batch, planner.max_sentences)
    rows = planner(inp)
    return matmul(Tensor(gather.astype(rows.dtype, copy=False)), rows), rows, targets


def nap_loss(planner: PlannerModel, inp: PlannerInput, targets: np.ndarray) -> Tensor:
    """Mean next-action cross-entropy over all valid sentence rows."""
    return cross_entropy(planner(inp), targets)


def pretrain_planner(planner: PlannerModel, corpus: SegmentedCorpus, steps: int,
                     lr: float = 1e-4, batch_size: int = 32, seed: int = 0,
                     log_every: int = 0, on_log=None) -> list[float]:
    """Next Action Prediction pretraining on training documents. Returns the loss trace."""
    if corpus.actions is None:
        raise ValueError("corpus has no oracle actions; fit the action vocabulary first")
    docs = corpus.indices("train")
    rng = np.random.default_rng([seed, 11])
    opt = Adam({"planner": list(planner.named_parameters())}, lr)
    losses = []
    order: list[int] = []
    for step in range(steps):
        if len(order) < batch_size:
            order.extend(rng.permutation(docs).tolist())
        ids, order = order[:batch_size], order[batch_size:]
        inp, targets = document_input(corpus, ids, planner.max_sentences)
        with Tape() as tape:
            loss = nap_loss(planner, inp, targets)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"planner pretraining diverged at step {step}: loss={value}")
        tape.backward(loss)
        opt.step()
        opt.zero_grad()
        losses.append(value)
        if log_every and on_log and (step + 1) % log_every == 0:
            on_log(step + 1, value)
    return losses


def evaluate_nap(planner: PlannerModel, corpus: SegmentedCorpus, split: str = "val",
                 batch_size: int = 64) -> dict:
    """Held-out NAP loss and next-action accuracy."""
    ids = corpus.indices(split)
    total_nll, total_hit, total_n = 0.0, 0, 0
    with no_grad():
        for a in range(0, len(ids), batch_size):
            inp, targets = document_input(corpus, ids[a:a + batch_size], planner.max_sentences)
            logits = planner(inp).data.astype(np.float64)
            valid = targets >= 0
            z = logits - logits.max(-1, keepdims=True)
            lse = np.log(np.exp(z).sum(-1))
            picked = np.take_along_axis(z, np.maximum(targets, 0)[..., None], -1)[..., 0]
            total_nll += float(((lse - picked) * valid).sum())
            total_hit += int(((logits.argmax(-1) == targets) & valid).sum())
            total_n += int(valid.sum())
    return {"loss": total_nll / total_n, "accuracy": total_hit / total_n, "n": total_n}
