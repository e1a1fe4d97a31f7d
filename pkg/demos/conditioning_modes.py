"""How the five conditioning modes differ, on one fixed batch (a few seconds).

For each mode this prints the mixing weights of the first sentence and
whether gradient reaches the planner logits. Hard and straight-through share
the forward pass but only straight-through passes gradient back.

    python3 demos/conditioning_modes.py
"""

import numpy as np

from planlm import ConditionedLM, SegmentedCorpus, cluster_corpus, synthetic_texts
from planlm.condlm import conditioning_weights, ntp_loss
from planlm.corpus import collate
from planlm.tensor import Tape, Tensor

texts, _ = synthetic_texts(200, seed=1)
corpus = SegmentedCorpus.from_texts(texts, seed=1)
vocab = cluster_corpus(corpus, K=4, seed=1, storage_dtype=np.float32)
lm = ConditionedLM(vocab.centroids, d_model=16, n_layers=2, n_heads=2, rng=np.random.default_rng(0))
for adapter in lm.adapters:   # move off the zero init so conditioning has an effect
    adapter.projection.weight.data[...] = np.random.default_rng(1).normal(0, 0.3, adapter.projection.weight.shape)

batch = collate(corpus, corpus.windows("train")[:2])
planner_logits = np.random.default_rng(2).normal(0, 1.5, batch.slots.shape + (vocab.K,)).astype(np.float32)

np.set_printoptions(precision=3, suppress=True)
for mode in ("hard", "st", "soft", "uniform", "oracle"):
    s = Tensor(planner_logits.copy(), requires_grad=True)
    with Tape() as tape:
        w = conditioning_weights(mode, vocab.K, logits=s, oracle=batch.oracle, mask=batch.slot_mask)
        loss = ntp_loss(lm, batch.tokens, batch.slot_index, w, batch.slot_mask)
    tape.backward(loss)
    g = 0.0 if s.grad is None else float(np.abs(s.grad).max())
    print(f"{mode:8s} weights[0,0]={w.data[0, 0]}  loss={loss.item():.4f}  max|dL/ds|={g:.2e}")
