"""Perplexity, sampling with re-planning, and abstract-level metrics (ROUGE-2, edit distance,
HMM-critic latent perplexity, plan matching)."""

from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .actions import ActionVocabulary
from .condlm import ConditionedLM, ConditioningMode, conditioning_weights, next_token_targets
from .corpus import BOS, Document, SegmentedCorpus, ends_sentence, iterate_batches, sentence_breaks
from .planner import PlannerModel, slot_logits
from .tensor import Tensor, log_softmax_np, no_grad


class EvaluationError(ValueError):
    pass


# ------------------------------------------------------------------ perplexity

def perplexity_from_logprobs(logprobs) -> float:
    """exp of the mean negative log-likelihood (natural log)."""
    lp = np.asarray(logprobs, dtype=np.float64).ravel()
    if lp.size == 0:
        raise EvaluationError("no tokens to score")
    return float(np.exp(-lp.mean()))


def eval_weights(lm: ConditionedLM, planner: PlannerModel | None, corpus: SegmentedCorpus,
                 batch, mode) -> Tensor | None:
    """Conditioning weights used at evaluation: always planner-predicted (never oracle)."""
    if mode is None:
        return None
    mode = ConditioningMode.parse(mode).eval_mode
    if mode is ConditioningMode.UNIFORM:
        return conditioning_weights(mode, lm.K, oracle=batch.slots)
    if planner is None:
        raise EvaluationError(f"mode {mode.value} needs a planner")
    logits, _, _ = slot_logits(planner, corpus, batch)
    return conditioning_weights(mode, lm.K, logits=logits)


def token_logprobs(lm: ConditionedLM, planner: PlannerModel | None, corpus: SegmentedCorpus,
                   split: str = "val", mode="soft", batch_size: int = 32,
                   max_windows: int | None = None) -> np.ndarray:
    """Log-probabilities (float64) of every scored next token in ``split``."""
    windows = corpus.windows(split)
    if max_windows is not None:
        windows = windows[:max_windows]
    if not windows:
        raise EvaluationError(f"split {split!r} has no evaluation windows")
    out = []
    with no_grad():
        for batch in iterate_batches(corpus, windows, batch_size):
            w = eval_weights(lm, planner, corpus, batch, mode)
            if w is None:
                logits = lm(batch.tokens)
            else:
                logits = lm(batch.tokens, batch.slot_index, w, batch.slot_mask)
            lp = log_softmax_np(logits.data.astype(np.float64))
            targets = next_token_targets(batch.tokens)
            valid = targets >= 0
            picked = np.take_along_axis(lp, np.maximum(targets, 0)[..., None], -1)[..., 0]
            out.append(picked[valid])
    return np.concatenate(out)


def perplexity(lm: ConditionedLM, planner: PlannerModel | None, corpus: SegmentedCorpus,
               split: str = "val", mode="soft", batch_size: int = 32,
               max_windows: int | None = None) -> float:
    """Held-out perplexity with planner-predicted conditioning (``mode=None``: base LM)."""
    return perplexity_from_logprobs(token_logprobs(lm, planner, corpus, split, mode,
                                                   batch_size, max_windows))


# ------------------------------------------------------------------ generation

def document_from_bytes(data: bytes) -> Document:
    """BOS-prefixed, EOS-less document for a text still being written."""
    tokens = np.concatenate([[BOS], np.frombuffer(data, dtype=np.uint8)]).astype(np.int64)
    cuts = [0] + [b + 1 for b in sentence_breaks(data)] + [len(tokens)]
    return Document(tokens, list(zip(cuts, cuts[1:])))


@dataclass
class Generation:
    prefix: bytes
    tokens: list[int]             # generated tokens only
    plan: list[int]               # planned action per sentence, starting with the one in progress
    sentences: list[tuple[str, int]] = field(default_factory=list)   # complete generated sentences + plan

    @property
    def data(self) -> bytes:
        return bytes(t for t in self.tokens if t < 256)

    @property
    def text(self) -> str:
        return self.data.decode("utf-8", errors="replace")


def _sample(logits: np.ndarray, temperature: float, top_p: float, rng: np.random.Generator) -> int:
    if temperature <= 0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / temperature
    p = np.exp(z - z.max())
    p /= p.sum()
    if top_p < 1.0:
        order = np.argsort(-p, kind="stable")
        keep = np.cumsum(p[order]) - p[order] < top_p
        trimmed = np.zeros_like(p)
        trimmed[order[keep]] = p[order[keep]]
        p = trimmed / trimmed.sum()
    return int(rng.choice(len(p), p=p))


def _weights_from_logits(lm, planner, mode: ConditioningMode, get_logits) -> np.ndarray:
    if mode is ConditioningMode.UNIFORM:
        return np.full(lm.K, 1.0 / lm.K)
    if planner is None:
        raise EvaluationError(f"mode {mode.value} needs a planner")
    return conditioning_weights(mode, lm.K, logits=Tensor(get_logits()[None])).data[0]


def _plan_weights(lm: ConditionedLM, planner: PlannerModel | None, mode: ConditioningMode,
                  data: bytes) -> np.ndarray:
    """Weights for the sentence being written after ``data``."""
    doc = document_from_bytes(data)
    if not data:
        return _weights_from_logits(lm, planner, mode, lambda: planner.plan_logits(doc, 0))
    if ends_sentence(data):
        return _weights_from_logits(lm, planner, mode, lambda: planner.next_logits(doc))
    return _weights_from_logits(lm, planner, mode, lambda: planner.plan_logits(doc, doc.n_sentences - 1))


def generate(lm: ConditionedLM, planner: PlannerModel | None, prefix: str | bytes = b"",
             n_tokens: int = 128, temperature: float = 1.0, top_p: float = 1.0, seed: int = 0,
             mode="soft") -> Generation:
    """Sample ``n_tokens`` tokens after ``prefix``; the planner is re-run at every sentence start.

    ``mode=None`` samples from the base LM without conditioning. Sampling stops
    early only if the model emits EOS.
    """
    prefix = prefix.encode("utf-8") if isinstance(prefix, str) else bytes(prefix)
    mode = None if mode is None else ConditioningMode.parse(mode).eval_mode
    rng = np.random.default_rng([seed, 41])
    data = bytearray(prefix)
    tokens = [BOS] + list(data)
    sent = [0] * len(tokens)            # sentence id of each token
    cur = document_from_bytes(bytes(data)).n_sentences - 1 if data else 0
    if data and ends_sentence(bytes(data)):
        cur += 1
    pdoc = document_from_bytes(bytes(data))
    for i, (a, b) in enumerate(pdoc.sentence_spans):
        sent[a:b] = [i] * (b - a)
    plans: dict[int, np.ndarray] = {}
    if mode is not None:
        for j in range(cur):
            plans[j] = _weights_from_logits(lm, planner, mode, lambda: planner.plan_logits(pdoc, j))
        plans[cur] = _plan_weights(lm, planner, mode, bytes(data))
    out: list[int] = []
    # only sentences that start after the prefix count as generated
    start_of = {cur: len(tokens)} if not data or ends_sentence(bytes(data)) else {}
    finished: list[tuple[str, int]] = []
    with no_grad():
        for _ in range(n_tokens):
            ctx = np.array(tokens[-lm.context:])[None]
            if mode is None:
                logits = lm(ctx)
            else:
                ctx_sent = np.array((sent[1:] + [cur])[-lm.context:])
                slots, local = np.unique(ctx_sent, return_inverse=True)
                w = np.stack([plans[int(s)] for s in slots])[None].astype(lm.token_embed.weight.dtype)
                logits = lm(ctx, local[None], Tensor(w))
            tok = _sample(logits.data[0, -1], temperature, top_p, rng)
            out.append(tok)
            tokens.append(tok)
            sent.append(cur)
            if tok >= 256:
                break
            data.append(tok)
            if ends_sentence(bytes(data)) and not ends_sentence(bytes(data[:-1])):
                if cur in start_of:
                    a = start_of[cur] - 1          # byte offset (token index minus BOS)
                    text = bytes(data[a:]).decode("utf-8", errors="replace")
                    finished.append((text, int(np.argmax(plans[cur])) if mode else -1))
                cur += 1
                start_of[cur] = len(tokens)
                if mode is not None:
                    plans[cur] = _plan_weights(lm, planner, mode, bytes(data))
    plan = [int(np.argmax(plans[k])) for k in sorted(plans)] if mode is not None else []
    return Generation(prefix, out, plan, finished)


# ---------------------------------------------------------- text-level metrics

def rouge2_f1(candidate, reference) -> float:
    """F1 over the clipped bigram counts two token sequences share."""
    cand, ref = list(candidate), list(reference)
    if len(cand) < 2 or len(ref) < 2:
        return 0.0
    cb = Counter(zip(cand, cand[1:]))
    rb = Counter(zip(ref, ref[1:]))
    overlap = sum((cb & rb).values())
    if overlap == 0:
        return 0.0
    p = overlap / (len(cand) - 1)
    r = overlap / (len(ref) - 1)
    return 2 * p * r / (p + r)


def edit_distance(a, b) -> int:
    """Levenshtein distance with unit costs."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def edit_distance_norm(gen_actions, ref_actions, n_tokens: int, base: int = 128) -> float:
    """Edit distance scaled by ``base / n_tokens`` so longer continuations are comparable."""
    if n_tokens <= 0 or base <= 0:
        raise EvaluationError("n_tokens and base must be positive")
    return edit_distance(gen_actions, ref_actions) / (n_tokens / base)


def text_actions(vocab: ActionVocabulary, data: bytes) -> list[int]:
    """Action label of every sentence (including a trailing partial one) of ``data``."""
    if not data.strip():
        return []
    doc = document_from_bytes(data)
    return [vocab.label_text(s) for s in doc.sentences() if s.strip()]


# ------------------------------------------------------------------ HMM critic

@dataclass
class HmmCritic:
    pi: np.ndarray     # (S,)
    A: np.ndarray      # (S, S)
    B: np.ndarray      # (S, K)
    history: list[float] = field(default_factory=list)

    def __post_init__(self):
        for name, m in (("pi", self.pi[None]), ("A", self.A), ("B", self.B)):
            if (m < 0).any() or not np.allclose(m.sum(-1), 1.0, atol=1e-8):
                raise EvaluationError(f"HMM {name} rows must be distributions")

    @property
    def S(self) -> int:
        return len(self.pi)

    @property
    def K(self) -> int:
        return self.B.shape[1]

    def log_likelihood(self, seq) -> float:
        """Scaled forward algorithm."""
        seq = np.asarray(seq, dtype=np.int64)
        if seq.size == 0:
            raise EvaluationError("empty action sequence")
        if seq.min() < 0 or seq.max() >= self.K:
            raise EvaluationError(f"symbol outside 0..{self.K - 1}")
        alpha = self.pi * self.B[:, seq[0]]
        c = alpha.sum()
        ll = math.log(c)
        alpha = alpha / c
        for o in seq[1:]:
            alpha = (alpha @ self.A) * self.B[:, o]
            c = alpha.sum()
            ll += math.log(c)
            alpha = alpha / c
        return ll

    def sample(self, length: int, rng: np.random.Generator) -> list[int]:
        s = rng.choice(self.S, p=self.pi)
        out = []
        for _ in range(length):
            out.append(int(rng.choice(self.K, p=self.B[s])))
            s = rng.choice(self.S, p=self.A[s])
        return out

    def to_json(self) -> dict:
        return {"pi": self.pi.tolist(), "A": self.A.tolist(), "B": self.B.tolist(),
                "history": list(self.history)}


def _pad(seqs: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs])
    obs = np.zeros((len(seqs), lengths.max()), dtype=np.int64)
    for i, s in enumerate(seqs):
        obs[i, :len(s)] = s
    return obs, lengths


def _e_step(pi, A, B, obs, lengths):
    """Batched scaled forward-backward. Returns (log-likelihood, pi, A, B expected counts)."""
    n, T = obs.shape
    S = len(pi)
    emit = B[:, obs].transpose(1, 2, 0)               # (N, T, S)
    alpha = np.zeros((n, T, S))
    scale = np.ones((n, T))
    a = pi[None] * emit[:, 0]
    scale[:, 0] = a.sum(1)
    alpha[:, 0] = a / scale[:, :1]
    for t in range(1, T):
        live = t < lengths
        a = (alpha[:, t - 1] @ A) * emit[:, t]
        c = np.where(live, a.sum(1), 1.0)
        scale[:, t] = c
        alpha[:, t] = np.where(live[:, None], a / c[:, None], alpha[:, t - 1])
    beta = np.ones((n, T, S))
    for t in range(T - 2, -1, -1):
        live = t + 1 < lengths
        b = ((beta[:, t + 1] * emit[:, t + 1]) @ A.T) / scale[:, t + 1:t + 2]
        beta[:, t] = np.where(live[:, None], b, 1.0)
    valid = np.arange(T)[None] < lengths[:, None]
    ll = float(np.log(scale[valid]).sum())
    gamma = alpha * beta * valid[..., None]
    xi = np.zeros((S, S))
    for t in range(T - 1):
        live = (t + 1 < lengths).astype(float)
        w = (emit[:, t + 1] * beta[:, t + 1]) / scale[:, t + 1:t + 2] * live[:, None]
        xi += A * (alpha[:, t].T @ w)
    K = B.shape[1]
    bc = np.zeros((S, K))
    flat_g = gamma.reshape(-1, S)
    np.add.at(bc.T, obs.reshape(-1), flat_g)
    return ll, gamma[:, 0].sum(0), xi, bc


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    s = m.sum(-1, keepdims=True)
    uniform = np.full_like(m, 1.0 / m.shape[-1])
    return np.where(s > 0, m / np.where(s > 0, s, 1.0), uniform)


def fit_hmm(sequences, S: int = 8, K: int | None = None, seed: int = 0, max_iter: int = 100,
            tol: float = 1e-4, smoothing: float = 1e-6) -> HmmCritic:
    """Baum-Welch EM over discrete action sequences.

    Stops when the per-symbol log-likelihood gain drops below ``tol`` or after
    ``max_iter`` iterations. ``history`` holds the training log-likelihood of
    each iterate. Additive smoothing is applied once to the returned critic so
    unseen symbols keep nonzero probability.
    """
    seqs = [np.asarray(s, dtype=np.int64) for s in sequences]
    if not seqs or any(len(s) == 0 for s in seqs):
        raise EvaluationError("need at least one non-empty sequence")
    if min(int(s.min()) for s in seqs) < 0:
        raise EvaluationError("negative action symbol")
    top = max(int(s.max()) for s in seqs) + 1
    K = top if K is None else K
    if top > K:
        raise EvaluationError(f"symbol {top - 1} outside vocabulary of {K}")
    rng = np.random.default_rng([seed, 53])
    pi = rng.dirichlet(np.ones(S))
    A = rng.dirichlet(np.ones(S), size=S)
    B = rng.dirichlet(np.ones(K), size=S)
    obs, lengths = _pad(seqs)
    n_sym = int(lengths.sum())
    history: list[float] = []
    for _ in range(max_iter):
        ll, pc, ac, bc = _e_step(pi, A, B, obs, lengths)
        history.append(ll)
        if len(history) > 1 and (history[-1] - history[-2]) / n_sym < tol:
            break
        pi = _normalize_rows(pc[None])[0]
        A = _normalize_rows(ac)
        B = _normalize_rows(bc)
    smooth = lambda m: (m + smoothing) / (m + smoothing).sum(-1, keepdims=True)  # noqa: E731
    return HmmCritic(smooth(pi[None])[0], smooth(A), smooth(B), history)


def latent_perplexity(critic: HmmCritic, sequences) -> float:
    seqs = [s for s in sequences if len(s)]
    if not seqs:
        raise EvaluationError("no action sequences to score")
    ll = sum(critic.log_likelihood(s) for s in seqs)
    n = sum(len(s) for s in seqs)
    return float(np.exp(-ll / n))


def plan_matching_accuracy(generations, vocab: ActionVocabulary) -> float:
    """Share of complete generated sentences whose own action equals the planned one.

    Accepts :class:`Generation` objects or plain ``(sentence_text, planned_action)`` pairs.
    """
    pairs = []
    for g in generations:
        if isinstance(g, Generation):
            pairs.extend(g.sentences)
        else:
            pairs.append(g)
    pairs = [(t, a) for t, a in pairs if t.strip()]
    if not pairs:
        raise EvaluationError("no generated sentences to score")
    hits = sum(vocab.label_text(t) == a for t, a in pairs)
    return hits / len(pairs)


# ------------------------------------------------------------------ reports

def _finite(obj):
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


@dataclass
class EvalReport:
    ppl: float
    rouge2_f1: dict[str, float]
    edit_norm: dict[str, float]
    latent_ppl: float
    plan_match_acc: float
    mode: str = "soft"
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        """JSON with non-finite numbers written as null."""
        return json.dumps(_finite(asdict(self)), sort_keys=True, indent=2, allow_nan=False)

    def csv_row(self, header: bool = False) -> str:
        flat = {"ppl": self.ppl, "latent_ppl": self.latent_ppl,
                "plan_match_acc": self.plan_match_acc, "mode": self.mode}
        flat.update({f"rouge2_{k}": v for k, v in self.rouge2_f1.items()})
        flat.update({f"edit_{k}": v for k, v in self.edit_norm.items()})
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(flat))
        if header:
            writer.writeheader()
        writer.writerow(flat)
        return buf.getvalue()


def evaluate(lm: ConditionedLM, planner: PlannerModel | None, vocab: ActionVocabulary,
             corpus: SegmentedCorpus, split: str = "test", mode="soft",
             lengths=(64, 128, 256), norm_base: int = 64, prefix_sentences: int = 2,
             n_docs: int = 20, n_unconditional: int = 10, uncond_tokens: int | None = None,
             temperature: float = 1.0, top_p: float = 0.9, hmm_states: int = 8,
             seed: int = 0, max_windows: int | None = None, critic: HmmCritic | None = None) -> EvalReport:
    """Full evaluation: perplexity, prefix continuations, unconditional samples."""
    mode_e = ConditioningMode.parse(mode).eval_mode
    ppl = perplexity(lm, planner, corpus, split, mode_e, max_windows=max_windows)
    docs = [corpus.documents[i] for i in corpus.indices(split)
            if corpus.documents[i].n_sentences > prefix_sentences][:n_docs]
    if not docs:
        raise EvaluationError(f"split {split!r} has no documents with more than {prefix_sentences} sentences")
    rouge: dict[str, float] = {}
    edits: dict[str, float] = {}
    gens: list[Generation] = []
    for n in lengths:
        r_scores, e_scores = [], []
        for k, doc in enumerate(docs):
            cut = doc.sentence_spans[prefix_sentences][0]
            prefix = bytes(int(t) for t in doc.tokens[1:cut])
            ref = bytes(int(t) for t in doc.tokens[cut:cut + n] if t < 256)
            g = generate(lm, planner, prefix, n, temperature, top_p, seed=seed * 1000 + k, mode=mode_e)
            gens.append(g)
            r_scores.append(rouge2_f1(g.data, ref))
            e_scores.append(edit_distance_norm(text_actions(vocab, g.data), text_actions(vocab, ref),
                                               n, norm_base))
        rouge[str(n)] = float(np.mean(r_scores))
        edits[str(n)] = float(np.mean(e_scores))
    rouge["mean"] = float(np.mean([rouge[str(n)] for n in lengths]))
    edits["mean"] = float(np.mean([edits[str(n)] for n in lengths]))
    if critic is None:
        critic = fit_hmm([corpus.actions[i] for i in corpus.indices("train")], hmm_states,
                         K=lm.K, seed=seed)
    uncond_tokens = uncond_tokens or max(lengths)
    seqs = []
    for k in range(n_unconditional):
        g = generate(lm, planner, b"", uncond_tokens, temperature, top_p, seed=seed * 1000 + 500 + k,
                     mode=mode_e)
        gens.append(g)
        acts = text_actions(vocab, g.data)
        if acts:
            seqs.append(acts)
    latent = latent_perplexity(critic, seqs) if seqs else float("nan")
    try:
        pma = plan_matching_accuracy(gens, vocab)
    except EvaluationError:
        pma = float("nan")
    return EvalReport(ppl, rouge, edits, latent, pma, mode_e.value,
                      {"split": split, "lengths": list(lengths), "norm_base": norm_base,
                       "n_docs": len(docs), "seed": seed})
