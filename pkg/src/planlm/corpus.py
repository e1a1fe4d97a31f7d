"""Byte-level documents, sentence segmentation, splits and training windows."""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

log = logging.getLogger(__name__)

BOS = 256
EOS = 257
VOCAB_SIZE = 258

_TERMINATORS = frozenset(b".!?")
_WHITESPACE = frozenset(b" \t\n\r\x0b\x0c")
SPLITS = ("train", "val", "test")


class CorpusError(ValueError):
    pass


@dataclass
class Document:
    tokens: np.ndarray
    sentence_spans: list[tuple[int, int]]

    def __post_init__(self):
        spans = self.sentence_spans
        if not spans or spans[0][0] != 0 or spans[-1][1] != len(self.tokens):
            raise CorpusError("sentence spans must cover the whole document")
        for (a, b), (c, _) in zip(spans, spans[1:]):
            if b != c:
                raise CorpusError("sentence spans must be contiguous")
        if any(b <= a for a, b in spans):
            raise CorpusError("empty sentence span")

    @property
    def n_sentences(self) -> int:
        return len(self.sentence_spans)

    @property
    def text(self) -> str:
        return detokenize(self.tokens)

    def sentence_text(self, j: int) -> str:
        a, b = self.sentence_spans[j]
        return detokenize(self.tokens[a:b])

    def sentences(self) -> list[str]:
        return [self.sentence_text(j) for j in range(self.n_sentences)]

    def sentence_of_token(self) -> np.ndarray:
        out = np.empty(len(self.tokens), dtype=np.int64)
        for j, (a, b) in enumerate(self.sentence_spans):
            out[a:b] = j
        return out


def tokenize(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)


def detokenize(tokens) -> str:
    data = bytes(int(t) for t in tokens if 0 <= t < 256)
    return data.decode("utf-8", errors="replace")


def sentence_breaks(data: bytes) -> list[int]:
    """Byte offsets where a new sentence starts (excluding 0 and len).

    A sentence ends after a terminator followed by a whitespace run, or after a
    whitespace run containing a blank line; the run stays with the sentence it
    follows.
    """
    breaks = []
    n = len(data)
    i = 0
    while i < n:
        c = data[i]
        if c in _WHITESPACE:
            j = i
            while j < n and data[j] in _WHITESPACE:
                j += 1
            run = data[i:j]
            after_terminator = i > 0 and data[i - 1] in _TERMINATORS
            blank_line = run.count(b"\n") >= 2
            if (after_terminator or blank_line) and j < n and i > 0:
                breaks.append(j)
            i = j
        else:
            i += 1
    return breaks


def ends_sentence(data: bytes) -> bool:
    """True when ``data`` ends in a completed sentence (terminator/blank line + whitespace)."""
    if not data or data[-1] not in _WHITESPACE:
        return False
    i = len(data)
    while i > 0 and data[i - 1] in _WHITESPACE:
        i -= 1
    if i == 0:
        return False
    return data[i - 1] in _TERMINATORS or data[i:].count(b"\n") >= 2


def segment(text: str) -> Document:
    """Tokenize ``text`` to bytes framed by BOS/EOS and split it into sentences."""
    if not text:
        raise CorpusError("cannot segment empty text")
    data = text.encode("utf-8")
    tokens = np.concatenate([[BOS], np.frombuffer(data, dtype=np.uint8), [EOS]]).astype(np.int64)
    # token index = byte index + 1 because of BOS
    cuts = [0] + [b + 1 for b in sentence_breaks(data)] + [len(tokens)]
    spans = [(a, b) for a, b in zip(cuts, cuts[1:])]
    return Document(tokens, spans)


def split_of(index: int, seed: int, val_frac: float = 0.05, test_frac: float = 0.05) -> str:
    """Deterministic split assignment from (document index, seed)."""
    h = zlib.crc32(f"{seed}:{index}".encode()) / 2 ** 32
    if h < test_frac:
        return "test"
    if h < test_frac + val_frac:
        return "val"
    return "train"


@dataclass
class Window:
    doc: int
    start: int
    tokens: np.ndarray           # (W,)
    sentence_index: np.ndarray   # (W,) document sentence of token p+1
    slots: np.ndarray            # (S,) distinct document sentences touched, ascending
    slot_index: np.ndarray       # (W,) position -> index into slots


@dataclass
class SegmentedCorpus:
    documents: list[Document]
    splits: list[str]
    window_size: int = 128
    seed: int = 0
    actions: list[np.ndarray] | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_texts(cls, texts: Iterable[str], window_size: int = 128, seed: int = 0,
                   val_frac: float = 0.05, test_frac: float = 0.05) -> "SegmentedCorpus":
        docs, splits = [], []
        for i, text in enumerate(texts):
            docs.append(segment(text))
            splits.append(split_of(i, seed, val_frac, test_frac))
        return cls(docs, splits, window_size, seed)

    def indices(self, split: str) -> list[int]:
        if split not in SPLITS:
            raise CorpusError(f"unknown split {split!r}")
        return [i for i, s in enumerate(self.splits) if s == split]

    def windows(self, split: str) -> list[Window]:
        """Non-overlapping windows; a document's tail shorter than a window is dropped."""
        out = []
        skipped = 0
        w = self.window_size
        for i in self.indices(split):
            doc = self.documents[i]
            n = len(doc.tokens)
            if n < 2:
                skipped += 1
                continue
            sent = doc.sentence_of_token()
            for k in range(n // w):
                a = k * w
                nxt = np.arange(a + 1, a + w + 1)
                nxt[-1] = min(nxt[-1], n - 1)
                sidx = sent[nxt]
                slots, local = np.unique(sidx, return_inverse=True)
                out.append(Window(i, a, doc.tokens[a:a + w].copy(), sidx, slots, local))
        if skipped:
            log.warning("skipped %d documents shorter than 2 tokens", skipped)
        return out

    def save(self, path) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8") as f:
            header = {"format": "planlm-corpus", "version": 1,
                      "window_size": self.window_size, "seed": self.seed, "meta": self.meta}
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for doc, split in zip(self.documents, self.splits):
                f.write(json.dumps({"text": doc.text, "split": split}, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SegmentedCorpus":
        with Path(path).open(encoding="utf-8") as f:
            header = json.loads(f.readline())
            if header.get("format") != "planlm-corpus":
                raise CorpusError(f"{path}: not a corpus cache")
            docs, splits = [], []
            for line in f:
                rec = json.loads(line)
                docs.append(segment(rec["text"]))
                splits.append(rec["split"])
        return cls(docs, splits, header["window_size"], header["seed"], meta=header.get("meta", {}))


@dataclass
class Batch:
    tokens: np.ndarray        # (B, W)
    slot_index: np.ndarray    # (B, W)
    slots: np.ndarray         # (B, S) document sentence ids, -1 padded
    oracle: np.ndarray        # (B, S) oracle actions, -1 padded
    docs: list[int]

    @property
    def slot_mask(self) -> np.ndarray:
        return self.slots >= 0


def collate(corpus: SegmentedCorpus, windows: list[Window]) -> Batch:
    s_max = max(len(w.slots) for w in windows)
    b = len(windows)
    slots = np.full((b, s_max), -1, dtype=np.int64)
    oracle = np.full((b, s_max), -1, dtype=np.int64)
    for r, w in enumerate(windows):
        slots[r, :len(w.slots)] = w.slots
        if corpus.actions is not None:
            oracle[r, :len(w.slots)] = corpus.actions[w.doc][w.slots]
    return Batch(
        tokens=np.stack([w.tokens for w in windows]),
        slot_index=np.stack([w.slot_index for w in windows]),
        slots=slots,
        oracle=oracle,
        docs=[w.doc for w in windows],
    )


def iterate_batches(corpus: SegmentedCorpus, windows: list[Window], batch_size: int,
                    rng: np.random.Generator | None = None) -> Iterator[Batch]:
    """One pass over ``windows``; shuffled when ``rng`` is given. Last partial batch kept."""
    order = np.arange(len(windows)) if rng is None else rng.permutation(len(windows))
    for a in range(0, len(order), batch_size):
        yield collate(corpus, [windows[i] for i in order[a:a + batch_size]])


def load_texts(path) -> list[str]:
    """Read documents from a directory of ``*.txt`` files or a JSON-lines file."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.txt"))
        if not files:
            raise CorpusError(f"{path}: no .txt files")
        return [p.read_text(encoding="utf-8") for p in files]
    if path.suffix in (".jsonl", ".json"):
        texts = []
        with path.open(encoding="utf-8") as f:
            for n, line in enumerate(f, 1):
                if line.strip():
                    rec = json.loads(line)
                    if "text" not in rec:
                        raise CorpusError(f"{path}:{n}: record has no 'text' field")
                    texts.append(rec["text"])
        return texts
    return [path.read_text(encoding="utf-8")]


# ------------------------------------------------------------ synthetic data

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "br", "st", "tr", "pl", "gr", "sh", "ch", "th"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ee"]
_CODAS = ["", "", "n", "r", "s", "l", "k", "m", "nd", "st"]


def _pseudo_word(rng: np.random.Generator) -> str:
    syl = rng.integers(1, 3)
    return "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) + rng.choice(_CODAS)
                   for _ in range(syl))


@dataclass
class MarkovTemplates:
    """Genre-dependent Markov chain over sentence templates.

    A document draws a genre, opens with that genre's opening template, and
    then moves between templates with genre-specific transition rows, so the
    best guess for the next template depends on text well before the
    immediately preceding sentence.
    """

    templates: list[list[list[str]]]   # template -> word slots -> alternatives
    terminators: list[str]
    openings: list[int]
    transitions: np.ndarray            # (G, N, N)
    names: list[str]
    fillers: list[str]
    min_sentences: int = 8
    max_sentences: int = 16

    @classmethod
    def random(cls, n_templates: int = 16, n_genres: int = 4, seed: int = 0,
               min_sentences: int = 8, max_sentences: int = 16) -> "MarkovTemplates":
        if not 8 <= n_templates <= 32:
            raise ValueError("n_templates must be in [8, 32]")
        rng = np.random.default_rng(seed)
        lexicon = sorted({_pseudo_word(rng) for _ in range(600)})
        rng.shuffle(lexicon)
        pool = iter(lexicon)
        templates = []
        for _ in range(n_templates):
            words = []
            for _ in range(int(rng.integers(4, 8))):
                alts = [next(pool)]
                if rng.random() < 0.35:
                    alts.append(next(pool))
                words.append(alts)
            templates.append(words)
        terminators = [str(rng.choice([".", ".", ".", "!", "?"])) for _ in range(n_templates)]
        openings = [int(x) for x in rng.choice(n_templates, size=n_genres, replace=False)]
        trans = np.zeros((n_genres, n_templates, n_templates))
        probs = np.array([0.55, 0.3, 0.15])
        for g in range(n_genres):
            for t in range(n_templates):
                succ = rng.choice(n_templates, size=3, replace=False)
                trans[g, t, succ] = probs
        names = [next(pool).capitalize() for _ in range(24)]
        fillers = [next(pool) for _ in range(40)]
        return cls(templates, terminators, openings, trans, names, fillers,
                   min_sentences, max_sentences)

    def sentence(self, t: int, name: str, rng: np.random.Generator) -> str:
        words = [alts[int(rng.integers(len(alts)))] for alts in self.templates[t]]
        slot = int(rng.integers(1, len(words)))
        words.insert(slot, name if rng.random() < 0.5 else str(rng.choice(self.fillers)))
        text = " ".join(words)
        return text[0].upper() + text[1:] + self.terminators[t]

    def document(self, rng: np.random.Generator) -> tuple[str, list[int]]:
        g = int(rng.integers(len(self.openings)))
        name = str(rng.choice(self.names))
        n = int(rng.integers(self.min_sentences, self.max_sentences + 1))
        seq = [self.openings[g]]
        while len(seq) < n:
            seq.append(int(rng.choice(len(self.templates), p=self.transitions[g, seq[-1]])))
        return " ".join(self.sentence(t, name, rng) for t in seq), seq


def synthetic_texts(n_docs: int, n_templates: int = 16, n_genres: int = 4,
                    seed: int = 0) -> tuple[list[str], list[list[int]]]:
    """Generate ``n_docs`` documents and their ground-truth template sequences."""
    chain = MarkovTemplates.random(n_templates, n_genres, seed)
    rng = np.random.default_rng([seed, 1])
    texts, latents = [], []
    for _ in range(n_docs):
        text, seq = chain.document(rng)
        texts.append(text)
        latents.append(seq)
    return texts, latents
