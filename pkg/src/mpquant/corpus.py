"""Text ingestion, vocabulary, batching, and perplexity evaluation.

Documents are lines of UTF-8 text; context never crosses a newline. The
word tokenizer lowercases and splits on whitespace; the character tokenizer
treats every in-line character as a token (handy for tiny corpora). Each
document is chopped into fixed-length windows; the model predicts tokens
2..T of every window, so the loss mask excludes window-initial tokens and
padding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError
from .params import ParamVector

UNK = "<unk>"


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    mode: str  # "word" | "char"

    def __post_init__(self):
        if self.mode not in ("word", "char"):
            raise ConfigError(f"unknown vocab mode {self.mode!r}")
        if UNK not in self.tokens:
            raise ConfigError("vocab must contain the <unk> token")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocab tokens must be unique")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def index(self) -> dict:
        # tuple field keeps the dataclass hashable; rebuild lazily and cache.
        if not hasattr(self, "_index"):
            object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})
        return self._index

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path, mode: str) -> "Vocab":
        with open(path, "r", encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tuple(tokens), mode)


def tokenize(text: str, mode: str) -> list[list[str]]:
    """Token lists per document (line); empty documents are dropped."""
    docs = []
    for line in text.split("\n"):
        if mode == "word":
            toks = line.lower().split()
        else:
            toks = list(line)
        if toks:
            docs.append(toks)
    return docs


def detokenize(tokens: list[str], mode: str) -> str:
    return (" " if mode == "word" else "").join(tokens)


def build_vocab(
    text: str, mode: str = "word", max_size: int | None = None, min_count: int = 1
) -> Vocab:
    """Frequency-ranked vocabulary (ties lexicographic) with <unk> appended.

    ``max_size`` bounds the total size including <unk>.
    """
    docs = tokenize(text, mode)
    if not docs:
        raise ConfigError("empty corpus")
    counts: dict[str, int] = {}
    for doc in docs:
        for tok in doc:
            counts[tok] = counts.get(tok, 0) + 1
    counts.pop(UNK, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [t for t, c in ranked if c >= min_count]
    if max_size is not None:
        if max_size < 2:
            raise ConfigError("max_size must leave room for <unk> and one token")
        keep = keep[: max_size - 1]
    return Vocab(tuple(keep) + (UNK,), mode)


def encode(vocab: Vocab, text: str) -> list[np.ndarray]:
    """Per-document id arrays; out-of-vocabulary tokens map to <unk>."""
    idx = vocab.index
    unk = vocab.unk_id
    return [
        np.array([idx.get(t, unk) for t in doc], dtype=np.int64)
        for doc in tokenize(text, vocab.mode)
    ]


# -- batching -------------------------------------------------------------------


@dataclass
class TokenBatch:
    """Fixed-length windows: ids (B, T) with a validity mask.

    ``inputs`` are positions 0..T-2; position t predicts token t+1, so the
    prediction mask is ``mask[:, 1:]``.
    """

    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ids.shape != self.mask.shape or self.ids.ndim != 2:
            raise ConfigError("TokenBatch ids/mask must be matching 2-D arrays")
        if self.ids.size == 0:
            raise ConfigError("empty TokenBatch")

    @property
    def inputs(self) -> np.ndarray:
        return self.ids[:, :-1]

    @property
    def targets(self) -> np.ndarray:
        return self.ids[:, 1:]

    @property
    def target_mask(self) -> np.ndarray:
        return self.mask[:, 1:]

    @property
    def num_predictions(self) -> int:
        return int(self.target_mask.sum())


def make_windows(docs: list[np.ndarray], seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Chop documents into (W, seq_len) id windows plus validity mask."""
    if seq_len < 2:
        raise ConfigError("seq_len must be >= 2")
    rows, masks = [], []
    for doc in docs:
        for start in range(0, len(doc), seq_len):
            chunk = doc[start : start + seq_len]
            if len(chunk) < 2:
                continue
            row = np.zeros(seq_len, dtype=np.int64)
            msk = np.zeros(seq_len, dtype=bool)
            row[: len(chunk)] = chunk
            msk[: len(chunk)] = True
            rows.append(row)
            masks.append(msk)
    if not rows:
        raise ConfigError("corpus yielded no usable windows")
    return np.stack(rows), np.stack(masks)


def sample_batch(
    windows: np.ndarray, mask: np.ndarray, batch_size: int, rng: np.random.Generator
) -> TokenBatch:
    take = rng.integers(0, windows.shape[0], size=min(batch_size, windows.shape[0]))
    return TokenBatch(windows[take], mask[take])


def iter_batches(windows: np.ndarray, mask: np.ndarray, batch_size: int):
    for start in range(0, windows.shape[0], batch_size):
        yield TokenBatch(windows[start : start + batch_size], mask[start : start + batch_size])


# -- evaluation -------------------------------------------------------------------


def corpus_nll(model, params: ParamVector, windows: np.ndarray, mask: np.ndarray, batch_size: int = 64):
    """(total nll, token count) over all windows, deterministic order."""
    total, count = 0.0, 0
    for batch in iter_batches(windows, mask, batch_size):
        n = batch.num_predictions
        if n == 0:
            continue
        total += ad.loss_only(model, params, batch) * n
        count += n
    if count == 0:
        raise ConfigError("no predictable tokens in evaluation corpus")
    return total, count


def perplexity_windows(model, params, windows, mask, batch_size: int = 64) -> float:
    total, count = corpus_nll(model, params, windows, mask, batch_size)
    return float(np.exp(total / count))


def perplexity(model, params: ParamVector, vocab: Vocab, text: str, seq_len: int = 32, batch_size: int = 64) -> float:
    """exp(mean per-token negative log-probability) over ``text``."""
    docs = encode(vocab, text)
    top = max((int(d.max()) for d in docs if len(d)), default=0)
    if top >= vocab.size:
        raise ConfigError("token id out of range for model vocabulary")
    windows, mask = make_windows(docs, seq_len)
    return perplexity_windows(model, params, windows, mask, batch_size)


# -- synthetic corpus --------------------------------------------------------------


_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def synthesize_corpus(num_chars: int, seed: int = 0) -> str:
    """Deterministic word-like text with first-order word structure.

    A seeded lexicon of short words plus a sparse Markov chain over them
    gives a character model real structure to learn while staying cheap to
    generate; useful for demos and desk-scale experiments.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    lex_size = 120
    letters = np.array(list(_LETTERS))
    letter_w = rng.dirichlet(np.full(len(letters), 0.35))
    words = set()
    while len(words) < lex_size:
        length = int(rng.integers(2, 8))
        words.add("".join(rng.choice(letters, size=length, p=letter_w)))
    lexicon = sorted(words)
    # Sparse first-order transitions: each word links to a handful of successors.
    succ = []
    succ_w = []
    for _ in lexicon:
        k = int(rng.integers(2, 6))
        succ.append(rng.integers(0, lex_size, size=k))
        succ_w.append(rng.dirichlet(np.full(k, 0.7)))
    out: list[str] = []
    total = 0
    wid = int(rng.integers(0, lex_size))
    line: list[str] = []
    line_len = int(rng.integers(6, 14))
    while total < num_chars:
        line.append(lexicon[wid])
        if len(line) >= line_len:
            text_line = " ".join(line)
            out.append(text_line)
            total += len(text_line) + 1
            line = []
            line_len = int(rng.integers(6, 14))
            wid = int(rng.integers(0, lex_size))
        else:
            wid = int(rng.choice(succ[wid], p=succ_w[wid]))
    if line:
        out.append(" ".join(line))
    return "\n".join(out) + "\n"
