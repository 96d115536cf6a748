"""Word-level vocabulary, fixed-length encoding and MLM masking."""

from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .errors import EmptyCorpus, VocabFormatError

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
N_SPECIAL = len(SPECIALS)


class Vocab:
    """Immutable token <-> id bijection with the special tokens at ids 0..4."""

    def __init__(self, tokens, max_size=None, min_freq=1):
        tokens = list(tokens)
        if tuple(tokens[:N_SPECIAL]) != SPECIALS:
            raise VocabFormatError("vocabulary must start with the special tokens in order")
        if len(set(tokens)) != len(tokens):
            raise VocabFormatError("duplicate token in vocabulary")
        for t in tokens[N_SPECIAL:]:
            if not t or any(ch.isspace() for ch in t):
                raise VocabFormatError(f"invalid token {t!r}")
        self._itos = tuple(tokens)
        self._stoi = {t: i for i, t in enumerate(tokens)}
        self.max_size = max_size
        self.min_freq = min_freq

    def __len__(self):
        return len(self._itos)

    def __contains__(self, token):
        return token in self._stoi

    def __eq__(self, other):
        return isinstance(other, Vocab) and self._itos == other._itos

    def id(self, token: str) -> int:
        return self._stoi.get(token, UNK_ID)

    def token(self, idx: int) -> str:
        return self._itos[idx]

    @property
    def tokens(self):
        return self._itos

    def to_text(self) -> str:
        return "".join(f"{t}\t{i}\n" for i, t in enumerate(self._itos))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "Vocab":
        tokens = []
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line:
                continue
            tok, sep, idx = line.rpartition("\t")
            if not sep or not idx.isdigit():
                raise VocabFormatError(f"line {lineno}: expected token<TAB>id")
            if int(idx) != len(tokens):
                raise VocabFormatError(f"line {lineno}: id {idx} out of sequence")
            tokens.append(tok)
        return cls(tokens)

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def build_vocab(corpus, max_size: int = 30000, min_freq: int = 1) -> Vocab:
    """Most frequent whitespace tokens, ties broken lexicographically."""
    corpus = list(corpus)
    if not corpus:
        raise EmptyCorpus("cannot build a vocabulary from an empty corpus")
    if max_size < N_SPECIAL:
        raise ValueError(f"max_size must be >= {N_SPECIAL}")
    counts = Counter(tok for text in corpus for tok in text.split())
    for s in SPECIALS:
        counts.pop(s, None)
    kept = sorted((t for t, n in counts.items() if n >= min_freq), key=lambda t: (-counts[t], t))
    kept = kept[: max_size - N_SPECIAL]
    return Vocab(SPECIALS + tuple(kept), max_size=max_size, min_freq=min_freq)


@dataclass(frozen=True)
class TokenizedSequence:
    ids: tuple
    attention_mask: tuple
    original_length: int

    def __len__(self):
        return len(self.ids)


def encode(text: str, vocab: Vocab, max_seq_len: int = 128) -> TokenizedSequence:
    """``[CLS] words... [SEP]`` then padding; keeps the first ``max_seq_len - 2`` words."""
    if max_seq_len < 3:
        raise ValueError("max_seq_len must be >= 3")
    words = text.split()[: max_seq_len - 2]
    ids = [CLS_ID] + [vocab.id(w) for w in words] + [SEP_ID]
    n = len(ids)
    pad = max_seq_len - n
    return TokenizedSequence(tuple(ids + [PAD_ID] * pad), (1,) * n + (0,) * pad, n)


def decode(seq: TokenizedSequence, vocab: Vocab, skip_special: bool = True) -> str:
    out = []
    for i, m in zip(seq.ids, seq.attention_mask):
        if not m:
            break
        if skip_special and i < N_SPECIAL:
            continue
        out.append(vocab.token(i))
    return " ".join(out)


def batch_arrays(seqs):
    """Stack sequences into ``(ids, mask)`` int arrays of shape (B, T)."""
    ids = np.array([s.ids for s in seqs], dtype=np.int64)
    mask = np.array([s.attention_mask for s in seqs], dtype=np.int64)
    return ids, mask


def mask_for_mlm(seq: TokenizedSequence, mask_rate: float = 0.15, seed=0, vocab_size=None):
    """Select content positions for masked-token prediction.

    Each non-special, non-pad position is chosen with probability
    ``mask_rate``; a chosen position becomes [MASK] 80% of the time, a random
    non-special id 10%, and stays unchanged 10%.  Returns the corrupted
    sequence and ``{position: original_id}``.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must lie in (0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ids = np.array(seq.ids, dtype=np.int64)
    mask = np.array(seq.attention_mask, dtype=bool)
    eligible = mask & (ids >= N_SPECIAL)
    selected = eligible & (rng.random(ids.size) < mask_rate)
    roll = rng.random(ids.size)
    if vocab_size is None:
        vocab_size = int(ids.max()) + 1
    random_ids = rng.integers(N_SPECIAL, max(vocab_size, N_SPECIAL + 1), size=ids.size)
    labels = {int(p): int(ids[p]) for p in np.flatnonzero(selected)}
    new = ids.copy()
    new[selected & (roll < 0.8)] = MASK_ID
    swap = selected & (roll >= 0.8) & (roll < 0.9)
    new[swap] = random_ids[swap]
    return TokenizedSequence(tuple(int(i) for i in new), seq.attention_mask, seq.original_length), labels
