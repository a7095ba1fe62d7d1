"""Word-level vocabulary, encoding and MLM corruption."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
N_SPECIAL = len(SPECIALS)
IGNORE = -100


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        tokens = list(tokens)
        if tuple(tokens[:N_SPECIAL]) != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens in order")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.id_to_token = tokens
        self.token_to_id = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.id_to_token == other.id_to_token

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for i, tok in enumerate(self.id_to_token):
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        tokens = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
            tok, idx = line.rsplit("\t", 1)
            if int(idx) != n:
                raise ValueError(f"{path}: ids must be dense and ordered (line {n + 1})")
            tokens.append(tok)
        return cls(tokens)


def build_vocab(documents: Iterable[str], min_count: int = 1) -> Vocabulary:
    """Specials first, then tokens by descending count, ties lexicographic."""
    counts = Counter()
    for doc in documents:
        counts.update(doc.split())
    for s in SPECIALS:
        counts.pop(s, None)
    ranked = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + ranked)


@dataclass
class TokenSequence:
    ids: np.ndarray
    valid: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    def trimmed(self) -> "TokenSequence":
        """Drop trailing padding (padding is always on the right)."""
        n = max(self.n_valid, 1)
        labels = None if self.labels is None else self.labels[:n]
        return TokenSequence(self.ids[:n], self.valid[:n], labels)


def encode(text: str, vocab: Vocabulary, block_size: int) -> TokenSequence:
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    toks = text.split()[:block_size]
    ids = np.full(block_size, PAD_ID, dtype=np.int64)
    ids[:len(toks)] = [vocab.lookup(t) for t in toks]
    valid = np.zeros(block_size, dtype=bool)
    valid[:len(toks)] = True
    return TokenSequence(ids, valid)


def decode(seq: TokenSequence, vocab: Vocabulary) -> str:
    return " ".join(vocab.id_to_token[i] for i in seq.ids[seq.valid])


def apply_mlm_mask(seq: TokenSequence, rng: np.random.Generator, mask_rate: float = 0.15,
                   vocab_size: int | None = None) -> TokenSequence:
    """BERT-style corruption of valid, non-special positions.

    Each candidate is selected with probability ``mask_rate``; a selected
    position becomes [MASK] (80%), a random non-special token (10%) or stays
    as is (10%).  ``labels`` hold the original id at selected positions and
    ``IGNORE`` elsewhere.  A fixed number of draws is taken per position so
    the rng stream does not depend on the outcome.
    """
    if not 0.0 <= mask_rate <= 1.0:
        raise ValueError(f"mask_rate must lie in [0, 1], got {mask_rate}")
    n = len(seq.ids)
    if vocab_size is None:
        vocab_size = int(seq.ids.max(initial=N_SPECIAL - 1)) + 1
    candidates = seq.valid & (seq.ids >= N_SPECIAL)
    pick = rng.random(n)
    kind = rng.random(n)
    repl = rng.integers(N_SPECIAL, max(vocab_size, N_SPECIAL + 1), size=n)
    selected = candidates & (pick < mask_rate)
    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[selected] = seq.ids[selected]
    ids = seq.ids.copy()
    ids[selected & (kind < 0.8)] = MASK_ID
    if vocab_size > N_SPECIAL:
        swap = selected & (kind >= 0.8) & (kind < 0.9)
        ids[swap] = repl[swap]
    return TokenSequence(ids, seq.valid.copy(), labels)
