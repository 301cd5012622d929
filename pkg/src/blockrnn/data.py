"""Corpus handling: byte-level tokens, contiguous streams, synthetic text."""

from __future__ import annotations

import numpy as np


def load_corpus(path) -> np.ndarray:
    """Raw UTF-8 file as byte-level token ids (0..255)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise ValueError(f"corpus {path} is empty")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.intp)


def encode(text) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.intp)


def split_corpus(ids: np.ndarray, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic tail split; validation gets the last ``val_fraction``."""
    if not 0.0 <= val_fraction < 1.0:
        raise ValueError(f"val_fraction must be in [0, 1), got {val_fraction}")
    n_val = int(round(ids.size * val_fraction))
    if n_val == 0:
        return ids, ids[:0]
    return ids[:-n_val], ids[-n_val:]


def make_streams(ids: np.ndarray, batch: int) -> np.ndarray:
    """Cut the corpus into ``batch`` contiguous streams (drops the tail)."""
    if batch < 1:
        raise ValueError("batch must be >= 1")
    stream_len = ids.size // batch
    if stream_len < 2:
        raise ValueError(f"corpus of {ids.size} tokens cannot fill {batch} streams")
    return ids[:stream_len * batch].reshape(batch, stream_len)


def windows_per_epoch(n_tokens: int, batch: int, seq_len: int) -> int:
    return max((n_tokens // batch - 1) // seq_len, 0)


def iter_windows(streams: np.ndarray, seq_len: int):
    """Yield (inputs, targets) as (batch, seq_len) arrays, targets shifted by one."""
    n = (streams.shape[1] - 1) // seq_len
    for w in range(n):
        lo = w * seq_len
        yield streams[:, lo:lo + seq_len], streams[:, lo + 1:lo + seq_len + 1]


_CONSONANTS = "bcdfghjklmnprstvwz"
_VOWELS = "aeiou"


def synth_corpus(n_bytes: int, seed: int = 0, n_words: int = 240) -> bytes:
    """Deterministic English-like gibberish with a Zipf word distribution.

    Gives a char-level model real structure to learn (word spellings,
    spacing, punctuation) without shipping a text corpus. ``n_words`` sets
    the vocabulary richness and thereby how much capacity the text rewards.
    """
    rng = np.random.default_rng(seed)

    def syllable():
        s = _CONSONANTS[rng.integers(len(_CONSONANTS))] + _VOWELS[rng.integers(len(_VOWELS))]
        if rng.random() < 0.4:
            s += _CONSONANTS[rng.integers(len(_CONSONANTS))]
        return s

    words = ["".join(syllable() for _ in range(rng.integers(1, 4)))
             for _ in range(n_words)]
    ranks = np.arange(1, len(words) + 1, dtype=np.float64)
    probs = (1.0 / ranks) / (1.0 / ranks).sum()

    parts, size, since_break = [], 0, 0
    while size < n_bytes:
        w = words[rng.choice(len(words), p=probs)]
        parts.append(w)
        size += len(w) + 1
        since_break += len(w) + 1
        if since_break > 60 and rng.random() < 0.3:
            parts[-1] += "." if rng.random() < 0.7 else ",\n"
            since_break = 0
    text = " ".join(parts).encode("ascii")
    return text[:n_bytes]
