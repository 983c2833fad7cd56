"""Byte-level tokenization, batching, and synthetic corpora."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import IGNORE_INDEX

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259

# key-value-recall alphabet: a stored pair is one fused byte 128 + 8*key + value
KEYS = np.frombuffer(b"ABCDEFGHIJKLMNOP", dtype=np.uint8).astype(np.int64)
VALUES = np.frombuffer(b"01234567", dtype=np.uint8).astype(np.int64)
PAIR_BASE = 128
QUERY = ord("?")
SEP = ord("|")


def pair_token(key: int, value: int) -> int:
    """Fused token for the (key byte, value byte) pair."""
    k = int(np.flatnonzero(KEYS == key)[0])
    v = int(np.flatnonzero(VALUES == value)[0])
    return PAIR_BASE + len(VALUES) * k + v


def unpair(token: int) -> tuple[int, int]:
    k, v = divmod(int(token) - PAIR_BASE, len(VALUES))
    return int(KEYS[k]), int(VALUES[v])


@dataclass
class TokenStream:
    ids: np.ndarray
    boundaries: list[int] = field(default_factory=lambda: [0])

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= VOCAB_SIZE):
            raise ValueError("token id outside the byte-level vocabulary")
        if any(a >= b for a, b in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError(f"document boundaries not strictly increasing: {self.boundaries}")

    def __len__(self):
        return int(self.ids.size)

    def documents(self) -> list[np.ndarray]:
        edges = list(self.boundaries) + [len(self)]
        return [self.ids[a:b] for a, b in zip(edges, edges[1:]) if b > a]


def tokenize(text: bytes | str) -> TokenStream:
    """``[BOS, *bytes, EOS]``."""
    if isinstance(text, str):
        text = text.encode("utf-8")
    body = np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)
    return TokenStream(np.concatenate([[BOS], body, [EOS]]), [0])


def tokenize_documents(docs) -> TokenStream:
    parts = [tokenize(d).ids for d in docs]
    bounds = np.cumsum([0] + [len(p) for p in parts[:-1]]).tolist()
    return TokenStream(np.concatenate(parts) if parts else np.zeros(0, np.int64), bounds)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids.ids if isinstance(ids, TokenStream) else ids)
    return bytes(ids[ids < 256].astype(np.uint8).tolist())


def windows(ids: np.ndarray, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping next-token windows; a ragged tail is padded and masked."""
    n = len(ids)
    if n < T + 1:
        raise ValueError(f"stream of {n} tokens is shorter than one window of {T}+1")
    rows = -(-(n - 1) // T)
    inputs = np.full((rows, T), PAD, dtype=np.int64)
    targets = np.full((rows, T), IGNORE_INDEX, dtype=np.int64)
    for r in range(rows):
        chunk = ids[r * T: r * T + T + 1]
        m = len(chunk) - 1
        inputs[r, :m] = chunk[:-1]
        targets[r, :m] = chunk[1:]
    return inputs, targets


def batchify(stream: TokenStream | np.ndarray, T: int, batch_size: int,
             respect_boundaries: bool = False) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a stream into batches of ``[batch_size, T]`` inputs and shifted targets.

    With ``respect_boundaries`` each document is windowed on its own so no row
    straddles two documents; documents shorter than one window are skipped.
    """
    if isinstance(stream, TokenStream) and respect_boundaries:
        parts = [windows(d, T) for d in stream.documents() if len(d) >= T + 1]
        if not parts:
            raise ValueError(f"no document is long enough for a window of {T}+1")
        inputs = np.concatenate([p[0] for p in parts])
        targets = np.concatenate([p[1] for p in parts])
    else:
        ids = stream.ids if isinstance(stream, TokenStream) else np.asarray(stream)
        inputs, targets = windows(ids, T)
    return [(inputs[i:i + batch_size], targets[i:i + batch_size])
            for i in range(0, len(inputs), batch_size)]


class BatchSampler:
    """Deterministic shuffled batches: batch ``step`` is a pure function of (seed, step)."""

    def __init__(self, stream: TokenStream | np.ndarray, T: int, batch_size: int, seed: int = 0):
        ids = stream.ids if isinstance(stream, TokenStream) else np.asarray(stream)
        self.inputs, self.targets = windows(ids, T)
        if len(self.inputs) < batch_size:
            raise ValueError(f"{len(self.inputs)} windows cannot fill a batch of {batch_size}")
        self.batch_size = batch_size
        self.seed = seed
        self.per_epoch = len(self.inputs) // batch_size

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        epoch, i = divmod(step, self.per_epoch)
        perm = np.random.default_rng([self.seed, epoch]).permutation(len(self.inputs))
        idx = perm[i * self.batch_size:(i + 1) * self.batch_size]
        return self.inputs[idx], self.targets[idx]


def markov_transition_matrix(seed: int, n_symbols: int = 27, concentration: float = 0.3) -> np.ndarray:
    rng = np.random.default_rng([seed, 17])
    return rng.dirichlet(np.full(n_symbols, concentration), size=n_symbols)


MARKOV_ALPHABET = np.frombuffer(b"abcdefghijklmnopqrstuvwxyz ", dtype=np.uint8).astype(np.int64)


def _markov(size, seed):
    P = markov_transition_matrix(seed, len(MARKOV_ALPHABET))
    cdf = np.cumsum(P, axis=1)
    rng = np.random.default_rng(seed)
    u = rng.random(size)
    states = np.empty(size, dtype=np.int64)
    s = rng.integers(len(MARKOV_ALPHABET))
    for i in range(size):
        states[i] = s
        s = min(int(np.searchsorted(cdf[s], u[i], side="right")), len(MARKOV_ALPHABET) - 1)
    return MARKOV_ALPHABET[states]


def kv_episode(rng: np.random.Generator, length: int, n_pairs: int | None = None) -> np.ndarray:
    """One recall episode of exactly ``length`` tokens.

    ``BOS``, then ``n_pairs`` fused pair tokens with distinct keys, a ``SEP``,
    then (``QUERY``, key, value) triples asking for stored pairs until the
    episode is full. Answering a query means attending back to its pair.
    """
    if n_pairs is None:
        n_pairs = min(len(KEYS), (length - 5) // 2)
    if n_pairs > len(KEYS) or length < n_pairs + 5:
        raise ValueError(f"episode of {length} tokens cannot hold {n_pairs} pairs and a query")
    keys = rng.choice(len(KEYS), size=n_pairs, replace=False)
    vals = rng.integers(len(VALUES), size=n_pairs)
    out = [BOS] + [PAIR_BASE + len(VALUES) * int(k) + int(v) for k, v in zip(keys, vals)] + [SEP]
    while len(out) < length:
        j = rng.integers(n_pairs)
        out += [QUERY, int(KEYS[keys[j]]), int(VALUES[vals[j]])]
    return np.asarray(out[:length], dtype=np.int64)


def _copy_episode(rng, length):
    half = (length - 2) // 2
    seg = rng.choice(MARKOV_ALPHABET[:-1], size=half)
    ep = np.concatenate([[BOS], seg, [SEP], seg])
    if len(ep) < length:
        ep = np.concatenate([ep, [EOS]])
    return ep


def gen_synthetic_corpus(kind: str, size: int, seed: int, episode_len: int = 128) -> TokenStream:
    """Deterministic synthetic corpus of ``size`` tokens.

    kinds: ``markov-text`` (first-order chain over lowercase letters and space),
    ``key-value-recall`` (see ``kv_episode``), ``copy-task`` (segment, SEP, copy).
    Episode kinds are cut into documents of ``episode_len`` tokens.
    """
    if kind == "markov-text":
        return TokenStream(_markov(size, seed), [0])
    if kind not in ("key-value-recall", "copy-task"):
        raise ValueError(f"unknown corpus kind {kind!r}")
    rng = np.random.default_rng(seed)
    n_eps = -(-size // episode_len)
    make = kv_episode if kind == "key-value-recall" else _copy_episode
    eps = [make(rng, episode_len) for _ in range(n_eps)]
    ids = np.concatenate(eps)[:size]
    bounds = list(range(0, len(ids), episode_len))
    return TokenStream(ids, bounds)


@dataclass(frozen=True)
class NeedleSpec:
    context_len: int
    key: bytes
    value: bytes
    depth: float
    filler_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.depth <= 1.0:
            raise ValueError(f"depth fraction {self.depth} outside [0, 1]")


@dataclass
class NeedleSample:
    tokens: np.ndarray        # context + query suffix, ends right before the answer
    answer: np.ndarray        # the value tokens to be generated
    needle_span: tuple[int, int]   # [start, end) of the needle token inside ``tokens``


def gen_niah(spec: NeedleSpec) -> NeedleSample:
    """Needle sample in the key-value-recall format.

    Layout: ``BOS, filler..., needle, filler..., QUERY, key``. The needle is the
    fused pair token of ``(key, value)``; filler pairs never use the needle key,
    so the needle occurs exactly once. ``depth`` 0 puts the needle right after
    BOS and 1 puts it right before the query suffix.
    """
    if len(spec.key) != 1 or len(spec.value) != 1:
        raise ValueError("needle key and value must be single bytes from the recall alphabet")
    key, val = spec.key[0], spec.value[0]
    if key not in KEYS or val not in VALUES:
        raise ValueError(f"needle {spec.key!r}={spec.value!r} outside the recall alphabet")
    needle = pair_token(key, val)
    suffix = [QUERY, key]
    n_filler = spec.context_len - 2 - len(suffix)
    if n_filler < 0:
        raise ValueError(f"needle does not fit a context of {spec.context_len}")
    rng = np.random.default_rng([spec.filler_seed, 7])
    other = np.flatnonzero(KEYS != key)
    filler = PAIR_BASE + len(VALUES) * rng.choice(other, size=n_filler) + rng.integers(len(VALUES), size=n_filler)
    at = int(round(spec.depth * n_filler))
    tokens = np.concatenate([[BOS], filler[:at], [needle], filler[at:], suffix]).astype(np.int64)
    return NeedleSample(tokens, np.asarray([val], dtype=np.int64), (1 + at, 2 + at))
