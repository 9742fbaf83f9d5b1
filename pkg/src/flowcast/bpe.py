"""Byte-level byte-pair encoding with reserved special tokens.

Vocabulary layout:
    ids 0..5     special tokens (flow markers, CLS/SEP/MASK/PAD)
    ids 6..261   the 256 byte values
    ids 262+     learned merges, one per rank

Training repeatedly merges the most frequent adjacent pair. Frequency ties are
broken toward the lexicographically smallest (left-bytes, right-bytes) pair so
training is deterministic regardless of iteration order. Merging stops when
the table is full or no pair occurs at least twice.

Merges are only counted inside chunks: the corpus is split at special-token
markers, then at line ends (a chunk keeps its trailing newline). A learned
token can therefore end with a newline but never spans into the next line,
and no token ever crosses a special-token boundary. Encoding applies the
learned merges in rank order (lowest first), which reproduces the training
tokenization; decode is byte-exact.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

from .errors import CorpusEmpty, UnknownId

FLOW_BEGIN = "<FLOW_BEGIN>"
FLOW_END = "<FLOW_END>"
CLS = "<CLS>"
SEP = "<SEP>"
MASK = "<MASK>"
PAD = "<PAD>"

SPECIALS: tuple[str, ...] = (FLOW_BEGIN, FLOW_END, CLS, SEP, MASK, PAD)
FLOW_BEGIN_ID, FLOW_END_ID, CLS_ID, SEP_ID, MASK_ID, PAD_ID = range(6)
NUM_SPECIALS = len(SPECIALS)
BYTE_OFFSET = NUM_SPECIALS
BASE_VOCAB = BYTE_OFFSET + 256  # 262

_SPECIAL_BYTES = tuple(s.encode() for s in SPECIALS)


@dataclass
class TokenSequence:
    ids: list[int]

    def __len__(self):
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __getitem__(self, i):
        return self.ids[i]


@dataclass
class BpeVocab:
    merges: list[tuple[int, int]]
    vocab_size: int
    _token_bytes: list[bytes] = field(default_factory=list, repr=False)
    _ranks: dict = field(default_factory=dict, repr=False)
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.vocab_size < BASE_VOCAB:
            raise ValueError(f"vocab_size must be >= {BASE_VOCAB}")
        if BASE_VOCAB + len(self.merges) > self.vocab_size:
            raise ValueError("more merges than the vocabulary can hold")
        tb = [s.encode() for s in SPECIALS] + [bytes([b]) for b in range(256)]
        ranks = {}
        for rank, (a, b) in enumerate(self.merges):
            new_id = BASE_VOCAB + rank
            if not (BYTE_OFFSET <= a < new_id and BYTE_OFFSET <= b < new_id):
                raise ValueError(f"merge {rank} references invalid ids ({a}, {b})")
            tb.append(tb[a] + tb[b])
            ranks[(a, b)] = rank
        self._token_bytes = tb
        self._ranks = ranks
        self._cache = {}

    @property
    def size(self) -> int:
        """Number of defined token ids (specials + bytes + merges)."""
        return BASE_VOCAB + len(self.merges)

    def token_bytes(self, token_id: int) -> bytes:
        if not 0 <= token_id < len(self._token_bytes):
            raise UnknownId(f"token id {token_id} undefined (table has {self.size})")
        return self._token_bytes[token_id]


def _merge_tuple(chunk: tuple, pair: tuple, new_id: int) -> tuple:
    a, b = pair
    out = []
    i, n = 0, len(chunk)
    while i < n:
        if i < n - 1 and chunk[i] == a and chunk[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(chunk[i])
            i += 1
    return tuple(out)


def _split_chunks(data: bytes) -> list[bytes]:
    """Split at special markers (markers dropped), then at line ends."""
    segments, i = [], 0
    while i < len(data):
        nxt, marker = None, None
        for m in _SPECIAL_BYTES:
            j = data.find(m, i)
            if j != -1 and (nxt is None or j < nxt):
                nxt, marker = j, m
        if nxt is None:
            segments.append(data[i:])
            break
        if nxt > i:
            segments.append(data[i:nxt])
        i = nxt + len(marker)
    chunks = []
    for seg in segments:
        start = 0
        while start < len(seg):
            end = seg.find(b"\n", start)
            if end == -1:
                chunks.append(seg[start:])
                break
            chunks.append(seg[start:end + 1])
            start = end + 1
    return chunks


def train_bpe(corpus, vocab_size: int = 1024) -> BpeVocab:
    """Learn merges from a corpus (str or bytes)."""
    data = corpus.encode() if isinstance(corpus, str) else bytes(corpus)
    chunk_counts = Counter(
        tuple(b + BYTE_OFFSET for b in c) for c in _split_chunks(data) if c
    )
    if not chunk_counts:
        raise CorpusEmpty("no non-special bytes to train on")
    if vocab_size < BASE_VOCAB:
        raise ValueError(f"vocab_size must be >= {BASE_VOCAB}")

    chunks = list(chunk_counts)
    weights = [chunk_counts[c] for c in chunks]
    pair_counts: Counter = Counter()
    pair_chunks: dict[tuple, set[int]] = {}
    for idx, c in enumerate(chunks):
        w = weights[idx]
        for p, k in Counter(zip(c, c[1:])).items():
            pair_counts[p] += k * w
            pair_chunks.setdefault(p, set()).add(idx)

    token_bytes = [s.encode() for s in SPECIALS] + [bytes([b]) for b in range(256)]
    merges: list[tuple[int, int]] = []
    while BASE_VOCAB + len(merges) < vocab_size and pair_counts:
        best_count = max(pair_counts.values())
        if best_count < 2:
            break
        best = min(
            (p for p, n in pair_counts.items() if n == best_count),
            key=lambda p: (token_bytes[p[0]], token_bytes[p[1]]),
        )
        new_id = BASE_VOCAB + len(merges)
        merges.append(best)
        token_bytes.append(token_bytes[best[0]] + token_bytes[best[1]])
        for idx in sorted(pair_chunks.get(best, ())):
            old = chunks[idx]
            new = _merge_tuple(old, best, new_id)
            if new == old:
                continue
            w = weights[idx]
            for p, k in Counter(zip(old, old[1:])).items():
                pair_counts[p] -= k * w
                if pair_counts[p] <= 0:
                    del pair_counts[p]
                    pair_chunks.pop(p, None)
                else:
                    s = pair_chunks.get(p)
                    if s is not None:
                        s.discard(idx)
            for p, k in Counter(zip(new, new[1:])).items():
                pair_counts[p] += k * w
                pair_chunks.setdefault(p, set()).add(idx)
            chunks[idx] = new
    return BpeVocab(merges=merges, vocab_size=vocab_size)


def _apply_merges(ids: list[int], vocab: BpeVocab) -> list[int]:
    ranks = vocab._ranks
    while len(ids) >= 2:
        best_rank = None
        prev = ids[0]
        for nxt in ids[1:]:
            r = ranks.get((prev, nxt))
            if r is not None and (best_rank is None or r < best_rank):
                best_rank = r
            prev = nxt
        if best_rank is None:
            break
        ids = list(_merge_tuple(tuple(ids), vocab.merges[best_rank], BASE_VOCAB + best_rank))
    return ids


def encode(text, vocab: BpeVocab) -> TokenSequence:
    """Tokenize str or bytes. Special marker strings become their ids."""
    data = text.encode() if isinstance(text, str) else bytes(text)
    out: list[int] = []
    i = 0
    while i < len(data):
        nxt, marker, marker_id = None, None, None
        for sid, m in enumerate(_SPECIAL_BYTES):
            j = data.find(m, i)
            if j != -1 and (nxt is None or j < nxt):
                nxt, marker, marker_id = j, m, sid
        seg = data[i:] if nxt is None else data[i:nxt]
        if seg:
            cached = vocab._cache.get(seg)
            if cached is None:
                cached = tuple(_apply_merges([b + BYTE_OFFSET for b in seg], vocab))
                if len(vocab._cache) < 200_000:
                    vocab._cache[seg] = cached
            out.extend(cached)
        if nxt is None:
            break
        out.append(marker_id)
        i = nxt + len(marker)
    return TokenSequence(ids=out)


def decode_bytes(tokens, vocab: BpeVocab) -> bytes:
    ids = tokens.ids if isinstance(tokens, TokenSequence) else list(tokens)
    return b"".join(vocab.token_bytes(t) for t in ids)


def decode(tokens, vocab: BpeVocab) -> str:
    return decode_bytes(tokens, vocab).decode("utf-8", errors="strict")


def save_vocab(vocab: BpeVocab, path) -> None:
    doc = {
        "version": 1,
        "vocab_size": vocab.vocab_size,
        "specials": list(SPECIALS),
        "merges": [list(p) for p in vocab.merges],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_vocab(path) -> BpeVocab:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != 1 or doc.get("specials") != list(SPECIALS):
        raise ValueError(f"{path}: not a compatible vocabulary file")
    return BpeVocab(
        merges=[tuple(p) for p in doc["merges"]],
        vocab_size=int(doc["vocab_size"]),
    )
