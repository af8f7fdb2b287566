"""Corpus loading, vocabulary construction, encoding and stream batching."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

UNK = "<unk>"
EOS = "<eos>"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]
    index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise CorpusError("duplicate tokens in vocabulary")
        for special in (UNK, EOS):
            if special not in index:
                raise CorpusError(f"vocabulary is missing {special}")
        object.__setattr__(self, "index", index)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(tok + "\n" for tok in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


@dataclass(frozen=True)
class EncodedCorpus:
    ids: np.ndarray
    vocab_size: int

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def counts(self) -> np.ndarray:
        return np.bincount(self.ids, minlength=self.vocab_size)


@dataclass(frozen=True)
class BatchPlan:
    """``B`` contiguous streams, each cut into ``num_segments`` segments of length ``L``."""

    streams: np.ndarray  # (B, num_segments * L)
    segment_len: int

    @property
    def batch_size(self) -> int:
        return self.streams.shape[0]

    @property
    def num_segments(self) -> int:
        return self.streams.shape[1] // self.segment_len

    def segment(self, i: int) -> np.ndarray:
        L = self.segment_len
        return self.streams[:, i * L:(i + 1) * L]

    def __iter__(self) -> Iterator[tuple[np.ndarray, bool]]:
        for i in range(self.num_segments):
            yield self.segment(i), i > 0


def load_corpus(path: str | Path, lowercase: bool = False) -> list[list[str]]:
    """Read whitespace-tokenized lines, appending ``<eos>`` to each.

    A blank line becomes a lone ``<eos>``.
    """
    text = Path(path).read_text(encoding="utf-8")
    if text == "":
        raise CorpusError("empty corpus")
    if lowercase:
        text = text.lower()
    lines = text.split("\n")
    if lines[-1] == "":
        lines.pop()
    return [line.split() + [EOS] for line in lines]


def flatten(sentences: Iterable[Sequence[str]]) -> list[str]:
    return [tok for sent in sentences for tok in sent]


def build_vocab(train_tokens: Iterable[str], min_count: int = 1) -> Vocab:
    """Vocabulary from training tokens only.

    Tokens seen fewer than ``min_count`` times fold into ``<unk>``.  Order is
    by descending count (``<unk>`` carrying the folded mass), ties broken
    lexicographically.
    """
    counts = Counter(train_tokens)
    kept: Counter = Counter()
    unk = counts.pop(UNK, 0)
    for tok, c in counts.items():
        if c >= min_count or tok == EOS:
            kept[tok] = c
        else:
            unk += c
    kept[UNK] = unk
    kept.setdefault(EOS, 0)
    ordered = sorted(kept.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(tuple(tok for tok, _ in ordered))


def encode(tokens: Sequence[str], vocab: Vocab) -> EncodedCorpus:
    unk = vocab.unk_id
    ids = np.fromiter((vocab.index.get(t, unk) for t in tokens), dtype=np.int64, count=len(tokens))
    return EncodedCorpus(ids, len(vocab))


def make_batches(encoded: EncodedCorpus | np.ndarray, batch_size: int, segment_len: int) -> BatchPlan:
    """Row-major split into ``batch_size`` equal streams cut into segments.

    Tail tokens that do not fill a whole segment on every stream are dropped.
    """
    ids = encoded.ids if isinstance(encoded, EncodedCorpus) else np.asarray(encoded)
    if batch_size < 1 or segment_len < 1:
        raise CorpusError("batch_size and segment_len must be positive")
    if len(ids) < batch_size * segment_len:
        raise CorpusError(
            f"corpus of {len(ids)} tokens is shorter than B*L = {batch_size * segment_len}"
        )
    stream_len = len(ids) // batch_size
    streams = ids[: batch_size * stream_len].reshape(batch_size, stream_len)
    usable = (stream_len // segment_len) * segment_len
    return BatchPlan(np.ascontiguousarray(streams[:, :usable]), segment_len)


def split_streams(ids: np.ndarray, num_streams: int) -> list[np.ndarray]:
    """Evaluation layout: contiguous streams covering every token."""
    num_streams = max(1, min(num_streams, len(ids)))
    return [s for s in np.array_split(np.asarray(ids), num_streams)]
