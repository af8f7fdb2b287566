"""Emission-block construction: Brown clustering and random state supports."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import sparse

from .corpus import EncodedCorpus, Vocab

log = logging.getLogger(__name__)


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class BigramCounts:
    unigram: np.ndarray  # (V,)
    prev_ids: np.ndarray
    next_ids: np.ndarray
    counts: np.ndarray

    @property
    def vocab_size(self) -> int:
        return len(self.unigram)

    @property
    def total(self) -> int:
        return int(self.unigram.sum())

    @property
    def num_bigrams(self) -> int:
        return int(self.counts.sum())

    def as_dict(self) -> dict[tuple[int, int], int]:
        return {(int(a), int(b)): int(c) for a, b, c in zip(self.prev_ids, self.next_ids, self.counts)}

    def matrix(self) -> sparse.csr_matrix:
        V = self.vocab_size
        return sparse.csr_matrix(
            (self.counts.astype(np.float64), (self.prev_ids, self.next_ids)), shape=(V, V)
        )


@dataclass(frozen=True)
class BlockPartition:
    word_to_block: np.ndarray
    num_blocks: int
    block_vocabs: tuple[np.ndarray, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        w2b = np.asarray(self.word_to_block, dtype=np.int64)
        if w2b.ndim != 1 or len(w2b) == 0:
            raise PartitionError("word_to_block must be a nonempty vector")
        if w2b.min() < 0 or w2b.max() >= self.num_blocks:
            raise PartitionError("block id out of range")
        blocks = tuple(np.flatnonzero(w2b == m) for m in range(self.num_blocks))
        if any(len(b) == 0 for b in blocks):
            raise PartitionError("every block must own at least one word")
        object.__setattr__(self, "word_to_block", w2b)
        object.__setattr__(self, "block_vocabs", blocks)

    @property
    def vocab_size(self) -> int:
        return len(self.word_to_block)

    def __eq__(self, other):
        return (isinstance(other, BlockPartition) and self.num_blocks == other.num_blocks
                and np.array_equal(self.word_to_block, other.word_to_block))

    def __hash__(self):
        return hash((self.num_blocks, self.word_to_block.tobytes()))


@dataclass(frozen=True)
class EmissionSupport:
    """Which states may emit each word.

    ``word_to_states[w]`` lists the state ids admitting word ``w``.  When
    built from a partition, block ``m`` owns states ``[m*k, (m+1)*k)``.
    """

    word_to_states: np.ndarray  # (V, n)
    num_states: int
    partition: BlockPartition | None = None

    @classmethod
    def from_partition(cls, partition: BlockPartition, num_states: int) -> "EmissionSupport":
        if num_states % partition.num_blocks:
            raise PartitionError(
                f"{num_states} states do not split evenly into {partition.num_blocks} blocks"
            )
        k = num_states // partition.num_blocks
        w2s = partition.word_to_block[:, None] * k + np.arange(k)[None, :]
        return cls(w2s, num_states, partition)

    @property
    def states_per_word(self) -> int:
        return self.word_to_states.shape[1]

    @property
    def block_size(self) -> int:
        if self.partition is None:
            raise PartitionError("support is not block structured")
        return self.num_states // self.partition.num_blocks


def collect_bigrams(encoded: EncodedCorpus | np.ndarray, vocab_size: int | None = None) -> BigramCounts:
    """Adjacent-pair counts over the whole stream; eos is an ordinary token."""
    if isinstance(encoded, EncodedCorpus):
        ids, V = encoded.ids, encoded.vocab_size
    else:
        ids = np.asarray(encoded, dtype=np.int64)
        V = vocab_size if vocab_size is not None else (int(ids.max()) + 1 if len(ids) else 0)
    unigram = np.bincount(ids, minlength=V).astype(np.int64)
    if len(ids) < 2:
        empty = np.zeros(0, dtype=np.int64)
        return BigramCounts(unigram, empty, empty, empty)
    codes = ids[:-1] * V + ids[1:]
    uniq, counts = np.unique(codes, return_counts=True)
    return BigramCounts(unigram, uniq // V, uniq % V, counts.astype(np.int64))


def _plogp_ratio(n, left, right, total):
    """n/T * log(n T / (left right)); zero where n == 0."""
    n = np.asarray(n, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = n / total * np.log(n * total / (left * right))
    return np.where(n > 0, out, 0.0)


def average_mutual_information(assignment: Sequence[int] | np.ndarray, counts: BigramCounts) -> float:
    """Mutual information (nats) between adjacent cluster occurrences.

    Marginals are the left/right marginals of the cluster bigram table.
    """
    total = counts.num_bigrams
    if total == 0:
        return 0.0
    assignment = np.asarray(assignment, dtype=np.int64)
    left = assignment[counts.prev_ids]
    right = assignment[counts.next_ids]
    C = int(assignment.max()) + 1
    joint = np.bincount(left * C + right, weights=counts.counts, minlength=C * C).reshape(C, C)
    pl = joint.sum(axis=1)
    pr = joint.sum(axis=0)
    return float(_plogp_ratio(joint, pl[:, None], pr[None, :], total).sum())


@dataclass
class _Window:
    """Dense cluster-bigram statistics for the clusters currently in play."""

    total: float
    N: np.ndarray
    pl: np.ndarray
    pr: np.ndarray
    ids: list[int]
    members: list[list[int]]

    def merge_losses(self) -> np.ndarray:
        """AMI lost by merging each pair (i < j); +inf on and below the diagonal."""
        N, pl, pr, T = self.N, self.pl, self.pr, self.total
        C = len(pl)
        Q = _plogp_ratio(N, pl[:, None], pr[None, :], T)
        rowq, colq, dq = Q.sum(axis=1), Q.sum(axis=0), np.diag(Q)
        losses = np.full((C, C), np.inf)
        chunk = max(1, 4_000_000 // max(1, C * C))
        for lo in range(0, C, chunk):
            i = np.arange(lo, min(C, lo + chunk))
            removed = (rowq[i, None] + rowq[None, :] + colq[i, None] + colq[None, :]
                       - dq[i, None] - dq[None, :] - Q[i, :] - Q[:, i].T)
            plu = pl[i, None] + pl[None, :]
            pru = pr[i, None] + pr[None, :]
            nrow = N[i, None, :] + N[None, :, :]  # (ci, j, c): merged cluster -> c
            ncol = N[:, i].T[:, None, :] + N.T[None, :, :]  # (ci, j, c): c -> merged cluster
            rows = _plogp_ratio(nrow, plu[:, :, None], pr[None, None, :], T).sum(axis=2)
            cols = _plogp_ratio(ncol, pl[None, None, :], pru[:, :, None], T).sum(axis=2)
            # Drop the c in {i, j} terms, replaced by the merged self-transition.
            jj = np.arange(C)
            rows -= _plogp_ratio(nrow[np.arange(len(i)), :, i], plu, pr[i, None], T)
            rows -= _plogp_ratio(nrow[:, jj, jj], plu, pr[None, :], T)
            cols -= _plogp_ratio(ncol[np.arange(len(i)), :, i], pl[i, None], pru, T)
            cols -= _plogp_ratio(ncol[:, jj, jj], pl[None, :], pru, T)
            nself = N[i, i][:, None] + N[i, :] + N[:, i].T + np.diag(N)[None, :]
            selfq = _plogp_ratio(nself, plu, pru, T)
            loss = removed - (rows + cols + selfq)
            keep = jj[None, :] > i[:, None]
            losses[i] = np.where(keep, loss, np.inf)
        return losses

    def merge(self, i: int, j: int) -> None:
        N = self.N
        N[i, :] += N[j, :]
        N[:, i] += N[:, j]
        self.N = np.delete(np.delete(N, j, axis=0), j, axis=1)
        self.pl[i] += self.pl[j]
        self.pr[i] += self.pr[j]
        self.pl = np.delete(self.pl, j)
        self.pr = np.delete(self.pr, j)
        self.members[i].extend(self.members.pop(j))
        self.ids.pop(j)

    def assignment(self, vocab_size: int) -> np.ndarray:
        out = np.full(vocab_size, -1, dtype=np.int64)
        for slot, words in enumerate(self.members):
            out[words] = slot
        return out


def brown_merges(counts: BigramCounts, M: int, window: int | None = None) -> Iterator[tuple[np.ndarray, tuple[int, int], float]]:
    """Run windowed greedy Brown clustering, yielding each merge.

    Yields ``(assignment_before, (i, j), loss)`` where the assignment maps
    words to window slots (``-1`` for words not yet inserted) and ``i < j``
    are the slots merged.  The final window state is returned via
    ``StopIteration.value``.
    """
    V = counts.vocab_size
    order = [int(w) for w in sorted(np.flatnonzero(counts.unigram > 0), key=lambda w: (-counts.unigram[w], w))]
    if M < 1 or M > len(order):
        raise PartitionError(f"M={M} must be in [1, {len(order)}] (number of counted word types)")
    window = M + 1 if window is None else window
    if window < M:
        raise PartitionError("window must be at least M")
    mat = counts.matrix()
    csr, csc = mat.tocsr(), mat.tocsc()
    T = float(counts.num_bigrams)
    slot_of = np.full(V, -1, dtype=np.int64)
    state = _Window(T, np.zeros((0, 0)), np.zeros(0), np.zeros(0), [], [])
    pl_all = np.asarray(mat.sum(axis=1)).ravel()
    pr_all = np.asarray(mat.sum(axis=0)).ravel()

    def insert(rank: int, w: int):
        C = len(state.ids)
        row = csr.getrow(w)
        col = csc.getcol(w)
        out = np.zeros(C + 1)
        inn = np.zeros(C + 1)
        rc, rv = row.indices, row.data
        ok = slot_of[rc] >= 0
        np.add.at(out, slot_of[rc[ok]], rv[ok])
        cr, cv = col.indices, col.data
        ok = slot_of[cr] >= 0
        np.add.at(inn, slot_of[cr[ok]], cv[ok])
        self_count = mat[w, w]
        N = np.zeros((C + 1, C + 1))
        N[:C, :C] = state.N
        N[C, :C] = out[:C]
        N[:C, C] = inn[:C]
        N[C, C] = self_count
        state.N = N
        state.pl = np.append(state.pl, pl_all[w])
        state.pr = np.append(state.pr, pr_all[w])
        state.ids.append(rank)
        state.members.append([w])
        slot_of[w] = C

    def merge_best():
        losses = state.merge_losses()
        flat = int(np.argmin(losses))
        i, j = divmod(flat, losses.shape[1])
        return i, j, float(losses[i, j])

    def do_merge(i, j):
        for w in state.members[j]:
            slot_of[w] = i
        state.merge(i, j)
        slot_of[slot_of > j] -= 1

    for rank, w in enumerate(order[:window]):
        insert(rank, w)
    for rank in range(window, len(order)):
        insert(rank, order[rank])
        i, j, loss = merge_best()
        yield slot_of.copy(), (i, j), loss
        do_merge(i, j)
    while len(state.ids) > M:
        i, j, loss = merge_best()
        yield slot_of.copy(), (i, j), loss
        do_merge(i, j)
    return state


def brown_cluster(counts: BigramCounts, M: int, window: int | None = None) -> BlockPartition:
    """Partition the vocabulary into ``M`` blocks by greedy AMI-preserving merges.

    Words that never occur are placed in the final cluster with the lowest
    total frequency.
    """
    gen = brown_merges(counts, M, window)
    steps = 0
    while True:
        try:
            next(gen)
            steps += 1
        except StopIteration as stop:
            state = stop.value
            break
    log.info("brown clustering: %d merges into %d blocks", steps, M)
    w2b = state.assignment(counts.vocab_size)
    if (w2b < 0).any():
        freq = [counts.unigram[m].sum() for m in state.members]
        w2b[w2b < 0] = int(np.argmin(freq))
    return BlockPartition(w2b, M)


def build_uniform_support(num_states: int, vocab_size: int, n: int, seed: int | np.random.Generator) -> EmissionSupport:
    """Each word admits an independent uniformly random ``n``-subset of states."""
    if not 1 <= n <= num_states:
        raise PartitionError(f"n={n} must be in [1, {num_states}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w2s = np.empty((vocab_size, n), dtype=np.int64)
    for w in range(vocab_size):
        w2s[w] = np.sort(rng.choice(num_states, size=n, replace=False))
    return EmissionSupport(w2s, num_states, None)


def save_clusters(path: str | Path, partition: BlockPartition, vocab: Vocab) -> None:
    if partition.vocab_size != len(vocab):
        raise PartitionError("partition and vocabulary sizes differ")
    with open(path, "w", encoding="utf-8") as f:
        for tok, b in zip(vocab.tokens, partition.word_to_block):
            f.write(f"{tok}\t{int(b)}\n")


def load_clusters(path: str | Path, vocab: Vocab, num_blocks: int | None = None) -> BlockPartition:
    w2b = np.full(len(vocab), -1, dtype=np.int64)
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise PartitionError(f"{path}:{lineno}: expected 'word<TAB>block_id'")
            tok, b = parts
            try:
                block = int(b)
            except ValueError:
                raise PartitionError(f"{path}:{lineno}: bad block id {b!r}") from None
            if tok not in vocab.index:
                raise PartitionError(f"{path}:{lineno}: word {tok!r} not in vocabulary")
            wid = vocab.index[tok]
            if w2b[wid] >= 0:
                raise PartitionError(f"{path}:{lineno}: word {tok!r} listed twice")
            w2b[wid] = block
    missing = np.flatnonzero(w2b < 0)
    if len(missing):
        raise PartitionError(f"{len(missing)} vocabulary words missing from {path}, e.g. {vocab.tokens[missing[0]]!r}")
    M = int(w2b.max()) + 1
    if num_blocks is not None and M != num_blocks:
        raise PartitionError(f"{path} has {M} blocks, expected {num_blocks}")
    return BlockPartition(w2b, M)
