import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vlhmm.brown import (BlockPartition, EmissionSupport, PartitionError, average_mutual_information,
                         brown_cluster, brown_merges, build_uniform_support, collect_bigrams,
                         load_clusters, save_clusters)
from vlhmm.corpus import Vocab
from oracles import best_merge_ami, naive_ami


def _corpus(seed, types, length=80):
    rng = np.random.default_rng(seed)
    # Markov chain so that clusters carry real structure.
    P = rng.dirichlet(np.full(types, 0.4), size=types)
    x = [int(rng.integers(types))]
    for _ in range(length - 1):
        x.append(int(rng.choice(types, p=P[x[-1]])))
    return np.array(x)


def test_bigram_counts():
    c = collect_bigrams(np.array([0, 1, 0, 1, 2]), 3)
    assert c.as_dict() == {(0, 1): 2, (1, 0): 1, (1, 2): 1}
    assert c.unigram.tolist() == [2, 2, 1]
    assert c.num_bigrams == 4


@given(st.integers(0, 10_000), st.integers(2, 8))
@settings(max_examples=30, deadline=None)
def test_ami_matches_direct_formula(seed, types):
    x = _corpus(seed, types, 60)
    rng = np.random.default_rng(seed)
    assign = rng.integers(0, 3, size=types)
    got = average_mutual_information(assign, collect_bigrams(x, types))
    assert got == pytest.approx(naive_ami(x.tolist(), assign), abs=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_greedy_merges_are_exhaustive_optimal(seed):
    types = 7
    x = _corpus(seed, types)
    counts = collect_bigrams(x, types)
    present = np.flatnonzero(counts.unigram > 0)
    for before, (i, j), _ in brown_merges(counts, 2, window=len(present)):
        clusters = [set(np.flatnonzero(before == s).tolist()) for s in range(before.max() + 1)]
        after = before.copy()
        after[after == j] = i
        chosen = naive_ami(x.tolist(), after)
        assert chosen == pytest.approx(best_merge_ami(x.tolist(), clusters, types), abs=1e-10)


def test_merge_loss_equals_ami_drop():
    x = _corpus(3, 6)
    counts = collect_bigrams(x, 6)
    for before, (i, j), loss in brown_merges(counts, 2, window=6):
        after = before.copy()
        after[after == j] = i
        drop = naive_ami(x.tolist(), before) - naive_ami(x.tolist(), after)
        assert loss == pytest.approx(drop, abs=1e-10)


def test_brown_cluster_shape_and_determinism():
    x = _corpus(1, 12, 400)
    counts = collect_bigrams(x, 14)  # two types never occur
    a = brown_cluster(counts, 4)
    b = brown_cluster(counts, 4)
    assert a == b
    assert a.num_blocks == 4
    assert sorted(set(a.word_to_block.tolist())) == [0, 1, 2, 3]
    freq = [counts.unigram[a.word_to_block == m].sum() for m in range(4)]
    assert a.word_to_block[12] == a.word_to_block[13] == int(np.argmin(freq))


def test_brown_cluster_errors():
    counts = collect_bigrams(np.array([0, 1, 2, 0]), 3)
    with pytest.raises(PartitionError):
        brown_cluster(counts, 4)
    with pytest.raises(PartitionError):
        brown_cluster(counts, 2, window=1)


def test_partition_validation():
    with pytest.raises(PartitionError):
        BlockPartition(np.array([0, 0, 2]), 3)  # block 1 empty
    p = BlockPartition(np.array([1, 0, 1]), 2)
    assert [b.tolist() for b in p.block_vocabs] == [[1], [0, 2]]


def test_support_from_partition():
    p = BlockPartition(np.array([1, 0, 1]), 2)
    s = EmissionSupport.from_partition(p, 6)
    assert s.word_to_states.tolist() == [[3, 4, 5], [0, 1, 2], [3, 4, 5]]
    assert s.block_size == 3


def test_uniform_support():
    s = build_uniform_support(16, 30, 4, 0)
    assert s.word_to_states.shape == (30, 4)
    assert all(len(set(r)) == 4 for r in s.word_to_states.tolist())
    np.testing.assert_array_equal(s.word_to_states, build_uniform_support(16, 30, 4, 0).word_to_states)
    with pytest.raises(PartitionError):
        build_uniform_support(4, 3, 5, 0)


def test_clusters_file_roundtrip_and_errors(tmp_path):
    vocab = Vocab(("a", "b", "<unk>", "<eos>"))
    part = BlockPartition(np.array([0, 1, 1, 0]), 2)
    path = tmp_path / "c.tsv"
    save_clusters(path, part, vocab)
    assert load_clusters(path, vocab, 2) == part
    with pytest.raises(PartitionError):
        load_clusters(path, vocab, 3)
    bad = tmp_path / "bad.tsv"
    bad.write_text("a\t0\nb\t1\n")
    with pytest.raises(PartitionError, match="missing"):
        load_clusters(bad, vocab)
    bad.write_text("a\t0\na\t1\n")
    with pytest.raises(PartitionError, match="twice"):
        load_clusters(bad, vocab)
    bad.write_text("zz\t0\n")
    with pytest.raises(PartitionError, match="not in vocabulary"):
        load_clusters(bad, vocab)
