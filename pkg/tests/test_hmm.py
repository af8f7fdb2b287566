import itertools

import numpy as np
import pytest

from vlhmm.brown import BlockPartition, EmissionSupport, build_uniform_support
from vlhmm.hmm import (DropoutMask, FilterState, InferenceError, apply_mask, brute_force_loglik, forward_backward,
                       forward_batch, forward_dense, forward_scan, forward_serial, random_dist_params,
                       sample_sequence)
from oracles import central_diff, loop_forward


def blocked(rng, M=2, k=2, V=5, dtype=np.float64):
    w2b = np.concatenate([np.arange(M), rng.integers(0, M, V - M)])
    rng.shuffle(w2b)
    sup = EmissionSupport.from_partition(BlockPartition(w2b, M), M * k)
    return random_dist_params(sup.word_to_states, M * k, rng, block_size=k, dtype=dtype)


@pytest.mark.parametrize("seed", range(10))
def test_serial_matches_brute_force_and_loop(seed):
    rng = np.random.default_rng(seed)
    d = blocked(rng, M=2, k=2)
    x = rng.integers(0, 5, size=5)
    lp, _ = forward_serial(d, x)
    assert lp == pytest.approx(brute_force_loglik(d, x), rel=1e-12)
    assert lp == pytest.approx(loop_forward(d.log_A, d.dense_log_emission(), d.log_pi, x), rel=1e-12)


def test_uniform_support_matches_brute_force():
    rng = np.random.default_rng(1)
    sup = build_uniform_support(5, 4, 2, rng)
    d = random_dist_params(sup.word_to_states, 5, rng)
    x = rng.integers(0, 4, size=5)
    assert forward_serial(d, x)[0] == pytest.approx(brute_force_loglik(d, x), rel=1e-12)


def test_reset_token_splits_sentences():
    rng = np.random.default_rng(2)
    d = blocked(rng)
    eos = 4
    x = np.array([0, 1, eos, 2, 3, eos, 1])
    whole = forward_serial(d, x, reset_token=eos)[0]
    parts = [x[:3], x[3:6], x[6:]]
    assert whole == pytest.approx(sum(forward_serial(d, p)[0] for p in parts), rel=1e-12)
    assert whole == pytest.approx(brute_force_loglik(d, x, reset_token=eos), rel=1e-12)
    assert whole == pytest.approx(forward_dense(d.log_A, d.dense_log_emission(), d.log_pi, x, eos), rel=1e-12)


def test_carry_equals_unsegmented():
    rng = np.random.default_rng(3)
    d = blocked(rng, M=3, k=2, V=7)
    X = rng.integers(0, 7, size=(4, 12))
    full = forward_batch(d, X)
    first = forward_batch(d, X[:, :5])
    second = forward_batch(d, X[:, 5:], first.final)
    np.testing.assert_allclose(first.loglik + second.loglik, full.loglik, rtol=1e-12)


def test_scan_trees_agree():
    rng = np.random.default_rng(4)
    d = blocked(rng, M=2, k=3, V=6)
    x = rng.integers(0, 6, size=13)
    ref = forward_serial(d, x)[0]
    assert forward_scan(d, x, tree="balanced") == pytest.approx(ref, rel=1e-12)
    assert forward_scan(d, x, tree="left") == pytest.approx(ref, rel=1e-12)
    with pytest.raises(ValueError):
        forward_scan(d, x, tree="zigzag")


def test_expected_counts_are_log_table_gradients():
    rng = np.random.default_rng(5)
    d = blocked(rng, M=2, k=2, V=5)
    X = rng.integers(0, 5, size=(2, 4))
    _, post = forward_backward(d, X)

    def total(**tables):
        import dataclasses
        dd = dataclasses.replace(d, **tables)
        return float(forward_batch(dd, X).loglik.sum())

    gA = central_diff(lambda v: total(log_A=v), d.log_A)
    gE = central_diff(lambda v: total(log_emit=v), d.log_emit)
    gP = central_diff(lambda v: total(log_pi=v), d.log_pi)
    np.testing.assert_allclose(post.transition_expectations, gA, atol=1e-6)
    np.testing.assert_allclose(post.emission_expectations, gE, atol=1e-6)
    np.testing.assert_allclose(post.start_expectations, gP, atol=1e-6)
    # Every non-initial step contributes one unit of transition mass per row.
    assert post.transition_expectations.sum() == pytest.approx(2 * 3)
    np.testing.assert_allclose(post.state_marginals.sum(axis=2), 1)


def test_masked_model_is_normalized():
    rng = np.random.default_rng(6)
    d = blocked(rng, M=2, k=3, V=4)
    mask = DropoutMask(np.array([1, 0, 1, 0, 1, 1], dtype=bool), 1 / 3)
    md = apply_mask(d, mask)
    assert md.size == 4 and md.block_size == 2
    for T in (1, 2, 3):
        total = sum(np.exp(forward_serial(md, np.array(x))[0]) for x in itertools.product(range(4), repeat=T))
        assert total == pytest.approx(1, abs=1e-10)
    np.testing.assert_array_equal(md.states, [0, 2, 4, 5])


def test_unbalanced_mask_rejected():
    rng = np.random.default_rng(7)
    d = blocked(rng, M=2, k=2)
    with pytest.raises(InferenceError):
        apply_mask(d, DropoutMask(np.array([1, 1, 1, 0], dtype=bool), 0.25))
    with pytest.raises(InferenceError):
        apply_mask(d, DropoutMask(np.array([0, 0, 1, 1], dtype=bool), 0.5))


def test_carry_across_masks_restarts_when_all_dropped():
    rng = np.random.default_rng(8)
    d = blocked(rng, M=1, k=2, V=3)
    x = np.array([0, 1])
    carry = FilterState(np.array([0]), np.array([[1.0, 0.0]]))
    only_second = apply_mask(d, DropoutMask(np.array([False, True]), 0.5))
    lat = forward_batch(only_second, x[None], carry)
    # State 0 is gone, so the row restarts from the masked start distribution.
    assert lat.loglik[0] == pytest.approx(forward_serial(only_second, x)[0], rel=1e-12)


def test_bad_input():
    rng = np.random.default_rng(9)
    d = blocked(rng)
    with pytest.raises(InferenceError):
        forward_batch(d, np.array([[0, 99]]))
    with pytest.raises(InferenceError):
        forward_batch(d, np.zeros((1, 0), dtype=int))


def test_sample_respects_support_and_seed():
    rng = np.random.default_rng(10)
    d = blocked(rng, M=2, k=2, V=6)
    x, z = sample_sequence(d, 200, np.random.default_rng(0))
    assert all(z[t] in d.support[x[t]] for t in range(200))
    x2, _ = sample_sequence(d, 200, np.random.default_rng(0))
    np.testing.assert_array_equal(x, x2)


def test_float32_path():
    rng = np.random.default_rng(11)
    d = blocked(rng, M=4, k=4, V=12)
    x = rng.integers(0, 12, size=40)
    ref = forward_serial(d, x)[0]
    lp32 = forward_serial(d.astype(np.float32), x)[0]
    assert lp32 == pytest.approx(ref, rel=1e-5)
