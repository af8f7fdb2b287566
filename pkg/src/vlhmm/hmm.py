"""Blocked-emission HMM tables, state masking and exact inference.

States are stored "materialized": a model under dropout keeps only its
active states, relabelled ``0..S-1`` in block order.  ``DistParams.states``
maps those local ids back to global state ids.  Emissions are stored per
word over the states admitting it: ``log_emit[w, j] = log O[support[w, j], w]``.
"""

from __future__ import annotations

import dataclasses
import itertools
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .numerics import logsumexp

BRUTE_FORCE_LIMIT = 10**7


class InferenceError(ValueError):
    pass


@dataclass(frozen=True)
class DistParams:
    log_A: np.ndarray  # (S, S), row = source state
    log_pi: np.ndarray  # (S,)
    log_emit: np.ndarray  # (V, n)
    support: np.ndarray  # (V, n) local state ids
    states: np.ndarray  # (S,) global state ids
    num_states: int  # global |Z|
    block_size: int | None = None  # n, when block m owns local states [m*n, (m+1)*n)

    @property
    def size(self) -> int:
        return len(self.states)

    @property
    def vocab_size(self) -> int:
        return self.log_emit.shape[0]

    @property
    def num_blocks(self) -> int | None:
        return None if self.block_size is None else self.size // self.block_size

    @cached_property
    def A(self) -> np.ndarray:
        return np.exp(self.log_A)

    @cached_property
    def A_blocks(self) -> np.ndarray:
        """(M, M, n, n) contiguous copy of ``A``: ``[src block, dst block]`` tiles."""
        n, M = self.block_size, self.num_blocks
        return np.ascontiguousarray(self.A.reshape(M, n, M, n).transpose(0, 2, 1, 3))

    @cached_property
    def pi(self) -> np.ndarray:
        return np.exp(self.log_pi)

    @cached_property
    def emit(self) -> np.ndarray:
        return np.exp(self.log_emit)

    @cached_property
    def word_block(self) -> np.ndarray:
        if self.block_size is None:
            raise InferenceError("model is not block structured")
        return self.support[:, 0] // self.block_size

    def dense_log_emission(self) -> np.ndarray:
        """(S, V) emission log-table with ``-inf`` outside each word's support."""
        out = np.full((self.size, self.vocab_size), -np.inf, dtype=self.log_emit.dtype)
        words = np.broadcast_to(np.arange(self.vocab_size)[:, None], self.support.shape)
        out[self.support, words] = self.log_emit
        return out

    @property
    def log_O_blocks(self) -> list[np.ndarray]:
        """Per-block ``k x |X_m|`` emission log-tables."""
        wb = self.word_block
        return [self.log_emit[wb == m].T for m in range(self.num_blocks)]

    def astype(self, dtype) -> "DistParams":
        return dataclasses.replace(
            self, log_A=self.log_A.astype(dtype), log_pi=self.log_pi.astype(dtype),
            log_emit=self.log_emit.astype(dtype),
        )


@dataclass(frozen=True)
class DropoutMask:
    b: np.ndarray  # (|Z|,) bool
    rate: float

    def active_per_block(self, block_size: int) -> np.ndarray:
        return self.b.reshape(-1, block_size).sum(axis=1)


def active_count(block_size: int, rate: float) -> int:
    return int(np.ceil((1.0 - rate) * block_size - 1e-9))


@dataclass
class FilterState:
    """Per-row filtering distribution carried between segments.

    ``last_token[b] < 0`` means the row starts fresh from the start
    distribution.  ``probs`` is indexed by global state id.
    """

    last_token: np.ndarray  # (B,)
    probs: np.ndarray  # (B, |Z|)

    @classmethod
    def fresh(cls, batch_size: int, num_states: int, dtype=np.float64) -> "FilterState":
        return cls(np.full(batch_size, -1, dtype=np.int64), np.zeros((batch_size, num_states), dtype=dtype))

    def copy(self) -> "FilterState":
        return FilterState(self.last_token.copy(), self.probs.copy())


@dataclass
class Lattice:
    alpha: np.ndarray  # (T, B, n) normalized filtering distributions over each token's support
    log_norms: np.ndarray  # (T, B)
    final: FilterState

    @property
    def loglik(self) -> np.ndarray:
        return self.log_norms.sum(axis=0)


@dataclass
class Posteriors:
    state_marginals: np.ndarray  # (T, B, n)
    transition_expectations: np.ndarray  # (S, S)
    emission_expectations: np.ndarray  # (V, n)
    start_expectations: np.ndarray  # (S,)


def apply_mask(dist: DistParams, mask: DropoutMask) -> DistParams:
    """Restrict a block-structured model to the states active under ``mask``.

    Transition and start rows are renormalized over the surviving states;
    emissions of surviving states are unchanged.
    """
    if dist.block_size is None:
        raise InferenceError("state dropout needs block-structured emissions")
    n = dist.block_size
    active = np.asarray(mask.b, dtype=bool)[dist.states]
    per_block = active.reshape(-1, n).sum(axis=1)
    if (per_block == 0).any():
        raise InferenceError("dropout mask removes every state of some block")
    if (per_block != per_block[0]).any():
        raise InferenceError("dropout mask is not block balanced")
    keep = np.flatnonzero(active)
    n_new = int(per_block[0])
    log_A = dist.log_A[np.ix_(keep, keep)]
    log_A = log_A - logsumexp(log_A, axis=1, keepdims=True)
    log_pi = dist.log_pi[keep] - logsumexp(dist.log_pi[keep])
    positions = keep.reshape(-1, n_new) % n  # (M, n_new) surviving slots per block
    wb = dist.word_block
    log_emit = np.take_along_axis(dist.log_emit, positions[wb], axis=1)
    support = wb[:, None] * n_new + np.arange(n_new)[None, :]
    return DistParams(log_A, log_pi, log_emit, support, dist.states[keep], dist.num_states, n_new)


def _transition_blocks(dist: DistParams, prev_tok: np.ndarray, cur_tok: np.ndarray) -> np.ndarray:
    """(B, n, n) probabilities A[support(prev), support(cur)]."""
    if dist.block_size is not None:
        wb = dist.word_block
        return dist.A_blocks[wb[prev_tok], wb[cur_tok]]
    sp = dist.support[prev_tok]
    sc = dist.support[cur_tok]
    return dist.A[sp[:, :, None], sc[:, None, :]]


def _accumulate_transitions(dist: DistParams, out: np.ndarray, prev_tok, cur_tok, xi) -> None:
    if not len(prev_tok):
        return
    if dist.block_size is not None:
        n, M = dist.block_size, dist.num_blocks
        g4 = np.zeros((M, M, n, n), dtype=out.dtype)
        np.add.at(g4, (dist.word_block[prev_tok], dist.word_block[cur_tok]), xi)
        out += g4.transpose(0, 2, 1, 3).reshape(M * n, M * n)
        return
    S = dist.size
    flat = dist.support[prev_tok][:, :, None] * S + dist.support[cur_tok][:, None, :]
    out += np.bincount(flat.ravel(), weights=xi.ravel(), minlength=S * S).reshape(S, S).astype(out.dtype)


def _carry_in(dist: DistParams, carry: FilterState, reset_token: int | None):
    """Previous-token ids, previous filtering distribution and reset flags for t = 0."""
    last = carry.last_token
    B = len(last)
    n = dist.support.shape[1]
    reset = last < 0
    if reset_token is not None:
        reset |= last == reset_token
    safe = np.where(reset, 0, last)
    glob = dist.states[dist.support[safe]]
    alpha = np.take_along_axis(carry.probs, glob, axis=1).astype(dist.A.dtype)
    mass = alpha.sum(axis=1)
    # Carried states all dropped under the current mask: restart the row.
    reset |= mass <= 0
    alpha = np.where(reset[:, None], 0, alpha / np.where(mass > 0, mass, 1)[:, None])
    assert alpha.shape == (B, n)
    return safe, alpha, reset


def _run_forward(dist: DistParams, X: np.ndarray, carry: FilterState | None,
                 reset_token: int | None, keep: bool):
    X = np.asarray(X, dtype=np.int64)
    if X.ndim == 1:
        X = X[None, :]
    B, T = X.shape
    if T == 0:
        raise InferenceError("empty sequence")
    if X.min() < 0 or X.max() >= dist.vocab_size:
        raise InferenceError("token id out of vocabulary")
    if carry is None:
        carry = FilterState.fresh(B, dist.num_states, dist.A.dtype)
    dtype = dist.A.dtype
    n = dist.support.shape[1]
    prev, alpha, reset = _carry_in(dist, carry, reset_token)
    rows = np.arange(B)
    alphas = np.empty((T, B, n), dtype=dtype)
    log_norms = np.empty((T, B), dtype=dtype)
    trace = [] if keep else None
    for t in range(T):
        cur = X[:, t]
        if t > 0:
            prev = X[:, t - 1]
            reset = np.zeros(B, dtype=bool) if reset_token is None else prev == reset_token
        P = None
        if not reset.any():
            P = _transition_blocks(dist, prev, cur)
            pred = np.matmul(alpha[:, None, :], P)[:, 0, :]
        else:
            go = ~reset
            pred = np.empty((B, n), dtype=dtype)
            if go.any():
                P = _transition_blocks(dist, prev[go], cur[go])
                pred[go] = np.matmul(alpha[go][:, None, :], P)[:, 0, :]
            pred[reset] = dist.pi[dist.support[cur[reset]]]
        u = pred * dist.emit[cur]
        c = u.sum(axis=1)
        alpha_prev = alpha
        if c.min() > 0:
            log_norms[t] = np.log(c)
            alpha = u / c[:, None]
        else:
            ok = c > 0
            with np.errstate(divide="ignore"):
                log_norms[t] = np.log(c)
            alpha = np.where(ok[:, None], u / np.where(ok, c, 1)[:, None], 0).astype(dtype)
        alphas[t] = alpha
        if keep:
            trace.append((prev, alpha_prev, reset, P, c))
    final_probs = np.zeros((B, dist.num_states), dtype=dtype)
    final_probs[rows[:, None], dist.states[dist.support[X[:, -1]]]] = alpha
    lattice = Lattice(alphas, log_norms, FilterState(X[:, -1].copy(), final_probs))
    return X, lattice, trace


def forward_batch(dist: DistParams, X, carry: FilterState | None = None,
                  reset_token: int | None = None) -> Lattice:
    """Scaled forward pass over a (B, T) batch of rows."""
    return _run_forward(dist, X, carry, reset_token, keep=False)[1]


def forward_serial(dist: DistParams, x, init: np.ndarray | None = None,
                   carry: FilterState | None = None, reset_token: int | None = None):
    """``(log p(x), final FilterState)`` for one sequence.

    ``init`` optionally replaces the start distribution (probabilities over
    materialized states); ``carry`` continues from a previous segment.
    """
    if init is not None:
        with np.errstate(divide="ignore"):
            dist = dataclasses.replace(dist, log_pi=np.log(np.asarray(init, dtype=dist.log_pi.dtype)))
    lat = forward_batch(dist, np.asarray(x)[None, :], carry, reset_token)
    return float(lat.loglik[0]), lat.final


def forward_backward(dist: DistParams, X, carry: FilterState | None = None,
                     reset_token: int | None = None):
    """Forward pass plus expected counts summed over rows.

    The expected counts are the gradients of ``sum_b log p(x_b)`` w.r.t.
    ``log_A``, ``log_emit`` and ``log_pi`` taken as free tables.  Returns
    ``(Lattice, Posteriors)``.
    """
    X, lat, trace = _run_forward(dist, X, carry, reset_token, keep=True)
    T, B, n = lat.alpha.shape
    dtype = lat.alpha.dtype
    trans = np.zeros((dist.size, dist.size), dtype=dtype)
    emit = np.zeros(dist.log_emit.shape, dtype=dtype)
    start = np.zeros(dist.size, dtype=dtype)
    gammas = np.empty_like(lat.alpha)
    beta = np.ones((B, n), dtype=dtype)
    for t in range(T - 1, -1, -1):
        prev, alpha_prev, reset, P, c = trace[t]
        cur = X[:, t]
        gamma = lat.alpha[t] * beta
        gammas[t] = gamma
        np.add.at(emit, cur, gamma)
        safe_c = np.where(c > 0, c, np.inf)
        w = dist.emit[cur] * beta / safe_c[:, None]
        new_beta = np.ones((B, n), dtype=dtype)
        if reset.any():
            np.add.at(start, dist.support[cur[reset]], gamma[reset])
        go = ~reset
        if go.any():
            wg = w[go]
            xi = alpha_prev[go][:, :, None] * P * wg[:, None, :]
            _accumulate_transitions(dist, trans, prev[go], cur[go], xi)
            new_beta[go] = np.matmul(P, wg[:, :, None])[:, :, 0]
        beta = new_beta
    return lat, Posteriors(gammas, trans, emit, start)


def _log_matmul(X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    return logsumexp(X[..., :, :, None] + Y[..., None, :, :], axis=-2)


def scan_operators(dist: DistParams, x, reset_token: int | None = None) -> np.ndarray:
    """(T, n, n) log-space step operators; the first is the start row broadcast."""
    x = np.asarray(x, dtype=np.int64)
    T = len(x)
    n = dist.support.shape[1]
    ops = np.empty((T, n, n), dtype=dist.log_A.dtype)
    for t in range(T):
        sc = dist.support[x[t]]
        if t == 0 or (reset_token is not None and x[t - 1] == reset_token):
            ops[t] = (dist.log_pi[sc] + dist.log_emit[x[t]])[None, :]
        else:
            sp = dist.support[x[t - 1]]
            ops[t] = dist.log_A[np.ix_(sp, sc)] + dist.log_emit[x[t]][None, :]
    return ops


def reduce_operators(ops: np.ndarray, tree: str = "balanced") -> np.ndarray:
    """Associative log-matrix product of ``ops[0] @ ops[1] @ ...``."""
    if tree == "left":
        acc = ops[0]
        for op in ops[1:]:
            acc = _log_matmul(acc, op)
        return acc
    if tree != "balanced":
        raise ValueError(f"unknown tree shape {tree!r}")
    level = ops
    while len(level) > 1:
        odd = level[-1:] if len(level) % 2 else level[:0]
        paired = _log_matmul(level[0:len(level) - len(odd):2], level[1:len(level) - len(odd):2])
        level = np.concatenate([paired, odd], axis=0)
    return level[0]


def forward_scan(dist: DistParams, x, init: np.ndarray | None = None,
                 reset_token: int | None = None, tree: str = "balanced") -> float:
    """``log p(x)`` by reducing per-step log operators with a binary tree."""
    if init is not None:
        with np.errstate(divide="ignore"):
            dist = dataclasses.replace(dist, log_pi=np.log(np.asarray(init, dtype=dist.log_pi.dtype)))
    ops = scan_operators(dist, x, reset_token)
    total = reduce_operators(ops, tree)
    return float(logsumexp(total[0]))


def forward_dense(log_A: np.ndarray, log_O: np.ndarray, log_pi: np.ndarray, x,
                  reset_token: int | None = None) -> float:
    """Unblocked log-space forward over every state (``log_O`` is S x V)."""
    x = np.asarray(x, dtype=np.int64)
    a = log_pi + log_O[:, x[0]]
    for t in range(1, len(x)):
        if reset_token is not None and x[t - 1] == reset_token:
            step = logsumexp(a) + log_pi
        else:
            step = logsumexp(a[:, None] + log_A, axis=0)
        a = step + log_O[:, x[t]]
    return float(logsumexp(a))


def brute_force_loglik(dist: DistParams, x, reset_token: int | None = None) -> float:
    """``log p(x)`` by summing the joint over every state sequence."""
    x = np.asarray(x, dtype=np.int64)
    S, T = dist.size, len(x)
    if S ** T > BRUTE_FORCE_LIMIT:
        raise InferenceError(f"{S}^{T} state sequences exceeds the brute-force limit")
    log_O = dist.dense_log_emission().astype(np.float64)
    log_A = dist.log_A.astype(np.float64)
    log_pi = dist.log_pi.astype(np.float64)
    resets = [t == 0 or (reset_token is not None and x[t - 1] == reset_token) for t in range(T)]
    totals = []
    paths_iter = itertools.product(range(S), repeat=T)
    while True:
        chunk = np.array(list(itertools.islice(paths_iter, 200_000)), dtype=np.int64)
        if chunk.size == 0:
            break
        score = np.zeros(len(chunk))
        for t in range(T):
            z = chunk[:, t]
            score += log_pi[z] if resets[t] else log_A[chunk[:, t - 1], z]
            score += log_O[z, x[t]]
        totals.append(logsumexp(score))
    return float(logsumexp(np.array(totals)))


def sample_sequence(dist: DistParams, T: int, rng: np.random.Generator,
                    reset_token: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Ancestral sample ``(x, z)``; ``z`` holds global state ids."""
    cum_pi = np.cumsum(dist.pi.astype(np.float64))
    cum_A = np.cumsum(dist.A.astype(np.float64), axis=1)
    cum_O = np.cumsum(np.exp(dist.dense_log_emission().astype(np.float64)), axis=1)
    x = np.empty(T, dtype=np.int64)
    z = np.empty(T, dtype=np.int64)
    u = rng.random((T, 2))

    def draw(cdf, r):
        return min(int(np.searchsorted(cdf, r * cdf[-1], side="right")), len(cdf) - 1)

    for t in range(T):
        if t == 0 or (reset_token is not None and x[t - 1] == reset_token):
            z[t] = draw(cum_pi, u[t, 0])
        else:
            z[t] = draw(cum_A[z[t - 1]], u[t, 0])
        x[t] = draw(cum_O[z[t]], u[t, 1])
    return x, dist.states[z]


def support_mask(support: np.ndarray, num_states: int) -> np.ndarray:
    """(S, V) boolean matrix: state s may emit word w."""
    V = support.shape[0]
    mask = np.zeros((num_states, V), dtype=bool)
    mask[support, np.broadcast_to(np.arange(V)[:, None], support.shape)] = True
    return mask


def random_dist_params(word_to_states: np.ndarray, num_states: int, rng: np.random.Generator,
                       scale: float = 1.0, block_size: int | None = None,
                       dtype=np.float64) -> DistParams:
    """Random normalized tables over a given support (test and benchmark fixture)."""
    S = num_states
    V = word_to_states.shape[0]
    log_A = rng.normal(scale=scale, size=(S, S))
    log_A -= logsumexp(log_A, axis=1, keepdims=True)
    log_pi = rng.normal(scale=scale, size=S)
    log_pi -= logsumexp(log_pi)
    mask = support_mask(word_to_states, S)
    logits = np.where(mask, rng.normal(scale=scale, size=(S, V)), -np.inf)
    norm = logsumexp(logits, axis=1, keepdims=True)
    log_O = np.where(mask, logits - np.where(np.isfinite(norm), norm, 0), -np.inf)
    words = np.broadcast_to(np.arange(V)[:, None], word_to_states.shape)
    log_emit = log_O[word_to_states, words]
    return DistParams(log_A.astype(dtype), log_pi.astype(dtype), log_emit.astype(dtype),
                      np.asarray(word_to_states, dtype=np.int64), np.arange(S), S, block_size)
