"""Perplexity evaluation, n-gram sanity baselines and timing benchmarks."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

from .brown import BlockPartition, EmissionSupport
from .corpus import split_streams
from .hmm import DistParams, FilterState, active_count, forward_batch, random_dist_params
from .params import ModelConfig, compute_dist_params, init_params


@dataclass
class EvalReport:
    ppl: float
    token_count: int
    logprob_total: float
    ms_per_batch: float
    config: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def perplexity(model: DistParams, ids: np.ndarray, batch_size: int = 16, segment_len: int = 32,
               reset_token: int | None = None, config: Mapping[str, Any] | None = None) -> EvalReport:
    """Every token contributes one log-probability; filtering state carries
    across segments and resets after ``reset_token``.

    ``model`` is a fixed (unmasked) table set, computed once by the caller.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) == 0:
        raise ValueError("cannot evaluate an empty split")
    streams = split_streams(ids, batch_size)
    B = len(streams)
    lengths = np.array([len(s) for s in streams])
    carry = FilterState.fresh(B, model.num_states, model.A.dtype)
    total = 0.0
    batches = 0
    elapsed = 0.0
    num_segments = int(np.ceil(lengths.max() / segment_len))
    for i in range(num_segments):
        lo = i * segment_len
        seg_len = np.clip(lengths - lo, 0, segment_len)
        t0 = time.perf_counter()
        for L in np.unique(seg_len[seg_len > 0]):
            rows = np.flatnonzero(seg_len == L)
            X = np.stack([streams[r][lo:lo + L] for r in rows])
            sub = FilterState(carry.last_token[rows], carry.probs[rows])
            lat = forward_batch(model, X, sub, reset_token)
            total += float(lat.log_norms.astype(np.float64).sum())
            carry.last_token[rows] = lat.final.last_token
            carry.probs[rows] = lat.final.probs
        elapsed += time.perf_counter() - t0
        batches += 1
    n = int(lengths.sum())
    with np.errstate(over="ignore"):
        ppl = float(np.exp(-total / n))
    return EvalReport(ppl, n, total, 1000.0 * elapsed / max(batches, 1), dict(config or {}))


def model_perplexity(params, cfg: ModelConfig, support: EmissionSupport, ids, batch_size: int = 16,
                     segment_len: int = 32, reset_token: int | None = None, config=None) -> EvalReport:
    """Perplexity of a parameterized model (tables computed once, no dropout)."""
    dist, _ = compute_dist_params(params, cfg, support, None)
    return perplexity(dist, ids, batch_size, segment_len, reset_token, config)


def ngram_baseline(train_ids, eval_ids, vocab_size: int, order: int = 2, add_k: float = 1.0) -> float:
    """Add-k smoothed unigram or bigram perplexity of ``eval_ids``."""
    train_ids = np.asarray(train_ids, dtype=np.int64)
    eval_ids = np.asarray(eval_ids, dtype=np.int64)
    V = vocab_size
    uni = np.bincount(train_ids, minlength=V).astype(np.float64)
    p_uni = (uni + add_k) / (uni.sum() + add_k * V)
    if order == 1:
        logp = np.log(p_uni[eval_ids]).sum()
    elif order == 2:
        codes = train_ids[:-1] * V + train_ids[1:]
        big = np.bincount(codes, minlength=V * V).reshape(V, V).astype(np.float64)
        row = big.sum(axis=1)
        cond = (big[eval_ids[:-1], eval_ids[1:]] + add_k) / (row[eval_ids[:-1]] + add_k * V)
        logp = np.log(p_uni[eval_ids[0]]) + np.log(cond).sum()
    else:
        raise ValueError("order must be 1 or 2")
    return float(np.exp(-logp / len(eval_ids)))


# ---------------------------------------------------------------------------
# benchmarks


def _median_ms(fn, repeats: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return 1000.0 * float(np.median(times))


def bench_forward_per_token(num_states: int, block_size: int, rows: int = 256, length: int = 32,
                            repeats: int = 5, seed: int = 0, vocab_per_block: int = 4) -> float:
    """Median milliseconds per token of a batched forward pass."""
    M = num_states // block_size
    V = M * vocab_per_block
    rng = np.random.default_rng(seed)
    part = BlockPartition(np.arange(V) % M, M)
    support = EmissionSupport.from_partition(part, num_states)
    dist = random_dist_params(support.word_to_states, num_states, rng, block_size=block_size,
                              dtype=np.float32)
    X = rng.integers(0, V, size=(rows, length))
    _ = dist.A, dist.emit, dist.pi
    return _median_ms(lambda: forward_batch(dist, X), repeats) / (rows * length)


def bench_train_step(num_states: int, num_blocks: int, hidden: int, dropout: float, variant: str = "neural",
                     vocab_size: int = 1000, batch_size: int = 16, segment_len: int = 32,
                     repeats: int = 5, seed: int = 0) -> float:
    """Median milliseconds of one full training step (tables, inference, backward, update)."""
    from .trainer import AdamW, sample_dropout_mask, train_step

    rng = np.random.default_rng(seed)
    part = BlockPartition(np.arange(vocab_size) % num_blocks, num_blocks)
    support = EmissionSupport.from_partition(part, num_states)
    cfg = ModelConfig(num_states, vocab_size, num_blocks, hidden, variant)
    params = init_params(cfg, rng)
    opt = AdamW(lr=1e-3)
    X = rng.integers(0, vocab_size, size=(batch_size, segment_len))
    carry = FilterState.fresh(batch_size, num_states, np.float32)

    def step():
        mask = sample_dropout_mask(part, num_states, dropout, rng) if dropout > 0 else None
        train_step(params, cfg, support, X, carry, mask, opt, reset_token=None)

    return _median_ms(step, repeats)


def bench_eval_batch(num_states: int, num_blocks: int, hidden: int, variant: str = "neural",
                     vocab_size: int = 1000, batch_size: int = 16, segment_len: int = 32,
                     repeats: int = 5, seed: int = 0) -> float:
    """Median milliseconds to compute tables and score one eval batch."""
    rng = np.random.default_rng(seed)
    part = BlockPartition(np.arange(vocab_size) % num_blocks, num_blocks)
    support = EmissionSupport.from_partition(part, num_states)
    cfg = ModelConfig(num_states, vocab_size, num_blocks, hidden, variant)
    params = init_params(cfg, rng)
    X = rng.integers(0, vocab_size, size=(batch_size, segment_len))

    def run():
        dist, _ = compute_dist_params(params, cfg, support, None)
        forward_batch(dist, X)

    return _median_ms(run, repeats)


def bench(grid: Iterable[Mapping[str, Any]], repeats: int = 5, csv_path: str | Path | None = None,
          plot_path: str | Path | None = None) -> list[dict[str, Any]]:
    """Time train steps and eval batches over a grid of settings.

    Each grid entry needs ``num_states``, ``block_size``, ``dropout`` and
    ``variant``; ``hidden``, ``vocab_size``, ``batch_size`` and
    ``segment_len`` are optional.
    """
    rows = []
    for entry in grid:
        Z, k = int(entry["num_states"]), int(entry["block_size"])
        M = Z // k
        hidden = int(entry.get("hidden", 64))
        variant = entry.get("variant", "neural")
        lam = float(entry.get("dropout", 0.0))
        kw = dict(vocab_size=int(entry.get("vocab_size", 1000)), batch_size=int(entry.get("batch_size", 16)),
                  segment_len=int(entry.get("segment_len", 32)), repeats=repeats)
        ka = active_count(k, lam)
        row = {
            "num_states": Z, "block_size": k, "num_blocks": M, "active_per_block": ka,
            "dropout": lam, "variant": variant, "hidden": hidden,
            "train_step_ms": bench_train_step(Z, M, hidden, lam, variant, **kw),
            "eval_batch_ms": bench_eval_batch(Z, M, hidden, variant, **kw),
            "forward_us_per_token": 1000.0 * bench_forward_per_token(M * ka, ka, repeats=repeats),
        }
        rows.append(row)
    if csv_path is not None and rows:
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    if plot_path is not None:
        with open(plot_path, "w") as f:
            for r in rows:
                f.write(f"{r['active_per_block']} {r['forward_us_per_token']:.6g}\n")
    return rows


def synthetic_hmm(num_states: int, vocab_size: int, num_blocks: int, rng: np.random.Generator,
                  concentration: float = 0.3, emission_concentration: float | None = None) -> DistParams:
    """Random block-structured ground-truth HMM with Dirichlet rows.

    Word ``w`` belongs to block ``w * num_blocks // vocab_size``.
    """
    k = num_states // num_blocks
    w2b = np.arange(vocab_size) * num_blocks // vocab_size
    support = EmissionSupport.from_partition(BlockPartition(w2b, num_blocks), num_states)
    A = rng.dirichlet(np.full(num_states, concentration), size=num_states)
    pi = rng.dirichlet(np.full(num_states, concentration))
    ec = concentration if emission_concentration is None else emission_concentration
    log_emit = np.empty((vocab_size, k))
    for m in range(num_blocks):
        words = np.flatnonzero(w2b == m)
        O = rng.dirichlet(np.full(len(words), ec), size=k)  # (k, |X_m|)
        with np.errstate(divide="ignore"):
            log_emit[words] = np.log(O).T
    with np.errstate(divide="ignore"):
        return DistParams(np.log(A), np.log(pi), log_emit, support.word_to_states,
                          np.arange(num_states), num_states, k)
