"""Training: per-batch state dropout, likelihood gradients and AdamW.

One step samples a block-balanced dropout mask, computes the tables for the
surviving states once, runs forward-backward on every row with its carried
filtering state, and applies one AdamW update to the token-mean negative
log-likelihood.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .brown import BlockPartition, EmissionSupport, build_uniform_support
from .config import TrainConfig, rng_stream
from .corpus import Vocab, make_batches
from .evaluate import perplexity
from .hmm import DropoutMask, FilterState, active_count, forward_backward
from .params import ModelConfig, Params, backward_dist_params, compute_dist_params, init_params

log = logging.getLogger(__name__)


class DivergedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_update(params: Params, grads: dict[str, np.ndarray], opt: OptimizerState, lr: float,
                 weight_decay: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """Adam with decoupled weight decay, in place.  Missing gradients count as zero."""
    b1, b2 = betas
    opt.step += 1
    t = opt.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        v = opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if weight_decay:
            p *= (1 - lr * weight_decay)
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
    return params, opt


@dataclass
class AdamW:
    lr: float
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    state: OptimizerState = field(default_factory=OptimizerState)

    def update(self, params: Params, grads: dict[str, np.ndarray]) -> None:
        adamw_update(params, grads, self.state, self.lr, self.weight_decay, self.betas, self.eps)


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


# ---------------------------------------------------------------------------
# dropout


def sample_dropout_mask(partition: BlockPartition | int, num_states: int, rate: float,
                        rng: np.random.Generator) -> DropoutMask:
    """Keep the ``ceil((1 - rate) k)`` states of each block with the largest Gumbel noise."""
    M = partition.num_blocks if isinstance(partition, BlockPartition) else int(partition)
    k = num_states // M
    keep = active_count(k, rate)
    if keep >= k:
        return DropoutMask(np.ones(num_states, dtype=bool), rate)
    g = rng.gumbel(size=(M, k))
    top = np.argsort(-g, axis=1, kind="stable")[:, :keep]
    b = np.zeros((M, k), dtype=bool)
    b[np.arange(M)[:, None], top] = True
    return DropoutMask(b.reshape(-1), rate)


# ---------------------------------------------------------------------------
# one batch


def batch_gradients(params: Params, cfg: ModelConfig, support: EmissionSupport, X: np.ndarray,
                    carry: FilterState | None, mask: DropoutMask | None, reset_token: int | None):
    """``(sum log-likelihood, gradients of it w.r.t. params, Lattice)``."""
    dist, cache = compute_dist_params(params, cfg, support, mask)
    lat, post = forward_backward(dist, X, carry, reset_token)
    grads = backward_dist_params(params, cfg, support, cache, post.transition_expectations,
                                 post.emission_expectations, post.start_expectations)
    return float(lat.loglik.astype(np.float64).sum()), grads, lat


def train_step(params: Params, cfg: ModelConfig, support: EmissionSupport, X: np.ndarray,
               carry: FilterState | None, mask: DropoutMask | None, opt: AdamW,
               reset_token: int | None, clip_norm: float = 0.0):
    """One update on the token-mean negative log-likelihood.

    Returns ``(loss_per_token, new_carry)``; ``params`` and ``opt`` change in place.
    """
    X = np.atleast_2d(X)
    total, grads, lat = batch_gradients(params, cfg, support, X, carry, mask, reset_token)
    tokens = X.size
    loss = -total / tokens
    if not np.isfinite(loss):
        worst = {k: float(np.abs(v).max()) for k, v in params.items()}
        raise DivergedError(
            f"diverged: loss={loss}, row log-likelihoods={lat.loglik.tolist()}, max |param|={worst}"
        )
    scale = -1.0 / tokens
    grads = {k: g * scale for k, g in grads.items()}
    if clip_norm > 0:
        clip_grad_norm(grads, clip_norm)
    opt.update(params, grads)
    return loss, lat.final


# ---------------------------------------------------------------------------
# loop


class PlateauSchedule:
    """Divide the learning rate after ``patience`` consecutive non-improving checks."""

    def __init__(self, lr: float, patience: int = 8, factor: float = 4.0):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = math.inf
        self.bad = 0

    def observe(self, value: float) -> bool:
        """Record a validation value; returns True when it is a new best."""
        if value < self.best:
            self.best = value
            self.bad = 0
            return True
        self.bad += 1
        if self.bad >= self.patience:
            self.lr /= self.factor
            self.bad = 0
        return False

    def state_dict(self) -> dict:
        return {"lr": self.lr, "best": self.best if math.isfinite(self.best) else None, "bad": self.bad}

    def load_state_dict(self, d: dict) -> None:
        self.lr = d["lr"]
        self.best = math.inf if d["best"] is None else d["best"]
        self.bad = d["bad"]


def make_support(config: TrainConfig, vocab_size: int, partition: BlockPartition | None) -> EmissionSupport:
    if config.support == "brown":
        if partition is None:
            raise ValueError("brown support needs a cluster partition")
        if partition.num_blocks != config.num_blocks:
            raise ValueError(f"partition has {partition.num_blocks} blocks, config expects {config.num_blocks}")
        return EmissionSupport.from_partition(partition, config.num_states)
    return build_uniform_support(config.num_states, vocab_size, config.states_per_word,
                                 rng_stream(config.seed, "uniform-support"))


def check_points(num_batches: int, checks: int) -> list[int]:
    """Batch indices (within an epoch) after which validation runs."""
    return [max(0, round((c + 1) * num_batches / checks) - 1) for c in range(checks)]


class Trainer:
    """Stateful training run; everything needed to resume lives in ``progress`` and the arrays."""

    def __init__(self, config: TrainConfig, vocab: Vocab, partition: BlockPartition | None,
                 train_ids: np.ndarray, valid_ids: np.ndarray, out_dir: str | Path | None = None,
                 metrics_path: str | Path | None = None):
        self.config = config
        self.vocab = vocab
        self.partition = partition
        self.train_ids = np.asarray(train_ids, dtype=np.int64)
        self.valid_ids = np.asarray(valid_ids, dtype=np.int64)
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.metrics_path = Path(metrics_path) if metrics_path is not None else None
        self.model_cfg = config.model_config(len(vocab))
        self.support = make_support(config, len(vocab), partition)
        self.params = init_params(self.model_cfg, rng_stream(config.seed, "init"))
        self.opt = AdamW(config.lr, config.weight_decay, (config.beta1, config.beta2), config.adam_eps)
        self.schedule = PlateauSchedule(config.lr, config.decay_patience, config.decay_factor)
        self.dropout_rng = rng_stream(config.seed, "dropout")
        self.plan = make_batches(self.train_ids, config.batch_size, config.segment_len)
        self.carry = FilterState.fresh(config.batch_size, config.num_states, np.float32)
        self.epoch = 0
        self.next_batch = 0
        self.checks_done = 0
        self.metrics: list[dict] = []
        self.on_checkpoint: Callable[["Trainer", str], None] | None = None

    @property
    def reset_token(self) -> int:
        return self.vocab.eos_id

    def progress(self) -> dict:
        return {
            "epoch": self.epoch, "next_batch": self.next_batch, "checks_done": self.checks_done,
            "schedule": self.schedule.state_dict(), "opt_step": self.opt.state.step,
            "dropout_rng": self.dropout_rng.bit_generator.state,
        }

    def restore(self, progress: dict, params: Params, opt_state: OptimizerState | None,
                carry: FilterState | None) -> None:
        self.epoch = progress["epoch"]
        self.next_batch = progress["next_batch"]
        self.checks_done = progress["checks_done"]
        self.schedule.load_state_dict(progress["schedule"])
        self.opt.lr = self.schedule.lr
        self.dropout_rng.bit_generator.state = progress["dropout_rng"]
        self.params = {k: np.array(v) for k, v in params.items()}
        if opt_state is not None:
            self.opt.state = opt_state
        if carry is not None:
            self.carry = carry

    def evaluate(self) -> float:
        dist, _ = compute_dist_params(self.params, self.model_cfg, self.support, None)
        rep = perplexity(dist, self.valid_ids, self.config.eval_batch_size, self.config.eval_segment_len,
                         self.reset_token)
        return rep.ppl

    def _mask(self) -> DropoutMask | None:
        if self.config.dropout <= 0:
            return None
        return sample_dropout_mask(self.partition, self.config.num_states, self.config.dropout, self.dropout_rng)

    def _log_metrics(self, record: dict) -> None:
        self.metrics.append(record)
        if self.metrics_path is not None:
            with open(self.metrics_path, "a", encoding="utf-8") as f:
                f.write(json.dumps(record) + "\n")

    def run(self) -> list[dict]:
        cfg = self.config
        nseg = self.plan.num_segments
        points = check_points(nseg, cfg.eval_checks_per_epoch)
        loss_sum, loss_batches, ms_sum, last_train_ppl = 0.0, 0, 0.0, math.nan
        while self.epoch < cfg.epochs:
            for b in range(self.next_batch, nseg):
                if b == 0:
                    self.carry = FilterState.fresh(cfg.batch_size, cfg.num_states, np.float32)
                t0 = time.perf_counter()
                self.opt.lr = self.schedule.lr
                loss, self.carry = train_step(self.params, self.model_cfg, self.support, self.plan.segment(b),
                                              self.carry, self._mask(), self.opt, self.reset_token, cfg.clip_norm)
                ms_sum += 1000.0 * (time.perf_counter() - t0)
                loss_sum += loss
                loss_batches += 1
                self.next_batch = b + 1
                due = points.count(b)
                for _ in range(due):
                    if loss_batches:
                        last_train_ppl = math.exp(loss_sum / loss_batches)
                    ms = ms_sum / loss_batches if loss_batches else 0.0
                    valid_ppl = self.evaluate()
                    lr_used = self.schedule.lr
                    improved = self.schedule.observe(valid_ppl)
                    self.checks_done += 1
                    self._log_metrics({
                        "check": self.checks_done,
                        "epoch_fraction": round(self.epoch + (b + 1) / nseg, 6),
                        "lr": lr_used,
                        "train_ppl": last_train_ppl,
                        "valid_ppl": valid_ppl,
                        "ms_per_batch": round(ms, 3) if cfg.record_timing else None,
                    })
                    log.info("check %d: train ppl %.3f valid ppl %.3f lr %g", self.checks_done,
                             last_train_ppl, valid_ppl, lr_used)
                    loss_sum, loss_batches, ms_sum = 0.0, 0, 0.0
                    if improved and self.on_checkpoint is not None:
                        self.on_checkpoint(self, "best")
                if due:
                    if b == nseg - 1:
                        self.epoch += 1
                        self.next_batch = 0
                    if self.on_checkpoint is not None:
                        self.on_checkpoint(self, "last")
                    if cfg.stop_after_checks and self.checks_done >= cfg.stop_after_checks:
                        return self.metrics
            if self.next_batch >= nseg:
                self.epoch += 1
                self.next_batch = 0
        return self.metrics


def gradient_check(variant: str = "neural", num_states: int = 4, num_blocks: int = 2, hidden: int = 8,
                   length: int = 3, rows: int = 2, vocab_size: int = 6, dropout: float = 0.0,
                   seed: int = 0, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients
    of a batch log-likelihood, in float64 on a tiny model."""
    from .numerics import finite_diff_grad, max_relative_error

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(num_states, vocab_size, num_blocks, hidden, variant)
    w2b = np.arange(vocab_size) % num_blocks
    partition = BlockPartition(w2b, num_blocks)
    support = EmissionSupport.from_partition(partition, num_states)
    params = init_params(cfg, rng, dtype=np.float64)
    X = rng.integers(0, vocab_size, size=(rows, length))
    mask = sample_dropout_mask(partition, num_states, dropout, rng) if dropout > 0 else None

    def f(p):
        dist, _ = compute_dist_params(p, cfg, support, mask)
        from .hmm import forward_batch
        return float(forward_batch(dist, X, None, 0).loglik.sum())

    _, grads, _ = batch_gradients(params, cfg, support, X, None, mask, 0)
    return max_relative_error(grads, finite_diff_grad(f, params, eps))
