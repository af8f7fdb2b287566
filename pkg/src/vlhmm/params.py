"""Model parameters and the map from parameters to HMM tables.

Three variants share one interface:

* ``neural``: state embeddings -> three residual MLP heads; transitions
  score ``H_out[src] . H_in[dst]``, emissions score ``H_emit[z] . E_x[w]``.
* ``factored``: the state embedding is composed from a per-block embedding
  and a half-width per-state embedding before the heads.
* ``scalar``: the logit tables themselves are the parameters.

``compute_dist_params`` returns the tables plus a cache that
``backward_dist_params`` uses to push table gradients back to parameters.
Parameters live in a flat ``dict[str, np.ndarray]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import numerics as nx
from .brown import EmissionSupport
from .hmm import DistParams, DropoutMask, support_mask

VARIANTS = ("neural", "factored", "scalar")
HEADS = ("out", "in", "emit")
COMPOSERS = ("o", "i", "e")

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class ModelConfig:
    num_states: int
    vocab_size: int
    num_blocks: int
    hidden: int = 256
    variant: str = "neural"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant == "factored" and self.hidden % 2:
            raise ValueError("factored variant needs an even hidden size")
        if self.num_states % self.num_blocks:
            raise ValueError("num_states must be a multiple of num_blocks")

    @property
    def block_size(self) -> int:
        return self.num_states // self.num_blocks


def _residual_shapes(prefix: str, h: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.W1": (h, h), f"{prefix}.W2": (h, h), f"{prefix}.gain": (h,), f"{prefix}.bias": (h,)}


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    Z, V, h = cfg.num_states, cfg.vocab_size, cfg.hidden
    if cfg.variant == "scalar":
        return {"transition_logits": (Z, Z), "emission_logits": (Z, V), "start_logits": (Z,)}
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.variant == "factored":
        shapes["E_state"] = (Z, h // 2)
        shapes["E_block"] = (cfg.num_blocks, h // 2)
        for c in COMPOSERS:
            shapes.update(_residual_shapes(f"compose_{c}", h))
    else:
        shapes["E_z"] = (Z, h)
    shapes["E_x"] = (V, h)
    shapes["start"] = (h,)
    for head in HEADS:
        shapes.update(_residual_shapes(f"head_{head}", h))
    return shapes


def param_count(cfg: ModelConfig) -> int:
    """Exact number of stored parameters, layer-norm vectors included."""
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_params(cfg: ModelConfig, seed: int | np.random.Generator, dtype=np.float32) -> Params:
    """Kaiming-uniform weights and embeddings; layer-norm gain 1 and bias 0."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            params[name] = np.ones(shape, dtype=dtype)
        elif name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[-1] if len(shape) > 1 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


# ---------------------------------------------------------------------------
# residual MLP


def residual_forward(params: Mapping[str, np.ndarray], prefix: str, E: np.ndarray):
    """``LayerNorm(ReLU(D W2) + D)`` with ``D = ReLU(E W1)``."""
    W1, W2 = params[f"{prefix}.W1"], params[f"{prefix}.W2"]
    pre1 = nx.matmul(E, W1)
    D = nx.relu(pre1)
    pre2 = nx.matmul(D, W2)
    R = nx.relu(pre2) + D
    out, ln_cache = nx.layer_norm(R, params[f"{prefix}.gain"], params[f"{prefix}.bias"])
    return out, (E, pre1, D, pre2, ln_cache)


def residual_backward(params, prefix: str, g: np.ndarray, cache, grads: Params) -> np.ndarray:
    E, pre1, D, pre2, ln_cache = cache
    gR, ggain, gbias = nx.layer_norm_vjp(g, ln_cache)
    _add(grads, f"{prefix}.gain", ggain)
    _add(grads, f"{prefix}.bias", gbias)
    gpre2 = nx.relu_vjp(gR, pre2)
    gD, gW2 = nx.matmul_vjp(gpre2, D, params[f"{prefix}.W2"])
    _add(grads, f"{prefix}.W2", gW2)
    gD = gD + gR
    gpre1 = nx.relu_vjp(gD, pre1)
    gE, gW1 = nx.matmul_vjp(gpre1, E, params[f"{prefix}.W1"])
    _add(grads, f"{prefix}.W1", gW1)
    return gE


def _add(grads: Params, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def compute_heads(params: Mapping[str, np.ndarray], cfg: ModelConfig, states: np.ndarray | None = None):
    """``(H_out, H_in, H_emit)`` for the given global states (default: all)."""
    if states is None:
        states = np.arange(cfg.num_states)
    cache: dict = {"states": states}
    if cfg.variant == "factored":
        blocks = states // cfg.block_size
        base = np.concatenate(
            [nx.embedding_gather(params["E_block"], blocks), nx.embedding_gather(params["E_state"], states)],
            axis=1,
        )
        cache["blocks"] = blocks
        inputs = {}
        for c, head in zip(COMPOSERS, HEADS):
            inputs[head], cache[f"compose_{c}"] = residual_forward(params, f"compose_{c}", base)
    else:
        base = nx.embedding_gather(params["E_z"], states)
        inputs = dict.fromkeys(HEADS, base)
    out = []
    for head in HEADS:
        H, cache[f"head_{head}"] = residual_forward(params, f"head_{head}", inputs[head])
        out.append(H)
    return tuple(out), cache


def heads_backward(params, cfg: ModelConfig, gH: tuple[np.ndarray, ...], cache, grads: Params) -> None:
    states = cache["states"]
    g_inputs = {}
    for head, g in zip(HEADS, gH):
        g_inputs[head] = residual_backward(params, f"head_{head}", g, cache[f"head_{head}"], grads)
    if cfg.variant == "factored":
        h2 = cfg.hidden // 2
        gbase = 0
        for c, head in zip(COMPOSERS, HEADS):
            gbase = gbase + residual_backward(params, f"compose_{c}", g_inputs[head], cache[f"compose_{c}"], grads)
        _add(grads, "E_block", nx.embedding_vjp(gbase[:, :h2], cache["blocks"], cfg.num_blocks))
        _add(grads, "E_state", nx.embedding_vjp(gbase[:, h2:], states, cfg.num_states))
    else:
        gbase = g_inputs["out"] + g_inputs["in"] + g_inputs["emit"]
        _add(grads, "E_z", nx.embedding_vjp(gbase, states, cfg.num_states))


# ---------------------------------------------------------------------------
# tables


def _active_states(cfg: ModelConfig, support: EmissionSupport, mask: DropoutMask | None):
    """Materialized global states, per-word local support and block size."""
    if mask is None:
        states = np.arange(cfg.num_states)
        block = support.block_size if support.partition is not None else None
        return states, support.word_to_states, block
    if support.partition is None:
        raise ValueError("state dropout needs a block partition")
    k = support.block_size
    b = np.asarray(mask.b, dtype=bool)
    per_block = b.reshape(-1, k).sum(axis=1)
    if (per_block == 0).any() or (per_block != per_block[0]).any():
        raise ValueError("dropout mask must keep the same nonzero count in every block")
    n = int(per_block[0])
    states = np.flatnonzero(b)
    wb = support.partition.word_to_block
    local = wb[:, None] * n + np.arange(n)[None, :]
    return states, local, n


def compute_dist_params(params: Mapping[str, np.ndarray], cfg: ModelConfig, support: EmissionSupport,
                        mask: DropoutMask | None = None):
    """Normalized HMM tables for the (optionally masked) model.

    Only active states are materialized.  Returns ``(DistParams, cache)``.
    """
    states, local_support, block = _active_states(cfg, support, mask)
    S = len(states)
    V = cfg.vocab_size
    cache: dict = {"states": states, "local_support": local_support, "block": block}
    if cfg.variant == "scalar":
        trans_logits = params["transition_logits"][np.ix_(states, states)]
        start_logits = params["start_logits"][states]
        emit_logits_dense = params["emission_logits"][states]
    else:
        (H_out, H_in, H_emit), head_cache = compute_heads(params, cfg, states)
        cache.update(heads=head_cache, H_out=H_out, H_in=H_in, H_emit=H_emit)
        trans_logits = nx.matmul(H_out, H_in.T)
        start_logits = H_in @ params["start"]
        emit_logits_dense = None
    log_A = nx.log_softmax(trans_logits, axis=1)
    log_pi = nx.log_softmax(start_logits)
    cache.update(log_A=log_A, log_pi=log_pi)

    if block is not None:
        log_emit = np.empty((V, block), dtype=log_A.dtype)
        block_out = []
        for m, words in enumerate(support.partition.block_vocabs):
            rows = slice(m * block, (m + 1) * block)
            if emit_logits_dense is not None:
                logits = emit_logits_dense[rows][:, words]
            else:
                logits = nx.matmul(H_emit[rows], params["E_x"][words].T)
            lo = nx.log_softmax(logits, axis=1)  # (n, |X_m|)
            block_out.append(lo)
            log_emit[words] = lo.T
        cache["block_out"] = block_out
    else:
        mask_sv = support_mask(local_support, S)
        if emit_logits_dense is None:
            emit_logits_dense = nx.matmul(H_emit, params["E_x"].T)
        # States that admit no word keep an all -inf row.
        has = mask_sv.any(axis=1)
        lo = np.full((S, V), -np.inf, dtype=log_A.dtype)
        if has.any():
            lo[has] = nx.masked_log_softmax(emit_logits_dense[has], mask_sv[has], axis=1)
        words = np.broadcast_to(np.arange(V)[:, None], local_support.shape)
        log_emit = lo[local_support, words]
        cache["dense_out"] = lo
    dist = DistParams(log_A, log_pi, log_emit, np.asarray(local_support), states, cfg.num_states, block)
    return dist, cache


def backward_dist_params(params: Mapping[str, np.ndarray], cfg: ModelConfig, support: EmissionSupport,
                         cache, g_log_A: np.ndarray, g_log_emit: np.ndarray, g_log_pi: np.ndarray) -> nx.Gradients:
    """Chain gradients w.r.t. the log tables back to every parameter."""
    states = cache["states"]
    S = len(states)
    if g_log_A.shape != (S, S) or g_log_pi.shape != (S,) or g_log_emit.shape != cache["local_support"].shape:
        raise ValueError("table gradient shapes do not match the materialized tables")
    block = cache["block"]
    g_trans = nx.log_softmax_vjp(g_log_A, cache["log_A"], axis=1)
    g_start = nx.log_softmax_vjp(g_log_pi, cache["log_pi"])
    grads: Params = {}
    V = cfg.vocab_size
    scalar = cfg.variant == "scalar"
    if not scalar:
        H_out, H_in, H_emit = cache["H_out"], cache["H_in"], cache["H_emit"]
        gH_out, gH_inT = nx.matmul_vjp(g_trans, H_out, H_in.T)
        gH_in = gH_inT.T + np.outer(g_start, params["start"])
        grads["start"] = H_in.T @ g_start
        gH_emit = np.zeros_like(H_emit)
        gE_x = np.zeros_like(params["E_x"])
    if block is not None:
        for m, words in enumerate(support.partition.block_vocabs):
            rows = slice(m * block, (m + 1) * block)
            g_logits = nx.log_softmax_vjp(g_log_emit[words].T, cache["block_out"][m], axis=1)
            if scalar:
                g_emission = grads.setdefault("emission_logits", np.zeros_like(params["emission_logits"]))
                g_emission[np.ix_(states[rows], words)] += g_logits
            else:
                gh, gex = nx.matmul_vjp(g_logits, H_emit[rows], params["E_x"][words].T)
                gH_emit[rows] += gh
                gE_x[words] += gex.T
    else:
        local = cache["local_support"]
        g_dense = np.zeros((S, V), dtype=g_log_emit.dtype)
        words = np.broadcast_to(np.arange(V)[:, None], local.shape)
        np.add.at(g_dense, (local, words), g_log_emit)
        g_logits = nx.log_softmax_vjp(g_dense, cache["dense_out"], axis=1)
        if scalar:
            g_emission = np.zeros_like(params["emission_logits"])
            g_emission[states] = g_logits
            grads["emission_logits"] = g_emission
        else:
            gH_emit, gE_xT = nx.matmul_vjp(g_logits, H_emit, params["E_x"].T)
            gE_x = gE_xT.T
    if scalar:
        g_tl = np.zeros_like(params["transition_logits"])
        g_tl[np.ix_(states, states)] = g_trans
        grads["transition_logits"] = g_tl
        g_sl = np.zeros_like(params["start_logits"])
        g_sl[states] = g_start
        grads["start_logits"] = g_sl
        grads.setdefault("emission_logits", np.zeros_like(params["emission_logits"]))
    else:
        grads["E_x"] = gE_x
        heads_backward(params, cfg, (gH_out, gH_in, gH_emit), cache["heads"], grads)
    return {name: np.asarray(g, dtype=params[name].dtype) for name, g in grads.items()}
