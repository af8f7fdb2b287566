"""Command-line entry point.

Machine-readable results (JSON, generated text) go to stdout; logs go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .brown import brown_cluster, collect_bigrams, load_clusters, save_clusters
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint, trainer_checkpoint
from .config import ConfigError, TrainConfig, read_config_file, rng_stream
from .corpus import Vocab, build_vocab, encode, flatten, load_corpus
from .evaluate import bench, model_perplexity, synthetic_hmm
from .hmm import sample_sequence
from .params import VARIANTS, param_count
from .trainer import Trainer, gradient_check, make_support

log = logging.getLogger("vlhmm")


def _tokens(path, lowercase=False) -> list[str]:
    return flatten(load_corpus(path, lowercase))


# ---------------------------------------------------------------------------
# commands


def cmd_cluster(args) -> int:
    tokens = _tokens(args.train, args.lowercase)
    vocab = build_vocab(tokens, args.min_count)
    enc = encode(tokens, vocab)
    log.info("clustering %d types into %d blocks", len(vocab), args.M)
    part = brown_cluster(collect_bigrams(enc, len(vocab)), args.M, args.window)
    save_clusters(args.out, part, vocab)
    if args.vocab_out:
        vocab.save(args.vocab_out)
    print(json.dumps({"clusters": str(args.out), "num_blocks": part.num_blocks, "vocab_size": len(vocab)}))
    return 0


def _config_from_args(args, base: TrainConfig | None = None) -> TrainConfig:
    values = base.to_dict() if base is not None else {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return TrainConfig.from_dict(values)


def cmd_train(args) -> int:
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        config = _config_from_args(args, resume.config)
        vocab = resume.vocab
    else:
        config = _config_from_args(args)
        vocab = Vocab.load(args.vocab) if args.vocab else build_vocab(_tokens(args.train, args.lowercase),
                                                                     args.min_count)
    train_ids = encode(_tokens(args.train, args.lowercase), vocab).ids
    valid_ids = encode(_tokens(args.valid, args.lowercase), vocab).ids
    partition = None
    if config.support == "brown":
        if resume is not None and resume.partition is not None:
            partition = resume.partition
        elif args.clusters:
            partition = load_clusters(args.clusters, vocab, config.num_blocks)
        else:
            log.info("no clusters file given; clustering the training split into %d blocks", config.num_blocks)
            partition = brown_cluster(collect_bigrams(train_ids, len(vocab)), config.num_blocks)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = Path(args.metrics) if args.metrics else out / "metrics.jsonl"
    if resume is None and metrics.exists():
        metrics.unlink()
    trainer = Trainer(config, vocab, partition, train_ids, valid_ids, out, metrics)
    if resume is not None:
        trainer.restore(resume.progress, resume.params, resume.opt, resume.carry)
    n_params = param_count(trainer.model_cfg)
    log.info("variant %s, %d parameters, %d train tokens", config.variant, n_params, len(train_ids))

    def on_checkpoint(t: Trainer, kind: str):
        save_checkpoint(out / f"{kind}.ckpt", trainer_checkpoint(t))

    trainer.on_checkpoint = on_checkpoint
    records = trainer.run()
    save_checkpoint(out / "last.ckpt", trainer_checkpoint(trainer))
    best = trainer.schedule.best
    print(json.dumps({
        "best_valid_ppl": best if np.isfinite(best) else None,
        "checks": trainer.checks_done, "param_count": n_params,
        "checkpoint": str(out / "best.ckpt"), "metrics": str(metrics),
        "new_records": len(records), "config": config.to_dict(),
    }, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    ids = encode(_tokens(args.data, args.lowercase), ckpt.vocab).ids
    support = make_support(cfg, len(ckpt.vocab), ckpt.partition)
    rep = model_perplexity(ckpt.params, cfg.model_config(len(ckpt.vocab)), support, ids,
                           args.batch_size or cfg.eval_batch_size, args.segment_len or cfg.eval_segment_len,
                           ckpt.vocab.eos_id, cfg.to_dict())
    print(rep.to_json())
    return 0


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def cmd_bench(args) -> int:
    grid = [
        {"num_states": z, "block_size": k, "dropout": lam, "variant": var, "hidden": args.hidden,
         "vocab_size": args.vocab_size, "batch_size": args.batch_size, "segment_len": args.segment_len}
        for z in _int_list(args.num_states) for k in _int_list(args.block_sizes)
        for lam in _float_list(args.dropouts) for var in args.variants.split(",") if k <= z
    ]
    rows = bench(grid, args.repeats, args.csv, args.plot)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    variants = VARIANTS if args.variant == "all" else (args.variant,)
    worst = 0.0
    for v in variants:
        err = gradient_check(v, args.num_states, args.num_blocks, args.hidden, args.length,
                             dropout=args.dropout, seed=args.seed)
        worst = max(worst, err)
        print(json.dumps({"variant": v, "max_rel_error": err}))
    if worst > args.tol:
        log.error("gradient check failed: %.3g > %.3g", worst, args.tol)
        return 1
    return 0


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.config
    from .params import compute_dist_params

    support = make_support(cfg, len(ckpt.vocab), ckpt.partition)
    dist, _ = compute_dist_params(ckpt.params, cfg.model_config(len(ckpt.vocab)), support, None)
    x, _ = sample_sequence(dist.astype(np.float64), args.length, rng_stream(args.seed, "sampling"), ckpt.vocab.eos_id)
    words = ckpt.vocab.decode(x)
    lines, cur = [], []
    for w in words:
        if w == "<eos>":
            lines.append(" ".join(cur))
            cur = []
        else:
            cur.append(w)
    if cur:
        lines.append(" ".join(cur))
    sys.stdout.write("\n".join(lines) + "\n")
    return 0


def cmd_synth(args) -> int:
    """Write train/valid/test splits sampled from a random block HMM (for smoke tests and demos)."""
    rng = rng_stream(args.seed, "synthetic")
    gt = synthetic_hmm(args.num_states, args.vocab_size, args.num_blocks, rng, args.concentration)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, n in (("train", args.tokens), ("valid", args.tokens // 10), ("test", args.tokens // 10)):
        x, _ = sample_sequence(gt, n, rng)
        words = [f"w{int(i)}" for i in x]
        lines = [" ".join(words[i:i + args.line_len]) for i in range(0, n, args.line_len)]
        (out / f"{name}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(json.dumps({"out_dir": str(out)}))
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_train_overrides(p: argparse.ArgumentParser) -> None:
    for f in fields(TrainConfig):
        t = f.type if isinstance(f.type, str) else f.type.__name__
        conv = {"int": int, "float": float, "bool": str, "str": str}[t]
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=conv, default=None,
                       choices=VARIANTS if f.name == "variant" else None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vlhmm", description="Very large blocked-emission HMM language models")
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("cluster", help="Brown-cluster a corpus into M blocks")
    p.add_argument("--train", "--input", dest="train", required=True)
    p.add_argument("--M", type=int, required=True)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-out", default=None)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--lowercase", action="store_true")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", help="train a model; writes best/last checkpoints and metrics JSONL")
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--clusters", default=None)
    p.add_argument("--vocab", default=None)
    p.add_argument("--config", default=None, help="flat key=value file; flags override it")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--metrics", default=None)
    p.add_argument("--resume", default=None)
    p.add_argument("--min-count", type=int, default=1)
    p.add_argument("--lowercase", action="store_true")
    _add_train_overrides(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--segment-len", type=int, default=None)
    p.add_argument("--lowercase", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time train steps, eval batches and the forward pass")
    p.add_argument("--num-states", default="4096")
    p.add_argument("--block-sizes", default="64")
    p.add_argument("--dropouts", default="0,0.5")
    p.add_argument("--variants", default="neural")
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--vocab-size", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--segment-len", type=int, default=32)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--csv", default=None)
    p.add_argument("--plot", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference check of the analytic gradients")
    p.add_argument("--variant", default="all", choices=("all",) + VARIANTS)
    p.add_argument("--num-states", type=int, default=4)
    p.add_argument("--num-blocks", type=int, default=2)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--length", type=int, default=3)
    p.add_argument("--dropout", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sample", help="generate text from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--length", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("synth", help="write a synthetic corpus sampled from a random block HMM")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--num-states", type=int, default=8)
    p.add_argument("--num-blocks", type=int, default=2)
    p.add_argument("--vocab-size", type=int, default=20)
    p.add_argument("--tokens", type=int, default=50000)
    p.add_argument("--line-len", type=int, default=20)
    p.add_argument("--concentration", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
