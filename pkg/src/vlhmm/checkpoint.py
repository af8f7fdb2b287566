"""Checkpoint container.

Layout::

    b"VLHMM1"            magic
    uint32 LE            format version
    uint32 LE            header length in bytes
    header               UTF-8 JSON: model header, vocab, support, config,
                         progress record and a tensor directory
    payload              little-endian tensors at the offsets listed in the directory

Reals are stored as 32-bit floats, integers as 32-bit ints.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .brown import BlockPartition
from .config import TrainConfig
from .corpus import Vocab
from .hmm import FilterState
from .trainer import OptimizerState, Trainer

MAGIC = b"VLHMM1"
FORMAT_VERSION = 1
_DTYPES = {"<f4": np.float32, "<i4": np.int32}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: TrainConfig
    vocab: Vocab
    partition: BlockPartition | None
    params: dict[str, np.ndarray]
    opt: OptimizerState | None = None
    carry: FilterState | None = None
    progress: dict[str, Any] = field(default_factory=dict)

    @property
    def header(self) -> dict[str, Any]:
        c = self.config
        return {"variant": c.variant, "num_states": c.num_states, "num_blocks": c.num_blocks,
                "hidden": c.hidden, "vocab_size": len(self.vocab)}


def _tensors(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    out = {f"param/{k}": np.asarray(v, dtype="<f4") for k, v in ckpt.params.items()}
    if ckpt.opt is not None:
        for k in ckpt.params:
            if k in ckpt.opt.m:
                out[f"opt_m/{k}"] = np.asarray(ckpt.opt.m[k], dtype="<f4")
                out[f"opt_v/{k}"] = np.asarray(ckpt.opt.v[k], dtype="<f4")
    if ckpt.carry is not None:
        out["carry/last_token"] = np.asarray(ckpt.carry.last_token, dtype="<i4")
        out["carry/probs"] = np.asarray(ckpt.carry.probs, dtype="<f4")
    return out


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    tensors = _tensors(ckpt)
    directory, offset = [], 0
    for name, arr in tensors.items():
        directory.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                          "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    header = {
        "magic": MAGIC.decode(), "format_version": FORMAT_VERSION, "model": ckpt.header,
        "config": ckpt.config.to_dict(), "vocab": list(ckpt.vocab.tokens),
        "support": ({"kind": "brown", "word_to_block": ckpt.partition.word_to_block.tolist()}
                    if ckpt.partition is not None else
                    {"kind": "uniform", "n": ckpt.config.states_per_word, "seed": ckpt.config.seed}),
        "opt_step": ckpt.opt.step if ckpt.opt is not None else None,
        "progress": ckpt.progress, "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        f.write(blob)
        for arr in tensors.values():
            f.write(np.ascontiguousarray(arr).tobytes())
    tmp.replace(path)


def read_header(path: str | Path) -> tuple[dict[str, Any], int]:
    """Validated header and the byte offset where the payload starts."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
        fixed = f.read(8)
        if len(fixed) != 8:
            raise CheckpointError(f"{path}: truncated header")
        version, hlen = struct.unpack("<II", fixed)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        blob = f.read(hlen)
        if len(blob) != hlen:
            raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    start = len(MAGIC) + 8 + hlen
    size = Path(path).stat().st_size
    model = header.get("model", {})
    cfg = header.get("config", {})
    for key in ("variant", "num_states", "num_blocks", "hidden"):
        if model.get(key) != cfg.get(key):
            raise CheckpointError(f"{path}: header field {key!r} disagrees with the embedded config")
    if model.get("vocab_size") != len(header.get("vocab", [])):
        raise CheckpointError(f"{path}: vocab size mismatch")
    for entry in header.get("tensors", []):
        if entry["dtype"] not in _DTYPES:
            raise CheckpointError(f"{path}: unsupported tensor dtype {entry['dtype']}")
        expected = int(np.prod(entry["shape"], dtype=np.int64)) * np.dtype(entry["dtype"]).itemsize
        if expected != entry["nbytes"] or start + entry["offset"] + entry["nbytes"] > size:
            raise CheckpointError(f"{path}: tensor {entry['name']} out of bounds")
    return header, start


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, start = read_header(path)
    config = TrainConfig.from_dict(header["config"])
    vocab = Vocab(tuple(header["vocab"]))
    sup = header["support"]
    partition = BlockPartition(np.array(sup["word_to_block"]), config.num_blocks) if sup["kind"] == "brown" else None
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        for entry in header["tensors"]:
            f.seek(start + entry["offset"])
            raw = f.read(entry["nbytes"])
            arrays[entry["name"]] = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).astype(
                _DTYPES[entry["dtype"]])
    params = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("param/")}
    opt = None
    if header.get("opt_step") is not None:
        opt = OptimizerState(
            {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("opt_m/")},
            {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("opt_v/")},
            header["opt_step"],
        )
    carry = None
    if "carry/probs" in arrays:
        carry = FilterState(arrays["carry/last_token"].astype(np.int64), arrays["carry/probs"])
    return Checkpoint(config, vocab, partition, params, opt, carry, header.get("progress", {}))


def trainer_checkpoint(trainer: Trainer) -> Checkpoint:
    return Checkpoint(trainer.config, trainer.vocab, trainer.partition, trainer.params,
                      trainer.opt.state, trainer.carry, trainer.progress())
