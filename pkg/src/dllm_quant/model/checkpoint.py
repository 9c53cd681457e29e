"""Checkpoint files.

Layout (little-endian): ``DLQW``, the ModelConfig header (six u32 counts and a u8
position flag), a u32 record count, then per record a u32 name length, the UTF-8
name and a DLQM matrix. Vectors are stored as 1-row matrices.
"""

import struct
from pathlib import Path
from typing import BinaryIO

import torch

from dllm_quant.config import ModelConfig
from dllm_quant.model.transformer import ModelWeights
from dllm_quant.numerics import read_exact, read_matrix, write_matrix

CHECKPOINT_MAGIC = b"DLQW"
_HEADER = "<IIIIIIB"


def write_name(f: BinaryIO, name: str) -> None:
    raw = name.encode("utf-8")
    f.write(struct.pack("<I", len(raw)))
    f.write(raw)


def read_name(f: BinaryIO) -> str:
    (length,) = struct.unpack("<I", read_exact(f, 4))
    return read_exact(f, length).decode("utf-8")


def write_weights(f: BinaryIO, weights: ModelWeights) -> None:
    c = weights.config
    f.write(CHECKPOINT_MAGIC)
    f.write(
        struct.pack(
            _HEADER,
            c.vocab_size,
            c.seq_len,
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.d_ff,
            int(c.use_position),
        )
    )
    named = weights.named_tensors()
    f.write(struct.pack("<I", len(named)))
    for name, tensor in named.items():
        write_name(f, name)
        tensor = tensor.detach()
        write_matrix(f, tensor.reshape(1, -1) if tensor.dim() == 1 else tensor)


def read_weights(f: BinaryIO) -> ModelWeights:
    magic = read_exact(f, 4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a checkpoint (magic {magic!r})")
    vocab, seq_len, d_model, n_layers, n_heads, d_ff, use_pos = struct.unpack(
        _HEADER, read_exact(f, struct.calcsize(_HEADER))
    )
    config = ModelConfig(
        vocab_size=vocab,
        seq_len=seq_len,
        d_model=d_model,
        n_layers=n_layers,
        n_heads=n_heads,
        d_ff=d_ff,
        use_position=bool(use_pos),
    )
    (count,) = struct.unpack("<I", read_exact(f, 4))
    named: dict[str, torch.Tensor] = {}
    for _ in range(count):
        name = read_name(f)
        m = read_matrix(f)
        named[name] = m.reshape(-1) if m.shape[0] == 1 and _is_vector(name) else m
    return ModelWeights.from_named(config, named)


def _is_vector(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in ("attn_norm", "ffn_norm", "final_norm", "head_bias")


def save_checkpoint(path: str | Path, weights: ModelWeights) -> None:
    with open(path, "wb") as f:
        write_weights(f, weights)


def load_checkpoint(path: str | Path) -> ModelWeights:
    with open(path, "rb") as f:
        return read_weights(f)
