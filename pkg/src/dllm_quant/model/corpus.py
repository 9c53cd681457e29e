"""Token corpora: the synthetic bigram generator and the plain-text corpus format.

Corpus files hold one sequence per line as space-separated decimal ids. Lines that
are empty or start with ``#`` are ignored.
"""

from collections.abc import Sequence
from pathlib import Path

import torch

from dllm_quant.numerics import Rng


def synthetic_corpus(
    rng: Rng, num_sequences: int, seq_len: int, vocab_size: int, noise: float = 0.1
) -> list[torch.Tensor]:
    """Sequences following a fixed random bigram successor table.

    Each next token is the successor of the previous one with probability
    ``1 - noise`` and uniformly random otherwise. The MASK id (``vocab_size - 1``)
    never appears.
    """
    n_real = vocab_size - 1
    successor = [int(i) for i in rng.choice(n_real, n_real)]
    corpus: list[torch.Tensor] = []
    for _ in range(num_sequences):
        seq = [int(rng.integers(0, n_real))]
        for _ in range(seq_len - 1):
            if float(rng.uniform()) < noise:
                seq.append(int(rng.integers(0, n_real)))
            else:
                seq.append(successor[seq[-1]])
        corpus.append(torch.tensor(seq, dtype=torch.long))
    return corpus


def read_corpus(path: str | Path) -> list[torch.Tensor]:
    corpus: list[torch.Tensor] = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                corpus.append(torch.tensor([int(tok) for tok in line.split()], dtype=torch.long))
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: token ids must be integers") from e
    return corpus


def write_corpus(path: str | Path, corpus: Sequence[torch.Tensor]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for seq in corpus:
            f.write(" ".join(str(int(tok)) for tok in seq) + "\n")


def prompts_from(corpus: Sequence[torch.Tensor], prompt_len: int) -> list[torch.Tensor]:
    """Leading ``prompt_len`` tokens of each sequence."""
    return [seq[:prompt_len].clone() for seq in corpus]
