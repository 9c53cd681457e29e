"""Blockwise iterative decoding with confidence-based remasking."""

import math
from collections.abc import Generator, Iterable, Iterator

import torch

from dllm_quant.models import DecodeState, LayerTrace, StepRecord
from dllm_quant.model.transformer import FakeQuant, ModelWeights, forward
from dllm_quant.numerics import DTYPE, argmax_row, softmax_rows


def unmask_count(remaining_masked: int, remaining_steps: int) -> int:
    """Linear schedule: spread the masked positions evenly over the steps left."""
    if remaining_steps <= 0:
        return remaining_masked
    return math.ceil(remaining_masked / remaining_steps)


def _check_decode_args(
    weights: ModelWeights, prompt: torch.Tensor, gen_len: int, steps: int, blocks: int
) -> None:
    config = weights.config
    if prompt.numel() > config.seq_len - gen_len:
        raise ValueError(
            f"prompt of length {prompt.numel()} does not fit: seq_len {config.seq_len} "
            f"leaves {config.seq_len - gen_len} positions before a {gen_len}-token response"
        )
    if blocks < 1 or gen_len % blocks:
        raise ValueError(f"gen_len ({gen_len}) must be divisible by blocks ({blocks})")
    if steps < blocks:
        raise ValueError(f"steps ({steps}) must be at least blocks ({blocks})")


def iter_decode(
    weights: ModelWeights,
    prompt: torch.Tensor,
    gen_len: int,
    steps: int,
    blocks: int,
    *,
    quant: FakeQuant | None = None,
    capture: bool = False,
) -> Generator[StepRecord, None, torch.Tensor]:
    """Yield one record per decode step, before that step's tokens are committed.

    The response starts fully masked and is split into ``blocks`` equal spans decoded
    left to right with ``steps // blocks`` steps each. At every step the model predicts
    all positions; inside the active block the ``k`` masked positions with the highest
    confidence (probability of the argmax token) are committed, lowest index first on
    ties, and the rest stay masked. Committed tokens never change.

    Stopping iteration early skips the remaining forward passes. The generator's
    return value is the final token vector.
    """
    _check_decode_args(weights, prompt, gen_len, steps, blocks)
    mask_id = weights.config.mask_id
    prompt = prompt.to(torch.long)
    prompt_len = prompt.numel()
    tokens = torch.cat([prompt, torch.full((gen_len,), mask_id, dtype=torch.long)])
    masked = torch.cat(
        [torch.zeros(prompt_len, dtype=torch.bool), torch.ones(gen_len, dtype=torch.bool)]
    )
    per_block = steps // blocks
    block_len = gen_len // blocks

    for block in range(blocks):
        lo = prompt_len + block * block_len
        hi = lo + block_len
        for i in range(per_block):
            with torch.no_grad():
                logits, trace = forward(weights, tokens, capture=capture, quant=quant)
            probs = softmax_rows(logits)
            predicted = argmax_row(probs)
            top_prob = probs.gather(1, predicted.unsqueeze(1)).squeeze(1)
            confidence = torch.where(masked, top_prob, torch.zeros((), dtype=DTYPE))
            state = DecodeState(
                tokens=tokens.clone(),
                masked=masked.clone(),
                confidence=confidence.clamp(0.0, 1.0),
                step=block * per_block + i,
                block=block,
                prompt_len=prompt_len,
            )
            yield StepRecord(state=state, logits=logits, trace=trace)

            block_masked = masked[lo:hi]
            k = unmask_count(int(block_masked.sum()), per_block - i)
            if k == 0:
                continue
            scores = torch.where(
                block_masked, confidence[lo:hi], torch.full((), -math.inf, dtype=DTYPE)
            )
            order = torch.sort(-scores, stable=True).indices[:k] + lo
            tokens[order] = predicted[order]
            masked[order] = False
    return tokens


def decode(
    weights: ModelWeights,
    prompt: torch.Tensor,
    gen_len: int,
    steps: int,
    blocks: int,
    quant: FakeQuant | None = None,
) -> tuple[torch.Tensor, list[DecodeState]]:
    """Run the full decode.

    Returns:
        ``(tokens, trace)``: the final prompt+response ids and every intermediate
        DecodeState (one per step, ``blocks * (steps // blocks)`` in total).
    """
    trace: list[DecodeState] = []
    records = iter_decode(weights, prompt, gen_len, steps, blocks, quant=quant)
    while True:
        try:
            trace.append(next(records).state)
        except StopIteration as done:
            return done.value, trace


def capture_activations(
    weights: ModelWeights,
    dataset: Iterable[torch.Tensor],
    steps: int,
    blocks: int,
    gen_len: int = 32,
) -> Iterator[tuple[int, int, LayerTrace, DecodeState]]:
    """Replay decoding over ``dataset`` and emit ``(step, block, trace, state)``."""
    for prompt in dataset:
        for record in iter_decode(weights, prompt, gen_len, steps, blocks, capture=True):
            assert record.trace is not None
            yield record.state.step, record.state.block, record.trace, record.state
