"""Masked-diffusion objective and a small SGD trainer for toy checkpoints."""

import math
from collections.abc import Sequence

import torch
import torch.nn.functional as F
from rich import print as rprint

from dllm_quant.config import ModelConfig
from dllm_quant.model.transformer import ModelWeights, forward, init_weights
from dllm_quant.numerics import Rng


def sample_mask(n: int, t: float, rng: Rng) -> torch.Tensor:
    """Forward process: mask each position independently with probability ``t``."""
    return torch.from_numpy(rng.uniform(n) < t)


def masked_ce_loss(
    weights: ModelWeights,
    x0: torch.Tensor,
    t: float,
    rng: Rng | None = None,
    *,
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Cross-entropy on masked tokens, scaled by ``1/t``.

    Args:
        weights: Model parameters (may require grad).
        x0: Clean token ids.
        t: Masking level in (0, 1].
        rng: Source of the forward-process mask; unused when ``mask`` is given.
        mask: Explicit mask, overriding the random draw.

    Returns:
        A 0-dim tensor; exactly 0 when nothing is masked.
    """
    if not 0.0 < t <= 1.0:
        raise ValueError(f"t must lie in (0, 1], got {t}")
    if mask is None:
        if rng is None:
            raise ValueError("either rng or mask is required")
        mask = sample_mask(x0.numel(), t, rng)
    if not bool(mask.any()):
        return torch.zeros((), dtype=weights.embed.dtype)
    noisy = torch.where(mask, torch.full_like(x0, weights.config.mask_id), x0)
    logits, _ = forward(weights, noisy)
    log_probs = F.log_softmax(logits[mask], dim=-1)
    picked = log_probs.gather(1, x0[mask].unsqueeze(1)).squeeze(1)
    return -picked.sum() / t


def heldout_loss(
    weights: ModelWeights, corpus: Sequence[torch.Tensor], rng: Rng, draws: int = 4
) -> float:
    """Per-token masked CE loss averaged over sequences and random masking levels."""
    total = 0.0
    count = 0
    with torch.no_grad():
        for seq in corpus:
            for _ in range(draws):
                t = 1.0 - float(rng.uniform())
                total += float(masked_ce_loss(weights, seq, t, rng)) / seq.numel()
                count += 1
    return total / max(count, 1)


def train_toy(
    config: ModelConfig,
    corpus: Sequence[torch.Tensor],
    epochs: int,
    lr: float,
    rng: Rng,
    *,
    batch_size: int = 8,
    max_grad_norm: float = 1.0,
    log_every: int = 50,
) -> ModelWeights:
    """Plain SGD on the masked-diffusion loss with ``t ~ Uniform(0, 1]``.

    Each minibatch loss is the per-token average of ``masked_ce_loss``; gradients are
    norm-clipped because the ``1/t`` factor makes small-``t`` draws spiky.

    Raises:
        ValueError: If a corpus sequence does not have length ``seq_len``.
        RuntimeError: If the loss stops being finite.
    """
    for seq in corpus:
        if seq.numel() != config.seq_len:
            raise ValueError(
                f"corpus sequences must have length {config.seq_len}, got {seq.numel()}"
            )
    weights = init_weights(config, rng.spawn(1))
    named = {k: v.clone().requires_grad_(True) for k, v in weights.named_tensors().items()}
    optimizer = torch.optim.SGD(list(named.values()), lr=lr)

    step = 0
    for epoch in range(epochs):
        order = [int(i) for i in rng.choice(len(corpus), len(corpus))]
        for start in range(0, len(order), batch_size):
            batch = [corpus[i] for i in order[start : start + batch_size]]
            current = ModelWeights.from_named(config, named)
            optimizer.zero_grad()
            losses = [
                masked_ce_loss(current, seq, 1.0 - float(rng.uniform()), rng) / seq.numel()
                for seq in batch
            ]
            loss = torch.stack(losses).mean()
            if not math.isfinite(float(loss)):
                raise RuntimeError(
                    f"training diverged at step {step} (loss={float(loss)}); "
                    "use a smaller lr"
                )
            if not loss.requires_grad:
                # every sequence in the batch drew an empty mask
                continue
            loss.backward()
            torch.nn.utils.clip_grad_norm_(list(named.values()), max_grad_norm)
            optimizer.step()
            step += 1
            if log_every and step % log_every == 0:
                rprint(
                    f"[dim]  epoch {epoch} step {step}: loss {float(loss):.4f}[/dim]"
                )

    return ModelWeights.from_named(config, named).detached()
