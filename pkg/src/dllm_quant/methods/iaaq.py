"""Interaction-aware scale search for the value matrix.

The scale of V is chosen from ``alpha * s_hat`` over a small grid so that the error
of the attention output, ``||P_deq (Deq(Q(V)) - V)||_F^2``, is smallest. Ties go to
the alpha closest to 1.0.
"""

from collections.abc import Sequence

import torch

from dllm_quant.models import ScaleSearchResult
from dllm_quant.numerics import Matrix
from dllm_quant.quant import (
    QuantSpec,
    activation_bounds,
    asymmetric_params,
    dequantize,
    quantize_with_params,
)

DEFAULT_GRID = (1.0, 0.8)


def best_alpha(losses: dict[float, float]) -> float:
    """Smallest loss; ties go to the alpha closest to 1.0."""
    return min(losses, key=lambda a: (losses[a], abs(a - 1.0)))


def attention_weighted_error(
    v: Matrix,
    p_deq: Matrix,
    spec: QuantSpec,
    alpha: float,
    x_range: tuple[float, float] | None = None,
) -> tuple[float, torch.Tensor, torch.Tensor]:
    lo, hi = activation_bounds(v, spec, x_range)
    scale, zero_point = asymmetric_params(lo, hi, spec, alpha)
    v_deq = dequantize(quantize_with_params(v, spec, scale, zero_point))
    err = p_deq @ (v_deq - v)
    return float((err * err).sum()), scale, zero_point


def iaaq_scale_search(
    v: Matrix,
    p_deq: Matrix,
    spec: QuantSpec,
    grid: Sequence[float] = DEFAULT_GRID,
    *,
    x_range: tuple[float, float] | None = None,
) -> ScaleSearchResult:
    """Pick the alpha minimizing the attention-weighted V error for one (V, P) pair.

    ``alpha`` multiplies the scale of the range the runtime quantizer uses: the
    calibrated static ``x_range`` in per-tensor mode, otherwise V's own range.

    Raises:
        ValueError: If the grid is empty or ``p_deq`` columns do not match ``v`` rows.
    """
    if not grid:
        raise ValueError("alpha grid must not be empty")
    if p_deq.shape[1] != v.shape[0]:
        raise ValueError(
            f"attention {tuple(p_deq.shape)} does not conform with V {tuple(v.shape)}"
        )
    losses: dict[float, float] = {}
    params: dict[float, tuple[torch.Tensor, torch.Tensor]] = {}
    for alpha in grid:
        losses[alpha], scale, zero_point = attention_weighted_error(
            v, p_deq, spec, alpha, x_range
        )
        params[alpha] = (scale, zero_point)
    best = best_alpha(losses)
    return ScaleSearchResult(
        alpha=best, scale=params[best][0], zero_point=params[best][1], losses=losses
    )
