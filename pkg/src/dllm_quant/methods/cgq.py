"""Certainty-guided weight quantization.

Each token's contribution to the Hessian is scaled by ``m_i**2`` with
``m_i = (masked_weight if masked else unmasked_weight) + sqrt(confidence_i)``.
"""

import torch

from dllm_quant.methods.gptq import gptq_quantize
from dllm_quant.models import DecodeState, WeightedHessian
from dllm_quant.numerics import DTYPE, Matrix
from dllm_quant.quant import QuantizedTensor, QuantSpec


def cgq_token_weights(
    state: DecodeState,
    masked_weight: float = 1.0,
    unmasked_weight: float = 0.7,
    *,
    use_mask_state: bool = True,
    use_confidence: bool = True,
) -> torch.Tensor:
    """Per-token multipliers ``m_i``.

    ``use_mask_state=False`` replaces the indicator weights with 1.0 everywhere;
    ``use_confidence=False`` drops the ``sqrt(confidence)`` term.
    """
    if use_mask_state:
        indicator = torch.where(
            state.masked,
            torch.tensor(masked_weight, dtype=DTYPE),
            torch.tensor(unmasked_weight, dtype=DTYPE),
        )
    else:
        indicator = torch.ones(state.tokens.numel(), dtype=DTYPE)
    if use_confidence:
        return indicator + torch.sqrt(state.confidence.to(DTYPE))
    return indicator


def weighted_gram(x: Matrix, token_weights: torch.Tensor) -> Matrix:
    """``sum_i m_i^2 x_i^T x_i``."""
    scaled = x * token_weights.reshape(-1, 1)
    return scaled.T @ scaled


def cgq_hessian(
    x: Matrix,
    state: DecodeState,
    masked_weight: float = 1.0,
    unmasked_weight: float = 0.7,
    *,
    use_mask_state: bool = True,
    use_confidence: bool = True,
) -> WeightedHessian:
    """Hessian of one layer input with certainty-guided token weights.

    Raises:
        ValueError: If ``x`` does not have one row per state position.
    """
    if x.shape[0] != state.tokens.numel():
        raise ValueError(
            f"x has {x.shape[0]} rows but the decode state has {state.tokens.numel()} tokens"
        )
    m = cgq_token_weights(
        state,
        masked_weight,
        unmasked_weight,
        use_mask_state=use_mask_state,
        use_confidence=use_confidence,
    )
    return WeightedHessian(h=weighted_gram(x, m), token_weights=m, source="cgq")


def cgq_quantize(
    w: Matrix, x: Matrix, state: DecodeState, spec: QuantSpec, damp: float = 0.01
) -> QuantizedTensor:
    return gptq_quantize(w, cgq_hessian(x, state).h, spec, damp)
