"""Hessian-compensated weight quantization.

Columns are quantized left to right; the rounding error of each column is pushed
onto the not-yet-quantized columns through the upper Cholesky factor of the damped
inverse Hessian, as in OBQ/GPTQ. At toy scale the whole matrix is one block.
"""

import torch
from rich import print as rprint

from dllm_quant.numerics import Matrix, cholesky_inverse
from dllm_quant.quant import (
    QuantizedTensor,
    QuantSpec,
    dequantize,
    quantize_weight,
    round_half_away,
    weight_absmax,
)


def _inverse_factor(h: Matrix, damp: float) -> Matrix:
    try:
        hinv = cholesky_inverse(h, damp)
    except RuntimeError:
        retry = damp * 10 if damp > 0 else 0.01
        rprint(f"[yellow]⚠️  Hessian not positive definite, retrying with damp={retry}[/yellow]")
        hinv = cholesky_inverse(h, retry)
    return torch.linalg.cholesky(hinv, upper=True)


def gptq_quantize(
    w: Matrix, h: Matrix, spec: QuantSpec, damp: float = 0.01
) -> QuantizedTensor:
    """Quantize ``w`` (oc x ic) with error compensation weighted by ``h`` (ic x ic).

    Scales are fixed per channel from the original ``w`` before any compensation.
    Columns with no calibration signal (zero Hessian diagonal) get a unit diagonal so
    the factorization stays defined.

    Raises:
        ValueError: If the shapes do not conform.
        RuntimeError: If ``h`` stays indefinite after one damping increase.
    """
    oc, ic = w.shape
    if h.shape != (ic, ic):
        raise ValueError(f"Hessian shape {tuple(h.shape)} does not match weight {tuple(w.shape)}")
    base = quantize_weight(w, spec)
    absmax = weight_absmax(w, spec)
    scale = base.scale

    h = h.clone()
    dead = torch.diag(h) == 0
    h[dead, dead] = 1.0
    u = _inverse_factor(h, damp)

    work = w.clone()
    codes = torch.zeros((oc, ic), dtype=torch.int32)
    for j in range(ic):
        col = work[:, j]
        # same expression as quantize_weight so an identity Hessian reproduces RTN
        q = round_half_away(col / absmax * spec.q_max).clamp(spec.q_min, spec.q_max)
        codes[:, j] = q.to(torch.int32)
        err = (col - q * scale) / u[j, j]
        work[:, j + 1 :] -= err.unsqueeze(1) * u[j, j + 1 :].unsqueeze(0)

    return QuantizedTensor(
        codes=codes, scale=base.scale, zero_point=base.zero_point, spec=spec
    )


def hessian_loss(w: Matrix, q: QuantizedTensor, h: Matrix) -> float:
    """Proxy output error ``tr(E h E^T)`` with ``E = w - Deq(q)``."""
    e = w - dequantize(q)
    return float(torch.trace(e @ h @ e.T))
