from typing import Protocol

from dllm_quant.numerics import Matrix
from dllm_quant.quant import QuantizedTensor, QuantSpec

from .cgq import cgq_hessian, cgq_quantize, cgq_token_weights, weighted_gram
from .gptq import gptq_quantize, hessian_loss
from .iaaq import best_alpha, iaaq_scale_search
from .rtn import rtn_quantize


class WeightQuantizer(Protocol):
    """Quantizes one linear layer given its accumulated Hessian (None for rtn)."""

    def __call__(
        self, w: Matrix, h: Matrix | None, spec: QuantSpec, damp: float
    ) -> QuantizedTensor: ...


def _rtn(w: Matrix, h: Matrix | None, spec: QuantSpec, damp: float) -> QuantizedTensor:
    return rtn_quantize(w, spec)


def _gptq(w: Matrix, h: Matrix | None, spec: QuantSpec, damp: float) -> QuantizedTensor:
    if h is None:
        raise ValueError("gptq-style methods need a Hessian")
    return gptq_quantize(w, h, spec, damp)


# cgq runs the same column loop; only the collected Hessian is reweighted
WEIGHT_METHODS: dict[str, WeightQuantizer] = {
    "rtn": _rtn,
    "gptq": _gptq,
    "cgq": _gptq,
}


def get_method(name: str) -> WeightQuantizer:
    try:
        return WEIGHT_METHODS[name]
    except KeyError as e:
        raise ValueError(
            f"unknown weight method {name!r}; choose from {sorted(WEIGHT_METHODS)}"
        ) from e


__all__ = [
    "WEIGHT_METHODS",
    "WeightQuantizer",
    "best_alpha",
    "cgq_hessian",
    "cgq_quantize",
    "cgq_token_weights",
    "get_method",
    "gptq_quantize",
    "hessian_loss",
    "iaaq_scale_search",
    "rtn_quantize",
    "weighted_gram",
]
