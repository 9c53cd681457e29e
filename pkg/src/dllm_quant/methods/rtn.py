from dllm_quant.numerics import Matrix
from dllm_quant.quant import QuantizedTensor, QuantSpec, quantize_weight


def rtn_quantize(w: Matrix, spec: QuantSpec) -> QuantizedTensor:
    """Round-to-nearest baseline: no calibration, no compensation."""
    return quantize_weight(w, spec)
