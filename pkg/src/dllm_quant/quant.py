"""Uniform fake-quantizers and the statistics built on them.

Orientation used throughout the package: a linear layer has weight ``W`` of shape
``(out_channels, in_channels)`` and input ``X`` of shape ``(tokens, in_channels)``;
its output is ``X @ W.T``. Weights are grouped per output channel (rows of ``W``),
activations per token (rows of ``X``) or over the whole tensor.
"""

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Literal

import numpy as np
import torch

from dllm_quant.numerics import DTYPE, Matrix, matmul, read_exact, transpose

type Scheme = Literal["symmetric", "asymmetric"]
type Granularity = Literal["per-tensor", "per-channel", "per-token"]

EPS = 1e-12
QTENSOR_MAGIC = b"DLQQ"

_SCHEMES: tuple[Scheme, ...] = ("symmetric", "asymmetric")
_GRANULARITIES: tuple[Granularity, ...] = ("per-tensor", "per-channel", "per-token")


@dataclass(frozen=True)
class QuantSpec:
    """Bit-width, scheme and grouping of a uniform quantizer.

    Harness configs restrict ``bits`` to [2, 8]; the primitive accepts up to 16 so
    near-lossless runs can be compared against full precision.
    """

    bits: int
    scheme: Scheme = "symmetric"
    granularity: Granularity = "per-channel"

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise ValueError(f"bits must be in [2, 16], got {self.bits}")
        if self.scheme not in _SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.granularity not in _GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")

    @property
    def q_min(self) -> int:
        if self.scheme == "symmetric":
            return -(2 ** (self.bits - 1) - 1)
        return 0

    @property
    def q_max(self) -> int:
        if self.scheme == "symmetric":
            return 2 ** (self.bits - 1) - 1
        return 2**self.bits - 1

    @classmethod
    def weight(cls, bits: int) -> "QuantSpec":
        return cls(bits, "symmetric", "per-channel")

    @classmethod
    def activation(cls, bits: int, granularity: Granularity = "per-token") -> "QuantSpec":
        return cls(bits, "asymmetric", granularity)


@dataclass
class QuantizedTensor:
    """Integer codes with their scales and zero points.

    ``scale`` and ``zero_point`` hold one entry per group: a single entry for
    per-tensor granularity, one per row otherwise.
    """

    codes: torch.Tensor
    scale: torch.Tensor
    zero_point: torch.Tensor
    spec: QuantSpec
    shape: tuple[int, int] = field(init=False)

    def __post_init__(self):
        self.shape = (int(self.codes.shape[0]), int(self.codes.shape[1]))
        groups = 1 if self.spec.granularity == "per-tensor" else self.shape[0]
        if self.scale.numel() != groups or self.zero_point.numel() != groups:
            raise ValueError(
                f"expected {groups} scale/zero-point entries for {self.spec.granularity}, "
                f"got {self.scale.numel()}/{self.zero_point.numel()}"
            )
        if self.codes.numel() and (
            int(self.codes.min()) < self.spec.q_min or int(self.codes.max()) > self.spec.q_max
        ):
            raise ValueError("codes outside the quantization range")
        if bool((self.scale <= 0).any()):
            raise ValueError("scales must be strictly positive")
        if self.spec.scheme == "symmetric" and bool((self.zero_point != 0).any()):
            raise ValueError("symmetric quantization requires zero points of 0")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.spec == other.spec
            and self.shape == other.shape
            and torch.equal(self.codes, other.codes)
            and torch.equal(self.scale, other.scale)
            and torch.equal(self.zero_point, other.zero_point)
        )


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Round to nearest with halves away from zero."""
    return torch.sign(x) * torch.floor(torch.abs(x) + 0.5)


def _group_view(x: Matrix, granularity: Granularity) -> Matrix:
    # one row per quantization group
    return x.reshape(1, -1) if granularity == "per-tensor" else x


def weight_absmax(w: Matrix, spec: QuantSpec) -> torch.Tensor:
    """Per-group ``max(|w|, eps)``."""
    return _group_view(w, spec.granularity).abs().amax(dim=1).clamp_min(EPS)


def symmetric_codes(w: Matrix, absmax: torch.Tensor, spec: QuantSpec) -> torch.Tensor:
    # w / absmax * q_max rather than w / scale: exact ties such as 1 / (2/7) stay ties
    groups = _group_view(w, spec.granularity)
    codes = round_half_away(groups / absmax.reshape(-1, 1) * spec.q_max)
    return codes.clamp(spec.q_min, spec.q_max).reshape(w.shape).to(torch.int32)


def quantize_weight(w: Matrix, spec: QuantSpec) -> QuantizedTensor:
    """Symmetric quantization with one scale per output channel (or per tensor).

    ``scale = max(|w_group|, eps) / q_max``; codes are ``round(w / scale)`` clamped to
    ``[q_min, q_max]``.
    """
    if spec.scheme != "symmetric":
        raise ValueError("quantize_weight expects a symmetric spec")
    absmax = weight_absmax(w, spec)
    scale = absmax / spec.q_max
    codes = symmetric_codes(w, absmax, spec)
    return QuantizedTensor(
        codes=codes,
        scale=scale.to(DTYPE),
        zero_point=torch.zeros(scale.numel(), dtype=torch.int32),
        spec=spec,
    )


def activation_range(x: Matrix, granularity: Granularity) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-group ``(min, max)`` widened to include zero."""
    groups = _group_view(x, granularity)
    lo = groups.amin(dim=1).clamp_max(0.0)
    hi = groups.amax(dim=1).clamp_min(0.0)
    return lo, hi


def activation_bounds(
    x: Matrix, spec: QuantSpec, x_range: tuple[float, float] | None = None
) -> tuple[torch.Tensor, torch.Tensor]:
    """The range an activation quantizer scales against: the static ``x_range`` when
    given (per tensor only), else the dynamic range of ``x``."""
    if x_range is None:
        return activation_range(x, spec.granularity)
    if spec.granularity != "per-tensor":
        raise ValueError("a static range only applies to per-tensor quantization")
    lo = torch.tensor([min(x_range[0], 0.0)], dtype=DTYPE)
    hi = torch.tensor([max(x_range[1], 0.0)], dtype=DTYPE)
    return lo, hi


def asymmetric_params(
    lo: torch.Tensor, hi: torch.Tensor, spec: QuantSpec, alpha: float = 1.0
) -> tuple[torch.Tensor, torch.Tensor]:
    """Scale and integer zero point for the ranges ``[lo, hi]``.

    The base scale ``(hi - lo) / (q_max - q_min)`` is multiplied by ``alpha``; the zero
    point is recomputed for the scaled step.
    """
    base = (hi - lo).clamp_min(EPS) / (spec.q_max - spec.q_min)
    scale = alpha * base
    zero_point = round_half_away(-lo / scale).clamp(spec.q_min, spec.q_max)
    return scale.to(DTYPE), zero_point.to(torch.int32)


def _codes_for_scale(
    x: Matrix, spec: QuantSpec, scale: torch.Tensor, zero_point: torch.Tensor
) -> torch.Tensor:
    s = scale.reshape(-1, 1)
    z = zero_point.to(DTYPE).reshape(-1, 1)
    groups = _group_view(x, spec.granularity)
    codes = (round_half_away(groups / s) + z).clamp(spec.q_min, spec.q_max)
    return codes.reshape(x.shape).to(torch.int32)


def quantize_activation(
    x: Matrix,
    spec: QuantSpec,
    *,
    alpha: float = 1.0,
    x_range: tuple[float, float] | None = None,
) -> QuantizedTensor:
    """Asymmetric quantization per token or per tensor.

    Args:
        x: Activations, one row per token.
        spec: Asymmetric spec with per-token or per-tensor granularity.
        alpha: Multiplier applied to the min/max scale.
        x_range: Static ``(min, max)`` from calibration; only valid per tensor.
    """
    if spec.scheme != "asymmetric":
        raise ValueError("quantize_activation expects an asymmetric spec")
    if spec.granularity == "per-channel":
        raise ValueError("activations are quantized per token or per tensor")
    lo, hi = activation_bounds(x, spec, x_range)
    scale, zero_point = asymmetric_params(lo, hi, spec, alpha)
    return QuantizedTensor(
        codes=_codes_for_scale(x, spec, scale, zero_point),
        scale=scale,
        zero_point=zero_point,
        spec=spec,
    )


def quantize_with_params(
    x: Matrix, spec: QuantSpec, scale: torch.Tensor, zero_point: torch.Tensor
) -> QuantizedTensor:
    """Quantize with externally chosen scales and zero points."""
    return QuantizedTensor(
        codes=_codes_for_scale(x, spec, scale, zero_point),
        scale=scale.to(DTYPE),
        zero_point=zero_point.to(torch.int32),
        spec=spec,
    )


def dequantize(q: QuantizedTensor) -> Matrix:
    """``(codes - zero_point) * scale`` broadcast over each group."""
    codes = _group_view(q.codes.to(DTYPE), q.spec.granularity)
    z = q.zero_point.to(DTYPE).reshape(-1, 1)
    s = q.scale.reshape(-1, 1)
    return ((codes - z) * s).reshape(q.shape)


def fake_quantize_activation(
    x: Matrix,
    spec: QuantSpec,
    *,
    alpha: float = 1.0,
    x_range: tuple[float, float] | None = None,
) -> Matrix:
    return dequantize(quantize_activation(x, spec, alpha=alpha, x_range=x_range))


def quant_loss(w: Matrix, x: Matrix, wq: QuantizedTensor, xq: QuantizedTensor) -> float:
    """Squared Frobenius error of the layer output, ``||X W^T - X~ W~^T||_F^2``."""
    if w.shape != wq.shape or x.shape != xq.shape:
        raise ValueError(
            f"quantized shapes {wq.shape}/{xq.shape} do not match "
            f"{tuple(w.shape)}/{tuple(x.shape)}"
        )
    exact = matmul(x, transpose(w))
    approx = matmul(dequantize(xq), transpose(dequantize(wq)))
    return float(((exact - approx) ** 2).sum())


def gram(x: Matrix) -> Matrix:
    """Token-accumulated Gram matrix ``sum_t x_t^T x_t`` of shape (ic, ic)."""
    return matmul(transpose(x), x)


_SCHEME_CODES = {name: i for i, name in enumerate(_SCHEMES)}
_GRANULARITY_CODES = {name: i for i, name in enumerate(_GRANULARITIES)}


def write_qtensor(f: BinaryIO, q: QuantizedTensor) -> None:
    """``DLQQ | bits scheme granularity (u8) | rows cols groups (u32) | i32 codes |
    f64 scales | i32 zero points``."""
    rows, cols = q.shape
    f.write(QTENSOR_MAGIC)
    f.write(
        struct.pack(
            "<BBBIII",
            q.spec.bits,
            _SCHEME_CODES[q.spec.scheme],
            _GRANULARITY_CODES[q.spec.granularity],
            rows,
            cols,
            q.scale.numel(),
        )
    )
    f.write(q.codes.numpy().astype("<i4").tobytes())
    f.write(q.scale.numpy().astype("<f8").tobytes())
    f.write(q.zero_point.numpy().astype("<i4").tobytes())


def read_qtensor(f: BinaryIO) -> QuantizedTensor:
    magic = read_exact(f, 4)
    if magic != QTENSOR_MAGIC:
        raise ValueError(f"bad quantized-tensor magic {magic!r}")
    bits, scheme, gran, rows, cols, groups = struct.unpack("<BBBIII", read_exact(f, 15))
    spec = QuantSpec(bits, _SCHEMES[scheme], _GRANULARITIES[gran])
    codes = np.frombuffer(read_exact(f, 4 * rows * cols), dtype="<i4")
    scale = np.frombuffer(read_exact(f, 8 * groups), dtype="<f8")
    zero_point = np.frombuffer(read_exact(f, 4 * groups), dtype="<i4")
    return QuantizedTensor(
        codes=torch.from_numpy(codes.astype(np.int32)).reshape(rows, cols),
        scale=torch.from_numpy(scale.copy()).to(DTYPE),
        zero_point=torch.from_numpy(zero_point.astype(np.int32)),
        spec=spec,
    )
