from dataclasses import dataclass, field

import torch

from dllm_quant.numerics import Matrix


@dataclass
class DecodeState:
    """Sequence state fed to the mask predictor at one decode step.

    ``tokens`` covers prompt plus response. ``confidence`` holds, for every position
    the model predicted at this step (the masked ones), the probability of its argmax
    token; it is 0 elsewhere.
    """

    tokens: torch.Tensor
    masked: torch.Tensor
    confidence: torch.Tensor
    step: int
    block: int
    prompt_len: int

    def __post_init__(self):
        n = self.tokens.numel()
        if self.masked.numel() != n or self.confidence.numel() != n:
            raise ValueError(
                f"DecodeState fields disagree in length: tokens {n}, "
                f"masked {self.masked.numel()}, confidence {self.confidence.numel()}"
            )
        if bool(((self.confidence < 0) | (self.confidence > 1)).any()):
            raise ValueError("confidence scores must lie in [0, 1]")

    @property
    def response_len(self) -> int:
        return self.tokens.numel() - self.prompt_len

    @property
    def unmask_ratio(self) -> float:
        """Unmasked fraction of the response region (the sampling ratio r_t)."""
        response = self.masked[self.prompt_len :]
        if response.numel() == 0:
            return 1.0
        return float((~response).sum()) / response.numel()

    def check_mask(self, mask_id: int) -> None:
        if bool((self.tokens[self.masked] != mask_id).any()):
            raise ValueError("masked positions must hold the MASK id")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DecodeState):
            return NotImplemented
        return (
            self.step == other.step
            and self.block == other.block
            and self.prompt_len == other.prompt_len
            and torch.equal(self.tokens, other.tokens)
            and torch.equal(self.masked, other.masked)
            and torch.equal(self.confidence, other.confidence)
        )


# weight name -> LayerCapture field holding its input
LINEAR_INPUTS = {
    "wq": "attn_in",
    "wk": "attn_in",
    "wv": "attn_in",
    "wo": "attn_out",
    "w1": "ffn_in",
    "w2": "ffn_hidden",
}


@dataclass
class LayerCapture:
    """Activations of one transformer layer for one forward pass."""

    attn_in: Matrix
    softmax: torch.Tensor
    values: torch.Tensor
    attn_out: Matrix
    ffn_in: Matrix
    ffn_hidden: Matrix
    output: Matrix

    def linear_inputs(self) -> dict[str, Matrix]:
        """Input matrix of every linear projection in the layer, keyed by weight name."""
        return {name: getattr(self, attr) for name, attr in LINEAR_INPUTS.items()}


@dataclass
class LayerTrace:
    layers: list[LayerCapture] = field(default_factory=list)


@dataclass
class StepRecord:
    """One decode step: its input state, the logits produced and optional captures."""

    state: DecodeState
    logits: Matrix
    trace: LayerTrace | None = None


@dataclass
class CalibrationSample:
    prompt: torch.Tensor
    step: int
    block: int
    unmask_ratio: float
    bin: int
    state: DecodeState

    @property
    def mask_ratio(self) -> float:
        """Alias kept for the sampling algorithm's naming; holds the unmasked fraction."""
        return self.unmask_ratio

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CalibrationSample):
            return NotImplemented
        return (
            torch.equal(self.prompt, other.prompt)
            and (self.step, self.block, self.unmask_ratio, self.bin)
            == (other.step, other.block, other.unmask_ratio, other.bin)
            and self.state == other.state
        )


@dataclass
class CalibrationSet:
    samples: list[CalibrationSample]
    counters: list[list[int]]
    targets: list[float]

    @property
    def num_blocks(self) -> int:
        return len(self.counters)

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class WeightedHessian:
    h: Matrix
    token_weights: torch.Tensor
    source: str = "plain"


@dataclass
class ScaleSearchResult:
    alpha: float
    scale: torch.Tensor
    zero_point: torch.Tensor
    losses: dict[float, float]
