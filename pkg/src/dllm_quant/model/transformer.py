"""Desk-scale masked-diffusion transformer.

Pre-norm blocks with gain-only RMS normalization, bidirectional multi-head attention
(no causal mask anywhere) and a GELU feed-forward. The model is a plain bundle of
float64 tensors evaluated functionally so quantized copies can be swapped in without
touching the forward code.
"""

import math
from dataclasses import dataclass, field, fields

import torch
import torch.nn.functional as F

from dllm_quant.config import ModelConfig
from dllm_quant.models import DecodeState, LayerCapture, LayerTrace
from dllm_quant.numerics import DTYPE, Matrix, Rng
from dllm_quant.quant import QuantSpec, fake_quantize_activation

NORM_EPS = 1e-6
LINEAR_NAMES = ("wq", "wk", "wv", "wo", "w1", "w2")


@dataclass
class LayerWeights:
    attn_norm: torch.Tensor
    wq: Matrix
    wk: Matrix
    wv: Matrix
    wo: Matrix
    ffn_norm: torch.Tensor
    w1: Matrix
    w2: Matrix


@dataclass
class ModelWeights:
    config: ModelConfig
    embed: Matrix
    pos: Matrix
    layers: list[LayerWeights]
    final_norm: torch.Tensor
    head: Matrix
    head_bias: torch.Tensor

    def named_tensors(self) -> dict[str, torch.Tensor]:
        """All parameters keyed by a stable dotted name, in a fixed order."""
        named: dict[str, torch.Tensor] = {"embed": self.embed, "pos": self.pos}
        for i, layer in enumerate(self.layers):
            for f in fields(layer):
                named[f"layers.{i}.{f.name}"] = getattr(layer, f.name)
        named["final_norm"] = self.final_norm
        named["head"] = self.head
        named["head_bias"] = self.head_bias
        return named

    def linear_names(self) -> list[str]:
        """Names of the weights that go through weight quantization."""
        return [f"layers.{i}.{n}" for i in range(len(self.layers)) for n in LINEAR_NAMES]

    def replace_tensors(self, updates: dict[str, torch.Tensor]) -> "ModelWeights":
        """Copy with the named tensors swapped out."""
        named = self.named_tensors()
        unknown = set(updates) - set(named)
        if unknown:
            raise ValueError(f"unknown weight names: {sorted(unknown)}")
        named.update(updates)
        return ModelWeights.from_named(self.config, named)

    @classmethod
    def from_named(cls, config: ModelConfig, named: dict[str, torch.Tensor]) -> "ModelWeights":
        try:
            layers = [
                LayerWeights(
                    **{
                        f.name: named[f"layers.{i}.{f.name}"]
                        for f in fields(LayerWeights)
                    }
                )
                for i in range(config.n_layers)
            ]
            weights = cls(
                config=config,
                embed=named["embed"],
                pos=named["pos"],
                layers=layers,
                final_norm=named["final_norm"],
                head=named["head"],
                head_bias=named["head_bias"],
            )
        except KeyError as e:
            raise ValueError(f"missing weight {e.args[0]!r}") from e
        weights.check_shapes()
        return weights

    def check_shapes(self) -> None:
        """Raise ValueError when any tensor disagrees with the config."""
        if len(self.layers) != self.config.n_layers:
            raise ValueError(
                f"config has {self.config.n_layers} layers, weights have {len(self.layers)}"
            )
        named = self.named_tensors()
        for name, shape in parameter_shapes(self.config).items():
            actual = tuple(named[name].shape)
            if actual != shape:
                raise ValueError(f"weight {name} has shape {actual}, config expects {shape}")

    def detached(self) -> "ModelWeights":
        return ModelWeights.from_named(
            self.config, {k: v.detach().clone() for k, v in self.named_tensors().items()}
        )

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelWeights):
            return NotImplemented
        mine, theirs = self.named_tensors(), other.named_tensors()
        return (
            self.config == other.config
            and mine.keys() == theirs.keys()
            and all(torch.equal(mine[k], theirs[k]) for k in mine)
        )


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Shape of every parameter, in ``named_tensors`` order."""
    c = config
    shapes: dict[str, tuple[int, ...]] = {
        "embed": (c.vocab_size, c.d_model),
        "pos": (c.seq_len, c.d_model),
    }
    for i in range(c.n_layers):
        shapes |= {
            f"layers.{i}.attn_norm": (c.d_model,),
            f"layers.{i}.wq": (c.d_model, c.d_model),
            f"layers.{i}.wk": (c.d_model, c.d_model),
            f"layers.{i}.wv": (c.d_model, c.d_model),
            f"layers.{i}.wo": (c.d_model, c.d_model),
            f"layers.{i}.ffn_norm": (c.d_model,),
            f"layers.{i}.w1": (c.d_ff, c.d_model),
            f"layers.{i}.w2": (c.d_model, c.d_ff),
        }
    shapes |= {
        "final_norm": (c.d_model,),
        "head": (c.vocab_size, c.d_model),
        "head_bias": (c.vocab_size,),
    }
    return shapes


def init_weights(config: ModelConfig, rng: Rng) -> ModelWeights:
    """Random initialization; draws happen in ``named_tensors`` order."""
    named: dict[str, torch.Tensor] = {}
    for name, shape in parameter_shapes(config).items():
        short = name.rsplit(".", 1)[-1]
        if short in ("attn_norm", "ffn_norm", "final_norm"):
            named[name] = torch.ones(shape, dtype=DTYPE)
        elif short == "head_bias":
            named[name] = torch.zeros(shape, dtype=DTYPE)
        elif short in ("embed", "pos"):
            named[name] = rng.normal(shape, std=0.5)
        else:
            named[name] = rng.normal(shape, std=1.0 / math.sqrt(shape[1]))
    return ModelWeights.from_named(config, named)


@dataclass(frozen=True)
class FakeQuant:
    """Activation-side fake quantization applied inside ``forward``.

    Weights are quantized ahead of time (the model passed to ``forward`` already holds
    dequantized weights); this object covers linear-layer inputs and the two operands
    of the softmax-times-V product.

    Attributes:
        act_bits: Bit-width of all activation quantizers.
        act_granularity: ``per-token`` recomputes ranges per row at runtime,
            ``per-tensor`` uses ``static_ranges`` from calibration.
        quantize_softmax_matmul: Quantize P and V before their product.
        v_alphas: Per-layer scale multiplier for V (1.0 when absent).
        static_ranges: ``(min, max)`` per activation key for per-tensor mode.
    """

    act_bits: int = 4
    act_granularity: str = "per-token"
    quantize_softmax_matmul: bool = True
    v_alphas: dict[int, float] = field(default_factory=dict)
    static_ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    @property
    def spec(self) -> QuantSpec:
        return QuantSpec.activation(self.act_bits, self.act_granularity)  # type: ignore[arg-type]

    def apply(self, x: Matrix, key: str, alpha: float = 1.0) -> Matrix:
        x_range = None
        if self.act_granularity == "per-tensor":
            if key not in self.static_ranges:
                raise ValueError(f"no calibrated range for activation {key!r}")
            x_range = self.static_ranges[key]
        return fake_quantize_activation(x, self.spec, alpha=alpha, x_range=x_range)


def rms_norm(x: Matrix, gain: torch.Tensor) -> Matrix:
    return x * torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + NORM_EPS) * gain


def _linear(x: Matrix, w: Matrix, key: str, quant: FakeQuant | None) -> Matrix:
    if quant is not None:
        x = quant.apply(x, key)
    return x @ w.T


def forward(
    weights: ModelWeights,
    tokens: torch.Tensor | DecodeState,
    *,
    capture: bool = False,
    quant: FakeQuant | None = None,
) -> tuple[Matrix, LayerTrace | None]:
    """Predict every position at once.

    ``quant`` covers the linears inside the blocks and the softmax-times-V product.
    The output head, like the embeddings, is kept in full precision: it is not among
    the weight-quantized ``LINEAR_NAMES`` and has no calibrated input range.

    Args:
        weights: Model parameters.
        tokens: Token ids (length <= seq_len) or a DecodeState holding them.
        capture: Record per-layer activations.
        quant: Activation fake quantization; None runs in full precision.

    Returns:
        ``(logits, trace)`` with logits of shape ``(len(tokens), vocab_size)``.
    """
    weights.check_shapes()
    config = weights.config
    if isinstance(tokens, DecodeState):
        tokens = tokens.tokens
    n = tokens.numel()
    if n > config.seq_len:
        raise ValueError(f"sequence of length {n} exceeds seq_len {config.seq_len}")

    x = weights.embed[tokens]
    if config.use_position:
        x = x + weights.pos[:n]
    trace = LayerTrace() if capture else None
    n_heads, d_head = config.n_heads, config.d_head

    for i, layer in enumerate(weights.layers):
        prefix = f"layers.{i}"
        h = rms_norm(x, layer.attn_norm)
        q = _linear(h, layer.wq, f"{prefix}.wq", quant)
        k = _linear(h, layer.wk, f"{prefix}.wk", quant)
        v = _linear(h, layer.wv, f"{prefix}.wv", quant)
        q, k, v = (t.reshape(n, n_heads, d_head).transpose(0, 1) for t in (q, k, v))

        p = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(d_head), dim=-1)
        if quant is not None and quant.quantize_softmax_matmul:
            alpha = quant.v_alphas.get(i, 1.0)
            p_used = torch.stack(
                [quant.apply(p[j], f"{prefix}.softmax") for j in range(n_heads)]
            )
            v_used = torch.stack(
                [quant.apply(v[j], f"{prefix}.values", alpha) for j in range(n_heads)]
            )
        else:
            p_used, v_used = p, v
        attn = (p_used @ v_used).transpose(0, 1).reshape(n, config.d_model)
        x = x + _linear(attn, layer.wo, f"{prefix}.wo", quant)

        g = rms_norm(x, layer.ffn_norm)
        hidden = F.gelu(_linear(g, layer.w1, f"{prefix}.w1", quant))
        x = x + _linear(hidden, layer.w2, f"{prefix}.w2", quant)

        if trace is not None:
            trace.layers.append(
                LayerCapture(
                    attn_in=h.detach(),
                    softmax=p.detach(),
                    values=v.detach(),
                    attn_out=attn.detach(),
                    ffn_in=g.detach(),
                    ffn_hidden=hidden.detach(),
                    output=x.detach(),
                )
            )

    x = rms_norm(x, weights.final_norm)
    logits = x @ weights.head.T + weights.head_bias
    return logits, trace


def zero_weights(config: ModelConfig) -> ModelWeights:
    named = {
        name: torch.zeros(shape, dtype=DTYPE)
        for name, shape in parameter_shapes(config).items()
    }
    return ModelWeights.from_named(config, named)
