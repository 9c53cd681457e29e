"""Plug-and-play quantization of a trained model.

Replays calibration states through the full-precision model, accumulates per-layer
statistics, then applies the configured weight method to every linear layer and fixes
the activation quantizers (static ranges and per-layer V scale multipliers).
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import torch
from pydantic import BaseModel, Field
from rich import print as rprint

from dllm_quant import __version__
from dllm_quant.config import QuantConfig
from dllm_quant.methods import (
    best_alpha,
    cgq_hessian,
    get_method,
    iaaq_scale_search,
)
from dllm_quant.model.checkpoint import read_name, read_weights, write_name, write_weights
from dllm_quant.model.transformer import LINEAR_NAMES, FakeQuant, ModelWeights, forward
from dllm_quant.models import LINEAR_INPUTS, CalibrationSet, LayerTrace
from dllm_quant.numerics import Matrix, read_exact
from dllm_quant.quant import (
    QuantizedTensor,
    QuantSpec,
    dequantize,
    gram,
    read_qtensor,
    write_qtensor,
)


class QuantManifest(BaseModel):
    """Every decision taken while quantizing, enough to rebuild the runtime."""

    version: str = __version__
    fingerprint: str
    config: QuantConfig
    calib_samples: int = Field(ge=0)
    layer_methods: dict[str, str] = Field(default_factory=dict)
    v_alphas: dict[int, float] = Field(default_factory=dict)
    alpha_losses: dict[int, dict[float, float]] = Field(default_factory=dict)
    static_ranges: dict[str, tuple[float, float]] = Field(default_factory=dict)

    def fake_quant(self) -> FakeQuant:
        return FakeQuant(
            act_bits=self.config.act_bits,
            act_granularity=self.config.act_granularity,
            quantize_softmax_matmul=self.config.quantize_softmax_matmul,
            v_alphas=dict(self.v_alphas),
            static_ranges=dict(self.static_ranges),
        )


@dataclass
class QuantizedModel:
    """Dequantized weights plus the activation runtime that goes with them."""

    weights: ModelWeights
    qtensors: dict[str, QuantizedTensor]
    manifest: QuantManifest

    @property
    def quant(self) -> FakeQuant:
        return self.manifest.fake_quant()


class _RangeTracker:
    def __init__(self):
        self.ranges: dict[str, tuple[float, float]] = {}

    def update(self, key: str, x: torch.Tensor) -> None:
        lo, hi = float(x.min()), float(x.max())
        if key in self.ranges:
            old_lo, old_hi = self.ranges[key]
            lo, hi = min(lo, old_lo), max(hi, old_hi)
        self.ranges[key] = (lo, hi)


class ModelQuantizer:
    """Quantizes one model under one QuantConfig."""

    def __init__(self, weights: ModelWeights, config: QuantConfig):
        self._weights = weights
        self._config = config
        self._spec = QuantSpec.weight(config.weight_bits)

    def _replay(self, calib: CalibrationSet):
        n_layers = self._weights.config.n_layers
        for sample in calib.samples:
            with torch.no_grad():
                _, trace = forward(self._weights, sample.state.tokens, capture=True)
            assert trace is not None
            if len(trace.layers) != n_layers:
                raise ValueError(
                    f"captured {len(trace.layers)} layers, model has {n_layers}"
                )
            yield sample, trace

    def collect(
        self, calib: CalibrationSet
    ) -> tuple[dict[str, Matrix], dict[str, tuple[float, float]]]:
        """Hessians keyed by ``layers.{i}.{input field}`` and static activation ranges."""
        cfg = self._config
        hessians: dict[str, Matrix] = {}
        tracker = _RangeTracker()
        for sample, trace in self._replay(calib):
            state = sample.state
            for i, capture in enumerate(trace.layers):
                prefix = f"layers.{i}"
                for name, x in capture.linear_inputs().items():
                    tracker.update(f"{prefix}.{name}", x)
                tracker.update(f"{prefix}.softmax", capture.softmax)
                tracker.update(f"{prefix}.values", capture.values)
                if cfg.weight_method == "rtn":
                    continue
                for field in sorted(set(LINEAR_INPUTS.values())):
                    x = getattr(capture, field)
                    if cfg.weight_method == "cgq":
                        h = cgq_hessian(
                            x,
                            state,
                            cfg.masked_weight,
                            cfg.unmasked_weight,
                            use_mask_state=cfg.use_mask_state,
                            use_confidence=cfg.use_confidence,
                        ).h
                    else:
                        h = gram(x)
                    key = f"{prefix}.{field}"
                    hessians[key] = hessians[key] + h if key in hessians else h
        return hessians, tracker.ranges

    def search_alphas(
        self, calib: CalibrationSet, static_ranges: dict[str, tuple[float, float]]
    ) -> tuple[dict[int, float], dict[int, dict[float, float]]]:
        """Per-layer V scale multiplier minimizing the summed attention-weighted error."""
        cfg = self._config
        runtime = FakeQuant(
            act_bits=cfg.act_bits,
            act_granularity=cfg.act_granularity,
            static_ranges=static_ranges,
        )
        totals = {
            i: {alpha: 0.0 for alpha in cfg.alpha_grid}
            for i in range(self._weights.config.n_layers)
        }
        for _, trace in self._replay(calib):
            self._accumulate_alpha_losses(trace, runtime, totals)
        return {i: best_alpha(t) for i, t in totals.items()}, totals

    def _accumulate_alpha_losses(
        self, trace: LayerTrace, runtime: FakeQuant, totals: dict[int, dict[float, float]]
    ) -> None:
        for i, capture in enumerate(trace.layers):
            # per tensor, alpha scales the calibrated V range the runtime will use
            v_range = None
            if runtime.act_granularity == "per-tensor":
                v_range = runtime.static_ranges[f"layers.{i}.values"]
            for head in range(capture.softmax.shape[0]):
                p_deq = runtime.apply(capture.softmax[head], f"layers.{i}.softmax")
                result = iaaq_scale_search(
                    capture.values[head],
                    p_deq,
                    runtime.spec,
                    self._config.alpha_grid,
                    x_range=v_range,
                )
                for alpha, loss in result.losses.items():
                    totals[i][alpha] += loss

    def quantize_weights(
        self, hessians: dict[str, Matrix]
    ) -> tuple[dict[str, QuantizedTensor], dict[str, str]]:
        method = self._config.weight_method
        quantize = get_method(method)
        qtensors: dict[str, QuantizedTensor] = {}
        methods: dict[str, str] = {}
        named = self._weights.named_tensors()
        for i in range(self._weights.config.n_layers):
            for short in LINEAR_NAMES:
                name = f"layers.{i}.{short}"
                h = hessians.get(f"layers.{i}.{LINEAR_INPUTS[short]}")
                qtensors[name] = quantize(named[name], h, self._spec, self._config.damp)
                methods[name] = method
        return qtensors, methods

    def quantize(self, calib: CalibrationSet) -> QuantizedModel:
        """Run the whole pipeline.

        Raises:
            ValueError: If a calibrated method is enabled and ``calib`` is empty, or a
                replayed trace does not line up with the model.
        """
        cfg = self._config
        if cfg.needs_calibration and len(calib) == 0:
            raise ValueError(
                f"weight method {cfg.weight_method!r} with iaaq={cfg.iaaq}, "
                f"granularity {cfg.act_granularity!r} needs a non-empty calibration set"
            )
        rprint(
            f"[cyan]Quantizing W{cfg.weight_bits}A{cfg.act_bits} "
            f"with {cfg.weight_method} over {len(calib)} calibration states...[/cyan]"
        )
        hessians, ranges = self.collect(calib)
        qtensors, methods = self.quantize_weights(hessians)

        v_alphas: dict[int, float] = {}
        alpha_losses: dict[int, dict[float, float]] = {}
        if cfg.iaaq and not cfg.quantize_softmax_matmul:
            rprint("[yellow]⚠️  iaaq has no effect when the softmax matmul is not quantized[/yellow]")
        elif cfg.iaaq:
            v_alphas, alpha_losses = self.search_alphas(calib, ranges)
            rprint(f"[dim]  V scale multipliers: {v_alphas}[/dim]")

        dequantized = self._weights.replace_tensors(
            {name: dequantize(q) for name, q in qtensors.items()}
        )
        manifest = QuantManifest(
            fingerprint=cfg.fingerprint(),
            config=cfg,
            calib_samples=len(calib),
            layer_methods=methods,
            v_alphas=v_alphas,
            alpha_losses=alpha_losses,
            static_ranges=ranges,
        )
        rprint(f"[green]✓[/green] Quantized {len(qtensors)} linear layers")
        return QuantizedModel(weights=dequantized, qtensors=qtensors, manifest=manifest)


def quantize_model(
    weights: ModelWeights, calib: CalibrationSet, config: QuantConfig
) -> QuantizedModel:
    return ModelQuantizer(weights, config).quantize(calib)


QMODEL_MAGIC = b"DLQX"


def save_quantized(path: str | Path, model: QuantizedModel) -> None:
    """Checkpoint of the dequantized weights, then ``DLQX``, the named DLQQ records and
    the manifest as length-prefixed JSON."""
    with open(path, "wb") as f:
        write_weights(f, model.weights)
        f.write(QMODEL_MAGIC)
        f.write(struct.pack("<I", len(model.qtensors)))
        for name, q in model.qtensors.items():
            write_name(f, name)
            write_qtensor(f, q)
        raw = model.manifest.model_dump_json().encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)


def load_quantized(path: str | Path) -> QuantizedModel:
    with open(path, "rb") as f:
        weights = read_weights(f)
        magic = read_exact(f, 4)
        if magic != QMODEL_MAGIC:
            raise ValueError(f"not a quantized model (magic {magic!r})")
        (count,) = struct.unpack("<I", read_exact(f, 4))
        qtensors = {}
        for _ in range(count):
            name = read_name(f)
            qtensors[name] = read_qtensor(f)
        (length,) = struct.unpack("<I", read_exact(f, 4))
        try:
            manifest = QuantManifest.model_validate(json.loads(read_exact(f, length)))
        except json.JSONDecodeError as e:
            raise ValueError(f"corrupt manifest in {path}: {e}") from e
    return QuantizedModel(weights=weights, qtensors=qtensors, manifest=manifest)
