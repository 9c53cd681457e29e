"""Experiment runner: error accumulation, activation ranges, ablations and reports."""

import asyncio
import csv
import functools
import itertools
import json
from collections.abc import Sequence
from pathlib import Path
from typing import Literal

import torch
from pydantic import BaseModel, Field
from rich import print as rprint

from dllm_quant import __version__
from dllm_quant._pipeline import quantize_model
from dllm_quant.config import QuantConfig
from dllm_quant.model.decoding import decode, iter_decode
from dllm_quant.model.transformer import FakeQuant, ModelWeights, forward
from dllm_quant.models import CalibrationSet
from dllm_quant.numerics import Matrix, Rng
from dllm_quant.tmas import build_calibration

type ErrorMode = Literal["teacher-forced", "free-running"]
type ReportFormat = Literal["csv", "json"]
type StatRegion = Literal["response", "all"]


class StepErrorRow(BaseModel):
    seed: int
    mode: str
    step: int
    block: int
    mse: float = Field(ge=0.0)
    cumulative: float = Field(ge=0.0)


class StepErrorReport(BaseModel):
    """Per-step logits MSE between a full-precision and a quantized model."""

    mode: ErrorMode
    fingerprint: str = ""
    seed: int = 0
    per_step: list[float] = Field(default_factory=list)
    cumulative: list[float] = Field(default_factory=list)
    blocks: list[int] = Field(default_factory=list)

    @property
    def mean_mse(self) -> float:
        return sum(self.per_step) / len(self.per_step) if self.per_step else 0.0

    def rows(self) -> list[StepErrorRow]:
        return [
            StepErrorRow(
                seed=self.seed, mode=self.mode, step=t, block=b, mse=m, cumulative=c
            )
            for t, (b, m, c) in enumerate(zip(self.blocks, self.per_step, self.cumulative))
        ]


class RangeStatRow(BaseModel):
    step: int
    block: int
    layer: int
    tensor: Literal["output", "v"]
    min: float
    max: float
    mean: float
    std: float


class AblationRow(BaseModel):
    seed: int
    cell: str
    tmas: bool
    cgq: bool
    iaaq: bool
    use_mask_state: bool
    use_confidence: bool
    weight_method: str
    sampler: str
    calib_samples: int
    mean_step_mse: float
    final_agreement: float
    fingerprint: str


def _response_mse(a: Matrix, b: Matrix, prompt_len: int) -> float:
    diff = a[prompt_len:] - b[prompt_len:]
    return float((diff * diff).mean()) if diff.numel() else 0.0


def _teacher_forced(
    fp: ModelWeights, q: ModelWeights, quant: FakeQuant | None, prompt, steps, blocks, gen_len
) -> list[tuple[int, int, float]]:
    out = []
    for record in iter_decode(fp, prompt, gen_len, steps, blocks):
        with torch.no_grad():
            q_logits, _ = forward(q, record.state.tokens, quant=quant)
        state = record.state
        out.append((state.step, state.block, _response_mse(record.logits, q_logits, state.prompt_len)))
    return out


def _free_running(
    fp: ModelWeights, q: ModelWeights, quant: FakeQuant | None, prompt, steps, blocks, gen_len
) -> list[tuple[int, int, float]]:
    fp_records = list(iter_decode(fp, prompt, gen_len, steps, blocks))
    q_records = list(iter_decode(q, prompt, gen_len, steps, blocks, quant=quant))
    if len(fp_records) != len(q_records):
        raise ValueError(
            f"trace misalignment: {len(fp_records)} fp steps vs {len(q_records)} quantized"
        )
    out = []
    for a, b in zip(fp_records, q_records):
        if (a.state.step, a.state.block) != (b.state.step, b.state.block):
            raise ValueError(
                f"trace misalignment at step {a.state.step}/{b.state.step}"
            )
        out.append((a.state.step, a.state.block, _response_mse(a.logits, b.logits, a.state.prompt_len)))
    return out


def measure_step_error(
    fp_weights: ModelWeights,
    q_weights: ModelWeights,
    prompts: Sequence[torch.Tensor],
    steps: int,
    blocks: int,
    mode: ErrorMode = "teacher-forced",
    *,
    quant: FakeQuant | None = None,
    gen_len: int = 32,
    fingerprint: str = "",
    seed: int = 0,
) -> StepErrorReport:
    """Logits MSE per decode step, averaged over response positions and prompts.

    ``teacher-forced`` feeds the full-precision decode states to both models, isolating
    the error each step adds; ``free-running`` lets the quantized model decode on its
    own so earlier mistakes propagate.

    Raises:
        ValueError: If the models do not share a config or the step traces disagree.
    """
    if fp_weights.config != q_weights.config:
        raise ValueError("full-precision and quantized models must share a config")
    run = _teacher_forced if mode == "teacher-forced" else _free_running
    totals: list[float] = []
    block_of: list[int] = []
    for prompt in prompts:
        series = run(fp_weights, q_weights, quant, prompt, steps, blocks, gen_len)
        if not totals:
            totals = [0.0] * len(series)
            block_of = [b for _, b, _ in series]
        elif len(series) != len(totals):
            raise ValueError(
                f"trace misalignment: {len(series)} steps vs {len(totals)} for earlier prompts"
            )
        for t, (_, _, mse) in enumerate(series):
            totals[t] += mse
    per_step = [s / len(prompts) for s in totals] if prompts else []
    return StepErrorReport(
        mode=mode,
        fingerprint=fingerprint,
        seed=seed,
        per_step=per_step,
        cumulative=list(itertools.accumulate(per_step)),
        blocks=block_of,
    )


def activation_range_stats(
    weights: ModelWeights,
    prompts: Sequence[torch.Tensor],
    steps: int,
    blocks: int,
    gen_len: int = 32,
    region: StatRegion = "response",
) -> list[RangeStatRow]:
    """Per-step, per-layer (min, max, mean, std) of layer outputs, pooled over prompts.

    Rows tagged ``v`` describe the value matrix of the same layer. ``region`` picks the
    positions pooled: ``response`` (the tokens being decoded) or ``all``.
    """
    pooled: dict[tuple[int, int, int, str], list[torch.Tensor]] = {}
    for prompt in prompts:
        for record in iter_decode(weights, prompt, gen_len, steps, blocks, capture=True):
            assert record.trace is not None
            state = record.state
            start = state.prompt_len if region == "response" else 0
            for i, capture in enumerate(record.trace.layers):
                pooled.setdefault((state.step, state.block, i, "output"), []).append(
                    capture.output[start:].reshape(-1)
                )
                pooled.setdefault((state.step, state.block, i, "v"), []).append(
                    capture.values[:, start:].reshape(-1)
                )
    rows = []
    for (step, block, layer, tensor), parts in sorted(pooled.items()):
        x = torch.cat(parts)
        rows.append(
            RangeStatRow(
                step=step,
                block=block,
                layer=layer,
                tensor=tensor,  # type: ignore[arg-type]
                min=float(x.min()),
                max=float(x.max()),
                mean=float(x.mean()),
                std=float(x.std(correction=0)),
            )
        )
    return rows


def final_token_agreement(
    fp_weights: ModelWeights,
    q_weights: ModelWeights,
    prompts: Sequence[torch.Tensor],
    steps: int,
    blocks: int,
    *,
    quant: FakeQuant | None = None,
    gen_len: int = 32,
) -> float:
    """Fraction of response tokens on which free-running decodes of both models agree."""
    if not prompts:
        return 1.0
    total = 0.0
    for prompt in prompts:
        fp_tokens, _ = decode(fp_weights, prompt, gen_len, steps, blocks)
        q_tokens, _ = decode(q_weights, prompt, gen_len, steps, blocks, quant=quant)
        n = prompt.numel()
        total += float((fp_tokens[n:] == q_tokens[n:]).to(torch.float64).mean())
    return total / len(prompts)


# the two trailing cells split CGQ into its factors
ABLATION_CELLS: list[tuple[str, dict[str, bool]]] = [
    (
        f"tmas={int(tmas)} cgq={int(cgq)} iaaq={int(iaaq)}",
        {"tmas": tmas, "cgq": cgq, "iaaq": iaaq},
    )
    for tmas, cgq, iaaq in itertools.product((False, True), repeat=3)
] + [
    ("cgq-mask-only", {"tmas": True, "cgq": True, "iaaq": True, "use_confidence": False}),
    ("cgq-score-only", {"tmas": True, "cgq": True, "iaaq": True, "use_mask_state": False}),
]


def cell_config(base: QuantConfig, toggles: dict[str, bool]) -> QuantConfig:
    data = base.model_dump()
    data.update(
        tmas=toggles["tmas"],
        sampler="tmas" if toggles["tmas"] else "random",
        weight_method="cgq" if toggles["cgq"] else "rtn",
        iaaq=toggles["iaaq"],
        use_mask_state=toggles.get("use_mask_state", True),
        use_confidence=toggles.get("use_confidence", True),
    )
    return QuantConfig.model_validate(data)


def split_prompts(
    prompts: Sequence[torch.Tensor], seed: int, n_calib: int, n_eval: int
) -> tuple[list[torch.Tensor], list[torch.Tensor]]:
    """Disjoint seeded calibration and evaluation prompt sets."""
    if n_calib + n_eval > len(prompts):
        raise ValueError(
            f"need {n_calib + n_eval} prompts for the split, have {len(prompts)}"
        )
    order = Rng(seed).choice(len(prompts), n_calib + n_eval)
    return [prompts[i] for i in order[:n_calib]], [prompts[i] for i in order[n_calib:]]


def _run_cell(
    fp_weights: ModelWeights,
    calib: CalibrationSet,
    eval_prompts: Sequence[torch.Tensor],
    config: QuantConfig,
    seed: int,
    name: str,
) -> AblationRow:
    qmodel = quantize_model(fp_weights, calib, config)
    quant = qmodel.quant
    report = measure_step_error(
        fp_weights,
        qmodel.weights,
        eval_prompts,
        config.steps,
        config.blocks,
        quant=quant,
        gen_len=config.gen_len,
        fingerprint=config.fingerprint(),
        seed=seed,
    )
    agreement = final_token_agreement(
        fp_weights,
        qmodel.weights,
        eval_prompts,
        config.steps,
        config.blocks,
        quant=quant,
        gen_len=config.gen_len,
    )
    return AblationRow(
        seed=seed,
        cell=name,
        tmas=config.tmas,
        cgq=config.weight_method == "cgq",
        iaaq=config.iaaq,
        use_mask_state=config.use_mask_state,
        use_confidence=config.use_confidence,
        weight_method=config.weight_method,
        sampler=str(config.sampler),
        calib_samples=len(calib),
        mean_step_mse=report.mean_mse,
        final_agreement=agreement,
        fingerprint=config.fingerprint(),
    )


async def run_ablation_async(
    fp_weights: ModelWeights,
    prompts: Sequence[torch.Tensor],
    base_config: QuantConfig,
    *,
    n_calib: int = 8,
    n_eval: int = 4,
) -> list[AblationRow]:
    """Run every ablation cell for every seed in ``base_config.seeds``.

    Cells run concurrently on the default executor; the returned rows are ordered by
    seed, then by cell position in ``ABLATION_CELLS``.
    """
    loop = asyncio.get_running_loop()
    tasks = []
    for seed in base_config.seeds:
        calib_prompts, eval_prompts = split_prompts(prompts, seed, n_calib, n_eval)
        calib_sets: dict[bool, CalibrationSet] = {}
        for name, toggles in ABLATION_CELLS:
            config = cell_config(base_config, toggles)
            if config.tmas not in calib_sets:
                calib_sets[config.tmas] = build_calibration(
                    fp_weights, calib_prompts, config, Rng(seed).spawn(7)
                )
            tasks.append(
                loop.run_in_executor(
                    None,
                    functools.partial(
                        _run_cell,
                        fp_weights,
                        calib_sets[config.tmas],
                        eval_prompts,
                        config,
                        seed,
                        name,
                    ),
                )
            )
    rprint(f"[cyan]Running {len(tasks)} ablation cells...[/cyan]")
    rows = await asyncio.gather(*tasks)
    order = {name: i for i, (name, _) in enumerate(ABLATION_CELLS)}
    return sorted(rows, key=lambda r: (base_config.seeds.index(r.seed), order[r.cell]))


def run_ablation(
    fp_weights: ModelWeights,
    prompts: Sequence[torch.Tensor],
    base_config: QuantConfig,
    *,
    n_calib: int = 8,
    n_eval: int = 4,
) -> list[AblationRow]:
    return asyncio.run(
        run_ablation_async(fp_weights, prompts, base_config, n_calib=n_calib, n_eval=n_eval)
    )


class ReportEnvelope(BaseModel):
    """JSON report: provenance plus the rows of one result table."""

    version: str = __version__
    kind: str
    # decode-dependent numbers assume the linear unmask schedule of `unmask_count`
    schedule: str = "linear"
    fingerprint: str = ""
    seeds: list[int] = Field(default_factory=list)
    columns: list[str]
    rows: list[dict]


def emit_report(
    results: Sequence[BaseModel],
    fmt: ReportFormat,
    path: str | Path,
    *,
    row_type: type[BaseModel],
    config: QuantConfig | None = None,
) -> Path:
    """Write ``results`` as CSV or JSON.

    CSV columns follow the field order of ``row_type``; an empty result set gives a
    header-only file.
    """
    path = Path(path)
    columns = list(row_type.model_fields)
    if fmt == "csv":
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=columns)
            writer.writeheader()
            for row in results:
                writer.writerow(row.model_dump())
    elif fmt == "json":
        envelope = ReportEnvelope(
            kind=row_type.__name__,
            fingerprint=config.fingerprint() if config else "",
            seeds=list(config.seeds) if config else [],
            columns=columns,
            rows=[row.model_dump(mode="json") for row in results],
        )
        path.write_text(envelope.model_dump_json(indent=2), encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def load_report[T: BaseModel](path: str | Path, row_type: type[T]) -> tuple[ReportEnvelope, list[T]]:
    """Parse a JSON report back into rows of ``row_type``."""
    try:
        envelope = ReportEnvelope.model_validate(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid report file {path}: {e}") from e
    return envelope, [row_type.model_validate(row) for row in envelope.rows]
