"""Calibration sampling over decode states.

The temporal-mask adaptive sampler walks the decode of every prompt and keeps a state
only while the counter of its (block, ratio-bin) cell is below that bin's target.
Targets come from ``n = budget // blocks`` samples per block split by ``p_weights``;
fractional targets compared with strict ``<`` give an effective cap of
``ceil(target)`` per cell, and acceptance also stops once ``budget`` samples are held.

The ratio used for binning is the *unmasked* fraction of the response region.
"""

import math
import struct
from collections.abc import Iterable, Iterator, Sequence
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch
from rich import print as rprint

from dllm_quant.config import QuantConfig
from dllm_quant.model.decoding import iter_decode
from dllm_quant.model.transformer import ModelWeights
from dllm_quant.models import CalibrationSample, CalibrationSet, DecodeState
from dllm_quant.numerics import Rng, read_exact

CALIB_MAGIC = b"DLQC"
NUM_BINS = 4
DEFAULT_P_WEIGHTS = (0.3, 0.2, 0.2, 0.3)

type StateStream = Iterable[tuple[torch.Tensor, DecodeState]]


def classify_mask_ratio(r: float) -> int:
    """Bin index ``(r >= 0.2) + (r >= 0.5) + (r >= 0.8)``."""
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {r}")
    return int(r >= 0.2) + int(r >= 0.5) + int(r >= 0.8)


def bin_targets(budget: int, blocks: int, p_weights: Sequence[float]) -> list[float]:
    if len(p_weights) != NUM_BINS:
        raise ValueError(f"p_weights needs {NUM_BINS} entries, got {len(p_weights)}")
    n = budget // blocks
    # strip float noise such as 10 * 0.3 == 3.0000000000000004
    return [round(n * w, 9) for w in p_weights]


def _empty_counters(blocks: int) -> list[list[int]]:
    return [[0] * NUM_BINS for _ in range(blocks)]


def _make_sample(prompt: torch.Tensor, state: DecodeState, block: int) -> CalibrationSample:
    r = state.unmask_ratio
    return CalibrationSample(
        prompt=prompt.clone(),
        step=state.step,
        block=block,
        unmask_ratio=r,
        bin=classify_mask_ratio(r),
        state=state,
    )


def tmas_select(
    stream: StateStream,
    steps: int,
    blocks: int,
    budget: int = 512,
    p_weights: Sequence[float] = DEFAULT_P_WEIGHTS,
) -> CalibrationSet:
    """Acceptance loop over an ordered ``(prompt, state)`` stream.

    Consumption stops as soon as no cell can accept more, so a lazy stream performs no
    further work after saturation.
    """
    if blocks < 1 or steps < blocks:
        raise ValueError(f"need blocks >= 1 and steps >= blocks, got T={steps}, B={blocks}")
    per_block = steps // blocks
    targets = bin_targets(budget, blocks, p_weights)
    caps = [math.ceil(p) for p in targets]
    counters = _empty_counters(blocks)
    samples: list[CalibrationSample] = []

    def saturated() -> bool:
        return len(samples) >= budget or all(
            counters[b][m] >= caps[m] for b in range(blocks) for m in range(NUM_BINS)
        )

    if saturated():
        return CalibrationSet(samples=samples, counters=counters, targets=targets)
    for prompt, state in stream:
        block = min(state.step // per_block, blocks - 1)
        sample = _make_sample(prompt, state, block)
        if counters[block][sample.bin] < targets[sample.bin]:
            samples.append(sample)
            counters[block][sample.bin] += 1
            if saturated():
                break
    return CalibrationSet(samples=samples, counters=counters, targets=targets)


def decode_stream(
    model: ModelWeights,
    prompts: Iterable[torch.Tensor],
    steps: int,
    blocks: int,
    gen_len: int,
) -> Iterator[tuple[torch.Tensor, DecodeState]]:
    """Lazily decode each prompt with the full-precision model, yielding every state."""
    for prompt in prompts:
        for record in iter_decode(model, prompt, gen_len, steps, blocks):
            yield prompt, record.state


def tmas_sample(
    model: ModelWeights,
    inputs: Iterable[torch.Tensor],
    steps: int,
    blocks: int,
    budget: int = 512,
    p_weights: Sequence[float] = DEFAULT_P_WEIGHTS,
    gen_len: int = 32,
) -> CalibrationSet:
    """Build a calibration set stratified by decode block and unmask-ratio bin."""
    calib = tmas_select(
        decode_stream(model, inputs, steps, blocks, gen_len), steps, blocks, budget, p_weights
    )
    rprint(
        f"[green]✓[/green] TMAS kept {len(calib)} states "
        f"[dim](targets {[round(p, 2) for p in calib.targets]})[/dim]"
    )
    return calib


def _counted(
    picked: list[tuple[torch.Tensor, DecodeState]], steps: int, blocks: int, targets: list[float]
) -> CalibrationSet:
    per_block = steps // blocks
    counters = _empty_counters(blocks)
    samples = []
    for prompt, state in picked:
        sample = _make_sample(prompt, state, min(state.step // per_block, blocks - 1))
        counters[sample.block][sample.bin] += 1
        samples.append(sample)
    return CalibrationSet(samples=samples, counters=counters, targets=targets)


def random_sample(
    model: ModelWeights,
    inputs: Iterable[torch.Tensor],
    steps: int,
    blocks: int,
    rng: Rng,
    budget: int = 512,
    gen_len: int = 32,
) -> CalibrationSet:
    """Uniformly random decode states up to ``budget``, kept in stream order."""
    pool = list(decode_stream(model, inputs, steps, blocks, gen_len))
    chosen = sorted(rng.choice(len(pool), min(budget, len(pool)))) if pool else []
    targets = bin_targets(budget, blocks, DEFAULT_P_WEIGHTS)
    return _counted([pool[i] for i in chosen], steps, blocks, targets)


def uniform_sample(
    model: ModelWeights,
    inputs: Iterable[torch.Tensor],
    steps: int,
    blocks: int,
    budget: int = 512,
    gen_len: int = 32,
) -> CalibrationSet:
    """Evenly spaced decode states across the whole stream."""
    pool = list(decode_stream(model, inputs, steps, blocks, gen_len))
    k = min(budget, len(pool))
    chosen = [i * len(pool) // k for i in range(k)] if k else []
    targets = bin_targets(budget, blocks, DEFAULT_P_WEIGHTS)
    return _counted([pool[i] for i in chosen], steps, blocks, targets)


def build_calibration(
    model: ModelWeights, prompts: Sequence[torch.Tensor], config: QuantConfig, rng: Rng
) -> CalibrationSet:
    """Dispatch on ``config.sampler``."""
    match config.sampler:
        case "tmas":
            return tmas_sample(
                model, prompts, config.steps, config.blocks, config.calib_budget,
                config.p_weights, config.gen_len,
            )
        case "random":
            return random_sample(
                model, prompts, config.steps, config.blocks, rng, config.calib_budget,
                config.gen_len,
            )
        case "uniform":
            return uniform_sample(
                model, prompts, config.steps, config.blocks, config.calib_budget,
                config.gen_len,
            )
        case other:
            raise ValueError(f"unknown sampler {other!r}")


def _write_ids(f: BinaryIO, ids: torch.Tensor) -> None:
    f.write(struct.pack("<I", ids.numel()))
    f.write(ids.numpy().astype("<i4").tobytes())


def _read_ids(f: BinaryIO) -> torch.Tensor:
    (n,) = struct.unpack("<I", read_exact(f, 4))
    data = np.frombuffer(read_exact(f, 4 * n), dtype="<i4")
    return torch.from_numpy(data.astype(np.int64))


def write_calibration(f: BinaryIO, calib: CalibrationSet) -> None:
    """``DLQC | u32 blocks | u32 samples | f64 targets[4] | i32 counters[B*4]`` then
    one record per sample: prompt ids, ``u32 step block bin``, ``f64 ratio`` and the
    decode state (``u32 prompt_len step block``, ids, ``u8`` mask, ``f64`` confidence).
    """
    f.write(CALIB_MAGIC)
    f.write(struct.pack("<II", calib.num_blocks, len(calib.samples)))
    f.write(np.asarray(calib.targets, dtype="<f8").tobytes())
    f.write(np.asarray(calib.counters, dtype="<i4").reshape(-1).tobytes())
    for s in calib.samples:
        _write_ids(f, s.prompt)
        f.write(struct.pack("<IIId", s.step, s.block, s.bin, s.unmask_ratio))
        st = s.state
        f.write(struct.pack("<III", st.prompt_len, st.step, st.block))
        _write_ids(f, st.tokens)
        f.write(st.masked.numpy().astype("u1").tobytes())
        f.write(st.confidence.numpy().astype("<f8").tobytes())


def read_calibration(f: BinaryIO) -> CalibrationSet:
    magic = read_exact(f, 4)
    if magic != CALIB_MAGIC:
        raise ValueError(f"not a calibration file (magic {magic!r})")
    blocks, count = struct.unpack("<II", read_exact(f, 8))
    targets = np.frombuffer(read_exact(f, 8 * NUM_BINS), dtype="<f8").tolist()
    flat = np.frombuffer(read_exact(f, 4 * NUM_BINS * blocks), dtype="<i4")
    counters = flat.reshape(blocks, NUM_BINS).tolist()
    samples = []
    for _ in range(count):
        prompt = _read_ids(f)
        step, block, bin_, ratio = struct.unpack("<IIId", read_exact(f, 20))
        prompt_len, st_step, st_block = struct.unpack("<III", read_exact(f, 12))
        tokens = _read_ids(f)
        n = tokens.numel()
        masked = np.frombuffer(read_exact(f, n), dtype="u1").astype(bool)
        confidence = np.frombuffer(read_exact(f, 8 * n), dtype="<f8").copy()
        state = DecodeState(
            tokens=tokens,
            masked=torch.from_numpy(masked),
            confidence=torch.from_numpy(confidence),
            step=st_step,
            block=st_block,
            prompt_len=prompt_len,
        )
        samples.append(
            CalibrationSample(
                prompt=prompt, step=step, block=block, unmask_ratio=ratio, bin=bin_,
                state=state,
            )
        )
    return CalibrationSet(samples=samples, counters=counters, targets=targets)


def save_calibration(calib: CalibrationSet, path: str | Path) -> None:
    with open(path, "wb") as f:
        write_calibration(f, calib)


def load_calibration(path: str | Path) -> CalibrationSet:
    with open(path, "rb") as f:
        return read_calibration(f)
