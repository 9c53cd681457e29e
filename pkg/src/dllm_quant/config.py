import hashlib
import json
import os
import tomllib
from pathlib import Path
from typing import Literal

import torch
from dotenv import load_dotenv
from pydantic import BaseModel, Field, model_validator

type WeightMethod = Literal["rtn", "gptq", "cgq"]
type Sampler = Literal["tmas", "random", "uniform"]


class AppConfig(BaseModel):
    seeds: list[int] | None = Field(
        default=None, description="Seed list override (DLLMQ_SEED, comma-separated)."
    )
    output_dir: Path = Field(
        default=Path("runs"), description="Default directory for reports and manifests."
    )
    threads: int = Field(
        default=1, ge=1, description="torch intra-op threads; 1 keeps runs bitwise stable."
    )


_config: AppConfig | None = None


def _parse_seeds(raw: str | None) -> list[int] | None:
    if not raw:
        return None
    try:
        return [int(part) for part in raw.replace(" ", "").split(",") if part]
    except ValueError as e:
        raise ValueError(f"DLLMQ_SEED must be comma-separated integers, got {raw!r}") from e


def get_config() -> AppConfig:
    """Read the environment once and pin torch to the configured thread count.

    BLAS reductions are only reproducible for a fixed number of threads.
    """
    global _config
    if _config is None:
        load_dotenv()
        _config = AppConfig(
            seeds=_parse_seeds(os.getenv("DLLMQ_SEED")),
            output_dir=Path(os.getenv("DLLMQ_OUTPUT_DIR", "runs")),
            threads=int(os.getenv("DLLMQ_THREADS", "1")),
        )
        torch.set_num_threads(_config.threads)
    return _config


def reset_config() -> None:
    """Drop the cached AppConfig so the environment is read again."""
    global _config
    _config = None


class ModelConfig(BaseModel):
    """Shape of the masked-diffusion transformer. The MASK id is ``vocab_size - 1``."""

    vocab_size: int = Field(default=256, ge=3)
    seq_len: int = Field(default=64, gt=0)
    d_model: int = Field(default=64, gt=0)
    n_layers: int = Field(default=4, gt=0)
    n_heads: int = Field(default=4, gt=0)
    d_ff: int = Field(default=256, gt=0)
    use_position: bool = Field(
        default=True, description="Learned absolute position embeddings."
    )

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "ModelConfig":
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        return self

    @property
    def mask_id(self) -> int:
        return self.vocab_size - 1

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


class QuantConfig(BaseModel):
    """Every knob of a quantization experiment."""

    weight_bits: int = Field(default=4, ge=2, le=8)
    act_bits: int = Field(default=4, ge=2, le=8)
    weight_method: WeightMethod = "rtn"
    act_method: Literal["static-minmax"] = "static-minmax"
    act_granularity: Literal["per-token", "per-tensor"] = "per-token"
    iaaq: bool = False
    tmas: bool = True
    sampler: Sampler | None = Field(
        default=None, description="Calibration sampler; derived from `tmas` when unset."
    )
    quantize_softmax_matmul: bool = True
    alpha_grid: list[float] = Field(default_factory=lambda: [1.0, 0.8], min_length=1)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    damp: float = Field(default=0.01, ge=0.0)
    masked_weight: float = Field(default=1.0, ge=0.0)
    unmasked_weight: float = Field(default=0.7, ge=0.0)
    use_mask_state: bool = True
    use_confidence: bool = True
    calib_budget: int = Field(default=512, gt=0)
    p_weights: list[float] = Field(
        default_factory=lambda: [0.3, 0.2, 0.2, 0.3], min_length=4, max_length=4
    )
    steps: int = Field(default=16, gt=0)
    blocks: int = Field(default=4, gt=0)
    gen_len: int = Field(default=32, gt=0)

    @model_validator(mode="after")
    def _resolve_sampler(self) -> "QuantConfig":
        if self.sampler is None:
            self.sampler = "tmas" if self.tmas else "random"
        if any(a <= 0 for a in self.alpha_grid):
            raise ValueError("alpha_grid entries must be positive")
        return self

    @property
    def needs_calibration(self) -> bool:
        return (
            self.weight_method in ("gptq", "cgq")
            or self.iaaq
            or self.act_granularity == "per-tensor"
        )

    def fingerprint(self) -> str:
        """SHA-256 of the canonical JSON form; changes iff any field changes."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(canonical.encode()).hexdigest()


def load_quant_config(path: str | Path) -> QuantConfig:
    """Read a QuantConfig from TOML or JSON; ``DLLMQ_SEED`` overrides ``seeds``."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        data = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"Invalid config file {path}: {e}") from e
    config = QuantConfig.model_validate(data)
    return apply_env_overrides(config)


def apply_env_overrides(config: QuantConfig) -> QuantConfig:
    seeds = get_config().seeds
    if seeds:
        return config.model_copy(update={"seeds": seeds})
    return config
