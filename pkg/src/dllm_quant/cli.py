"""Command-line interface for dllm-quant experiments."""

import json
import sys
from collections.abc import Sequence
from pathlib import Path

import click
import shortuuid
import torch
from pydantic import BaseModel
from rich import print as rprint
from rich.console import Console
from rich.table import Table

from dllm_quant import __version__
from dllm_quant._pipeline import load_quantized, quantize_model, save_quantized
from dllm_quant.config import (
    ModelConfig,
    QuantConfig,
    apply_env_overrides,
    get_config,
    load_quant_config,
)
from dllm_quant.harness import (
    AblationRow,
    RangeStatRow,
    StepErrorReport,
    StepErrorRow,
    activation_range_stats,
    emit_report,
    load_report,
    measure_step_error,
    run_ablation,
)
from dllm_quant.model import (
    load_checkpoint,
    prompts_from,
    read_corpus,
    save_checkpoint,
    synthetic_corpus,
    train_toy,
    write_corpus,
)
from dllm_quant.models import CalibrationSet
from dllm_quant.numerics import Rng
from dllm_quant.tmas import build_calibration, load_calibration, save_calibration

console = Console()

ROW_TYPES: dict[str, type[BaseModel]] = {
    "StepErrorRow": StepErrorRow,
    "RangeStatRow": RangeStatRow,
    "AblationRow": AblationRow,
}


def print_banner():
    """Print welcome banner."""
    banner = f"""
    ╔═══════════════════════════════════════════════════════╗
    ║                                                       ║
    ║        ◆  dllm-quant {__version__:<8} ◆                        ║
    ║                                                       ║
    ║   Post-training quantization for diffusion LMs        ║
    ║                                                       ║
    ╚═══════════════════════════════════════════════════════╝
    """
    console.print(banner, style="bold cyan")


def fail(e: Exception) -> None:
    rprint(f"\n[bold red]Error:[/bold red] {str(e)}")
    sys.exit(1)


def write_run_manifest(
    out: str | Path, command: str, params: dict, config: QuantConfig | None = None
) -> Path:
    """``<out>.manifest.json`` with everything needed to re-run the command."""
    path = Path(f"{out}.manifest.json")
    manifest = {
        "run_id": shortuuid.uuid(),
        "version": __version__,
        "command": command,
        "params": {k: str(v) if isinstance(v, Path) else v for k, v in params.items()},
        "fingerprint": config.fingerprint() if config else None,
        "seeds": list(config.seeds) if config else None,
        "config": config.model_dump(mode="json") if config else None,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def resolve_out(out: str) -> str:
    """Bare file names land in the configured output directory."""
    path = Path(out)
    if path.is_absolute() or path.parent != Path("."):
        return out
    out_dir = get_config().output_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    return str(out_dir / path)


def resolve_config(path: str | None) -> QuantConfig:
    if path:
        return load_quant_config(path)
    return apply_env_overrides(QuantConfig())


def load_prompts(path: str, prompt_len: int) -> list[torch.Tensor]:
    prompts = prompts_from(read_corpus(path), prompt_len)
    if not prompts:
        raise ValueError(f"no sequences found in {path}")
    return prompts


def print_step_errors(report: StepErrorReport) -> None:
    table = Table(
        title=f"Step Error ({report.mode})", show_header=True, header_style="bold cyan"
    )
    table.add_column("Step", style="yellow", justify="right")
    table.add_column("Block", style="dim", justify="right")
    table.add_column("MSE", style="green", justify="right")
    table.add_column("Cumulative", style="magenta", justify="right")
    for row in report.rows():
        table.add_row(str(row.step), str(row.block), f"{row.mse:.6g}", f"{row.cumulative:.6g}")
    console.print(table)


def print_ablation(rows: Sequence[AblationRow]) -> None:
    table = Table(title="Ablation Summary", show_header=True, header_style="bold cyan")
    table.add_column("Seed", style="dim", justify="right")
    table.add_column("Cell", style="yellow")
    table.add_column("Calib", style="dim", justify="right")
    table.add_column("Mean MSE", style="green", justify="right")
    table.add_column("Agreement", style="magenta", justify="right")
    for row in rows:
        table.add_row(
            str(row.seed),
            row.cell,
            str(row.calib_samples),
            f"{row.mean_step_mse:.6g}",
            f"{row.final_agreement:.3f}",
        )
    console.print(table)


def print_rows(title: str, columns: list[str], rows: list[dict]) -> None:
    table = Table(title=title, show_header=True, header_style="bold cyan")
    for column in columns:
        table.add_column(column)
    for row in rows:
        table.add_row(*(str(row.get(c, "")) for c in columns))
    console.print(table)


@click.group()
@click.version_option(__version__, prog_name="dllmq")
def main():
    """dllm-quant - post-training quantization toolkit for masked diffusion LMs.

    Train a toy model, sample calibration states, quantize, and measure how
    quantization error builds up over decode steps.
    """
    get_config()


@main.command()
@click.option("--out", "-o", required=True, type=click.Path(), help="Checkpoint to write")
@click.option("--corpus", type=click.Path(exists=True), help="Corpus file (one sequence per line)")
@click.option("--synthetic", type=int, help="Generate N synthetic bigram sequences instead")
@click.option("--save-corpus", type=click.Path(), help="Also write the synthetic corpus here")
@click.option("--epochs", default=20, show_default=True, help="Passes over the corpus")
@click.option("--lr", default=0.05, show_default=True, help="SGD learning rate")
@click.option("--batch-size", default=8, show_default=True)
@click.option("--seed", type=int, help="Seed (defaults to the first DLLMQ_SEED entry, else 0)")
@click.option("--vocab-size", default=256, show_default=True)
@click.option("--seq-len", default=64, show_default=True)
@click.option("--d-model", default=64, show_default=True)
@click.option("--n-layers", default=4, show_default=True)
@click.option("--n-heads", default=4, show_default=True)
@click.option("--d-ff", default=256, show_default=True)
@click.option("--no-position", is_flag=True, help="Drop learned position embeddings")
def train(
    out: str,
    corpus: str | None,
    synthetic: int | None,
    save_corpus: str | None,
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int | None,
    vocab_size: int,
    seq_len: int,
    d_model: int,
    n_layers: int,
    n_heads: int,
    d_ff: int,
    no_position: bool,
):
    """Train a toy masked-diffusion model on the masked-token objective.

    Examples:

        $ dllmq train --synthetic 256 -o toy.dlqw

        $ dllmq train --corpus data.txt --d-model 32 --n-layers 2 -o small.dlqw
    """
    print_banner()
    try:
        out = resolve_out(out)
        if (corpus is None) == (synthetic is None):
            raise ValueError("give exactly one of --corpus and --synthetic")
        seeds = get_config().seeds
        seed = seed if seed is not None else (seeds[0] if seeds else 0)
        config = ModelConfig(
            vocab_size=vocab_size,
            seq_len=seq_len,
            d_model=d_model,
            n_layers=n_layers,
            n_heads=n_heads,
            d_ff=d_ff,
            use_position=not no_position,
        )
        rng = Rng(seed)
        if synthetic is not None:
            sequences = synthetic_corpus(rng.spawn(2), synthetic, seq_len, vocab_size)
            if save_corpus:
                write_corpus(save_corpus, sequences)
        else:
            sequences = read_corpus(corpus)  # type: ignore[arg-type]
        rprint(f"[cyan]Training on {len(sequences)} sequences for {epochs} epochs...[/cyan]")
        weights = train_toy(config, sequences, epochs, lr, rng, batch_size=batch_size)
        save_checkpoint(out, weights)
        write_run_manifest(out, "train", click.get_current_context().params)
        rprint(f"\n[bold green]✓ Checkpoint written:[/bold green] [cyan]{out}[/cyan]")
    except Exception as e:
        fail(e)


@main.command()
@click.option("--model", "-m", required=True, type=click.Path(exists=True), help="fp checkpoint")
@click.option("--prompts", "-p", required=True, type=click.Path(exists=True), help="Corpus file")
@click.option("--prompt-len", default=8, show_default=True)
@click.option("--config", "-c", "config_path", type=click.Path(exists=True))
@click.option("--steps", type=int, help="Override the config's decode steps")
@click.option("--blocks", type=int, help="Override the config's block count")
@click.option("--gen-len", type=int, help="Override the config's response length")
@click.option("--budget", type=int, help="Override the config's calibration budget")
@click.option("--out", "-o", required=True, type=click.Path())
def calibrate(
    model: str,
    prompts: str,
    prompt_len: int,
    config_path: str | None,
    steps: int | None,
    blocks: int | None,
    gen_len: int | None,
    budget: int | None,
    out: str,
):
    """Sample decode states for calibration (TMAS, random or uniform).

    Examples:

        $ dllmq calibrate -m toy.dlqw -p corpus.txt --budget 256 -o toy.dlqc
    """
    print_banner()
    try:
        out = resolve_out(out)
        config = resolve_config(config_path)
        overrides = {
            k: v
            for k, v in (
                ("steps", steps),
                ("blocks", blocks),
                ("gen_len", gen_len),
                ("calib_budget", budget),
            )
            if v is not None
        }
        if overrides:
            config = QuantConfig.model_validate({**config.model_dump(), **overrides})
        weights = load_checkpoint(model)
        calib = build_calibration(
            weights, load_prompts(prompts, prompt_len), config, Rng(config.seeds[0])
        )
        save_calibration(calib, out)
        write_run_manifest(out, "calibrate", click.get_current_context().params, config)
        rprint(
            f"\n[bold green]✓ {len(calib)} calibration states written:[/bold green] "
            f"[cyan]{out}[/cyan]"
        )
    except Exception as e:
        fail(e)


@main.command()
@click.option("--model", "-m", required=True, type=click.Path(exists=True), help="fp checkpoint")
@click.option("--calib", type=click.Path(exists=True), help="Calibration file")
@click.option("--config", "-c", "config_path", type=click.Path(exists=True))
@click.option("--out", "-o", required=True, type=click.Path())
def quantize(model: str, calib: str | None, config_path: str | None, out: str):
    """Quantize a checkpoint with the configured methods."""
    print_banner()
    try:
        out = resolve_out(out)
        config = resolve_config(config_path)
        weights = load_checkpoint(model)
        calib_set = (
            load_calibration(calib)
            if calib
            else CalibrationSet(samples=[], counters=[], targets=[])
        )
        qmodel = quantize_model(weights, calib_set, config)
        save_quantized(out, qmodel)
        write_run_manifest(out, "quantize", click.get_current_context().params, config)
        rprint(f"\n[bold green]✓ Quantized model written:[/bold green] [cyan]{out}[/cyan]")
    except Exception as e:
        fail(e)


@main.command("eval-error")
@click.option("--model", "-m", required=True, type=click.Path(exists=True), help="fp checkpoint")
@click.option("--quantized", "-q", required=True, type=click.Path(exists=True))
@click.option("--prompts", "-p", required=True, type=click.Path(exists=True))
@click.option("--prompt-len", default=8, show_default=True)
@click.option(
    "--mode",
    type=click.Choice(["teacher-forced", "free-running"]),
    default="teacher-forced",
    show_default=True,
)
@click.option(
    "--softmax-quant/--no-softmax-quant",
    default=None,
    help="Override whether the softmax x V product is quantized",
)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
@click.option("--out", "-o", required=True, type=click.Path())
def eval_error(
    model: str,
    quantized: str,
    prompts: str,
    prompt_len: int,
    mode: str,
    softmax_quant: bool | None,
    fmt: str,
    out: str,
):
    """Per-step logits MSE between the fp and the quantized model."""
    print_banner()
    try:
        out = resolve_out(out)
        fp_weights = load_checkpoint(model)
        qmodel = load_quantized(quantized)
        config = qmodel.manifest.config
        if softmax_quant is not None:
            config = config.model_copy(update={"quantize_softmax_matmul": softmax_quant})
            qmodel.manifest.config = config
        report = measure_step_error(
            fp_weights,
            qmodel.weights,
            load_prompts(prompts, prompt_len),
            config.steps,
            config.blocks,
            mode,  # type: ignore[arg-type]
            quant=qmodel.quant,
            gen_len=config.gen_len,
            fingerprint=config.fingerprint(),
            seed=config.seeds[0],
        )
        print_step_errors(report)
        emit_report(report.rows(), fmt, out, row_type=StepErrorRow, config=config)  # type: ignore[arg-type]
        write_run_manifest(out, "eval-error", click.get_current_context().params, config)
        rprint(f"\n[bold green]✓ Report written:[/bold green] [cyan]{out}[/cyan]")
    except Exception as e:
        fail(e)


@main.command()
@click.option("--model", "-m", required=True, type=click.Path(exists=True))
@click.option("--prompts", "-p", required=True, type=click.Path(exists=True))
@click.option("--prompt-len", default=8, show_default=True)
@click.option("--steps", default=16, show_default=True)
@click.option("--blocks", default=4, show_default=True)
@click.option("--gen-len", default=32, show_default=True)
@click.option(
    "--region",
    type=click.Choice(["response", "all"]),
    default="response",
    show_default=True,
    help="Positions pooled into each row",
)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
@click.option("--out", "-o", required=True, type=click.Path())
def stats(
    model: str,
    prompts: str,
    prompt_len: int,
    steps: int,
    blocks: int,
    gen_len: int,
    region: str,
    fmt: str,
    out: str,
):
    """Activation range statistics per decode step and layer."""
    print_banner()
    try:
        out = resolve_out(out)
        rows = activation_range_stats(
            load_checkpoint(model),
            load_prompts(prompts, prompt_len),
            steps,
            blocks,
            gen_len,
            region,  # type: ignore[arg-type]
        )
        emit_report(rows, fmt, out, row_type=RangeStatRow)  # type: ignore[arg-type]
        write_run_manifest(out, "stats", click.get_current_context().params)
        rprint(f"\n[bold green]✓ {len(rows)} rows written:[/bold green] [cyan]{out}[/cyan]")
    except Exception as e:
        fail(e)


@main.command()
@click.option("--model", "-m", required=True, type=click.Path(exists=True))
@click.option("--prompts", "-p", required=True, type=click.Path(exists=True))
@click.option("--prompt-len", default=8, show_default=True)
@click.option("--config", "-c", "config_path", type=click.Path(exists=True))
@click.option("--n-calib", default=8, show_default=True, help="Calibration prompts per seed")
@click.option("--n-eval", default=4, show_default=True, help="Evaluation prompts per seed")
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default="csv", show_default=True)
@click.option("--out", "-o", required=True, type=click.Path())
def ablate(
    model: str,
    prompts: str,
    prompt_len: int,
    config_path: str | None,
    n_calib: int,
    n_eval: int,
    fmt: str,
    out: str,
):
    """Run the TMAS / CGQ / IA-AQ toggle grid plus the CGQ factor split.

    Examples:

        $ dllmq ablate -m toy.dlqw -p corpus.txt -c w4a4.toml -o ablation.csv

        $ DLLMQ_SEED=0,1,2 dllmq ablate -m toy.dlqw -p corpus.txt --format json -o abl.json
    """
    print_banner()
    try:
        out = resolve_out(out)
        config = resolve_config(config_path)
        rows = run_ablation(
            load_checkpoint(model),
            load_prompts(prompts, prompt_len),
            config,
            n_calib=n_calib,
            n_eval=n_eval,
        )
        rprint("\n")
        print_ablation(rows)
        emit_report(rows, fmt, out, row_type=AblationRow, config=config)  # type: ignore[arg-type]
        write_run_manifest(out, "ablate", click.get_current_context().params, config)
    except Exception as e:
        fail(e)


@main.command()
@click.argument("file", type=click.Path(exists=True))
@click.option("--csv", "csv_out", type=click.Path(), help="Also convert the report to CSV")
def report(file: str, csv_out: str | None):
    """Show a JSON report as a table, optionally converting it to CSV."""
    try:
        raw = json.loads(Path(file).read_text(encoding="utf-8"))
        kind = raw.get("kind")
        if kind not in ROW_TYPES:
            raise ValueError(f"unknown report kind {kind!r} in {file}")
        envelope, rows = load_report(file, ROW_TYPES[kind])
        print_rows(f"{kind} ({envelope.fingerprint[:12] or 'no config'})", envelope.columns, envelope.rows)
        if csv_out:
            emit_report(rows, "csv", csv_out, row_type=ROW_TYPES[kind])
            rprint(f"[green]✓[/green] CSV written to [cyan]{csv_out}[/cyan]")
    except Exception as e:
        fail(e)


if __name__ == "__main__":
    main()
