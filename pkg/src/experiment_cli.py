# src/experiment_cli.py

import logging
import math
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import click
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from rich.console import Console
from rich.table import Table

from src.errors import DcpLabError, InputError
from src.logger_config import setup_logging
from src.backbone import Backbone, param_census
from src.missing_sim import drop_modality, make_dataset, stack_stream
from src.models import (
    DynamicOp,
    ExperimentConfig,
    GeneratorKind,
    MissingType,
    ModalityKind,
    ModalMode,
    PromptConfig,
    Variant,
    prompts_for_variant,
)
from src.prompt_engine import PromptBank, assemble
from src.settings_manager import SettingsManager, save_config
from src.workers.cell_worker import SUMMARY_COLUMNS, CellResult, CellWorker, census_for

logger = logging.getLogger(__name__)
console = Console()

CURVE_COLUMNS = [
    "config_hash", "variant", "seed", "train_case", "eval_case", "rate", "loss", "accuracy", "f1_macro", "auroc",
]
CELL_KEY = ["train_case", "train_eta", "eval_slice", "eval_case", "eval_eta"]
METRICS = ["loss", "accuracy", "f1_macro", "auroc"]
GENERATOR_TENSOR_MARKERS = (".chain.", ".dynamic.", ".common")


# --- Grid execution ---

def run_cells(workers: Sequence[CellWorker], threads: int) -> List[CellResult]:
    """Runs cells on ``threads`` worker threads; results come back in cell order."""
    if threads > 1 and len(workers) > 1:
        return Parallel(n_jobs=threads, prefer="threads")(delayed(w.run)() for w in workers)
    return [w.run() for w in workers]


def write_table(frame: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")


def print_census(config: ExperimentConfig, variants: Iterable[Variant]) -> None:
    table = Table(title="Parameter census")
    for column in ("variant", "trainable", "total", "fraction"):
        table.add_column(column, justify="left" if column == "variant" else "right")
    for variant in variants:
        trainable, total, fraction = census_for(config, variant)
        table.add_row(variant.value, f"{trainable:,}", f"{total:,}", f"{fraction:.2%}")
        logger.info(f"Census {variant.value}: {trainable} trainable of {total} ({fraction:.4%}).")
    console.print(table)


def run_experiment(manager: SettingsManager, threads: int) -> Path:
    config = manager.settings
    out_dir = Path(config.output.directory)
    digest = manager.config_hash
    save_config(config, out_dir / "config.cfg")
    print_census(config, config.experiment.variants)

    workers = [
        CellWorker(config, digest, variant, seed, eta, out_dir)
        for variant, seed, eta in product(config.experiment.variants, config.experiment.seeds, config.missing.etas)
    ]
    logger.info(f"Running {len(workers)} cells on {threads} thread(s).")
    results = run_cells(workers, threads)
    summary = pd.DataFrame([row for r in results for row in r.rows], columns=SUMMARY_COLUMNS)
    summary_path = out_dir / "summary.csv"
    write_table(summary, summary_path)
    console.print(f"Wrote {len(workers)} cell reports and [bold]{summary_path}[/bold]")
    return summary_path


def sweep_rates(step: float) -> List[float]:
    if not 0 < step <= 1:
        raise InputError(f"sweep step must be in (0, 1], got {step}")
    n = int(math.floor(round(1.0 / step, 9)))
    return [round(i * step, 9) for i in range(n + 1)]


def sweep_missing_rate(manager: SettingsManager, rates: Sequence[float], threads: int) -> Path:
    """Trains one model per rate and writes one curve row per (rate, eval case)."""
    config = manager.settings
    for rate in rates:
        if not 0.0 <= rate <= 1.0:
            raise InputError(f"missing rate {rate} outside [0, 1]")
    out_dir = Path(config.output.directory)
    digest = manager.config_hash
    save_config(config, out_dir / "config.cfg")

    workers = [
        CellWorker(config, digest, variant, seed, rate, out_dir)
        for variant, seed, rate in product(config.experiment.variants, config.experiment.seeds, rates)
    ]
    results = run_cells(workers, threads)
    rows = []
    for result in results:
        for row in result.rows:
            if row["eval_slice"] != "test":
                continue
            rows.append({
                "config_hash": digest,
                "variant": row["variant"],
                "seed": row["seed"],
                "train_case": row["train_case"],
                "eval_case": row["eval_case"],
                "rate": result.eta,
                **{metric: row[metric] for metric in METRICS},
            })
    curve_path = out_dir / "curve.csv"
    write_table(pd.DataFrame(rows, columns=CURVE_COLUMNS), curve_path)
    console.print(f"Wrote {len(rows)} curve rows to [bold]{curve_path}[/bold]")
    return curve_path


# --- Compare ---

def load_summaries(paths: Sequence[Path]) -> pd.DataFrame:
    frames = []
    for path in paths:
        frame = pd.read_csv(path)
        if list(frame.columns) != SUMMARY_COLUMNS:
            raise InputError(f"'{path}' has header {list(frame.columns)}, expected {SUMMARY_COLUMNS}")
        frames.append(frame)
    if not frames:
        raise InputError("compare needs at least one summary CSV")
    return pd.concat(frames, ignore_index=True)


def compare_summaries(summary: pd.DataFrame) -> Tuple[pd.DataFrame, List[str]]:
    """
    Mean and sd over seeds per (cell, variant), ranked by mean F1-macro within
    each cell. Rows with a missing loss/accuracy/F1 are dropped and reported.
    """
    required = ["loss", "accuracy", "f1_macro"]
    summary = summary.reset_index(drop=True)
    summary[METRICS] = summary[METRICS].apply(pd.to_numeric, errors="coerce")
    bad = summary[summary[required].isna().any(axis=1)]
    diagnostics = [
        f"rejected {row.variant} seed {row.seed} {row.eval_slice}/{row.eval_case} (eta {row.eval_eta}): missing metric"
        for row in bad.itertuples()
    ]
    clean = summary.drop(index=bad.index)
    if clean.empty:
        raise InputError("no usable rows left to compare")

    grouped = clean.groupby(CELL_KEY + ["variant"], sort=True)
    table = grouped[METRICS].mean().add_suffix("_mean")
    spread = grouped[METRICS].std(ddof=1).add_suffix("_sd")
    table = table.join(spread)
    table["n_seeds"] = grouped["seed"].nunique()
    table = table.reset_index()

    table["rank"] = table.groupby(CELL_KEY)["f1_macro_mean"].rank(method="min", ascending=False).astype(int)
    best = table.sort_values(["rank", "variant"]).groupby(CELL_KEY).first()["variant"].rename("best_variant")
    table = table.join(best, on=CELL_KEY)
    return table.sort_values(CELL_KEY + ["rank", "variant"]).reset_index(drop=True), diagnostics


def print_compare(table: pd.DataFrame) -> None:
    view = Table(title="Variant comparison")
    for column in ("cell", "variant", "rank", "accuracy", "f1_macro", "auroc", "seeds", "best"):
        view.add_column(column)

    def fmt(mean: float, sd: float) -> str:
        if pd.isna(mean):
            return "-"
        return f"{mean:.4f}" if pd.isna(sd) else f"{mean:.4f} ± {sd:.4f}"

    for row in table.itertuples():
        cell = f"{row.train_case}@{row.train_eta:g} → {row.eval_slice}/{row.eval_case}@{row.eval_eta:g}"
        view.add_row(
            cell, row.variant, str(row.rank),
            fmt(row.accuracy_mean, row.accuracy_sd), fmt(row.f1_macro_mean, row.f1_macro_sd),
            fmt(row.auroc_mean, row.auroc_sd), str(row.n_seeds), row.best_variant,
        )
    console.print(view)


# --- Selftest ---

@dataclass(frozen=True)
class AblationRow:
    label: str
    variant: Variant
    prompts: PromptConfig
    prompt_depth: int


def ablation_rows(config: ExperimentConfig) -> List[AblationRow]:
    """Every value of every ablation axis, varied one axis at a time from the configured prompts."""
    base = config.prompts
    depth = config.model.prompt_depth
    rows = [AblationRow(f"variant={v.value}", v, base, depth) for v in Variant]

    for generator, reduction in [(GeneratorKind.NONE, base.reduction), (GeneratorKind.FC, base.reduction)] + [
        (GeneratorKind.MLP, r) for r in (4, 8, 16)
    ]:
        label = f"generator={generator.value}" + (f" r={reduction}" if generator is GeneratorKind.MLP else "")
        rows.append(AblationRow(label, Variant.DCP, base.model_copy(update={"generator": generator, "reduction": reduction}), depth))
    for mode in ModalMode:
        rows.append(AblationRow(f"modal_mode={mode.value}", Variant.DCP, base.model_copy(update={"modal_mode": mode}), depth))
    for j in range(1, config.model.n_layers + 1):
        rows.append(AblationRow(f"J={j}", Variant.DCP, base, j))
    for op in DynamicOp:
        rows.append(AblationRow(f"dynamic_op={op.value}", Variant.DCP, base.model_copy(update={"dynamic_op": op}), depth))
    for total in (12, 24, 36, 48, 60):
        third = total // 3
        lengths = {"correlated_length": total - 2 * third, "dynamic_length": third, "common_length": third}
        rows.append(AblationRow(f"L_p={total}", Variant.DCP, base.model_copy(update=lengths), depth))
    return rows


def check_ablation_row(config: ExperimentConfig, row: AblationRow) -> Tuple[List[str], int]:
    """
    Builds the bank for ``row`` and runs a tiny forward pass per missing type.
    Returns the failed checks and the row's trainable parameter count.
    """
    encoder = config.encoder_config().model_copy(update={"prompt_depth": row.prompt_depth})
    model = Backbone(encoder, n_outputs=config.data.n_classes, seed=config.model.backbone_seed)
    prompts = prompts_for_variant(row.variant, row.prompts)
    bank = PromptBank(prompts, encoder, seed=0)
    data = config.data
    samples = make_dataset(2, data.n_classes, data.noise, 0, vocab_size=data.vocab_size, text_len=data.text_len,
                           n_patches=data.n_patches, patch_dim=data.patch_dim, jitter=data.image_jitter,
                           label_mode=data.label_mode, synonyms=data.text_synonyms, modes=data.image_modes)

    failures = []
    for m in MissingType:
        batch = [s if m is MissingType.COMPLETE else drop_modality(s, m) for s in samples]
        logits = model.forward_batch(batch, m, bank)
        if logits.shape != (len(batch), data.n_classes):
            failures.append(f"{m.value}: logits shape {logits.shape}")
        if not np.all(np.isfinite(logits.numpy())):
            failures.append(f"{m.value}: non-finite logits")
        if prompts.total_length:
            embedded = {
                s: model.embed(s, stack_stream(batch, s)) if m.present(s) else None for s in ModalityKind
            }
            assembled = assemble(bank, m, embedded[ModalityKind.TEXT], embedded[ModalityKind.IMAGE])
            for stream, block in assembled.input_prompts.items():
                rows = 0 if block is None else block.shape[-2]
                if rows != prompts.total_length:
                    failures.append(f"{m.value}/{stream.value}: {rows} input prompt rows, expected {prompts.total_length}")

    generator_tensors = [name for name in bank.params if any(k in name for k in GENERATOR_TENSOR_MARKERS)]
    if row.variant is Variant.MMP_INDEPENDENT and generator_tensors:
        failures.append(f"mmp_independent owns generator tensors: {generator_tensors[:3]}")
    if row.variant is Variant.BASELINE and bank.num_parameters():
        failures.append("baseline owns prompt parameters")
    trainable, _, _ = param_census(model, bank)
    return failures, trainable


def run_selftest(config: ExperimentConfig) -> int:
    table = Table(title="Ablation self-test")
    for column in ("row", "variant", "trainable", "status"):
        table.add_column(column)
    failed = 0
    for row in ablation_rows(config):
        try:
            failures, trainable = check_ablation_row(config, row)
        except DcpLabError as e:
            failures, trainable = [str(e)], 0
        failed += bool(failures)
        status = "[green]ok[/green]" if not failures else f"[red]{'; '.join(failures)}[/red]"
        table.add_row(row.label, row.variant.value, f"{trainable:,}" if trainable else "-", status)
        for failure in failures:
            logger.error(f"Self-test row '{row.label}': {failure}")
    console.print(table)
    return failed


# --- Command line ---

def _load(config_path: str, seed: Optional[int], out: Optional[str]) -> SettingsManager:
    manager = SettingsManager(config_path)
    manager.apply_overrides(seed=seed, out=out)
    return manager


def _guard(action):
    try:
        return action()
    except DcpLabError as e:
        raise click.ClickException(str(e)) from e
    except OSError as e:
        raise click.ClickException(f"{e.filename or 'output'}: {e.strerror}") from e


config_option = click.option("--config", "config_path", type=click.Path(dir_okay=False), required=True,
                             help="Experiment config file (key = value with [section] headers).")
seed_option = click.option("--seed", type=click.IntRange(min=0), default=None, help="Run with this single seed.")
out_option = click.option("--out", type=click.Path(file_okay=False), default=None, help="Output directory.")
threads_option = click.option("--threads", type=click.IntRange(min=1), envvar="DCP_LAB_THREADS", default=1,
                              show_default=True, help="Worker threads for independent cells.")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log INFO to the console.")
@click.pass_context
def cli(ctx: click.Context, verbose: bool) -> None:
    """Deep correlated prompting lab: prompt-tune a frozen two-stream model under missing modalities."""
    ctx.ensure_object(dict)
    ctx.obj["console_level"] = logging.INFO if verbose else logging.WARNING


@cli.command()
@config_option
@seed_option
@out_option
@threads_option
@click.pass_context
def run(ctx: click.Context, config_path: str, seed: Optional[int], out: Optional[str], threads: int) -> None:
    """Train every (variant x seed x missing rate) cell and write a summary CSV."""
    def action():
        manager = _load(config_path, seed, out)
        setup_logging(manager.settings.output.directory, ctx.obj["console_level"])
        run_experiment(manager, threads)
    _guard(action)


@cli.command()
@config_option
@seed_option
@out_option
@threads_option
@click.option("--step", type=float, default=0.1, show_default=True, help="Spacing of the missing rates in [0, 1].")
@click.pass_context
def sweep(ctx: click.Context, config_path: str, seed: Optional[int], out: Optional[str], threads: int, step: float) -> None:
    """Train one model per missing rate and write a curve CSV."""
    def action():
        manager = _load(config_path, seed, out)
        setup_logging(manager.settings.output.directory, ctx.obj["console_level"])
        sweep_missing_rate(manager, sweep_rates(step), threads)
    _guard(action)


@cli.command()
@click.argument("summaries", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Write the ranked table to this CSV.")
def compare(summaries: Tuple[str, ...], out: Optional[str]) -> None:
    """Join summary CSVs and rank variants per cell."""
    def action():
        table, diagnostics = compare_summaries(load_summaries([Path(p) for p in summaries]))
        for message in diagnostics:
            click.echo(message, err=True)
        print_compare(table)
        if out:
            write_table(table, Path(out))
    _guard(action)


@cli.command()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Config whose model and data sections the self-test uses (defaults otherwise).")
def selftest(config_path: Optional[str]) -> None:
    """Instantiate every ablation row and check its structure."""
    def action():
        config = SettingsManager(config_path).settings if config_path else ExperimentConfig()
        failed = run_selftest(config)
        if failed:
            raise click.ClickException(f"{failed} ablation row(s) failed")
        console.print("[green]All ablation rows passed.[/green]")
    _guard(action)
