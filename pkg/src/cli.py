"""
mitoclass CLI: reproducible runs for atypical vs normal mitotic figure classification.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path
from typing import Annotated, Any, Optional, Sequence

import click
import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn

from src.mitoclass.checkpoint import load_checkpoint
from src.mitoclass.config import (
    SEED_ENV_VAR,
    AugPolicy,
    RunConfig,
    resolve,
    seed_from_env,
    to_json,
    validated,
)
from src.mitoclass.dataset import (
    Dataset,
    generate_synthetic,
    load_manifest,
    plan_synthetic,
    summarize,
    write_manifest,
    write_truth,
)
from src.mitoclass.errors import EmptyInput, FoldOutOfRange, ManifestError, MitoclassError
from src.mitoclass.evaluation import (
    MetricsReport,
    PredictionSet,
    aggregate_folds,
    evaluate,
    read_predictions,
    report_from_dict,
    write_aggregate,
    write_predictions,
    write_report,
)
from src.mitoclass.hpo import read_trials, run_search, select_best, trials_frame, write_search
from src.mitoclass.pixelpipe import HedStats, apply_policy, write_dump
from src.mitoclass.rng import derive_seed
from src.mitoclass.splits import (
    FoldAssignment,
    fold_slices,
    read_folds,
    stratified_kfold,
    stratum_counts,
    write_folds,
)
from src.mitoclass.trainer import evaluate_split, train
from src.utils import ensure_dir, read_json, render_table, write_json, write_table, write_text

app = typer.Typer(
    name="mitoclass",
    help="Imbalance-aware multi-head classifier for atypical vs normal mitotic figures",
    add_completion=False,
)
pixels_app = typer.Typer(help="Inspect the pixel pipeline")
app.add_typer(pixels_app, name="pixels")

console = Console(stderr=True)
logger = logging.getLogger("mitoclass")

_state = {"verbose": False}


ManifestOpt = Annotated[
    Path,
    typer.Option(
        "--manifest", "-m", help="Manifest CSV (patch_id, image_path, expert1-3, domain columns)"
    ),
]
ConfigOpt = Annotated[
    Optional[Path],
    typer.Option("--config", "-c", help="JSON config mirroring RunConfig (flags override it)"),
]
SeedOpt = Annotated[
    Optional[int],
    typer.Option(
        "--seed", "-s", help=f"Random seed (falls back to ${SEED_ENV_VAR}, then the config)"
    ),
]
KOpt = Annotated[Optional[int], typer.Option("--k", help="Number of folds")]
SplitSeedOpt = Annotated[
    Optional[int], typer.Option("--split-seed", help="Seed of the fold assignment")
]
FoldsOpt = Annotated[
    Optional[Path],
    typer.Option(
        "--folds", help="Fold CSV from `split` (otherwise folds come from --k and --split-seed)"
    ),
]
EpochsOpt = Annotated[Optional[int], typer.Option("--epochs", help="Maximum training epochs")]
LrOpt = Annotated[Optional[float], typer.Option("--lr", help="Initial learning rate")]
BatchOpt = Annotated[Optional[int], typer.Option("--batch-size", help="Mini-batch size")]
PatienceOpt = Annotated[
    Optional[int], typer.Option("--patience", help="Early stopping patience in epochs")
]
ThetaOpt = Annotated[
    Optional[float],
    typer.Option("--theta", help="Weight of the expert heads against the hardness head"),
]
InputModeOpt = Annotated[
    Optional[str], typer.Option("--input-mode", help="rgb | rgb_hed | crop_rgb_hed")
]
HardnessOpt = Annotated[
    Optional[str], typer.Option("--hardness-head", help="binary | four_class")
]
ResizeOpt = Annotated[
    Optional[int], typer.Option("--resize", help="Square input size after resizing")
]
WorkersOpt = Annotated[int, typer.Option("--workers", "-w", help="Threads for patch preparation")]
OutDirOpt = Annotated[Path, typer.Option("--out", "-o", help="Output directory")]


def _prune(data: dict[str, Any]) -> dict[str, Any]:
    pruned = {}
    for key, value in data.items():
        if isinstance(value, dict):
            value = _prune(value)
            if not value:
                continue
        if value is not None:
            pruned[key] = value
    return pruned


def _seed(flag: Optional[int]) -> Optional[int]:
    return flag if flag is not None else seed_from_env()


def _resolve(config: Optional[Path], overrides: dict[str, Any]) -> RunConfig:
    cfg = resolve(config, _prune(overrides))
    logger.debug("Resolved config:\n%s", to_json(cfg))
    return cfg


def _training_overrides(
    seed: Optional[int],
    k: Optional[int],
    split_seed: Optional[int],
    epochs: Optional[int],
    lr: Optional[float],
    batch_size: Optional[int],
    patience: Optional[int],
    theta: Optional[float],
    input_mode: Optional[str],
    hardness_head: Optional[str],
    resize: Optional[int],
) -> dict[str, Any]:
    return {
        "k": k,
        "split_seed": split_seed,
        "train": {
            "seed": _seed(seed),
            "max_epochs": epochs,
            "lr0": lr,
            "batch_size": batch_size,
            "patience": patience,
            "theta": theta,
        },
        "arch": {"input_mode": input_mode, "hardness_head_mode": hardness_head},
        "policy": {"resize_to": resize},
    }


def _assignment(dataset: Dataset, cfg: RunConfig, folds: Optional[Path]) -> FoldAssignment:
    if folds is None:
        return stratified_kfold(dataset, cfg.k, cfg.split_seed)
    assignment = read_folds(folds)
    if set(assignment.ids) != set(dataset.ids):
        raise ManifestError(f"{folds}: fold ids do not match the manifest ids")
    return assignment


def _check_fold(fold: int, k: int) -> None:
    if not 0 <= fold < k:
        raise FoldOutOfRange(f"--fold {fold} is outside [0, {k}) for k={k}")


def _progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        TextColumn("{task.completed}/{task.total}"),
        console=console,
        transient=True,
    )


def _metrics_rows(report: MetricsReport) -> list[list[Any]]:
    groups = [("overall", report.overall), *report.per_group.items()]
    return [
        [key, m.n, m.balanced_accuracy, m.sensitivity, m.specificity, m.roc_auc]
        for key, m in groups
    ]


def _show_report(title: str, report: MetricsReport) -> None:
    console.print(
        render_table(
            title,
            [report.group_by, "n", "balanced acc.", "sensitivity", "specificity", "ROC AUC"],
            _metrics_rows(report),
        )
    )


@app.callback()
def main_options(
    verbose: Annotated[
        bool, typer.Option("--verbose", "-v", help="Debug logging and tracebacks")
    ] = False,
    quiet: Annotated[bool, typer.Option("--quiet", "-q", help="Only warnings and errors")] = False,
) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    _state["verbose"] = verbose
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=console, show_path=False, rich_tracebacks=True)],
        force=True,
    )


@app.command()
def synth(
    out: OutDirOpt,
    n: Annotated[Optional[int], typer.Option("--n", help="Number of patches")] = None,
    amf_rate: Annotated[Optional[float], typer.Option("--amf-rate", help="AMF fraction")] = None,
    hard_rate: Annotated[Optional[float], typer.Option("--hard-rate", help="Hard fraction")] = None,
    n_domains: Annotated[Optional[int], typer.Option("--n-domains", help="Domain count")] = None,
    seed: SeedOpt = None,
    config: ConfigOpt = None,
    workers: WorkersOpt = 1,
) -> None:
    """Generate a planted-signal synthetic dataset: PNGs, manifest.csv and truth.csv."""
    cfg = _resolve(
        config,
        {
            "synthetic": {
                "n_patches": n,
                "amf_rate": amf_rate,
                "hard_rate": hard_rate,
                "n_domains": n_domains,
                "seed": _seed(seed),
            }
        },
    )
    dataset = generate_synthetic(cfg.synthetic, workers=workers)
    manifest = write_manifest(dataset, out)
    truth = write_truth(plan_synthetic(cfg.synthetic), out)
    write_text(out / "config.json", to_json(cfg))
    console.print(f"[green]✓[/green] Wrote: {manifest}")
    console.print(f"[green]✓[/green] Wrote: {truth}")


@app.command()
def split(
    manifest: ManifestOpt,
    out: Annotated[Path, typer.Option("--out", "-o", help="Fold CSV to write")],
    k: KOpt = None,
    seed: SeedOpt = None,
    config: ConfigOpt = None,
) -> None:
    """Stratified k-fold assignment over consensus class x hardness."""
    cfg = _resolve(config, {"k": k, "split_seed": _seed(seed)})
    dataset = load_manifest(manifest)
    assignment = stratified_kfold(dataset, cfg.k, cfg.split_seed)
    write_folds(assignment, out, console=console)
    counts = stratum_counts(assignment, dataset)
    console.print(
        render_table(
            "Stratum counts per fold",
            ["fold", "AMF-Hard", "AMF-Easy", "NMF-Hard", "NMF-Easy", "total"],
            [[f, *row.tolist(), int(row.sum())] for f, row in enumerate(counts)],
        )
    )


@app.command("train")
def train_cmd(
    manifest: ManifestOpt,
    fold: Annotated[int, typer.Option("--fold", help="Validation fold index")],
    out: OutDirOpt,
    folds: FoldsOpt = None,
    k: KOpt = None,
    split_seed: SplitSeedOpt = None,
    seed: SeedOpt = None,
    epochs: EpochsOpt = None,
    lr: LrOpt = None,
    batch_size: BatchOpt = None,
    patience: PatienceOpt = None,
    theta: ThetaOpt = None,
    input_mode: InputModeOpt = None,
    hardness_head: HardnessOpt = None,
    resize: ResizeOpt = None,
    config: ConfigOpt = None,
    workers: WorkersOpt = 1,
) -> None:
    """Train one fold and keep the checkpoint of the best validation epoch."""
    cfg = _resolve(
        config,
        _training_overrides(
            seed, k, split_seed, epochs, lr, batch_size, patience, theta,
            input_mode, hardness_head, resize,
        ),
    )
    if folds is None:
        _check_fold(fold, cfg.k)
    dataset = load_manifest(manifest)
    assignment = _assignment(dataset, cfg, folds)
    _check_fold(fold, assignment.k)

    with _progress() as progress:
        task = progress.add_task(f"Training fold {fold}", total=cfg.train.max_epochs)
        result = train(
            dataset,
            assignment,
            fold,
            cfg.arch,
            cfg.train,
            cfg.policy,
            run_dir=out,
            callback=lambda _: progress.advance(task),
            workers=workers,
        )
    console.print(f"[green]✓[/green] Wrote: {result.best_checkpoint_path}")
    console.print(
        f"Best epoch {result.best_epoch} of {result.epochs_run}: "
        f"validation balanced accuracy [bold]{result.best_val_balanced_accuracy:.4f}[/bold]"
    )


@app.command()
def cv(
    manifest: ManifestOpt,
    out: OutDirOpt,
    folds: FoldsOpt = None,
    k: KOpt = None,
    split_seed: SplitSeedOpt = None,
    seed: SeedOpt = None,
    epochs: EpochsOpt = None,
    lr: LrOpt = None,
    batch_size: BatchOpt = None,
    patience: PatienceOpt = None,
    theta: ThetaOpt = None,
    input_mode: InputModeOpt = None,
    hardness_head: HardnessOpt = None,
    resize: ResizeOpt = None,
    config: ConfigOpt = None,
    workers: WorkersOpt = 1,
) -> None:
    """Train every fold, then aggregate the fold reports as mean (±sample std)."""
    cfg = _resolve(
        config,
        _training_overrides(
            seed, k, split_seed, epochs, lr, batch_size, patience, theta,
            input_mode, hardness_head, resize,
        ),
    )
    dataset = load_manifest(manifest)
    assignment = _assignment(dataset, cfg, folds)
    ensure_dir(out)
    write_text(out / "config.json", to_json(cfg))
    write_folds(assignment, out / "folds.csv")

    reports, predictions = [], []
    with _progress() as progress:
        for fold in range(assignment.k):
            task = progress.add_task(f"Fold {fold}", total=cfg.train.max_epochs)
            result = train(
                dataset,
                assignment,
                fold,
                cfg.arch,
                cfg.train,
                cfg.policy,
                run_dir=out / f"fold{fold}",
                callback=lambda _, t=task: progress.advance(t),
                workers=workers,
            )
            progress.remove_task(task)
            reports.append(evaluate(result.val_predictions))
            predictions.append(result.val_predictions)

    aggregate = aggregate_folds(reports)
    write_aggregate(aggregate, out, console=console)
    pooled = PredictionSet.concat(predictions)
    write_predictions(pooled, out / "predictions.csv", console=console)
    write_report(evaluate(pooled), out, stem="pooled_metrics", console=console)

    rows = [
        [f"fold {i}", r.n, r.balanced_accuracy, r.sensitivity, r.specificity, r.roc_auc]
        for i, r in enumerate(reports)
    ]
    columns = ["fold", "n", "balanced acc.", "sensitivity", "specificity", "ROC AUC"]
    console.print(render_table("Cross-validation", columns, rows))
    mean_ba = aggregate.formatted()["balanced_accuracy"]
    console.print(f"Mean balanced accuracy: [bold]{mean_ba}[/bold]")


@app.command("eval")
def eval_cmd(
    checkpoint: Annotated[Path, typer.Option("--checkpoint", help="best.ckpt from a training run")],
    manifest: ManifestOpt,
    out: OutDirOpt,
    folds: Annotated[
        Optional[Path], typer.Option("--folds", help="Restrict to one fold's validation ids")
    ] = None,
    fold: Annotated[Optional[int], typer.Option("--fold", help="Fold used with --folds")] = None,
    group_by: Annotated[str, typer.Option("--group-by", help="domain | tumor_type")] = "domain",
) -> None:
    """Score a manifest with a checkpoint and write predictions plus a metrics report."""
    if group_by not in ("domain", "tumor_type"):
        raise click.BadParameter(
            f"expected 'domain' or 'tumor_type', got '{group_by}'", param_hint="--group-by"
        )
    params, arch, meta = load_checkpoint(checkpoint)
    dataset = load_manifest(manifest)
    if folds is not None:
        assignment = read_folds(folds)
        fold = meta.get("fold", 0) if fold is None else fold
        _check_fold(fold, assignment.k)
        dataset = dataset.subset(fold_slices(assignment, fold)[1])

    policy = validated(AugPolicy, meta["policy"]) if meta.get("policy") else AugPolicy(resize_to=64)
    hed = HedStats.from_dict(meta["hed"]) if meta.get("hed") else None
    preds = evaluate_split(params, dataset, policy, hed)
    report = evaluate(preds, group_by=group_by)  # type: ignore[arg-type]
    write_predictions(preds, out / "predictions.csv", console=console)
    write_report(report, out, console=console)
    _show_report(f"Evaluation ({arch.backbone}, {arch.input_mode})", report)


@app.command()
def hpo(
    manifest: ManifestOpt,
    out: OutDirOpt,
    trials: Annotated[Optional[int], typer.Option("--trials", help="Random-search trials")] = None,
    folds: FoldsOpt = None,
    k: KOpt = None,
    split_seed: SplitSeedOpt = None,
    seed: SeedOpt = None,
    epochs: Annotated[Optional[int], typer.Option("--epochs", help="Epochs per trial fold")] = None,
    config: ConfigOpt = None,
    workers: Annotated[int, typer.Option("--workers", "-w", help="Trials run concurrently")] = 1,
) -> None:
    """Random search over focal alpha/gamma, learning rate and dropout."""
    search_seed = _seed(seed)
    cfg = _resolve(
        config,
        {
            "k": k,
            "split_seed": split_seed,
            "n_trials": trials,
            "hpo_max_epochs": epochs,
            "train": {"seed": search_seed},
        },
    )
    dataset = load_manifest(manifest)
    assignment = _assignment(dataset, cfg, folds)
    ensure_dir(out)
    write_text(out / "config.json", to_json(cfg))

    with _progress() as progress:
        task = progress.add_task("Searching", total=cfg.n_trials)
        best, all_trials = run_search(
            dataset,
            assignment,
            cfg.arch,
            cfg.train,
            cfg.policy,
            cfg.search,
            cfg.n_trials,
            cfg.train.seed,
            max_epochs=cfg.hpo_max_epochs,
            workers=workers,
            callback=lambda _: progress.advance(task),
        )
    write_search(best, all_trials, out, assignment.k, console=console)
    _show_trials(all_trials, assignment.k)
    if best is None:
        raise EmptyInput("every trial failed; see trials.csv for the errors")
    console.print(
        f"Best trial {best.trial_id}: mean balanced accuracy [bold]{best.objective:.4f}[/bold]"
    )


def _show_trials(trials: Sequence[Any], k: int) -> None:
    frame = trials_frame(trials, k)
    columns = ["trial_id", "alpha", "gamma", "lr", "dropout", "mean_ba", "status"]
    rows = [[row[c] for c in columns] for _, row in frame.iterrows()]
    console.print(render_table("Trials", columns, rows))


@app.command()
def report(
    out: OutDirOpt,
    runs: Annotated[
        Optional[Path], typer.Option("--runs", help="cv output directory (fold*/metrics.json)")
    ] = None,
    trials: Annotated[Optional[Path], typer.Option("--trials", help="trials.csv from hpo")] = None,
    predictions: Annotated[
        Optional[Path], typer.Option("--predictions", help="predictions.csv to re-evaluate")
    ] = None,
) -> None:
    """Summarize fold reports, trial tables or prediction dumps into JSON/CSV."""
    if runs is None and trials is None and predictions is None:
        raise click.UsageError("give at least one of --runs, --trials, --predictions")
    ensure_dir(out)
    if runs is not None:
        fold_files = sorted(runs.glob("fold*/metrics.json"), key=lambda p: int(p.parent.name[4:]))
        reports = [report_from_dict(read_json(p)) for p in fold_files]
        aggregate = aggregate_folds(reports)
        write_aggregate(aggregate, out, console=console)
        console.print(
            render_table(
                "Fold aggregate",
                ["metric", "mean (±std)"],
                [[name, text] for name, text in aggregate.formatted().items()],
            )
        )
    if trials is not None:
        table = read_trials(trials)
        k = max((len(t.fold_scores) for t in table), default=0)
        best = select_best(table)
        write_table(out / "trials_summary.csv", trials_frame(table, k), console=console)
        write_json(
            out / "trials_summary.json",
            {
                "n_trials": len(table),
                "n_failed": sum(1 for t in table if not t.ok),
                "best_trial_id": best.trial_id if best else None,
                "best_objective": best.objective if best else None,
            },
            console=console,
        )
        _show_trials(table, k)
    if predictions is not None:
        evaluated = evaluate(read_predictions(predictions))
        write_report(evaluated, out, stem="report", console=console)
        _show_report("Predictions", evaluated)


@app.command()
def stats(
    manifest: ManifestOpt,
    out: Annotated[
        Optional[Path], typer.Option("--out", "-o", help="Write the summary as JSON")
    ] = None,
) -> None:
    """Class, hardness and domain composition of a manifest."""
    summary = summarize(load_manifest(manifest))
    rows = [
        ["patches", summary.n],
        ["AMF", summary.class_counts["AMF"]],
        ["NMF", summary.class_counts["NMF"]],
        ["AMF fraction", summary.amf_fraction],
        ["hard", summary.hardness_counts["hard"]],
        ["hard fraction", summary.hard_fraction],
        ["hard within AMF", summary.hard_by_class["AMF"]],
        ["hard within NMF", summary.hard_by_class["NMF"]],
        ["domains", len(summary.domain_share)],
    ]
    console.print(render_table("Dataset", ["statistic", "value"], rows))
    if out is not None:
        write_json(out, summary.to_dict(), console=console)


@pixels_app.command("dump")
def pixels_dump(
    manifest: ManifestOpt,
    patch_id: Annotated[str, typer.Option("--patch-id", help="Patch to run through the pipeline")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Binary tensor dump to write")],
    mode: Annotated[str, typer.Option("--mode", help="rgb | rgb_hed | crop_rgb_hed")] = "rgb",
    seed: SeedOpt = None,
    epoch: Annotated[int, typer.Option("--epoch", help="Epoch of the augmentation stream")] = 1,
    no_augment: Annotated[
        bool, typer.Option("--no-augment", help="Skip the random transforms")
    ] = False,
    resize: ResizeOpt = None,
    config: ConfigOpt = None,
) -> None:
    """Write the network input tensor of one patch (magic MPXT, H, W, C, float32)."""
    cfg = _resolve(
        config,
        {
            "arch": {"input_mode": mode},
            "policy": {"resize_to": resize},
            "train": {"seed": _seed(seed)},
        },
    )
    dataset = load_manifest(manifest)
    try:
        record = dataset.by_id(patch_id)
    except KeyError:
        raise ManifestError(f"patch_id '{patch_id}' is not in {manifest}") from None
    policy = cfg.policy.disabled() if no_augment else cfg.policy
    tensor = apply_policy(
        record, policy, cfg.arch.input_mode, derive_seed(cfg.train.seed, patch_id, epoch)
    )
    write_dump(out, tensor)
    h, w, c = tensor.shape
    console.print(f"[green]✓[/green] Wrote: {out} ({h}x{w}x{c})")


def run_cli(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI and return its exit code: 0 ok, 1 usage/config error, 2 runtime failure."""
    try:
        args = list(argv) if argv is not None else None
        result = app(args=args, prog_name="mitoclass", standalone_mode=False)
    except click.exceptions.Abort:
        console.print("[yellow]Aborted[/yellow]")
        return 1
    except click.ClickException as e:
        console.print(Panel(e.format_message(), title="Usage error", border_style="red"))
        return 1
    except MitoclassError as e:
        console.print(Panel(str(e), title=f"Error: {type(e).__name__}", border_style="red"))
        if _state["verbose"]:
            console.print_exception()
        return e.exit_code
    except OSError as e:
        console.print(Panel(str(e), title="Error: I/O", border_style="red"))
        if _state["verbose"]:
            console.print_exception()
        return 2
    except Exception as e:
        console.print(Panel(f"{type(e).__name__}: {e}", title="Internal error", border_style="red"))
        if _state["verbose"]:
            console.print_exception()
        return 2
    return result if isinstance(result, int) else 0


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
