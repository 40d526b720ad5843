import logging
from pathlib import Path
from typing import List, Optional

import numpy as np
import typer
from rich.console import Console
from rich.table import Table

from app.core.config import settings, setup_logging
from app.core.exceptions import ConfigError, FedConError
from app.schemas.environment import SyntheticConfig
from app.schemas.experiment import ALGORITHMS, ExperimentConfig
from app.services.environment_service import (
    build_lowerbound_instance,
    environment_from_factors,
    generate_synthetic,
    ingest_feedback_matrix,
)
from app.services.harness_service import HarnessService
from app.services.storage_service import (
    ExperimentStore,
    load_experiment_config,
    load_feedback_csv,
    load_relations_csv,
    write_environment,
)

logger = logging.getLogger(__name__)
console = Console()


def parse_seeds(value: Optional[str]) -> Optional[List[int]]:
    """``"1,4,9"`` is a list; a single ``"n"`` means seeds 1..n."""
    if value is None:
        return None
    parts = [p.strip() for p in value.split(",") if p.strip()]
    try:
        if len(parts) == 1:
            return list(range(1, int(parts[0]) + 1))
        return [int(p) for p in parts]
    except ValueError as e:
        raise ConfigError(f"cannot parse seeds '{value}'") from e


def parse_ints(value: str) -> List[int]:
    try:
        return [int(p) for p in value.split(",") if p.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse integer list '{value}'") from e


def _load(
    config: Optional[Path],
    algo: Optional[str],
    clients: Optional[int],
    arms: Optional[int],
    horizon: Optional[int],
    seeds: Optional[str],
    out: Optional[Path],
) -> ExperimentConfig:
    overrides = {
        "algo": algo,
        "M": clients,
        "K": arms,
        "T": horizon,
        "seeds": parse_seeds(seeds),
        "output": str(out) if out else None,
    }
    return load_experiment_config(config, overrides)


def _fail(error: Exception) -> None:
    console.print(f"[bold red]Error:[/bold red] {error}")
    raise typer.Exit(code=1)


def _summary_table(rows) -> Table:
    table = Table(title="Summary")
    for column in ("algorithm", "M", "K", "T", "mean", "median", "IQR", "key terms", "scalars", "improvement"):
        table.add_column(column)
    for row in rows:
        table.add_row(
            row.algorithm,
            str(row.M),
            str(row.K),
            str(row.T),
            f"{row.mean_regret:.2f}",
            f"{row.median_regret:.2f}",
            f"{row.q25_regret:.2f}-{row.q75_regret:.2f}",
            f"{row.mean_keyterm_pulls:.1f}",
            f"{row.mean_comm_scalars:.0f}",
            "" if row.improvement_pct is None else f"{row.improvement_pct:.2f}%",
        )
    return table


def create_application() -> typer.Typer:
    """
    Create the command-line application.
    """
    cli = typer.Typer(
        name="fedcon",
        help=settings.DESCRIPTION,
        no_args_is_help=True,
        add_completion=False,
    )

    @cli.callback()
    def configure(
        log_level: Optional[str] = typer.Option(
            None, "--log-level", help="Overrides FEDCON_LOG"
        ),
    ):
        setup_logging(log_level)

    @cli.command()
    def run(
        config: Optional[Path] = typer.Option(None, "--config", "-c", help="Experiment YAML file"),
        algo: Optional[str] = typer.Option(
            None, "--algo", help=f"Comma-separated algorithms among {', '.join(ALGORITHMS)}"
        ),
        clients: Optional[int] = typer.Option(None, "--clients"),
        arms: Optional[int] = typer.Option(None, "--arms"),
        horizon: Optional[int] = typer.Option(None, "--horizon"),
        seeds: Optional[str] = typer.Option(None, "--seeds", help="'1,2,3' or a count n for 1..n"),
        out: Optional[Path] = typer.Option(None, "--out", help="Output directory"),
        reference: Optional[str] = typer.Option(
            None, "--reference", help="Algorithm the improvement percentage is measured against"
        ),
        workers: Optional[int] = typer.Option(None, "--workers", help="Parallel seeds"),
    ):
        """Run one or more algorithms over the seed list and write per-seed CSVs."""
        try:
            base = _load(config, None, clients, arms, horizon, seeds, out)
            names = [n.strip() for n in algo.split(",")] if algo else [base.algorithm.name]
            output = Path(base.output or "results")
            results = HarnessService(workers).compare(
                base, names, reference or base.reference_algorithm
            )
            rows = [result.summary for result in results]
            for result in results:
                name = result.config.algorithm.name
                store_dir = output / name if len(results) > 1 else output
                ExperimentStore(store_dir).write_all(result.logs, [result.summary])
            if len(results) > 1:
                ExperimentStore(output).write_summary(rows)
            console.print(_summary_table(rows))
        except FedConError as e:
            _fail(e)

    @cli.command()
    def sweep(
        axis: str = typer.Option(..., "--axis", help="M or K"),
        values: str = typer.Option(..., "--values", help="Strictly increasing, e.g. 3,6,9"),
        config: Optional[Path] = typer.Option(None, "--config", "-c"),
        algo: Optional[str] = typer.Option(None, "--algo"),
        clients: Optional[int] = typer.Option(None, "--clients"),
        arms: Optional[int] = typer.Option(None, "--arms"),
        horizon: Optional[int] = typer.Option(None, "--horizon"),
        seeds: Optional[str] = typer.Option(None, "--seeds"),
        out: Optional[Path] = typer.Option(None, "--out"),
        workers: Optional[int] = typer.Option(None, "--workers"),
    ):
        """Summary row per value of the swept axis."""
        try:
            cfg = _load(config, algo, clients, arms, horizon, seeds, out)
            rows = HarnessService(workers).sweep(cfg, axis, parse_ints(values))
            ExperimentStore(cfg.output or "results").write_summary(rows)
            console.print(_summary_table(rows))
        except FedConError as e:
            _fail(e)

    @cli.command()
    def verify(
        config: Optional[Path] = typer.Option(None, "--config", "-c"),
        clients: Optional[int] = typer.Option(None, "--clients"),
        arms: Optional[int] = typer.Option(None, "--arms"),
        horizon: Optional[int] = typer.Option(None, "--horizon"),
        seeds: Optional[str] = typer.Option(None, "--seeds"),
    ):
        """Run FedConPE and check every seed against the closed-form bounds."""
        try:
            cfg = _load(config, "fedconpe", clients, arms, horizon, seeds, None)
            table = Table(title="Theorem meters")
            for column in ("seed", "phases", "scalars", "bound", "replay", "conversations", "lemma"):
                table.add_column(column)
            failed = False
            harness = HarnessService()
            for seed in cfg.seeds:
                report = harness.verify_seed(cfg, seed)
                failed = failed or not report.all_ok
                table.add_row(
                    str(seed),
                    f"{report.phase_count} {'ok' if report.phase_count_ok else 'FAIL'}",
                    str(report.comm_total),
                    f"{report.comm_bound} {'ok' if report.comm_bound_ok else 'FAIL'}",
                    "ok" if report.comm_replay_ok else "FAIL",
                    "ok" if report.conversation_bound_ok else "FAIL",
                    "ok" if report.lemma_ok else f"{report.lemma_proviso_violations} proviso misses",
                )
            console.print(table)
            if failed:
                raise typer.Exit(code=1)
        except FedConError as e:
            _fail(e)

    @cli.command("gen-data")
    def gen_data(
        out: Path = typer.Option(..., "--out", help="Environment file to write"),
        kind: str = typer.Option("synthetic", "--kind", help="synthetic or lowerbound"),
        dim: int = typer.Option(settings.DEFAULT_DIM, "--dim"),
        clients: int = typer.Option(settings.DEFAULT_CLIENTS, "--clients"),
        arms: int = typer.Option(settings.DEFAULT_ARMS, "--arms"),
        pool: int = typer.Option(1000, "--pool", help="Synthetic arm pool size"),
        keyterms: int = typer.Option(200, "--keyterms"),
        users: int = typer.Option(200, "--users"),
        user: int = typer.Option(0, "--user"),
        horizon: int = typer.Option(settings.DEFAULT_HORIZON, "--horizon"),
        perturbed: Optional[int] = typer.Option(
            None, "--perturbed", help="Write theta' with 2 Delta in this 1-based coordinate"
        ),
        noise_std: float = typer.Option(1.0, "--noise-std"),
        seed: int = typer.Option(0, "--seed"),
    ):
        """Write a synthetic or lower-bound environment file."""
        try:
            if kind == "synthetic":
                env = generate_synthetic(
                    SyntheticConfig(
                        d=dim,
                        num_users=users,
                        num_arms=pool,
                        num_keyterms=keyterms,
                        seed=seed,
                        num_clients=clients,
                        arms_per_client=arms,
                        user_index=user,
                        noise_std=noise_std,
                    )
                ).environment
            elif kind == "lowerbound":
                theta_env, perturbed_env = build_lowerbound_instance(
                    dim, arms, clients, horizon, s=perturbed,
                    rng=np.random.default_rng(seed), noise_std=noise_std,
                )
                env = perturbed_env if perturbed else theta_env
            else:
                raise ConfigError(f"unknown environment kind '{kind}'")
            write_environment(env, out)
            console.print(f"[green]Wrote[/green] {out}")
        except (FedConError, ValueError) as e:
            _fail(e)

    @cli.command()
    def ingest(
        csv: Path = typer.Option(..., "--csv", help="user_id,item_id,value triples"),
        out: Path = typer.Option(..., "--out", help="Environment file to write"),
        dim: int = typer.Option(settings.DEFAULT_DIM, "--dim"),
        clients: int = typer.Option(1, "--clients"),
        arms: int = typer.Option(settings.DEFAULT_ARMS, "--arms"),
        binarize_threshold: Optional[float] = typer.Option(None, "--binarize-threshold"),
        relations: Optional[Path] = typer.Option(None, "--relations", help="item_id,keyterm_id pairs"),
        keyterms: Optional[int] = typer.Option(None, "--keyterms"),
        user: Optional[int] = typer.Option(None, "--user"),
        noise_std: float = typer.Option(1.0, "--noise-std"),
        seed: int = typer.Option(0, "--seed"),
    ):
        """Turn a feedback matrix into an environment file."""
        try:
            factors = ingest_feedback_matrix(load_feedback_csv(csv, binarize_threshold), dim)
            env = environment_from_factors(
                factors,
                num_clients=clients,
                arms_per_client=arms,
                rng=np.random.default_rng(seed),
                user_index=user,
                relations=load_relations_csv(relations) if relations else None,
                num_keyterms=keyterms,
                noise_std=noise_std,
            )
            write_environment(env, out)
            console.print(f"[green]Wrote[/green] {out}")
        except (FedConError, ValueError) as e:
            _fail(e)

    return cli


app = create_application()


def main() -> None:
    app()


if __name__ == "__main__":
    main()
