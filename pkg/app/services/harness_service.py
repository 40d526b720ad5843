"""
Experiment harness: builds environments per seed, runs an algorithm,
accounts regret and communication, and checks runs against the
closed-form bounds.
"""

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from app.bandits.policies.schedules import ConversationSchedule
from app.bandits.policies.ucb_policy import run_baseline
from app.bandits.workflows.phase_workflow import run_fedconpe
from app.core.config import settings
from app.core.exceptions import (
    ConfigError,
    ExperimentError,
    FedConError,
    UnknownArm,
    WrongAlgorithm,
)
from app.schemas.algorithm import AlgoConfig, FedconpeRun
from app.schemas.environment import Environment, SyntheticConfig
from app.schemas.experiment import (
    ExperimentConfig,
    ExperimentResult,
    MeterCheck,
    MeterReport,
    MetricsLog,
    SummaryRow,
)
from app.schemas.protocol import CostLedger, TranscriptRecord
from app.services.environment_service import (
    build_lowerbound_instance,
    environment_from_factors,
    generate_synthetic,
    ingest_feedback_matrix,
)
from app.services.protocol_service import (
    headline_bound,
    ledger_from_records,
    replay_cost,
    worst_case_bound,
)
from app.services.storage_service import (
    load_feedback_csv,
    load_relations_csv,
    read_environment,
)

logger = logging.getLogger(__name__)


def compute_regret(
    clients: np.ndarray, arm_ids: np.ndarray, env: Environment
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Instantaneous and cumulative regret of an action log.

    Row regret is max_a a^T theta* - a_t^T theta* for the row's client;
    key-term queries never count.

    Raises:
        UnknownArm: If a row names an arm its client does not have
    """
    clients = np.asarray(clients, dtype=np.int64)
    arm_ids = np.asarray(arm_ids, dtype=np.int64)
    instant = np.empty(len(arm_ids))
    for client_id in np.unique(clients):
        if not 0 <= client_id < env.num_clients:
            raise UnknownArm(f"client {client_id} does not exist")
        arms = env.clients[client_id]
        rows = np.flatnonzero(clients == client_id)
        positions = [arms.position(a) for a in arm_ids[rows]]
        if any(p is None for p in positions):
            raise UnknownArm(f"action log has arms outside the arm set of client {client_id}")
        values = arms.vectors[positions] @ env.theta_star
        instant[rows] = np.maximum(env.best_values[client_id] - values, 0.0)
    return instant, np.cumsum(instant)


def seed_streams(seed: int) -> Tuple[int, np.random.Generator]:
    """Environment seed and run generator, independent streams of one seed."""
    env_stream, run_stream = np.random.SeedSequence(seed).spawn(2)
    return int(env_stream.generate_state(1)[0]), np.random.default_rng(run_stream)


def build_environment(cfg: ExperimentConfig, env_seed: int) -> Environment:
    """The ground truth of one seed."""
    spec = cfg.environment
    rng = np.random.default_rng(env_seed)
    if spec.kind == "synthetic":
        user_index = spec.user_index if spec.user_index is not None else env_seed % spec.num_users
        dataset = generate_synthetic(
            SyntheticConfig(
                d=cfg.d,
                num_users=spec.num_users,
                num_arms=spec.num_arms,
                num_keyterms=spec.num_keyterms,
                relation_max=spec.relation_max,
                seed=env_seed,
                num_clients=cfg.M,
                arms_per_client=cfg.K,
                user_index=user_index,
                noise_std=spec.noise_std,
            )
        )
        return dataset.environment
    if spec.kind == "lowerbound":
        theta_env, perturbed_env = build_lowerbound_instance(
            cfg.d, cfg.K, cfg.M, cfg.T, s=spec.perturbed_coordinate, rng=rng, noise_std=spec.noise_std
        )
        return perturbed_env if spec.perturbed else theta_env
    if spec.kind == "file":
        env = read_environment(spec.path)
        if env.dim != cfg.d or env.num_clients != cfg.M:
            raise ConfigError(
                f"environment file has d={env.dim}, M={env.num_clients}; config asks d={cfg.d}, M={cfg.M}"
            )
        return env
    factors = ingest_feedback_matrix(load_feedback_csv(spec.path, spec.binarize_threshold), cfg.d)
    relations = load_relations_csv(spec.relations_path) if spec.relations_path else None
    return environment_from_factors(
        factors,
        num_clients=cfg.M,
        arms_per_client=cfg.K,
        rng=rng,
        user_index=spec.user_index,
        relations=relations,
        num_keyterms=spec.num_keyterms,
        relation_max=spec.relation_max,
        noise_std=spec.noise_std,
    )


def algo_config(cfg: ExperimentConfig, env: Environment, M: Optional[int] = None) -> AlgoConfig:
    spec = cfg.algorithm
    return AlgoConfig(
        T=cfg.T,
        M=M or env.num_clients,
        d=env.dim,
        K=max(len(arms) for arms in env.clients),
        delta=spec.delta,
        C=spec.C if spec.C is not None else env.richness_C,
        N=spec.N,
    )


def _fedconpe_columns(run: FedconpeRun, client_map: Optional[Sequence[int]] = None):
    transcripts = run.transcripts
    rounds = np.concatenate([tr.actions.rounds for tr in transcripts])
    clients = np.concatenate([tr.actions.clients for tr in transcripts])
    if client_map is not None:
        clients = np.asarray(client_map)[clients]
    arms = np.concatenate([tr.actions.arm_ids for tr in transcripts])
    keyterms = np.concatenate([tr.actions.keyterm_ids for tr in transcripts])
    phases = np.concatenate(
        [np.full(len(tr.actions.rounds), tr.phase, dtype=np.int64) for tr in transcripts]
    )
    return rounds, clients, arms, keyterms, phases


def _relabel_records(run: FedconpeRun, client_id: int) -> List[TranscriptRecord]:
    return [
        record.model_copy(update={"client": client_id})
        for tr in run.transcripts
        for record in tr.records
    ]


def _run_fedconpe_log(
    cfg: ExperimentConfig, env: Environment, rng: np.random.Generator, seed: int
) -> MetricsLog:
    algo = algo_config(cfg, env)
    run = run_fedconpe(env, algo, rng)
    rounds, clients, arms, keyterms, phases = _fedconpe_columns(run)
    records = [r for tr in run.transcripts for r in tr.records]
    messages = [m for tr in run.transcripts for m in (*tr.uploads, *tr.downlinks)]
    reports = [r for tr in run.transcripts for r in tr.reports]
    return _assemble_log(
        cfg, env, seed, rounds, clients, arms, keyterms, phases,
        ledger=ledger_from_records(records),
        replayed=replay_cost(messages),
        reports=reports,
        phase_starts=[tr.start_round for tr in run.transcripts],
        theta_errors=[
            (tr.start_round + tr.rounds - 1, tr.theta_error)
            for tr in run.transcripts
            if tr.theta_error is not None
        ],
        horizon_exceeded=sum(tr.horizon_exceeded for tr in run.transcripts),
    )


def _run_local_log(
    cfg: ExperimentConfig, env: Environment, rng: np.random.Generator, seed: int
) -> MetricsLog:
    """Every client runs FedConPE alone with its own server (M = 1 constants)."""
    columns, records, messages, reports = [], [], [], []
    theta_errors, phase_starts, exceeded = [], [], 0
    for client_id, client_rng in enumerate(rng.spawn(env.num_clients)):
        solo = Environment(
            dim=env.dim,
            clients=[env.clients[client_id]],
            key_terms=env.key_terms,
            theta_star=env.theta_star,
            noise_std=env.noise_std,
            richness_C=env.richness_C,
        )
        run = run_fedconpe(solo, algo_config(cfg, solo, M=1), client_rng)
        columns.append(_fedconpe_columns(run, client_map=[client_id]))
        records.extend(_relabel_records(run, client_id))
        messages.extend(m for tr in run.transcripts for m in (*tr.uploads, *tr.downlinks))
        reports.extend(
            r.model_copy(update={"client_id": client_id})
            for tr in run.transcripts
            for r in tr.reports
        )
        exceeded += sum(tr.horizon_exceeded for tr in run.transcripts)
        if client_id == 0:
            phase_starts = [tr.start_round for tr in run.transcripts]
            theta_errors = [
                (tr.start_round + tr.rounds - 1, tr.theta_error)
                for tr in run.transcripts
                if tr.theta_error is not None
            ]
    rounds, clients, arms, keyterms, phases = (np.concatenate(c) for c in zip(*columns))
    return _assemble_log(
        cfg, env, seed, rounds, clients, arms, keyterms, phases,
        ledger=ledger_from_records(records),
        replayed=replay_cost(messages),
        reports=reports,
        phase_starts=phase_starts,
        theta_errors=theta_errors,
        horizon_exceeded=exceeded,
    )


def _run_baseline_log(
    cfg: ExperimentConfig, env: Environment, rng: np.random.Generator, seed: int
) -> MetricsLog:
    spec = cfg.algorithm
    run = run_baseline(
        spec.name,
        env,
        cfg.T,
        rng,
        sched=ConversationSchedule(
            kind=spec.schedule, factor=spec.schedule_factor, divisor=spec.schedule_divisor
        ),
        alpha=spec.alpha,
        lambda_reg=spec.lambda_reg,
        theta_error_every=spec.theta_error_every,
    )
    return _assemble_log(
        cfg, env, seed, run.rounds, run.clients, run.arm_ids, run.keyterm_ids,
        np.zeros(len(run.rounds), dtype=np.int64),
        ledger=CostLedger(),
        replayed=0,
        theta_errors=run.theta_errors,
        conversations=sum(run.queries),
    )


def _assemble_log(
    cfg, env, seed, rounds, clients, arms, keyterms, phases, ledger, replayed,
    reports=(), phase_starts=(), theta_errors=(), horizon_exceeded=0, conversations=None,
) -> MetricsLog:
    order = np.lexsort((clients, rounds))
    rounds, clients, arms, keyterms, phases = (
        np.asarray(a)[order] for a in (rounds, clients, arms, keyterms, phases)
    )
    instant, cumulative = compute_regret(clients, arms, env)
    return MetricsLog(
        algorithm=cfg.algorithm.name,
        seed=seed,
        M=env.num_clients,
        K=max(len(a) for a in env.clients),
        T=cfg.T,
        d=env.dim,
        t=rounds.astype(np.int64),
        client=clients.astype(np.int64),
        arm_id=arms.astype(np.int64),
        keyterm_id=keyterms.astype(np.int64),
        instant_regret=instant,
        cum_regret=cumulative,
        phase=phases.astype(np.int64),
        ledger=ledger,
        replayed_scalars=replayed,
        reports=list(reports),
        phase_starts=list(phase_starts),
        theta_errors=list(theta_errors),
        best_arm_eliminated=any(not r.best_arm_active for r in reports),
        horizon_exceeded_phases=int(horizon_exceeded),
        conversations=conversations,
    )


def run_seed(cfg: ExperimentConfig, seed: int) -> MetricsLog:
    """
    One seeded run. The environment and the run draw from independent
    streams spawned from ``seed``, so the same seed gives the same
    environment for every algorithm.
    """
    env_seed, rng = seed_streams(seed)
    try:
        env = build_environment(cfg, env_seed)
        name = cfg.algorithm.name
        logger.info(f"[HARNESS_SERVICE] SEED {seed}: {name}, M={cfg.M}, K={cfg.K}, T={cfg.T}, d={cfg.d}")
        if name == "fedconpe":
            return _run_fedconpe_log(cfg, env, rng, seed)
        if name == "fedconpe-local":
            return _run_local_log(cfg, env, rng, seed)
        return _run_baseline_log(cfg, env, rng, seed)
    except FedConError:
        raise
    except Exception as e:
        logger.error(f"[HARNESS_SERVICE] Seed {seed} failed: {str(e)}")
        raise ExperimentError(f"Failed to run seed {seed}: {str(e)}") from e


def summarize(logs: Sequence[MetricsLog], cfg: ExperimentConfig) -> SummaryRow:
    finals = np.array([log.final_regret for log in logs])
    return SummaryRow(
        algorithm=cfg.algorithm.name,
        M=cfg.M,
        K=cfg.K,
        T=cfg.T,
        d=cfg.d,
        seeds=len(logs),
        mean_regret=float(finals.mean()),
        median_regret=float(np.median(finals)),
        q25_regret=float(np.percentile(finals, 25)),
        q75_regret=float(np.percentile(finals, 75)),
        std_regret=float(finals.std()),
        mean_keyterm_pulls=float(np.mean([log.keyterm_pulls for log in logs])),
        mean_comm_scalars=float(np.mean([log.ledger.total_scalars for log in logs])),
    )


def add_improvements(rows: Sequence[SummaryRow], reference: str) -> List[SummaryRow]:
    """
    Relative improvement of each row's mean final regret over the reference
    algorithm's row with the same (M, K, T, d), in percent.
    """
    baseline = {
        (r.M, r.K, r.T, r.d): r.mean_regret for r in rows if r.algorithm == reference
    }
    updated = []
    for row in rows:
        ref = baseline.get((row.M, row.K, row.T, row.d))
        pct = None if not ref else 100.0 * (ref - row.mean_regret) / ref
        updated.append(row.model_copy(update={"improvement_pct": pct}))
    return updated


def with_algorithm(cfg: ExperimentConfig, name: str) -> ExperimentConfig:
    """Copy of ``cfg`` running algorithm ``name``."""
    raw = cfg.model_dump()
    raw["algorithm"]["name"] = name
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"unknown algorithm '{name}'") from e


class HarnessService:
    """Runs experiments, comparisons, sweeps and bound checks over seed lists."""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or settings.MAX_WORKERS

    def run_experiment(self, cfg: ExperimentConfig) -> ExperimentResult:
        """
        Run every seed of ``cfg`` and reduce them to one summary row.

        Seeds run in a process pool when more than one worker is allowed; the
        result order always follows ``cfg.seeds``.
        """
        logger.info(
            f"[HARNESS_SERVICE] Running {cfg.algorithm.name} over {len(cfg.seeds)} seeds "
            f"with {self.max_workers} worker(s)"
        )
        if self.max_workers > 1 and len(cfg.seeds) > 1:
            with ProcessPoolExecutor(max_workers=self.max_workers) as pool:
                logs = list(pool.map(run_seed, [cfg] * len(cfg.seeds), cfg.seeds))
        else:
            logs = [run_seed(cfg, seed) for seed in cfg.seeds]
        summary = summarize(logs, cfg)
        logger.info(
            f"[HARNESS_SERVICE] {cfg.algorithm.name}: mean final regret {summary.mean_regret:.2f} "
            f"(median {summary.median_regret:.2f})"
        )
        return ExperimentResult(config=cfg, logs=logs, summary=summary)

    def compare(
        self, cfg: ExperimentConfig, names: Sequence[str], reference: Optional[str] = None
    ) -> List[ExperimentResult]:
        """
        Run ``cfg`` once per algorithm name on the same seeds.

        With a ``reference`` every summary carries its improvement over that
        algorithm's mean final regret.
        """
        results = [self.run_experiment(with_algorithm(cfg, name)) for name in names]
        if reference:
            rows = add_improvements([r.summary for r in results], reference)
            results = [r.model_copy(update={"summary": row}) for r, row in zip(results, rows)]
        return results

    def sweep(
        self, cfg: ExperimentConfig, axis: Literal["M", "K"], values: Sequence[int]
    ) -> List[SummaryRow]:
        """
        One summary row per axis value, everything else held fixed.

        Raises:
            ConfigError: If the axis is unknown or values are not strictly increasing
        """
        if axis not in ("M", "K"):
            raise ConfigError(f"cannot sweep over '{axis}', use M or K")
        values = list(values)
        if not values or any(b <= a for a, b in zip(values, values[1:])):
            raise ConfigError(f"sweep values must be strictly increasing, got {values}")
        rows = []
        for value in values:
            logger.info(f"[HARNESS_SERVICE] SWEEP {axis}={value}")
            point = ExperimentConfig.model_validate({**cfg.model_dump(), axis: value})
            rows.append(self.run_experiment(point).summary)
        return rows

    def verify_seed(self, cfg: ExperimentConfig, seed: int) -> MeterReport:
        """Run FedConPE on one seed and check it against the closed-form bounds."""
        log = run_seed(cfg, seed)
        env = build_environment(cfg, seed_streams(seed)[0])
        return theorem_meters(log, algo_config(cfg, env))


def conversation_bound(
    beta: float, cfg: AlgoConfig, phase: int, dim: Optional[int] = None
) -> float:
    """(3 / (4 (1 - eps^2)) - r N beta) / (N C^2), floored at 0; r defaults to d."""
    eps = cfg.epsilon(phase)
    r = dim or cfg.d
    return max(0.0, (3.0 / (4.0 * (1.0 - eps**2)) - r * cfg.N * beta) / (cfg.N * cfg.C**2))


def theorem_meters(log: MetricsLog, cfg: AlgoConfig) -> MeterReport:
    """
    Check a FedConPE log against the communication, conversation-frequency
    and phase-count bounds.

    Per (client, phase): beta >= s_l must give zero conversations, otherwise
    key-term pulls / arm pulls may not exceed the frequency bound plus the
    ceiling slack (d + |support|) / arm pulls.

    Raises:
        WrongAlgorithm: If the log is not from a FedConPE run
    """
    if log.algorithm != "fedconpe":
        raise WrongAlgorithm(f"theorem meters apply to fedconpe logs, got '{log.algorithm}'")

    phases = log.num_phases
    d, M = log.d, log.M
    checks = []
    for report in log.reports:
        ratio = report.keyterm_pulls / report.arm_pulls
        if report.beta >= report.threshold:
            bound = 0.0
            ok = report.keyterm_pulls == 0
        else:
            bound = conversation_bound(report.beta, cfg, report.phase, report.effective_dim)
            slack = (d + report.support_size) / report.arm_pulls
            ok = ratio <= bound + slack
        checks.append(
            MeterCheck(
                client=report.client_id,
                phase=report.phase,
                beta=report.beta,
                threshold=report.threshold,
                arm_pulls=report.arm_pulls,
                keyterm_pulls=report.keyterm_pulls,
                ratio=ratio,
                bound=bound,
                ok=ok,
            )
        )

    lemma_reports = [
        r for r in log.reports if r.lemma_min_eigenvalue is not None and r.lemma_proviso_ok
    ]
    total = log.ledger.total_scalars
    report = MeterReport(
        comm_total=total,
        comm_replayed=log.replayed_scalars,
        comm_replay_ok=total == log.replayed_scalars,
        comm_bound=worst_case_bound(M, phases, d),
        comm_bound_ok=total <= worst_case_bound(M, phases, d),
        comm_headline_bound=headline_bound(M, phases, d),
        comm_headline_ok=total <= headline_bound(M, phases, d),
        phase_count=phases,
        phase_count_ok=phases <= math.floor(math.log2(log.T)) + 1,
        conversation_bound_ok=all(c.ok for c in checks),
        lemma_ok=all(r.lemma_min_eigenvalue >= r.threshold - 1e-9 for r in lemma_reports),
        lemma_proviso_violations=sum(not r.lemma_proviso_ok for r in log.reports),
        checks=checks,
    )
    logger.info(
        f"[HARNESS_SERVICE] Meters: comm {total}/{report.comm_bound}, phases {phases}, "
        f"conversation bound {'ok' if report.conversation_bound_ok else 'VIOLATED'}"
    )
    return report
