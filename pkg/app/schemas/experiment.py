from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.core.config import settings
from app.schemas.algorithm import PhaseClientReport
from app.schemas.protocol import CostLedger

ALGORITHMS = (
    "fedconpe",
    "fedconpe-local",
    "linucb",
    "armcon",
    "conucb",
    "conlinucb-bs",
    "conlinucb-mcr",
    "conlinucb-ucb",
)
AlgorithmName = Literal[
    "fedconpe",
    "fedconpe-local",
    "linucb",
    "armcon",
    "conucb",
    "conlinucb-bs",
    "conlinucb-mcr",
    "conlinucb-ucb",
]


class EnvironmentSpec(BaseModel):
    """Where the ground truth of every seed comes from."""

    kind: Literal["synthetic", "lowerbound", "file", "feedback"] = "synthetic"
    path: Optional[str] = None
    relations_path: Optional[str] = None
    binarize_threshold: Optional[float] = None

    # synthetic and feedback
    num_users: int = Field(200, gt=0)
    num_arms: int = Field(1000, gt=0)
    num_keyterms: int = Field(200, gt=0)
    relation_max: int = Field(5, gt=0)
    user_index: Optional[int] = Field(None, ge=0)
    noise_std: float = Field(1.0, ge=0.0)

    # lowerbound
    perturbed: bool = False
    perturbed_coordinate: int = Field(2, ge=2)

    @model_validator(mode="after")
    def check_path(self) -> "EnvironmentSpec":
        if self.kind in ("file", "feedback") and not self.path:
            raise ValueError(f"environment kind '{self.kind}' needs a path")
        return self


class AlgorithmSpec(BaseModel):
    name: AlgorithmName = "fedconpe"
    delta: float = Field(0.05, gt=0.0, lt=1.0)
    N: Optional[float] = Field(None, gt=0.0)
    C: Optional[float] = Field(None, gt=0.0, le=1.0)
    alpha: Optional[float] = Field(None, ge=0.0)
    lambda_reg: float = Field(1.0, gt=0.0)
    schedule: Literal["log", "linear"] = "log"
    schedule_factor: int = Field(5, gt=0)
    schedule_divisor: int = Field(50, gt=0)
    theta_error_every: int = Field(500, gt=0)


class ExperimentConfig(BaseModel):
    """One experiment: environment, algorithm, problem sizes and seed list."""

    environment: EnvironmentSpec = Field(default_factory=EnvironmentSpec)
    algorithm: AlgorithmSpec = Field(default_factory=AlgorithmSpec)
    M: int = Field(default_factory=lambda: settings.DEFAULT_CLIENTS, ge=1)
    K: int = Field(default_factory=lambda: settings.DEFAULT_ARMS, ge=1)
    T: int = Field(default_factory=lambda: settings.DEFAULT_HORIZON, ge=1)
    d: int = Field(default_factory=lambda: settings.DEFAULT_DIM, ge=1)
    seeds: List[int] = Field(
        default_factory=lambda: list(range(1, settings.DEFAULT_SEEDS + 1))
    )
    output: Optional[str] = None
    reference_algorithm: Optional[AlgorithmName] = None

    @field_validator("seeds")
    @classmethod
    def non_empty_seeds(cls, v: List[int]) -> List[int]:
        if not v:
            raise ValueError("seeds must not be empty")
        if len(set(v)) != len(v):
            raise ValueError("seeds must be distinct")
        return v

    @model_validator(mode="after")
    def check_sizes(self) -> "ExperimentConfig":
        if self.environment.kind in ("synthetic", "lowerbound", "feedback") and self.K < self.d:
            raise ValueError(f"K={self.K} arms cannot span R^{self.d}")
        if self.environment.kind == "synthetic" and self.environment.num_arms < self.K:
            raise ValueError("the synthetic arm pool is smaller than K")
        return self


class MetricsLog(BaseModel):
    """
    Everything recorded for one (config, seed) run.

    Per-round arrays are row aligned, one row per (t, client) ordered by t
    then client. ``cum_regret`` is the running sum of ``instant_regret`` over
    rows, so its value on the last row of round t is R_M(t).
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    algorithm: str
    seed: int
    M: int
    K: int
    T: int
    d: int
    t: np.ndarray
    client: np.ndarray
    arm_id: np.ndarray
    keyterm_id: np.ndarray
    instant_regret: np.ndarray
    cum_regret: np.ndarray
    phase: np.ndarray
    ledger: CostLedger = Field(default_factory=CostLedger)
    replayed_scalars: int = 0
    reports: List[PhaseClientReport] = Field(default_factory=list)
    phase_starts: List[int] = Field(default_factory=list)
    theta_errors: List[Tuple[int, float]] = Field(default_factory=list)
    best_arm_eliminated: bool = False
    horizon_exceeded_phases: int = 0
    conversations: Optional[int] = None

    @property
    def final_regret(self) -> float:
        return float(self.cum_regret[-1]) if len(self.cum_regret) else 0.0

    @property
    def keyterm_pulls(self) -> int:
        """Logged conversation count, or the rows carrying a key term."""
        if self.conversations is not None:
            return self.conversations
        return int(np.count_nonzero(self.keyterm_id >= 0))

    @property
    def num_phases(self) -> int:
        return len(self.phase_starts)

    def regret_series(self) -> np.ndarray:
        """R_M(t) for t = 1..T."""
        last_rows = np.flatnonzero(np.r_[self.t[1:] != self.t[:-1], True])
        return self.cum_regret[last_rows]


class SummaryRow(BaseModel):
    algorithm: str
    M: int
    K: int
    T: int
    d: int
    seeds: int
    mean_regret: float
    median_regret: float
    q25_regret: float
    q75_regret: float
    std_regret: float
    mean_keyterm_pulls: float
    mean_comm_scalars: float
    improvement_pct: Optional[float] = None


class MeterCheck(BaseModel):
    """Conversation-frequency check for one (client, phase)."""

    client: int
    phase: int
    beta: float
    threshold: float
    arm_pulls: int
    keyterm_pulls: int
    ratio: float
    bound: float
    ok: bool


class MeterReport(BaseModel):
    """
    Measured run against the closed-form bounds.

    ``lemma_ok`` is informational: the augmented-eigenvalue bound is only
    guaranteed when matched key terms align exactly with their directions,
    so it does not enter ``all_ok``.
    """

    comm_total: int
    comm_replayed: int
    comm_replay_ok: bool
    comm_bound: int
    comm_bound_ok: bool
    comm_headline_bound: int
    comm_headline_ok: bool
    phase_count: int
    phase_count_ok: bool
    conversation_bound_ok: bool
    lemma_ok: bool
    lemma_proviso_violations: int
    checks: List[MeterCheck] = Field(default_factory=list)

    @property
    def all_ok(self) -> bool:
        return (
            self.comm_replay_ok
            and self.comm_bound_ok
            and self.phase_count_ok
            and self.conversation_bound_ok
        )


class ExperimentResult(BaseModel):
    config: ExperimentConfig
    logs: List[MetricsLog]
    summary: SummaryRow
