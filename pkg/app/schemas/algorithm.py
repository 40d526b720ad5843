import math
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.config import settings
from app.schemas.linalg import DesignDistribution, EigenPair
from app.schemas.protocol import (
    ClientUpload,
    KeytermAssignment,
    ServerDownlink,
    TranscriptRecord,
)


class AlgoConfig(BaseModel):
    """
    Inputs shared by the FedConPE clients and server.

    ``N`` defaults to max(1, 1/C^2) when left unset.
    """

    T: int = Field(..., ge=1)
    M: int = Field(..., ge=1)
    d: int = Field(..., ge=1)
    K: int = Field(..., ge=1)
    delta: float = Field(0.05, gt=0.0, lt=1.0)
    C: float = Field(..., gt=0.0, le=1.0)
    N: Optional[float] = Field(None, gt=0.0)
    design_tol: float = Field(default_factory=lambda: settings.DESIGN_TOL, gt=0.0)
    design_max_iter: int = Field(default_factory=lambda: settings.DESIGN_MAX_ITER, ge=1)

    @model_validator(mode="after")
    def default_n(self) -> "AlgoConfig":
        if self.N is None:
            self.N = max(1.0, 1.0 / self.C**2)
        return self

    @property
    def confidence_log(self) -> float:
        """ln(2KM ln T / delta), with ln T floored at 1."""
        return math.log(2.0 * self.K * self.M * max(math.log(self.T), 1.0) / self.delta)

    @staticmethod
    def epsilon(phase: int) -> float:
        return 2.0**-phase

    def eigen_threshold(self, phase: int, dim: Optional[int] = None) -> float:
        """s_l = 3 / (4 (1 - eps_l^2) d N)."""
        eps = self.epsilon(phase)
        return 3.0 / (4.0 * (1.0 - eps**2) * (dim or self.d) * self.N)

    def elimination_radius(self, phase: int) -> float:
        return 2.0 * math.sqrt(self.N / self.M) * self.epsilon(phase)


class ClientState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    client_id: int = Field(..., ge=0)
    active: Tuple[int, ...]
    phase: int = Field(1, ge=1)
    design: Optional[DesignDistribution] = None
    basis: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def check_active(self) -> "ClientState":
        if not self.active:
            raise ValueError("active arm set must be non-empty")
        return self

    @property
    def eps(self) -> float:
        return 2.0**-self.phase


class ServerState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    dim: int = Field(..., gt=0)
    gram: np.ndarray
    moment: np.ndarray
    theta_hat: Optional[np.ndarray] = None
    phase: int = Field(1, ge=1)

    @classmethod
    def empty(cls, dim: int) -> "ServerState":
        return cls(dim=dim, gram=np.zeros((dim, dim)), moment=np.zeros(dim))


class PhaseClientReport(BaseModel):
    """Per (client, phase) facts needed by the theorem meters."""

    client_id: int
    phase: int
    effective_dim: int
    beta: float
    threshold: float
    support_size: int
    eigen_uploads: int
    arm_pulls: int
    keyterm_pulls: int
    executed_arm_pulls: int
    executed_keyterm_pulls: int
    schedule_overflow: bool = False
    active_before: int
    active_after: int
    best_arm_active: bool = True
    lemma_min_eigenvalue: Optional[float] = None
    lemma_proviso_ok: bool = True


class PhaseActions(BaseModel):
    """Per-round actions of every client in one phase, row-aligned arrays."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    rounds: np.ndarray
    clients: np.ndarray
    arm_ids: np.ndarray
    keyterm_ids: np.ndarray


class PhaseTranscript(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    phase: int
    start_round: int
    rounds: int
    planned_rounds: int
    horizon_exceeded: bool = False
    records: List[TranscriptRecord] = Field(default_factory=list)
    reports: List[PhaseClientReport] = Field(default_factory=list)
    theta_hat: Optional[np.ndarray] = None
    theta_error: Optional[float] = None
    actions: PhaseActions
    uploads: List[ClientUpload] = Field(default_factory=list)
    downlinks: List[ServerDownlink] = Field(default_factory=list)


class PhasePlan(BaseModel):
    """A client's schedule for one phase: T(a) per arm and the key terms it was sent."""

    arm_pulls: Dict[int, int]
    assignments: List[KeytermAssignment] = Field(default_factory=list)

    @property
    def total_arm_pulls(self) -> int:
        return sum(self.arm_pulls.values())

    @property
    def total_keyterm_pulls(self) -> int:
        return sum(a.repetitions for a in self.assignments)

    @property
    def demand(self) -> int:
        """Rounds the client needs to play its whole schedule."""
        return max(self.total_arm_pulls, self.total_keyterm_pulls)

    def with_assignments(self, assignments: List[KeytermAssignment]) -> "PhasePlan":
        return self.model_copy(update={"assignments": list(assignments)})


class ClientPhasePrep(BaseModel):
    """
    What a client computes before playing a phase: the design on its active
    arms (in the reduced coordinates of their span), the deficient
    directions lifted back to R^d and the arm half of the phase plan.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    client_id: int
    phase: int
    effective_dim: int
    basis: np.ndarray
    design: DesignDistribution
    beta: float
    threshold: float
    eigenpairs: List[EigenPair] = Field(default_factory=list)
    plan: PhasePlan

    @property
    def total_arm_pulls(self) -> int:
        return self.plan.total_arm_pulls


class ClientPlayResult(BaseModel):
    """Rounds a client actually played in one phase and the statistics it uploads."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    arm_ids: np.ndarray
    keyterm_ids: np.ndarray
    gram: np.ndarray
    moment: np.ndarray
    executed_arm_pulls: int
    executed_keyterm_pulls: int
    schedule_overflow: bool = False


class FedconpeRun(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    transcripts: List[PhaseTranscript]
    clients: List[ClientState]
    server: ServerState
    rounds: int
