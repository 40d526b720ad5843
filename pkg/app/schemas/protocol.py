from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.schemas.linalg import EigenPair, SymMatrix


class MessageDirection(str, Enum):
    UPLOAD_EIGEN = "upload_eigen"
    UPLOAD_DATA = "upload_data"
    DOWNLINK_KEYTERMS = "downlink_keyterms"
    BROADCAST = "broadcast"

    @property
    def is_upload(self) -> bool:
        return self in (MessageDirection.UPLOAD_EIGEN, MessageDirection.UPLOAD_DATA)


class ClientUpload(BaseModel):
    """
    Everything a client sends in one phase: the deficient eigenpairs (sent
    before playing) and the aggregated G_i, W_i (sent after playing).
    ``effective_dim`` is the rank r of the client's active arm span; it
    rides in the one-scalar header with the phase and defaults to ``dim``.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    phase: int = Field(..., ge=1)
    client_id: int = Field(..., ge=0)
    dim: int = Field(..., gt=0)
    effective_dim: Optional[int] = Field(None, gt=0)
    eigenpairs: List[EigenPair] = Field(default_factory=list)
    gram: Optional[SymMatrix] = None
    moment: Optional[np.ndarray] = None

    @field_validator("moment", mode="before")
    @classmethod
    def as_vector(cls, v):
        return None if v is None else np.array(v, dtype=float).ravel()

    @model_validator(mode="after")
    def check_shapes(self) -> "ClientUpload":
        if self.effective_dim is None:
            self.effective_dim = self.dim
        if self.effective_dim > self.dim:
            raise ValueError("effective dimension exceeds d")
        if len(self.eigenpairs) > self.effective_dim:
            raise ValueError("a client uploads at most r eigenpairs")
        if self.gram is not None:
            if self.gram.dim != self.dim:
                raise ValueError("gram dimension mismatch")
            if np.linalg.eigvalsh(self.gram.entries)[0] < -1e-9 * max(
                1.0, float(np.abs(self.gram.entries).max())
            ):
                raise ValueError("uploaded gram must be PSD")
        if self.moment is not None and self.moment.shape != (self.dim,):
            raise ValueError("moment dimension mismatch")
        return self


class KeytermAssignment(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    keyterm_id: int
    vector: np.ndarray
    repetitions: int = Field(..., ge=0)
    eigenvalue: float
    alignment: float

    @field_validator("vector", mode="before")
    @classmethod
    def as_vector(cls, v) -> np.ndarray:
        return np.array(v, dtype=float).ravel()


class ServerDownlink(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    phase: int = Field(..., ge=1)
    client_id: int = Field(..., ge=0)
    dim: int = Field(..., gt=0)
    assignments: List[KeytermAssignment] = Field(default_factory=list)
    theta_hat: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def check_assignments(self) -> "ServerDownlink":
        if len(self.assignments) > self.dim:
            raise ValueError("a downlink carries at most d key terms")
        return self


class TranscriptRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    phase: int
    client: int
    direction: MessageDirection
    scalar_count: int = Field(..., ge=0)


class CostLedger(BaseModel):
    """Scalar counts per message, per (client, phase) and in total."""

    records: List[TranscriptRecord] = Field(default_factory=list)
    upload_scalars: int = 0
    download_scalars: int = 0

    def add(self, record: TranscriptRecord) -> None:
        self.records.append(record)
        if record.direction.is_upload:
            self.upload_scalars += record.scalar_count
        else:
            self.download_scalars += record.scalar_count

    def extend(self, records) -> None:
        for record in records:
            self.add(record)

    @property
    def total_scalars(self) -> int:
        return self.upload_scalars + self.download_scalars

    def per_client_phase(self) -> Dict[Tuple[int, int], Dict[str, int]]:
        table: Dict[Tuple[int, int], Dict[str, int]] = {}
        for record in self.records:
            row = table.setdefault(
                (record.client, record.phase), {"upload": 0, "download": 0}
            )
            row["upload" if record.direction.is_upload else "download"] += (
                record.scalar_count
            )
        return table
