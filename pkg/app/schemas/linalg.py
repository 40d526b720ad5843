from typing import Dict

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator


class SymMatrix(BaseModel):
    """
    Dense symmetric matrix.

    Entries are symmetrized on construction, so entries[i][j] == entries[j][i]
    holds bit-exactly. Instances tagged ``psd`` are checked for eigenvalues
    no lower than -1e-9.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    entries: np.ndarray
    psd: bool = False

    @field_validator("entries", mode="before")
    @classmethod
    def symmetrize(cls, v) -> np.ndarray:
        arr = np.array(v, dtype=float)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1] or arr.shape[0] == 0:
            raise ValueError(f"expected a non-empty square matrix, got shape {arr.shape}")
        return (arr + arr.T) / 2.0

    @model_validator(mode="after")
    def check_psd(self) -> "SymMatrix":
        if self.psd and np.all(np.isfinite(self.entries)):
            if np.linalg.eigvalsh(self.entries)[0] < -1e-9:
                raise ValueError("matrix tagged PSD has a negative eigenvalue")
        return self

    @property
    def dim(self) -> int:
        return int(self.entries.shape[0])

    @classmethod
    def zeros(cls, dim: int) -> "SymMatrix":
        return cls(entries=np.zeros((dim, dim)), psd=True)

    def __add__(self, other: "SymMatrix") -> "SymMatrix":
        return SymMatrix(entries=self.entries + other.entries, psd=self.psd and other.psd)


class EigenPair(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    value: float
    vector: np.ndarray

    @field_validator("vector", mode="before")
    @classmethod
    def unit_vector(cls, v) -> np.ndarray:
        vec = np.array(v, dtype=float).ravel()
        if abs(np.linalg.norm(vec) - 1.0) > 1e-9:
            raise ValueError("eigenvector must have unit norm")
        return vec

    @field_validator("value")
    @classmethod
    def non_negative(cls, v: float) -> float:
        if v < -1e-9:
            raise ValueError(f"eigenvalue {v} is negative")
        return v


class DesignDistribution(BaseModel):
    """
    Probability weights over arm ids, the information matrix they induce and
    the G-criterion value max_a a^T V^-1 a.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: Dict[int, float]
    info_matrix: SymMatrix
    g_value: float
    iterations: int = 0

    @model_validator(mode="after")
    def check_simplex(self) -> "DesignDistribution":
        values = np.fromiter(self.weights.values(), dtype=float)
        if values.size == 0:
            raise ValueError("design has no arms")
        if np.any(values < 0.0):
            raise ValueError("design weights must be non-negative")
        if abs(values.sum() - 1.0) > 1e-9:
            raise ValueError(f"design weights sum to {values.sum()}, expected 1")
        return self

    @property
    def support(self) -> Dict[int, float]:
        return {arm: w for arm, w in self.weights.items() if w > 0.0}

    def weight_vector(self, arm_ids) -> np.ndarray:
        return np.array([self.weights.get(int(a), 0.0) for a in arm_ids], dtype=float)
