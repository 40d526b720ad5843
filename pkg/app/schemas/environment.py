from functools import cached_property
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class FeatureSet(BaseModel):
    """Unit-norm feature vectors indexed by integer id (arms or key terms)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    ids: Tuple[int, ...]
    vectors: np.ndarray

    @field_validator("vectors", mode="before")
    @classmethod
    def as_matrix(cls, v) -> np.ndarray:
        arr = np.array(v, dtype=float)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1) if arr.size else arr.reshape(0, 0)
        return arr

    @model_validator(mode="after")
    def check_ids(self) -> "FeatureSet":
        if len(self.ids) != self.vectors.shape[0]:
            raise ValueError(
                f"{len(self.ids)} ids for {self.vectors.shape[0]} feature vectors"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("feature ids must be unique")
        return self

    @classmethod
    def from_vectors(cls, vectors, ids=None) -> "FeatureSet":
        arr = np.array(vectors, dtype=float)
        if ids is None:
            ids = range(arr.shape[0])
        return cls(ids=tuple(int(i) for i in ids), vectors=arr)

    @cached_property
    def index(self) -> Dict[int, int]:
        return {arm_id: pos for pos, arm_id in enumerate(self.ids)}

    def position(self, feature_id: int) -> Optional[int]:
        return self.index.get(int(feature_id))

    def vector(self, feature_id: int) -> np.ndarray:
        return self.vectors[self.index[int(feature_id)]]

    def subset(self, feature_ids) -> "FeatureSet":
        rows = [self.index[int(i)] for i in feature_ids]
        return FeatureSet(ids=tuple(int(i) for i in feature_ids), vectors=self.vectors[rows])

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1]) if self.vectors.ndim == 2 else 0

    def __len__(self) -> int:
        return len(self.ids)


ArmSet = FeatureSet
KeyTermSet = FeatureSet


class Environment(BaseModel):
    """
    Ground truth for one simulated user shared by M clients.

    Every arm and key term is unit norm, ||theta_star|| <= 1, and each
    client's arms span R^d.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dim: int = Field(..., gt=0)
    clients: List[FeatureSet]
    key_terms: FeatureSet
    theta_star: np.ndarray
    noise_std: float = Field(1.0, ge=0.0)
    richness_C: float = Field(..., gt=0.0, le=1.0)

    @field_validator("theta_star", mode="before")
    @classmethod
    def as_vector(cls, v) -> np.ndarray:
        return np.array(v, dtype=float).ravel()

    @model_validator(mode="after")
    def check_assumptions(self) -> "Environment":
        if not self.clients:
            raise ValueError("environment needs at least one client")
        if self.theta_star.shape != (self.dim,):
            raise ValueError(f"theta_star must have shape ({self.dim},)")
        if np.linalg.norm(self.theta_star) > 1.0 + 1e-9:
            raise ValueError("||theta_star|| must not exceed 1")
        for name, features in self._feature_sets():
            if len(features) == 0:
                continue
            if features.dim != self.dim:
                raise ValueError(f"{name} vectors have dimension {features.dim}")
            norms = np.linalg.norm(features.vectors, axis=1)
            if np.max(np.abs(norms - 1.0)) > 1e-9:
                raise ValueError(f"{name} vectors must have unit norm")
        for client_id, arms in enumerate(self.clients):
            if np.linalg.matrix_rank(arms.vectors) < self.dim:
                raise ValueError(f"arms of client {client_id} do not span R^{self.dim}")
        return self

    def _feature_sets(self):
        yield "key term", self.key_terms
        for client_id, arms in enumerate(self.clients):
            yield f"client {client_id} arm", arms

    @property
    def num_clients(self) -> int:
        return len(self.clients)

    @cached_property
    def best_values(self) -> np.ndarray:
        """Per-client optimal expected reward max_a a^T theta_star."""
        return np.array([np.max(arms.vectors @ self.theta_star) for arms in self.clients])

    @cached_property
    def best_arms(self) -> List[int]:
        return [
            arms.ids[int(np.argmax(arms.vectors @ self.theta_star))] for arms in self.clients
        ]


class SyntheticConfig(BaseModel):
    d: int = Field(50, gt=0)
    num_users: int = Field(200, gt=0)
    num_arms: int = Field(5000, gt=0)
    num_keyterms: int = Field(1000, gt=0)
    relation_max: int = Field(5, gt=0)
    seed: int = 0
    num_clients: int = Field(1, gt=0)
    arms_per_client: int = Field(100, gt=0)
    user_index: int = Field(0, ge=0)
    noise_std: float = Field(1.0, ge=0.0)

    @model_validator(mode="after")
    def check_counts(self) -> "SyntheticConfig":
        if self.num_arms < self.d:
            raise ValueError("num_arms must be at least d")
        if not self.d <= self.arms_per_client <= self.num_arms:
            raise ValueError("arms_per_client must lie between d and num_arms")
        if self.relation_max > self.num_keyterms:
            raise ValueError("relation_max cannot exceed num_keyterms")
        if self.user_index >= self.num_users:
            raise ValueError("user_index out of range")
        return self


class SyntheticDataset(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    environment: Environment
    user_thetas: np.ndarray
    arm_pool: FeatureSet
    relations: Tuple[Tuple[int, ...], ...]


class FeedbackMatrix(BaseModel):
    """Binary user-by-item feedback."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    user_ids: Tuple[str, ...]
    item_ids: Tuple[str, ...]
    entries: np.ndarray

    @model_validator(mode="after")
    def check_entries(self) -> "FeedbackMatrix":
        if self.entries.shape != (len(self.user_ids), len(self.item_ids)):
            raise ValueError("feedback entries do not match row/column ids")
        if not np.all(np.isin(self.entries, (0.0, 1.0))):
            raise ValueError("feedback entries must be binary")
        return self


class IngestedFactors(BaseModel):
    """
    Top-d SVD factors of a feedback matrix.

    ``user_vectors @ (arm_vectors * arm_scales[:, None]).T`` reproduces the
    rank-d approximation of R; arm vectors themselves are unit norm.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    user_ids: Tuple[str, ...]
    item_ids: Tuple[str, ...]
    user_vectors: np.ndarray
    arm_vectors: np.ndarray
    arm_scales: np.ndarray
    singular_values: np.ndarray
