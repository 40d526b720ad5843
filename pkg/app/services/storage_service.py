"""
File formats: environment text files, experiment YAML, feedback CSV input
and per-seed / summary / communication CSV output.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from pydantic import ValidationError

from app.core.exceptions import BadShape, ConfigError
from app.schemas.environment import Environment, FeatureSet, FeedbackMatrix
from app.schemas.experiment import ExperimentConfig, MetricsLog, SummaryRow
from app.services.environment_service import binarize

logger = logging.getLogger(__name__)

ENV_MAGIC = "fedcon-env 1"
METRICS_COLUMNS = [
    "t",
    "client",
    "arm_id",
    "keyterm_id",
    "instant_regret",
    "cum_regret",
    "phase",
]
COMM_COLUMNS = ["seed", "phase", "client", "direction", "scalar_count"]
FLOAT_FORMAT = "%.17g"

PathLike = Union[str, Path]


def _row(feature_id: int, vector: np.ndarray) -> str:
    return " ".join([str(int(feature_id))] + [FLOAT_FORMAT % v for v in vector])


def write_environment(env: Environment, path: PathLike) -> Path:
    """
    Write an environment as plain text.

    Layout: ``#`` comments, the magic line, ``key value`` scalars, then
    ``[theta_star]``, ``[key_terms]`` and one ``[client <i>]`` section per
    client with ``<id> <v1> ... <vd>`` rows at 17 significant digits.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        "# federated conversational bandit environment",
        ENV_MAGIC,
        f"dim {env.dim}",
        f"noise_std {FLOAT_FORMAT % env.noise_std}",
        f"richness_C {FLOAT_FORMAT % env.richness_C}",
        "[theta_star]",
        " ".join(FLOAT_FORMAT % v for v in env.theta_star),
        "[key_terms]",
    ]
    lines += [_row(i, v) for i, v in zip(env.key_terms.ids, env.key_terms.vectors)]
    for client_id, arms in enumerate(env.clients):
        lines.append(f"[client {client_id}]")
        lines += [_row(i, v) for i, v in zip(arms.ids, arms.vectors)]
    path.write_text("\n".join(lines) + "\n")
    logger.info(f"[STORAGE_SERVICE] Wrote environment with {env.num_clients} clients to {path}")
    return path


def _feature_set(rows: List[List[str]], dim: int) -> FeatureSet:
    if not rows:
        return FeatureSet(ids=(), vectors=np.zeros((0, dim)))
    return FeatureSet(
        ids=tuple(int(r[0]) for r in rows),
        vectors=np.array([[float(x) for x in r[1:]] for r in rows]),
    )


def read_environment(path: PathLike) -> Environment:
    """
    Parse a file written by ``write_environment``.

    Raises:
        BadShape: If the file is not an environment file or is malformed
    """
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines or lines[0] != ENV_MAGIC:
        raise BadShape(f"{path} is not a '{ENV_MAGIC}' environment file")

    scalars: Dict[str, str] = {}
    sections: Dict[str, List[List[str]]] = {}
    current: Optional[str] = None
    for line in lines[1:]:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections[current] = []
        elif current is None:
            key, _, value = line.partition(" ")
            scalars[key] = value.strip()
        else:
            sections[current].append(line.split())

    try:
        dim = int(scalars["dim"])
        theta = [float(x) for x in sections["theta_star"][0]]
        client_keys = sorted(
            (k for k in sections if k.startswith("client ")), key=lambda k: int(k.split()[1])
        )
        return Environment(
            dim=dim,
            clients=[_feature_set(sections[k], dim) for k in client_keys],
            key_terms=_feature_set(sections.get("key_terms", []), dim),
            theta_star=theta,
            noise_std=float(scalars.get("noise_std", 1.0)),
            richness_C=float(scalars["richness_C"]),
        )
    except (KeyError, IndexError, ValueError, ValidationError) as e:
        logger.error(f"[STORAGE_SERVICE] Malformed environment file {path}: {str(e)}")
        raise BadShape(f"Malformed environment file {path}: {str(e)}") from e


def load_experiment_config(path: PathLike, overrides: Optional[dict] = None) -> ExperimentConfig:
    """
    Load a YAML experiment file and apply CLI overrides.

    Raises:
        ConfigError: If the file cannot be read or fails validation
    """
    try:
        raw = yaml.safe_load(Path(path).read_text()) if path else {}
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must hold a mapping at the top level")
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
        if "algo" in raw:
            raw.setdefault("algorithm", {})["name"] = raw.pop("algo")
        return ExperimentConfig.model_validate(raw)
    except ConfigError:
        raise
    except (OSError, yaml.YAMLError, ValidationError) as e:
        logger.error(f"[STORAGE_SERVICE] Failed to load experiment config {path}: {str(e)}")
        raise ConfigError(f"Failed to load experiment config: {str(e)}") from e


def load_feedback_csv(path: PathLike, binarize_threshold: Optional[float] = None) -> FeedbackMatrix:
    """
    Read ``user_id,item_id,value`` triples into a dense binary matrix.

    Missing pairs are 0. Values are binarized with ``value > threshold`` when
    a threshold is given and must already be 0/1 otherwise.
    """
    frame = pd.read_csv(path)
    missing = {"user_id", "item_id", "value"} - set(frame.columns)
    if missing:
        raise BadShape(f"feedback CSV lacks columns {sorted(missing)}")
    frame = frame.astype({"user_id": str, "item_id": str})
    if binarize_threshold is not None:
        frame["value"] = binarize(frame["value"], binarize_threshold)
    table = frame.pivot_table(
        index="user_id", columns="item_id", values="value", aggfunc="max", fill_value=0.0
    )
    try:
        return FeedbackMatrix(
            user_ids=tuple(table.index.astype(str)),
            item_ids=tuple(table.columns.astype(str)),
            entries=table.to_numpy(dtype=float),
        )
    except ValidationError as e:
        logger.error(f"[STORAGE_SERVICE] Invalid feedback matrix in {path}: {str(e)}")
        raise BadShape(f"Invalid feedback matrix: {str(e)}") from e


def load_relations_csv(path: PathLike) -> List[Tuple[str, int]]:
    """``item_id,keyterm_id`` pairs."""
    frame = pd.read_csv(path).astype({"item_id": str})
    return [(str(i), int(k)) for i, k in zip(frame["item_id"], frame["keyterm_id"])]


def metrics_frame(log: MetricsLog) -> pd.DataFrame:
    return pd.DataFrame({column: getattr(log, column) for column in METRICS_COLUMNS})


def read_metrics_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def comm_frame(logs: Sequence[MetricsLog]) -> pd.DataFrame:
    rows = [
        (log.seed, r.phase, r.client, r.direction.value, r.scalar_count)
        for log in logs
        for r in log.ledger.records
    ]
    return pd.DataFrame(rows, columns=COMM_COLUMNS)


class ExperimentStore:
    """
    Output directory of one experiment.

    Holds ``seed_<seed>.csv`` per seed, ``summary.csv`` and ``comm.csv``.
    """

    def __init__(self, output_dir: PathLike):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)

    def seed_path(self, seed: int) -> Path:
        return self.output_dir / f"seed_{seed}.csv"

    def write_seed(self, log: MetricsLog) -> Path:
        path = self.seed_path(log.seed)
        metrics_frame(log).to_csv(path, index=False, float_format=FLOAT_FORMAT)
        return path

    def write_summary(self, rows: Sequence[SummaryRow]) -> Path:
        path = self.output_dir / "summary.csv"
        pd.DataFrame([row.model_dump() for row in rows]).to_csv(
            path, index=False, float_format=FLOAT_FORMAT
        )
        return path

    def write_comm(self, logs: Sequence[MetricsLog]) -> Path:
        path = self.output_dir / "comm.csv"
        comm_frame(logs).to_csv(path, index=False)
        return path

    def write_all(self, logs: Sequence[MetricsLog], rows: Sequence[SummaryRow]) -> List[Path]:
        try:
            paths = [self.write_seed(log) for log in logs]
            paths.append(self.write_summary(rows))
            paths.append(self.write_comm(logs))
        except OSError as e:
            logger.error(f"[STORAGE_SERVICE] Failed to write results to {self.output_dir}: {str(e)}")
            raise
        logger.info(f"[STORAGE_SERVICE] Wrote {len(paths)} files to {self.output_dir}")
        return paths
