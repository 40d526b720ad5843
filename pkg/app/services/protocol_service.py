"""
Scalar-count accounting for the client/server star topology.

A phase produces, per client, an eigen upload, a data upload, a key-term
downlink and a theta broadcast. The records of one message always sum to
``message_cost`` of that message.
"""

import logging
from typing import Iterable, List, Union

from app.schemas.protocol import (
    ClientUpload,
    CostLedger,
    MessageDirection,
    ServerDownlink,
    TranscriptRecord,
)

logger = logging.getLogger(__name__)


def eigen_upload_cost(upload: ClientUpload) -> int:
    """|E| (d + 1) + 1: eigenpairs plus the phase header (phase index and r)."""
    return len(upload.eigenpairs) * (upload.dim + 1) + 1


def data_upload_cost(upload: ClientUpload) -> int:
    """d^2 + d for G_i and W_i, zero when the phase was cut before uploading."""
    if upload.gram is None:
        return 0
    return upload.dim * upload.dim + upload.dim


def keyterm_downlink_cost(downlink: ServerDownlink) -> int:
    return len(downlink.assignments) * (downlink.dim + 1)


def broadcast_cost(downlink: ServerDownlink) -> int:
    return 0 if downlink.theta_hat is None else downlink.dim


def message_cost(msg: Union[ClientUpload, ServerDownlink]) -> int:
    """
    Number of scalars a message carries.

    A full ClientUpload costs |eigenpairs| (d + 1) + d^2 + d + 1 and a full
    ServerDownlink |assignments| (d + 1) + d.
    """
    if isinstance(msg, ClientUpload):
        return eigen_upload_cost(msg) + data_upload_cost(msg)
    if isinstance(msg, ServerDownlink):
        return keyterm_downlink_cost(msg) + broadcast_cost(msg)
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def upload_records(upload: ClientUpload) -> List[TranscriptRecord]:
    records = [
        TranscriptRecord(
            phase=upload.phase,
            client=upload.client_id,
            direction=MessageDirection.UPLOAD_EIGEN,
            scalar_count=eigen_upload_cost(upload),
        )
    ]
    if upload.gram is not None:
        records.append(
            TranscriptRecord(
                phase=upload.phase,
                client=upload.client_id,
                direction=MessageDirection.UPLOAD_DATA,
                scalar_count=data_upload_cost(upload),
            )
        )
    return records


def downlink_records(downlink: ServerDownlink) -> List[TranscriptRecord]:
    records = [
        TranscriptRecord(
            phase=downlink.phase,
            client=downlink.client_id,
            direction=MessageDirection.DOWNLINK_KEYTERMS,
            scalar_count=keyterm_downlink_cost(downlink),
        )
    ]
    if downlink.theta_hat is not None:
        records.append(
            TranscriptRecord(
                phase=downlink.phase,
                client=downlink.client_id,
                direction=MessageDirection.BROADCAST,
                scalar_count=broadcast_cost(downlink),
            )
        )
    return records


def replay_cost(messages: Iterable[Union[ClientUpload, ServerDownlink]]) -> int:
    """Total scalars recomputed from the messages themselves."""
    return sum(message_cost(msg) for msg in messages)


def ledger_from_records(records: Iterable[TranscriptRecord]) -> CostLedger:
    ledger = CostLedger()
    ledger.extend(records)
    logger.debug(
        f"[PROTOCOL_SERVICE] Ledger: {ledger.upload_scalars} up, {ledger.download_scalars} down"
    )
    return ledger


def worst_case_bound(M: int, phases: int, d: int) -> int:
    """M L (d + 1)(3d + 1): every client uploads d eigenpairs and receives d key terms."""
    return M * phases * (d + 1) * (3 * d + 1)


def headline_bound(M: int, phases: int, d: int) -> int:
    """M L (2d^2 + 6d + 4)."""
    return M * phases * (2 * d * d + 6 * d + 4)
