import numpy as np
import pytest

from app.schemas.linalg import EigenPair, SymMatrix
from app.schemas.protocol import (
    ClientUpload,
    KeytermAssignment,
    MessageDirection,
    ServerDownlink,
)
from app.services.protocol_service import (
    downlink_records,
    headline_bound,
    ledger_from_records,
    message_cost,
    replay_cost,
    upload_records,
    worst_case_bound,
)


def _upload(d=3, pairs=2, with_data=True):
    eigenpairs = [EigenPair(value=0.01 * j, vector=np.eye(d)[j]) for j in range(pairs)]
    return ClientUpload(
        phase=1,
        client_id=0,
        dim=d,
        eigenpairs=eigenpairs,
        gram=SymMatrix(entries=np.eye(d), psd=True) if with_data else None,
        moment=np.ones(d) if with_data else None,
    )


def test_upload_cost_two_eigenpairs():
    assert message_cost(_upload()) == 2 * 4 + 9 + 3 + 1


def test_eigen_only_upload_cost():
    assert message_cost(_upload(with_data=False)) == 2 * 4 + 1


def test_empty_downlink_with_theta():
    downlink = ServerDownlink(phase=2, client_id=1, dim=4, theta_hat=np.zeros(4))
    assert message_cost(downlink) == 4


def test_downlink_with_assignments():
    assignment = KeytermAssignment(
        keyterm_id=5, vector=[1.0, 0.0, 0.0], repetitions=3, eigenvalue=0.0, alignment=1.0
    )
    downlink = ServerDownlink(
        phase=1, client_id=0, dim=3, assignments=[assignment, assignment], theta_hat=np.zeros(3)
    )
    assert message_cost(downlink) == 2 * 4 + 3


def test_records_sum_to_message_cost():
    upload = _upload(d=4, pairs=3)
    downlink = ServerDownlink(phase=1, client_id=0, dim=4, theta_hat=np.ones(4))
    assert sum(r.scalar_count for r in upload_records(upload)) == message_cost(upload)
    assert sum(r.scalar_count for r in downlink_records(downlink)) == message_cost(downlink)


def test_ledger_totals_match_replay():
    upload = _upload()
    downlink = ServerDownlink(phase=1, client_id=0, dim=3, theta_hat=np.ones(3))
    ledger = ledger_from_records(upload_records(upload) + downlink_records(downlink))
    assert ledger.total_scalars == replay_cost([upload, downlink])
    assert ledger.upload_scalars == 21
    assert ledger.download_scalars == 3
    directions = [r.direction for r in ledger.records]
    assert directions == [
        MessageDirection.UPLOAD_EIGEN,
        MessageDirection.UPLOAD_DATA,
        MessageDirection.DOWNLINK_KEYTERMS,
        MessageDirection.BROADCAST,
    ]
    assert ledger.per_client_phase()[(0, 1)] == {"upload": 21, "download": 3}


def test_upload_rejects_too_many_eigenpairs():
    with pytest.raises(ValueError):
        ClientUpload(
            phase=1,
            client_id=0,
            dim=1,
            eigenpairs=[EigenPair(value=0.0, vector=[1.0])] * 2,
        )


def test_effective_dimension_rides_in_header():
    upload = _upload()
    assert upload.effective_dim == 3
    reduced = ClientUpload(
        phase=1, client_id=0, dim=3, effective_dim=2, eigenpairs=upload.eigenpairs
    )
    assert message_cost(reduced) == 2 * 4 + 1


def test_upload_caps_eigenpairs_at_effective_dimension():
    with pytest.raises(ValueError):
        ClientUpload(phase=1, client_id=0, dim=3, effective_dim=1, eigenpairs=_upload().eigenpairs)
    with pytest.raises(ValueError):
        ClientUpload(phase=1, client_id=0, dim=3, effective_dim=4)


def test_closed_form_bounds():
    d = 5
    assert headline_bound(3, 4, d) == 3 * 4 * (2 * d * d + 6 * d + 4)
    assert worst_case_bound(3, 4, d) == 3 * 4 * (d + 1) * (3 * d + 1)
    # full message pair per client-phase with d eigenpairs and d key terms
    per_phase = d * (d + 1) + d * d + d + 1 + d * (d + 1) + d
    assert per_phase == (d + 1) * (3 * d + 1)
