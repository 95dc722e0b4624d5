import numpy as np
import pytest

from splinemsm.errors import ConfigurationError
from splinemsm.penalty import PenaltyBlock, PenaltyLayout


def layout():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(4, 3))
    B = rng.normal(size=(3, 2))
    D1 = A @ A.T          # rank 3
    D2 = B @ B.T          # rank 2
    return PenaltyLayout(9, [(np.arange(1, 5), D1, "a"), (np.arange(6, 9), D2, "b")]), D1, D2


def test_zero_and_unit():
    lay, D1, _ = layout()
    assert not np.any(lay.s_lambda([0, 0]))
    S = lay.s_lambda([1, 0])
    np.testing.assert_array_equal(S[1:5, 1:5], D1)
    assert np.count_nonzero(S) == np.count_nonzero(D1)


def test_block_sum_oracle():
    lay, D1, D2 = layout()
    beta = np.random.default_rng(1).normal(size=9)
    lam = np.array([0.7, 3.1])
    direct = lam[0] * beta[1:5] @ D1 @ beta[1:5] + lam[1] * beta[6:9] @ D2 @ beta[6:9]
    assert beta @ lay.s_lambda(lam) @ beta == pytest.approx(direct, rel=1e-12)
    assert lay.quad(0, beta) == pytest.approx(beta[1:5] @ D1 @ beta[1:5], rel=1e-12)


def test_derivative_embedding_and_linearity():
    lay, D1, D2 = layout()
    dS = lay.ds_dlambda(1)
    np.testing.assert_array_equal(dS[6:9, 6:9], D2)
    assert not np.any(np.delete(np.delete(dS, np.s_[6:9], 0), np.s_[6:9], 1))
    lam = np.array([2.0, 5.0])
    total = sum(lam[k] * lay.ds_dlambda(k) for k in range(2))
    assert np.abs(total - lay.s_lambda(lam)).max() <= 1e-12
    l1, l2 = np.array([0.3, 1.0]), np.array([2.0, 0.1])
    combo = lay.s_lambda(2 * l1 + 3 * l2) - 2 * lay.s_lambda(l1) - 3 * lay.s_lambda(l2)
    assert np.abs(combo).max() <= 1e-12
    with pytest.raises(ConfigurationError):
        lay.ds_dlambda(5)


def test_psd_rank_and_pseudo_logdet():
    lay, D1, D2 = layout()
    S = lay.s_lambda([1.5, 0.2])
    np.testing.assert_array_equal(S, S.T)
    assert np.linalg.eigvalsh(S)[0] >= -1e-12
    assert [b.rank for b in lay.blocks] == [3, 2]
    ev = np.linalg.eigvalsh(S)
    assert lay.pseudo_logdet([1.5, 0.2]) == pytest.approx(np.sum(np.log(ev[ev > 1e-9])), rel=1e-9)
    assert lay.pinv_trace([1.5, 0.2], 0) == pytest.approx(
        np.trace(np.linalg.pinv(S) @ lay.ds_dlambda(0)), rel=1e-8)


def test_overlap_rejected():
    with pytest.raises(ConfigurationError):
        PenaltyLayout(4, [PenaltyBlock(np.arange(2), np.eye(2)),
                          PenaltyBlock(np.arange(1, 3), np.eye(2))])
    with pytest.raises(ConfigurationError):
        layout()[0].s_lambda([1.0])
