"""Compiled backend vs pure numpy fallback agreement."""

import numpy as np
import pytest

from antkv.kernels import pure

compiled = pytest.importorskip("antkv._ckernels")


@pytest.mark.parametrize("blocks", [(7, 5), (64, 64), (1, 1)])
@pytest.mark.parametrize("causal", [False, True])
def test_flash_aux_backends_agree(rng, blocks, causal):
    n, d = 33, 10
    Q, K, V = (rng.standard_normal((n, d)) for _ in range(3))
    Qs = Q / np.sqrt(d)
    Op, Lp, Mp = pure.flash_aux(Qs, K, V, *blocks, causal)
    Oc, Lc, Mc = compiled.flash_aux(Qs, K, V, *blocks, causal)
    assert np.abs(Op - Oc).max() < 1e-12
    assert np.abs(Lp - Lc).max() < 1e-11
    assert np.abs(Mp - Mc).max() < 1e-13


@pytest.mark.parametrize("causal", [False, True])
def test_ans_blocked_backends_agree(rng, causal):
    n, d = 41, 8
    Q, K, V = (rng.standard_normal((n, d)) for _ in range(3))
    Qs = Q / np.sqrt(d)
    _, L, M = pure.flash_aux(Qs, K, V, n, n, causal)
    qn = np.sqrt((Q ** 2).sum(axis=1))
    kp, vp = pure.ans_blocked(Qs, K, M, L, qn, 5, 9, causal)
    kc, vc = compiled.ans_blocked(Qs, K, M, L, qn, 5, 9, causal)
    assert np.abs(kp - kc).max() < 1e-12
    assert np.abs(vp - vc).max() < 1e-12


def test_assign_nearest_backends_agree(rng):
    X = rng.standard_normal((200, 6))
    C = rng.standard_normal((17, 6))
    ip, dp = pure.assign_nearest(X, C)
    ic, dc = compiled.assign_nearest(X, C)
    assert np.array_equal(ip, ic)
    assert np.abs(dp - dc).max() < 1e-12


def test_assign_nearest_tie_breaks_low_index_both_backends():
    C = np.array([[0.0], [2.0], [0.0], [2.0]])
    X = np.array([[1.0]])  # equidistant from every centroid
    for impl in (pure, compiled):
        idx, d2 = impl.assign_nearest(X, C)
        assert idx[0] == 0
        assert d2[0] == 1.0
