"""Online-stage mathematics: anchor scores (direct and blocked),
anchor selection, and the attention perturbation bounds with their
first-order oracle.

Scores follow AnS(V_j) = sum_i A_ij and
AnS(K_j) = sum_i A_ij (1 - A_ij) ||Q_i||_2; the bounds are the exact
V inequality and the first-order K inequality they derive from.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .attention import AttentionAux, apply_rope, attention_exact, attention_scores, _check_matrix

__all__ = [
    "AnchorScores",
    "AnchorSelection",
    "PerturbationBoundReport",
    "anchor_scores",
    "anchor_scores_blocked",
    "select_anchors",
    "v_perturbation_bound",
    "k_perturbation_bound",
    "first_order_attention_delta",
]

POLICIES = ("by_k", "by_v", "by_sum")


@dataclass
class AnchorScores:
    ans_k: np.ndarray
    ans_v: np.ndarray


@dataclass
class AnchorSelection:
    indices: np.ndarray
    budget: int
    policy: str


@dataclass
class PerturbationBoundReport:
    bound_value: float
    actual_error: float
    per_token_terms: np.ndarray
    outside_first_order_regime: bool = field(default=False)


def anchor_scores(A, q_norms):
    """Direct double-sum scores from a materialized attention matrix."""
    A = np.asarray(A, dtype=np.float64)
    q_norms = np.asarray(q_norms, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError("A must be 2-d")
    if q_norms.shape != (A.shape[0],):
        raise ValueError("q_norms length must match the query count")
    ans_v = A.sum(axis=0)
    ans_k = (A * (1.0 - A) * q_norms[:, None]).sum(axis=0)
    return AnchorScores(ans_k=ans_k, ans_v=ans_v)


def anchor_scores_blocked(Q, K, V, aux: AttentionAux, block_q, block_k,
                          rope=None, causal=False):
    """Blockwise scores reconstructed from the attention auxiliaries.

    Rebuilds per-block A_ij = exp(S_ij - M_i) / L_i from the (M, L)
    produced by flash_attention_aux on the same inputs."""
    Q = _check_matrix(Q, "Q")
    K = _check_matrix(K, "K")
    if aux.L.shape != (Q.shape[0],) or aux.M.shape != (Q.shape[0],):
        raise ValueError("aux statistics do not match the query count")
    if block_q < 1 or block_k < 1:
        raise ValueError("block sizes must be >= 1")
    if rope is not None:
        Qr = apply_rope(Q, rope)
        Kr = apply_rope(K, rope)
    else:
        Qr, Kr = Q, K
    Qs = Qr / np.sqrt(Q.shape[1])
    ans_k, ans_v = kernels.ans_blocked(
        Qs, Kr, aux.M, aux.L, aux.q_norms, block_q, block_k, causal
    )
    return AnchorScores(ans_k=ans_k, ans_v=ans_v)


def _ranked(scores):
    # stable top-k: descending score, ties broken by lower token index
    n = len(scores)
    return np.lexsort((np.arange(n), -np.asarray(scores, dtype=np.float64)))


def select_anchors(scores: AnchorScores, budget, policy="by_sum"):
    """Top-budget tokens under the policy, ties to the lower index.

    'by_sum' splits the budget evenly between the K and V rankings and
    de-duplicates, filling any shortfall from the V ranking."""
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}")
    n = len(scores.ans_v)
    budget = int(np.clip(budget, 0, n))
    if policy == "by_k":
        chosen = _ranked(scores.ans_k)[:budget]
    elif policy == "by_v":
        chosen = _ranked(scores.ans_v)[:budget]
    else:
        by_k = _ranked(scores.ans_k)
        by_v = _ranked(scores.ans_v)
        picked = list(by_k[: budget // 2])
        seen = set(picked)
        for j in by_v:
            if len(picked) >= budget:
                break
            if j not in seen:
                picked.append(j)
                seen.add(j)
        # dedup shortfall: top off from the K ranking
        for j in by_k:
            if len(picked) >= budget:
                break
            if j not in seen:
                picked.append(j)
                seen.add(j)
        chosen = np.asarray(picked, dtype=np.int64)
    return AnchorSelection(
        indices=np.sort(np.asarray(chosen, dtype=np.int64)),
        budget=budget,
        policy=policy,
    )


def v_perturbation_bound(A, deltaV):
    """Exact inequality ||A dV||_L1 <= sum_j ||A_:,j||_1 ||dV_j||_1."""
    A = np.asarray(A, dtype=np.float64)
    dV = np.asarray(deltaV, dtype=np.float64)
    if dV.shape[0] != A.shape[1]:
        raise ValueError("deltaV token count must match the key count")
    col_mass = np.abs(A).sum(axis=0)
    row_l1 = np.abs(dV).sum(axis=1)
    terms = col_mass * row_l1
    actual = float(np.abs(A @ dV).sum())
    return PerturbationBoundReport(
        bound_value=float(terms.sum()),
        actual_error=actual,
        per_token_terms=terms,
    )


def k_perturbation_bound(Q, K, V, deltaK, rope=None, causal=False):
    """First-order bound on the attention change under a key perturbation:
    sum_j sum_i ||(V^T Diag(A_i)(I - e A_i))_:,j||_1 ||Q_i||_2 ||dK_j||_1.

    Column j of V^T Diag(A_i)(I - e A_i) collapses to
    A_ij (V_j - (A V)_i), which keeps the computation O(n d) per query.
    actual_error is the exact attention difference; perturbations with
    ||dK||_1 > 0.5 ||K||_1 are flagged as outside the first-order regime
    but still computed.
    """
    Q = _check_matrix(Q, "Q")
    K = _check_matrix(K, "K")
    V = _check_matrix(V, "V")
    dK = np.asarray(deltaK, dtype=np.float64)
    if dK.shape != K.shape:
        raise ValueError("deltaK shape must match K")
    A = attention_scores(Q, K, rope=rope, causal=causal)
    AV = A @ V
    q_norms = np.sqrt((Q ** 2).sum(axis=1))
    factor = np.zeros(K.shape[0])
    for i in range(Q.shape[0]):
        col_l1 = np.abs(V - AV[i]).sum(axis=1)
        factor += A[i] * col_l1 * q_norms[i]
    dk_l1 = np.abs(dK).sum(axis=1)
    terms = factor * dk_l1
    exact = attention_exact(Q, K + dK, V, rope=rope, causal=causal)
    actual = float(np.abs(exact - AV).sum())
    outside = np.abs(dK).sum() > 0.5 * np.abs(K).sum()
    return PerturbationBoundReport(
        bound_value=float(terms.sum()),
        actual_error=actual,
        per_token_terms=terms,
        outside_first_order_regime=bool(outside),
    )


def first_order_attention_delta(Q, K, V, deltaK, rope=None, causal=False):
    """(A . Y) V with X = Q~ (dK~)^T / sqrt(d) and
    Y_ij = X_ij - sum_s A_is X_is: the softmax directional derivative
    applied to the key-logit perturbation."""
    Q = _check_matrix(Q, "Q")
    K = _check_matrix(K, "K")
    V = _check_matrix(V, "V")
    dK = np.asarray(deltaK, dtype=np.float64)
    if dK.shape != K.shape:
        raise ValueError("deltaK shape must match K")
    A = attention_scores(Q, K, rope=rope, causal=causal)
    if rope is not None:
        Qr = apply_rope(Q, rope)
        dKr = apply_rope(dK, rope)
    else:
        Qr, dKr = Q, dK
    X = (Qr @ dKr.T) / np.sqrt(Q.shape[1])
    Y = X - (A * X).sum(axis=1, keepdims=True)
    return (A * Y) @ V
