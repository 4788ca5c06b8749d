"""Reference attention, rotary embeddings, and blocked attention with
the auxiliary statistics needed for online anchor scoring.

Tensors are stored as 32-bit rows on disk but all arithmetic here runs
in float64; ``attention_exact`` is the correctness oracle for every
blocked and quantized path in the package.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import NumericalError

__all__ = [
    "RopeParams",
    "AttentionAux",
    "softmax_rows",
    "apply_rope",
    "rope_backward",
    "attention_scores",
    "attention_exact",
    "flash_attention_aux",
]


@dataclass(frozen=True)
class RopeParams:
    """Rotary embedding parameters: per-token positions and frequency base."""

    positions: np.ndarray
    theta_base: float = 10000.0

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.int64)
        object.__setattr__(self, "positions", pos)
        if self.theta_base <= 0:
            raise ValueError("theta_base must be positive")
        if pos.ndim != 1:
            raise ValueError("positions must be a 1-d array")
        if np.any(pos < 0):
            raise ValueError("positions must be nonnegative")


@dataclass
class AttentionAux:
    """Blocked-softmax output plus the statistics consumed by Alg-style
    post-hoc score reconstruction: row max M, normalizer L, query norms."""

    O: np.ndarray
    L: np.ndarray
    M: np.ndarray
    q_norms: np.ndarray
    block_q: int = field(default=0)
    block_k: int = field(default=0)


def _check_matrix(X, name, d_even=False):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-d, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise NumericalError(f"non-finite values in {name}")
    if d_even and X.shape[1] % 2 != 0:
        raise ValueError(f"{name} head dimension must be even for RoPE")
    return X


def softmax_rows(M, causal=False):
    """Row softmax with per-row max subtraction; causal masks j > i."""
    M = _check_matrix(M, "logits")
    if causal:
        n_q, n_k = M.shape
        mask = np.arange(n_k)[None, :] > np.arange(n_q)[:, None]
        M = np.where(mask, -np.inf, M)
    m = M.max(axis=1, keepdims=True)
    P = np.exp(M - m)
    return P / P.sum(axis=1, keepdims=True)


def _rope_trig(n, d, params: RopeParams):
    half = d // 2
    freqs = params.theta_base ** (-2.0 * np.arange(half) / d)
    angles = params.positions[:n, None].astype(np.float64) * freqs[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rope(X, params: RopeParams, sign=1.0):
    """Rotate each consecutive channel pair (2i, 2i+1) of row t by
    positions[t] * theta_base**(-2i/d).  Preserves per-row L2 norms.

    sign=-1.0 rotates backwards (the adjoint, used by the RoPE chain
    rule in attention_backward)."""
    X = _check_matrix(X, "X", d_even=True)
    n, d = X.shape
    if len(params.positions) < n:
        raise ValueError("positions shorter than token count")
    cos, sin = _rope_trig(n, d, params)
    sin = sign * sin
    x0 = X[:, 0::2]
    x1 = X[:, 1::2]
    out = np.empty_like(X)
    out[:, 0::2] = x0 * cos - x1 * sin
    out[:, 1::2] = x0 * sin + x1 * cos
    return out


def rope_backward(G, params: RopeParams):
    """Gradient of apply_rope: rotation is orthogonal, so the adjoint is
    the inverse rotation."""
    return apply_rope(G, params, sign=-1.0)


def _rotated(Q, K, rope):
    if rope is not None:
        return apply_rope(Q, rope), apply_rope(K, rope)
    return Q, K


def attention_scores(Q, K, rope=None, causal=False):
    """Softmax(Q~ K~^T / sqrt(d)), optionally RoPE-rotated and causal."""
    Q = _check_matrix(Q, "Q")
    K = _check_matrix(K, "K")
    if Q.shape[1] != K.shape[1]:
        raise ValueError("Q and K head dimensions differ")
    if causal and Q.shape[0] != K.shape[0]:
        raise ValueError("causal attention requires matching Q/K token counts")
    Qr, Kr = _rotated(Q, K, rope)
    logits = (Qr @ Kr.T) / np.sqrt(Q.shape[1])
    return softmax_rows(logits, causal=causal)


def attention_exact(Q, K, V, rope=None, causal=False):
    """Attn(Q, K, V) = Softmax(Q~ K~^T / sqrt(d)) V.

    The unblocked reference; the oracle for the blocked and quantized
    paths."""
    V = _check_matrix(V, "V")
    if V.shape[0] != np.asarray(K).shape[0]:
        raise ValueError("K and V token counts differ")
    A = attention_scores(Q, K, rope=rope, causal=causal)
    return A @ V


def flash_attention_aux(Q, K, V, block_q, block_k, rope=None, causal=False):
    """Blocked attention that also returns (L, M, q_norms) for post-hoc
    anchor-score reconstruction.

    M[i] is the max visible scaled logit of query i, L[i] the softmax
    normalizer at M[i], and q_norms[i] = ||Q_i||_2 (RoPE preserves row
    norms, so pre- and post-rotation norms coincide)."""
    Q = _check_matrix(Q, "Q")
    K = _check_matrix(K, "K")
    V = _check_matrix(V, "V")
    if Q.shape[1] != K.shape[1]:
        raise ValueError("Q and K head dimensions differ")
    if K.shape[0] != V.shape[0]:
        raise ValueError("K and V token counts differ")
    if causal and Q.shape[0] != K.shape[0]:
        raise ValueError("causal attention requires matching Q/K token counts")
    if block_q < 1 or block_k < 1:
        raise ValueError("block sizes must be >= 1")
    Qr, Kr = _rotated(Q, K, rope)
    Qs = Qr / np.sqrt(Q.shape[1])
    O, L, M = kernels.flash_aux(Qs, Kr, V, block_q, block_k, causal)
    q_norms = np.sqrt((Q.astype(np.float64) ** 2).sum(axis=1))
    return AttentionAux(O=O, L=L, M=M, q_norms=q_norms,
                        block_q=block_q, block_k=block_k)
