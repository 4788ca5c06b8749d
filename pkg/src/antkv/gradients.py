"""Offline stage: analytic gradients of a scalar loss through attention
and gradient-weighted codebook training.

The desk-scale surrogate loss is L = <G, Attn(Q, K, V)> with G a seeded
standard normal, which exercises the same gradient pathways as a model
loss without a full transformer stack.
"""

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    RopeParams,
    apply_rope,
    attention_scores,
    rope_backward,
    _check_matrix,
)
from .util import stream_rng
from .vq import KMeansResult, weighted_kmeans

__all__ = [
    "KvGradients",
    "CalibrationSet",
    "attention_backward",
    "gradient_token_weights",
    "learn_kv_codebooks",
]


@dataclass
class KvGradients:
    """Per-row gradients of the loss with respect to K and V."""

    dK: np.ndarray
    dV: np.ndarray


@dataclass
class CalibrationSet:
    """(Q, K, V, positions) head tensors drawn from a data source."""

    samples: list = field(default_factory=list)

    def add(self, Q, K, V, positions):
        Q = np.asarray(Q, dtype=np.float64)
        if self.samples and Q.shape[1] != self.samples[0][0].shape[1]:
            raise ValueError("inconsistent head dimension across samples")
        self.samples.append(
            (Q, np.asarray(K, dtype=np.float64),
             np.asarray(V, dtype=np.float64),
             np.asarray(positions, dtype=np.int64))
        )

    def __len__(self):
        return len(self.samples)


def attention_backward(Q, K, V, dO, rope=None, causal=False):
    """Gradients of L = <dO, Attn(Q, K, V)> with respect to K and V.

    dV = A^T dO; dK goes through the softmax Jacobian
    (row i: A_i * (g_i - A_i . g_i)), the 1/sqrt(d) scale, and the
    inverse RoPE rotation when rope is supplied.
    """
    Q = _check_matrix(Q, "Q")
    K = _check_matrix(K, "K")
    V = _check_matrix(V, "V")
    dO = _check_matrix(dO, "dO")
    if dO.shape != (Q.shape[0], V.shape[1]):
        raise ValueError("dO shape must match the attention output")
    A = attention_scores(Q, K, rope=rope, causal=causal)
    dV = A.T @ dO
    G = dO @ V.T
    dS = A * (G - (A * G).sum(axis=1, keepdims=True))
    Qr = apply_rope(Q, rope) if rope is not None else Q
    dKr = (dS.T @ Qr) / np.sqrt(Q.shape[1])
    dK = rope_backward(dKr, rope) if rope is not None else dKr
    return KvGradients(dK=dK, dV=dV)


def gradient_token_weights(grads, d_sub, epsilon_floor=1e-8):
    """Clustering weight per sub-vector: floor + squared gradient norm.

    Returns an (n, d/d_sub) array aligned with the sub-vector grid."""
    if epsilon_floor < 0:
        raise ValueError("epsilon_floor must be nonnegative")
    G = np.asarray(grads, dtype=np.float64)
    n, d = G.shape
    if d % d_sub != 0:
        raise ValueError(f"d={d} not divisible by d_sub={d_sub}")
    sq = (G.reshape(n, d // d_sub, d_sub) ** 2).sum(axis=2)
    return epsilon_floor + sq


def learn_kv_codebooks(calib: CalibrationSet, config, seed,
                       loss_spec="gaussian_inner", epsilon_floor=1e-8,
                       max_iter=100, causal=True):
    """Train the pre-RoPE K codebook and the V codebook on gradient
    weights derived from the surrogate loss.

    Returns a dict with 'codebook_k', 'codebook_v' (KMeansResult) and a
    JSON-serializable 'report'.
    """
    if len(calib) == 0:
        raise ValueError("empty calibration set")
    if loss_spec != "gaussian_inner":
        raise ValueError(f"unknown loss_spec {loss_spec!r}")
    d = calib.samples[0][0].shape[1]
    d_sub = config.d_sub
    if d % d_sub != 0:
        raise ValueError(f"d={d} not divisible by d_sub={d_sub}")

    k_points, k_weights = [], []
    v_points, v_weights = [], []
    loss_rng = stream_rng(seed, "surrogate_loss")
    for Q, K, V, positions in calib.samples:
        rope = RopeParams(positions=positions)
        G = loss_rng.standard_normal(size=(Q.shape[0], V.shape[1]))
        grads = attention_backward(Q, K, V, G, rope=rope, causal=causal)
        for X, gX, pts, wts in (
            (K, grads.dK, k_points, k_weights),
            (V, grads.dV, v_points, v_weights),
        ):
            pts.append(X.reshape(-1, d_sub))
            wts.append(
                gradient_token_weights(gX, d_sub, epsilon_floor).reshape(-1)
            )

    results = {}
    for name, pts, wts in (
        ("codebook_k", k_points, k_weights),
        ("codebook_v", v_points, v_weights),
    ):
        X = np.concatenate(pts, axis=0)
        w = np.concatenate(wts, axis=0)
        sub_seed = int(stream_rng(seed, name).integers(2 ** 31))
        res: KMeansResult = weighted_kmeans(
            X, w, config.m, seed=sub_seed, max_iter=max_iter
        )
        res.codebook.groups = d // d_sub
        results[name] = res

    report = {
        "seed": seed,
        "samples": len(calib),
        "d_sub": d_sub,
        "m": config.m,
        "codebooks": {
            name: {
                "objective_trace": res.objective_trace,
                "iterations": res.n_iter,
                "padded_init": res.padded_init,
            }
            for name, res in results.items()
        },
        "weight_stats": {
            "k": _weight_stats(np.concatenate(k_weights)),
            "v": _weight_stats(np.concatenate(v_weights)),
        },
    }
    results["report"] = report
    return results


def _weight_stats(w):
    return {
        "min": float(w.min()),
        "max": float(w.max()),
        "mean": float(w.mean()),
    }
