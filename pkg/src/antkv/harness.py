"""Experiment driver used by the CLI: synthetic data generation,
quantization-error evaluation grids, per-token error studies, and the
rope-stats / anchor-sweep analyses."""

import math
import time

import numpy as np
from scipy import stats

from . import kernels
from .anchors import anchor_scores, first_order_attention_delta, k_perturbation_bound, v_perturbation_bound
from .attention import RopeParams, attention_exact, attention_scores
from .cache import CacheConfig, QuantizedKVCache
from .gradients import CalibrationSet, learn_kv_codebooks
from .util import stream_rng
from .vq import bits_per_element, decode_rows, encode_rows, weighted_kmeans
from .errors import NumericalError

__all__ = [
    "generate_qkv",
    "build_calibration",
    "quantized_reconstruction",
    "per_token_errors",
    "eval_point",
    "rope_stats",
    "anchor_sweep",
    "EVAL_SCHEMA_VERSION",
]

EVAL_SCHEMA_VERSION = 1

STRUCTURES = ("gaussian", "clustered", "heavy_hitter")


def generate_qkv(seed, n, d, structure="gaussian", planted=None, clusters=8,
                 cluster_d_sub=8):
    """Deterministic synthetic (Q, K, V, positions) for one head.

    'clustered' plants well-separated sub-vector clusters in K and V;
    'heavy_hitter' plants a few early tokens with outsized attention
    mass (large-norm keys, boosted values)."""
    if structure not in STRUCTURES:
        raise ValueError(f"unknown structure {structure!r}")
    rng = stream_rng(seed, f"gen:{structure}:{n}:{d}")
    Q = rng.standard_normal((n, d))
    K = rng.standard_normal((n, d))
    V = rng.standard_normal((n, d))
    planted_idx = []
    if structure == "clustered":
        groups = d // cluster_d_sub
        centers = 4.0 * rng.standard_normal((clusters, cluster_d_sub))
        for X in (K, V):
            choice = rng.integers(clusters, size=(n, groups))
            sub = centers[choice] + 0.05 * rng.standard_normal(
                (n, groups, cluster_d_sub)
            )
            X[:] = sub.reshape(n, d)
    elif structure == "heavy_hitter":
        count = planted if planted is not None else max(1, n // 100)
        planted_idx = list(range(1, 1 + 2 * count, 2))[:count]
        for j in planted_idx:
            K[j] *= 5.0
            V[j] *= 3.0
    positions = np.arange(n, dtype=np.int64)
    return {
        "Q": Q.astype(np.float32),
        "K": K.astype(np.float32),
        "V": V.astype(np.float32),
        "positions": positions,
        "planted": planted_idx,
    }


def build_calibration(seed, samples, n, d, structure="gaussian", **kw):
    """Calibration set of independent synthetic sequences."""
    calib = CalibrationSet()
    for s in range(samples):
        data = generate_qkv(seed * 1000 + s, n, d, structure, **kw)
        calib.add(data["Q"], data["K"], data["V"], data["positions"])
    return calib


def quantized_reconstruction(K, V, codebook_k, codebook_v, protected):
    """K_hat, V_hat with every non-protected token replaced by its
    quantized reconstruction; the offline analog of the cache state
    right after prefill."""
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    Khat = np.asarray(
        decode_rows(encode_rows(K, codebook_k), codebook_k), dtype=np.float64
    )
    Vhat = np.asarray(
        decode_rows(encode_rows(V, codebook_v), codebook_v), dtype=np.float64
    )
    protected = np.asarray(sorted(protected), dtype=np.int64)
    if protected.size:
        Khat[protected] = K[protected]
        Vhat[protected] = V[protected]
    return Khat, Vhat


def _protected_set(n, anchors, window_size):
    prot = set(int(j) for j in anchors)
    prot.update(range(max(0, n - window_size), n))
    return prot


def per_token_errors(Q, K, V, codebook_k, codebook_v, rope, causal=True,
                     mode="joint"):
    """L1 attention-output error from quantizing one token at a time.

    mode selects which side of the token is quantized: 'joint' replaces
    both its K and V rows, 'k_only' / 'v_only' just one."""
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    n = K.shape[0]
    Kq = np.asarray(decode_rows(encode_rows(K, codebook_k), codebook_k),
                    dtype=np.float64)
    Vq = np.asarray(decode_rows(encode_rows(V, codebook_v), codebook_v),
                    dtype=np.float64)
    base = attention_exact(Q, K, V, rope=rope, causal=causal)
    errors = np.empty(n)
    for j in range(n):
        Kj = K.copy()
        Vj = V.copy()
        if mode in ("joint", "k_only"):
            Kj[j] = Kq[j]
        if mode in ("joint", "v_only"):
            Vj[j] = Vq[j]
        out = attention_exact(Q, Kj, Vj, rope=rope, causal=causal)
        errors[j] = np.abs(out - base).sum()
    return errors


def _rank_agreement(errors, scores, frac=0.01):
    rho = float(stats.spearmanr(errors, scores).statistic)
    n = len(errors)
    k = max(1, math.ceil(frac * n))
    top_err = set(np.argsort(-errors, kind="stable")[:k])
    top_score = set(np.argsort(-scores, kind="stable")[:k])
    return {"spearman": rho, "topk_overlap": len(top_err & top_score) / k,
            "topk": k}


def eval_point(data, codebook_k, codebook_v, anchor_fraction, window_size=0,
               policy="by_sum", seed=0, controls=0, per_token_mode="joint",
               compute_per_token=True, wiring="prefill", decode_steps=32):
    """One grid point of the evaluation: quantize via the prefill path
    and record errors, Theorem-style bounds, the first-order residual,
    AnS rank agreement, and random-anchor control errors."""
    t0 = time.perf_counter()
    Q = np.asarray(data["Q"], dtype=np.float64)
    K = np.asarray(data["K"], dtype=np.float64)
    V = np.asarray(data["V"], dtype=np.float64)
    positions = data["positions"]
    n, d = K.shape
    rope = RopeParams(positions=positions)
    config = CacheConfig(vq=codebook_k.config, anchor_fraction=anchor_fraction,
                         window_size=window_size, policy=policy)
    cache = QuantizedKVCache(config, codebook_k, codebook_v)
    cache.prefill(Q, K, V, positions)

    exact = attention_exact(Q, K, V, rope=rope, causal=True)
    approx = cache.attention_from_cache(Q)
    err = float(np.abs(approx - exact).sum())

    Khat, Vhat = cache.dequantize()
    dK = Khat.astype(np.float64) - K
    dV = Vhat.astype(np.float64) - V
    A = attention_scores(Q, K, rope=rope, causal=True)
    v_rep = v_perturbation_bound(A, dV)
    k_rep = k_perturbation_bound(Q, K, V, dK, rope=rope, causal=True)
    fo = first_order_attention_delta(Q, K, V, dK, rope=rope, causal=True)
    exact_k_delta = attention_exact(Q, K + dK, V, rope=rope, causal=True) - exact
    denom = max(float(np.abs(exact_k_delta).sum()), 1e-300)
    fo_residual = float(np.abs(exact_k_delta - fo).sum()) / denom

    q_norms = np.sqrt((Q ** 2).sum(axis=1))
    scores = anchor_scores(A, q_norms)
    record = {
        "vq": codebook_k.config.notation,
        "bits_per_element": float(bits_per_element(codebook_k.config)),
        "anchor_fraction": anchor_fraction,
        "window_size": window_size,
        "policy": policy,
        "seed": seed,
        "n": n,
        "d": d,
        "wiring": wiring,
        "attention_l1_error": err,
        "v_bound": v_rep.bound_value,
        "k_bound": k_rep.bound_value,
        "first_order_residual": fo_residual,
    }
    for name, val in record.items():
        if isinstance(val, float) and not math.isfinite(val):
            raise NumericalError(f"non-finite value for {name}")

    if compute_per_token:
        errors = per_token_errors(Q, K, V, codebook_k, codebook_v, rope,
                                  mode=per_token_mode)
        if per_token_mode == "k_only":
            ranking = scores.ans_k
        elif per_token_mode == "v_only":
            ranking = scores.ans_v
        else:
            ranking = scores.ans_k + scores.ans_v
        record["ans_rank_agreement"] = _rank_agreement(errors, ranking)
        record["per_token_mode"] = per_token_mode

    if controls > 0:
        budget = config.budget_for(n)
        rng = stream_rng(seed, "controls")
        ctl_errors = []
        for _ in range(controls):
            anchors = rng.choice(n, size=budget, replace=False)
            prot = _protected_set(n, anchors, window_size)
            Kc, Vc = quantized_reconstruction(K, V, codebook_k, codebook_v, prot)
            out = attention_exact(Q, Kc, Vc, rope=rope, causal=True)
            ctl_errors.append(float(np.abs(out - exact).sum()))
        record["random_control"] = {
            "trials": controls,
            "mean": float(np.mean(ctl_errors)),
            "errors": ctl_errors,
        }

    if wiring == "decode":
        record["decode_l1_error"] = _decode_wiring_error(
            Q, K, V, positions, config, codebook_k, codebook_v,
            steps=min(decode_steps, n - 1),
        )
    record["runtime_ms"] = (time.perf_counter() - t0) * 1e3
    return record


def _decode_wiring_error(Q, K, V, positions, config, codebook_k, codebook_v,
                         steps):
    """LongBench-style wiring: prefill outputs use full precision, only
    decoding reads the quantized cache.  Returns the summed L1 error of
    the decode-step outputs versus full-precision attention."""
    n = K.shape[0]
    split = n - steps
    cache = QuantizedKVCache(config, codebook_k, codebook_v)
    cache.prefill(Q[:split], K[:split], V[:split], positions[:split])
    rope = RopeParams(positions=positions)
    exact = attention_exact(Q, K, V, rope=rope, causal=True)
    total = 0.0
    for t in range(split, n):
        out = cache.decode_step(Q[t], K[t], V[t], int(positions[t]))
        total += float(np.abs(out - exact[t]).sum())
    return total


def rope_stats(K, positions, vq_config, seed, theta_base=10000.0,
               max_iter=50):
    """Cluster pre- and post-RoPE key sub-vectors with the same budget
    and report intra-cluster variance and reconstruction error for each."""
    from .attention import apply_rope

    K = np.asarray(K, dtype=np.float64)
    n, d = K.shape
    rope = RopeParams(positions=positions, theta_base=theta_base)
    variants = {"pre_rope": K, "post_rope": apply_rope(K, rope)}
    out = {"n": n, "d": d, "d_sub": vq_config.d_sub, "m": vq_config.m,
           "seed": seed}
    for name, X in variants.items():
        pts = X.reshape(-1, vq_config.d_sub)
        w = np.ones(pts.shape[0])
        res = weighted_kmeans(pts, w, vq_config.m, seed=seed,
                              max_iter=max_iter)
        idx, d2 = kernels.assign_nearest(
            pts, res.codebook.centroids.astype(np.float64)
        )
        recon_err = float(d2.mean())
        var = 0.0
        live = 0
        for c in range(vq_config.m):
            members = pts[idx == c]
            if len(members) > 0:
                var += float(((members - members.mean(axis=0)) ** 2)
                             .sum(axis=1).mean())
                live += 1
        out[name] = {
            "mean_intra_cluster_variance": var / max(live, 1),
            "mean_reconstruction_error": recon_err,
            "objective": res.objective_trace[-1],
            "iterations": res.n_iter,
        }
    return out


def anchor_sweep(fractions, seeds, vq_configs, n=256, d=64, window_size=0,
                 structure="heavy_hitter", calib_samples=4, calib_n=128,
                 kmeans_iter=25):
    """Self-generating sweep: per seed, train codebooks on calibration
    data and evaluate a fresh sequence across anchor fractions.

    Returns {records, per_fraction_mean} with one record per
    (fraction, vq config, seed)."""
    if not fractions:
        raise ValueError("empty fraction list")
    records = []
    for vq in vq_configs:
        for seed in seeds:
            calib = build_calibration(seed + 1, calib_samples, calib_n, d,
                                      structure=structure)
            books = learn_kv_codebooks(calib, vq, seed=seed,
                                       max_iter=kmeans_iter)
            cb_k = books["codebook_k"].codebook
            cb_v = books["codebook_v"].codebook
            data = generate_qkv(seed, n, d, structure)
            for frac in fractions:
                rec = eval_point(data, cb_k, cb_v, anchor_fraction=frac,
                                 window_size=window_size, seed=seed,
                                 compute_per_token=False)
                records.append(rec)
    per_fraction = {}
    for frac in fractions:
        errs = [r["attention_l1_error"] for r in records
                if r["anchor_fraction"] == frac]
        per_fraction[str(frac)] = float(np.mean(errs))
    return {
        "schema_version": EVAL_SCHEMA_VERSION,
        "records": records,
        "per_fraction_mean_error": per_fraction,
    }
