"""Sub-vector (product-style) quantization: codebooks, weighted k-means
training, encode/decode, and bit accounting.

Centroids are canonically float32 (the on-disk precision) so that a
serialization round trip never changes encode results; distance math is
done in float64.
"""

import json
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import kernels
from .errors import FormatError

__all__ = [
    "VqConfig",
    "Codebook",
    "KMeansResult",
    "weighted_kmeans",
    "encode_token",
    "encode_rows",
    "decode_token",
    "decode_rows",
    "bits_per_element",
    "save_codebook",
    "load_codebook",
]


@dataclass(frozen=True)
class VqConfig:
    """Sub-vector length and centroid count (the dNmM pair)."""

    d_sub: int
    m: int

    def __post_init__(self):
        if self.d_sub < 1:
            raise ValueError("d_sub must be >= 1")
        if not 1 <= self.m <= 2 ** 24:
            raise ValueError("m must be in [1, 2^24]")

    @property
    def index_bits(self):
        return max(1, math.ceil(math.log2(self.m))) if self.m > 1 else 1

    @property
    def is_padded(self):
        """True when m is not a power of two (indices waste code space)."""
        return self.m & (self.m - 1) != 0

    @property
    def notation(self):
        return f"d{self.d_sub}m{self.m}"

    @classmethod
    def from_notation(cls, text):
        """Parse the dNmM shorthand, e.g. 'd8m256'."""
        import re

        match = re.fullmatch(r"d(\d+)m(\d+)", text.strip())
        if not match:
            raise ValueError(f"cannot parse VQ notation {text!r}")
        return cls(d_sub=int(match.group(1)), m=int(match.group(2)))

    def groups_for(self, d):
        if d % self.d_sub != 0:
            raise ValueError(f"d={d} not divisible by d_sub={self.d_sub}")
        return d // self.d_sub


@dataclass
class Codebook:
    """Learned centroid dictionary shared across sub-vector positions."""

    config: VqConfig
    centroids: np.ndarray
    groups: int = 1
    seed: int = 0

    def __post_init__(self):
        C = np.asarray(self.centroids, dtype=np.float32)
        if C.shape != (self.config.m, self.config.d_sub):
            raise ValueError(
                f"centroids shape {C.shape} != ({self.config.m}, {self.config.d_sub})"
            )
        if not np.all(np.isfinite(C)):
            raise ValueError("non-finite centroids")
        self.centroids = C


@dataclass
class KMeansResult:
    codebook: Codebook
    objective_trace: list = field(default_factory=list)
    n_iter: int = 0
    padded_init: bool = False


def bits_per_element(config: VqConfig):
    """ceil(log2 m) / d_sub as an exact Fraction.

    Non-power-of-two m still pays ceil(log2 m) bits per index; such
    configs report is_padded=True."""
    if config.is_padded:
        warnings.warn(
            f"m={config.m} is not a power of two; indices are padded to "
            f"{config.index_bits} bits",
            stacklevel=2,
        )
    return Fraction(config.index_bits, config.d_sub)


def _kmeans_pp_init(X, weights, m, rng):
    """Weighted k-means++ seeding: first center sampled with probability
    proportional to the weights, later ones proportional to w * D^2."""
    n = X.shape[0]
    centers = np.empty((m, X.shape[1]), dtype=np.float64)
    probs = weights / weights.sum()
    first = rng.choice(n, p=probs)
    centers[0] = X[first]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, m):
        scores = weights * d2
        total = scores.sum()
        if total <= 0:
            pick = int(rng.integers(n))
        else:
            pick = rng.choice(n, p=scores / total)
        centers[c] = X[pick]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(axis=1))
    return centers


def weighted_kmeans(points, weights, m, seed, max_iter=100, tol=1e-10,
                    init_centroids=None):
    """Lloyd iterations minimizing sum_j w_j ||x_j - c(x_j)||^2.

    Assignments are unweighted nearest-centroid; weights enter the
    centroid update and the objective.  Deterministic given seed.  When
    m exceeds the point count, surplus centroids are seeded from
    perturbed duplicates and the result carries padded_init=True.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("points must be a nonempty 2-d array")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (X.shape[0],):
        raise ValueError("weights length must match point count")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if not np.any(w > 0):
        raise ValueError("at least one weight must be positive")
    n, d = X.shape
    rng = np.random.default_rng(seed)

    padded = False
    if init_centroids is not None:
        C = np.asarray(init_centroids, dtype=np.float64).copy()
        if C.shape != (m, d):
            raise ValueError("init_centroids shape mismatch")
    elif m > n:
        padded = True
        scale = max(np.abs(X).max(), 1.0)
        C = np.empty((m, d))
        C[:n] = X
        extra = np.tile(X, (m // n + 1, 1))[: m - n]
        C[n:] = extra + rng.normal(scale=1e-6 * scale, size=(m - n, d))
    else:
        C = _kmeans_pp_init(X, w, m, rng)

    trace = []
    prev_idx = None
    it = 0
    for it in range(1, max_iter + 1):
        idx, d2 = kernels.assign_nearest(X, C)
        obj = float((w * d2).sum())
        trace.append(obj)
        # centroid update: weighted means per cluster
        wsum = np.bincount(idx, weights=w, minlength=m)
        csum = np.zeros((m, d))
        np.add.at(csum, idx, w[:, None] * X)
        live = wsum > 0
        C_new = C.copy()
        C_new[live] = csum[live] / wsum[live, None]
        # empty-cluster repair: move each empty centroid onto the point
        # with the largest remaining weighted distance
        empties = np.flatnonzero(~live)
        if empties.size:
            wd2 = w * d2
            for e in empties:
                far = int(np.argmax(wd2))
                C_new[e] = X[far]
                wd2[far] = -1.0
        converged = prev_idx is not None and np.array_equal(idx, prev_idx)
        small_step = len(trace) >= 2 and trace[-2] - trace[-1] < tol
        C = C_new
        prev_idx = idx
        if converged or small_step:
            break

    cb = Codebook(
        config=VqConfig(d_sub=d, m=m),
        centroids=C.astype(np.float32),
        groups=1,
        seed=seed,
    )
    return KMeansResult(codebook=cb, objective_trace=trace, n_iter=it,
                        padded_init=padded)


def _split_rows(X, d_sub):
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if d % d_sub != 0:
        raise ValueError(f"d={d} not divisible by d_sub={d_sub}")
    return X.reshape(n * (d // d_sub), d_sub)


def encode_rows(X, codebook: Codebook):
    """Encode every row of an n x d matrix; returns (n, d/d_sub) codes."""
    d_sub = codebook.config.d_sub
    n = np.asarray(X).shape[0]
    pts = _split_rows(X, d_sub)
    idx, _ = kernels.assign_nearest(pts, codebook.centroids.astype(np.float64))
    return idx.reshape(n, -1)


def encode_token(row, codebook: Codebook):
    """Nearest-centroid codes for one d-vector; ties take the lowest index."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError("encode_token expects a 1-d row")
    return encode_rows(row[None, :], codebook)[0]


def decode_rows(codes, codebook: Codebook):
    codes = np.asarray(codes)
    if np.any(codes < 0) or np.any(codes >= codebook.config.m):
        raise ValueError("code index out of range")
    n = codes.shape[0]
    return codebook.centroids[codes.reshape(-1)].reshape(n, -1)


def decode_token(codes, codebook: Codebook):
    """Concatenate looked-up centroids back into a d-vector (float32)."""
    codes = np.asarray(codes)
    if codes.ndim != 1:
        raise ValueError("decode_token expects a 1-d code vector")
    return decode_rows(codes[None, :], codebook)[0]


FORMAT_VERSION = 1


def save_codebook(codebook: Codebook, json_path):
    """Write the JSON descriptor plus a raw little-endian f32 binary.

    Round trips are bit-exact because centroids are float32 in memory."""
    json_path = Path(json_path)
    bin_path = json_path.with_suffix(".bin")
    doc = {
        "format_version": FORMAT_VERSION,
        "d_sub": codebook.config.d_sub,
        "m": codebook.config.m,
        "groups": codebook.groups,
        "seed": codebook.seed,
        "centroids_file": bin_path.name,
    }
    json_path.write_text(json.dumps(doc, indent=2) + "\n")
    bin_path.write_bytes(
        np.ascontiguousarray(codebook.centroids, dtype="<f4").tobytes()
    )
    return json_path, bin_path


def load_codebook(json_path):
    json_path = Path(json_path)
    try:
        doc = json.loads(json_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read codebook {json_path}: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported codebook format_version in {json_path}")
    cfg = VqConfig(d_sub=doc["d_sub"], m=doc["m"])
    raw = (json_path.parent / doc["centroids_file"]).read_bytes()
    expect = cfg.m * cfg.d_sub * 4
    if len(raw) != expect:
        raise FormatError(
            f"centroid payload is {len(raw)} bytes, expected {expect}"
        )
    C = np.frombuffer(raw, dtype="<f4").reshape(cfg.m, cfg.d_sub)
    return Codebook(config=cfg, centroids=C.copy(), groups=doc["groups"],
                    seed=doc.get("seed", 0))
