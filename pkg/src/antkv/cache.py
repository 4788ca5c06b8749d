"""Quantized KV-cache container: prefill with anchor preservation,
autoregressive decode with a full-precision sliding window,
dequantization, memory accounting, and snapshot serialization.

Keys are stored pre-RoPE throughout (anchor rows, window rows, and
codes alike); rotation is applied on read at the stored positions.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import POLICIES, anchor_scores_blocked, select_anchors
from .attention import RopeParams, apply_rope, flash_attention_aux, softmax_rows
from .errors import FormatError
from .util import pack_indices, unpack_indices
from .vq import Codebook, VqConfig, decode_token, encode_token, load_codebook, save_codebook

__all__ = ["CacheConfig", "MemoryReport", "QuantizedKVCache"]

KIND_ANCHOR = "anchor"
KIND_QUANTIZED = "quantized"
KIND_WINDOWED = "windowed"

FORMAT_VERSION = 1


@dataclass(frozen=True)
class CacheConfig:
    """Quantization settings for one cache instance.

    anchor_count, when set, overrides anchor_fraction."""

    vq: VqConfig
    anchor_fraction: float = 0.01
    anchor_count: int = None
    window_size: int = 32
    policy: str = "by_sum"
    theta_base: float = 10000.0
    block_q: int = 64
    block_k: int = 64

    def __post_init__(self):
        if not 0.0 <= self.anchor_fraction <= 1.0:
            raise ValueError("anchor_fraction must be in [0, 1]")
        if self.window_size < 0:
            raise ValueError("window_size must be >= 0")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")

    def budget_for(self, n):
        if self.anchor_count is not None:
            return int(np.clip(self.anchor_count, 0, n))
        return int(np.clip(math.ceil(self.anchor_fraction * n), 0, n))


@dataclass
class MemoryReport:
    payload_bits: int
    codebook_bits: int
    effective_bits_per_element: float
    fp_baseline_bits: int


class QuantizedKVCache:
    """Per-token storage mixing full-precision anchor rows, sub-vector
    code indices, and a full-precision recent-token window."""

    def __init__(self, config: CacheConfig, codebook_k: Codebook,
                 codebook_v: Codebook):
        if codebook_k is None or codebook_v is None:
            raise ValueError("both codebooks are required")
        if codebook_k.config != codebook_v.config:
            raise ValueError("K and V codebooks must share one VqConfig")
        if codebook_k.config != config.vq:
            raise ValueError("codebook config does not match cache config")
        self.config = config
        self.codebook_k = codebook_k
        self.codebook_v = codebook_v
        self.kinds = []
        self.positions = []
        self.k_rows = {}
        self.v_rows = {}
        self.k_codes = {}
        self.v_codes = {}
        self.anchor_indices = np.empty(0, dtype=np.int64)
        self.d = None

    @property
    def token_count(self):
        return len(self.kinds)

    def _rope(self):
        return RopeParams(positions=np.asarray(self.positions, dtype=np.int64),
                          theta_base=self.config.theta_base)

    def prefill(self, Q, K, V, positions):
        """Populate the cache from a prompt and return the attention
        output (computed from the full-precision inputs via the blocked
        path).  Anchors are selected by blocked AnS; all other tokens
        are quantized except the trailing window."""
        if self.kinds:
            raise ValueError("prefill on a non-empty cache")
        K = np.asarray(K, dtype=np.float64)
        V = np.asarray(V, dtype=np.float64)
        n, d = K.shape
        if d % self.config.vq.d_sub != 0:
            raise ValueError("head dimension incompatible with codebook")
        self.d = d
        positions = np.asarray(positions, dtype=np.int64)
        rope = RopeParams(positions=positions, theta_base=self.config.theta_base)
        aux = flash_attention_aux(Q, K, V, self.config.block_q,
                                  self.config.block_k, rope=rope, causal=True)
        scores = anchor_scores_blocked(Q, K, V, aux, self.config.block_q,
                                       self.config.block_k, rope=rope,
                                       causal=True)
        sel = select_anchors(scores, self.config.budget_for(n),
                             policy=self.config.policy)
        anchor_set = set(int(j) for j in sel.indices)
        self.anchor_indices = sel.indices
        K32 = K.astype(np.float32)
        V32 = V.astype(np.float32)
        for j in range(n):
            self.positions.append(int(positions[j]))
            if j in anchor_set:
                self.kinds.append(KIND_ANCHOR)
                self.k_rows[j] = K32[j].copy()
                self.v_rows[j] = V32[j].copy()
            elif j >= n - self.config.window_size:
                self.kinds.append(KIND_WINDOWED)
                self.k_rows[j] = K32[j].copy()
                self.v_rows[j] = V32[j].copy()
            else:
                self.kinds.append(KIND_QUANTIZED)
                self.k_codes[j] = encode_token(K[j], self.codebook_k)
                self.v_codes[j] = encode_token(V[j], self.codebook_v)
        return aux.O

    def _quantize_token(self, j):
        self.k_codes[j] = encode_token(self.k_rows.pop(j).astype(np.float64),
                                       self.codebook_k)
        self.v_codes[j] = encode_token(self.v_rows.pop(j).astype(np.float64),
                                       self.codebook_v)
        self.kinds[j] = KIND_QUANTIZED

    def decode_step(self, q_new, k_new, v_new, position):
        """Append one token, compute its attention output against the
        dequantized cache, then quantize whatever overflows the window.

        The output is computed before eviction, so the new token's own
        contribution is always full precision.  An evicted token is
        promoted to an anchor instead of being quantized while the
        anchor budget for the grown sequence has headroom."""
        if self.positions and position <= max(self.positions):
            raise ValueError("position must exceed all existing positions")
        q_new = np.asarray(q_new, dtype=np.float64)
        if self.d is None:
            self.d = len(k_new)
        j = self.token_count
        self.kinds.append(KIND_WINDOWED)
        self.positions.append(int(position))
        self.k_rows[j] = np.asarray(k_new, dtype=np.float32).copy()
        self.v_rows[j] = np.asarray(v_new, dtype=np.float32).copy()

        Khat, Vhat = self.dequantize()
        rope = self._rope()
        Kr = apply_rope(Khat.astype(np.float64), rope)
        qr = apply_rope(
            q_new[None, :],
            RopeParams(positions=np.asarray([position]),
                       theta_base=self.config.theta_base),
        )
        logits = (qr @ Kr.T) / np.sqrt(self.d)
        A = softmax_rows(logits)
        out = (A @ Vhat.astype(np.float64))[0]

        windowed = [t for t, kind in enumerate(self.kinds)
                    if kind == KIND_WINDOWED]
        while len(windowed) > self.config.window_size:
            evicted = windowed.pop(0)
            if len(self.anchor_indices) < self.config.budget_for(
                    self.token_count):
                # the growing sequence earned another anchor slot; keep
                # the evicted row in full precision instead of coding it
                self.kinds[evicted] = KIND_ANCHOR
                self.anchor_indices = np.sort(
                    np.append(self.anchor_indices, evicted)
                )
            else:
                self._quantize_token(evicted)
        return out

    def dequantize(self):
        """(K_hat pre-RoPE, V_hat) as float32 n x d matrices: anchors and
        window rows exact, quantized rows via centroid lookup."""
        n = self.token_count
        if n == 0:
            raise ValueError("cache is empty")
        Khat = np.empty((n, self.d), dtype=np.float32)
        Vhat = np.empty((n, self.d), dtype=np.float32)
        for j, kind in enumerate(self.kinds):
            if kind == KIND_QUANTIZED:
                Khat[j] = decode_token(self.k_codes[j], self.codebook_k)
                Vhat[j] = decode_token(self.v_codes[j], self.codebook_v)
            else:
                Khat[j] = self.k_rows[j]
                Vhat[j] = self.v_rows[j]
        return Khat, Vhat

    def attention_from_cache(self, Q):
        """Causal attention of Q over the dequantized cache (RoPE applied
        at the stored positions)."""
        Khat, Vhat = self.dequantize()
        rope = self._rope()
        Q = np.asarray(Q, dtype=np.float64)
        Kr = apply_rope(Khat.astype(np.float64), rope)
        Qr = apply_rope(Q, rope)
        logits = (Qr @ Kr.T) / np.sqrt(self.d)
        A = softmax_rows(logits, causal=True)
        return A @ Vhat.astype(np.float64)

    def memory_report(self):
        if self.token_count == 0:
            raise ValueError("cache is empty")
        bits = self.config.vq.index_bits
        groups = self.d // self.config.vq.d_sub
        payload = 0
        for kind in self.kinds:
            if kind == KIND_QUANTIZED:
                payload += 2 * groups * bits
            else:
                payload += 2 * self.d * 32
        codebook_bits = 2 * self.config.vq.m * self.config.vq.d_sub * 32
        denom = 2 * self.token_count * self.d
        return MemoryReport(
            payload_bits=payload,
            codebook_bits=codebook_bits,
            effective_bits_per_element=payload / denom,
            fp_baseline_bits=denom * 32,
        )

    def save(self, out_dir):
        """Snapshot: JSON manifest + binary row/code sections + the two
        codebooks.  Round trips are bit-exact."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        groups = self.d // self.config.vq.d_sub
        bits = self.config.vq.index_bits
        rows = bytearray()
        codes = bytearray()
        for j, kind in enumerate(self.kinds):
            if kind == KIND_QUANTIZED:
                token = list(self.k_codes[j]) + list(self.v_codes[j])
                codes.extend(pack_indices(token, bits))
            else:
                rows.extend(np.ascontiguousarray(self.k_rows[j], dtype="<f4").tobytes())
                rows.extend(np.ascontiguousarray(self.v_rows[j], dtype="<f4").tobytes())
        manifest = {
            "format_version": FORMAT_VERSION,
            "config": {
                "vq": self.config.vq.notation,
                "anchor_fraction": self.config.anchor_fraction,
                "anchor_count": self.config.anchor_count,
                "window_size": self.config.window_size,
                "policy": self.config.policy,
                "theta_base": self.config.theta_base,
                "block_q": self.config.block_q,
                "block_k": self.config.block_k,
            },
            "n": self.token_count,
            "d": self.d,
            "positions": self.positions,
            "kinds": self.kinds,
            "anchor_indices": [int(j) for j in self.anchor_indices],
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        (out_dir / "rows.bin").write_bytes(bytes(rows))
        (out_dir / "codes.bin").write_bytes(bytes(codes))
        save_codebook(self.codebook_k, out_dir / "codebook_k.json")
        save_codebook(self.codebook_v, out_dir / "codebook_v.json")
        return out_dir

    @classmethod
    def load(cls, in_dir):
        in_dir = Path(in_dir)
        try:
            manifest = json.loads((in_dir / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read cache manifest: {exc}") from exc
        if manifest.get("format_version") != FORMAT_VERSION:
            raise FormatError("unsupported cache format_version")
        cfg_doc = manifest["config"]
        config = CacheConfig(
            vq=VqConfig.from_notation(cfg_doc["vq"]),
            anchor_fraction=cfg_doc["anchor_fraction"],
            anchor_count=cfg_doc["anchor_count"],
            window_size=cfg_doc["window_size"],
            policy=cfg_doc["policy"],
            theta_base=cfg_doc["theta_base"],
            block_q=cfg_doc["block_q"],
            block_k=cfg_doc["block_k"],
        )
        cache = cls(
            config,
            load_codebook(in_dir / "codebook_k.json"),
            load_codebook(in_dir / "codebook_v.json"),
        )
        cache.d = manifest["d"]
        cache.kinds = list(manifest["kinds"])
        cache.positions = list(manifest["positions"])
        cache.anchor_indices = np.asarray(manifest["anchor_indices"],
                                          dtype=np.int64)
        d = cache.d
        groups = d // config.vq.d_sub
        bits = config.vq.index_bits
        token_bytes = (2 * groups * bits + 7) // 8
        rows = (in_dir / "rows.bin").read_bytes()
        codes = (in_dir / "codes.bin").read_bytes()
        r_off = 0
        c_off = 0
        for j, kind in enumerate(cache.kinds):
            if kind == KIND_QUANTIZED:
                chunk = codes[c_off:c_off + token_bytes]
                if len(chunk) != token_bytes:
                    raise FormatError("truncated code section")
                both = unpack_indices(chunk, bits, 2 * groups)
                cache.k_codes[j] = both[:groups]
                cache.v_codes[j] = both[groups:]
                c_off += token_bytes
            else:
                span = d * 4
                cache.k_rows[j] = np.frombuffer(rows, dtype="<f4", count=d,
                                                offset=r_off).copy()
                cache.v_rows[j] = np.frombuffer(rows, dtype="<f4", count=d,
                                                offset=r_off + span).copy()
                r_off += 2 * span
        if r_off != len(rows) or c_off != len(codes):
            raise FormatError("trailing bytes in cache binary sections")
        return cache
