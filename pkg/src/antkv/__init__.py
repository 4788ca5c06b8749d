"""Anchor-token-aware vector quantization of attention KV caches.

The package splits into an offline stage (gradient-weighted codebook
learning, :mod:`antkv.gradients`), an online stage (anchor scoring and
selection, :mod:`antkv.anchors`), the quantized cache container
(:mod:`antkv.cache`), and the attention / vector-quantization primitives
they share.  Hot inner loops live in a compiled extension with a pure
numpy fallback; see :mod:`antkv.kernels`.
"""

from .errors import FormatError, NumericalError
from .attention import (
    AttentionAux,
    RopeParams,
    apply_rope,
    attention_exact,
    attention_scores,
    flash_attention_aux,
    softmax_rows,
)
from .vq import (
    Codebook,
    KMeansResult,
    VqConfig,
    bits_per_element,
    decode_token,
    encode_rows,
    encode_token,
    load_codebook,
    save_codebook,
    weighted_kmeans,
)
from .gradients import (
    CalibrationSet,
    KvGradients,
    attention_backward,
    gradient_token_weights,
    learn_kv_codebooks,
)
from .anchors import (
    AnchorScores,
    AnchorSelection,
    PerturbationBoundReport,
    anchor_scores,
    anchor_scores_blocked,
    first_order_attention_delta,
    k_perturbation_bound,
    select_anchors,
    v_perturbation_bound,
)
from .cache import CacheConfig, MemoryReport, QuantizedKVCache
from .io import read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "AnchorScores",
    "AnchorSelection",
    "AttentionAux",
    "CacheConfig",
    "CalibrationSet",
    "Codebook",
    "FormatError",
    "KMeansResult",
    "KvGradients",
    "MemoryReport",
    "NumericalError",
    "PerturbationBoundReport",
    "QuantizedKVCache",
    "RopeParams",
    "VqConfig",
    "anchor_scores",
    "anchor_scores_blocked",
    "apply_rope",
    "attention_backward",
    "attention_exact",
    "attention_scores",
    "bits_per_element",
    "decode_token",
    "encode_rows",
    "encode_token",
    "first_order_attention_delta",
    "flash_attention_aux",
    "gradient_token_weights",
    "k_perturbation_bound",
    "learn_kv_codebooks",
    "load_codebook",
    "read_tensor",
    "save_codebook",
    "write_tensor",
    "select_anchors",
    "softmax_rows",
    "v_perturbation_bound",
    "weighted_kmeans",
]
