"""Three-branch gated sparse attention (compression, selection, sliding
window) with grouped-query attention, a dense oracle, and analysis tools."""

from .analysis import (
    CostReport,
    GateStats,
    SinkReport,
    attention_budget,
    attention_fraction,
    attention_maps,
    compute_alphas,
    detect_sinks,
    gate_statistics,
    info_context_length,
    inter_head_similarity,
    profile_branches,
    sink_report,
)
from .branches import (
    CompressedKv,
    OpCounts,
    SelectionResult,
    SparseConfig,
    branch_op_counts,
    compress_blocks,
    compression_attention,
    importance_scores,
    select_top_blocks,
    selection_attention,
    sliding_window_attention,
)
from .dense import HeadLayout, QkvBatch, concat_heads, dense_causal_attention, gqa_group_of_head, split_heads
from .errors import ConfigError, DomainError, EmptySupportError, ShapeError
from .gating import (
    GateParams,
    ModalitySpans,
    gate_backward,
    gate_forward,
    gates_from_queries,
    hybrid_layer_attention,
    nsa_attention,
)
from .tensor import (
    Rng64,
    decode_tensor,
    encode_tensor,
    load_tensor,
    matmul,
    save_tensor,
    seeded_uniform,
    stable_softmax,
)

__version__ = "0.1.0"
