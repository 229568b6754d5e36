"""Memory-based sparse scaling layers for CTR ranking models, in numpy."""
from .memory import (
    MemoryBlock,
    MemoryConfig,
    MemoryGradients,
    RetrievalResult,
    aggregate_values,
    combine_topk,
    flat_index,
    memory_backward,
    memory_forward,
    memory_gate,
    query_split,
    score_subkeys,
)
from .numerics import ContractError, LayerNormParams

__version__ = "0.1.0"
