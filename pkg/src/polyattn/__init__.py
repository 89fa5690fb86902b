"""Subquadratic approximate softmax attention for small head dimension.

Polynomial approximation of exp over the relevant score window, weighted
half-space range sums, attention-loss gradients via oracle calls, and exact
Max-IP / Orthogonal Vectors answers recovered from an attention oracle.
"""

__version__ = "0.1.0"

from .core import (
    AttnParams,
    CountingOracle,
    RankFactorization,
    exact_attention,
    exact_oracle,
    load_matrix,
    max_abs_diff,
    rank_factorize,
    store_matrix,
)
from .exppoly import ExpPoly, build_exp_poly, eval_poly
from .rangesearch import HalfSpace, PartitionTree, RangeIndex, build_index, halfspace_sum
from .attn1d import one_sided_attention, rounding_attention_1d, vector_attention
from .attnd import approx_attention, approx_oracle, low_rank_attention
from .gradient import GradInstance, approx_gradient, exact_gradient, finite_difference_gradient
from .reductions import (
    RowSumEstimate,
    VectorSet,
    estimate_row_sums,
    max_ip,
    ov_large_entries,
    ov_parity,
)

__all__ = [name for name in dir() if not name.startswith("_")]
