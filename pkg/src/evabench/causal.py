"""Autoregressive EVA via two triangular indicator matrices."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .eva import _report, run_eva
from .exact import AttentionInstance
from .features import RFConfig
from .partition import PartitionSpec
from .report import EstimatorReport


@dataclass(frozen=True)
class CausalMasks:
    """``intra_E[i, j] = 1`` iff key offset i <= query offset j within a block;
    ``inter_P[c, t] = 1`` iff c <= t, where t is the last group left of the block."""

    intra_E: np.ndarray
    inter_P: np.ndarray


def causal_masks(K: int, C: int) -> CausalMasks:
    if K < 1 or C < 0:
        raise ValueError(f"need K >= 1 and C >= 0, got K={K}, C={C}")
    return CausalMasks(np.triu(np.ones((K, K), dtype=np.int8)), np.triu(np.ones((C, C), dtype=np.int8)))


def causal_eva(inst: AttentionInstance, partition: PartitionSpec, cfg: RFConfig, sigma_mode="identity",
               proposal: str = "qk", local_bias=None) -> EstimatorReport:
    """Causal practical EVA.

    Query n sees keys ``m <= n`` of its own block and only groups lying
    entirely to the left of that block; a group that overlaps the block or
    extends past it is masked as a whole. Group coefficients are computed
    once over full groups, as in the non-causal estimator.
    """
    if inst.N != inst.M:
        raise ValueError("causal EVA requires N == M")
    if partition.K < 1:
        raise ValueError("causal EVA needs a local block (K >= 1) so every query sees itself")
    t0 = time.perf_counter_ns()
    masks = causal_masks(partition.K, partition.C)
    out, log_z, layouts, _ = run_eva(inst, partition, cfg, sigma_mode, proposal, local_bias, masks=masks)
    return _report(inst, partition, out, log_z, layouts, t0)
