from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class EstimatorReport:
    """Estimator output plus diagnostics.

    ``Z_estimates`` holds each query's (possibly approximate) normalizer
    ``sum_m exp(logit)``; ``group_betas`` and ``omegas_used`` are empty
    ``(0, d)`` arrays for estimators without groups.
    """

    output: np.ndarray
    Z_estimates: np.ndarray
    group_betas: np.ndarray
    omegas_used: np.ndarray
    wallclock_ns: int = 0
    flop_estimate: int = 0
    peak_bytes_estimate: int = 0
