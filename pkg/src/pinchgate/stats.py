"""Matched-pairs sentence-segment word error (MAPSSWE) significance test.

Each segment (here: one utterance) contributes the difference of the two
systems' error counts; the mean difference is tested against zero with a
normal approximation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

SMALL_SAMPLE = 30


@dataclass(frozen=True)
class MapssweResult:
    z: float
    p: float
    significant: bool
    n: int
    mean_diff: float
    degenerate: bool = False


def normal_two_tailed_p(z):
    """``2 * (1 - Phi(|z|))`` via the complementary error function."""
    if math.isinf(z):
        return 0.0
    return math.erfc(abs(z) / math.sqrt(2.0))


def mapsswe(errors_a, errors_b, alpha=0.05):
    a = np.asarray(errors_a, dtype=np.float64)
    b = np.asarray(errors_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"error lists must have equal length, got {a.shape} and {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("need at least two matched segments")
    if np.any(a < 0) or np.any(b < 0):
        raise ValueError("error counts must be nonnegative")
    if n < SMALL_SAMPLE:
        log.warning("MAPSSWE with %d segments; the normal approximation is rough below %d", n, SMALL_SAMPLE)

    diff = a - b
    mu = float(diff.mean())
    var = float(diff.var(ddof=1))
    if var == 0.0:
        if mu == 0.0:
            return MapssweResult(0.0, 1.0, False, n, mu, degenerate=True)
        z = math.copysign(math.inf, mu)
        return MapssweResult(z, 0.0, True, n, mu, degenerate=True)
    z = mu / math.sqrt(var / n)
    p = normal_two_tailed_p(z)
    return MapssweResult(z, p, p < alpha, n, mu)


def read_error_counts(path):
    """One nonnegative integer per line; blank lines are ignored."""
    counts = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                value = int(line)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: not an integer: {line!r}") from None
            if value < 0:
                raise ValueError(f"{path}:{lineno}: negative error count")
            counts.append(value)
    return counts


def write_error_counts(path, counts):
    with open(path, "w") as fh:
        fh.writelines(f"{int(c)}\n" for c in counts)
