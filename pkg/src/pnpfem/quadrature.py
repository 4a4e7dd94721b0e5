"""Quadrature rules on the reference tetrahedron, in barycentric form.

A rule is a pair ``(points, weights)`` where ``points`` is (Q, 4) barycentric
coordinates and ``weights`` sums to one, so that

    integral_K f dx  ~=  vol(K) * sum_q w_q f(x_q),
    x_q = sum_m points[q, m] * vertex_m.

``TET4`` is the classic symmetric 4-point rule (exact for degree 2) used for
source-term assembly.  Higher orders come from the Grundmann-Moeller family,
which yields rules exact for any odd degree 2s+1; their negative weights are
harmless for the smooth integrands used here.
"""

from __future__ import annotations

import itertools
import math
from functools import lru_cache

import numpy as np

__all__ = ["TET4", "grundmann_moeller", "rule_for_order"]

_A = 0.5854101966249685
_B = 0.1381966011250105
TET4 = (
    np.array(
        [
            [_A, _B, _B, _B],
            [_B, _A, _B, _B],
            [_B, _B, _A, _B],
            [_B, _B, _B, _A],
        ]
    ),
    np.full(4, 0.25),
)


@lru_cache(maxsize=None)
def grundmann_moeller(s: int, dim: int = 3):
    """Grundmann-Moeller rule of degree 2s+1 on the dim-simplex.

    Returns barycentric points and weights normalized to sum to one.
    """
    if s < 0:
        raise ValueError("s must be nonnegative")
    d = 2 * s + 1
    points = []
    weights = []
    for i in range(s + 1):
        denom = d + dim - 2 * i
        w = (
            (-1) ** i
            * 2 ** (-2 * s)
            * denom**d
            / (math.factorial(i) * math.factorial(d + dim - i))
        )
        for k in _compositions(s - i, dim + 1):
            points.append([(2 * kj + 1) / denom for kj in k])
            weights.append(w)
    pts = np.array(points)
    wts = np.array(weights) * math.factorial(dim)  # unit-volume normalization
    return pts, wts


def _compositions(total: int, parts: int):
    """All tuples of `parts` nonnegative integers summing to `total`."""
    for cuts in itertools.combinations(range(total + parts - 1), parts - 1):
        prev = -1
        comp = []
        for c in cuts:
            comp.append(c - prev - 1)
            prev = c
        comp.append(total + parts - 2 - prev)
        yield tuple(comp)


def rule_for_order(order: int):
    """Smallest built-in rule exact for polynomials of the given degree."""
    if order < 0:
        raise ValueError("order must be nonnegative")
    if order <= 2:
        return TET4
    return grundmann_moeller(order // 2)  # degree 2*(order//2)+1 >= order
