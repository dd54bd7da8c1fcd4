"""Scalar bounds for the Fock-scale convergence estimates.

A kernel with norm constants c(n) is integrable on a scale (xi, zeta) up to
time t when sum_n r^n c(n) < inf with r = (1 + sqrt(t xi))(1 + sqrt(t zeta)) / sqrt(xi zeta).
The chronological-product estimate uses r = zeta^(-1/2) + sqrt(t) instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

RATIO_WINDOW = 20
DEFAULT_N_MAX = 10_000


@dataclass(frozen=True)
class NormSequence:
    """Non-negative constants c(n): ``geometric`` c0 q^n, ``factorial`` c0 q^n / n!, or a finite ``table``."""

    kind: str
    c0: float = 1.0
    q: float = 1.0
    table: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("geometric", "factorial", "table"):
            raise ValueError(f"unknown sequence kind {self.kind!r}")
        if self.kind == "table":
            object.__setattr__(self, "table", tuple(float(x) for x in self.table))
            if any(x < 0 for x in self.table):
                raise ValueError("table entries must be non-negative")
        elif self.c0 < 0 or self.q < 0:
            raise ValueError("c0 and q must be non-negative")

    @classmethod
    def geometric(cls, q: float, c0: float = 1.0) -> "NormSequence":
        return cls("geometric", c0, q)

    @classmethod
    def factorial(cls, q: float, c0: float = 1.0) -> "NormSequence":
        return cls("factorial", c0, q)

    @classmethod
    def from_table(cls, values: Sequence[float]) -> "NormSequence":
        return cls("table", table=tuple(values))

    def __call__(self, n: int) -> float:
        if self.kind == "table":
            return self.table[n] if n < len(self.table) else 0.0
        value = self.c0 * self.q**n
        return value / math.factorial(n) if self.kind == "factorial" else value

    def term(self, n: int, ratio: float) -> float:
        """ratio^n c(n), computed in log space so large n does not overflow."""
        if self.kind == "table":
            return ratio**n * self(n) if n < len(self.table) else 0.0
        base = ratio * self.q
        if self.c0 == 0 or (base == 0 and n > 0):
            return 0.0
        log = math.log(self.c0) + (n * math.log(base) if n else 0.0)
        if self.kind == "factorial":
            log -= math.lgamma(n + 1)
        return math.exp(log) if log < 700 else math.inf

    def last_nonzero(self) -> int | None:
        """Index after which every term vanishes, or None for infinite support."""
        if self.kind == "table":
            nz = [i for i, x in enumerate(self.table) if x != 0]
            return nz[-1] if nz else -1
        return -1 if self.c0 == 0 else None

    @property
    def convergence_radius(self) -> float:
        """Radius R of sum c(n) x^n."""
        if self.kind == "geometric" and self.q > 0 and self.c0 > 0:
            return 1.0 / self.q
        return math.inf


@dataclass(frozen=True)
class ScaleParams:
    xi: float
    zeta: float
    t: float = 0.0
    rho: float = 1.0

    def __post_init__(self) -> None:
        if not (self.xi > 0 and self.zeta > 0 and self.rho > 0):
            raise ValueError("xi, zeta and rho must be positive")
        if self.t < 0:
            raise ValueError("t must be non-negative")


@dataclass(frozen=True)
class SeriesResult:
    value: float
    tail_bound: float
    convergent: bool
    terms_used: int
    ratio: float


def scale_ratio(t: float, xi: float, zeta: float) -> float:
    return (1.0 + math.sqrt(t * xi)) * (1.0 + math.sqrt(t * zeta)) / math.sqrt(xi * zeta)


def chronological_ratio(t: float, zeta: float) -> float:
    return 1.0 / math.sqrt(zeta) + math.sqrt(t)


def sum_series(c: NormSequence, ratio: float, n_max: int = DEFAULT_N_MAX, tail_tol: float = 1e-16) -> SeriesResult:
    """Sum ratio^n c(n) with a geometric tail certificate.

    Convergent once the last RATIO_WINDOW term ratios are all at most some
    q_hat < 1 and a_n q_hat / (1 - q_hat) falls below ``tail_tol`` relative to
    the partial sum.  Divergent once every ratio in the window is at least 1
    or a term overflows.  Finite-support sequences stop exactly.
    """
    last = c.last_nonzero()
    total = 0.0
    window: list[float] = []
    prev = None
    n = 0
    for n in range(n_max + 1):
        a = c.term(n, ratio)
        if math.isinf(a):
            return SeriesResult(math.inf, math.inf, False, n + 1, ratio)
        total += a
        if last is not None and n >= last:
            return SeriesResult(total, 0.0, True, n + 1, ratio)
        if prev is not None and prev > 0:
            window.append(a / prev)
            if len(window) > RATIO_WINDOW:
                window.pop(0)
        prev = a
        if len(window) == RATIO_WINDOW:
            q_hat = max(window)
            if min(window) >= 1.0:
                return SeriesResult(total, math.inf, False, n + 1, ratio)
            if q_hat < 1.0:
                tail = a * q_hat / (1.0 - q_hat)
                if tail <= tail_tol * max(abs(total), 1e-300):
                    return SeriesResult(total, tail, True, n + 1, ratio)
        elif a == 0.0 and n > 0 and c.kind != "table":
            return SeriesResult(total, 0.0, True, n + 1, ratio)
    return SeriesResult(total, math.inf, False, n + 1, ratio)


def series_bound(c: NormSequence, params: ScaleParams, n_max: int = DEFAULT_N_MAX, tail_tol: float = 1e-16) -> SeriesResult:
    """sum_n r^n c(n) with r = (1 + sqrt(t xi))(1 + sqrt(t zeta)) / sqrt(xi zeta)."""
    return sum_series(c, scale_ratio(params.t, params.xi, params.zeta), n_max, tail_tol)


def integrability_radius(xi: float, zeta: float, rho: float) -> float:
    """Largest t with sqrt(xi zeta t) < sqrt(xi zeta rho + (sqrt xi - sqrt zeta)^2 / 4) - (sqrt xi + sqrt zeta) / 2.

    At this t the scale ratio equals rho; 0 when sqrt(xi zeta) rho <= 1.
    """
    ScaleParams(xi, zeta, 0.0, rho)
    sx, sz = math.sqrt(xi), math.sqrt(zeta)
    gm = math.sqrt(xi * zeta)
    # rationalized difference avoids cancellation near the boundary
    numerator = gm * (gm * rho - 1.0)
    if numerator <= 0:
        return 0.0
    root = math.sqrt(xi * zeta * rho + 0.25 * (sx - sz) ** 2)
    rhs = numerator / (root + 0.5 * (sx + sz))
    return rhs * rhs / (xi * zeta)


def chronological_bound(c: NormSequence, zeta: float, t: float, n_max: int = DEFAULT_N_MAX, tail_tol: float = 1e-16) -> SeriesResult:
    """sum_n (zeta^(-1/2) + sqrt(t))^n c(n)."""
    ScaleParams(1.0, zeta, t, 1.0)
    return sum_series(c, chronological_ratio(t, zeta), n_max, tail_tol)


def chronological_radius(c: NormSequence, zeta: float) -> float:
    """Largest t for which ``chronological_bound`` converges: (R - zeta^(-1/2))^2 with R the radius of c."""
    R = c.convergence_radius
    if math.isinf(R):
        return math.inf
    gap = R - 1.0 / math.sqrt(zeta)
    return gap * gap if gap > 0 else 0.0
