"""Coefficients of the flow family and of its gauge-fixing vector field."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace


class ParamError(ValueError):
    pass


@dataclass(frozen=True)
class FlowParams:
    """Coefficients ``(n, k, a, b, c)`` of the flow tensor plus gauge weights.

    The top-order flow tensor is
    ``(-1)**(k+1) * c * (Lap^k Ric + a_eff Lap^k S g - b Lap^(k-1) Hess S)``
    with ``a_eff = a + obstruction_shift / c``.  ``alpha`` and ``beta`` weight the
    gauge field; left as ``None`` they take the canonical values
    ``alpha = 1/2 + a_eff - b`` and ``beta = b - a_eff``.
    """

    n: int
    k: int
    a: float
    b: float
    c: float
    alpha: float | None = None
    beta: float | None = None
    obstruction_shift: float = 0.0

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ParamError(f"dimension n must be an integer >= 2, got {self.n}")
        if int(self.k) != self.k or self.k < 0:
            raise ParamError(f"k must be a non-negative integer, got {self.k}")
        for name in ("a", "b", "c", "obstruction_shift"):
            if not math.isfinite(getattr(self, name)):
                raise ParamError(f"{name} must be finite")
        if not self.c > 0:
            raise ParamError(f"c must be positive, got {self.c}")
        if self.k == 0 and self.b != 0:
            raise ParamError("k = 0 requires b = 0")
        if self.obstruction_shift < 0:
            raise ParamError("obstruction_shift must be >= 0")

    @property
    def a_eff(self) -> float:
        return self.a + self.obstruction_shift / self.c

    @property
    def weights(self) -> tuple[float, float]:
        """Gauge weights ``(alpha, beta)`` with canonical defaults filled in."""
        alpha = 0.5 + self.a_eff - self.b if self.alpha is None else self.alpha
        beta = self.b - self.a_eff if self.beta is None else self.beta
        return float(alpha), float(beta)

    @property
    def is_canonical(self) -> bool:
        alpha, beta = self.weights
        return (alpha, beta) == (0.5 + self.a_eff - self.b, self.b - self.a_eff)

    @property
    def threshold(self) -> float:
        """Critical value ``-1/(2(n-1))`` of ``a_eff``."""
        return -1.0 / (2 * (self.n - 1))

    @property
    def order(self) -> int:
        return 2 * self.k + 2

    def with_weights(self, alpha: float | None, beta: float | None) -> "FlowParams":
        return replace(self, alpha=alpha, beta=beta)

    @classmethod
    def obstruction(cls, n: int, shift: float = 0.0) -> "FlowParams":
        """Top-order coefficients of the ambient obstruction tensor (Bach for n = 4)."""
        if n < 4 or n % 2:
            raise ParamError("the obstruction tensor needs even n >= 4")
        half = n // 2
        return cls(
            n=n,
            k=half - 1,
            a=-1.0 / (2 * (n - 1)),
            b=(n - 2) / (2 * (n - 1)),
            c=1.0 / ((n - 2) * 2 ** (half - 2) * math.factorial(half - 2)),
            obstruction_shift=shift,
        )

    @classmethod
    def bach_type(cls, n: int) -> "FlowParams":
        """The n = 4 Bach coefficients ``(1, -1/6, 1/3, 1/2)`` placed in dimension ``n``."""
        return cls(n=n, k=1, a=-1.0 / 6.0, b=1.0 / 3.0, c=0.5)
