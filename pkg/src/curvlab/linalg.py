"""Dense linear algebra helpers shared by the rest of the package.

Everything here works on float64 numpy arrays. Randomness is always drawn
from a :class:`SeededRng` so that results are reproducible bit-for-bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Upper bound on the number of entries of any assembled matrix. Desk-scale
# problems stay far below this; hitting it almost always means a misuse.
MAX_ENTRIES = 1 << 24


class SizeCapError(ValueError):
    """Raised when an assembled object would exceed the configured size cap."""


class NotConvergedError(RuntimeError):
    """Power iteration did not reach the requested tolerance."""

    def __init__(self, message: str, estimate: float, residual: float, vector: np.ndarray):
        super().__init__(message)
        self.estimate = estimate
        self.residual = residual
        self.vector = vector


@dataclass(frozen=True)
class SeededRng:
    """A (seed, stream_id) pair that deterministically names a random stream.

    ``generator()`` always returns a fresh PCG64 generator positioned at the
    start of the stream, so two calls yield identical sequences.
    """

    seed: int
    stream_id: int = 0

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, self.stream_id & 0xFFFFFFFFFFFFFFFF])
        return np.random.Generator(np.random.PCG64(ss))

    def derive(self, module_id: int, sample_id: int = 0) -> "SeededRng":
        """Child stream for ``(module_id, sample_id)``; independent of call order."""
        return SeededRng(self.seed, stream_for(module_id, sample_id))


def stream_for(module_id: int, sample_id: int = 0) -> int:
    return ((module_id & 0xFFFFFFFF) << 32) | (sample_id & 0xFFFFFFFF)


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


def kron(a, b, max_entries: int = MAX_ENTRIES) -> np.ndarray:
    """Kronecker product; block ``(i, j)`` of the result is ``a[i, j] * b``."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    rows = a.shape[0] * b.shape[0]
    cols = a.shape[1] * b.shape[1]
    if rows * cols > max_entries:
        raise SizeCapError(f"kron result {rows}x{cols} exceeds cap of {max_entries} entries")
    return np.kron(a, b)


def spectral_norm(
    a,
    tol: float = 1e-10,
    max_iter: int = 10_000,
    rng: SeededRng | None = None,
) -> float:
    """Largest singular value of ``a`` by power iteration on ``a.T @ a``.

    Stops once the eigen-residual ``||G v - lam v||`` falls below
    ``tol * lam``. Raises :class:`NotConvergedError` (carrying the last
    iterate and residual) if that does not happen within ``max_iter``.
    """
    a = as_matrix(a, "a")
    if not np.any(a):
        raise ValueError("spectral_norm of a zero matrix")
    rng = rng or SeededRng(0)
    gram = a.T @ a
    n = gram.shape[0]
    if n == 1:
        return math.sqrt(gram[0, 0])
    v = rng.generator().standard_normal(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    residual = math.inf
    for it in range(max_iter):
        gv = gram @ v
        lam = float(v @ gv)
        residual = float(np.linalg.norm(gv - lam * v))
        if lam > 0 and residual <= tol * lam:
            return math.sqrt(lam)
        norm = np.linalg.norm(gv)
        if norm == 0.0:
            # v landed in the null space; restart from a fresh direction.
            v = rng.derive(1, it).generator().standard_normal(n)
            v /= np.linalg.norm(v)
            continue
        v = gv / norm
    raise NotConvergedError(
        f"power iteration did not converge in {max_iter} iterations (residual {residual:.3e})",
        estimate=math.sqrt(max(lam, 0.0)),
        residual=residual,
        vector=v,
    )


@dataclass(frozen=True)
class CubicProblem:
    """Find the positive root of ``a*x**3 + b*x**2 + c*x = target``.

    ``c`` is an optional linear coefficient (zero for the pure
    sharpness-plus-remainder bound).
    """

    a: float
    b: float
    target: float
    c: float = 0.0

    def __post_init__(self):
        if not (self.a > 0 and math.isfinite(self.a)):
            raise ValueError(f"cubic coefficient must be positive, got {self.a}")
        if not (self.b >= 0 and math.isfinite(self.b)):
            raise ValueError(f"quadratic coefficient must be nonnegative, got {self.b}")
        if not (self.c >= 0 and math.isfinite(self.c)):
            raise ValueError(f"linear coefficient must be nonnegative, got {self.c}")
        if not (self.target > 0 and math.isfinite(self.target)):
            raise ValueError(f"target must be positive, got {self.target}")

    def __call__(self, x: float) -> float:
        return ((self.a * x + self.b) * x + self.c) * x - self.target

    def derivative(self, x: float) -> float:
        return (3.0 * self.a * x + 2.0 * self.b) * x + self.c


@dataclass(frozen=True)
class CubicRoot:
    root: float
    residual: float
    branch: str
    newton_steps: int


def solve_cubic(p: CubicProblem) -> CubicRoot:
    """Positive root via the depressed cubic, then Newton polish.

    With ``x = t - B/3`` the monic cubic ``x^3 + B x^2 + C x + D`` becomes
    ``t^3 + P t + Q``. A positive discriminant ``(Q/2)^2 + (P/3)^3`` gives
    one real root (Cardano); a negative one gives three real roots and the
    largest is taken (trigonometric form). Descartes' rule guarantees the
    positive root is unique and is the largest real root.
    """
    B = p.b / p.a
    C = p.c / p.a
    D = -p.target / p.a
    P = C - B * B / 3.0
    Q = 2.0 * B**3 / 27.0 - B * C / 3.0 + D
    disc = (Q / 2.0) ** 2 + (P / 3.0) ** 3
    if disc >= 0.0:
        branch = "cardano"
        s = math.sqrt(disc)
        t = float(np.cbrt(-Q / 2.0 + s) + np.cbrt(-Q / 2.0 - s))
    else:
        branch = "trigonometric"
        m = 2.0 * math.sqrt(-P / 3.0)
        arg = 3.0 * Q / (P * m)
        theta = math.acos(max(-1.0, min(1.0, arg)))
        t = m * math.cos(theta / 3.0)
    x = t - B / 3.0

    # The closed form loses relative accuracy when B dominates (x << B).
    # f is increasing and convex on x > 0: a Newton step from either side
    # lands right of the root, after which convergence is monotone.
    upper = (p.target / p.a) ** (1.0 / 3.0)
    if p.b > 0:
        upper = min(upper, math.sqrt(p.target / p.b))
    if p.c > 0:
        upper = min(upper, p.target / p.c)
    if not (x > 0 and math.isfinite(x)):
        x = upper
    x = min(x, upper)
    steps = 0
    for steps in range(1, 101):
        step = p(x) / p.derivative(x)
        x_new = x - step
        if x_new <= 0:
            x_new = x / 2.0
        x_new = min(x_new, upper)
        if abs(x_new - x) <= 4 * np.finfo(float).eps * x:
            x = x_new
            break
        x = x_new
    return CubicRoot(root=x, residual=abs(p(x)), branch=branch, newton_steps=steps)


def unique_positive_cubic_root(p: CubicProblem) -> float:
    return solve_cubic(p).root
