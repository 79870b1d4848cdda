"""Second- and third-order quantities of softmax classifiers.

Weight matrices are vectorised row-major throughout: entry ``w[j, a]`` of a
k x m classifier sits at index ``j * m + a``. Under that convention the
cross-entropy Hessian of a single sample with respect to the classifier is
``(diag(p) - p p^T) kron (phi phi^T)`` and hidden-layer blocks are
``(D H D) kron (x x^T)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from .linalg import MAX_ENTRIES, SeededRng, SizeCapError, kron, spectral_norm

SIMPLEX_TOL = 1e-9
DEFAULT_KINK_MARGIN = 1e-6


def check_simplex(p, strict: bool = False) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probability vector must be 1-D and nonempty")
    if np.any(p < 0) or abs(p.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("vector is not on the probability simplex")
    if strict and np.any(p <= 0):
        raise ValueError("probability vector lies on the simplex boundary")
    return p


def complement(p: np.ndarray) -> np.ndarray:
    """``1 - p_i`` as the sum of the other entries.

    Subtracting from one cancels catastrophically once ``p_i`` rounds to a
    neighbour of 1; summing the small entries keeps full relative accuracy.
    """
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[-1]
    off = 1.0 - np.eye(k)
    return p @ off


def logit_hessian(p) -> np.ndarray:
    """Cross-entropy Hessian with respect to the logits, ``diag(p) - p p^T``."""
    p = check_simplex(p)
    h = -np.outer(p, p)
    h[np.diag_indices(p.size)] = p * complement(p)
    return h


def penultimate_hessian(p, phi, max_entries: int = MAX_ENTRIES) -> np.ndarray:
    """Cross-entropy Hessian with respect to the row-major vectorised classifier."""
    phi = np.asarray(phi, dtype=np.float64)
    if not np.all(np.isfinite(phi)):
        raise ValueError("features must be finite")
    return kron(logit_hessian(p), np.outer(phi, phi), max_entries=max_entries)


def third_derivative_tensor(p, phi, max_entries: int = 64**3) -> np.ndarray:
    """Third derivative of cross-entropy with respect to the vectorised classifier.

    With ``T[j, l, o] = d^3 lse / dz_j dz_l dz_o`` of the log-sum-exp, the
    weight-space tensor is ``T[j, l, o] * phi_a * phi_b * phi_c`` at index
    ``(j*m + a, l*m + b, o*m + c)``.
    """
    p = check_simplex(p)
    phi = np.asarray(phi, dtype=np.float64)
    k, m = p.size, phi.size
    if (k * m) ** 3 > max_entries:
        raise SizeCapError(f"third-derivative tensor of side {k * m} exceeds cap")
    t = logit_third_derivative(p)
    ppp = np.einsum("a,b,c->abc", phi, phi, phi)
    full = np.einsum("jlo,abc->jalboc", t, ppp)
    return full.reshape(k * m, k * m, k * m)


def logit_third_derivative(p) -> np.ndarray:
    """``d/dz_o (diag(p) - p p^T)_{jl}`` as a symmetric k x k x k array."""
    p = np.asarray(p, dtype=np.float64)
    eye = np.eye(p.size)
    dp = p[:, None] * (eye - p[None, :])  # dp[j, o] = dp_j/dz_o
    t = np.einsum("jl,jo->jlo", eye, dp)
    t -= np.einsum("lo,j->jlo", dp, p)
    t -= np.einsum("jo,l->jlo", dp, p)
    return t


@dataclass
class SharpnessRecord:
    sample_id: int
    loss: float
    confidence: float
    kappa_spectral: float
    kappa_frobenius: float
    trace: float = 0.0


def sharpness_arrays(net: nn.MlpNetwork, inputs, labels, w_norms: tuple[float, float] | None = None):
    """Vectorised closed-form sharpness for rows of ``inputs``.

    Returns a dict with per-sample ``loss``, ``confidence`` (``p_y``),
    ``trace`` (trace of the classifier Hessian), ``kappa_spectral`` and
    ``kappa_frobenius``.
    """
    inputs = np.atleast_2d(inputs)
    labels = np.asarray(labels).reshape(-1)
    cache = nn.forward(net, inputs)
    p = cache.probs
    phi = cache.features
    trace = np.sum(p * complement(p), axis=1) * np.sum(phi * phi, axis=1)
    spec, frob = w_norms if w_norms is not None else classifier_norms(net)
    return {
        "loss": nn.cross_entropy_from_logits(cache.logits, labels),
        "confidence": p[np.arange(p.shape[0]), labels],
        "trace": trace,
        "kappa_spectral": spec * trace,
        "kappa_frobenius": frob * trace,
    }


def classifier_norms(net: nn.MlpNetwork) -> tuple[float, float]:
    """(spectral norm, squared Frobenius norm) of the classifier."""
    w = net.classifier
    if not np.any(w):
        return 0.0, 0.0
    return spectral_norm(w, tol=1e-13), float(np.sum(w * w))


def relative_sharpness(net: nn.MlpNetwork, batch: nn.SampleBatch, variant: str = "spectral"):
    """Per-sample sharpness records and the batch mean of the chosen variant."""
    if variant not in ("spectral", "frobenius"):
        raise ValueError(f"unknown sharpness variant {variant!r}")
    arr = sharpness_arrays(net, batch.inputs, batch.labels)
    records = [
        SharpnessRecord(
            sample_id=i,
            loss=float(arr["loss"][i]),
            confidence=float(arr["confidence"][i]),
            kappa_spectral=float(arr["kappa_spectral"][i]),
            kappa_frobenius=float(arr["kappa_frobenius"][i]),
            trace=float(arr["trace"][i]),
        )
        for i in range(len(batch))
    ]
    mean = float(np.mean(arr[f"kappa_{variant}"])) if len(batch) else 0.0
    return records, mean


# ---------------------------------------------------------------------------
# Losses on the simplex and their curvature terms


@dataclass(frozen=True)
class LossKind:
    variant: str
    gamma: float = 0.0
    q: tuple[float, ...] | None = None

    VARIANTS = ("cross_entropy", "focal", "brier", "kl_hard", "kl_soft", "reverse_kl")

    def __post_init__(self):
        if self.variant not in self.VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        if self.variant in ("kl_soft", "reverse_kl"):
            if self.q is None:
                raise ValueError(f"{self.variant} needs a target distribution q")
            check_simplex(np.asarray(self.q))
        if self.variant == "reverse_kl" and min(self.q) <= 0:
            raise ValueError("reverse KL needs a strictly positive target q")


CROSS_ENTROPY = LossKind("cross_entropy")


def loss_on_simplex(loss: LossKind, p, y: int) -> float:
    p = np.asarray(p, dtype=np.float64)
    v = loss.variant
    if v in ("cross_entropy", "kl_hard"):
        return float(-np.log(p[y]))
    if v == "focal":
        return float(-((1.0 - p[y]) ** loss.gamma) * np.log(p[y]))
    if v == "brier":
        r = p.copy()
        r[y] -= 1.0
        return float(r @ r)
    q = np.asarray(loss.q)
    if v == "kl_soft":
        nz = q > 0
        return float(np.sum(q[nz] * (np.log(q[nz]) - np.log(p[nz]))))
    return float(np.sum(p * (np.log(p) - np.log(q))))  # reverse_kl


def loss_grad_simplex(loss: LossKind, p, y: int) -> np.ndarray:
    """Partial derivatives ``dl/dp_i`` treating the p_i as free variables."""
    p = np.asarray(p, dtype=np.float64)
    g = np.zeros_like(p)
    v = loss.variant
    if v in ("cross_entropy", "kl_hard"):
        g[y] = -1.0 / p[y]
    elif v == "focal":
        u = 1.0 - p[y]
        gam = loss.gamma
        lead = gam * u ** (gam - 1.0) * np.log(p[y]) if gam > 0 else 0.0
        g[y] = lead - u**gam / p[y]
    elif v == "brier":
        g = 2.0 * p
        g[y] -= 2.0
    elif v == "kl_soft":
        g = -np.asarray(loss.q) / p
    else:
        g = np.log(p) - np.log(np.asarray(loss.q)) + 1.0
    return g


@dataclass
class CurvatureTerms:
    h: np.ndarray
    y: int
    assumption_a_ok: bool

    @property
    def h_y(self) -> float:
        return float(self.h[self.y])

    @property
    def h_other(self) -> np.ndarray:
        return np.delete(self.h, self.y)


def loss_curvature_terms(loss: LossKind, p, y: int) -> CurvatureTerms:
    """Diagonal second derivatives ``h_i = d^2 l / dp_i^2`` and the
    bounded-curvature flag for the loss family.

    The flag is a property of the loss family, not of ``p``: it records
    whether ``h_y p_y^2`` and ``h_{j != y}`` stay bounded on the open simplex.
    """
    p = check_simplex(p, strict=True)
    k = p.size
    if not 0 <= y < k:
        raise ValueError(f"class {y} out of range for k={k}")
    h = np.zeros(k)
    v = loss.variant
    ok = True
    if v in ("cross_entropy", "kl_hard"):
        h[y] = 1.0 / p[y] ** 2
    elif v == "focal":
        g = loss.gamma
        u = 1.0 - p[y]
        if g == 0:
            h[y] = 1.0 / p[y] ** 2
        else:
            h[y] = u ** (g - 2.0) * (-g * (g - 1.0) * np.log(p[y]) + 2.0 * g * u / p[y] + u * u / p[y] ** 2)
        # h_y p_y^2 ~ u^(g-1) near p_y = 1, bounded only for g = 0 or g >= 1
        ok = g == 0 or g >= 1
    elif v == "brier":
        h[:] = 2.0
    elif v == "kl_soft":
        q = np.asarray(loss.q)
        h = q / p**2
        ok = not np.any(np.delete(q, y) > 0)
    else:  # reverse_kl: l = sum_i p_i log(p_i / q_i)
        h = 1.0 / p
        # Listed as satisfying the condition in the loss table; see README.
        ok = True
    return CurvatureTerms(h=h, y=y, assumption_a_ok=bool(ok))


def softmax_second_derivatives(p) -> np.ndarray:
    """``S[i, a, b] = d^2 p_i / dz_a dz_b`` for ``p = softmax(z)``."""
    p = np.asarray(p, dtype=np.float64)
    eye = np.eye(p.size)
    e_minus_p = eye - p[None, :]  # row i: e_i - p
    outer = np.einsum("ia,ib->iab", e_minus_p, e_minus_p)
    j = np.diag(p) - np.outer(p, p)  # J[a, b] = dp_a/dz_b
    return p[:, None, None] * (outer - j[None, :, :])


def logit_grad_and_hessian(loss: LossKind, p, y: int):
    """Gradient and Hessian of ``loss(softmax(z), y)`` with respect to ``z``.

    Cross-entropy uses its closed form; other losses go through the full
    chain rule ``J^T diag(h) J + sum_i g_i d^2 p_i/dz^2``.
    """
    p = np.asarray(p, dtype=np.float64)
    if loss.variant in ("cross_entropy", "kl_hard"):
        g = p.copy()
        g[y] -= 1.0
        return g, np.diag(p) - np.outer(p, p)
    jac = np.diag(p) - np.outer(p, p)
    gp = loss_grad_simplex(loss, p, y)
    h = loss_curvature_terms(loss, p, y).h
    hz = jac.T @ (h[:, None] * jac) + np.einsum("i,iab->ab", gp, softmax_second_derivatives(p))
    return jac.T @ gp, hz


# ---------------------------------------------------------------------------
# Second-order backpropagation


@dataclass
class LayerCurvature:
    """Curvature of one dense layer.

    ``grad`` is dl/da^l for the pre-activation ``a^l``; ``hessian`` is the
    Hessian with respect to the layer output ``x^l`` (the logits for the
    classifier); ``mask`` holds the diagonal of ``D^l``; ``weight_block`` is
    ``(D H D) kron (x^{l-1} x^{l-1}^T)`` over the row-major weights.
    """

    index: int
    grad: np.ndarray
    hessian: np.ndarray
    mask: np.ndarray
    weight_block: np.ndarray
    layer_input: np.ndarray
    near_kink: bool = False

    @property
    def masked_hessian(self) -> np.ndarray:
        return self.mask[:, None] * self.hessian * self.mask[None, :]

    def trace(self) -> float:
        return float(np.trace(self.masked_hessian) * (self.layer_input @ self.layer_input))


def hessian_backprop(
    net: nn.MlpNetwork,
    x,
    y: int,
    loss: LossKind = CROSS_ENTROPY,
    kink_margin: float = DEFAULT_KINK_MARGIN,
    output_hessian: np.ndarray | None = None,
    max_entries: int = MAX_ENTRIES,
) -> list[LayerCurvature]:
    """Exact per-layer weight Hessian blocks of a ReLU network.

    The output Hessian comes from the loss analytically (or from
    ``output_hessian`` when given) and is pulled back with
    ``H^{l-1} = W_l^T D^l H^l D^l W_l``. Bias blocks are not emitted.
    Each block carries ``near_kink`` when any ReLU pre-activation of the
    sample lies within ``kink_margin`` of zero.
    """
    cache = nn.forward(net, np.asarray(x, dtype=np.float64))
    g, h = logit_grad_and_hessian(loss, cache.probs, y)
    if output_hessian is not None:
        h = np.asarray(output_hessian, dtype=np.float64)
    kink = any(
        np.any(np.abs(cache.pre[i]) < kink_margin)
        for i, layer in enumerate(net.layers)
        if layer.activation == nn.RELU
    )
    out: list[LayerCurvature] = []
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == nn.RELU:
            mask = cache.mask(i)
        else:
            mask = np.ones(layer.out_dim)
        dhd = mask[:, None] * h * mask[None, :]
        x_in = cache.post[i]
        block = kron(dhd, np.outer(x_in, x_in), max_entries=max_entries)
        g_pre = mask * g
        out.append(LayerCurvature(i, g_pre, h, mask, block, x_in, kink))
        g = layer.weight.T @ g_pre
        h = layer.weight.T @ dhd @ layer.weight
    out.reverse()
    return out


def hutchinson_trace(hvp: Callable[[np.ndarray], np.ndarray], dim: int, probes: int, rng: SeededRng) -> float:
    """Mean of ``z^T H z`` over Rademacher probes ``z``."""
    if probes <= 0:
        raise ValueError("need at least one probe")
    gen = rng.generator()
    total = 0.0
    for _ in range(probes):
        z = gen.integers(0, 2, size=dim).astype(np.float64) * 2.0 - 1.0
        hz = np.asarray(hvp(z), dtype=np.float64)
        if not np.all(np.isfinite(hz)):
            raise FloatingPointError("Hessian-vector product returned non-finite values")
        total += float(z @ hz)
    return total / probes


def kron_matvec(a: np.ndarray, b: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``(a kron b) @ v`` for row-major ``v`` without forming the product."""
    vm = v.reshape(a.shape[1], b.shape[1])
    return (a @ vm @ b.T).reshape(-1)


@dataclass
class LayerSharpness:
    sample_id: int
    layer: int
    trace_exact: float
    trace_estimate: float
    kappa: float


def layer_sharpness(
    net: nn.MlpNetwork,
    batch: nn.SampleBatch,
    probes: int = 100,
    rng: SeededRng | None = None,
) -> list[LayerSharpness]:
    """Relative sharpness ``||W_l||_2 tr(H_{W_l})`` of every layer.

    The trace is estimated with Hutchinson probes through Kronecker
    matrix-vector products; the exact trace is reported alongside.
    """
    rng = rng or SeededRng(0)
    norms = [spectral_norm(l.weight, tol=1e-12) if np.any(l.weight) else 0.0 for l in net.layers]
    out = []
    for s in range(len(batch)):
        blocks = hessian_backprop(net, batch.inputs[s], int(batch.labels[s]), max_entries=1 << 40)
        for blk in blocks:
            xx = np.outer(blk.layer_input, blk.layer_input)
            dhd = blk.masked_hessian
            dim = dhd.shape[1] * xx.shape[1]
            est = hutchinson_trace(lambda v: kron_matvec(dhd, xx, v), dim, probes, rng.derive(blk.index, s))
            exact = blk.trace()
            out.append(LayerSharpness(s, blk.index, exact, est, norms[blk.index] * est))
    return out


# ---------------------------------------------------------------------------
# Confidence collapse under logit scaling


@dataclass
class CollapseCurve:
    alphas: np.ndarray
    kappa_spectral: np.ndarray  # batch mean per alpha
    kappa_frobenius: np.ndarray
    trace_logit: np.ndarray  # per alpha x sample: tr(diag(p) - p p^T)
    confidence: np.ndarray  # per alpha x sample
    margins: np.ndarray  # per included sample, at alpha = 1
    sample_ids: np.ndarray
    excluded: int
    envelope: np.ndarray = field(default=None)  # 2 (k-1) exp(-alpha * margin)

    @property
    def envelope_ok(self) -> np.ndarray:
        return self.trace_logit <= self.envelope

    @property
    def kappa_ratio(self) -> np.ndarray:
        return self.kappa_spectral / self.kappa_spectral[0]


def logit_margins(z: np.ndarray, labels: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    n = z.shape[0]
    zy = z[np.arange(n), labels]
    others = z.copy()
    others[np.arange(n), labels] = -np.inf
    return zy - np.max(others, axis=1)


def collapse_curve(net: nn.MlpNetwork, batch: nn.SampleBatch, alphas: Sequence[float]) -> CollapseCurve:
    """Sharpness of the logit-scaled classifier ``alpha * w`` over a grid of alphas."""
    alphas = np.asarray(alphas, dtype=np.float64)
    if alphas.size == 0 or np.any(alphas <= 0) or np.any(np.diff(alphas) <= 0):
        raise ValueError("alphas must be positive and strictly increasing")
    z = nn.logits(net, batch.inputs)
    margins = logit_margins(z, batch.labels)
    keep = np.flatnonzero(margins > 0)
    sub = batch.subset(keep)
    k = net.n_classes
    spec = np.zeros(alphas.size)
    frob = np.zeros(alphas.size)
    tr = np.zeros((alphas.size, keep.size))
    conf = np.zeros((alphas.size, keep.size))
    for i, a in enumerate(alphas):
        scaled = nn.scale_penultimate(net, float(a))
        arr = sharpness_arrays(scaled, sub.inputs, sub.labels)
        p = nn.forward(scaled, sub.inputs).probs
        tr[i] = np.sum(p * complement(p), axis=1)
        conf[i] = arr["confidence"]
        spec[i] = np.mean(arr["kappa_spectral"]) if keep.size else 0.0
        frob[i] = np.mean(arr["kappa_frobenius"]) if keep.size else 0.0
    env = 2.0 * (k - 1) * np.exp(-alphas[:, None] * margins[keep][None, :])
    return CollapseCurve(
        alphas=alphas,
        kappa_spectral=spec,
        kappa_frobenius=frob,
        trace_logit=tr,
        confidence=conf,
        margins=margins[keep],
        sample_ids=keep,
        excluded=int(len(batch) - keep.size),
        envelope=env,
    )
