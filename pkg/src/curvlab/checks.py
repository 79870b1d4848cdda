"""Finite-difference checks of the closed-form curvature code.

Every check draws fresh random instances from a seeded stream and compares
an analytic quantity against an independent numerical one. Errors are
normwise: ``max |A - B| / max |B|``, which stays meaningful when single
entries are close to zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .curvature import (
    hessian_backprop,
    logit_hessian,
    penultimate_hessian,
    sharpness_arrays,
    third_derivative_tensor,
)
from .linalg import SeededRng, spectral_norm

CHECK_MODULE_ID = 7


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.instances > 0 and self.max_rel_error < self.tolerance


def rel_error(approx: np.ndarray, exact: np.ndarray) -> float:
    scale = float(np.max(np.abs(exact)))
    diff = float(np.max(np.abs(np.asarray(approx) - np.asarray(exact))))
    return diff / scale if scale > 0 else diff


def _ce(w: np.ndarray, phi: np.ndarray, y: int) -> float:
    z = w @ phi
    top = np.max(z)
    return float(top + np.log(np.sum(np.exp(z - top))) - z[y])


def _probs(w: np.ndarray, phi: np.ndarray) -> np.ndarray:
    return nn.softmax(w @ phi)


def _random_instance(gen: np.random.Generator, k_max: int = 5, m_max: int = 8):
    k = int(gen.integers(2, k_max + 1))
    m = int(gen.integers(1, m_max + 1))
    w = gen.standard_normal((k, m))
    phi = gen.standard_normal(m)
    y = int(gen.integers(0, k))
    return w, phi, y


def fd_hessian_of_loss(w: np.ndarray, phi: np.ndarray, y: int, h: float = 1e-4) -> np.ndarray:
    """Second-order central differences of cross-entropy over row-major ``w``."""
    k, m = w.shape
    n = k * m
    flat = w.ravel()
    f = lambda v: _ce(v.reshape(k, m), phi, y)  # noqa: E731
    out = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            ei = np.zeros(n)
            ej = np.zeros(n)
            ei[i] = h
            ej[j] = h
            val = (f(flat + ei + ej) - f(flat + ei - ej) - f(flat - ei + ej) + f(flat - ei - ej)) / (4 * h * h)
            out[i, j] = out[j, i] = val
    return out


def check_penultimate_hessian(instances: int = 20, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    gen = SeededRng(seed).derive(CHECK_MODULE_ID, 1).generator()
    worst = 0.0
    for _ in range(instances):
        w, phi, y = _random_instance(gen)
        exact = penultimate_hessian(_probs(w, phi), phi)
        worst = max(worst, rel_error(fd_hessian_of_loss(w, phi, y), exact))
    return CheckResult("penultimate_hessian", instances, worst, tol)


def check_trace_identity(instances: int = 20, seed: int = 0, tol: float = 1e-10) -> CheckResult:
    gen = SeededRng(seed).derive(CHECK_MODULE_ID, 1).generator()
    worst = 0.0
    for _ in range(instances):
        w, phi, y = _random_instance(gen)
        net = nn.MlpNetwork([nn.Layer(w, None, nn.IDENTITY)])
        kappa = sharpness_arrays(net, phi[None, :], np.array([y]))["kappa_spectral"][0]
        assembled = spectral_norm(w, tol=1e-14) * np.trace(penultimate_hessian(_probs(w, phi), phi))
        worst = max(worst, abs(kappa - assembled) / abs(assembled))
    return CheckResult("trace_identity", instances, worst, tol)


def _grad_wrt_layer(net: nn.MlpNetwork, x: np.ndarray, y: int, layer: int) -> np.ndarray:
    _, grads = nn.loss_and_grad(net, nn.SampleBatch(x[None, :], np.array([y])))
    return grads[layer][0].ravel()


def random_relu_net(gen: np.random.Generator, depth: int = 3, max_dim: int = 6) -> nn.MlpNetwork:
    dims = [int(d) for d in gen.integers(2, max_dim + 1, size=depth + 1)]
    layers = [
        nn.Layer(gen.standard_normal((dims[i + 1], dims[i])), None, nn.RELU if i < depth - 1 else nn.IDENTITY)
        for i in range(depth)
    ]
    return nn.MlpNetwork(layers)


def check_backprop_blocks(instances: int = 10, seed: int = 0, tol: float = 1e-3, h: float = 1e-6) -> CheckResult:
    """Weight blocks against central differences of the backpropagated gradient.

    Samples with a pre-activation within 1e-3 of a ReLU kink are redrawn so
    the difference stencil never crosses one.
    """
    gen = SeededRng(seed).derive(CHECK_MODULE_ID, 3).generator()
    worst = 0.0
    done = 0
    while done < instances:
        net = random_relu_net(gen)
        x = gen.standard_normal(net.input_dim)
        y = int(gen.integers(0, net.n_classes))
        blocks = hessian_backprop(net, x, y, kink_margin=1e-3)
        if blocks[0].near_kink:
            continue
        for blk in blocks:
            w = net.layers[blk.index].weight
            n = w.size
            fd = np.empty((n, n))
            for i in range(n):
                plus, minus = net.copy(), net.copy()
                plus.layers[blk.index].weight.flat[i] += h
                minus.layers[blk.index].weight.flat[i] -= h
                fd[:, i] = (_grad_wrt_layer(plus, x, y, blk.index) - _grad_wrt_layer(minus, x, y, blk.index)) / (2 * h)
            worst = max(worst, rel_error(fd, blk.weight_block))
        done += 1
    return CheckResult("backprop_blocks", instances, worst, tol)


def check_backprop_zero(instances: int = 10, seed: int = 0) -> CheckResult:
    """With a zero output Hessian every block must vanish exactly."""
    gen = SeededRng(seed).derive(CHECK_MODULE_ID, 4).generator()
    worst = 0.0
    for _ in range(instances):
        net = random_relu_net(gen)
        x = gen.standard_normal(net.input_dim)
        blocks = hessian_backprop(net, x, 0, output_hessian=np.zeros((net.n_classes, net.n_classes)))
        worst = max(worst, max(float(np.max(np.abs(b.weight_block))) for b in blocks))
    return CheckResult("backprop_zero_output", instances, worst, 1e-300)


def check_third_derivative(instances: int = 20, seed: int = 0, tol: float = 1e-3, h: float = 1e-5) -> CheckResult:
    """Tensor against central differences of the closed-form Hessian (k m <= 16)."""
    gen = SeededRng(seed).derive(CHECK_MODULE_ID, 5).generator()
    worst = 0.0
    for _ in range(instances):
        while True:
            w, phi, _ = _random_instance(gen, k_max=4, m_max=4)
            if w.size <= 16:
                break
        k, m = w.shape
        t = third_derivative_tensor(_probs(w, phi), phi)
        fd = np.empty_like(t)
        for c in range(k * m):
            e = np.zeros(k * m)
            e[c] = h
            hp = penultimate_hessian(_probs((w.ravel() + e).reshape(k, m), phi), phi)
            hm = penultimate_hessian(_probs((w.ravel() - e).reshape(k, m), phi), phi)
            fd[:, :, c] = (hp - hm) / (2 * h)
        worst = max(worst, rel_error(fd, t))
    return CheckResult("third_derivative", instances, worst, tol)


def check_third_derivative_bound(instances: int = 20, seed: int = 0) -> CheckResult:
    """Worst ratio of an entry to ``k m L'^3 / 4`` with ``L' = max |phi_i|``; must stay below 1."""
    gen = SeededRng(seed).derive(CHECK_MODULE_ID, 6).generator()
    worst = 0.0
    for _ in range(instances):
        w, phi, _ = _random_instance(gen, k_max=4, m_max=4)
        k, m = w.shape
        bound = 0.25 * k * m * float(np.max(np.abs(phi))) ** 3
        t = third_derivative_tensor(_probs(w, phi), phi)
        worst = max(worst, float(np.max(np.abs(t))) / bound)
    return CheckResult("third_derivative_bound", instances, worst, 1.0)


def check_logit_hessian(instances: int = 20, seed: int = 0, tol: float = 1e-6, h: float = 1e-5) -> CheckResult:
    """``diag(p) - p p^T`` against central differences of the softmax."""
    gen = SeededRng(seed).derive(CHECK_MODULE_ID, 8).generator()
    worst = 0.0
    for _ in range(instances):
        k = int(gen.integers(2, 7))
        z = gen.standard_normal(k)
        fd = np.empty((k, k))
        for i in range(k):
            e = np.zeros(k)
            e[i] = h
            fd[:, i] = (nn.softmax(z + e) - nn.softmax(z - e)) / (2 * h)
        worst = max(worst, rel_error(fd, logit_hessian(nn.softmax(z))))
    return CheckResult("logit_hessian", instances, worst, tol)


def run_all(seed: int = 0) -> list[CheckResult]:
    return [
        check_logit_hessian(seed=seed),
        check_penultimate_hessian(seed=seed),
        check_trace_identity(seed=seed),
        check_backprop_blocks(seed=seed),
        check_backprop_zero(seed=seed),
        check_third_derivative(seed=seed),
        check_third_derivative_bound(seed=seed),
    ]
