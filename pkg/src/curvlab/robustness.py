"""Attacks, loss-change robustness checks, and sharpness-based certificates."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .curvature import classifier_norms, sharpness_arrays
from .linalg import CubicProblem, SeededRng, solve_cubic, spectral_norm

FEATURE_NORM_FLOOR = 1e-9
GRADIENT_TERM_THRESHOLD = 1e-6
ATTACK_MODULE_ID = 3


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    steps: int = 10
    seed: int = 0
    record_trajectory: bool = True
    random_start: bool = False
    # Added to the l2 gradient norm before normalising, as in common PGD
    # implementations; a vanishing gradient then yields a vanishing step.
    grad_eps: float = 1e-10
    box: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        if self.norm not in ("l2", "linf"):
            raise ValueError(f"unknown attack norm {self.norm!r}")
        if not self.epsilon >= 0 or not self.step_size > 0 or self.steps < 0:
            raise ValueError("attack needs epsilon >= 0, step_size > 0, steps >= 0")


@dataclass
class AttackTrajectory:
    sample_id: int
    label: int
    iterates: np.ndarray  # (T+1) x d, row 0 is the clean input
    loss: np.ndarray
    predicted: np.ndarray
    kappa_spectral: np.ndarray
    kappa_frobenius: np.ndarray
    confidence: np.ndarray
    zero_grad_steps: list[int] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return self.iterates.shape[0] - 1

    @property
    def final(self) -> np.ndarray:
        return self.iterates[-1]

    @property
    def loss_increase(self) -> float:
        return float(self.loss[-1] - self.loss[0])

    @property
    def flipped(self) -> bool:
        return bool(np.any(self.predicted != self.label))

    def l2_distance(self) -> np.ndarray:
        return np.linalg.norm(self.iterates - self.iterates[0], axis=1)


def _project(x, x0, config: AttackConfig):
    delta = x - x0
    if config.norm == "linf":
        delta = np.clip(delta, -config.epsilon, config.epsilon)
    else:
        norms = np.linalg.norm(delta, axis=1, keepdims=True)
        factor = np.where(norms > config.epsilon, config.epsilon / np.maximum(norms, 1e-300), 1.0)
        delta = delta * factor
    return np.clip(x0 + delta, *config.box)


def pgd_attack(net: nn.MlpNetwork, batch: nn.SampleBatch, config: AttackConfig, sample_ids=None) -> list[AttackTrajectory]:
    """Untargeted PGD on the cross-entropy loss, one trajectory per sample.

    The linf variant steps along ``sign(grad)``; the l2 variant along
    ``grad / (||grad|| + grad_eps)``. Each step is followed by projection
    onto the epsilon ball and then onto the box. Starts are deterministic
    unless ``random_start`` is set, in which case every sample draws from
    its own (seed, sample_id) stream. Row 0 of every trajectory is the
    clean input; a random start point is not recorded itself.
    """
    x0 = np.array(batch.inputs, dtype=np.float64)
    y = batch.labels
    n = x0.shape[0]
    ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids)
    x = x0.copy()
    if config.random_start and config.steps > 0:
        root = SeededRng(config.seed)
        for i in range(n):
            gen = root.derive(ATTACK_MODULE_ID, int(ids[i])).generator()
            if config.norm == "linf":
                x[i] += gen.uniform(-config.epsilon, config.epsilon, size=x.shape[1])
            else:
                d = gen.standard_normal(x.shape[1])
                x[i] += d / np.linalg.norm(d) * config.epsilon * gen.uniform() ** (1.0 / x.shape[1])
        x = _project(x, x0, config)

    norms = classifier_norms(net)
    history = [x0.copy()]
    zero_steps: list[list[int]] = [[] for _ in range(n)]
    for t in range(1, config.steps + 1):
        _, g = nn.input_gradient(net, x, y)
        if config.norm == "linf":
            step = np.sign(g)
        else:
            gn = np.linalg.norm(g, axis=1, keepdims=True)
            step = g / (gn + config.grad_eps)
        for i in np.flatnonzero(~np.any(g != 0, axis=1)):
            zero_steps[i].append(t)
        x = _project(x + config.step_size * step, x0, config)
        if config.record_trajectory or t == config.steps:
            history.append(x.copy())

    stacked = np.stack(history, axis=1)  # n x T' x d
    trajectories = []
    for i in range(n):
        it = stacked[i]
        arr = sharpness_arrays(net, it, np.full(it.shape[0], y[i]), w_norms=norms)
        trajectories.append(
            AttackTrajectory(
                sample_id=int(ids[i]),
                label=int(y[i]),
                iterates=it,
                loss=arr["loss"],
                predicted=nn.predict(net, it),
                kappa_spectral=arr["kappa_spectral"],
                kappa_frobenius=arr["kappa_frobenius"],
                confidence=arr["confidence"],
                zero_grad_steps=zero_steps[i],
            )
        )
    return trajectories


def adversarial_batch(trajectories: list[AttackTrajectory]) -> nn.SampleBatch:
    return nn.SampleBatch(
        np.stack([t.final for t in trajectories]) if trajectories else np.zeros((0, 0)),
        np.array([t.label for t in trajectories], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Loss-change definitions


@dataclass
class LossChange:
    adversarial: bool
    delta: float
    loss_increase: float


def is_loss_change_adversarial(net: nn.MlpNetwork, x, xi, y: int, epsilon: float) -> LossChange:
    """Whether ``xi`` raises the cross-entropy at ``(x, y)`` by more than ``epsilon``."""
    x = np.asarray(x, dtype=np.float64)
    xi = np.asarray(xi, dtype=np.float64)
    if np.any(xi < 0) or np.any(xi > 1):
        raise ValueError("perturbed input must lie in [0, 1]^d")
    z = nn.logits(net, np.stack([x, xi]))
    losses = nn.cross_entropy_from_logits(z, np.array([y, y]))
    inc = float(losses[1] - losses[0])
    return LossChange(inc > epsilon, float(np.linalg.norm(xi - x)), inc)


@dataclass
class DatasetRobustness:
    """Result of an empirical loss-change robustness check.

    ``robust`` means no counterexample was found by the attack; it is not a
    proof of robustness.
    """

    robust: bool
    violating: list[int]
    max_increase: np.ndarray


def dataset_loss_robustness(
    net: nn.MlpNetwork,
    data: nn.SampleBatch,
    delta,
    epsilon: float,
    attack: AttackConfig,
) -> DatasetRobustness:
    """Attack every sample within radius ``delta`` and look for loss increases above ``epsilon``.

    ``delta`` may be a scalar or one radius per sample. The largest increase
    over every recorded iterate counts, not only the last one.
    """
    n = len(data)
    radii = np.broadcast_to(np.asarray(delta, dtype=np.float64), (n,))
    max_inc = np.zeros(n)
    if math.isinf(epsilon) or n == 0:
        return DatasetRobustness(True, [], max_inc)
    attack = dataclasses.replace(attack, record_trajectory=True)
    for r in np.unique(radii):
        if r <= 0:
            continue
        idx = np.flatnonzero(radii == r)
        cfg = dataclasses.replace(attack, epsilon=float(r))
        for i, traj in zip(idx, pgd_attack(net, data.subset(idx), cfg, sample_ids=idx)):
            max_inc[i] = float(np.max(traj.loss - traj.loss[0]))
    violating = [int(i) for i in np.flatnonzero(max_inc > epsilon)]
    return DatasetRobustness(not violating, violating, max_inc)


@dataclass
class EpsilonStar:
    value: float | None
    flipped_samples: int

    @property
    def available(self) -> bool:
        return self.value is not None


def estimate_epsilon_star(net: nn.MlpNetwork, data: nn.SampleBatch, delta: float, attack: AttackConfig) -> EpsilonStar:
    """Smallest observed loss increase among prediction-flipping iterates.

    Only correctly classified samples take part. The result upper-bounds
    the true infimum; ``value`` is None when no flip is found.
    """
    if delta <= 0:
        return EpsilonStar(None, 0)
    correct = np.flatnonzero(nn.predict(net, data.inputs) == data.labels)
    if correct.size == 0:
        return EpsilonStar(None, 0)
    cfg = dataclasses.replace(attack, epsilon=float(delta), record_trajectory=True)
    best = math.inf
    flipped = 0
    for traj in pgd_attack(net, data.subset(correct), cfg, sample_ids=correct):
        mask = traj.predicted != traj.label
        if np.any(mask):
            flipped += 1
            best = min(best, float(np.min(traj.loss[mask] - traj.loss[0])))
    return EpsilonStar(None if flipped == 0 else best, flipped)


# ---------------------------------------------------------------------------
# Bounds and certificates


def loss_increase_bound(delta: float, kappa: float, k: int, m: int, L: float, r: float, grad_coeff: float = 0.0) -> float:
    """Upper bound on the loss increase within input radius ``delta``.

    ``(delta^2 / 2r^2) L^2 kappa + (delta^3 / 24 r^3) k m L^6``, plus
    ``grad_coeff * L delta / r`` when a first-order term is supplied.
    """
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    feat = L * delta / r
    return grad_coeff * feat + 0.5 * kappa * feat**2 + k * m * L**3 * feat**3 / 24.0


@dataclass
class Certificate:
    epsilon: float
    kappa_frobenius: float
    k: int
    m: int
    L: float
    r: float
    delta_cert: float
    feature_radius: float
    cubic_residual: float
    branch: str
    grad_coeff: float = 0.0
    sample_id: int | None = None
    refused: str | None = None


def certified_radius(
    epsilon: float,
    kappa: float,
    k: int,
    m: int,
    L: float,
    r: float,
    grad_coeff: float = 0.0,
) -> Certificate:
    """Input radius within which the loss bound stays below ``epsilon``.

    Solves ``grad_coeff D + (kappa/2) D^2 + (k m L^3 / 24) D^3 = epsilon``
    for the feature-space radius ``D`` and maps it back with ``r D / L``.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if not (L > 0 and r > 0):
        raise ValueError("L and r must be positive")
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    a = k * m * L**3 / 24.0
    if kappa == 0 and grad_coeff == 0:
        root = (epsilon / a) ** (1.0 / 3.0)
        residual = abs(a * root**3 - epsilon)
        branch = "limit"
    else:
        sol = solve_cubic(CubicProblem(a=a, b=kappa / 2.0, target=epsilon, c=grad_coeff))
        root, residual, branch = sol.root, sol.residual, sol.branch
    return Certificate(
        epsilon=epsilon,
        kappa_frobenius=kappa,
        k=k,
        m=m,
        L=L,
        r=r,
        delta_cert=r * root / L,
        feature_radius=root,
        cubic_residual=residual,
        branch=branch,
        grad_coeff=grad_coeff,
    )


@dataclass
class LipschitzEstimate:
    upper: float
    lower_empirical: float
    pairs: int
    seed: int

    @property
    def lower_defined(self) -> bool:
        return not math.isnan(self.lower_empirical)


def lipschitz_upper(net: nn.MlpNetwork) -> float:
    """Product of the spectral norms of the feature layers (ReLU is 1-Lipschitz)."""
    upper = 1.0
    for layer in net.feature_layers:
        upper *= spectral_norm(layer.weight, tol=1e-13) if np.any(layer.weight) else 0.0
    return upper


def lipschitz_estimate(net: nn.MlpNetwork, data, pairs: int = 1000, seed: int = 0) -> LipschitzEstimate:
    """Spectral upper bound and an empirical lower bound on the feature map's Lipschitz constant.

    The lower bound maximises ``||phi(x) - phi(x')|| / ||x - x'||`` over
    random pairs plus each point's nearest neighbour; it is NaN when all
    points coincide.
    """
    x = np.atleast_2d(np.asarray(data.inputs if isinstance(data, nn.SampleBatch) else data, dtype=np.float64))
    upper = lipschitz_upper(net)
    n = x.shape[0]
    phi = nn.features(net, x)
    gen = SeededRng(seed, 0x11B5).generator()
    cand = []
    if n >= 2:
        i = gen.integers(0, n, size=pairs)
        j = gen.integers(0, n, size=pairs)
        cand.append(np.stack([i, j], axis=1))
        if n <= 5000:
            d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=2)
            np.fill_diagonal(d2, np.inf)
            d2[d2 == 0] = np.inf
            nearest = np.argmin(d2, axis=1)
            cand.append(np.stack([np.arange(n), nearest], axis=1))
    lower = math.nan
    used = 0
    if cand:
        pr = np.concatenate(cand)
        dx = np.linalg.norm(x[pr[:, 0]] - x[pr[:, 1]], axis=1)
        ok = dx > 0
        used = int(np.sum(ok))
        if used:
            dphi = np.linalg.norm(phi[pr[ok, 0]] - phi[pr[ok, 1]], axis=1)
            lower = float(np.max(dphi / dx[ok]))
    return LipschitzEstimate(upper=upper, lower_empirical=lower, pairs=used, seed=seed)


@dataclass
class FeatureNorms:
    r: float
    norms: np.ndarray

    @property
    def refused(self) -> np.ndarray:
        return np.flatnonzero(self.norms < FEATURE_NORM_FLOOR)

    @property
    def available(self) -> bool:
        return self.r >= FEATURE_NORM_FLOOR


def min_feature_norm(net: nn.MlpNetwork, data) -> FeatureNorms:
    x = np.atleast_2d(np.asarray(data.inputs if isinstance(data, nn.SampleBatch) else data, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("min_feature_norm needs a nonempty dataset")
    norms = np.linalg.norm(nn.features(net, x), axis=1)
    return FeatureNorms(float(np.min(norms)), norms)


def certify_dataset(
    net: nn.MlpNetwork,
    data: nn.SampleBatch,
    epsilon: float,
    L: float | None = None,
    r: float | None = None,
    gradient_term: bool = True,
    dataset_kappa: bool = False,
) -> list[Certificate]:
    """One certificate per sample.

    Uses the Frobenius sharpness of each sample (or the dataset maximum when
    ``dataset_kappa``), the spectral Lipschitz bound for ``L`` and the
    dataset's minimum feature norm for ``r``. When the sample's classifier
    gradient norm exceeds a small threshold the first-order Taylor term
    ``||w||_F ||grad_w l||_F`` is included. Samples are refused when the
    feature-norm hypothesis fails.
    """
    L = lipschitz_upper(net) if L is None else L
    fn = min_feature_norm(net, data)
    r = fn.r if r is None else r
    k, m = net.n_classes, net.feature_dim
    arr = sharpness_arrays(net, data.inputs, data.labels)
    kappas = arr["kappa_frobenius"]
    if dataset_kappa:
        kappas = np.full_like(kappas, float(np.max(kappas)))
    cache = nn.forward(net, data.inputs)
    resid = cache.probs.copy()
    resid[np.arange(len(data)), data.labels] -= 1.0
    grad_norm = np.linalg.norm(resid, axis=1) * np.linalg.norm(cache.features, axis=1)
    w_frob = math.sqrt(float(np.sum(net.classifier**2)))
    certs = []
    for i in range(len(data)):
        if r < FEATURE_NORM_FLOOR or L <= 0:
            reason = "feature_norm_below_floor" if fn.norms[i] < FEATURE_NORM_FLOOR else "dataset_r_below_floor"
            if L <= 0:
                reason = "lipschitz_bound_zero"
            certs.append(Certificate(epsilon, float(kappas[i]), k, m, L, r, math.nan, math.nan, math.nan, "refused", sample_id=i, refused=reason))
            continue
        c = w_frob * float(grad_norm[i]) if gradient_term and grad_norm[i] > GRADIENT_TERM_THRESHOLD else 0.0
        cert = certified_radius(epsilon, float(kappas[i]), k, m, L, r, grad_coeff=c)
        cert.sample_id = i
        certs.append(cert)
    return certs
