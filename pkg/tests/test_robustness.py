import math

import numpy as np
import pytest

from curvlab import nn
from curvlab.linalg import SeededRng, spectral_norm
from curvlab.robustness import (
    AttackConfig,
    certified_radius,
    certify_dataset,
    dataset_loss_robustness,
    estimate_epsilon_star,
    is_loss_change_adversarial,
    lipschitz_estimate,
    lipschitz_upper,
    loss_increase_bound,
    min_feature_norm,
    pgd_attack,
)
from oracles import cubic_root_bisection, softmax_ref


def _linear(w):
    return nn.MlpNetwork([nn.Layer(np.asarray(w, dtype=float), activation=nn.IDENTITY)])


class TestPgd:
    def test_zero_steps(self, toy):
        net, _, test = toy
        for t in pgd_attack(net, test.subset(np.arange(3)), AttackConfig(steps=0)):
            assert t.iterates.shape[0] == 1
            assert t.loss_increase == 0.0

    @pytest.mark.parametrize("norm,eps", [("linf", 0.1), ("l2", 0.2)])
    def test_projection_contract(self, toy, norm, eps):
        net, _, test = toy
        cfg = AttackConfig(norm=norm, epsilon=eps, step_size=eps / 3, steps=12, random_start=True)
        for t in pgd_attack(net, test.subset(np.arange(50)), cfg):
            d = t.iterates - t.iterates[0]
            size = np.max(np.abs(d), axis=1) if norm == "linf" else np.linalg.norm(d, axis=1)
            assert np.all(size <= eps + 1e-12)
            assert np.all((t.iterates >= 0) & (t.iterates <= 1))

    def test_linear_model_one_step(self, gen):
        w = gen.standard_normal((3, 4))
        x = gen.uniform(0.2, 0.8, 4)
        y = 1
        grad = w.T @ (softmax_ref(w @ x) - np.eye(3)[y])
        cfg = AttackConfig(norm="linf", epsilon=0.1, step_size=0.05, steps=1)
        (t,) = pgd_attack(_linear(w), nn.SampleBatch(x[None], [y]), cfg)
        np.testing.assert_allclose(t.final, np.clip(x + 0.05 * np.sign(grad), 0, 1), rtol=0, atol=1e-15)

    def test_l2_step_direction(self, gen):
        w = gen.standard_normal((3, 4))
        x = np.full(4, 0.5)
        grad = w.T @ (softmax_ref(w @ x) - np.eye(3)[0])
        cfg = AttackConfig(norm="l2", epsilon=1.0, step_size=0.01, steps=1)
        (t,) = pgd_attack(_linear(w), nn.SampleBatch(x[None], [0]), cfg)
        np.testing.assert_allclose(t.final - x, 0.01 * grad / np.linalg.norm(grad), rtol=1e-8)

    def test_clean_loss_matches(self, toy):
        net, _, test = toy
        trajs = pgd_attack(net, test.subset(np.arange(5)), AttackConfig())
        np.testing.assert_array_equal([t.loss[0] for t in trajs], nn.sample_losses(net, test.subset(np.arange(5))))

    def test_zero_gradient_recorded(self):
        net = _linear(np.zeros((2, 2)))
        (t,) = pgd_attack(net, nn.SampleBatch([[0.5, 0.5]], [0]), AttackConfig(steps=3))
        assert t.zero_grad_steps == [1, 2, 3]
        np.testing.assert_array_equal(t.iterates, np.full((4, 2), 0.5))

    def test_deterministic_with_random_start(self, toy):
        net, _, test = toy
        cfg = AttackConfig(norm="l2", epsilon=0.1, step_size=0.02, steps=5, random_start=True, seed=4)
        a = pgd_attack(net, test.subset(np.arange(10)), cfg)
        b = pgd_attack(net, test.subset(np.arange(10)), cfg)
        for ta, tb in zip(a, b):
            np.testing.assert_array_equal(ta.iterates, tb.iterates)

    def test_per_sample_streams_independent_of_batch(self, toy):
        net, _, test = toy
        cfg = AttackConfig(norm="linf", epsilon=0.05, step_size=0.01, steps=3, random_start=True)
        full = pgd_attack(net, test.subset(np.arange(6)), cfg)
        part = pgd_attack(net, test.subset(np.arange(3, 6)), cfg, sample_ids=np.arange(3, 6))
        for a, b in zip(full[3:], part):
            np.testing.assert_array_equal(a.iterates, b.iterates)

    def test_trajectory_sharpness_is_closed_form(self, toy):
        from curvlab.curvature import sharpness_arrays

        net, _, test = toy
        (t,) = pgd_attack(net, test.subset([0]), AttackConfig(steps=4))
        arr = sharpness_arrays(net, t.iterates, np.full(5, t.label))
        np.testing.assert_array_equal(t.kappa_spectral, arr["kappa_spectral"])

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            AttackConfig(norm="l1")
        with pytest.raises(ValueError):
            AttackConfig(step_size=0.0)
        with pytest.raises(ValueError):
            AttackConfig(steps=-1)

    def test_high_loss_implies_flip(self, toy):
        # Cross-entropy above log k forces a wrong prediction.
        net, _, test = toy
        k = net.n_classes
        for t in pgd_attack(net, test, AttackConfig(norm="linf", epsilon=0.4, step_size=0.05, steps=10)):
            high = t.loss > math.log(k)
            assert np.all(t.predicted[high] != t.label)


class TestLossChange:
    def test_identity_perturbation(self, toy):
        net, _, test = toy
        res = is_loss_change_adversarial(net, test.inputs[0], test.inputs[0], int(test.labels[0]), 0.0)
        assert not res.adversarial
        assert res.delta == 0.0 and res.loss_increase == 0.0

    def test_random_small_perturbations(self, toy, gen):
        net, _, test = toy
        for i in range(20):
            x = test.inputs[i]
            xi = np.clip(x + gen.uniform(-0.01, 0.01, x.size), 0, 1)
            assert not is_loss_change_adversarial(net, x, xi, int(test.labels[i]), 10.0).adversarial

    def test_box_check(self, toy):
        with pytest.raises(ValueError):
            is_loss_change_adversarial(toy[0], [0.5, 0.5], [1.5, 0.5], 0, 0.1)

    def test_dataset_vacuous_cases(self, toy):
        net, _, test = toy
        sub = test.subset(np.arange(10))
        assert dataset_loss_robustness(net, sub, 0.5, math.inf, AttackConfig(norm="l2")).robust
        assert dataset_loss_robustness(net, sub, 0.0, 1e-9, AttackConfig(norm="l2")).robust

    def test_dataset_finds_violations(self, toy):
        net, _, test = toy
        res = dataset_loss_robustness(net, test.subset(np.arange(20)), 0.5, 0.1, AttackConfig(norm="l2", step_size=0.05, steps=20))
        assert not res.robust
        assert set(res.violating) == set(np.flatnonzero(res.max_increase > 0.1))


class TestEpsilonStar:
    def test_zero_radius_sentinel(self, toy):
        est = estimate_epsilon_star(toy[0], toy[2], 0.0, AttackConfig())
        assert not est.available

    def test_linear_margin(self):
        # Logit gap 2(x0 - x1) = 0.4 closes along (-1, 1) at rate 2 sqrt(2) per unit radius.
        w = np.array([[2.0, 0.0], [0.0, 2.0]])
        data = nn.SampleBatch(np.array([[0.6, 0.4]]), [0])
        needed = 0.4 / (2.0 * math.sqrt(2.0))
        cfg = AttackConfig(norm="l2", step_size=0.01, steps=100)
        assert not estimate_epsilon_star(_linear(w), data, needed * 0.9, cfg).available
        est = estimate_epsilon_star(_linear(w), data, needed * 1.1, cfg)
        assert est.available and est.value > 0

    def test_more_steps_never_raise(self, toy):
        net, _, test = toy
        sub = test.subset(np.arange(60))
        weak = estimate_epsilon_star(net, sub, 0.3, AttackConfig(norm="l2", step_size=0.03, steps=10))
        strong = estimate_epsilon_star(net, sub, 0.3, AttackConfig(norm="l2", step_size=0.03, steps=20))
        assert weak.available and strong.available
        assert strong.value <= weak.value


class TestBoundAndCertificate:
    def test_bound_zero_radius(self):
        assert loss_increase_bound(0.0, 3.0, 2, 3, 1.0, 1.0) == 0.0

    def test_bound_arithmetic(self):
        assert loss_increase_bound(1.0, 2.0, 2, 3, 1.0, 1.0) == pytest.approx(1.25, rel=1e-15)

    def test_limit_value(self):
        c = certified_radius(0.25, 0.0, 2, 3, 1.0, 1.0)
        assert c.delta_cert == pytest.approx(1.0, rel=1e-15)
        assert c.branch == "limit"

    def test_saturation(self):
        limit = certified_radius(0.3, 0.0, 3, 4, 1.7, 0.4).delta_cert
        near = certified_radius(0.3, 1e-12, 3, 4, 1.7, 0.4).delta_cert
        assert abs(near - limit) < 1e-9

    def test_shrinks_with_epsilon(self):
        radii = [certified_radius(e, 1.0, 3, 4, 1.0, 1.0).delta_cert for e in (1.0, 1e-2, 1e-4, 1e-8)]
        assert all(a > b for a, b in zip(radii, radii[1:]))
        assert radii[-1] < 1e-3

    def test_matches_bisection(self, gen):
        for _ in range(200):
            eps, kappa = 10 ** gen.uniform(-3, 1), 10 ** gen.uniform(-3, 3)
            k, m = int(gen.integers(2, 11)), int(gen.integers(1, 65))
            L, r = 10 ** gen.uniform(-1, 1), 10 ** gen.uniform(-2, 0)
            c = certified_radius(eps, kappa, k, m, L, r)
            root = cubic_root_bisection(k * m * L**3 / 24, kappa / 2, eps)
            assert abs(c.delta_cert - r * root / L) <= 1e-8 * max(1.0, r * root / L)
            assert loss_increase_bound(c.delta_cert, kappa, k, m, L, r) == pytest.approx(eps, rel=1e-9)

    def test_gradient_term(self):
        c = certified_radius(0.1, 1.0, 3, 4, 2.0, 0.5, grad_coeff=0.3)
        assert loss_increase_bound(c.delta_cert, 1.0, 3, 4, 2.0, 0.5, grad_coeff=0.3) == pytest.approx(0.1, rel=1e-10)
        assert c.delta_cert < certified_radius(0.1, 1.0, 3, 4, 2.0, 0.5).delta_cert

    @pytest.mark.parametrize("kw", [dict(epsilon=0.0), dict(L=0.0), dict(r=-1.0), dict(kappa=-1.0)])
    def test_invalid(self, kw):
        args = dict(epsilon=0.1, kappa=1.0, k=2, m=2, L=1.0, r=1.0) | kw
        with pytest.raises(ValueError):
            certified_radius(**args)


class TestLipschitzAndFeatures:
    def test_single_linear_layer(self, gen):
        w1 = gen.standard_normal((5, 3))
        net = nn.MlpNetwork([nn.Layer(w1, activation=nn.IDENTITY), nn.Layer(gen.standard_normal((2, 5)), activation=nn.IDENTITY)])
        assert lipschitz_upper(net) == pytest.approx(spectral_norm(w1, tol=1e-14), rel=1e-12)

    def test_identity_features(self, gen):
        net = nn.MlpNetwork([nn.Layer(np.eye(3), activation=nn.IDENTITY), nn.Layer(np.ones((2, 3)), activation=nn.IDENTITY)])
        est = lipschitz_estimate(net, gen.uniform(0, 1, (50, 3)), pairs=200)
        assert est.upper == pytest.approx(1.0, rel=1e-12)
        assert est.lower_empirical == pytest.approx(1.0, rel=1e-12)

    def test_lower_below_upper(self, gen):
        net = nn.MlpNetwork.init([4, 8, 8, 3], SeededRng(3))
        est = lipschitz_estimate(net, gen.uniform(0, 1, (300, 4)), pairs=10_000, seed=1)
        assert est.lower_defined
        assert est.lower_empirical <= est.upper

    def test_degenerate_data(self):
        net = nn.MlpNetwork.init([2, 3, 2], SeededRng(0))
        est = lipschitz_estimate(net, np.full((5, 2), 0.3), pairs=10)
        assert not est.lower_defined

    def test_min_feature_norm_identity(self, gen):
        x = gen.uniform(0, 1, (20, 3))
        x /= np.max(np.linalg.norm(x, axis=1))
        net = nn.MlpNetwork([nn.Layer(np.eye(3), activation=nn.IDENTITY), nn.Layer(np.ones((2, 3)), activation=nn.IDENTITY)])
        assert min_feature_norm(net, x).r == np.min(np.linalg.norm(x, axis=1))

    def test_zero_feature_refuses(self, toy):
        net, _, test = toy
        data = nn.SampleBatch(np.vstack([test.inputs[:4], np.zeros(2)]), np.r_[test.labels[:4], 0])
        certs = certify_dataset(net, data, 0.1)
        assert all(c.refused for c in certs)
        assert certs[-1].refused == "feature_norm_below_floor"
        assert certs[0].refused == "dataset_r_below_floor"

    def test_certificate_uses_reported_r(self, toy):
        net, _, test = toy
        r = min_feature_norm(net, test).r
        assert r > 0
        certs = certify_dataset(net, test, 0.1)
        assert all(abs(c.r - r) <= 1e-12 * r for c in certs)
        assert all(c.L == lipschitz_upper(net) for c in certs)

    def test_dataset_kappa_is_conservative(self, toy):
        net, _, test = toy
        per = certify_dataset(net, test, 0.1)
        ds = certify_dataset(net, test, 0.1, dataset_kappa=True)
        assert all(b.delta_cert <= a.delta_cert + 1e-15 for a, b in zip(per, ds))

    def test_bound_dominates_attack(self, toy):
        # PGD-found increases stay below the bound on a grid of radii.
        net, _, test = toy
        sub = test.subset(np.arange(40))
        L = lipschitz_upper(net)
        r = min_feature_norm(net, test).r
        certs = certify_dataset(net, sub, 0.1, r=r)
        for delta in (0.001, 0.003, 0.01):
            res = dataset_loss_robustness(net, sub, delta, 0.0, AttackConfig(norm="l2", step_size=delta / 10, steps=30))
            for c, inc in zip(certs, res.max_increase):
                bound = loss_increase_bound(delta, c.kappa_frobenius, c.k, c.m, L, r, grad_coeff=c.grad_coeff)
                assert inc <= bound
