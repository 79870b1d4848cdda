import numpy as np
import pytest

from curvlab import nn
from curvlab.analysis import (
    basin_report,
    fit_stump,
    histogram,
    normalized_series,
    peak_then_decay,
    scale_sweep,
    spearman,
    stump_detector_cv,
    take_off,
    trajectory_metrics,
)
from curvlab.config import RunConfig
from curvlab.robustness import AttackConfig, pgd_attack
from oracles import spearman_ref

LINF = AttackConfig(norm="linf", epsilon=0.4, step_size=0.05, steps=15)


@pytest.fixture(scope="module")
def sweep(toy):
    net, _, test = toy
    sub = test.subset(np.arange(100))
    return net, sub, scale_sweep(net, [0.5, 1.0, 5.0], RunConfig().attack_config(), sub)


class TestSeries:
    def test_normalized_range(self, gen):
        v = normalized_series(gen.standard_normal(20))
        assert v.min() == 0.0 and v.max() == 1.0

    def test_normalized_constant(self):
        np.testing.assert_array_equal(normalized_series(np.full(5, 3.0)), np.zeros(5))

    def test_peak_then_decay(self):
        assert peak_then_decay(np.array([1.0, 5.0, 0.5]))
        assert not peak_then_decay(np.array([1.0, 2.0, 3.0]))
        assert not peak_then_decay(np.array([1.0, 5.0, 4.0]))

    def test_histogram_counts(self, gen):
        v = gen.standard_normal(500)
        rows = histogram(v, bins=30)
        assert len(rows) == 30 and sum(r[2] for r in rows) == 500
        assert rows[0][0] == v.min() and rows[-1][1] == v.max()


class TestTakeOff:
    def test_flat_is_undefined(self):
        assert take_off(np.full(10, 0.3)) is None

    def test_step(self):
        loss = np.r_[np.zeros(7), np.ones(5)]
        assert take_off(loss) == 7

    def test_monotone_in_tau(self, gen):
        loss = np.cumsum(gen.uniform(0, 1, 30))
        vals = [take_off(loss, tau) for tau in (0.05, 0.1, 0.3, 0.6, 0.9)]
        assert vals == sorted(vals)

    @pytest.mark.parametrize("tau", [0.0, 1.0])
    def test_invalid_tau(self, tau):
        with pytest.raises(ValueError):
            take_off(np.arange(3.0), tau)

    def test_too_short(self):
        with pytest.raises(ValueError):
            take_off(np.array([1.0]))


class TestSpearman:
    def test_matches_reference(self, gen):
        x = gen.integers(0, 8, 40).astype(float)
        y = x + gen.integers(0, 5, 40)
        assert spearman(x, y).rho == pytest.approx(spearman_ref(x, y), abs=1e-12)

    def test_degenerate_ties(self):
        res = spearman(np.ones(10), np.arange(10.0))
        assert res.rho == 0.0 and res.degenerate_ties

    def test_too_few_points(self):
        assert spearman([1.0, 2.0], [2.0, 1.0]).rho is None

    def test_synthetic_inverse_relation(self, gen):
        # Sharper samples take off sooner.
        kappa = gen.uniform(0.1, 10, 200)
        series = [np.r_[np.zeros(int(30 / k) + 1), np.linspace(0, 1, 10)] for k in kappa]
        rep = basin_report(series, kappa)
        assert rep.defined == 200
        assert rep.correlation.rho < -0.9

    def test_basin_length_check(self):
        with pytest.raises(ValueError):
            basin_report([np.arange(3.0)], [1.0, 2.0])


class TestStump:
    def test_separated(self, gen):
        v = np.r_[gen.uniform(0, 1, 50), gen.uniform(2, 3, 50)]
        lab = np.r_[np.zeros(50), np.ones(50)].astype(int)
        thr, d, _, acc = fit_stump(v, lab)
        assert acc == 1.0 and d == 1 and 1 < thr < 2
        assert stump_detector_cv(v, lab).mean_accuracy == 1.0

    def test_reversed_direction(self, gen):
        v = np.r_[gen.uniform(2, 3, 20), gen.uniform(0, 1, 20)]
        lab = np.r_[np.zeros(20), np.ones(20)].astype(int)
        assert fit_stump(v, lab)[1] == -1

    def test_permuted_labels_near_chance(self, gen):
        v = gen.standard_normal(400)
        lab = gen.permutation(np.r_[np.zeros(200), np.ones(200)].astype(int))
        assert abs(stump_detector_cv(v, lab).mean_accuracy - 0.5) < 0.1

    def test_monotone_transform_invariance(self, gen):
        v = gen.uniform(0.1, 5, 60)
        lab = (v + gen.normal(0, 1, 60) > 2.5).astype(int)
        a = fit_stump(v, lab)
        b = fit_stump(np.exp(3 * v), lab)
        assert (a[1], a[2], a[3]) == (b[1], b[2], b[3])
        ca = stump_detector_cv(v, lab, seed=3)
        cb = stump_detector_cv(np.log(v), lab, seed=3)
        np.testing.assert_array_equal(ca.accuracies, cb.accuracies)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            stump_detector_cv(np.arange(10.0), np.zeros(10))

    def test_tiny_class_rejected(self):
        with pytest.raises(ValueError):
            stump_detector_cv(np.arange(10.0), np.r_[np.zeros(8), np.ones(2)], folds=5)

    def test_deterministic(self, gen):
        v = gen.standard_normal(50)
        lab = np.arange(50) % 2
        assert stump_detector_cv(v, lab, seed=1).accuracies.tolist() == stump_detector_cv(v, lab, seed=1).accuracies.tolist()


class TestTrajectories:
    def test_uncanny_deterministic(self, toy):
        net, _, test = toy
        sub = test.subset(np.arange(40))
        a = trajectory_metrics(net, pgd_attack(net, sub, LINF))
        b = trajectory_metrics(net, pgd_attack(net, sub, LINF))
        assert (a.flipped, a.uncanny) == (b.flipped, b.uncanny)
        assert a.flipped > 0

    def test_reevaluation_matches_attack(self, toy):
        net, _, test = toy
        trajs = pgd_attack(net, test.subset(np.arange(5)), LINF)
        summ = trajectory_metrics(net, trajs)
        for t, m in zip(trajs, summ.metrics):
            np.testing.assert_array_equal(t.loss, m.loss)

    def test_short_trajectories_not_counted(self, toy):
        net, _, test = toy
        short = pgd_attack(net, test.subset(np.arange(20)), AttackConfig(norm="linf", epsilon=0.5, step_size=0.25, steps=3))
        assert trajectory_metrics(net, short).flipped == 0


class TestScaleSweep:
    def test_unit_scale_is_baseline(self, sweep):
        net, sub, res = sweep
        base = pgd_attack(net, sub, RunConfig().attack_config())
        robust = np.mean([t.predicted[-1] == t.label for t in base])
        assert res.entries[1].robust_accuracy == robust

    def test_transfer_and_clean(self, sweep):
        _, _, res = sweep
        assert np.all(res.column("transfer_rate") == 1.0)
        assert len(set(res.column("clean_accuracy"))) == 1

    def test_clean_sharpness_collapses_with_scale(self, sweep):
        _, _, res = sweep
        assert np.all(np.diff(res.column("mean_kappa_spectral")) < 0)

    def test_rejects_nonpositive_scale(self, toy):
        with pytest.raises(ValueError):
            scale_sweep(toy[0], [0.0], AttackConfig(), toy[2])

    def test_take_off_nondecreasing_l2(self, toy):
        # Per sample under the l2 budget, wherever the take-off is defined.
        net, _, test = toy
        sub = test.subset(np.arange(60))
        atk = RunConfig().attack_config()
        rows = [[take_off(t.loss) for t in pgd_attack(nn.scale_penultimate(net, s), sub, atk)] for s in (0.25, 0.5, 1.0, 2.5)]
        for a, b in zip(rows, rows[1:]):
            for ta, tb in zip(a, b):
                if ta is not None and tb is not None:
                    assert tb >= ta

    def test_mean_take_off_nondecreasing_linf(self, toy):
        net, _, test = toy
        sub = test.subset(np.arange(60))
        means = []
        for s in (0.25, 1.0, 5.0):
            offs = [take_off(t.loss) for t in pgd_attack(nn.scale_penultimate(net, s), sub, LINF)]
            means.append(np.mean([v for v in offs if v is not None]))
        assert means == sorted(means)
