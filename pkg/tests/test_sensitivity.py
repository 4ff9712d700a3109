import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from helpers import blobs, tiny_chain
from sensprune.errors import ConfigError, InvalidRequestError, TrainingError
from sensprune.nn import ModelSpec, Network, TrainConfig, evaluate, train
from sensprune.nn.spec import conv, dense, head, relu
from sensprune.sensitivity import (HierarchyConfig, RoundRecord, SensitivityReport, Splits, aggregate,
                                   derive_seed, flattest_round, measure_reliability, pearson, ratio_set,
                                   removal_targets, round_variance, run_hierarchy, sensitiveness, stability)

finite = st.floats(-1e3, 1e3, allow_nan=False)
gammas = st.floats(0.01, 0.99)

# (f_r, f_s, S) rows as printed, VGG-16 then ResNet-18; misprinted rows
# (VGG Conv2 and Conv13, ResNet Conv2) are left out
TABLE_ROWS = [
    ("5.1E-03", "4.0E-03", "4.7E-03"), ("5.6E-03", "4.3E-03", "5.2E-03"), ("5.2E-03", "5.2E-03", "5.2E-03"),
    ("4.1E-03", "3.3E-03", "3.8E-03"), ("3.8E-03", "3.4E-03", "3.7E-03"), ("3.7E-03", "3.4E-03", "3.6E-03"),
    ("3.4E-03", "2.9E-03", "3.2E-03"), ("3.0E-03", "1.3E-03", "2.4E-03"), ("2.9E-03", "1.7E-03", "2.5E-03"),
    ("1.5E-03", "6.8E-04", "1.2E-03"), ("1.1E-03", "3.4E-04", "8.5E-04"),
    ("2.2E-03", "4.3E-03", "2.9E-03"), ("2.4E-03", "8.5E-03", "4.4E-03"), ("2.8E-03", "3.3E-03", "3.0E-03"),
    ("3.3E-03", "2.8E-03", "3.1E-03"), ("8.0E-04", "2.7E-04", "6.2E-04"), ("1.9E-03", "9.7E-05", "1.3E-03"),
    ("1.4E-03", "2.7E-04", "1.0E-03"),
]


def half_unit(text):
    """Half of one unit in the last printed digit of a value like 4.7E-03."""
    mant, exp = text.split("E")
    decimals = len(mant.split(".")[1])
    return 0.5 * 10.0 ** (int(exp) - decimals)


def record_from(curves, p_o=0.9, r_max=0.96):
    """RoundRecord for one layer from a list of per-round curves."""
    curves = np.asarray(curves, dtype=np.float64)
    t = curves.shape[1] - 1
    ratios = [r_max * i / t for i in range(t + 1)]
    return RoundRecord([0], ratios, curves[None], p_o)


def single_conv_net():
    spec = ModelSpec("one", (1, 8, 8), [conv(1, 4), relu(), dense(4 * 64, 3), head()], prunable=[0])
    return Network.init(spec, seed=0)


@pytest.fixture(scope="module")
def trained_tiny():
    data = Splits(blobs(n=90), blobs(n=60, seed=5))
    net = Network.init(tiny_chain(), seed=1)
    train(net, data.train, TrainConfig(epochs=2, lr_schedule=[(0, 0.05)], batch_size=16))
    return net, data


def fast_cfg(**kw):
    base = dict(N=2, T=2, retrain_epochs_struct=1,
                train=TrainConfig(epochs=1, lr_schedule=[(0, 0.05), (1, 0.02)], batch_size=16))
    base.update(kw)
    return HierarchyConfig(**base)


class TestConfig:
    def test_defaults(self):
        cfg = HierarchyConfig()
        assert (cfg.r_max, cfg.T, cfg.N, cfg.lam, cfg.rho_min) == (0.96, 4, 10, 10.0, 0.6)
        assert cfg.gamma == pytest.approx(2 / 3)

    @pytest.mark.parametrize("kw", [{"gamma": 0}, {"gamma": 1}, {"r_max": 1.0}, {"lam": 0}, {"T": 0}, {"N": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            HierarchyConfig(**kw)

    def test_retrain_uses_final_lr(self):
        cfg = fast_cfg()
        rc = cfg.retrain_config(3, seed=9)
        assert rc.lr_schedule == [(0, 0.02)] and rc.epochs == 3 and rc.seed == 9


class TestRatioSet:
    def test_default(self):
        np.testing.assert_allclose(ratio_set(HierarchyConfig()), [0, 0.24, 0.48, 0.72, 0.96])

    def test_single_step(self):
        assert ratio_set(HierarchyConfig(T=1)) == [0.0, 0.96]

    @given(t=st.integers(1, 30), r=st.floats(0.05, 0.99))
    def test_size_and_step(self, t, r):
        rs = ratio_set(HierarchyConfig(T=t, r_max=r))
        assert len(rs) == t + 1 and rs[0] == 0 and rs[-1] == r
        np.testing.assert_allclose(np.diff(rs), r / t)

    def test_removal_targets(self):
        assert removal_targets(8, [0, 0.24, 0.48, 0.72, 0.96]) == [0, 2, 4, 6, 7]
        assert removal_targets(2, [0, 0.24, 0.48, 0.72, 0.96]) == [0, 1, 1, 1, 1]

    @given(n=st.integers(2, 600), t=st.integers(1, 8))
    def test_targets_monotone_and_bounded(self, n, t):
        k = removal_targets(n, ratio_set(HierarchyConfig(T=t)))
        assert k[0] == 0 and all(1 <= v <= n - 1 for v in k[1:])
        assert all(b >= a for a, b in zip(k, k[1:]))


class TestScores:
    def test_stability_scaling(self):
        assert stability(0.9, 0.5, HierarchyConfig()) == pytest.approx(0.4 / 9.6)

    @pytest.mark.parametrize("row", TABLE_ROWS)
    def test_table_rows_satisfy_convex_combination(self, row):
        f_r, f_s, s = row
        tol = 2 / 3 * half_unit(f_r) + 1 / 3 * half_unit(f_s) + half_unit(s)
        assert abs(sensitiveness(float(f_r), float(f_s), 2 / 3) - float(s)) <= tol

    @given(f_r=finite, f_s=finite, g=gammas)
    def test_convex_combination(self, f_r, f_s, g):
        s = sensitiveness(f_r, f_s, g)
        assert s == pytest.approx(g * f_r + (1 - g) * f_s, abs=1e-9)
        assert min(f_r, f_s) - 1e-9 <= s <= max(f_r, f_s) + 1e-9

    @given(x=finite, g=gammas)
    def test_equal_inputs_fixed_point(self, x, g):
        assert sensitiveness(x, x, g) == pytest.approx(x, abs=1e-9)

    def test_gamma_bounds(self):
        with pytest.raises(ConfigError):
            sensitiveness(1, 2, 1.0)


class TestVariance:
    def test_two_points(self):
        assert round_variance([0.8, 0.9]) == pytest.approx(0.0025)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.floats(-5, 5))
    def test_translation_invariant(self, xs, c):
        assert round_variance(np.array(xs) + c) == pytest.approx(round_variance(xs), abs=1e-9)

    def test_flattest_single_round(self):
        assert flattest_round(record_from([[0.9, 0.8, 0.7]]), 0) == 0

    def test_flattest_picks_min_variance(self):
        curves = [[0.9 - d, 0.9 + d] for d in np.sqrt([0.01, 0.001, 0.02])]
        assert flattest_round(record_from(curves), 0) == 1

    def test_flattest_tie_takes_first(self):
        assert flattest_round(record_from([[0.5, 0.7], [0.8, 0.6], [0.1, 0.9]]), 0) == 0


class TestPearson:
    def test_reference_value(self):
        assert pearson([1, 2, 3], [2, 4, 7]) == pytest.approx(np.corrcoef([1, 2, 3], [2, 4, 7])[0, 1])
        assert pearson([1, 2, 3], [2, 4, 7]) == pytest.approx(0.9934, abs=1e-4)

    def test_self_and_negation(self):
        a = [0.3, 0.9, 0.1, 0.5]
        assert pearson(a, a) == pytest.approx(1.0)
        assert pearson(a, [2 - v for v in a]) == pytest.approx(-1.0)

    def test_constant_is_zero(self):
        assert pearson([1, 1, 1], [1, 2, 3]) == 0.0

    @pytest.mark.parametrize("a,b", [([1, 2], [1, 2, 3]), ([1], [1])])
    def test_bad_lengths(self, a, b):
        with pytest.raises(InvalidRequestError):
            pearson(a, b)

    @settings(max_examples=60)
    @given(st.lists(st.tuples(finite, finite), min_size=2, max_size=12))
    def test_bounded(self, pairs):
        a, b = map(np.array, zip(*pairs))
        assert -1.0 <= pearson(a, b) <= 1.0

    @settings(max_examples=60)
    @given(st.lists(finite, min_size=3, max_size=12), st.floats(0.1, 10), st.floats(-10, 10),
           st.sampled_from([-1, 1]))
    def test_affine(self, xs, alpha, beta, sign):
        a = np.array(xs)
        assume(np.ptp(a) > 1e-3)
        assert pearson(a, sign * alpha * a + beta) == pytest.approx(sign, abs=1e-9)


class TestAggregate:
    def test_single_round(self):
        rec = record_from([[0.95, 0.90, 0.80]])
        cfg = HierarchyConfig()
        s = aggregate(rec, cfg).scores[0]
        f_r, f_s = 0.95 - 0.9, (0.95 - 0.80) / 9.6
        assert s.rounds_kept == 1
        assert s.f_r == pytest.approx(f_r) and s.f_s == pytest.approx(f_s)
        assert s.S == pytest.approx(2 / 3 * f_r + 1 / 3 * f_s)

    def test_identical_rounds(self):
        rec = record_from([[0.95, 0.90, 0.80]] * 3)
        s = aggregate(rec, HierarchyConfig()).scores[0]
        single = aggregate(record_from([[0.95, 0.90, 0.80]]), HierarchyConfig()).scores[0]
        assert s.rounds_kept == 3 and s.S == pytest.approx(single.S)

    def test_anticorrelated_round_excluded(self):
        # round 1 is the flattest; round 2 tracks it, round 3 runs the other way
        curves = [[0.90, 0.89, 0.88], [0.95, 0.90, 0.85], [0.80, 0.90, 0.99]]
        rec = record_from(curves)
        cfg = HierarchyConfig()
        s = aggregate(rec, cfg).scores[0]
        assert s.flattest == 0 and s.kept == [0, 1] and s.rounds_kept == 2
        per_round = [sensitiveness(c[0] - 0.9, (c[0] - c[-1]) / 9.6, 2 / 3) for c in curves[:2]]
        assert s.S == pytest.approx(np.mean(per_round))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 5))
    def test_at_least_one_round_kept(self, seed, n, t):
        grid = np.random.default_rng(seed).uniform(0, 1, size=(2, n, t + 1))
        rec = RoundRecord([0, 3], ratio_set(HierarchyConfig(T=t)), grid, 0.5)
        for s in aggregate(rec, HierarchyConfig(T=t, N=n)).scores:
            assert 1 <= s.rounds_kept <= n and s.flattest in s.kept

    def test_flattest_contribution_unchanged_by_dropping(self):
        curves = [[0.90, 0.89, 0.88], [0.95, 0.90, 0.85], [0.80, 0.90, 0.99]]
        cfg = HierarchyConfig()
        alone = aggregate(record_from(curves[:1]), cfg).scores[0]
        mixed = aggregate(record_from([curves[0], curves[2]]), cfg).scores[0]
        assert mixed.kept == [0] and mixed.S == pytest.approx(alone.S)


class TestRecords:
    def test_round_trip(self):
        rec = record_from([[0.9, 0.8], [0.7, 0.6]])
        again = RoundRecord.from_dict(rec.to_dict())
        np.testing.assert_array_equal(again.accuracies, rec.accuracies)
        assert again.p_o == rec.p_o and again.ratios == rec.ratios

    def test_schema_checked(self):
        with pytest.raises(ConfigError):
            RoundRecord.from_dict({"schema_version": 99})

    def test_csv(self):
        text = record_from([[0.9, 0.8]]).to_csv(["Conv1"])
        assert text.splitlines() == ["layer,round,ratio,accuracy", "Conv1,1,0.0000,0.9", "Conv1,1,0.9600,0.8"]

    def test_report_round_trip(self):
        rep = aggregate(record_from([[0.9, 0.8], [0.7, 0.6]]), HierarchyConfig(), ["Conv1"])
        assert SensitivityReport.from_dict(rep.to_dict()) == rep


class TestSeeds:
    def test_stable_and_distinct(self):
        assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
        assert len({derive_seed(0, l, m) for l in range(5) for m in range(5)}) == 25


class TestHierarchy:
    def test_minimal_instance(self):
        net = single_conv_net()
        data = Splits(blobs(n=30), blobs(n=30, seed=3))
        rec, rep = run_hierarchy(net, data, fast_cfg(N=1, T=1), master_seed=0)
        assert rec.accuracies.shape == (1, 1, 2) and len(rep.scores) == 1
        assert rec.p_o == evaluate(net, data.test)

    def test_reliability_shift(self, trained_tiny):
        net, data = trained_tiny
        p_o = evaluate(net, data.test)
        p0, f_r = measure_reliability(net, 0, data, fast_cfg(), p_o, seed=4)
        assert f_r == pytest.approx(p0 - p_o)

    def test_repeatable(self, trained_tiny):
        net, data = trained_tiny
        a, _ = run_hierarchy(net, data, fast_cfg(), master_seed=3)
        b, _ = run_hierarchy(net, data, fast_cfg(), master_seed=3)
        np.testing.assert_array_equal(a.accuracies, b.accuracies)

    def test_input_net_untouched(self, trained_tiny):
        net, data = trained_tiny
        w = net.params[0]["w"].copy()
        run_hierarchy(net, data, fast_cfg(N=1, T=1), master_seed=0)
        np.testing.assert_array_equal(net.params[0]["w"], w)
        assert not net.frozen

    def test_order_and_workers_invariant(self, trained_tiny):
        net, data = trained_tiny
        serial, rep = run_hierarchy(net, data, fast_cfg(), master_seed=5)
        flipped, _ = run_hierarchy(net, data, fast_cfg(), master_seed=5, order=[1, 0])
        pooled, _ = run_hierarchy(net, data, fast_cfg(), master_seed=5, workers=2)
        assert serial.accuracies.tobytes() == flipped.accuracies.tobytes() == pooled.accuracies.tobytes()
        assert [s.name for s in rep.scores] == ["Conv1", "Conv2"]

    def test_bad_order(self, trained_tiny):
        net, data = trained_tiny
        with pytest.raises(ConfigError):
            run_hierarchy(net, data, fast_cfg(), master_seed=0, order=[0, 0])

    def test_errors_carry_context(self, trained_tiny):
        net, data = trained_tiny
        cfg = fast_cfg(train=TrainConfig(epochs=1, lr_schedule=[(0, 1e30)], batch_size=16))
        with np.errstate(all="ignore"), pytest.raises(TrainingError, match="Conv1 round 1"):
            run_hierarchy(net, data, cfg, master_seed=0)

    def test_scores_are_finite(self, trained_tiny):
        net, data = trained_tiny
        _, rep = run_hierarchy(net, data, fast_cfg(), master_seed=1)
        assert all(math.isfinite(s.S) for s in rep.scores)
