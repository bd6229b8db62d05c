import math

import numpy as np
import pytest
from scipy import stats
from scipy.optimize import brentq

from ctmix import evaluation
from ctmix.errors import DomainError, NumericError
from ctmix.evaluation import (REPORT_HEADER, ComparisonRow, EstimatorSpec, cv_lpds,
                              dgp_density, dgp_marginals, dgp_mixture, holdout_lpds, lpds,
                              parse_estimator, report_csv, run_comparison, simulate_dgp)
from ctmix.marginals import normal_marginal
from ctmix.seeding import derive_seed, fold_indices


class ConstDensity:
    def __init__(self, value):
        self.value = value

    def logpdf(self, y):
        return np.full(np.atleast_2d(y).shape[0], self.value)


class StdNormal:
    def logpdf(self, y):
        return stats.norm.logpdf(np.asarray(y)).sum(axis=1)


class TestLpds:
    def test_constant_density(self):
        assert lpds(ConstDensity(-1.0), np.zeros((7, 3))) == 1.0

    def test_standard_normal_at_zero(self):
        half_log_2pi = 0.5 * math.log(2 * math.pi)
        assert lpds(StdNormal(), [[0.0]]) == pytest.approx(half_log_2pi, abs=1e-15)
        assert lpds(StdNormal(), [[0.0]]) == pytest.approx(0.9189, abs=1e-4)

    def test_pooling_is_size_weighted(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(13, 2)), rng.normal(size=(29, 2))
        pooled = lpds(StdNormal(), np.vstack([a, b]))
        weighted = (13 * lpds(StdNormal(), a) + 29 * lpds(StdNormal(), b)) / 42
        assert pooled == pytest.approx(weighted, abs=1e-12)

    def test_non_finite_row_flagged(self):
        class Bad:
            def logpdf(self, y):
                out = np.zeros(len(y))
                out[3] = -np.inf
                return out
        with pytest.raises(NumericError) as info:
            lpds(Bad(), np.zeros((5, 1)))
        assert info.value.diagnostics["row"] == 3 and "row 4" in str(info.value)

    def test_empty(self):
        with pytest.raises(DomainError):
            lpds(StdNormal(), np.zeros((0, 2)))


class TestSeeding:
    @pytest.mark.parametrize("n,B", [(10, 10), (150, 10), (178, 5), (7, 3)])
    def test_fold_partition(self, n, B):
        folds = fold_indices(n, B, 4)
        allidx = np.concatenate(folds)
        assert np.array_equal(np.sort(allidx), np.arange(n))
        sizes = [f.size for f in folds]
        assert max(sizes) - min(sizes) <= 1 and len(folds) == B

    def test_leave_one_out(self):
        assert all(f.size == 1 for f in fold_indices(12, 12, 0))

    def test_folds_depend_on_seed_only(self):
        assert all(np.array_equal(a, b)
                   for a, b in zip(fold_indices(50, 5, 3), fold_indices(50, 5, 3)))
        assert not all(np.array_equal(a, b)
                       for a, b in zip(fold_indices(50, 5, 3), fold_indices(50, 5, 4)))

    @pytest.mark.parametrize("n,B", [(3, 5), (10, 1)])
    def test_bad_folds(self, n, B):
        with pytest.raises(DomainError):
            fold_indices(n, B, 0)

    def test_derive_seed(self):
        assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
        seeds = {derive_seed(0, i) for i in range(200)} | {derive_seed(1, i) for i in range(200)}
        assert len(seeds) == 400
        assert derive_seed(0, 1, 2) != derive_seed(0, 2, 1)


class TestEstimatorSpec:
    @pytest.mark.parametrize("name,canon", [("ct-mt", "CT-Mt"), ("MTFA", "MtFA"), (" nc ", "NC"),
                                            ("Ct-MfA", "CT-MFA")])
    def test_parse(self, name, canon):
        assert parse_estimator(name) == canon

    def test_unknown(self):
        with pytest.raises(DomainError):
            EstimatorSpec("MAMN")

    def test_needs_marginals(self):
        assert not EstimatorSpec("mn").needs_marginals
        assert EstimatorSpec("tc").needs_marginals and EstimatorSpec("ct-mfa").needs_marginals


class TestGenerator:
    def test_scale_matrices(self):
        G = dgp_mixture(3)
        expected = np.array([[1, .5, .25], [.5, 1, .5], [.25, .5, 1]])
        signs = np.array([[1, -1, 1], [-1, 1, -1], [1, -1, 1]])
        assert np.allclose(G.scales[0], expected) and np.allclose(G.scales[1], expected * signs)
        assert np.allclose(G.locs, [[-2] * 3, [2] * 3])

    def test_x_stage_mean(self):
        n = 4000
        _, _, x = simulate_dgp(4, n, 1, return_stages=True)
        assert np.all(np.abs(x.mean(axis=0)) < 3 * x.std(axis=0) / math.sqrt(n))

    def test_u_stage_uniform(self):
        passes = 0
        for seed in range(20):
            _, u, _ = simulate_dgp(3, 1000, seed, return_stages=True)
            passes += all(stats.kstest(u[:, j], "uniform").pvalue > 0.01 for j in range(3))
        assert passes >= 19

    def test_y_stage_marginals(self):
        y = simulate_dgp(2, 20000, 5, "motivating")
        assert stats.kstest(y[:, 0], stats.norm(1, math.sqrt(3)).cdf).pvalue > 0.001
        t5 = stats.t(5, scale=math.sqrt(3 / 5))
        assert stats.kstest(y[:, 1], t5.cdf).pvalue > 0.001
        assert np.var(y[:, 1]) == pytest.approx(1.0, abs=0.06)

    @pytest.mark.parametrize("d", [2, 5])
    def test_density_matches_direct_formula(self, d):
        y = simulate_dgp(d, 50, 9)
        G = dgp_mixture(d)
        t5 = stats.t(5, scale=math.sqrt(3 / 5))
        u = t5.cdf(y)
        # every implied marginal is 0.5 N(-2, 1) + 0.5 N(2, 1)
        def gcdf(v):
            return 0.5 * stats.norm.cdf(v + 2) + 0.5 * stats.norm.cdf(v - 2)
        x = np.array([[brentq(lambda v: gcdf(v) - p, -30, 30, xtol=1e-14) for p in row]
                      for row in u])
        joint = np.log(0.5 * stats.multivariate_normal(G.locs[0], G.scales[0]).pdf(x)
                       + 0.5 * stats.multivariate_normal(G.locs[1], G.scales[1]).pdf(x))
        gj = np.log(0.5 * stats.norm.pdf(x + 2) + 0.5 * stats.norm.pdf(x - 2)).sum(axis=1)
        direct = joint + t5.logpdf(y).sum(axis=1) - gj
        assert np.allclose(dgp_density(d).logpdf(y), direct, atol=1e-7)

    def test_oracle_lpds(self):
        # Monte Carlo entropy of the generating density, 200k draws
        for d, ref in ((2, 2.0214), (5, 3.8121)):
            assert lpds(dgp_density(d), simulate_dgp(d, 20000, 77)) == pytest.approx(ref, abs=0.03)

    def test_errors(self):
        with pytest.raises(DomainError):
            simulate_dgp(1, 10, 0)
        with pytest.raises(DomainError):
            simulate_dgp(2, 0, 0)
        with pytest.raises(DomainError):
            dgp_mixture(3, "motivating")

    def test_seeded(self):
        assert np.array_equal(simulate_dgp(3, 20, 4), simulate_dgp(3, 20, 4))


class TestCrossValidation:
    def test_fixed_density_equals_full_lpds(self, monkeypatch):
        y = np.random.default_rng(0).normal(size=(37, 2))
        monkeypatch.setattr(evaluation, "fit_estimator", lambda *a, **k: StdNormal())
        rep = cv_lpds(y, EstimatorSpec("MN"), B=5, seed=2)
        assert rep.lpds == pytest.approx(lpds(StdNormal(), y), abs=1e-12)
        assert len(rep.fold_scores) == 5 and not rep.partial

    def test_failing_fold_flagged(self, monkeypatch):
        calls = []

        def fake(spec, train, seed, marg):
            calls.append(seed)
            if len(calls) == 2:
                raise NumericError("boom")
            return StdNormal()
        monkeypatch.setattr(evaluation, "fit_estimator", fake)
        rep = cv_lpds(np.zeros((20, 1)), EstimatorSpec("MN"), B=4)
        assert rep.partial and math.isinf(rep.lpds) and "fold 2" in rep.failed[0]
        assert sum(math.isinf(s) for s in rep.fold_scores) == 1

    def test_reproducible(self):
        y = simulate_dgp(2, 120, 3)
        spec = EstimatorSpec("MN", K_init=3)
        a, b = cv_lpds(y, spec, B=3, seed=5), cv_lpds(y, spec, B=3, seed=5)
        assert a.lpds == b.lpds and a.fold_scores == b.fold_scores

    def test_fixed_marginals_recorded(self):
        y = simulate_dgp(2, 100, 1)
        spec = EstimatorSpec("NC", marginals=dgp_marginals(2))
        rep = cv_lpds(y, spec, B=4, seed=0)
        assert rep.marginal_classes == ["fixed:parametric"] * 2
        assert math.isfinite(rep.lpds)

    def test_class_selection_runs_once(self, monkeypatch):
        y = np.random.default_rng(1).normal(size=(40, 2))
        spec = EstimatorSpec("NC", candidates=("kernel", "univ_mix_normal"))
        seen = []
        real = evaluation.fit_estimator

        def spy(spec_, train, seed, marg):
            seen.append(tuple(marg))
            return real(spec_, train, seed, marg)
        monkeypatch.setattr(evaluation, "fit_estimator", spy)
        rep = cv_lpds(y, spec, B=4, seed=0)
        assert len(set(seen)) == 1 and list(seen[0]) == rep.marginal_classes

    def test_needs_two_folds(self):
        with pytest.raises(DomainError):
            cv_lpds(np.zeros((10, 1)), EstimatorSpec("MN"), B=1)


class TestComparison:
    def test_one_row(self):
        y = np.random.default_rng(0).normal(size=(60, 2))
        rows = run_comparison([EstimatorSpec("MN", K_init=2)], data=y, B=3)
        assert len(rows) == 1 and rows[0].estimator == "MN" and rows[0].B == 3

    def test_holdout_and_simulation_reproducible(self):
        specs = [EstimatorSpec("MN", K_init=2), EstimatorSpec("NC")]
        a = run_comparison(specs, simulate={"d": 2, "n": 150}, reps=2, seed=4, n_test=200)
        b = run_comparison(specs, simulate={"d": 2, "n": 150}, reps=2, seed=4, n_test=200)
        assert [r.scores for r in a] == [r.scores for r in b]
        assert all(len(r.scores) == 2 and all(math.isfinite(s) for s in r.scores) for r in a)

    def test_holdout_failure_isolated(self, monkeypatch):
        def fake(spec, train, seed, marg=None):
            if spec.id == "Mt":
                raise NumericError("boom")
            return StdNormal()
        monkeypatch.setattr(evaluation, "fit_estimator", fake)
        rep = holdout_lpds(np.zeros((5, 2)), np.zeros((5, 2)), EstimatorSpec("Mt"))
        assert rep.partial and math.isinf(rep.lpds)
        ok = holdout_lpds(np.zeros((5, 2)), np.zeros((5, 2)), EstimatorSpec("MN"))
        assert ok.lpds == pytest.approx(math.log(2 * math.pi))

    def test_needs_protocol(self):
        with pytest.raises(DomainError):
            run_comparison([EstimatorSpec("MN")])
        with pytest.raises(DomainError):
            run_comparison([], data=np.zeros((4, 1)), B=2)

    def test_report_layout(self):
        rows = [ComparisonRow("CT-Mt", [1.0, 2.0], [0.0, 0.0], 500, 5, 0, 1),
                ComparisonRow("MN", [3.5], [1.25], 500, 5, 0, 1)]
        text = report_csv(rows)
        lines = text.split("\n")
        assert lines[0] == REPORT_HEADER == "estimator,mean_lpds,sd_lpds,mean_seconds,n,d,B,seed"
        assert lines[1] == "CT-Mt,1.5,0.7071067811865476,0.0,500,5,0,1"
        assert lines[2] == "MN,3.5,0.0,1.25,500,5,0,1" and text.endswith("\n") and "\r" not in text

    def test_truth_beats_fitted(self):
        # the generating density should not lose to fitted estimators on average
        gaps = []
        for r in range(10):
            train = simulate_dgp(2, 300, derive_seed(11, r, 1))
            test = simulate_dgp(2, 500, derive_seed(11, r, 2))
            truth = lpds(dgp_density(2), test)
            for spec in (EstimatorSpec("MN", K_init=3),
                         EstimatorSpec("NC", marginals=dgp_marginals(2))):
                gaps.append(holdout_lpds(train, test, spec, r).lpds - truth)
        assert np.mean(gaps) >= -0.05


def test_normal_marginal_is_parametric():
    assert normal_marginal().kind == "parametric"
