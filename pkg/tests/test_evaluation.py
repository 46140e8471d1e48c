import json

import numpy as np
import pytest
from scipy import stats

from monogp.data import SimulationConfig, VirtualConfig, build_virtual_sets, simulate, standardize
from monogp.errors import ConfigError
from monogp.evaluation import (CvConfig, CvScheme, EvalReport, comparison_table, compare_variants,
                               ks_critical, ks_uniform, pit_histogram, run_cv)
from monogp.inference import PosteriorSamples, PredictiveDistribution, SamplerConfig
from monogp.kernel import Hyperparameters, InputPoint
from monogp.model import ObservationSet

FAST = CvConfig(sampler=SamplerConfig(chains=2, warmup=30, draws=20), max_draws=20, seed=1)


@pytest.fixture(scope="module")
def full_obs():
    return build_virtual_sets(standardize(simulate(seed=0)), VirtualConfig(saturation=True))


@pytest.fixture(scope="module")
def small_obs():
    cfg = SimulationConfig(n_locations=4, n_times=6)
    return build_virtual_sets(standardize(simulate(cfg, seed=2)), VirtualConfig(sign_times=(3,)))


class TestFolds:
    def test_cv1_excludes_anchored_rows(self, full_obs):
        folds = CvScheme("cv1").folds(full_obs)
        assert len(folds) == 130
        assert all(next(iter(f.keys))[1] != 0 for f in folds)

    def test_cv2_one_fold_per_location(self, full_obs):
        folds = CvScheme("cv2").folds(full_obs)
        assert len(folds) == 13
        for f in folds:
            sub = full_obs.without(f.keys)
            assert len(full_obs.regular) - len(sub.regular) == 11
            assert len(full_obs.zero_start_A) - len(sub.zero_start_A) == 1
            assert len(full_obs.saturation_B) - len(sub.saturation_B) == 1
            assert len(full_obs.sign_C) - len(sub.sign_C) == 2

    def test_cv3_holds_out_last_times(self, full_obs):
        folds = CvScheme("cv3", tail_length=7).folds(full_obs)
        assert len(folds) == 13
        assert {t for f in folds for _, t in f.keys} == set(range(4, 11))
        assert "T-tail_length" in CvScheme("cv3").describe()

    def test_cv3_tail_too_long(self, full_obs):
        with pytest.raises(ConfigError):
            CvScheme("cv3", tail_length=11).folds(full_obs)

    def test_unknown_scheme(self):
        with pytest.raises(ConfigError):
            CvScheme("cv4")

    @pytest.mark.parametrize("kind", ["cv1", "cv2", "cv3"])
    def test_fold_exclusivity(self, full_obs, kind):
        for f in CvScheme(kind).folds(full_obs):
            sub = full_obs.without(f.keys)
            train_keys = ({p.key for p, _ in sub.regular} | {p.key for p in sub.zero_start_A}
                          | {d.key for d in sub.saturation_B} | {d.key for d, _ in sub.sign_C})
            assert train_keys.isdisjoint(f.keys)


class TestMetrics:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.mean = rng.normal(size=500)
        self.sd = 0.5
        self.y = self.mean + self.sd * rng.standard_normal(500)

    def dist(self, scale):
        m = np.tile(self.mean, (4, 1))
        return PredictiveDistribution(mean=self.mean, lower95=self.mean, upper95=self.mean,
                                      component_mean=m,
                                      component_var=np.full_like(m, (scale * self.sd) ** 2))

    def test_wider_predictions_lower_elpd(self):
        assert np.mean(self.dist(10).log_density(self.y)) < np.mean(self.dist(1).log_density(self.y))

    def test_log_density_single_component(self):
        ref = stats.norm.logpdf(self.y, self.mean, self.sd)
        assert np.allclose(self.dist(1).log_density(self.y), ref, atol=1e-12)

    def test_mixture_density(self):
        pd = PredictiveDistribution(mean=np.zeros(1), lower95=np.zeros(1), upper95=np.zeros(1),
                                    component_mean=np.array([[-1.0], [2.0]]),
                                    component_var=np.array([[1.0], [4.0]]))
        ref = np.log(0.5 * stats.norm.pdf(0.3, -1, 1) + 0.5 * stats.norm.pdf(0.3, 2, 2))
        assert pd.log_density([0.3])[0] == pytest.approx(ref, abs=1e-12)

    def test_pit_edges(self):
        draws = np.random.default_rng(1).standard_normal((4000, 2))
        pd = PredictiveDistribution(mean=np.zeros(2), lower95=np.zeros(2), upper95=np.zeros(2),
                                    draw_matrix=draws)
        pit = pd.pit([np.median(draws[:, 0]), 100.0])
        assert pit[0] == pytest.approx(0.5, abs=1e-3)
        assert pit[1] == 1.0

    def test_pit_without_draws(self):
        pd = PredictiveDistribution(mean=np.zeros(1), lower95=np.zeros(1), upper95=np.zeros(1),
                                    draw_matrix=np.zeros((0, 1)))
        with pytest.raises(ConfigError):
            pd.pit([0.0])
        with pytest.raises(ConfigError):
            CvConfig(max_draws=0)

    def test_ks(self):
        u = np.random.default_rng(2).uniform(size=100)
        assert ks_uniform(u) == pytest.approx(stats.kstest(u, "uniform").statistic)
        assert ks_critical(100) == pytest.approx(0.134, abs=1e-3)
        with pytest.raises(ConfigError):
            ks_uniform([])

    def test_histogram(self):
        edges, counts = pit_histogram([0.05, 0.15, 0.95, 1.0], bins=10)
        assert counts.sum() == 4 and counts[0] == 1 and counts[-1] == 2
        assert edges[0] == 0.0 and edges[-1] == 1.0
        with pytest.raises(ConfigError):
            pit_histogram([1.2])


def duplicated_locations(sigma=1e-4):
    # location 1 repeats location 0 exactly, so each is predicted from its twin
    ys = [0.0, 0.5, 0.9, 1.2]
    regular = []
    for loc in range(2):
        regular += [(InputPoint((0.3, float(t)), loc, t), y) for t, y in enumerate(ys)]
    return ObservationSet(regular=regular)


def test_perfect_prediction_mse():
    hp = Hyperparameters(1.0, (1.0, 2.0), 1e-4, groups=(0, 1))
    cfg = CvConfig(refit="never", max_draws=1)
    rep = run_cv(duplicated_locations(), CvScheme("cv2"), "without_derivatives", cfg,
                 full_samples=PosteriorSamples.single(hp))
    assert rep.mse < 1e-6


def test_mse_ignores_predictive_variance():
    obs = duplicated_locations()
    reps = []
    for sigma in (1e-4, 0.5):
        hp = Hyperparameters(1.0, (1.0, 2.0), sigma, groups=(0, 1))
        rep = run_cv(obs, CvScheme("cv2"), "without_derivatives",
                     CvConfig(refit="never", max_draws=1), full_samples=PosteriorSamples.single(hp))
        reps.append(rep)
    # the mean depends on sigma only through the training noise, which is tiny here
    means = [np.array([r["mean"] for r in rep.pointwise]) for rep in reps]
    y = np.array([r["y"] for r in reps[0].pointwise])
    for rep, m in zip(reps, means):
        assert rep.mse == pytest.approx(np.mean((y - m) ** 2))
    assert reps[1].elpd < reps[0].elpd


@pytest.fixture(scope="module")
def cv2(small_obs):
    return compare_variants(small_obs, CvScheme("cv2"), FAST)


class TestRunCv:
    def test_report_invariants(self, cv2, small_obs):
        for variant, rep in cv2.items():
            assert rep.variant == variant and len(rep.folds) == 4
            assert rep.mse >= 0 and np.isfinite(rep.elpd)
            assert rep.loo_pit == []
            assert rep.elpd == pytest.approx(np.mean([f["elpd"] for f in rep.folds]))
            assert len(rep.pointwise) == len(small_obs.regular)
            assert rep.metadata["refit"] is True

    def test_series_per_location(self, cv2):
        ser = cv2["with_derivatives"].series()
        assert len(ser) == 4
        for times, means in ser.values():
            assert times.tolist() == list(range(6)) and means.shape == (6,)

    def test_cv1_pit(self, small_obs):
        rep = run_cv(small_obs, CvScheme("cv1"), "with_derivatives", FAST)
        assert len(rep.folds) == 20 and len(rep.loo_pit) == 20
        assert all(0.0 <= v <= 1.0 for v in rep.loo_pit)
        assert rep.metadata["refit"] is False

    def test_cv3_keeps_other_locations_signs(self, small_obs):
        fold = CvScheme("cv3", tail_length=3).folds(small_obs)[0]
        train = small_obs.without(fold.keys)
        assert len(train.sign_C) == len(small_obs.sign_C) - 1
        assert all(d.key[0] != 0 for d, _ in train.sign_C)

    def test_outputs(self, cv2, tmp_path):
        rep = cv2["with_derivatives"]
        rep.write_json(tmp_path / "r.json")
        back = EvalReport.from_dict(json.loads((tmp_path / "r.json").read_text()))
        assert back.elpd == rep.elpd and back.folds == rep.folds
        rep.write_csv(tmp_path / "r.csv")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0].startswith("fold,n_heldout") and len(lines) == 5
        table = comparison_table({("cv2", v): r for v, r in cv2.items()})
        assert [r["statistic"] for r in table] == ["elpd", "elpd_sum", "mse"]
        assert table[0]["with_derivatives"] == rep.elpd
