"""
Acceptance criteria, one test each.  Every test prints a single PASS/FAIL
line; the same lines are repeated in the terminal summary.
"""
import time
from functools import lru_cache

import numpy as np
import pytest

from conftest import ACCEPTANCE
from monogp.data import (SimulationConfig, VirtualConfig, build_virtual_sets, is_nondecreasing,
                         simulate, simulate_gp, standardize)
from monogp.evaluation import CvConfig, CvScheme, ks_critical, ks_uniform, run_cv
from monogp.inference import (GaussianState, SamplerConfig, condition_gaussian,
                              effective_sample_size, sample_hyperparameters,
                              sample_latents_constrained, split_rhat)
from monogp.kernel import (DEFAULT_GROUPS, JITTER_START, DerivativeSpec, Hyperparameters, InputPoint,
                           cov_deriv_deriv, cov_deriv_value, cross_cov, grid_inputs,
                           kronecker_cov, se_ard_cov)
from monogp.model import DIRAC_VARIANCE, ObservationSet

pytestmark = pytest.mark.acceptance


def verdict(n, ok, detail):
    line = f"CRITERION {n} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE.append(line)
    assert ok, line


def random_hp(rng, groups=DEFAULT_GROUPS):
    n = max(groups) + 1
    return Hyperparameters(rng.uniform(0.5, 2.0), tuple(rng.uniform(0.7, 3.0, n)),
                           rng.uniform(0.05, 0.5), groups)


# -- 1. derivative kernels against finite differences -----------------------------------

def test_criterion_1_derivative_kernels():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    h = 1e-4
    worst1 = worst2 = 0.0
    for _ in range(200):
        hp = random_hp(rng)
        x1, x2 = rng.normal(size=6), rng.normal(size=6)
        g, k = rng.integers(6, size=2)
        e1, e2 = np.zeros(6), np.zeros(6)
        e1[g], e2[k] = h, h
        fd1 = (se_ard_cov(x1 + e1, x2, hp) - se_ard_cov(x1 - e1, x2, hp)) / (2 * h)
        fd2 = (se_ard_cov(x1 + e1, x2 + e2, hp) - se_ard_cov(x1 + e1, x2 - e2, hp)
               - se_ard_cov(x1 - e1, x2 + e2, hp) + se_ard_cov(x1 - e1, x2 - e2, hp)) / (4 * h * h)
        # scalar route and vectorized matrix route
        a1 = cov_deriv_value(DerivativeSpec(InputPoint(x1), g), InputPoint(x2), hp)
        a2 = cov_deriv_deriv(DerivativeSpec(InputPoint(x1), g), DerivativeSpec(InputPoint(x2), k),
                             hp)
        M = cross_cov(np.array([x1, x1]), [g, g], np.array([x2, x2]), [-1, k], hp)
        worst1 = max(worst1, abs(a1 - fd1) / max(abs(fd1), 1e-3),
                     abs(M[0, 0] - fd1) / max(abs(fd1), 1e-3))
        worst2 = max(worst2, abs(a2 - fd2) / max(abs(fd2), 1e-3),
                     abs(M[1, 1] - fd2) / max(abs(fd2), 1e-3))
    dt = time.perf_counter() - t0
    verdict(1, worst1 < 1e-5 and worst2 < 1e-4 and dt < 5,
            f"max rel err first order {worst1:.2e} (<1e-5), second order {worst2:.2e} "
            f"(<1e-4), {dt:.2f}s (<5s)")


# -- 2. Kronecker product against direct evaluation ------------------------------------

def test_criterion_2_kronecker_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(20):
        n, T = rng.integers(1, 11, size=2)
        hp = random_hp(rng)
        XS = rng.normal(size=(n, 5))
        times = np.sort(rng.uniform(0, 10, T))
        K = kronecker_cov(XS, times, hp)
        X = grid_inputs(XS, times)
        rho = hp.rho
        direct = np.empty((n * T, n * T))
        for a in range(n * T):
            for b in range(n * T):
                direct[a, b] = hp.alpha ** 2 * np.exp(-0.5 * np.sum(((X[a] - X[b]) / rho) ** 2))
        worst = max(worst, np.max(np.abs(K - direct)))
    dt = time.perf_counter() - t0
    verdict(2, worst < 1e-12 and dt < 5,
            f"max abs err {worst:.2e} over 20 shapes (<1e-12), {dt:.2f}s (<5s)")


# -- 3. exact conditioning against a dense oracle ---------------------------------------

def _oracle_cov(A, wa, B, wb, alpha, rho):
    """Independent elementwise value/derivative covariance."""
    out = np.empty((len(A), len(B)))
    for i, (x, g) in enumerate(zip(A, wa)):
        for j, (y, k) in enumerate(zip(B, wb)):
            d = x - y
            base = alpha ** 2 * np.exp(-0.5 * np.sum((d / rho) ** 2))
            if g < 0 and k < 0:
                out[i, j] = base
            elif g >= 0 and k < 0:
                out[i, j] = -base * d[g] / rho[g] ** 2
            elif g < 0:
                out[i, j] = base * d[k] / rho[k] ** 2
            else:
                out[i, j] = base * ((g == k) / rho[g] ** 2 - d[g] * d[k] / (rho[g] ** 2 * rho[k] ** 2))
    return out


def test_criterion_3_exact_conditioning():
    t0 = time.perf_counter()
    rng = np.random.default_rng(103)
    worst = 0.0
    for _ in range(20):
        hp = random_hp(rng)
        n_loc, n_t = rng.integers(2, 5), rng.integers(3, 9)
        feats = rng.normal(size=(n_loc, 5))
        pts = [InputPoint(tuple(np.r_[feats[i], float(t)]), i, t)
               for i in range(n_loc) for t in range(n_t)]
        keep = rng.permutation(len(pts))[:min(len(pts), 40 - n_loc - 2)]
        regular = [(pts[k], rng.normal()) for k in sorted(keep)]
        A = [p for p in pts if p.time_index == 0]
        B = [DerivativeSpec(p, 5) for p in pts if p.time_index == n_t - 1][:2]
        obs = ObservationSet(regular=regular, zero_start_A=A, saturation_B=B)
        test = [InputPoint(tuple(np.r_[rng.normal(size=5), rng.uniform(0, n_t)])),
                DerivativeSpec(InputPoint(tuple(np.r_[feats[0], 1.5])), 5),
                DerivativeSpec(InputPoint(tuple(np.r_[feats[0], 1.5])), 2)]

        # oracle: dense formula with a generic solver; A and B rows use the tiny variance
        # and every row carries the starting diagonal jitter of the factorization policy
        X = np.array([p.values for p, y in regular if p.time_index != 0]
                     + [p.values for p in A] + [d.point.values for d in B])
        w = np.array([-1] * (len(X) - len(B)) + [5] * len(B))
        y = np.array([y for p, y in regular if p.time_index != 0] + [0.0] * (len(A) + len(B)))
        n_reg = len(y) - len(A) - len(B)
        noise = np.r_[np.full(n_reg, hp.sigma ** 2), np.full(len(A) + len(B), DIRAC_VARIANCE)]
        Xt = np.array([t.values if isinstance(t, InputPoint) else t.point.values for t in test])
        wt = np.array([-1 if isinstance(t, InputPoint) else t.wrt_dimension for t in test])
        K = _oracle_cov(X, w, X, w, hp.alpha, hp.rho) + np.diag(noise + JITTER_START)
        Ks = _oracle_cov(Xt, wt, X, w, hp.alpha, hp.rho)
        mean = Ks @ np.linalg.solve(K, y)
        cov = _oracle_cov(Xt, wt, Xt, wt, hp.alpha, hp.rho) - Ks @ np.linalg.solve(K, Ks.T)

        pd = condition_gaussian(obs, test, hp)
        assert GaussianState(obs, hp, with_signs=False).jitter == JITTER_START
        worst = max(worst, np.max(np.abs(pd.mean - mean)), np.max(np.abs(pd.cov - cov)))
    dt = time.perf_counter() - t0
    verdict(3, worst < 1e-8 and dt < 10,
            f"max abs deviation from dense oracle {worst:.2e} on 20 problems (<1e-8), "
            f"{dt:.2f}s (<10s)")


# -- shared cross-validation runs (criteria 4 and 5) --------------------------------------

CV_CONFIG = CvConfig(sampler=SamplerConfig(chains=3, warmup=500, draws=500), max_draws=200)
_timings = {}


@lru_cache(maxsize=None)
def cv_pair(seed, scheme):
    t0 = time.perf_counter()
    obs = build_virtual_sets(standardize(simulate(SimulationConfig(), seed=seed)), VirtualConfig())
    out = {v: run_cv(obs, CvScheme(scheme), v, CV_CONFIG)
           for v in ("with_derivatives", "without_derivatives")}
    _timings[(seed, scheme)] = time.perf_counter() - t0
    return out


def test_criterion_4_constraint_satisfaction():
    t0 = time.perf_counter()
    reps = cv_pair(0, "cv2")
    fractions, starts = {}, {}
    for v, rep in reps.items():
        series = rep.series()
        fractions[v] = float(np.mean([is_nondecreasing(m)[0] for _, m in series.values()]))
        starts[v] = max(abs(m[list(t).index(0)]) for t, m in series.values())
    dt = time.perf_counter() - t0
    ok = fractions["with_derivatives"] >= 0.95 and starts["with_derivatives"] < 1e-3 and dt < 600
    verdict(4, ok,
            f"CV2 non-decreasing mean series {fractions['with_derivatives']:.1%} (>=95%), "
            f"max |mean(t=0)| {starts['with_derivatives']:.1e} (<1e-3), {dt:.0f}s (<600s); "
            f"unconstrained model: {fractions['without_derivatives']:.1%} non-decreasing")


def test_criterion_5_ordering():
    wins = {"cv1": 0, "cv2": 0, "cv3": 0}
    mse_wins = 0
    rows = []
    for seed in range(10):
        for scheme in ("cv2", "cv1", "cv3"):
            reps = cv_pair(seed, scheme)
            w, wo = reps["with_derivatives"], reps["without_derivatives"]
            wins[scheme] += w.elpd > wo.elpd
            if scheme == "cv2":
                mse_wins += w.mse <= wo.mse
            rows.append(f"{seed}/{scheme}: elpd {w.elpd:.3f} vs {wo.elpd:.3f}, "
                        f"mse {w.mse:.3f} vs {wo.mse:.3f}")
    # sum of per-pair fit times, so a pair cached by criterion 4 still counts
    dt = sum(_timings.values())
    print("\n".join(rows))
    ok = (wins["cv2"] >= 9 and wins["cv1"] >= 8 and wins["cv3"] >= 8 and mse_wins >= 8
          and dt < 7200)
    verdict(5, ok,
            f"ELPD(with) > ELPD(without): CV2 {wins['cv2']}/10 (>=9), CV1 {wins['cv1']}/10 (>=8), "
            f"CV3 {wins['cv3']}/10 (>=8); CV2 MSE(with) <= MSE(without) {mse_wins}/10 (>=8); "
            f"{dt / 60:.0f} min (<120)")


# -- 6. LOO-PIT calibration ----------------------------------------------------------

def test_criterion_6_loo_pit_calibration():
    t0 = time.perf_counter()
    hp = Hyperparameters.isotropic(1.0, 2.0, 0.3)
    cfg = CvConfig(sampler=SamplerConfig(chains=3, warmup=1000, draws=1000, thin=2),
                   max_draws=300)
    passed, dists = 0, []
    for rep in range(10):
        raw = simulate_gp(10, 10, hp, seed=600 + rep)
        obs = build_virtual_sets(standardize(raw), VirtualConfig(zero_start=False,
                                                                 derivatives=False))
        pit = run_cv(obs, CvScheme("cv1"), "without_derivatives",
                     CvConfig(sampler=cfg.sampler, max_draws=cfg.max_draws, seed=rep)).loo_pit
        d = ks_uniform(pit)
        dists.append(d)
        passed += d < ks_critical(len(pit))
    dt = time.perf_counter() - t0
    verdict(6, passed >= 8 and dt < 1800,
            f"KS below 5% critical value ({ks_critical(100):.3f}) in {passed}/10 replications "
            f"(>=8), distances {np.round(dists, 3).tolist()}, {dt / 60:.1f} min (<30)")


# -- 7. simulation-based coverage ---------------------------------------------------------

def test_criterion_7_sampler_validity():
    t0 = time.perf_counter()
    truth = Hyperparameters.isotropic(1.0, 2.0, 0.1)
    cfg = SamplerConfig(chains=3, warmup=5000, draws=4000, thin=10)
    covered = {"alpha": 0, "rho_time": 0, "sigma": 0}
    worst_rhat = 0.0
    for rep in range(20):
        raw = simulate_gp(5, 8, truth, seed=700 + rep)
        obs = build_virtual_sets(standardize(raw), VirtualConfig(zero_start=False,
                                                                 derivatives=False))
        s = sample_hyperparameters(obs, config=SamplerConfig(**{**cfg.__dict__, "seed": rep}))
        worst_rhat = max(worst_rhat, float(np.max(split_rhat(s.params))))
        flat = s.params.reshape(-1, s.params.shape[-1])
        for name, col, value in (("alpha", 0, 1.0), ("rho_time", 5, 2.0), ("sigma", 6, 0.1)):
            lo, hi = np.quantile(flat[:, col], [0.05, 0.95])
            covered[name] += lo <= value <= hi
    dt = time.perf_counter() - t0
    ok = min(covered.values()) >= 16 and worst_rhat < 1.05 and dt < 3600
    verdict(7, ok,
            f"90% interval coverage alpha {covered['alpha']}/20, rho_time "
            f"{covered['rho_time']}/20, sigma {covered['sigma']}/20 (>=16 each); "
            f"max split-Rhat {worst_rhat:.3f} (<1.05); {dt / 60:.1f} min (<60)")


# -- 8. strictness limits -----------------------------------------------------------

def _mc_se(chains):
    """Monte Carlo standard errors of the mean and the variance from independent runs."""
    chains = np.asarray(chains)
    ess = effective_sample_size(chains)
    flat = chains.reshape(-1, chains.shape[-1])
    ess_sq = effective_sample_size((chains - flat.mean(0)) ** 2)
    var = flat.var(0)
    m4 = np.mean((flat - flat.mean(0)) ** 4, axis=0)
    return np.sqrt(var / ess), np.sqrt(np.maximum(m4 - var ** 2, 0) / ess_sq)


def test_criterion_8_strictness_limits():
    t0 = time.perf_counter()
    hp = Hyperparameters(1.0, (1.0, 1.5), 0.3, groups=(0, 1))
    pts = [InputPoint((float(i), float(t)), i, t) for i in range(2) for t in range(5)]
    y = [0.1 * t - 0.15 * i for i in range(2) for t in range(5)]
    regular = list(zip(pts, y))
    site = DerivativeSpec(pts[2], 1)

    # strict: one positive sign observation dominates
    strict = ObservationSet(regular=regular, sign_C=[(site, 1)], strictness_v=1e-4)
    prior_mean = condition_gaussian(ObservationSet(regular=regular), [site], hp).mean[0]
    draws = sample_latents_constrained(strict, hp, 4000, seed=8)
    pr = float(np.mean(draws.sign_values[:, 0] > 0))

    # loose: constrained draws reproduce the exact Gaussian moments of f and f'
    loose = ObservationSet(regular=regular, sign_C=[(site, 1)], strictness_v=1e3)
    col = loose.layout.points.index(pts[4])
    runs = [sample_latents_constrained(loose, hp, 4000, seed=s) for s in (1, 2)]
    chains = np.stack([np.column_stack([r.f[:, col], r.sign_values[:, 0]]) for r in runs])
    exact = condition_gaussian(ObservationSet(regular=regular), [pts[4], site], hp)
    flat = chains.reshape(-1, 2)
    se_mean, se_var = _mc_se(chains)
    z_mean = np.abs(flat.mean(0) - exact.mean) / se_mean
    z_var = np.abs(flat.var(0) - np.diag(exact.cov)) / se_var
    dt = time.perf_counter() - t0
    ok = pr >= 0.95 and np.all(z_mean < 3) and np.all(z_var < 3)
    verdict(8, ok,
            f"v=1e-4: Pr(f'>0) {pr:.3f} (>=0.95, unconstrained mean {prior_mean:.2f}); "
            f"v=1e3: mean deviations {np.round(z_mean, 2).tolist()} SE, variance deviations "
            f"{np.round(z_var, 2).tolist()} SE (<3); {dt:.1f}s")
