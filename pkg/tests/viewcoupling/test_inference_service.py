from dataclasses import replace
from itertools import combinations
import math

import numpy as np
import pytest
from scipy.special import logsumexp

from viewcoupling import catalog, config, errors, models
from viewcoupling.services import coupling_service, inference_service, mixture_service, simulate_service

TIGHT = config.EgOptions(outer_tol=1e-11, max_outer_iter=20_000)
FAST_EM = config.EmOptions(n_restarts=2, seed=3)


def _coupled_views(delta, n=90, sigma=0.5, seed=1):
    entry = catalog.get_entry("EQUIDISTANT_K3_P2")
    design = models.SimDesign(
        coupling=models.CouplingDesign(3, delta),
        means=entry,
        family=catalog.family_for("SPHERICAL", sigma=sigma),
        n=n,
        seed=seed,
    )
    return simulate_service.sample_views(design)


def _onehot(labels, K):
    return np.eye(K)[np.asarray(labels) - 1]


def _fit_from_responsibilities(resp, pi=None, log_phi=None):
    resp = np.asarray(resp, dtype=float)
    K = resp.shape[1]
    return models.MixtureFit(
        K=K,
        structure=models.CovarianceStructure.SPHERICAL_SHARED,
        means=np.zeros((K, 1)),
        covariance=np.array([1.0]),
        pi=resp.mean(axis=0) if pi is None else np.asarray(pi, dtype=float),
        log_phi=np.log(np.where(resp > 0, resp, 1e-300)) if log_phi is None else log_phi,
        responsibilities=resp,
        loglik=0.0,
        n_params=2 * K,
        bic=0.0,
        aic=0.0,
    )


def test_permutation_p_value_conventions():
    null = np.array([0.5, 1.0, 2.0, 3.0])
    assert inference_service.permutation_p_value(2.0, null) == 0.5
    assert inference_service.permutation_p_value(5.0, null) == 0.0
    assert inference_service.permutation_p_value(5.0, null, add_one=True) == pytest.approx(1 / 5)
    # A replicate equal to the observed value counts as at least as extreme.
    assert inference_service.permutation_p_value(1.0, np.array([1.0])) == 1.0


def test_permutation_rng_depends_only_on_seed_and_replicate():
    a = inference_service.permutation_rng(7, 3).permutation(20)
    b = inference_service.permutation_rng(7, 3).permutation(20)
    c = inference_service.permutation_rng(7, 4).permutation(20)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_effective_rank_examples():
    assert inference_service.effective_rank(np.outer([0.2, 0.8], [0.5, 0.3, 0.2])) == pytest.approx(1.0, abs=1e-12)
    assert inference_service.effective_rank(np.eye(2) / 2) == pytest.approx(2.0)
    assert inference_service.effective_rank(models.CouplingDesign(2, 0.5).Pi) == pytest.approx(1.5, abs=1e-12)
    with pytest.raises(errors.ZeroMatrix):
        inference_service.effective_rank(np.zeros((2, 2)))


def test_g_test_examples():
    g2, df, p = inference_service.g_test(models.ContingencyTable(np.array([[5, 5], [5, 5]])))
    assert g2 == pytest.approx(0.0, abs=1e-12)
    assert (df, p) == (1, 1.0)

    g2, df, p = inference_service.g_test(models.ContingencyTable(np.array([[10, 0], [0, 10]])))
    assert g2 == pytest.approx(40 * math.log(2), rel=1e-12)
    assert df == 1
    assert 0 < p < 1e-6

    with pytest.raises(errors.EmptyMarginal):
        inference_service.g_test(models.ContingencyTable(np.array([[3, 0], [2, 0]])))


def test_mutual_information_identities():
    assert inference_service.mutual_information(models.ContingencyTable(np.outer([1, 2], [3, 1]))) == pytest.approx(0.0, abs=1e-15)
    for K in (2, 3, 5):
        table = models.ContingencyTable(2 * np.eye(K, dtype=int))
        assert inference_service.mutual_information(table) == pytest.approx(math.log(K), rel=1e-12)

    rng = np.random.default_rng(0)
    for _ in range(20):
        table = models.ContingencyTable(rng.integers(1, 20, size=(3, 4)))
        g2, _, _ = inference_service.g_test(table)
        assert inference_service.mutual_information(table) == pytest.approx(g2 / (2 * table.n), abs=1e-12)


def _chi2_sf_series(x, df):
    a = 0.5 * df
    h = 0.5 * x
    if h == 0:
        return 1.0
    term = 1.0 / a
    total = term
    k = 1
    while term > total * 1e-17:
        term *= h / (a + k)
        total += term
        k += 1
    lower = math.exp(a * math.log(h) - h - math.lgamma(a)) * total
    return 1.0 - lower


def test_chi2_sf_matches_series():
    for df in range(1, 31):
        for x in np.linspace(0.0, 100.0, 41):
            assert inference_service.chi2_sf(float(x), df) == pytest.approx(_chi2_sf_series(float(x), df), abs=1e-10)
    assert inference_service.chi2_sf(3.0, 0) == 1.0


def test_contingency_table_keeps_empty_clusters():
    table = inference_service.contingency_table([1, 1, 2], [1, 3, 3], K1=3, K2=3)
    assert table.N.tolist() == [[1, 1, 0], [0, 0, 1], [0, 0, 0]]
    with pytest.raises(errors.RowMismatch):
        inference_service.contingency_table([1, 2], [1, 2, 1])


def _ari_by_pairs(z1, z2):
    same1 = same2 = both = 0
    for i, j in combinations(range(len(z1)), 2):
        s1, s2 = z1[i] == z1[j], z2[i] == z2[j]
        same1 += s1
        same2 += s2
        both += s1 and s2
    total = len(z1) * (len(z1) - 1) / 2
    expected = same1 * same2 / total
    return (both - expected) / (0.5 * (same1 + same2) - expected)


def test_adjusted_rand_examples():
    z = np.array([1, 1, 2, 2, 3, 3])
    assert inference_service.adjusted_rand(z, z) == pytest.approx(1.0)
    assert inference_service.adjusted_rand(z, np.ones(6, dtype=int)) == pytest.approx(0.0)

    z1, z2 = [1, 1, 1, 2, 2, 2], [1, 1, 2, 2, 2, 1]
    assert inference_service.adjusted_rand(z1, z2) == pytest.approx(_ari_by_pairs(z1, z2), abs=1e-12)


def test_label_permutation_tests_detect_matched_labels():
    z = np.repeat([1, 2, 3], 20)
    g = inference_service.g_test_permutation(z, z, B=100, seed=4)
    ari = inference_service.ari_permutation(z, z, B=100, seed=4)

    assert g.p_value <= 0.01
    assert ari.p_value <= 0.01
    assert ari.statistic == pytest.approx(1.0)
    assert g.p_value_kind is models.PValueKind.PERMUTATION
    assert g.p_value * 100 == pytest.approx(round(g.p_value * 100))


def test_hard_assignment_identity():
    rng = np.random.default_rng(11)
    for _ in range(200):
        n = int(rng.integers(6, 61))
        K1, K2 = (int(k) for k in rng.integers(2, 5, size=2))
        z1, z2 = rng.integers(1, K1 + 1, size=n), rng.integers(1, K2 + 1, size=n)
        report = inference_service.check_hard_assignment_identity(_onehot(z1, K1), _onehot(z2, K2))

        assert report.holds
        assert abs(report.hard_statistic - report.g2_half) < 1e-10
        table = inference_service.contingency_table(z1, z2, K1, K2)
        assert abs(report.g2_half / n - inference_service.mutual_information(table)) < 1e-12


def test_one_hot_statistic_equals_half_g2():
    z1 = np.array([1, 1, 1, 1, 2, 2, 2, 1, 2, 2, 1, 2])
    z2 = np.array([1, 1, 1, 2, 2, 2, 2, 1, 1, 2, 1, 2])
    fit1 = _fit_from_responsibilities(_onehot(z1, 2))
    fit2 = _fit_from_responsibilities(_onehot(z2, 2))
    log_lambda, coupling = inference_service.plrt_statistic(fit1, fit2, TIGHT)
    g2, _, _ = inference_service.g_test(inference_service.contingency_table(z1, z2))

    assert log_lambda == pytest.approx(g2 / 2, abs=1e-6)
    assert np.allclose(coupling.Pi, inference_service.contingency_table(z1, z2).N / 12, atol=1e-4)


def test_statistic_is_invariant_to_a_joint_row_permutation():
    view1, view2, _, _ = _coupled_views(0.6)
    fit1 = mixture_service.fit_mixture(view1, 3, "EII", FAST_EM)
    fit2 = mixture_service.fit_mixture(view2, 3, "EII", FAST_EM)
    perm = np.random.default_rng(2).permutation(fit1.n)

    base, _ = inference_service.plrt_statistic(fit1, fit2)
    moved, _ = inference_service.plrt_statistic(
        replace(fit1, responsibilities=fit1.responsibilities[perm], log_phi=fit1.log_phi[perm]),
        replace(fit2, responsibilities=fit2.responsibilities[perm], log_phi=fit2.log_phi[perm]),
    )
    assert moved == pytest.approx(base, abs=1e-10)
    assert base >= -1e-10


def test_uninformative_view_gives_zero_statistic():
    view1, _, _, _ = _coupled_views(0.0)
    fit1 = mixture_service.fit_mixture(view1, 3, "EII", FAST_EM)
    resp2 = np.tile([0.25, 0.75], (fit1.n, 1))
    fit2 = replace(fit1, K=2, pi=np.array([0.25, 0.75]), responsibilities=resp2, log_phi=np.zeros((fit1.n, 2)))

    log_lambda, coupling = inference_service.plrt_statistic(fit1, fit2)
    assert log_lambda == pytest.approx(0.0, abs=1e-8)
    assert np.allclose(coupling.C, 1.0, atol=1e-8)


def test_permutation_result_does_not_depend_on_threads():
    view1, view2, _, _ = _coupled_views(0.3, n=60)
    fit1 = mixture_service.fit_mixture(view1, 3, "EII", FAST_EM)
    fit2 = mixture_service.fit_mixture(view2, 3, "EII", FAST_EM)

    one = inference_service.permutation_test_from_fits(fit1, fit2, B=12, seed=5, threads=1)
    four = inference_service.permutation_test_from_fits(fit1, fit2, B=12, seed=5, threads=4)
    assert np.array_equal(one.null_statistics, four.null_statistics)
    assert one.p_value == four.p_value
    assert one.p_value * 12 == pytest.approx(round(one.p_value * 12))


def test_identical_clusterings_are_detected():
    view1, view2, _, _ = _coupled_views(1.0)
    result = inference_service.permutation_test(view1, view2, 3, 3, B=19, seed=0, em_opts=FAST_EM)

    assert result.p_value <= 1 / 19
    assert 1.0 <= result.effective_rank <= 3.0
    assert result.effective_rank > 2.0
    assert result.statistic > 0


def test_identity_permutation_reproduces_the_observed_statistic():
    seed = next(s for s in range(100) if np.array_equal(inference_service.permutation_rng(s, 0).permutation(2), [0, 1]))
    fit1 = _fit_from_responsibilities([[0.9, 0.1], [0.2, 0.8]])
    fit2 = _fit_from_responsibilities([[0.7, 0.3], [0.4, 0.6]])
    result = inference_service.permutation_test_from_fits(fit1, fit2, B=1, seed=seed)

    assert result.null_statistics[0] == pytest.approx(result.statistic, abs=1e-12)
    assert result.p_value == 1.0


def _golden_max(f, lo, hi, iters=200):
    g = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return max(fc, fd)


def test_statistic_matches_a_direct_likelihood_ratio_oracle():
    rng = np.random.default_rng(13)
    for _ in range(10):
        log_phi1, log_phi2 = rng.normal(-3.0, 1.5, (8, 2)), rng.normal(-3.0, 1.5, (8, 2))
        pi1, pi2 = rng.dirichlet([2.0, 2.0]), rng.dirichlet([2.0, 2.0])
        w1, w2 = log_phi1 + np.log(pi1), log_phi2 + np.log(pi2)
        resp1 = np.exp(w1 - logsumexp(w1, axis=1, keepdims=True))
        resp2 = np.exp(w2 - logsumexp(w2, axis=1, keepdims=True))
        log_lambda, _ = inference_service.plrt_statistic(
            _fit_from_responsibilities(resp1, pi1, log_phi1), _fit_from_responsibilities(resp2, pi2, log_phi2), TIGHT
        )

        independent = float(np.sum(logsumexp(w1, axis=1) + logsumexp(w2, axis=1)))
        a, b = pi1[0], pi2[0]

        def ratio(t):
            Pi = np.array([[t, a - t], [b - t, 1.0 - a - b + t]])
            joint = np.log(Pi)[None, :, :] + log_phi1[:, :, None] + log_phi2[:, None, :]
            return float(np.sum(logsumexp(joint.reshape(8, 4), axis=1))) - independent

        best = _golden_max(ratio, max(0.0, a + b - 1.0) + 1e-12, min(a, b) - 1e-12)
        assert log_lambda == pytest.approx(best, abs=1e-6)


def test_statistic_on_identical_well_separated_clusterings():
    for seed in range(20):
        view1, view2, _, _ = _coupled_views(1.0, n=100, sigma=0.5, seed=seed)
        fit1 = mixture_service.fit_mixture(view1, 3, "EII", FAST_EM)
        fit2 = mixture_service.fit_mixture(view2, 3, "EII", FAST_EM)
        log_lambda, coupling = inference_service.plrt_statistic(fit1, fit2)

        residuals = coupling_service.coupling_residuals(coupling)
        assert residuals["c_rows"] < 1e-8
        assert residuals["c_cols"] < 1e-8
        assert coupling.diagnostics["eg_stopped"] in {"tolerance", "sinkhorn", "max_iter"}

        table = inference_service.contingency_table(mixture_service.hard_labels(fit1), mixture_service.hard_labels(fit2))
        g2, _, _ = inference_service.g_test(table)
        assert log_lambda == pytest.approx(g2 / 2, rel=0.01)
        assert inference_service.effective_rank(coupling.Pi) > 2.5


def test_test_independence_report():
    view1, view2, _, _ = _coupled_views(1.0, n=60)
    options = config.IndependenceOptions(k1=3, k2=3, B=19, seed=2, em=FAST_EM)
    report = inference_service.test_independence(view1, view2, options)

    assert (report.K1, report.K2) == (3, 3)
    assert report.table.n == 60
    assert report.g_test_chisq is not None
    assert report.g_test_perm.B == 19
    assert report.ari.statistic > 0.5
    assert report.mutual_information == pytest.approx(report.g_test_chisq.statistic / 120)
    assert report.plrt.coupling.Pi.sum() == pytest.approx(1.0)


def test_test_independence_with_bic_selection():
    view1, view2, _, _ = _coupled_views(1.0, n=60)
    options = config.IndependenceOptions(k_policy="bic", k_min=1, k_max=4, B=9, em=FAST_EM)
    report = inference_service.test_independence(view1, view2, options)

    assert report.k_policy == "BIC"
    assert set(report.selection1) == {1, 2, 3, 4}
    assert report.K1 == 3


def test_all_pairs_order_and_rows():
    view1, view2, _, _ = _coupled_views(0.5, n=45)
    view3 = models.DataView(np.random.default_rng(0).standard_normal((45, 2)), view_id="noise")
    options = config.IndependenceOptions(k1=2, k2=2, B=5, em=FAST_EM)
    reports = inference_service.test_all_pairs([view1, view2, view3], options)

    assert [(r.view1_id, r.view2_id) for r in reports] == [("view1", "view2"), ("view1", "noise"), ("view2", "noise")]
    with pytest.raises(errors.RowMismatch):
        inference_service.test_all_pairs([view1, models.DataView(np.zeros((10, 1)) + np.arange(10)[:, None])], options)


def test_pinned_variance_statistic_approaches_kmeans_g_test():
    view1, view2, _, _ = _coupled_views(0.5, n=90, sigma=0.5, seed=21)
    k1 = mixture_service.kmeans(view1, 3, FAST_EM)
    k2 = mixture_service.kmeans(view2, 3, FAST_EM)
    g2, _, _ = inference_service.g_test(inference_service.contingency_table(k1, k2))

    gaps = []
    for var in (1.0, 0.1, 0.01, 0.001):
        em = replace(FAST_EM, fixed_variance=var)
        fit1 = mixture_service.fit_mixture(view1, 3, "EII", em)
        fit2 = mixture_service.fit_mixture(view2, 3, "EII", em)
        log_lambda, _ = inference_service.plrt_statistic(fit1, fit2, TIGHT)
        gaps.append(abs(log_lambda - g2 / 2))

    assert gaps[-1] < 1e-3
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))


@pytest.mark.slow
def test_label_permutation_tests_hold_their_level_under_independence():
    rng = np.random.default_rng(17)
    g_hits = ari_hits = 0
    reps = 500
    for rep in range(reps):
        z1, z2 = rng.integers(1, 4, size=60), rng.integers(1, 4, size=60)
        g_hits += inference_service.g_test_permutation(z1, z2, B=100, seed=rep).p_value <= 0.05
        ari_hits += inference_service.ari_permutation(z1, z2, B=100, seed=rep).p_value <= 0.05

    assert 0.02 <= g_hits / reps <= 0.08
    assert 0.02 <= ari_hits / reps <= 0.08
