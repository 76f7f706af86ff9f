from dataclasses import replace
import itertools

import numpy as np
import pytest
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from viewcoupling import config, errors, models
from viewcoupling.services import mixture_service


def _point_masses():
    return models.DataView(np.r_[np.zeros(10), np.full(10, 10.0)].reshape(-1, 1), view_id="masses")


def _three_blobs(seed=0, n_per=30, sep=8.0, scale=1.0):
    rng = np.random.default_rng(seed)
    centers = np.array([[0.0, 0.0], [sep, 0.0], [0.0, sep]])
    X = np.vstack([c + rng.standard_normal((n_per, 2)) for c in centers]) * scale
    return models.DataView(X, view_id="blobs")


def test_point_masses_two_components():
    fit = mixture_service.fit_mixture(_point_masses(), 2, "EII")

    assert sorted(fit.means.ravel()) == pytest.approx([0.0, 10.0], abs=1e-6)
    assert fit.pi == pytest.approx([0.5, 0.5], abs=1e-9)
    assert np.all(fit.responsibilities.max(axis=1) > 1 - 1e-6)


@pytest.mark.parametrize("structure", ["EII", "EEI", "EEE"])
def test_single_component_matches_closed_form(structure):
    rng = np.random.default_rng(4)
    X = rng.standard_normal((50, 3)) @ np.array([[1.0, 0.3, 0.0], [0.0, 2.0, 0.4], [0.0, 0.0, 0.5]])
    fit = mixture_service.fit_mixture(models.DataView(X), 1, structure)

    mean = X.mean(axis=0)
    dev = X - mean
    if structure == "EII":
        cov = np.eye(3) * np.sum(dev**2) / X.size
    elif structure == "EEI":
        cov = np.diag(np.mean(dev**2, axis=0))
    else:
        cov = dev.T @ dev / X.shape[0]

    expected = multivariate_normal(mean, cov).logpdf(X).sum()
    assert fit.loglik == pytest.approx(expected, rel=1e-10)
    assert np.all(fit.responsibilities == 1.0)
    assert fit.pi == pytest.approx([1.0])


@pytest.mark.parametrize("structure", ["EII", "EEI", "EEE"])
def test_fit_invariants(structure):
    fit = mixture_service.fit_mixture(_three_blobs(), 3, structure, config.EmOptions(n_restarts=3, seed=7))

    assert np.all(fit.pi > 0)
    assert fit.pi.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.abs(fit.responsibilities.sum(axis=1) - 1.0).max() < 1e-12

    weighted = fit.log_phi + np.log(fit.pi)
    assert fit.loglik == pytest.approx(float(np.sum(logsumexp(weighted, axis=1))), abs=1e-9)
    softmax = np.exp(weighted - logsumexp(weighted, axis=1, keepdims=True))
    assert np.allclose(fit.responsibilities, softmax, atol=1e-12)

    trace = np.asarray(fit.loglik_trace)
    assert np.all(np.diff(trace) >= -1e-8 * max(1.0, abs(trace[-1])))

    n, p = fit.n, fit.p
    k_cov = {"EII": 1, "EEI": p, "EEE": p * (p + 1) // 2}[structure]
    assert fit.n_params == 3 * p + 2 + k_cov
    assert fit.bic == pytest.approx(-2 * fit.loglik + fit.n_params * np.log(n))
    assert fit.aic == pytest.approx(-2 * fit.loglik + 2 * fit.n_params)


@pytest.mark.parametrize("structure", ["EII", "EEI", "EEE"])
def test_log_densities_match_scipy(structure):
    rng = np.random.default_rng(1)
    X = rng.standard_normal((12, 3))
    means = rng.standard_normal((2, 3))
    if structure == "EII":
        cov_param, cov = np.array([0.7]), 0.7 * np.eye(3)
    elif structure == "EEI":
        cov_param = np.array([0.5, 1.5, 2.0])
        cov = np.diag(cov_param)
    else:
        A = rng.standard_normal((3, 3))
        cov_param = cov = A @ A.T + np.eye(3)

    log_phi = mixture_service.log_component_densities(
        X, means, models.CovarianceStructure.parse(structure), cov_param
    )
    for k in range(2):
        expected = multivariate_normal(means[k], cov).pdf(X)
        assert np.allclose(np.exp(log_phi[:, k]), expected, rtol=1e-9)


def test_same_seed_is_reproducible():
    opts = config.EmOptions(n_restarts=4, seed=11)
    a = mixture_service.fit_mixture(_three_blobs(seed=2), 3, "EII", opts)
    b = mixture_service.fit_mixture(_three_blobs(seed=2), 3, "EII", opts)

    assert a.loglik == b.loglik
    assert np.array_equal(a.responsibilities, b.responsibilities)


def test_scaling_the_data_scales_the_fit():
    opts = config.EmOptions(n_restarts=3, seed=5, tol=1e-13, max_iter=2000)
    base = mixture_service.fit_mixture(_three_blobs(seed=3), 3, "EII", opts)
    scaled = mixture_service.fit_mixture(_three_blobs(seed=3, scale=3.0), 3, "EII", opts)

    assert np.allclose(scaled.means, 3.0 * base.means, rtol=1e-7)
    assert scaled.covariance[0] == pytest.approx(9.0 * base.covariance[0], rel=1e-7)
    assert np.allclose(scaled.responsibilities, base.responsibilities, atol=1e-9)
    assert np.array_equal(mixture_service.hard_labels(scaled).labels, mixture_service.hard_labels(base).labels)


def test_row_permutation_gives_the_same_partition():
    view = _three_blobs(seed=8)
    perm = np.random.default_rng(0).permutation(view.n)
    opts = config.EmOptions(n_restarts=3, seed=1, tol=1e-13, max_iter=2000)
    fit = mixture_service.fit_mixture(view, 3, "EII", opts)
    fit_perm = mixture_service.fit_mixture(view.take_rows(perm), 3, "EII", opts)

    assert fit_perm.loglik == pytest.approx(fit.loglik, rel=1e-10)
    # Component order may differ between the two fits; align by nearest mean.
    order = [int(np.argmin(np.linalg.norm(fit.means - m, axis=1))) for m in fit_perm.means]
    assert sorted(order) == [0, 1, 2]
    assert np.allclose(fit_perm.means, fit.means[order], atol=1e-8)
    assert np.allclose(fit_perm.pi, fit.pi[order], atol=1e-10)
    assert np.allclose(fit_perm.responsibilities, fit.responsibilities[perm][:, order], atol=1e-8)


def test_fixed_variance_pins_sigma():
    fit = mixture_service.fit_mixture(_three_blobs(), 3, "EII", config.EmOptions(fixed_variance=0.25, n_restarts=2))
    assert fit.covariance[0] == 0.25

    with pytest.raises(ValueError):
        mixture_service.fit_mixture(_three_blobs(), 3, "EEE", config.EmOptions(fixed_variance=0.25))


def test_invalid_inputs():
    with pytest.raises(errors.InputError):
        mixture_service.fit_mixture(_point_masses(), 21)
    with pytest.raises(errors.NonFiniteInput):
        models.DataView(np.array([[0.0], [np.nan], [1.0]]))


def test_select_k_finds_two_masses():
    sel = mixture_service.select_k_with_trace(_point_masses(), (1, 4), "EII", "BIC", config.EmOptions(n_restarts=2))

    assert sel.K == 2
    assert set(sel.trace) == {1, 2, 3, 4}
    finite = {k: v for k, v in sel.trace.items() if v is not None}
    assert min(finite, key=finite.get) == 2


def test_select_k_honours_min_k_two():
    X = np.random.default_rng(3).standard_normal((60, 2))
    K, fit = mixture_service.select_k(models.DataView(X), (1, 5), "EII", "BIC", config.EmOptions(n_restarts=2), min_k_two=True)

    assert K == 2
    assert fit.K == 2


def test_hard_labels_tie_breaks_to_lowest_index():
    resp = np.array([[0.2, 0.8], [0.5, 0.5], [1.0, 0.0], [0.0, 1.0]])
    labels = mixture_service.hard_labels(resp)

    assert labels.labels.tolist() == [2, 1, 1, 2]
    assert labels.n_clusters == 2


def test_kmeans_point_masses_and_single_cluster():
    labels = mixture_service.kmeans(_point_masses(), 2)
    assert len(set(labels.labels[:10])) == 1
    assert len(set(labels.labels[10:])) == 1
    assert labels.labels[0] != labels.labels[-1]

    X = np.random.default_rng(0).standard_normal((15, 2))
    single = mixture_service.kmeans_fit(models.DataView(X), 1)
    assert np.all(single.labels.labels == 1)
    assert single.inertia == pytest.approx(float(np.sum((X - X.mean(axis=0)) ** 2)))


def test_kmeans_four_corners_matches_brute_force():
    rng = np.random.default_rng(5)
    corners = np.array([[5.0, 5.0], [5.0, -5.0], [-5.0, 5.0], [-5.0, -5.0]])
    X = np.repeat(corners, 2, axis=0) + 0.3 * rng.standard_normal((8, 2))
    fit = mixture_service.kmeans_fit(models.DataView(X), 4)

    assign = np.array(list(itertools.product(range(4), repeat=8)))
    onehot = np.eye(4)[assign]
    counts = onehot.sum(axis=1)
    sums = np.einsum("aik,ip->akp", onehot, X)
    with np.errstate(divide="ignore", invalid="ignore"):
        between = np.where(counts > 0, np.sum(sums**2, axis=2) / counts, 0.0)
    best = float(np.min(np.sum(X**2) - between.sum(axis=1)))

    assert fit.inertia == pytest.approx(best, rel=1e-9)
    for k in range(4):
        assert len(set(fit.labels.labels[2 * k:2 * k + 2])) == 1
    assert len(set(fit.labels.labels)) == 4
    assert np.all(np.diff(fit.inertia_trace) <= 1e-9)


def _k3_view(n, seed):
    from viewcoupling import catalog
    from viewcoupling.services import simulate_service

    entry = catalog.get_entry("K3_P10")
    design = models.SimDesign(
        coupling=models.CouplingDesign(3, 0.0),
        means=entry,
        family=catalog.family_for("SPHERICAL", sigma=2.4),
        n=n,
        seed=seed,
    )
    view1, _, z1, _ = simulate_service.sample_views(design)
    return view1, z1, entry.mu1


def test_recovers_means_of_the_k3_design():
    view, _, mu = _k3_view(60, seed=12)
    fit = mixture_service.fit_mixture(view, 3, "EII", config.EmOptions(n_restarts=10, seed=12))

    order = [int(np.argmin(np.linalg.norm(fit.means - m, axis=1))) for m in mu]
    assert sorted(order) == [0, 1, 2]
    assert np.all(np.abs(fit.means[order] - mu) < 2.4 / np.sqrt(60 / 3) * 4)


@pytest.mark.slow
def test_bic_selects_three_on_the_k3_design():
    hits = 0
    for seed in range(100):
        view, _, _ = _k3_view(200, seed=seed)
        K, _ = mixture_service.select_k(view, (1, 6), "EII", "BIC", config.EmOptions(n_restarts=3, seed=seed))
        hits += K == 3
    assert hits >= 90


def _plain_eii_em(X, labels, max_iter=5000, tol=1e-14):
    n, p = X.shape
    resp = np.eye(labels.max())[labels - 1]
    prev = -np.inf
    for _ in range(max_iter):
        pi = resp.sum(axis=0) / n
        means = resp.T @ X / resp.sum(axis=0)[:, None]
        sq = ((X[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
        var = float(np.sum(resp * sq)) / (n * p)
        weighted = -0.5 * (p * np.log(2 * np.pi * var) + sq / var) + np.log(pi)
        rows = logsumexp(weighted, axis=1)
        resp = np.exp(weighted - rows[:, None])
        ll = float(rows.sum())
        if abs(ll - prev) <= tol * abs(ll):
            break
        prev = ll
    return ll, pi, means


def test_em_agrees_with_a_plain_eii_loop():
    view, _, _ = _k3_view(60, seed=12)
    fit = mixture_service.fit_mixture(view, 3, "EII", config.EmOptions(n_restarts=10, seed=12, tol=1e-13, max_iter=5000))
    ll, pi, means = _plain_eii_em(view.data, mixture_service.hard_labels(fit).labels)

    assert fit.loglik == pytest.approx(ll, rel=1e-8)
    assert np.allclose(fit.pi, pi, atol=1e-5)
    assert np.allclose(fit.means, means, atol=1e-4)


def test_component_without_mass_is_degenerate():
    # Two distinct values cannot feed three components.
    view = models.DataView(np.r_[np.zeros(10), np.full(10, 5.0)].reshape(-1, 1))
    opts = config.EmOptions(n_restarts=2, max_reseeds=0)

    with pytest.raises(errors.DegenerateCluster) as info:
        mixture_service.fit_mixture(view, 3, "EII", opts)
    assert info.value.component is not None
    assert info.value.exit_code == 3

    with pytest.raises(errors.AllFitsFailed):
        mixture_service.select_k(view, (3, 4), "EII", "BIC", opts)


def test_select_k_prefers_the_smaller_k_on_ties(monkeypatch):
    scores = {1: 9.0, 2: 4.0, 3: 4.0, 4: 6.0}
    real_fit = mixture_service.fit_mixture

    def scored_fit(view, K, structure, opts):
        fit = real_fit(view, K, structure, opts)
        return replace(fit, bic=scores[K])

    monkeypatch.setattr(mixture_service, "fit_mixture", scored_fit)
    sel = mixture_service.select_k_with_trace(_three_blobs(), (1, 4), "EII", "BIC", config.EmOptions(n_restarts=1))

    assert sel.K == 2
    assert sel.trace == scores


def test_empty_cluster_is_refilled_without_emptying_a_singleton():
    X = np.array([[0.0], [0.1], [0.2], [100.0]])
    centers = np.array([[0.1], [90.0], [500.0]])
    dist = (X - centers.T) ** 2
    labels = np.argmin(dist, axis=1)
    closest = dist[np.arange(4), labels]

    mixture_service._fill_empty_clusters(X, labels, closest, centers)

    assert sorted(set(labels.tolist())) == [0, 1, 2]
    assert labels[3] == 1
    assert np.bincount(labels).tolist() == [2, 1, 1]
