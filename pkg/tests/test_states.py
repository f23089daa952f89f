import numpy as np
import pytest

from oracles import cca_correlations
from treatq.data import Episode, Terminal, Transition
from treatq.errors import DataError, NumericError
from treatq.states import (
    CcaModel,
    StateModel,
    aic_curve,
    assign_state,
    assign_states,
    build_feature_vector,
    fit_cca,
    fit_kmeans,
    fit_state_model,
    kmeans_rss,
    project,
    select_k_elbow,
)


def _episode_with_doses(fluids, viss):
    trs = []
    n = len(fluids)
    for i, (f, v) in enumerate(zip(fluids, viss)):
        trs.append(
            Transition(
                patient_id="p",
                step_index=i,
                features=np.array([float(i), 1.0]),
                fluid_ml=float(f),
                vis=float(v),
                terminal=Terminal.DISCHARGE if i == n - 1 else Terminal.NONE,
            )
        )
    return Episode(patient_id="p", transitions=tuple(trs))


class TestFeatureVector:
    def test_step0_history_zero(self):
        ep = _episode_with_doses([100, 200, 300], [1, 2, 3])
        x = build_feature_vector(ep, 0)
        assert x.tolist() == [0.0, 1.0, 0, 0, 0, 0, 0, 0]

    def test_step2_most_recent_first(self):
        ep = _episode_with_doses([100, 200, 300], [1, 2, 3])
        x = build_feature_vector(ep, 2)
        # slots: (fluid, vis) for steps 1, 0, then zero-pad
        assert x[2:].tolist() == [200.0, 2.0, 100.0, 1.0, 0.0, 0.0]

    def test_three_window_cap(self):
        ep = _episode_with_doses([10, 20, 30, 40, 50, 60], [1, 2, 3, 4, 5, 6])
        x = build_feature_vector(ep, 5)
        assert x[2:].tolist() == [50.0, 5.0, 40.0, 4.0, 30.0, 3.0]

    def test_out_of_range(self):
        ep = _episode_with_doses([10], [0])
        with pytest.raises(DataError):
            build_feature_vector(ep, 1)


class TestCca:
    def test_perfect_dependence(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2000, 8))
        y = np.column_stack([x[:, 3], rng.normal(size=(2000, 5))])
        model = fit_cca(x, y, k_cca=3, ridge=0.0)
        assert abs(model.correlations[0] - 1.0) < 1e-8
        z = ((x - model.x_mean) / model.x_std) @ model.projection[:, 0]
        r = np.corrcoef(z, x[:, 3])[0, 1]
        assert abs(abs(r) - 1.0) < 1e-6

    def test_independent_blocks_low_correlation(self):
        rng = np.random.default_rng(42)
        x = rng.normal(size=(10_000, 10))
        y = rng.normal(size=(10_000, 6))
        model = fit_cca(x, y, k_cca=6, ridge=0.0)
        assert np.all(model.correlations < 0.1)

    def test_matches_eigendecomposition_oracle(self):
        rng = np.random.default_rng(7)
        for trial in range(3):
            x = rng.normal(size=(5000, 9))
            w = rng.normal(size=(9, 4))
            y = x @ w + rng.normal(size=(5000, 4))
            model = fit_cca(x, y, k_cca=4, ridge=0.0)
            expected = cca_correlations(x, y)[:4]
            assert np.max(np.abs(model.correlations - expected)) < 1e-8

    def test_correlations_descending_in_unit_interval(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(800, 7))
        y = 0.5 * x[:, :3] @ rng.normal(size=(3, 6)) + rng.normal(size=(800, 6))
        model = fit_cca(x, y, k_cca=5)
        c = model.correlations
        assert np.all((c >= 0) & (c <= 1))
        assert np.all(np.diff(c) <= 1e-12)

    def test_unit_variance_correlates(self):
        rng = np.random.default_rng(21)
        x = rng.normal(size=(4000, 6))
        y = x[:, :2] @ rng.normal(size=(2, 6)) + rng.normal(size=(4000, 6))
        model = fit_cca(x, y, k_cca=4, ridge=0.0)
        z = project(model, x)
        assert np.max(np.abs(z.var(axis=0) - 1.0)) < 1e-6

    def test_rank_deficient_without_ridge(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(500, 5))
        x = np.column_stack([x, x[:, 0]])  # duplicated column
        y = rng.normal(size=(500, 3))
        with pytest.raises(NumericError):
            fit_cca(x, y, k_cca=2, ridge=0.0)
        fit_cca(x, y, k_cca=2, ridge=1e-6)  # ridge rescues it

    def test_too_few_rows(self):
        with pytest.raises(DataError):
            fit_cca(np.zeros((10, 8)), np.zeros((10, 6)), k_cca=2)

    def test_project_mean_is_zero(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(500, 4))
        y = x @ rng.normal(size=(4, 3)) + rng.normal(size=(500, 3))
        model = fit_cca(x, y, k_cca=2)
        z = project(model, x.mean(axis=0))
        assert np.max(np.abs(z)) < 1e-12

    def test_project_dimension_mismatch(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(500, 4))
        y = rng.normal(size=(500, 3))
        model = fit_cca(x, y, k_cca=2)
        with pytest.raises(DataError):
            project(model, np.zeros(5))

    def test_project_finite_on_training_rows(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(600, 5))
        y = x @ rng.normal(size=(5, 6)) + rng.normal(size=(600, 6))
        model = fit_cca(x, y, k_cca=5)
        assert np.all(np.isfinite(project(model, x)))


def _blobs(rng, n_per=100, sep=10.0, dim=2, k=3):
    points, labels = [], []
    for i in range(k):
        center = np.zeros(dim)
        center[i % dim] = sep * (i + 1)
        points.append(rng.normal(size=(n_per, dim)) + center)
        labels.append(np.full(n_per, i))
    return np.vstack(points), np.concatenate(labels)


class TestKMeans:
    def test_k_equals_n(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(12, 3))
        result = fit_kmeans(pts, k=12, seed=1)
        assert kmeans_rss(pts, result.centroids) < 1e-20

    def test_three_blobs_exact_recovery(self):
        rng = np.random.default_rng(42)
        pts, labels = _blobs(rng, sep=10.0)
        result = fit_kmeans(pts, k=3, seed=42)
        assigned = np.argmin(
            ((pts[:, None, :] - result.centroids[None]) ** 2).sum(-1), axis=1
        )
        # memberships match generating labels up to cluster relabeling
        for lab in range(3):
            assert len(set(assigned[labels == lab])) == 1
        assert len(set(assigned[::100])) == 3

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(200, 4))
        r1 = fit_kmeans(pts, k=6, seed=9)
        r2 = fit_kmeans(pts, k=6, seed=9)
        assert np.array_equal(r1.centroids, r2.centroids)

    def test_rss_nonincreasing_over_iterations(self):
        rng = np.random.default_rng(8)
        pts = rng.normal(size=(500, 3))
        result = fit_kmeans(pts, k=7, seed=2)
        rss = np.array(result.rss_per_iter)
        assert np.all(np.diff(rss) <= 1e-9)

    def test_n_less_than_k(self):
        with pytest.raises(DataError):
            fit_kmeans(np.zeros((3, 2)), k=5, seed=0)


class TestAic:
    def test_k1_finite(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(100, 2))
        curve = aic_curve(pts, [1])
        assert np.isfinite(curve[0][1])

    def test_decreasing_then_flat_on_blobs(self):
        rng = np.random.default_rng(42)
        pts, _ = _blobs(rng, sep=10.0)
        curve = aic_curve(pts, range(1, 11), seed=0)
        aics = [a for _, a in curve]
        assert aics[0] > aics[1] > aics[2]
        drop_into_knee = aics[0] - aics[2]
        tail_spread = max(aics[2:]) - min(aics[2:])
        assert tail_spread < 0.2 * drop_into_knee

    def test_rss_nonincreasing_in_k(self):
        rng = np.random.default_rng(6)
        pts = rng.normal(size=(300, 3))
        rss = [kmeans_rss(pts, fit_kmeans(pts, k, seed=0).centroids) for k in range(1, 9)]
        assert np.all(np.diff(rss) <= 1e-9)

    def test_rss_zero_sentinel(self):
        pts = np.arange(6, dtype=float).reshape(3, 2)
        curve = aic_curve(pts, [3])
        assert curve[0][1] == float("-inf")


class TestElbow:
    def test_linear_curve_first_interior(self):
        curve = [(k, -10.0 * k) for k in range(1, 6)]
        assert select_k_elbow(curve) == 2

    def test_sharp_knee_on_blob_aic(self):
        rng = np.random.default_rng(42)
        pts, _ = _blobs(rng, sep=10.0)
        curve = aic_curve(pts, range(1, 11), seed=0)
        assert select_k_elbow(curve) == 3

    def test_too_few_points(self):
        with pytest.raises(DataError):
            select_k_elbow([(1, -1.0), (2, -2.0)])


class TestStateModel:
    def _fitted(self, rng, method="cca", k=4):
        pts, labels = _blobs(rng, n_per=150, sep=8.0, dim=6, k=4)
        targets = np.column_stack(
            [labels + 1.0, 4.0 - labels, (labels > 1).astype(float), rng.normal(size=(len(labels), 3))]
        )
        return fit_state_model(pts, targets, k_states=k, k_cca=4, seed=0, method=method), pts

    def test_assign_centroid_exact(self):
        fit, pts = self._fitted(np.random.default_rng(0))
        model = fit.model
        z7 = model.centroids[2]
        # invert the projection at a point that lands exactly on centroid 2
        x = np.linalg.lstsq(model.projection.T, z7, rcond=None)[0] * model.x_std + model.x_mean
        assert assign_state(model, x) == 2

    def test_tie_goes_to_lowest_id(self):
        model = StateModel(
            x_mean=np.zeros(2),
            x_std=np.ones(2),
            projection=np.eye(2),
            correlations=np.empty(0),
            centroids=np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]),
        )
        assert assign_state(model, np.array([0.0, 0.0])) == 0

    def test_training_sweep_in_range(self):
        fit, pts = self._fitted(np.random.default_rng(1))
        ids = assign_states(fit.model, pts)
        assert ids.min() >= 0 and ids.max() < fit.model.n_states

    def test_scale_invariance_of_assignments(self):
        fit, pts = self._fitted(np.random.default_rng(2))
        ids = assign_states(fit.model, pts)
        scaled = pts.copy()
        scaled[:, 1] *= 4.0  # power of two keeps the arithmetic exact
        rng = np.random.default_rng(2)
        pts2, labels = _blobs(rng, n_per=150, sep=8.0, dim=6, k=4)
        targets = np.column_stack(
            [labels + 1.0, 4.0 - labels, (labels > 1).astype(float), rng.normal(size=(len(labels), 3))]
        )
        refit = fit_state_model(scaled, targets, k_states=4, k_cca=4, seed=0, method="cca")
        assert np.array_equal(assign_states(refit.model, scaled), ids)

    def test_absorbing_ids(self):
        fit, _ = self._fitted(np.random.default_rng(3))
        assert fit.model.discharge_state == fit.model.n_states
        assert fit.model.death_state == fit.model.n_states + 1

    def test_raw_method_identity_projection(self):
        fit, pts = self._fitted(np.random.default_rng(4), method="raw")
        assert fit.model.projection.shape == (6, 6)
        assert fit.model.correlations.size == 0

    def test_elbow_auto_k_on_blobs(self):
        rng = np.random.default_rng(42)
        pts, labels = _blobs(rng, n_per=200, sep=12.0, dim=5, k=3)
        targets = np.column_stack(
            [labels + 1.0, labels + 1.0, (labels > 1).astype(float), rng.normal(size=(len(labels), 3))]
        )
        fit = fit_state_model(pts, targets, k_states=None, k_cca=3, seed=0, k_candidates=range(1, 9))
        assert fit.k == 3
        assert fit.aic is not None

    def test_serialization_round_trip(self):
        fit, pts = self._fitted(np.random.default_rng(5))
        restored = StateModel.from_dict(fit.model.to_dict())
        assert np.array_equal(assign_states(restored, pts), assign_states(fit.model, pts))
