"""Discrete state space: standardize, project with CCA, cluster with k-means.

Features for state assignment are the physiological vector of each window
plus a 6-value treatment history (fluid and VIS for each of the 3 preceding
windows, zero-padded at episode start). The learned subspace maximizes
correlation with interventions, terminal outcome, and clinical label, so
clustering on it yields states that are more homogeneous in the variables
that matter for dosing decisions.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .actions import ActionGrid, discretize_doses
from .data import LABEL_ORDER, Dataset, Episode, Terminal
from .errors import DataError, InsufficientDataError, NumericError

HISTORY_WINDOWS = 3
STD_FLOOR = 1e-12


# --- feature construction ---------------------------------------------------


def build_feature_vector(episode: Episode, step: int) -> np.ndarray:
    """Physio features of `step` plus doses of the 3 preceding windows.

    History slot j holds (fluid, vis) of step-1-j; slots before the episode
    start are zero.
    """
    if not 0 <= step < len(episode.transitions):
        raise DataError(f"step {step} outside episode of length {len(episode.transitions)}")
    tr = episode.transitions[step]
    hist = np.zeros(2 * HISTORY_WINDOWS)
    for j in range(HISTORY_WINDOWS):
        k = step - 1 - j
        if k >= 0:
            prev = episode.transitions[k]
            hist[2 * j] = prev.fluid_ml
            hist[2 * j + 1] = prev.vis
    return np.concatenate([np.asarray(tr.features, dtype=float), hist])


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Dataset flattened to matrices in canonical (sorted-patient) row order."""

    x: np.ndarray  # (n, d + 6) physio + history
    patient_ids: tuple[str, ...]
    episode_slices: tuple[tuple[int, int], ...]  # row range per patient
    fluid: np.ndarray
    vis: np.ndarray
    labels: np.ndarray  # index into LABEL_ORDER
    died: np.ndarray  # episode outcome replicated per row
    is_last: np.ndarray  # terminal row of its episode

    @property
    def n_rows(self) -> int:
        return self.x.shape[0]


def feature_table(dataset: Dataset) -> FeatureTable:
    rows, fluid, vis, labels, died, is_last = [], [], [], [], [], []
    slices = []
    pids = tuple(dataset.patient_ids)
    start = 0
    for pid in pids:
        ep = dataset.episodes[pid]
        dead = ep.outcome is Terminal.DEATH
        for i, tr in enumerate(ep.transitions):
            rows.append(build_feature_vector(ep, i))
            fluid.append(tr.fluid_ml)
            vis.append(tr.vis)
            labels.append(LABEL_ORDER.index(tr.clinical_label))
            died.append(dead)
            is_last.append(i == len(ep.transitions) - 1)
        slices.append((start, start + len(ep.transitions)))
        start += len(ep.transitions)
    return FeatureTable(
        x=np.asarray(rows, dtype=float),
        patient_ids=pids,
        episode_slices=tuple(slices),
        fluid=np.asarray(fluid, dtype=float),
        vis=np.asarray(vis, dtype=float),
        labels=np.asarray(labels, dtype=int),
        died=np.asarray(died, dtype=bool),
        is_last=np.asarray(is_last, dtype=bool),
    )


def cca_targets(table: FeatureTable, grid: ActionGrid) -> np.ndarray:
    """Per-row supervision for the subspace: (fluid_bin, vaso_bin, died, label one-hot)."""
    ids = discretize_doses(grid, table.fluid, table.vis)
    fluid_bin = ids % 5 + 1
    vaso_bin = ids // 5 + 1
    one_hot = np.zeros((table.n_rows, len(LABEL_ORDER)))
    one_hot[np.arange(table.n_rows), table.labels] = 1.0
    return np.column_stack([fluid_bin, vaso_bin, table.died.astype(float), one_hot])


# --- CCA ---------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CcaModel:
    x_mean: np.ndarray
    x_std: np.ndarray
    projection: np.ndarray  # (p, k_cca), applied to standardized features
    correlations: np.ndarray  # descending, in [0, 1]


def _inv_sqrt(sym: np.ndarray, ridge: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(sym)
    if ridge == 0.0 and vals.min() <= vals.max() * 1e-12:
        raise NumericError("rank-deficient covariance; use ridge > 0")
    vals = np.maximum(vals, STD_FLOOR)
    return (vecs / np.sqrt(vals)) @ vecs.T


def fit_cca(x: np.ndarray, y: np.ndarray, k_cca: int = 5, ridge: float = 1e-6) -> CcaModel:
    """Canonical correlation directions via SVD of the whitened cross-covariance.

    Returns the top k_cca X-side directions (unit-variance canonical
    correlates on the training data) and the canonical correlations. Ridge
    is added to both covariance blocks for invertibility; one-hot targets
    make the Y block singular without it.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = x.shape
    q = y.shape[1]
    if y.shape[0] != n:
        raise DataError("x and y row counts differ")
    if n <= p + q:
        raise InsufficientDataError(f"need more than {p + q} rows to fit CCA, got {n}")
    if not 1 <= k_cca <= min(p, q):
        raise DataError(f"k_cca must be in [1, {min(p, q)}]")

    x_mean = x.mean(axis=0)
    x_std = np.maximum(x.std(axis=0), STD_FLOOR)
    xs = (x - x_mean) / x_std
    yc = y - y.mean(axis=0)

    sxx = xs.T @ xs / n + ridge * np.eye(p)
    syy = yc.T @ yc / n + ridge * np.eye(q)
    sxy = xs.T @ yc / n

    isx = _inv_sqrt(sxx, ridge)
    isy = _inv_sqrt(syy, ridge)
    u, s, _ = np.linalg.svd(isx @ sxy @ isy, full_matrices=False)
    corr = np.clip(s[:k_cca], 0.0, 1.0)
    projection = isx @ u[:, :k_cca]
    return CcaModel(x_mean=x_mean, x_std=x_std, projection=projection, correlations=corr)


def project(model: "CcaModel | StateModel", x: np.ndarray) -> np.ndarray:
    """Standardize and project; accepts a single vector or a matrix."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.x_mean.shape[0]:
        raise DataError(f"feature dimension {x.shape[-1]} != {model.x_mean.shape[0]}")
    return ((x - model.x_mean) / model.x_std) @ model.projection


# --- k-means ------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KMeansResult:
    centroids: np.ndarray
    rss_per_iter: tuple[float, ...]
    n_iter: int


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkm,nkm->nk", d, d)


def _kmeanspp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = points[rng.integers(n)]
            continue
        centroids[i] = points[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((points - centroids[i]) ** 2, axis=1))
    return centroids


def fit_kmeans(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 300,
    tol: float = 1e-10,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ init, deterministic given seed.

    Empty clusters are re-seeded from the point farthest from its assigned
    centroid. Assignment ties go to the lowest centroid id.
    """
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    if k < 1 or n < k:
        raise DataError(f"need at least k={k} points, got {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, k, rng)

    rss_hist: list[float] = []
    labels = np.zeros(n, dtype=int)
    for it in range(max_iter):
        d2 = _sq_dists(points, centroids)
        labels = np.argmin(d2, axis=1)
        # re-seed empty clusters at the current farthest point
        counts = np.bincount(labels, minlength=k)
        for empty in np.nonzero(counts == 0)[0]:
            far = int(np.argmax(d2[np.arange(n), labels]))
            centroids[empty] = points[far]
            d2[:, empty] = np.sum((points - centroids[empty]) ** 2, axis=1)
            labels = np.argmin(d2, axis=1)
            counts = np.bincount(labels, minlength=k)
        rss_hist.append(float(d2[np.arange(n), labels].sum()))
        new_centroids = np.vstack(
            [points[labels == j].mean(axis=0) if counts[j] else centroids[j] for j in range(k)]
        )
        shift = np.max(np.abs(new_centroids - centroids))
        centroids = new_centroids
        if shift <= tol:
            break
    return KMeansResult(centroids=centroids, rss_per_iter=tuple(rss_hist), n_iter=len(rss_hist))


def kmeans_rss(points: np.ndarray, centroids: np.ndarray) -> float:
    d2 = _sq_dists(np.asarray(points, dtype=float), centroids)
    return float(d2.min(axis=1).sum())


# --- model selection ----------------------------------------------------------


def aic_curve(
    points: np.ndarray, k_values: Sequence[int], seed: int = 0
) -> list[tuple[int, float]]:
    """AIC over cluster counts: n*m*ln(RSS/(n*m)) + 2*k*m.

    Isotropic-Gaussian likelihood with shared MLE variance; m is the point
    dimension. RSS = 0 yields -inf (degenerate overfit sentinel).
    """
    points = np.asarray(points, dtype=float)
    n, m = points.shape
    curve = []
    for k in k_values:
        result = fit_kmeans(points, int(k), seed=seed)
        rss = kmeans_rss(points, result.centroids)
        if rss <= 0.0:
            aic = float("-inf")
        else:
            aic = n * m * np.log(rss / (n * m)) + 2.0 * k * m
        curve.append((int(k), float(aic)))
    return curve


def select_k_elbow(curve: Sequence[tuple[int, float]]) -> int:
    """Knee of the AIC curve: the interior point farthest (perpendicular,
    on min-max normalized axes) from the chord joining the endpoints.
    Ties break toward smaller k. Non-finite points are dropped first."""
    pts = sorted((int(k), float(a)) for k, a in curve if np.isfinite(a))
    if len(pts) < 3:
        raise DataError("need at least 3 finite curve points to locate an elbow")
    ks = np.array([p[0] for p in pts], dtype=float)
    aics = np.array([p[1] for p in pts], dtype=float)
    kn = (ks - ks[0]) / max(ks[-1] - ks[0], STD_FLOOR)
    an = (aics - aics.min()) / max(aics.max() - aics.min(), STD_FLOOR)
    # |cross((end - start), (point - start))| with unit chord in normalized axes
    chord = np.array([kn[-1] - kn[0], an[-1] - an[0]])
    norm = np.hypot(*chord)
    best_k, best_d = None, -1.0
    for i in range(1, len(pts) - 1):
        vec = np.array([kn[i] - kn[0], an[i] - an[0]])
        dist = abs(chord[0] * vec[1] - chord[1] * vec[0]) / max(norm, STD_FLOOR)
        if dist > best_d + 1e-15:
            best_k, best_d = pts[i][0], dist
    return int(best_k)


# --- state model ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class StateModel:
    """Maps a feature vector to a discrete state id (nearest centroid in the
    projected space). Absorbing ids follow the clusters: discharge = n_states,
    death = n_states + 1; they carry no features and are never assigned here."""

    x_mean: np.ndarray
    x_std: np.ndarray
    projection: np.ndarray
    correlations: np.ndarray  # empty for raw-feature clustering
    centroids: np.ndarray

    @property
    def n_states(self) -> int:
        return self.centroids.shape[0]

    @property
    def discharge_state(self) -> int:
        return self.n_states

    @property
    def death_state(self) -> int:
        return self.n_states + 1

    def to_dict(self) -> dict:
        return {
            "x_mean": self.x_mean.tolist(),
            "x_std": self.x_std.tolist(),
            "projection": {
                "rows": self.projection.shape[0],
                "cols": self.projection.shape[1],
                "data": [float(v) for v in self.projection.reshape(-1)],
            },
            "correlations": self.correlations.tolist(),
            "centroids": {
                "rows": self.centroids.shape[0],
                "cols": self.centroids.shape[1],
                "data": [float(v) for v in self.centroids.reshape(-1)],
            },
            "n_states": self.n_states,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "StateModel":
        proj = np.array(obj["projection"]["data"]).reshape(
            obj["projection"]["rows"], obj["projection"]["cols"]
        )
        cent = np.array(obj["centroids"]["data"]).reshape(
            obj["centroids"]["rows"], obj["centroids"]["cols"]
        )
        return cls(
            x_mean=np.array(obj["x_mean"], dtype=float),
            x_std=np.array(obj["x_std"], dtype=float),
            projection=proj,
            correlations=np.array(obj["correlations"], dtype=float),
            centroids=cent,
        )


def assign_states(model: StateModel, x: np.ndarray) -> np.ndarray:
    """Nearest-centroid state ids for a feature matrix (ties -> lowest id)."""
    z = project(model, np.atleast_2d(x))
    return np.argmin(_sq_dists(z, model.centroids), axis=1)


def assign_state(model: StateModel, x: np.ndarray) -> int:
    return int(assign_states(model, x)[0])


@dataclass(frozen=True, eq=False)
class StateFit:
    model: StateModel
    k: int
    aic: list[tuple[int, float]] | None


def fit_state_model(
    x: np.ndarray,
    targets: np.ndarray,
    k_states: int | None,
    k_cca: int = 5,
    ridge: float = 1e-6,
    seed: int = 0,
    method: str = "cca",
    k_candidates: Sequence[int] | None = None,
) -> StateFit:
    """Fit the full state model; k_states=None selects k by the AIC elbow.

    method="cca" clusters the canonical correlates; method="raw" clusters
    the standardized features directly (the comparison baseline for the
    state-homogeneity report).
    """
    x = np.asarray(x, dtype=float)
    if method == "cca":
        cca = fit_cca(x, targets, k_cca=k_cca, ridge=ridge)
        x_mean, x_std = cca.x_mean, cca.x_std
        projection, correlations = cca.projection, cca.correlations
    elif method == "raw":
        x_mean = x.mean(axis=0)
        x_std = np.maximum(x.std(axis=0), STD_FLOOR)
        projection = np.eye(x.shape[1])
        correlations = np.empty(0)
    else:
        raise DataError(f"unknown state-model method {method!r}")

    z = ((x - x_mean) / x_std) @ projection
    curve = None
    if k_states is None:
        if k_candidates is None:
            k_candidates = range(2, 16)
        curve = aic_curve(z, list(k_candidates), seed=seed)
        k_states = select_k_elbow(curve)
    result = fit_kmeans(z, int(k_states), seed=seed)
    model = StateModel(
        x_mean=x_mean,
        x_std=x_std,
        projection=projection,
        correlations=correlations,
        centroids=result.centroids,
    )
    return StateFit(model=model, k=int(k_states), aic=curve)
