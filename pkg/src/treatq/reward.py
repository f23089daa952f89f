"""Per-transition rewards and the mortality-risk index behind them.

Terminal transitions are worth +1 (discharge) or -1 (death). In the shaped
formulation, every non-terminal transition additionally earns the negative
change of a fitted mortality-risk index across its window, rewarding
short-term physiological improvement. The reference risk model is a small
gradient-boosted tree ensemble with logistic loss; anything exposing
``predict_risk`` over the same feature space can be plugged in instead.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .data import Dataset, Episode, Terminal
from .errors import DataError
from .states import FeatureTable, build_feature_vector, feature_table


class RewardMode(enum.Enum):
    TERMINAL_ONLY = "terminal"
    TERMINAL_PLUS_INTERMEDIATE = "intermediate"


@dataclass(frozen=True)
class RewardSpec:
    mode: RewardMode = RewardMode.TERMINAL_ONLY

    # fixed by the problem formulation, not configurable
    discharge_reward: float = field(default=1.0, init=False)
    death_reward: float = field(default=-1.0, init=False)


class RiskScorer(Protocol):
    def predict_risk(self, x: np.ndarray) -> np.ndarray: ...


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(z, -60, 60)))


def _fit_tree(x, grad, hess, max_depth, min_leaf, reg):
    """Greedy exact-split regression tree on (gradient, hessian) targets.

    Nodes are dicts {feature, threshold, left, right} or {value}; the node
    list is JSON-serializable as is.
    """
    nodes: list[dict] = []

    def leaf(idx) -> int:
        value = grad[idx].sum() / (hess[idx].sum() + reg)
        nodes.append({"value": float(value)})
        return len(nodes) - 1

    def grow(idx, depth) -> int:
        if depth >= max_depth or len(idx) < 2 * min_leaf:
            return leaf(idx)
        g, h = grad[idx], hess[idx]
        g_tot, h_tot = g.sum(), h.sum()
        parent = g_tot**2 / (h_tot + reg)
        best_gain, best_feat, best_thr = 1e-12, -1, 0.0
        for feat in range(x.shape[1]):
            vals = x[idx, feat]
            order = np.argsort(vals, kind="stable")
            sv = vals[order]
            gl = np.cumsum(g[order])[:-1]
            hl = np.cumsum(h[order])[:-1]
            valid = sv[:-1] < sv[1:]
            pos = np.arange(1, len(idx))
            valid &= (pos >= min_leaf) & (len(idx) - pos >= min_leaf)
            if not valid.any():
                continue
            gain = gl**2 / (hl + reg) + (g_tot - gl) ** 2 / (h_tot - hl + reg) - parent
            gain = np.where(valid, gain, -np.inf)
            j = int(np.argmax(gain))
            if gain[j] > best_gain:
                best_gain = float(gain[j])
                best_feat = feat
                best_thr = float((sv[j] + sv[j + 1]) / 2.0)
        if best_feat < 0:
            return leaf(idx)
        mask = x[idx, best_feat] <= best_thr
        node = {"feature": best_feat, "threshold": best_thr, "left": -1, "right": -1}
        nodes.append(node)
        me = len(nodes) - 1
        node["left"] = grow(idx[mask], depth + 1)
        node["right"] = grow(idx[~mask], depth + 1)
        return me

    root = grow(np.arange(x.shape[0]), 0)
    return nodes, root


def _apply_tree(nodes, root, x):
    out = np.empty(x.shape[0])
    stack = [(root, np.arange(x.shape[0]))]
    while stack:
        node_id, idx = stack.pop()
        node = nodes[node_id]
        if "value" in node:
            out[idx] = node["value"]
            continue
        mask = x[idx, node["feature"]] <= node["threshold"]
        stack.append((node["left"], idx[mask]))
        stack.append((node["right"], idx[~mask]))
    return out


@dataclass(eq=False)
class GradientBoostedRisk:
    """Shallow gradient-boosted trees with logistic loss (Newton leaves)."""

    n_trees: int = 50
    max_depth: int = 3
    learning_rate: float = 0.1
    min_leaf: int = 10
    reg: float = 1e-3
    base_score: float = 0.0
    trees: list = field(default_factory=list)
    roots: list = field(default_factory=list)
    n_features: int = 0
    feature_importance: np.ndarray | None = None

    def fit(self, x: np.ndarray, y: np.ndarray) -> "GradientBoostedRisk":
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        classes = np.unique(y)
        if len(classes) < 2:
            raise DataError("risk model needs both outcome classes in training data")
        p_bar = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        self.base_score = math.log(p_bar / (1 - p_bar))
        self.n_features = x.shape[1]
        self.trees, self.roots = [], []
        f = np.full(len(y), self.base_score)
        importance = np.zeros(x.shape[1])
        for _ in range(self.n_trees):
            p = _sigmoid(f)
            grad = y - p
            hess = p * (1 - p)
            nodes, root = _fit_tree(x, grad, hess, self.max_depth, self.min_leaf, self.reg)
            self.trees.append(nodes)
            self.roots.append(root)
            f += self.learning_rate * _apply_tree(nodes, root, x)
            for node in nodes:
                if "feature" in node:
                    importance[node["feature"]] += 1.0
        self.feature_importance = importance / max(importance.sum(), 1.0)
        return self

    def predict_risk(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.n_features:
            raise DataError(f"feature dimension {x.shape[1]} != {self.n_features}")
        f = np.full(x.shape[0], self.base_score)
        for nodes, root in zip(self.trees, self.roots):
            f += self.learning_rate * _apply_tree(nodes, root, x)
        return _sigmoid(f)

    def to_dict(self) -> dict:
        return {
            "kind": "gbdt",
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "n_features": self.n_features,
            "trees": self.trees,
            "roots": self.roots,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "GradientBoostedRisk":
        model = cls(learning_rate=obj["learning_rate"])
        model.base_score = obj["base_score"]
        model.n_features = obj["n_features"]
        model.trees = obj["trees"]
        model.roots = obj["roots"]
        return model


def fit_risk_model(train: Dataset, table: FeatureTable | None = None, **params) -> GradientBoostedRisk:
    """Fit the mortality index: every transition labeled by its episode outcome."""
    if table is None:
        table = feature_table(train)
    return GradientBoostedRisk(**params).fit(table.x, table.died.astype(float))


def risk_score(model: RiskScorer, x: np.ndarray) -> float:
    return float(model.predict_risk(np.atleast_2d(x))[0])


def compute_rewards(
    episode: Episode, model: RiskScorer | None, spec: RewardSpec
) -> list[float]:
    """One reward per transition: terminal +/-1; optionally the negative risk
    change for non-terminal windows. Terminal transitions never receive the
    intermediate term."""
    shaped = spec.mode is RewardMode.TERMINAL_PLUS_INTERMEDIATE
    if shaped and model is None:
        raise DataError("intermediate reward mode requires a risk model")
    n = len(episode.transitions)
    risks = None
    if shaped:
        feats = np.array([build_feature_vector(episode, i) for i in range(n)])
        risks = model.predict_risk(feats)
    rewards = []
    for i, tr in enumerate(episode.transitions):
        if i == n - 1:
            if tr.terminal is Terminal.DISCHARGE:
                rewards.append(spec.discharge_reward)
            elif tr.terminal is Terminal.DEATH:
                rewards.append(spec.death_reward)
            else:
                raise DataError(f"episode {episode.patient_id} does not terminate")
        elif shaped:
            rewards.append(float(-(risks[i + 1] - risks[i])))
        else:
            rewards.append(0.0)
    return rewards


# --- risk-model evaluation ----------------------------------------------------


@dataclass(frozen=True)
class RiskMetrics:
    auc: float
    accuracy: float
    sensitivity: float
    specificity: float
    ppv: float
    threshold: float
    roc_points: list[tuple[float, float, float]]  # (threshold, fpr, tpr)
    pr_points: list[tuple[float, float, float]]  # (threshold, precision, recall)


def roc_curve(labels: np.ndarray, scores: np.ndarray):
    """ROC points over all distinct score thresholds, descending; starts at
    (fpr, tpr) = (0, 0) with threshold +inf."""
    labels = np.asarray(labels, dtype=bool)
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    distinct = np.nonzero(np.diff(sorted_scores))[0]
    cut = np.concatenate([distinct, [len(scores) - 1]])
    tp = np.cumsum(sorted_labels)[cut]
    fp = np.cumsum(~sorted_labels)[cut]
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    thresholds = np.concatenate([[np.inf], sorted_scores[cut]])
    tpr = np.concatenate([[0.0], tp / max(n_pos, 1)])
    fpr = np.concatenate([[0.0], fp / max(n_neg, 1)])
    return thresholds, fpr, tpr


def evaluate_risk_model(model: RiskScorer, test: Dataset, table: FeatureTable | None = None) -> RiskMetrics:
    """AUC (trapezoidal), operating point nearest (FPR 0, TPR 1), and the
    metric set at that threshold, plus plot-ready ROC/PR points."""
    if table is None:
        table = feature_table(test)
    labels = table.died
    if labels.all() or not labels.any():
        raise DataError("risk evaluation needs both outcome classes in the test set")
    scores = model.predict_risk(table.x)
    thresholds, fpr, tpr = roc_curve(labels, scores)
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1])) / 2.0)

    dist2 = fpr**2 + (1.0 - tpr) ** 2
    best = int(np.argmin(dist2))  # ties -> highest threshold (first in order)
    thr = float(thresholds[best])

    pred = scores >= thr
    tp = int((pred & labels).sum())
    fp = int((pred & ~labels).sum())
    fn = int((~pred & labels).sum())
    tn = int((~pred & ~labels).sum())
    n_pos, n_neg = tp + fn, fp + tn

    pr_points = []
    for t, f_r, t_r in zip(thresholds, fpr, tpr):
        tp_t = t_r * n_pos
        fp_t = f_r * n_neg
        precision = tp_t / (tp_t + fp_t) if tp_t + fp_t > 0 else 1.0
        pr_points.append((float(t), float(precision), float(t_r)))

    return RiskMetrics(
        auc=auc,
        accuracy=(tp + tn) / len(labels),
        sensitivity=tp / n_pos if n_pos else 0.0,
        specificity=tn / n_neg if n_neg else 0.0,
        ppv=tp / (tp + fp) if tp + fp else 0.0,
        threshold=thr,
        roc_points=[(float(t), float(f), float(r)) for t, f, r in zip(thresholds, fpr, tpr)],
        pr_points=pr_points,
    )
