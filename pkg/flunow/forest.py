import logging
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .models import AttributionMap, Forest, ForestParams, TreeNode

logger = logging.getLogger(__name__)

# Relative floor below which a split is not counted as a variance reduction.
GAIN_EPS = 1e-12


def _validate(X, y) -> Tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError(f"dimension mismatch: X {X.shape}, y {y.shape}")
    if X.shape[0] == 0:
        raise ValueError("cannot fit a tree on empty data")
    return X, y


def _best_split(X: np.ndarray, y: np.ndarray, features: Sequence[int], min_leaf: int):
    """
    (gain, feature, threshold) of the split with the largest variance reduction over the
    given features, or None. gain = var(node) - sum_side (n_side / n) var(side).
    Equal gains resolve to the lowest feature index, then the lowest threshold.
    """
    n = y.size
    total = y.sum()
    base = total * total / n
    scale = max(1.0, float(y @ y) / n)
    best = None
    for f in sorted(features):
        order = np.argsort(X[:, f], kind="mergesort")
        xs = X[order, f]
        ys = y[order]
        left_sum = np.cumsum(ys)[:-1]
        n_left = np.arange(1, n)
        n_right = n - n_left
        valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n_right >= min_leaf)
        if not valid.any():
            continue
        right_sum = total - left_sum
        gains = (left_sum ** 2 / n_left + right_sum ** 2 / n_right - base) / n
        gains = np.where(valid, gains, -np.inf)
        i = int(np.argmax(gains))  # first maximum -> lowest threshold
        gain = float(gains[i])
        if gain <= GAIN_EPS * scale:
            continue
        if best is None or gain > best[0] + GAIN_EPS * scale:
            best = (gain, f, 0.5 * (xs[i] + xs[i + 1]))
    return best


def fit_tree(X, y, params: ForestParams, rng: Optional[np.random.Generator] = None, depth: int = 0) -> TreeNode:
    """
    CART regression tree grown by maximal variance reduction. Each node draws
    params.resolve_features(p) candidate features from `rng` (all features when that
    equals p, in which case no draw happens).
    """
    X, y = _validate(X, y)
    n, p = X.shape
    node = TreeNode(prediction=float(y.mean()), sample_count=n)
    if depth >= params.max_depth or n < 2 * params.min_samples_leaf or np.ptp(y) == 0.0:
        return node

    k = params.resolve_features(p)
    if k >= p:
        features = range(p)
    else:
        if rng is None:
            raise ValueError("feature subsampling needs a random generator")
        features = rng.choice(p, size=k, replace=False)
    split = _best_split(X, y, features, params.min_samples_leaf)
    if split is None:
        return node

    gain, f, threshold = split
    mask = X[:, f] <= threshold
    node.feature = int(f)
    node.threshold = float(threshold)
    node.variance_reduction = gain
    node.left = fit_tree(X[mask], y[mask], params, rng, depth + 1)
    node.right = fit_tree(X[~mask], y[~mask], params, rng, depth + 1)
    return node


def fit_forest(X, y, params: ForestParams, seed: int, feature_names: Sequence[str] = ()) -> Forest:
    """Bagged trees, each on its own SeedSequence child stream of `seed`."""
    X, y = _validate(X, y)
    n = X.shape[0]
    trees = []
    for child in np.random.SeedSequence(seed).spawn(params.tree_count):
        rng = np.random.Generator(np.random.PCG64(child))
        if params.bootstrap:
            idx = rng.integers(0, n, size=n)
            trees.append(fit_tree(X[idx], y[idx], params, rng))
        else:
            trees.append(fit_tree(X, y, params, rng))
    return Forest(
        trees=tuple(trees),
        params=params,
        seed=seed,
        feature_names=tuple(feature_names),
        n_features=X.shape[1],
    )


def _predict_tree(node: TreeNode, X: np.ndarray) -> np.ndarray:
    out = np.empty(X.shape[0])
    stack = [(node, np.arange(X.shape[0]))]
    while stack:
        current, idx = stack.pop()
        if current.is_leaf:
            out[idx] = current.prediction
            continue
        go_left = X[idx, current.feature] <= current.threshold
        stack.append((current.left, idx[go_left]))
        stack.append((current.right, idx[~go_left]))
    return out


def predict_forest(forest: Forest, x):
    """Mean over trees. A vector gives a float, a matrix one prediction per row."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != forest.n_features:
        raise ValueError(f"expected {forest.n_features} features, got {x.shape[-1]}")
    X = x.reshape(1, -1) if x.ndim == 1 else x
    preds = np.mean([_predict_tree(tree, X) for tree in forest.trees], axis=0)
    return float(preds[0]) if x.ndim == 1 else preds


def tree_depth(node: TreeNode) -> int:
    if node.is_leaf:
        return 0
    return 1 + max(tree_depth(node.left), tree_depth(node.right))


def feature_importances(forest: Forest) -> np.ndarray:
    """Mean decrease in impurity, normalized to sum to 1 (all zeros when nothing split)."""
    totals = np.zeros(forest.n_features)
    for root in forest.trees:
        per_tree = np.zeros(forest.n_features)
        stack = [root]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                continue
            per_tree[node.feature] += node.sample_count / root.sample_count * node.variance_reduction
            stack.extend((node.left, node.right))
        totals += per_tree
    totals /= len(forest.trees)
    mass = totals.sum()
    return totals / mass if mass > 0 else totals


def forest_importances(
    forest: Forest,
    location: str = "",
    horizon: int = 0,
    kind: str = "RF",
    use_queries: bool = False,
) -> AttributionMap:
    return AttributionMap(
        kind="importances",
        model=kind,
        use_queries=use_queries,
        location=location,
        horizon=horizon,
        values=feature_importances(forest),
        row_labels=forest.feature_names or tuple(f"x{j}" for j in range(forest.n_features)),
    )


def importance_table(attribution: AttributionMap) -> pd.DataFrame:
    """feature,importance sorted descending (ties by feature name)."""
    frame = pd.DataFrame({"feature": attribution.row_labels, "importance": attribution.values})
    return frame.sort_values(["importance", "feature"], ascending=[False, True], kind="mergesort").reset_index(drop=True)
