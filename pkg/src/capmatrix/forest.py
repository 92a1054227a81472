"""Random-forest regression with variance impurity and impurity-decrease importances."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import LOG10_CYCLES, to_cycles


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    max_depth: int | None = None
    min_samples_leaf: int = 1
    features_per_split: int | None = None  # None -> ceil(n_features / 3)
    bootstrap: bool = True

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError(f"n_trees must be >= 1, got {self.n_trees}")
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError(f"max_depth must be >= 1, got {self.max_depth}")
        if self.min_samples_leaf < 1:
            raise ValueError(f"min_samples_leaf must be >= 1, got {self.min_samples_leaf}")
        if self.features_per_split is not None and self.features_per_split < 1:
            raise ValueError(f"features_per_split must be >= 1, got {self.features_per_split}")

    def n_split_features(self, n_features: int) -> int:
        k = self.features_per_split or math.ceil(n_features / 3)
        return min(k, n_features)


@dataclass
class RegressionTree:
    """Flat node arrays; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    impurity_decrease: np.ndarray  # per feature, summed SSE decrease

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def apply(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            internal = f >= 0
            if not internal.any():
                return node
            r, nd = rows[internal], node[internal]
            go_left = X[r, f[internal]] <= self.threshold[nd]
            node[internal] = np.where(go_left, self.left[nd], self.right[nd])

    def predict(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {k: v.tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "RegressionTree":
        ints = {"feature", "left", "right", "n_samples"}
        return cls(**{k: np.array(v, dtype=np.int64 if k in ints else float) for k, v in d.items()})


def _best_split(Xn, yn, feats, min_leaf):
    """Best (gain, feature, threshold) over `feats` by exact midpoint search."""
    n = yn.size
    yc = yn - yn.mean()
    sse = float(yc @ yc)
    sub = Xn[:, feats]
    order = np.argsort(sub, axis=0, kind="stable")
    xs = np.take_along_axis(sub, order, axis=0)
    ys = yc[order]
    cs = np.cumsum(ys, axis=0)[:-1]
    cs2 = np.cumsum(ys * ys, axis=0)[:-1]
    nl = np.arange(1, n)[:, None]
    nr = n - nl
    sse_l = cs2 - cs * cs / nl
    # total of centered y is 0, so the right-hand sum is -cs
    sse_r = (sse - cs2) - cs * cs / nr
    gain = sse - sse_l - sse_r
    valid = xs[1:] > xs[:-1]
    if min_leaf > 1:
        valid &= (nl >= min_leaf) & (nr >= min_leaf)
    gain = np.where(valid, gain, -np.inf)
    # column-major flat argmax: lowest feature first, then lowest threshold
    flat = int(np.argmax(gain.T))
    j, i = divmod(flat, n - 1)
    g = gain[i, j]
    if not np.isfinite(g) or g <= 1e-12 * max(sse, 1e-300):
        return None
    lo, hi = xs[i, j], xs[i + 1, j]
    thr = 0.5 * (lo + hi)
    if thr >= hi:
        thr = lo
    return float(g), int(feats[j]), float(thr)


def build_tree(X, y, params: ForestParams, rng: np.random.Generator) -> RegressionTree:
    n, p = X.shape
    k = params.n_split_features(p)
    if params.bootstrap:
        sample = rng.integers(0, n, size=n)
    else:
        sample = np.arange(n)
    feature, threshold, left, right, value, counts = [], [], [], [], [], []
    importance = np.zeros(p)

    def new_node(idx):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(float(y[idx].mean()))
        counts.append(idx.size)
        return len(feature) - 1

    stack = [(new_node(sample), sample, 0)]
    while stack:
        node, idx, depth = stack.pop()
        if idx.size < 2 * params.min_samples_leaf or idx.size < 2:
            continue
        if params.max_depth is not None and depth >= params.max_depth:
            continue
        yn = y[idx]
        if np.all(yn == yn[0]):
            continue
        Xn = X[idx]
        feats = np.sort(rng.choice(p, size=k, replace=False)) if k < p else np.arange(p)
        split = _best_split(Xn, yn, feats, params.min_samples_leaf)
        if split is None and k < p:
            rest = np.setdiff1d(np.arange(p), feats)
            split = _best_split(Xn, yn, rest, params.min_samples_leaf)
        if split is None:
            continue
        gain, f, thr = split
        mask = Xn[:, f] <= thr
        li, ri = idx[mask], idx[~mask]
        importance[f] += gain
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return RegressionTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=float),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=float),
        np.array(counts, dtype=np.int64),
        importance,
    )


@dataclass
class Forest:
    trees: list[RegressionTree]
    params: ForestParams
    seed: int
    n_features: int
    target_space: str = LOG10_CYCLES
    feature_names: list[str] | None = None
    method: str = field(default="forest", init=False)

    @property
    def importances(self) -> np.ndarray:
        """Total impurity decrease per feature over all trees, normalized to sum 1
        (all zeros when no tree split). Carries no sign."""
        tot = np.sum([t.impurity_decrease for t in self.trees], axis=0)
        s = tot.sum()
        return tot / s if s > 0 else np.zeros(self.n_features)

    @property
    def hyperparameters(self) -> dict:
        return asdict(self.params)

    def predict(self, X) -> np.ndarray:
        return predict_forest(self, X)

    def predict_cycles(self, X) -> np.ndarray:
        return to_cycles(self.predict(X), self.target_space)

    def to_dict(self) -> dict:
        return {
            "format_version": 1,
            "kind": "forest",
            "method": "forest",
            "target_space": self.target_space,
            "params": asdict(self.params),
            "seed": self.seed,
            "n_features": self.n_features,
            "feature_names": self.feature_names,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d) -> "Forest":
        return cls(
            [RegressionTree.from_dict(t) for t in d["trees"]],
            ForestParams(**d["params"]),
            d["seed"],
            d["n_features"],
            d["target_space"],
            d.get("feature_names"),
        )


def fit_forest(
    X,
    y,
    params: ForestParams = ForestParams(),
    seed: int = 0,
    target_space: str = LOG10_CYCLES,
    feature_names=None,
) -> Forest:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError(f"X shape {X.shape} does not match {y.size} targets")
    if y.size < 2:
        raise ValueError("need at least 2 samples")
    # one independent substream per tree
    streams = np.random.SeedSequence(seed).spawn(params.n_trees)
    trees = [build_tree(X, y, params, np.random.default_rng(s)) for s in streams]
    return Forest(trees, params, seed, X.shape[1], target_space, feature_names)


def predict_forest(f: Forest, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != f.n_features:
        raise ValueError(f"expected {f.n_features} features, got shape {X.shape}")
    return np.mean([t.predict(X) for t in f.trees], axis=0)


def write_importances(f: Forest, voltages, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["voltage_v", "importance"])
        for v, imp in zip(voltages, f.importances):
            w.writerow([repr(float(v)), repr(float(imp))])
    return path
