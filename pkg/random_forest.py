import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from errors import DataError, ModelError

logger = logging.getLogger(__name__)

FORMAT_NAME = 'lc-random-forest'
FORMAT_VERSION = 1

LEAF = -1
_MIN_GAIN = 1e-12


@dataclass
class ForestConfig:
    n_trees: int = 500
    max_depth: Optional[int] = None
    min_samples_leaf: int = 1
    # None means ceil(sqrt(n_features))
    features_per_split: Optional[int] = None
    oob_score: bool = False
    n_jobs: int = 1

    def validate(self, n_features: int):
        if self.n_trees < 1:
            raise ValueError(f'n_trees must be >= 1, got {self.n_trees}')
        if self.max_depth is not None and self.max_depth < 1:
            raise ValueError(f'max_depth must be >= 1, got {self.max_depth}')
        if self.min_samples_leaf < 1:
            raise ValueError(f'min_samples_leaf must be >= 1, got {self.min_samples_leaf}')
        m = self.split_features(n_features)
        if not 1 <= m <= n_features:
            raise ValueError(f'features_per_split must be in [1, {n_features}], got {m}')
        if self.n_jobs < 1:
            raise ValueError(f'n_jobs must be >= 1, got {self.n_jobs}')

    def split_features(self, n_features: int) -> int:
        if self.features_per_split is None:
            return max(1, math.ceil(math.sqrt(n_features)))
        return self.features_per_split

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ForestConfig':
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"Unknown forest options: {', '.join(unknown)}")
        return cls(**data)


@dataclass
class DecisionNode:
    """Nested view of a tree node; leaves carry the class-1 fraction"""

    value: float
    n_samples: int
    feature: int = LEAF
    threshold: float = 0.0
    left: Optional['DecisionNode'] = None
    right: Optional['DecisionNode'] = None

    @property
    def is_leaf(self) -> bool:
        return self.feature == LEAF


class DecisionTree:
    """CART tree stored as flat node arrays (children index into the same arrays)"""

    def __init__(self, feature, threshold, left, right, value, n_samples, impurity):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64)
        self.n_samples = np.asarray(n_samples, dtype=np.int64)
        self.impurity = np.asarray(impurity, dtype=np.float64)

    @property
    def node_count(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        depths = np.zeros(self.node_count, dtype=np.int64)
        for i in range(self.node_count):
            if self.feature[i] != LEAF:
                depths[self.left[i]] = depths[i] + 1
                depths[self.right[i]] = depths[i] + 1
        return int(depths.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row (x <= threshold goes left)"""
        nodes = np.zeros(len(X), dtype=np.int64)
        active = np.flatnonzero(self.feature[nodes] != LEAF)
        while len(active):
            current = nodes[active]
            go_left = X[active, self.feature[current]] <= self.threshold[current]
            nodes[active] = np.where(go_left, self.left[current], self.right[current])
            active = active[self.feature[nodes[active]] != LEAF]
        return nodes

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def importance(self, n_features: int) -> np.ndarray:
        """Total weighted Gini decrease per feature"""
        out = np.zeros(n_features)
        for i in np.flatnonzero(self.feature != LEAF):
            l, r = self.left[i], self.right[i]
            out[self.feature[i]] += (self.n_samples[i] * self.impurity[i]
                                     - self.n_samples[l] * self.impurity[l]
                                     - self.n_samples[r] * self.impurity[r])
        return out

    def to_node(self, index: int = 0) -> DecisionNode:
        root = DecisionNode(value=float(self.value[index]), n_samples=int(self.n_samples[index]))
        stack = [(index, root)]
        while stack:
            i, node = stack.pop()
            if self.feature[i] == LEAF:
                continue
            node.feature = int(self.feature[i])
            node.threshold = float(self.threshold[i])
            node.left = DecisionNode(value=float(self.value[self.left[i]]), n_samples=int(self.n_samples[self.left[i]]))
            node.right = DecisionNode(value=float(self.value[self.right[i]]),
                                      n_samples=int(self.n_samples[self.right[i]]))
            stack.append((self.left[i], node.left))
            stack.append((self.right[i], node.right))
        return root

    def to_dict(self) -> Dict[str, Any]:
        """Nested records: {'value', 'n'} for leaves plus 'feature', 'threshold', 'left', 'right' inside"""
        records = [{'value': float(v), 'n': int(n)} for v, n in zip(self.value, self.n_samples)]
        for i in np.flatnonzero(self.feature != LEAF):
            records[i].update(feature=int(self.feature[i]), threshold=float(self.threshold[i]),
                              impurity=float(self.impurity[i]),
                              left=records[self.left[i]], right=records[self.right[i]])
        for i in np.flatnonzero(self.feature == LEAF):
            records[i]['impurity'] = float(self.impurity[i])
        return records[0]

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'DecisionTree':
        feature, threshold, left, right, value, n_samples, impurity = [], [], [], [], [], [], []
        stack = [(data, None, None)]
        while stack:
            record, parent, side = stack.pop()
            i = len(feature)
            if parent is not None:
                (left if side == 'left' else right)[parent] = i
            value.append(float(record['value']))
            n_samples.append(int(record['n']))
            impurity.append(float(record.get('impurity', 0.0)))
            left.append(LEAF)
            right.append(LEAF)
            if 'feature' in record:
                feature.append(int(record['feature']))
                threshold.append(float(record['threshold']))
                stack.append((record['right'], i, 'right'))
                stack.append((record['left'], i, 'left'))
            else:
                feature.append(LEAF)
                threshold.append(0.0)
        return cls(feature, threshold, left, right, value, n_samples, impurity)


def _gini(positives, n):
    p = positives / n
    return 2.0 * p * (1.0 - p)


def _best_split(X: np.ndarray, y: np.ndarray, rows: np.ndarray, features: Sequence[int],
                parent_impurity: float, min_leaf: int):
    """(gain, feature, threshold) of the best split over the given features, or None"""
    n = len(rows)
    best = None
    sizes = np.arange(1, n)
    labels = y[rows]
    total = float(labels.sum())
    for f in features:
        xs = X[rows, f]
        order = np.argsort(xs, kind='stable')
        xs = xs[order]
        cpos = np.cumsum(labels[order])[:-1]
        valid = (xs[:-1] < xs[1:]) & (sizes >= min_leaf) & (n - sizes >= min_leaf)
        if not valid.any():
            continue
        weighted = (sizes * _gini(cpos, sizes) + (n - sizes) * _gini(total - cpos, n - sizes)) / n
        gains = np.where(valid, parent_impurity - weighted, -np.inf)
        i = int(np.argmax(gains))
        if gains[i] > _MIN_GAIN and (best is None or gains[i] > best[0]):
            best = (float(gains[i]), int(f), float((xs[i] + xs[i + 1]) / 2.0))
    return best


def build_tree(X: np.ndarray, y: np.ndarray, rows: np.ndarray, config: ForestConfig,
               rng: np.random.Generator) -> DecisionTree:
    """
    Grow one CART tree on the given (possibly repeated) row indices

    Each split draws a random feature subset; when none of those features can
    split the node, the remaining features are tried in the same random order.
    """
    n_features = X.shape[1]
    m = config.split_features(n_features)
    feature, threshold, left, right, value, n_samples, impurity = [], [], [], [], [], [], []

    def new_node(node_rows):
        positives = float(y[node_rows].sum())
        feature.append(LEAF)
        threshold.append(0.0)
        left.append(LEAF)
        right.append(LEAF)
        value.append(positives / len(node_rows))
        n_samples.append(len(node_rows))
        impurity.append(float(_gini(positives, len(node_rows))))
        return len(feature) - 1

    stack = [(new_node(rows), rows, 0)]
    while stack:
        node, node_rows, depth = stack.pop()
        if impurity[node] <= 0.0 or len(node_rows) < 2 * config.min_samples_leaf:
            continue
        if config.max_depth is not None and depth >= config.max_depth:
            continue
        permutation = rng.permutation(n_features)
        split = _best_split(X, y, node_rows, np.sort(permutation[:m]), impurity[node], config.min_samples_leaf)
        if split is None:
            for f in permutation[m:]:
                split = _best_split(X, y, node_rows, [f], impurity[node], config.min_samples_leaf)
                if split is not None:
                    break
        if split is None:
            continue
        _, f, t = split
        goes_left = X[node_rows, f] <= t
        feature[node], threshold[node] = f, t
        l_rows, r_rows = node_rows[goes_left], node_rows[~goes_left]
        left[node] = new_node(l_rows)
        right[node] = new_node(r_rows)
        stack.append((right[node], r_rows, depth + 1))
        stack.append((left[node], l_rows, depth + 1))

    return DecisionTree(feature, threshold, left, right, value, n_samples, impurity)


@dataclass
class Forest:
    trees: List[DecisionTree]
    config: ForestConfig
    feature_names: List[str]
    seed: int = 0
    oob_info: Optional[Dict[str, Any]] = None
    _importance: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def _check(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f'forest expects {self.n_features} features, got {X.shape[1]}')
        return X

    def predict_proba(self, X) -> np.ndarray:
        """Mean of per-tree leaf class-1 fractions"""
        X = self._check(X)
        total = np.zeros(len(X))
        for tree in self.trees:
            total += tree.predict_proba(X)
        return total / len(self.trees)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(np.int64)

    def feature_importance(self) -> np.ndarray:
        """Mean decrease in Gini impurity, per-tree normalized then averaged; sums to 1"""
        if self._importance is None:
            per_tree = []
            for tree in self.trees:
                raw = tree.importance(self.n_features)
                per_tree.append(raw / raw.sum() if raw.sum() > 0 else raw)
            mean = np.mean(per_tree, axis=0)
            total = mean.sum()
            self._importance = mean / total if total > 0 else np.full(self.n_features, 1.0 / self.n_features)
        return self._importance

    def to_dict(self) -> Dict[str, Any]:
        return {
            'format': FORMAT_NAME,
            'version': FORMAT_VERSION,
            'config': asdict(self.config),
            'seed': self.seed,
            'feature_names': list(self.feature_names),
            'oob': self.oob_info,
            'trees': [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Forest':
        if data.get('format') != FORMAT_NAME:
            raise ModelError(f"Not a forest file (format={data.get('format')})")
        if data.get('version') != FORMAT_VERSION:
            raise ModelError(f"Unsupported forest version {data.get('version')}")
        return cls(
            trees=[DecisionTree.from_dict(t) for t in data['trees']],
            config=ForestConfig(**data['config']),
            feature_names=list(data['feature_names']),
            seed=int(data.get('seed', 0)),
            oob_info=data.get('oob'),
        )


def _validate_training(X: np.ndarray, y: np.ndarray):
    if X.ndim != 2 or len(X) != len(y) or not len(X):
        raise DataError(f'training data must be a non-empty (n, d) matrix with n labels, got {X.shape}/{y.shape}')
    bad = np.flatnonzero(~np.isfinite(X).all(axis=1))
    if len(bad):
        raise DataError(f'non-finite feature value in training row {int(bad[0])}')
    classes = np.unique(y)
    if not np.isin(classes, (0, 1)).all():
        raise DataError(f'labels must be 0/1, got {classes.tolist()}')
    if len(classes) < 2:
        raise DataError('training set holds a single class')


def train_forest(X, y, config: Optional[ForestConfig] = None, seed: int = 0,
                 feature_names: Optional[Sequence[str]] = None) -> Forest:
    """
    Train a bagged CART ensemble

    Args:
        X: (n, d) training features
        y: 0/1 labels
        config: ForestConfig, defaults when None
        seed: base seed; tree i draws from default_rng([seed, i])

    Returns:
        Trained Forest, bit-identical for equal inputs whatever n_jobs is
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    config = config or ForestConfig()
    _validate_training(X, y)
    config.validate(X.shape[1])
    n = len(X)

    def grow(i: int):
        rng = np.random.default_rng([seed, i])
        rows = rng.integers(0, n, n)
        return build_tree(X, y, rows, config, rng), rows

    if config.n_jobs > 1:
        with ThreadPoolExecutor(max_workers=config.n_jobs) as pool:
            grown = list(pool.map(grow, range(config.n_trees)))
    else:
        grown = [grow(i) for i in range(config.n_trees)]

    names = list(feature_names) if feature_names is not None else [f'f{j}' for j in range(X.shape[1])]
    forest = Forest(trees=[t for t, _ in grown], config=config, feature_names=names, seed=seed)

    if config.oob_score:
        votes = np.zeros(n)
        counts = np.zeros(n)
        for tree, rows in grown:
            out = np.ones(n, dtype=bool)
            out[rows] = False
            if out.any():
                votes[out] += tree.predict_proba(X[out])
                counts[out] += 1
        covered = counts > 0
        accuracy = float(((votes[covered] / counts[covered] >= 0.5) == y[covered]).mean()) if covered.any() else None
        forest.oob_info = {'accuracy': accuracy, 'covered_rows': int(covered.sum())}

    depths = [t.depth for t in forest.trees]
    logger.info(f"Trained forest: {config.n_trees} trees on {n} rows x {X.shape[1]} features, "
                f"depth {min(depths)}-{max(depths)}")
    return forest


def predict_proba(forest: Forest, sample) -> np.ndarray:
    return forest.predict_proba(sample)


def feature_importance(forest: Forest) -> np.ndarray:
    return forest.feature_importance()


def grouped_importance(importance: Sequence[float], feature_names: Sequence[str],
                       groups: Optional[Dict[str, Sequence[str]]] = None) -> Dict[str, float]:
    """
    Importance keyed by name with grouped columns summed

    Args:
        groups: output name -> member columns (e.g. the one-hot style columns)
    """
    values = dict(zip(feature_names, (float(v) for v in importance)))
    for name, members in (groups or {}).items():
        present = [m for m in members if m in values]
        if present:
            values[name] = sum(values.pop(m) for m in present)
    return values
