import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import ModelError

logger = logging.getLogger(__name__)

STYLE_FEATURE_NAMES = ('duration', 'lat_accel', 'lat_speed')
_ACCEL, _SPEED = 1, 2


class DrivingStyle(str, Enum):
    AGGRESSIVE = 'aggressive'
    GENERAL = 'general'
    CAUTIOUS = 'cautious'


# fixed order for one-hot columns and report rows
STYLE_ORDER = (DrivingStyle.AGGRESSIVE, DrivingStyle.GENERAL, DrivingStyle.CAUTIOUS)


@dataclass(frozen=True)
class StyleFeatures:
    """Lane-change execution summary: T_LC (s), mean |lateral accel| (m/s^2), mean |lateral speed| (m/s)"""

    duration: float
    lat_accel: float
    lat_speed: float

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f'duration must be > 0, got {self.duration}')
        if self.lat_accel < 0 or self.lat_speed < 0:
            raise ValueError('lateral kinematics must be non-negative')

    def as_array(self) -> np.ndarray:
        return np.array([self.duration, self.lat_accel, self.lat_speed], dtype=np.float64)


def style_features(event, track) -> StyleFeatures:
    """
    Style features of one lane-change execution over [t_s, t_e]

    Args:
        event: LaneChangeEvent (t_s, t_e, duration)
        track: the subject vehicle's normalized Track
    """
    i0 = track.index_of(event.t_s)
    i1 = track.index_of(event.t_e)
    return StyleFeatures(
        duration=float(event.duration),
        lat_accel=float(np.mean(np.abs(track.ay[i0:i1 + 1]))),
        lat_speed=float(np.mean(np.abs(track.vy[i0:i1 + 1]))),
    )


@dataclass
class ClusterModel:
    """K-means result in standardized style space"""

    k: int
    centroids: np.ndarray
    scaler_mean: np.ndarray
    scaler_std: np.ndarray
    label_map: Dict[int, DrivingStyle]
    objective: float
    seed: int = 0
    n_iter: int = 0
    history: List[float] = field(default_factory=list)

    def standardize(self, points) -> np.ndarray:
        return (np.atleast_2d(np.asarray(points, dtype=np.float64)) - self.scaler_mean) / self.scaler_std

    def centroids_original(self) -> np.ndarray:
        return self.centroids * self.scaler_std + self.scaler_mean

    def predict(self, points) -> np.ndarray:
        """Nearest-centroid cluster index per point; ties go to the lower index"""
        z = self.standardize(points)
        d2 = ((z[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'k': self.k,
            'centroids': self.centroids.tolist(),
            'scaler': {'mean': self.scaler_mean.tolist(), 'std': self.scaler_std.tolist()},
            'label_map': {str(i): style.value for i, style in sorted(self.label_map.items())},
            'objective': self.objective,
            'seed': self.seed,
            'n_iter': self.n_iter,
            'history': list(self.history),
            'features': list(STYLE_FEATURE_NAMES),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ClusterModel':
        return cls(
            k=int(data['k']),
            centroids=np.asarray(data['centroids'], dtype=np.float64),
            scaler_mean=np.asarray(data['scaler']['mean'], dtype=np.float64),
            scaler_std=np.asarray(data['scaler']['std'], dtype=np.float64),
            label_map={int(i): DrivingStyle(s) for i, s in data['label_map'].items()},
            objective=float(data['objective']),
            seed=int(data.get('seed', 0)),
            n_iter=int(data.get('n_iter', 0)),
            history=[float(v) for v in data.get('history', [])],
        )


def _kmeans_plus_plus(z: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(z)
    centroids = [z[rng.integers(n)]]
    d2 = ((z - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centroids.append(z[idx])
        d2 = np.minimum(d2, ((z - z[idx]) ** 2).sum(axis=1))
    return np.array(centroids)


def _objective(z: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    return float(((z - centroids[labels]) ** 2).sum())


def _lloyd(z: np.ndarray, centroids: np.ndarray, tol: float,
           max_iter: int) -> Tuple[np.ndarray, np.ndarray, float, List[float], int]:
    """Lloyd iterations until the assignment is a fixpoint or E changes by less than tol (relative)"""
    k = len(centroids)
    labels = None
    history: List[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = ((z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        updated = centroids.copy()
        for j in range(k):
            members = z[new_labels == j]
            if len(members):
                updated[j] = members.mean(axis=0)
        energy = _objective(z, updated, new_labels)
        if history and energy > history[-1] * (1 + 1e-12) + 1e-12:
            raise ModelError(f'k-means objective increased at iteration {it}: {history[-1]} -> {energy}')

        fixpoint = labels is not None and np.array_equal(new_labels, labels)
        small_change = bool(history) and abs(history[-1] - energy) <= tol * max(history[-1], 1e-300)
        history.append(energy)
        labels, centroids = new_labels, updated
        if fixpoint or small_change:
            break

    # final nearest-centroid assignment so every point sits with its nearest centroid
    d2 = ((z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    energy = _objective(z, centroids, labels)
    if energy < history[-1]:
        history.append(energy)
    return labels, centroids, history[-1], history, it


def kmeans_fit(points, k: int = 3, seed: int = 0, restarts: int = 10, tol: float = 1e-8,
               max_iter: int = 300) -> ClusterModel:
    """
    K-means on z-scored points with k-means++ seeding, best of several restarts

    Args:
        points: (n, d) array of style features
        k: number of clusters
        seed: seed for the restart seeds
        restarts: number of k-means++ initializations
        tol: relative change of E that stops the iterations

    Returns:
        ClusterModel with the lowest objective E and its style labeling

    Raises:
        ValueError when fewer than k distinct points are given
    """
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if k < 1:
        raise ValueError(f'k must be >= 1, got {k}')
    if len(np.unique(x, axis=0)) < k:
        raise ValueError(f'k-means needs at least {k} distinct points, got {len(np.unique(x, axis=0))}')
    if not np.isfinite(x).all():
        raise ValueError('k-means points must be finite')

    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std == 0] = 1.0
    z = (x - mean) / std

    best = None
    for r, child in enumerate(np.random.SeedSequence(seed).spawn(restarts)):
        rng = np.random.default_rng(child)
        labels, centroids, energy, history, n_iter = _lloyd(z, _kmeans_plus_plus(z, k, rng), tol, max_iter)
        logger.debug(f"k-means restart {r}: E={energy:.6g} after {n_iter} iterations")
        if best is None or energy < best[2]:
            best = (labels, centroids, energy, history, n_iter)

    labels, centroids, energy, history, n_iter = best
    model = ClusterModel(k=k, centroids=centroids, scaler_mean=mean, scaler_std=std, label_map={},
                         objective=energy, seed=seed, n_iter=n_iter, history=history)
    model.label_map = label_clusters(model)
    logger.info(f"k-means fit: k={k}, E={energy:.6g}, sizes={np.bincount(labels, minlength=k).tolist()}")
    return model


def label_clusters(model: ClusterModel) -> Dict[int, DrivingStyle]:
    """
    Map cluster indices to styles from centroid lateral kinematics

    The highest mean lateral speed is aggressive; of the rest, the higher lateral
    acceleration is cautious and the lower general. Ties go to the lower index.
    """
    original = model.centroids_original()
    order = sorted(range(model.k), key=lambda j: (-original[j, _SPEED], j))
    if model.k == 1:
        logger.warning('k=1: every vehicle is labeled general')
        return {0: DrivingStyle.GENERAL}
    if model.k == 2:
        return {order[0]: DrivingStyle.AGGRESSIVE, order[1]: DrivingStyle.GENERAL}
    if model.k != 3:
        raise ValueError(f'Style labeling supports k <= 3, got {model.k}')
    rest = sorted(order[1:], key=lambda j: (-original[j, _ACCEL], j))
    return {order[0]: DrivingStyle.AGGRESSIVE, rest[0]: DrivingStyle.CAUTIOUS, rest[1]: DrivingStyle.GENERAL}


def assign_style(model: ClusterModel, point) -> DrivingStyle:
    """Style of the nearest centroid in standardized space"""
    if isinstance(point, StyleFeatures):
        point = point.as_array()
    return model.label_map[int(model.predict(point)[0])]


def assign_styles(model: ClusterModel, points: Sequence) -> List[DrivingStyle]:
    arr = np.array([p.as_array() if isinstance(p, StyleFeatures) else p for p in points], dtype=np.float64)
    if not len(arr):
        return []
    return [model.label_map[int(i)] for i in model.predict(arr)]


def cluster_report(points, styles: Sequence[DrivingStyle]) -> pd.DataFrame:
    """Per-style mean/std (population) of the three style features, plus an Overall row"""
    x = np.atleast_2d(np.asarray(points, dtype=np.float64))
    styles = [DrivingStyle(s) for s in styles]
    rows = []
    groups = [(style.value.capitalize(), np.array([s == style for s in styles], dtype=bool)) for style in STYLE_ORDER]
    groups.append(('Overall', np.ones(len(x), dtype=bool)))
    for name, mask in groups:
        row = {'style': name, 'n': int(mask.sum())}
        for j, feature in enumerate(STYLE_FEATURE_NAMES):
            values = x[mask, j]
            row[f'{feature}_mean'] = float(values.mean()) if len(values) else float('nan')
            row[f'{feature}_std'] = float(values.std()) if len(values) else float('nan')
        rows.append(row)
    columns = ['style', 'n'] + [f'{f}_{s}' for f in STYLE_FEATURE_NAMES for s in ('mean', 'std')]
    return pd.DataFrame(rows, columns=columns)
