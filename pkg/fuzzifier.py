import logging
import re
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from errors import ConfigurationError, DataError
from feature_builder import (AGGREGATE_NAMES, DISTANCE, FEATURE_KINDS, FEATURE_NAMES, OWN_SPEED_FEATURES, SPEED,
                             SequenceSample, aggregate_features)
from style_clustering import STYLE_ORDER, ClusterModel, DrivingStyle, assign_styles

logger = logging.getLogger(__name__)

AGGREGATE = 'aggregate'
SEQUENCE = 'sequence'

STYLE_COLUMNS = tuple(f'style_{s.value}' for s in STYLE_ORDER)

GRID_VALUES = tuple(round(0.1 * i, 1) for i in range(1, 10))


@dataclass(frozen=True)
class FuzzyCoefficients:
    """Perception distortion: a scales distances, b scales speeds"""

    a: float
    b: float

    def __post_init__(self):
        for name in ('a', 'b'):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise ValueError(f'fuzzy coefficient {name} must be in [0, 1), got {value}')

    @property
    def tag(self) -> str:
        return f'F_{self.a:g}_{self.b:g}'

    def distance_factor(self, style: DrivingStyle) -> float:
        style = DrivingStyle(style)
        if style is DrivingStyle.CAUTIOUS:
            return 1.0 - self.a
        if style is DrivingStyle.AGGRESSIVE:
            return 1.0 + self.a
        return 1.0

    def speed_factor(self, style: DrivingStyle) -> float:
        style = DrivingStyle(style)
        if style is DrivingStyle.CAUTIOUS:
            return 1.0 + self.b
        if style is DrivingStyle.AGGRESSIVE:
            return 1.0 - self.b
        return 1.0


class VariantKind(str, Enum):
    BIRD = 'bird'
    BIRD_WITH_STYLE = 'bird_with_style'
    FUZZY = 'fuzzy'


@dataclass(frozen=True)
class DatasetVariant:
    kind: VariantKind
    coefficients: Optional[FuzzyCoefficients] = None

    def __post_init__(self):
        object.__setattr__(self, 'kind', VariantKind(self.kind))
        if self.kind is VariantKind.FUZZY and self.coefficients is None:
            raise ValueError('the fuzzy variant requires coefficients')
        if self.kind is not VariantKind.FUZZY and self.coefficients is not None:
            raise ValueError(f'the {self.kind.value} variant takes no coefficients')

    @classmethod
    def bird(cls) -> 'DatasetVariant':
        return cls(VariantKind.BIRD)

    @classmethod
    def bird_with_style(cls) -> 'DatasetVariant':
        return cls(VariantKind.BIRD_WITH_STYLE)

    @classmethod
    def fuzzy(cls, a: float, b: float) -> 'DatasetVariant':
        return cls(VariantKind.FUZZY, FuzzyCoefficients(a, b))

    @classmethod
    def from_tag(cls, tag: str) -> 'DatasetVariant':
        if tag == 'Bird':
            return cls.bird()
        if tag == 'Bird&DS':
            return cls.bird_with_style()
        match = re.fullmatch(r'F_([0-9.]+)_([0-9.]+)', tag)
        if not match:
            raise ValueError(f'Unknown dataset variant tag: {tag}')
        return cls.fuzzy(float(match.group(1)), float(match.group(2)))

    @property
    def tag(self) -> str:
        if self.kind is VariantKind.BIRD:
            return 'Bird'
        if self.kind is VariantKind.BIRD_WITH_STYLE:
            return 'Bird&DS'
        return self.coefficients.tag

    @property
    def uses_styles(self) -> bool:
        return self.kind is not VariantKind.BIRD


@dataclass(eq=False)
class FeatureSample:
    """Feature values of one window in aggregate (32,) or sequence (T, 16) form"""

    values: np.ndarray
    form: str = AGGREGATE
    label: int = -1


def column_factors(style: DrivingStyle, coeffs: FuzzyCoefficients, fuzz_own_speed: bool = True) -> np.ndarray:
    """Multiplier for each per-frame variable; accelerations stay at 1"""
    distance = coeffs.distance_factor(style)
    speed = coeffs.speed_factor(style)
    factors = np.ones(len(FEATURE_NAMES))
    for j, name in enumerate(FEATURE_NAMES):
        if FEATURE_KINDS[name] == DISTANCE:
            factors[j] = distance
        elif FEATURE_KINDS[name] == SPEED and (fuzz_own_speed or name not in OWN_SPEED_FEATURES):
            factors[j] = speed
    return factors


def fuzzify_features(sample: FeatureSample, style: DrivingStyle, coeffs: FuzzyCoefficients,
                     fuzz_own_speed: bool = True) -> FeatureSample:
    """
    Style-conditioned perception of one sample

    Distances scale by (1-a) / 1 / (1+a) and speeds by (1+b) / 1 / (1-b) for
    cautious / general / aggressive drivers. Aggregate means and stds take the
    same factor as their variable.
    """
    factors = column_factors(style, coeffs, fuzz_own_speed)
    values = np.asarray(sample.values, dtype=np.float64)
    if sample.form == AGGREGATE:
        if values.shape[-1] != len(AGGREGATE_NAMES):
            raise ValueError(f'aggregate sample must have {len(AGGREGATE_NAMES)} values, got {values.shape[-1]}')
        factors = np.concatenate([factors, factors])
    elif sample.form == SEQUENCE:
        if values.shape[-1] != len(FEATURE_NAMES):
            raise ValueError(f'sequence sample must have {len(FEATURE_NAMES)} columns, got {values.shape[-1]}')
    else:
        raise ValueError(f'unknown sample form: {sample.form}')
    return FeatureSample(values=values * factors, form=sample.form, label=sample.label)


@dataclass(eq=False)
class ModelDataset:
    """Model input: one row per window, rows in pair order (LC then LK)"""

    variant: DatasetVariant
    form: str
    X: np.ndarray
    y: np.ndarray
    pair_ids: np.ndarray
    recording_ids: np.ndarray
    track_ids: np.ndarray
    feature_names: Tuple[str, ...]
    styles: Optional[List[str]] = None

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    def group_keys(self) -> List[Tuple[int, int]]:
        return list(zip(self.recording_ids.tolist(), self.track_ids.tolist()))

    def subset(self, indices) -> 'ModelDataset':
        idx = np.asarray(indices, dtype=np.int64)
        return ModelDataset(
            variant=self.variant, form=self.form, X=self.X[idx], y=self.y[idx],
            pair_ids=self.pair_ids[idx], recording_ids=self.recording_ids[idx], track_ids=self.track_ids[idx],
            feature_names=self.feature_names,
            styles=None if self.styles is None else [self.styles[i] for i in idx],
        )

    def to_frame(self) -> pd.DataFrame:
        """Aggregate rows as a table with identifiers and label leading"""
        if self.form != AGGREGATE:
            raise ValueError('only aggregate datasets export as a table')
        table = pd.DataFrame(self.X, columns=list(self.feature_names))
        table.insert(0, 'label', self.y)
        table.insert(0, 'track_id', self.track_ids)
        table.insert(0, 'recording_id', self.recording_ids)
        table.insert(0, 'pair_id', self.pair_ids)
        return table

    def manifest(self, cluster_model_hash: Optional[str] = None) -> Dict[str, Any]:
        coeffs = self.variant.coefficients
        return {
            'variant': self.variant.kind.value,
            'tag': self.variant.tag,
            'coefficients': None if coeffs is None else {'a': coeffs.a, 'b': coeffs.b},
            'form': self.form,
            'rows': len(self),
            'features': list(self.feature_names),
            'label_counts': {str(k): int(v) for k, v in zip(*np.unique(self.y, return_counts=True))},
            'cluster_model_hash': cluster_model_hash,
        }


def _resolve_styles(samples: Sequence[SequenceSample], cluster_model: Optional[ClusterModel]) -> List[DrivingStyle]:
    if cluster_model is not None:
        points = []
        for s in samples:
            if s.style_point is None:
                raise DataError(f'Pair {s.pair_id} has no style features to classify')
            points.append(s.style_point)
        return assign_styles(cluster_model, points)
    if any(s.style is None for s in samples):
        raise ConfigurationError('Driving styles are required: provide a cluster model')
    return [DrivingStyle(s.style) for s in samples]


def build_dataset_variant(samples: Sequence[SequenceSample], variant: DatasetVariant,
                          cluster_model: Optional[ClusterModel] = None, form: str = AGGREGATE,
                          fuzz_own_speed: bool = True) -> ModelDataset:
    """
    Assemble one model-input dataset from raw window samples

    Args:
        samples: SequenceSamples in pair order
        variant: Bird (raw), Bird&DS (raw + one-hot style) or fuzzy (perceived)
        cluster_model: assigns each pair's style from its style point
        form: 'aggregate' (32 mean/std values) or 'sequence' (50 x 16)

    Returns:
        ModelDataset; row order and labels match the input for every variant

    Raises:
        ConfigurationError for the style-augmented variant in sequence form
    """
    if form not in (AGGREGATE, SEQUENCE):
        raise ValueError(f'unknown dataset form: {form}')
    if variant.kind is VariantKind.BIRD_WITH_STYLE and form == SEQUENCE:
        raise ConfigurationError('Bird&DS is defined for aggregate features only')

    styles = _resolve_styles(samples, cluster_model) if variant.uses_styles else None

    if form == AGGREGATE:
        rows = [aggregate_features(s.values) for s in samples]
        X = np.vstack(rows) if rows else np.empty((0, len(AGGREGATE_NAMES)))
        names: Tuple[str, ...] = AGGREGATE_NAMES
    else:
        X = np.stack([s.values for s in samples]) if samples else np.empty((0, 0, len(FEATURE_NAMES)))
        names = FEATURE_NAMES

    if variant.kind is VariantKind.FUZZY:
        for i, style in enumerate(styles):
            X[i] = fuzzify_features(FeatureSample(X[i], form), style, variant.coefficients, fuzz_own_speed).values
    elif variant.kind is VariantKind.BIRD_WITH_STYLE:
        one_hot = np.array([[1.0 if style is s else 0.0 for s in STYLE_ORDER] for style in styles]).reshape(-1, 3)
        X = np.hstack([X, one_hot])
        names = names + STYLE_COLUMNS

    logger.debug(f"Built {variant.tag} {form} dataset: {X.shape}")
    return ModelDataset(
        variant=variant, form=form, X=X, y=np.array([s.label for s in samples], dtype=np.int64),
        pair_ids=np.array([s.pair_id for s in samples], dtype=np.int64),
        recording_ids=np.array([s.recording_id for s in samples], dtype=np.int64),
        track_ids=np.array([s.track_id for s in samples], dtype=np.int64),
        feature_names=tuple(names),
        styles=None if styles is None else [s.value for s in styles],
    )


def coefficient_grid() -> List[FuzzyCoefficients]:
    """The 81 (a, b) pairs over {0.1, ..., 0.9}, a-major"""
    return [FuzzyCoefficients(a, b) for a in GRID_VALUES for b in GRID_VALUES]


def resolve_grid(grid: Union[str, Sequence[Sequence[float]]]) -> List[FuzzyCoefficients]:
    """Grid from config: 'full', 'identity' or an explicit list of [a, b] pairs"""
    if isinstance(grid, str):
        if grid == 'full':
            return coefficient_grid()
        if grid == 'identity':
            return [FuzzyCoefficients(0.0, 0.0)]
        raise ConfigurationError(f'Unknown fuzzy grid: {grid}')
    try:
        return [FuzzyCoefficients(float(a), float(b)) for a, b in grid]
    except (TypeError, ValueError) as e:
        raise ConfigurationError(f'Invalid fuzzy grid: {e}')
