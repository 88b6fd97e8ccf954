import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from cnn_lstm import NetworkConfig, SequenceNetwork, TrainHistory, train_network
from config import derive_seed
from errors import ConfigurationError, DataError, PipelineError
from feature_builder import encode_tensors
from fuzzifier import (AGGREGATE, SEQUENCE, STYLE_COLUMNS, DatasetVariant, FuzzyCoefficients, ModelDataset,
                       VariantKind, build_dataset_variant)
from random_forest import Forest, ForestConfig, grouped_importance, train_forest
from report_writer import content_hash

logger = logging.getLogger(__name__)

RF = 'rf'
CNN_LSTM = 'cnn_lstm'
THRESHOLD = 0.5
METRIC_NAMES = ('accuracy', 'precision', 'recall', 'f1', 'auc')
LEADERBOARD_COLUMNS = (['rank', 'variant', 'a', 'b']
                       + [f'{split}_{m}' for split in ('train', 'test') for m in METRIC_NAMES]
                       + ['status', 'error'])


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f'confusion counts must be non-negative: {self}')

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> 'ConfusionMatrix':
        y_true = np.asarray(y_true).astype(bool)
        y_pred = np.asarray(y_pred).astype(bool)
        return cls(tp=int((y_true & y_pred).sum()), fp=int((~y_true & y_pred).sum()),
                   tn=int((~y_true & ~y_pred).sum()), fn=int((y_true & ~y_pred).sum()))

    def to_dict(self) -> Dict[str, int]:
        return {'tp': self.tp, 'fp': self.fp, 'tn': self.tn, 'fn': self.fn}


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float


def metrics(cm: ConfusionMatrix) -> Metrics:
    """Accuracy, precision, recall and F1; a zero denominator gives 0"""
    if cm.total <= 0:
        raise ValueError('metrics need at least one evaluated sample')
    accuracy = (cm.tp + cm.tn) / cm.total
    precision = cm.tp / (cm.tp + cm.fp) if cm.tp + cm.fp else 0.0
    recall = cm.tp / (cm.tp + cm.fn) if cm.tp + cm.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return Metrics(accuracy, precision, recall, f1)


@dataclass
class MetricsReport:
    split: str
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float

    def to_dict(self) -> Dict[str, Any]:
        return {'split': self.split, 'accuracy': self.accuracy, 'precision': self.precision,
                'recall': self.recall, 'f1': self.f1, 'auc': self.auc}


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'threshold': self.thresholds, 'fpr': self.fpr, 'tpr': self.tpr})


def roc_auc(scores, labels) -> Tuple[RocCurve, float]:
    """
    ROC over every distinct score (predict positive when score >= threshold)

    Tied scores form one segment, so the trapezoidal area equals
    P(score_pos > score_neg) + 0.5 * P(tie).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    positives = int(labels.sum())
    negatives = len(labels) - positives
    if positives == 0 or negatives == 0:
        raise ValueError('ROC needs both classes in the labels')

    order = np.argsort(-scores, kind='stable')
    ranked = scores[order]
    ends = np.r_[np.flatnonzero(np.diff(ranked)), len(ranked) - 1]
    tps = np.cumsum(labels[order])[ends]
    fps = (ends + 1) - tps
    fpr = np.r_[0.0, fps / negatives]
    tpr = np.r_[0.0, tps / positives]
    thresholds = np.r_[np.inf, ranked[ends]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr=fpr, tpr=tpr, thresholds=thresholds), auc


def evaluate_scores(scores, labels, split: str) -> Tuple[MetricsReport, ConfusionMatrix, Optional[RocCurve]]:
    cm = ConfusionMatrix.from_predictions(labels, np.asarray(scores) >= THRESHOLD)
    m = metrics(cm)
    try:
        curve, auc = roc_auc(scores, labels)
    except ValueError:
        logger.warning(f"{split} split holds a single class; AUC undefined")
        curve, auc = None, float('nan')
    return MetricsReport(split, m.accuracy, m.precision, m.recall, m.f1, auc), cm, curve


def split_indices(labels, groups: Sequence, ratio: float = 0.9, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Group-aware stratified split

    Rows sharing a group key stay on one side. Groups are stratified by their
    highest label, and each stratum sends round((1 - ratio) * rows) rows to test.

    Raises:
        DataError when a stratum holds fewer than two groups or a side ends up
        without both classes
    """
    labels = np.asarray(labels).astype(np.int64)
    if not len(labels):
        raise DataError('cannot split an empty dataset')
    if not 0 < ratio < 1:
        raise ValueError(f'ratio must be in (0, 1), got {ratio}')
    keys = sorted(set(groups))
    index = {k: i for i, k in enumerate(keys)}
    group_of = np.array([index[g] for g in groups], dtype=np.int64)
    sizes = np.bincount(group_of, minlength=len(keys))
    group_label = np.zeros(len(keys), dtype=np.int64)
    np.maximum.at(group_label, group_of, labels)

    rng = np.random.default_rng(seed)
    test_groups = []
    for stratum in np.unique(group_label):
        members = np.flatnonzero(group_label == stratum)
        if len(members) < 2:
            raise DataError(f'too few samples to split: class {stratum} has {len(members)} group(s)')
        target = max(1, int(round((1 - ratio) * sizes[members].sum())))
        taken = 0
        for g in rng.permutation(members):
            if taken >= target:
                break
            if taken + sizes[g] <= target or taken == 0:
                test_groups.append(g)
                taken += sizes[g]

    in_test = np.isin(group_of, test_groups)
    test = np.flatnonzero(in_test)
    train = np.flatnonzero(~in_test)
    for name, side in (('train', train), ('test', test)):
        if len(np.unique(labels[side])) < len(np.unique(labels)):
            raise DataError(f'{name} split is missing a class; too few samples per class')
    return train, test


def split_train_test(dataset: ModelDataset, ratio: float = 0.9, seed: int = 0) -> Tuple[ModelDataset, ModelDataset]:
    """Pair-level split: both windows of a vehicle's pairs stay on one side"""
    train, test = split_indices(dataset.y, dataset.group_keys(), ratio, seed)
    return dataset.subset(train), dataset.subset(test)


class FeatureScaler:
    """Per-feature z-score from training statistics; zero-variance features pass through"""

    def __init__(self):
        self.mean: Optional[np.ndarray] = None
        self.std: Optional[np.ndarray] = None

    def fit(self, X) -> 'FeatureScaler':
        X = np.asarray(X, dtype=np.float64)
        flat = X.reshape(-1, X.shape[-1])
        self.mean = flat.mean(axis=0)
        self.std = flat.std(axis=0)
        return self

    def transform(self, X) -> np.ndarray:
        if self.mean is None:
            raise ValueError('scaler is not fitted')
        X = np.asarray(X, dtype=np.float64)
        constant = self.std == 0
        mean = np.where(constant, 0.0, self.mean)
        scale = np.where(constant, 1.0, self.std)
        return (X - mean) / scale

    def to_dict(self) -> Dict[str, List[float]]:
        return {'mean': self.mean.tolist(), 'std': self.std.tolist()}


def standardize(train: ModelDataset, *others: ModelDataset) -> Tuple[List[ModelDataset], FeatureScaler]:
    """Scale train and every other dataset with statistics fitted on train only"""
    scaler = FeatureScaler().fit(train.X)
    scaled = []
    for dataset in (train,) + others:
        copy = dataset.subset(np.arange(len(dataset)))
        copy.X = scaler.transform(dataset.X)
        scaled.append(copy)
    return scaled, scaler


@dataclass
class ClassifierSpec:
    kind: str = RF
    forest: ForestConfig = field(default_factory=ForestConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train_ratio: float = 0.9

    @property
    def form(self) -> str:
        return AGGREGATE if self.kind == RF else SEQUENCE

    @classmethod
    def from_options(cls, kind: str, rf: Dict[str, Any], cnn_lstm: Dict[str, Any], train_ratio: float = 0.9,
                     n_jobs: int = 1) -> 'ClassifierSpec':
        if kind not in (RF, CNN_LSTM):
            raise ConfigurationError(f"Unknown classifier '{kind}'")
        try:
            forest = ForestConfig.from_dict({'n_jobs': n_jobs, **rf})
            network = NetworkConfig.from_dict(cnn_lstm)
            network.validate()
        except (TypeError, ValueError) as e:
            raise ConfigurationError(f'Invalid classifier options: {e}')
        return cls(kind=kind, forest=forest, network=network, train_ratio=train_ratio)

    def check_compatible(self, variant: DatasetVariant, form: str):
        if self.kind == CNN_LSTM and variant.kind is VariantKind.BIRD_WITH_STYLE:
            raise ConfigurationError('Bird&DS pairs with the random forest only')
        if form != self.form:
            raise ConfigurationError(f'{self.kind} needs {self.form} datasets, got {form}')


@dataclass
class ExperimentResult:
    variant: DatasetVariant
    kind: str
    seed: int
    train: Optional[MetricsReport] = None
    test: Optional[MetricsReport] = None
    train_confusion: Optional[ConfusionMatrix] = None
    test_confusion: Optional[ConfusionMatrix] = None
    roc: Optional[RocCurve] = None
    importance: Optional[Dict[str, float]] = None
    grouped_importance: Optional[Dict[str, float]] = None
    history: Optional[TrainHistory] = None
    model: Any = None
    scaler: Optional[FeatureScaler] = None
    n_train: int = 0
    n_test: int = 0
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def coefficients(self) -> Optional[FuzzyCoefficients]:
        return self.variant.coefficients

    def model_payload(self) -> Tuple[str, Any]:
        """(kind of payload, payload) for writing: forest JSON or network tensor bytes"""
        if isinstance(self.model, Forest):
            return 'json', self.model.to_dict()
        return 'tensors', encode_tensors(self.model.to_tensors())

    def model_hash(self) -> Optional[str]:
        if self.model is None:
            return None
        return content_hash(self.model_payload()[1])

    def manifest(self) -> Dict[str, Any]:
        coeffs = self.coefficients
        return {
            'variant': self.variant.tag,
            'coefficients': None if coeffs is None else {'a': coeffs.a, 'b': coeffs.b},
            'classifier': self.kind,
            'seeds': {'run': self.seed, 'split': derive_seed(self.seed, 'split'),
                      'model': derive_seed(self.seed, self.kind)},
            'rows': {'train': self.n_train, 'test': self.n_test},
            'model_hash': self.model_hash(),
            'status': 'ok' if self.ok else 'failed',
            'error': self.error,
            'metrics': {
                'train': self.train.to_dict() if self.train else None,
                'test': self.test.to_dict() if self.test else None,
            },
            'confusion': {
                'train': self.train_confusion.to_dict() if self.train_confusion else None,
                'test': self.test_confusion.to_dict() if self.test_confusion else None,
            },
        }

    def leaderboard_row(self) -> Dict[str, Any]:
        coeffs = self.coefficients
        row: Dict[str, Any] = {'variant': self.variant.tag,
                               'a': None if coeffs is None else coeffs.a,
                               'b': None if coeffs is None else coeffs.b}
        for split, report in (('train', self.train), ('test', self.test)):
            for m in METRIC_NAMES:
                row[f'{split}_{m}'] = getattr(report, m) if report else float('nan')
        row['status'] = 'ok' if self.ok else 'failed'
        row['error'] = self.error or ''
        return row


def run_experiment(dataset: ModelDataset, spec: ClassifierSpec, seed: int,
                   split: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> ExperimentResult:
    """
    Split, standardize, train and evaluate one classifier on one dataset variant

    The split and model seeds derive from `seed` only, so variants of the same
    underlying dataset see the same split and the same model randomness.

    Raises:
        ConfigurationError for an incompatible variant/classifier pairing
    """
    spec.check_compatible(dataset.variant, dataset.form)
    if split is None:
        split = split_indices(dataset.y, dataset.group_keys(), spec.train_ratio, derive_seed(seed, 'split'))
    train_idx, test_idx = split
    (train, test), scaler = standardize(dataset.subset(train_idx), dataset.subset(test_idx))
    result = ExperimentResult(variant=dataset.variant, kind=spec.kind, seed=seed, scaler=scaler,
                              n_train=len(train), n_test=len(test))

    if spec.kind == RF:
        forest = train_forest(train.X, train.y, spec.forest, seed=derive_seed(seed, RF),
                              feature_names=dataset.feature_names)
        result.model = forest
        importance = forest.feature_importance()
        result.importance = dict(zip(dataset.feature_names, (float(v) for v in importance)))
        result.grouped_importance = grouped_importance(importance, dataset.feature_names,
                                                       {'driving_style': STYLE_COLUMNS})
        train_scores = forest.predict_proba(train.X)
        test_scores = forest.predict_proba(test.X)
    else:
        net_config = NetworkConfig(**{**spec.network.__dict__, 'seed': derive_seed(seed, CNN_LSTM),
                                      'input_size': train.X.shape[2], 'seq_len': train.X.shape[1]})
        fit, val = train, None
        if net_config.validation_fraction > 0:
            fit_idx, val_idx = split_indices(train.y, train.group_keys(), 1 - net_config.validation_fraction,
                                             derive_seed(seed, 'validation'))
            fit, val = train.subset(fit_idx), train.subset(val_idx)
        net = SequenceNetwork(net_config)
        net, history = train_network(net, fit.X, fit.y,
                                     None if val is None else val.X, None if val is None else val.y, net_config)
        result.model, result.history = net, history
        train_scores = net.predict_proba(train.X)
        test_scores = net.predict_proba(test.X)

    result.train, result.train_confusion, _ = evaluate_scores(train_scores, train.y, 'train')
    result.test, result.test_confusion, result.roc = evaluate_scores(test_scores, test.y, 'test')
    logger.info(f"{dataset.variant.tag} / {spec.kind}: train acc {result.train.accuracy:.4f}, "
                f"test acc {result.test.accuracy:.4f}, test AUC {result.test.auc:.4f}")
    return result


@dataclass
class Leaderboard:
    results: List[ExperimentResult]

    def _sort_key(self, result: ExperimentResult):
        coeffs = result.coefficients
        accuracy = result.test.accuracy if result.ok and result.test else -1.0
        # baselines sort ahead of fuzzy rows on equal accuracy
        a, b = (coeffs.a, coeffs.b) if coeffs else (-1.0, -1.0 if result.variant.kind is VariantKind.BIRD else -0.5)
        return (not result.ok, -accuracy, a, b)

    def ranked(self) -> List[ExperimentResult]:
        return sorted(self.results, key=self._sort_key)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for rank, result in enumerate(self.ranked(), start=1):
            row = result.leaderboard_row()
            row['rank'] = rank
            rows.append(row)
        return pd.DataFrame(rows, columns=LEADERBOARD_COLUMNS)

    def top(self, n: int = 5) -> pd.DataFrame:
        return self.to_frame().head(n)

    @property
    def failures(self) -> List[ExperimentResult]:
        return [r for r in self.results if not r.ok]


def sweep_variants(grid: Sequence[FuzzyCoefficients], spec: ClassifierSpec,
                   include_baselines: bool = True) -> List[DatasetVariant]:
    """Bird baselines (Bird&DS for the forest only) followed by one fuzzy variant per grid point"""
    variants = []
    if include_baselines:
        variants.append(DatasetVariant.bird())
        if spec.kind == RF:
            variants.append(DatasetVariant.bird_with_style())
    variants += [DatasetVariant(VariantKind.FUZZY, c) for c in grid]
    return variants


def sweep(samples, grid: Sequence[FuzzyCoefficients], spec: ClassifierSpec, seed: int, cluster_model=None,
          include_baselines: bool = True, n_jobs: int = 1, fuzz_own_speed: bool = True) -> Leaderboard:
    """
    One experiment per grid point plus the bird baselines, all on the same split

    A failing run is logged and flagged on the leaderboard; the sweep continues.
    """
    if not len(grid):
        raise ConfigurationError('the fuzzy grid is empty')
    variants = sweep_variants(grid, spec, include_baselines)

    def run(variant: DatasetVariant) -> ExperimentResult:
        try:
            dataset = build_dataset_variant(samples, variant, cluster_model, spec.form, fuzz_own_speed)
            return run_experiment(dataset, spec, seed)
        except (PipelineError, ValueError, FloatingPointError) as e:
            logger.error(f"Sweep run {variant.tag} failed: {e}")
            return ExperimentResult(variant=variant, kind=spec.kind, seed=seed, error=str(e))

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, variants))
    else:
        results = [run(v) for v in variants]

    board = Leaderboard(results)
    logger.info(f"Sweep finished: {len(results)} runs, {len(board.failures)} failed")
    return board
