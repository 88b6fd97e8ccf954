import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Any, Dict, List, Optional, Union

import yaml
from dotenv import load_dotenv

from errors import ConfigurationError

# Load environment variables from .env file
load_dotenv()


class Config:
    """Environment configuration for the lane-change pipeline"""

    # Logging Configuration
    LOG_LEVEL = os.getenv('LOG_LEVEL', 'INFO')
    LOG_FILE = os.getenv('LOG_FILE', 'lane_change_pipeline.log')

    # Pipeline defaults
    CONFIG_FILE = os.getenv('LC_CONFIG_FILE', 'pipeline.yaml')
    OUTPUT_DIR = os.getenv('LC_OUTPUT_DIR', './runs')
    N_JOBS = int(os.getenv('LC_N_JOBS', 1))

    @classmethod
    def validate_config(cls):
        """Validate that the environment configuration is usable"""
        problems = []

        if cls.LOG_LEVEL.upper() not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            problems.append(f'LOG_LEVEL={cls.LOG_LEVEL}')

        if cls.N_JOBS < 1:
            problems.append(f'LC_N_JOBS must be >= 1, got {cls.N_JOBS}')

        log_dir = os.path.dirname(cls.LOG_FILE)
        if log_dir:
            try:
                os.makedirs(log_dir, exist_ok=True)
            except Exception as e:
                problems.append(f'Cannot create log directory: {e}')

        if problems:
            raise ValueError(f"Invalid environment configuration: {', '.join(problems)}")

        return True


@dataclass
class ExtractionOptions:
    window_seconds: float = 2.0
    split_frame_gaps: bool = False


@dataclass
class ClusteringOptions:
    k: int = 3
    restarts: int = 10
    tol: float = 1e-8
    max_iter: int = 300


@dataclass
class FuzzyOptions:
    # 'full' (81-point sweep), 'identity' (a=b=0) or an explicit [[a, b], ...] list
    grid: Union[str, List[List[float]]] = 'full'
    # single (a, b) used by the `train` and `build-datasets` commands
    coefficients: Optional[List[float]] = None
    fuzz_own_speed: bool = True


@dataclass
class ClassifierOptions:
    kind: str = 'rf'
    rf: Dict[str, Any] = field(default_factory=dict)
    cnn_lstm: Dict[str, Any] = field(default_factory=dict)


@dataclass
class SplitOptions:
    train_ratio: float = 0.9


@dataclass
class SynthOptions:
    presets: List[str] = field(default_factory=lambda: ['clean', 'style_blobs', 'truncated',
                                                        'double', 'missing_neighbor', 'lane_keep'])
    events_per_preset: int = 20


@dataclass
class PipelineConfig:
    """One reproducible run definition, loaded from a YAML file"""

    seed: int
    input_dir: str = './data'
    output_dir: str = Config.OUTPUT_DIR
    variant: str = 'fuzzy'
    extraction: ExtractionOptions = field(default_factory=ExtractionOptions)
    clustering: ClusteringOptions = field(default_factory=ClusteringOptions)
    fuzzy: FuzzyOptions = field(default_factory=FuzzyOptions)
    classifier: ClassifierOptions = field(default_factory=ClassifierOptions)
    split: SplitOptions = field(default_factory=SplitOptions)
    synth: SynthOptions = field(default_factory=SynthOptions)

    # Fields that locate a run rather than define it; kept out of the hash
    LOCATION_FIELDS = ('input_dir', 'output_dir')

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        """SHA-256 over the canonical JSON of the run-defining fields"""
        payload = {k: v for k, v in self.to_dict().items() if k not in self.LOCATION_FIELDS}
        canonical = json.dumps(payload, sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def validate(self, require_input: bool = False):
        """
        Check invariants of the run definition

        Args:
            require_input: also require input_dir to exist

        Raises:
            ConfigurationError listing every problem found
        """
        problems = []
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            problems.append('seed must be an integer')
        if self.variant not in ('bird', 'bird_with_style', 'fuzzy'):
            problems.append(f"variant must be bird, bird_with_style or fuzzy, got '{self.variant}'")
        if self.extraction.window_seconds <= 0:
            problems.append('extraction.window_seconds must be > 0')
        if self.clustering.k < 1 or self.clustering.k > 3:
            problems.append('clustering.k must be 1, 2 or 3')
        if self.clustering.restarts < 1:
            problems.append('clustering.restarts must be >= 1')
        if self.clustering.tol < 0:
            problems.append('clustering.tol must be >= 0')
        if self.classifier.kind not in ('rf', 'cnn_lstm'):
            problems.append(f"classifier.kind must be 'rf' or 'cnn_lstm', got '{self.classifier.kind}'")
        if not 0 < self.split.train_ratio < 1:
            problems.append('split.train_ratio must be in (0, 1)')
        grid = self.fuzzy.grid
        if isinstance(grid, str):
            if grid not in ('full', 'identity'):
                problems.append(f"fuzzy.grid must be 'full', 'identity' or a list, got '{grid}'")
        else:
            for pair in grid:
                if len(pair) != 2 or not all(0 <= v < 1 for v in pair):
                    problems.append(f'fuzzy.grid entry {pair} is not a valid (a, b) pair')
        if self.fuzzy.coefficients is not None:
            pair = self.fuzzy.coefficients
            if len(pair) != 2 or not all(0 <= v < 1 for v in pair):
                problems.append(f'fuzzy.coefficients {pair} is not a valid (a, b) pair')
        if require_input and not os.path.isdir(self.input_dir):
            problems.append(f'input_dir does not exist: {self.input_dir}')

        if problems:
            raise ConfigurationError(f"Invalid pipeline configuration: {'; '.join(problems)}")
        return True


def _build(cls, data: Dict[str, Any], where: str):
    """Build a dataclass from a mapping, rejecting unknown keys"""
    if not isinstance(data, dict):
        raise ConfigurationError(f'{where or "config"} must be a mapping')
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigurationError(f"Unknown configuration keys in {where or 'config'}: {', '.join(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = known[name].default_factory() if callable(known[name].default_factory) else None
        if is_dataclass(default) and isinstance(value, dict):
            kwargs[name] = _build(type(default), value, f'{where}.{name}' if where else name)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigurationError(f'Incomplete configuration in {where or "config"}: {e}')


def load_pipeline_config(path: Optional[str] = None,
                         overrides: Optional[Dict[str, Any]] = None) -> PipelineConfig:
    """
    Load a pipeline configuration file and apply flag overrides

    Args:
        path: YAML file; None means an empty file (overrides must then supply the seed)
        overrides: dotted keys (e.g. 'classifier.kind') mapped to values

    Returns:
        Resolved PipelineConfig
    """
    data: Dict[str, Any] = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigurationError(f'Config file not found: {path}')
        try:
            with open(path, 'r', encoding='utf-8') as f:
                data = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f'Config file is not valid YAML: {e}')

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = data
        parts = dotted.split('.')
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value

    if 'seed' not in data:
        raise ConfigurationError('seed is mandatory')
    return _build(PipelineConfig, data, '')


def derive_seed(seed: int, stage: str) -> int:
    """Derive a stage seed by hashing '<seed>:<stage>' (first 8 bytes, unsigned)"""
    digest = hashlib.sha256(f'{seed}:{stage}'.encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'little') & 0x7FFFFFFFFFFFFFFF
