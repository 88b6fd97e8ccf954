import logging
import struct
from dataclasses import dataclass, fields
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import pandas as pd

from errors import DataError

logger = logging.getLogger(__name__)

# Per-frame variables in fixed order. dy = clearance (m), dv = longitudinal speed
# difference minuend-subtrahend (m/s), vy = longitudinal speed, vx = lateral speed,
# ay = longitudinal acceleration, ax = lateral acceleration.
FEATURE_NAMES = (
    'dy_clv_sv', 'dy_tlv_sv', 'dy_sv_tfv',
    'dv_clv_sv', 'dv_tlv_sv', 'dv_sv_tfv',
    'vy_sv', 'vy_clv', 'vy_tlv', 'vy_tfv', 'vx_sv',
    'ay_sv', 'ay_clv', 'ay_tlv', 'ay_tfv', 'ax_sv',
)

DISTANCE = 'distance'
SPEED = 'speed'
ACCELERATION = 'acceleration'

FEATURE_KINDS = {name: DISTANCE for name in FEATURE_NAMES[:3]}
FEATURE_KINDS.update({name: SPEED for name in FEATURE_NAMES[3:11]})
FEATURE_KINDS.update({name: ACCELERATION for name in FEATURE_NAMES[11:]})

# the subject vehicle's own speeds
OWN_SPEED_FEATURES = ('vy_sv', 'vx_sv')

AGGREGATE_NAMES = tuple(f'{n}_mean' for n in FEATURE_NAMES) + tuple(f'{n}_std' for n in FEATURE_NAMES)

SEQUENCE_LENGTH = 50

TENSOR_MAGIC = b'LCTS'
TENSOR_VERSION = 1


@dataclass(frozen=True)
class FrameFeatures:
    dy_clv_sv: float
    dy_tlv_sv: float
    dy_sv_tfv: float
    dv_clv_sv: float
    dv_tlv_sv: float
    dv_sv_tfv: float
    vy_sv: float
    vy_clv: float
    vy_tlv: float
    vy_tfv: float
    vx_sv: float
    ay_sv: float
    ay_clv: float
    ay_tlv: float
    ay_tfv: float
    ax_sv: float

    @classmethod
    def from_row(cls, row) -> 'FrameFeatures':
        return cls(*(float(v) for v in row))

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f.name) for f in fields(self)], dtype=np.float64)


@dataclass(eq=False)
class SequenceSample:
    """One decision window: a (50, 16) matrix, its label and the pair it belongs to"""

    values: np.ndarray
    label: int
    style: Optional[str] = None
    pair_id: int = -1
    recording_id: int = -1
    track_id: int = -1
    # duration, lat_accel, lat_speed of the pair's lane-change execution
    style_point: Optional[np.ndarray] = None

    @property
    def group_key(self) -> Tuple[int, int]:
        return (self.recording_id, self.track_id)


class FeatureBuilder:
    """Computes per-frame variables for decision windows and packages them"""

    def __init__(self):
        self.logger = logging.getLogger(__name__)
        self.overlap_count = 0

    def frame_features(self, neighbors, window=None) -> np.ndarray:
        """
        Per-frame variables of one window

        Args:
            neighbors: NeighborGroup with SV, CLV, TLV and TFV slices
            window: optional ObservationWindow, defaults to neighbors.window

        Returns:
            (n_frames, 16) array in FEATURE_NAMES order
        """
        window = window if window is not None else neighbors.window
        sv, clv, tlv, tfv = neighbors.sv, neighbors.clv, neighbors.tlv, neighbors.tfv

        sv_front = sv.x + sv.length
        clearances = np.stack([
            clv.x - sv_front,
            tlv.x - sv_front,
            sv.x - (tfv.x + tfv.length),
        ], axis=1)
        overlapping = clearances < 0
        if overlapping.any():
            count = int(overlapping.sum())
            self.overlap_count += count
            self.logger.warning(f"Vehicle {window.track_id} frames [{window.start_frame}, {window.end_frame}): "
                                f"{count} overlapping bounding boxes, clearance clamped to 0")
            clearances = np.where(overlapping, 0.0, clearances)

        seq = np.column_stack([
            clearances,
            clv.vx - sv.vx, tlv.vx - sv.vx, sv.vx - tfv.vx,
            sv.vx, clv.vx, tlv.vx, tfv.vx, sv.vy,
            sv.ax, clv.ax, tlv.ax, tfv.ax, sv.ay,
        ])
        if not np.isfinite(seq).all():
            raise DataError(f'Non-finite feature value for vehicle {window.track_id} '
                            f'in frames [{window.start_frame}, {window.end_frame})')
        return seq

    def dataset_table(self, dataset) -> pd.DataFrame:
        """One row per window frame: identifiers, label and the 16 variables"""
        blocks = []
        for pair in dataset.pairs:
            for group in (pair.lc, pair.lk):
                window = group.window
                seq = self.frame_features(group)
                block = pd.DataFrame(seq, columns=FEATURE_NAMES)
                block.insert(0, 'frame', np.arange(window.start_frame, window.end_frame))
                block.insert(0, 'frame_rate', window.frame_rate)
                block.insert(0, 'direction', window.direction_of_interest)
                block.insert(0, 'label', window.label)
                block.insert(0, 'track_id', window.track_id)
                block.insert(0, 'recording_id', window.recording_id)
                block.insert(0, 'pair_id', pair.pair_id)
                blocks.append(block)
        if not blocks:
            return pd.DataFrame(columns=WINDOW_ID_COLUMNS + list(FEATURE_NAMES))
        return pd.concat(blocks, ignore_index=True)

    def window_samples(self, dataset, target_len: int = SEQUENCE_LENGTH,
                       window_seconds: float = 2.0) -> List[SequenceSample]:
        """SequenceSamples for every window, LC then LK per pair, in pair order"""
        samples = []
        for pair in dataset.pairs:
            for group in (pair.lc, pair.lk):
                window = group.window
                seq = self.frame_features(group)
                samples.append(SequenceSample(
                    values=sequence_sample(seq, target_len, window.frame_rate, window_seconds),
                    label=window.label, pair_id=pair.pair_id,
                    recording_id=window.recording_id, track_id=window.track_id,
                    style_point=pair.style.as_array(),
                ))
        return samples


WINDOW_ID_COLUMNS = ['pair_id', 'recording_id', 'track_id', 'label', 'direction', 'frame_rate', 'frame']


def frame_features(window, neighbors) -> np.ndarray:
    return FeatureBuilder().frame_features(neighbors, window)


def aggregate_features(seq) -> np.ndarray:
    """Population mean then std of every column: 32 values in AGGREGATE_NAMES order"""
    arr = np.asarray(seq, dtype=np.float64)
    if arr.ndim != 2 or not len(arr):
        raise ValueError('aggregate_features needs a non-empty (n_frames, n_features) sequence')
    return np.concatenate([arr.mean(axis=0), arr.std(axis=0)])


def sequence_sample(seq, target_len: int = SEQUENCE_LENGTH, frame_rate: float = 25.0,
                    window_seconds: float = 2.0) -> np.ndarray:
    """
    Fixed-length sequence; inputs at other rates are linearly resampled with endpoints kept

    Raises:
        ValueError when the input covers less than window_seconds
    """
    arr = np.asarray(seq, dtype=np.float64)
    n = len(arr)
    if n / frame_rate < window_seconds - 1e-9:
        raise ValueError(f'sequence covers {n / frame_rate:.3f} s, needs {window_seconds} s')
    if n == target_len:
        return arr.copy()
    positions = np.linspace(0.0, n - 1, target_len)
    grid = np.arange(n, dtype=np.float64)
    return np.column_stack([np.interp(positions, grid, arr[:, j]) for j in range(arr.shape[1])])


def samples_from_table(table: pd.DataFrame, style_points: Optional[Dict[int, np.ndarray]] = None,
                       target_len: int = SEQUENCE_LENGTH, window_seconds: float = 2.0) -> List[SequenceSample]:
    """
    Rebuild SequenceSamples from an exported window-frame table

    Args:
        table: frame rows as written by FeatureBuilder.dataset_table
        style_points: pair_id -> (duration, lat_accel, lat_speed)

    Returns:
        Samples ordered by pair, LC window before LK window
    """
    missing = [c for c in WINDOW_ID_COLUMNS + list(FEATURE_NAMES) if c not in table.columns]
    if missing:
        raise DataError(f"Window table is missing columns: {', '.join(missing)}")
    samples = []
    ordered = table.sort_values(['pair_id', 'label', 'frame'], ascending=[True, False, True], kind='mergesort')
    for (pair_id, label), block in ordered.groupby(['pair_id', 'label'], sort=False):
        seq = block[list(FEATURE_NAMES)].to_numpy(dtype=np.float64)
        point = style_points.get(int(pair_id)) if style_points is not None else None
        samples.append(SequenceSample(
            values=sequence_sample(seq, target_len, float(block['frame_rate'].iloc[0]), window_seconds),
            label=int(label), pair_id=int(pair_id),
            recording_id=int(block['recording_id'].iloc[0]), track_id=int(block['track_id'].iloc[0]),
            style_point=None if point is None else np.asarray(point, dtype=np.float64),
        ))
    return samples


def encode_tensors(tensors: Dict[str, np.ndarray]) -> bytes:
    """
    Framed binary container: magic, version, count, then per tensor the UTF-8 name,
    ndim, uint64 dims and little-endian float64 data
    """
    parts = [TENSOR_MAGIC, struct.pack('<HI', TENSOR_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.ascontiguousarray(np.asarray(value, dtype='<f8'))
        encoded = name.encode('utf-8')
        parts.append(struct.pack('<H', len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack('<B', arr.ndim))
        parts.append(struct.pack(f'<{arr.ndim}Q', *arr.shape))
        parts.append(arr.tobytes())
    return b''.join(parts)


def decode_tensors(payload: bytes) -> Dict[str, np.ndarray]:
    if payload[:4] != TENSOR_MAGIC:
        raise DataError('Not a tensor file (bad magic)')
    version, count = struct.unpack_from('<HI', payload, 4)
    if version != TENSOR_VERSION:
        raise DataError(f'Unsupported tensor file version {version}')
    offset = 10
    out = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from('<H', payload, offset)
        offset += 2
        name = payload[offset:offset + name_len].decode('utf-8')
        offset += name_len
        (ndim,) = struct.unpack_from('<B', payload, offset)
        offset += 1
        shape = struct.unpack_from(f'<{ndim}Q', payload, offset)
        offset += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        out[name] = np.frombuffer(payload, dtype='<f8', count=size, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * size
    if offset != len(payload):
        raise DataError('Trailing bytes after the last tensor')
    return out


def read_tensors(path: str) -> Dict[str, np.ndarray]:
    with open(path, 'rb') as f:
        return decode_tensors(f.read())


def feature_columns(kinds: Iterable[str]) -> List[str]:
    """Names of the per-frame variables of the given kinds"""
    wanted = set(kinds)
    return [n for n in FEATURE_NAMES if FEATURE_KINDS[n] in wanted]
