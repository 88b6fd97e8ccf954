import logging
import os
import re
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from errors import DataError, DropReason, ParseError, RejectedSample

logger = logging.getLogger(__name__)

# HighD drivingDirection values: 1 travels toward -x (upper carriageway), 2 toward +x (lower)
UPPER = 1
LOWER = 2

NEIGHBOR_COLUMNS = [
    'precedingId',
    'followingId',
    'leftPrecedingId',
    'leftAlongsideId',
    'leftFollowingId',
    'rightPrecedingId',
    'rightAlongsideId',
    'rightFollowingId',
]

TRACK_COLUMNS = [
    'frame', 'id', 'x', 'y', 'width', 'height',
    'xVelocity', 'yVelocity', 'xAcceleration', 'yAcceleration',
    'laneId',
] + NEIGHBOR_COLUMNS

INTEGER_COLUMNS = ['frame', 'id', 'laneId'] + NEIGHBOR_COLUMNS
FLOAT_COLUMNS = ['x', 'y', 'width', 'height', 'xVelocity', 'yVelocity', 'xAcceleration', 'yAcceleration']

META_COLUMNS = ['id', 'frameRate', 'upperLaneMarkings', 'lowerLaneMarkings']

# Left/right neighbor columns swap under a lateral mirror
_MIRROR_NEIGHBORS = [NEIGHBOR_COLUMNS.index(c) for c in (
    'precedingId', 'followingId',
    'rightPrecedingId', 'rightAlongsideId', 'rightFollowingId',
    'leftPrecedingId', 'leftAlongsideId', 'leftFollowingId',
)]


@dataclass(frozen=True)
class RecordingMeta:
    """Recording-level metadata: frame rate and lane marking positions (m)"""

    recording_id: int
    frame_rate: float
    lane_markings_upper: Tuple[float, ...]
    lane_markings_lower: Tuple[float, ...]
    drive_direction_map: Dict[int, int] = field(default_factory=dict, compare=False)
    # laterally mirrored view of the road, see mirror_recording()
    mirrored: bool = False

    @property
    def dt(self) -> float:
        return 1.0 / self.frame_rate

    def lane_bounds(self, lane_id: int) -> Tuple[int, float, float]:
        """Carriageway and raw lateral bounds (image coordinates) of a lane"""
        upper, lower = self.lane_markings_upper, self.lane_markings_lower
        i = lane_id - 2
        if 0 <= i < len(upper) - 1:
            return UPPER, upper[i], upper[i + 1]
        j = lane_id - len(upper) - 2
        if 0 <= j < len(lower) - 1:
            return LOWER, lower[j], lower[j + 1]
        raise DataError(f'Lane {lane_id} is not defined by the lane markings of recording {self.recording_id}')

    def to_canonical_lateral(self, direction: int, raw: float) -> float:
        """Map a raw lateral position to the canonical frame (positive toward the driver's left)"""
        value = -raw if direction == LOWER else raw
        return -value if self.mirrored else value

    def canonical_lane_bounds(self, lane_id: int) -> Tuple[float, float]:
        direction, lo, hi = self.lane_bounds(lane_id)
        a = self.to_canonical_lateral(direction, lo)
        b = self.to_canonical_lateral(direction, hi)
        return (a, b) if a < b else (b, a)

    def shared_marking(self, lane_a: int, lane_b: int) -> float:
        """Canonical lateral position of the marking between two adjacent lanes"""
        dir_a, lo_a, hi_a = self.lane_bounds(lane_a)
        dir_b, lo_b, hi_b = self.lane_bounds(lane_b)
        if dir_a != dir_b:
            raise RejectedSample(DropReason.MIXED_CARRIAGEWAY, f'lanes {lane_a} and {lane_b}')
        if hi_a == lo_b:
            return self.to_canonical_lateral(dir_a, hi_a)
        if hi_b == lo_a:
            return self.to_canonical_lateral(dir_a, lo_a)
        raise RejectedSample(DropReason.NON_ADJACENT_LANES, f'lanes {lane_a} and {lane_b}')


def build_direction_map(upper: Sequence[float], lower: Sequence[float]) -> Dict[int, int]:
    """HighD lane numbering: upper lanes start at 2, lower lanes continue after one gap id"""
    mapping = {i + 2: UPPER for i in range(len(upper) - 1)}
    mapping.update({len(upper) + 2 + j: LOWER for j in range(len(lower) - 1)})
    return mapping


@dataclass(frozen=True)
class TrackPoint:
    frame: int
    x: float
    y: float
    width: float
    height: float
    vx: float
    vy: float
    ax: float
    ay: float
    lane_id: int
    neighbor_ids: Dict[str, int]


@dataclass(frozen=True, eq=False)
class Track:
    """
    One vehicle's per-frame kinematics.

    Raw tracks use HighD image coordinates. Normalized tracks use the canonical
    frame: x and vx positive along travel, lateral y and vy positive toward the
    driver's left, (x, y) the left-rear corner so the body spans
    [x, x + width] by [y - height, y].
    """

    track_id: int
    direction: int
    frame: np.ndarray
    x: np.ndarray
    y: np.ndarray
    width: np.ndarray
    height: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    lane_id: np.ndarray
    neighbors: np.ndarray
    normalized: bool = False
    segment: int = 0

    def __post_init__(self):
        for name in ('frame', 'x', 'y', 'width', 'height', 'vx', 'vy', 'ax', 'ay', 'lane_id', 'neighbors'):
            getattr(self, name).setflags(write=False)

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def first_frame(self) -> int:
        return int(self.frame[0])

    @property
    def last_frame(self) -> int:
        return int(self.frame[-1])

    def contains(self, frame: int) -> bool:
        return self.first_frame <= frame <= self.last_frame

    def index_of(self, frame: int) -> int:
        """Array index of a frame; frames are gapless with step 1"""
        if not self.contains(frame):
            raise IndexError(f'frame {frame} outside track {self.track_id} [{self.first_frame}, {self.last_frame}]')
        return frame - self.first_frame

    def neighbor(self, column: str) -> np.ndarray:
        return self.neighbors[:, NEIGHBOR_COLUMNS.index(column)]

    def point(self, i: int) -> TrackPoint:
        return TrackPoint(
            frame=int(self.frame[i]), x=float(self.x[i]), y=float(self.y[i]),
            width=float(self.width[i]), height=float(self.height[i]),
            vx=float(self.vx[i]), vy=float(self.vy[i]),
            ax=float(self.ax[i]), ay=float(self.ay[i]),
            lane_id=int(self.lane_id[i]),
            neighbor_ids={c: int(v) for c, v in zip(NEIGHBOR_COLUMNS, self.neighbors[i])},
        )

    def points(self) -> Iterator[TrackPoint]:
        for i in range(len(self)):
            yield self.point(i)

    def to_frame(self) -> pd.DataFrame:
        """Rows in HighD column order; normalized tracks are mapped back to raw coordinates"""
        track = to_raw(self) if self.normalized else self
        data = {
            'frame': track.frame, 'id': np.full(len(track), track.track_id, dtype=np.int64),
            'x': track.x, 'y': track.y, 'width': track.width, 'height': track.height,
            'xVelocity': track.vx, 'yVelocity': track.vy,
            'xAcceleration': track.ax, 'yAcceleration': track.ay,
            'laneId': track.lane_id,
        }
        for k, column in enumerate(NEIGHBOR_COLUMNS):
            data[column] = track.neighbors[:, k]
        return pd.DataFrame(data, columns=TRACK_COLUMNS)


@dataclass
class Recording:
    """A parsed recording: metadata, normalized tracks and per-reason rejections"""

    meta: RecordingMeta
    tracks: List[Track]
    rejected: Counter = field(default_factory=Counter)

    def index(self) -> 'TrackIndex':
        return TrackIndex(self.tracks)


class TrackIndex:
    """Lookup of (vehicle id, frame) across track segments"""

    def __init__(self, tracks: Sequence[Track]):
        self._by_id: Dict[int, List[Track]] = {}
        for track in tracks:
            self._by_id.setdefault(track.track_id, []).append(track)

    def lookup(self, track_id: int, frame: int) -> Optional[Tuple[Track, int]]:
        for track in self._by_id.get(int(track_id), []):
            if track.contains(frame):
                return track, track.index_of(frame)
        return None


def normalize_direction(track: Track, meta: RecordingMeta) -> Track:
    """
    Map a raw track into the canonical frame (idempotent)

    Args:
        track: raw or already normalized track
        meta: recording metadata holding the lane-to-carriageway map

    Returns:
        Normalized track

    Raises:
        RejectedSample(MIXED_CARRIAGEWAY) when the track's lanes span both carriageways
    """
    if track.normalized:
        return track

    directions = {meta.drive_direction_map.get(int(lane)) for lane in np.unique(track.lane_id)}
    if None in directions:
        raise DataError(f'Track {track.track_id} uses a lane id unknown to recording {meta.recording_id}')
    if len(directions) != 1:
        raise RejectedSample(DropReason.MIXED_CARRIAGEWAY, f'track {track.track_id}')
    direction = directions.pop()

    if direction == LOWER:
        # travel +x, driver's left is image-up (smaller y)
        x, vx, ax = track.x.copy(), track.vx.copy(), track.ax.copy()
        y, vy, ay = -track.y, -track.vy, -track.ay
    else:
        # travel -x, driver's left is image-down (larger y)
        x, vx, ax = -(track.x + track.width), -track.vx, -track.ax
        y, vy, ay = track.y + track.height, track.vy.copy(), track.ay.copy()

    normalized = replace(track, direction=direction, x=x, y=y, vx=vx, vy=vy, ax=ax, ay=ay,
                         frame=track.frame.copy(), width=track.width.copy(), height=track.height.copy(),
                         lane_id=track.lane_id.copy(), neighbors=track.neighbors.copy(), normalized=True)
    if meta.mirrored:
        normalized = mirror_track(normalized)
    return normalized


def to_raw(track: Track) -> Track:
    """Inverse of normalize_direction for a track of a non-mirrored recording"""
    if not track.normalized:
        return track
    if track.direction == LOWER:
        x, vx, ax = track.x.copy(), track.vx.copy(), track.ax.copy()
        y, vy, ay = -track.y, -track.vy, -track.ay
    else:
        x, vx, ax = -track.x - track.width, -track.vx, -track.ax
        y, vy, ay = track.y - track.height, track.vy.copy(), track.ay.copy()
    return replace(track, x=x, y=y, vx=vx, vy=vy, ax=ax, ay=ay,
                   frame=track.frame.copy(), width=track.width.copy(), height=track.height.copy(),
                   lane_id=track.lane_id.copy(), neighbors=track.neighbors.copy(), normalized=False)


def mirror_track(track: Track) -> Track:
    """Lateral mirror of a normalized track; applying it twice gives the original back"""
    if not track.normalized:
        raise ValueError('mirror_track expects a normalized track')
    return replace(track, y=track.height - track.y, vy=-track.vy, ay=-track.ay,
                   frame=track.frame.copy(), x=track.x.copy(), width=track.width.copy(),
                   height=track.height.copy(), vx=track.vx.copy(), ax=track.ax.copy(),
                   lane_id=track.lane_id.copy(), neighbors=track.neighbors[:, _MIRROR_NEIGHBORS])


def mirror_recording(recording: Recording) -> Recording:
    """Laterally mirrored copy of a recording: left and right swap, lane ids stay"""
    meta = replace(recording.meta, mirrored=not recording.meta.mirrored)
    return Recording(meta=meta, tracks=[mirror_track(t) for t in recording.tracks],
                     rejected=Counter(recording.rejected))


def parse_semicolon_floats(value, path: str, column: str) -> Tuple[float, ...]:
    """Parse a 'a;b;c' lane-markings cell into floats (meters)"""
    if not isinstance(value, str) or not value.strip():
        raise ParseError('empty lane markings', path=path, row=2, column=column)
    out = []
    for part in value.split(';'):
        part = part.strip()
        if not part:
            continue
        try:
            out.append(float(part))
        except ValueError:
            raise ParseError(f"non-numeric lane marking '{part}'", path=path, row=2, column=column)
    return tuple(out)


def write_recording_meta(meta: RecordingMeta, path: str):
    """Write a one-row recordingMeta CSV"""
    frame = pd.DataFrame([{
        'id': meta.recording_id,
        'frameRate': meta.frame_rate,
        'upperLaneMarkings': ';'.join(repr(float(v)) for v in meta.lane_markings_upper),
        'lowerLaneMarkings': ';'.join(repr(float(v)) for v in meta.lane_markings_lower),
    }], columns=META_COLUMNS)
    frame.to_csv(path, index=False)


def write_tracks(tracks: Sequence[Track], path: str):
    """Write tracks as HighD rows sorted by (id, frame); floats keep their exact repr"""
    frames = [t.to_frame() for t in sorted(tracks, key=lambda t: (t.track_id, t.first_frame))]
    table = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=TRACK_COLUMNS)
    table.to_csv(path, index=False)


def _recording_stems(directory: str) -> Dict[int, str]:
    """Recording id -> file stem for every complete NN_recordingMeta.csv / NN_tracks.csv pair"""
    stems: Dict[int, str] = {}
    for name in sorted(os.listdir(directory)):
        match = re.match(r'^(\d+)_tracks\.csv$', name)
        if match and os.path.exists(os.path.join(directory, f'{match.group(1)}_recordingMeta.csv')):
            stems.setdefault(int(match.group(1)), match.group(1))
    return stems


def discover_recordings(directory: str) -> List[int]:
    """Recording ids with both NN_recordingMeta.csv and NN_tracks.csv present"""
    if not os.path.isdir(directory):
        raise DataError(f'Input directory not found: {directory}')
    return sorted(_recording_stems(directory))


def recording_paths(directory: str, recording_id: int) -> Tuple[str, str]:
    """Meta and tracks paths of a recording; ids without files on disk get the two-digit HighD stem"""
    stems = _recording_stems(directory) if os.path.isdir(directory) else {}
    stem = stems.get(recording_id, f'{recording_id:02d}')
    return (os.path.join(directory, f'{stem}_recordingMeta.csv'),
            os.path.join(directory, f'{stem}_tracks.csv'))


class HighDReader:
    """Reader for HighD-format recordings (recordingMeta + tracks CSVs)"""

    def __init__(self, split_frame_gaps: bool = False):
        self.split_frame_gaps = split_frame_gaps
        self.logger = logging.getLogger(__name__)

    def parse_recording_meta(self, path: str) -> RecordingMeta:
        """
        Parse a recordingMeta CSV

        Args:
            path: path to NN_recordingMeta.csv

        Returns:
            RecordingMeta with lane markings in meters

        Raises:
            ParseError naming the row/column for a missing file, column or bad value
        """
        if not os.path.exists(path):
            raise ParseError('file not found', path=path)
        try:
            table = pd.read_csv(path, dtype=str)
        except pd.errors.EmptyDataError:
            raise ParseError('file is empty', path=path)
        except pd.errors.ParserError as e:
            raise ParseError(f'malformed CSV: {e}', path=path)

        for column in META_COLUMNS:
            if column not in table.columns:
                raise ParseError('missing column', path=path, row=1, column=column)
        if table.empty:
            raise ParseError('no data row', path=path, row=2)

        row = table.iloc[0]
        try:
            recording_id = int(row['id'])
        except (TypeError, ValueError):
            raise ParseError(f"non-numeric value '{row['id']}'", path=path, row=2, column='id')
        try:
            frame_rate = float(row['frameRate'])
        except (TypeError, ValueError):
            raise ParseError(f"non-numeric value '{row['frameRate']}'", path=path, row=2, column='frameRate')
        if not np.isfinite(frame_rate) or frame_rate <= 0:
            raise ParseError(f'frame rate must be > 0, got {frame_rate}', path=path, row=2, column='frameRate')

        upper = parse_semicolon_floats(row['upperLaneMarkings'], path, 'upperLaneMarkings')
        lower = parse_semicolon_floats(row['lowerLaneMarkings'], path, 'lowerLaneMarkings')
        for column, markings in (('upperLaneMarkings', upper), ('lowerLaneMarkings', lower)):
            if len(markings) < 2:
                raise ParseError('at least 2 lane markings required', path=path, row=2, column=column)
            if any(b <= a for a, b in zip(markings, markings[1:])):
                raise ParseError('lane markings must be strictly increasing', path=path, row=2, column=column)

        meta = RecordingMeta(recording_id=recording_id, frame_rate=frame_rate,
                             lane_markings_upper=upper, lane_markings_lower=lower,
                             drive_direction_map=build_direction_map(upper, lower))
        self.logger.info(f"Parsed recording {recording_id} meta: {frame_rate:g} Hz, "
                         f"{len(upper) - 1}+{len(lower) - 1} lanes")
        return meta

    def parse_tracks(self, path: str, meta: RecordingMeta) -> List[Track]:
        """
        Parse a tracks CSV into raw Tracks, one per vehicle (or per gapless segment)

        Args:
            path: path to NN_tracks.csv, rows sorted by (id, frame)
            meta: parsed recording metadata

        Returns:
            List of raw Tracks ordered by (id, first frame)
        """
        if not os.path.exists(path):
            raise ParseError('file not found', path=path)
        try:
            table = pd.read_csv(path, dtype=str, keep_default_na=False)
        except pd.errors.EmptyDataError:
            raise ParseError('file is empty', path=path)
        except pd.errors.ParserError as e:
            raise ParseError(f'malformed CSV: {e}', path=path)

        return self.tracks_from_frame(table, meta, source=path)

    def tracks_from_frame(self, table: pd.DataFrame, meta: RecordingMeta, source: str = '<memory>') -> List[Track]:
        """Validate and split a table of HighD rows into Tracks"""
        for column in TRACK_COLUMNS:
            if column not in table.columns:
                raise ParseError('missing column', path=source, row=1, column=column)

        numeric = {}
        for column in TRACK_COLUMNS:
            raw = table[column]
            if raw.dtype == object:
                text = raw.astype(str).str.strip()
                # round-trip parsing keeps every float bit-exact
                values = pd.to_numeric(text.where(text != ''), errors='coerce')
                values = values.astype(np.float64) if column in FLOAT_COLUMNS else values
                bad = values.isna()
                if bad.any():
                    i = int(np.flatnonzero(bad.to_numpy())[0])
                    cell = text.iloc[i]
                    message = 'missing required field' if cell == '' else f"non-numeric value '{cell}'"
                    raise ParseError(message, path=source, row=i + 2, column=column)
                if column in FLOAT_COLUMNS:
                    values = np.array([float(v) for v in text], dtype=np.float64)
            else:
                values = raw
                if values.isna().any():
                    i = int(np.flatnonzero(values.isna().to_numpy())[0])
                    raise ParseError('missing required field', path=source, row=i + 2, column=column)
            numeric[column] = np.asarray(values, dtype=np.float64)

        for column in INTEGER_COLUMNS:
            values = numeric[column]
            fractional = values != np.floor(values)
            if fractional.any():
                i = int(np.flatnonzero(fractional)[0])
                raise ParseError(f'expected an integer, got {values[i]}', path=source, row=i + 2, column=column)
        for column in ('width', 'height'):
            bad = ~(numeric[column] > 0)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise ParseError(f'{column} must be > 0', path=source, row=i + 2, column=column)
        bad = numeric['frame'] < 0
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise ParseError('frame must be >= 0', path=source, row=i + 2, column='frame')

        ids = numeric['id'].astype(np.int64)
        frames = numeric['frame'].astype(np.int64)
        tracks: List[Track] = []
        rejected = 0
        boundaries = np.flatnonzero(np.diff(ids) != 0) + 1
        starts = np.concatenate([[0], boundaries]) if len(ids) else np.array([], dtype=np.int64)
        ends = np.concatenate([boundaries, [len(ids)]]) if len(ids) else np.array([], dtype=np.int64)
        seen = set()
        for start, end in zip(starts, ends):
            track_id = int(ids[start])
            if track_id in seen:
                raise ParseError(f'rows of vehicle {track_id} are not contiguous', path=source, row=int(start) + 2,
                                 column='id')
            seen.add(track_id)
            steps = np.diff(frames[start:end])
            if (steps <= 0).any():
                i = int(start + np.flatnonzero(steps <= 0)[0] + 1)
                raise ParseError('frames not strictly increasing within vehicle', path=source, row=i + 2,
                                 column='frame')
            cuts = np.flatnonzero(steps != 1) + 1
            if len(cuts) and not self.split_frame_gaps:
                self.logger.warning(f"Rejecting vehicle {track_id} in {source}: "
                                    f"{len(cuts)} frame gap(s)")
                rejected += 1
                continue
            pieces = np.split(np.arange(start, end), cuts)
            for segment, rows in enumerate(pieces):
                tracks.append(self._build_track(track_id, segment, rows, numeric))

        self.rejected_gaps = rejected
        self.logger.info(f"Parsed {len(tracks)} tracks from {source} ({rejected} rejected for frame gaps)")
        return tracks

    @staticmethod
    def _build_track(track_id: int, segment: int, rows: np.ndarray, numeric: Dict[str, np.ndarray]) -> Track:
        neighbors = np.stack([numeric[c][rows] for c in NEIGHBOR_COLUMNS], axis=1).astype(np.int64)
        return Track(
            track_id=track_id, direction=0, segment=segment,
            frame=numeric['frame'][rows].astype(np.int64),
            x=numeric['x'][rows].copy(), y=numeric['y'][rows].copy(),
            width=numeric['width'][rows].copy(), height=numeric['height'][rows].copy(),
            vx=numeric['xVelocity'][rows].copy(), vy=numeric['yVelocity'][rows].copy(),
            ax=numeric['xAcceleration'][rows].copy(), ay=numeric['yAcceleration'][rows].copy(),
            lane_id=numeric['laneId'][rows].astype(np.int64),
            neighbors=neighbors,
        )

    def normalize_direction(self, track: Track, meta: RecordingMeta) -> Track:
        return normalize_direction(track, meta)

    def build_recording(self, meta: RecordingMeta, raw_tracks: Sequence[Track]) -> Recording:
        """Normalize raw tracks, counting rejections by reason"""
        rejected = Counter()
        if getattr(self, 'rejected_gaps', 0):
            rejected[DropReason.FRAME_GAP.value] += self.rejected_gaps
        tracks = []
        for track in raw_tracks:
            try:
                tracks.append(normalize_direction(track, meta))
            except RejectedSample as e:
                self.logger.warning(f"Rejecting track {track.track_id} of recording {meta.recording_id}: {e}")
                rejected[e.reason.value] += 1
        return Recording(meta=meta, tracks=tracks, rejected=rejected)

    def load_recording(self, directory: str, recording_id: int) -> Recording:
        """Parse and normalize one recording from an input directory"""
        meta_path, tracks_path = recording_paths(directory, recording_id)
        meta = self.parse_recording_meta(meta_path)
        raw_tracks = self.parse_tracks(tracks_path, meta)
        return self.build_recording(meta, raw_tracks)

    def load_directory(self, directory: str, n_jobs: int = 1) -> List[Recording]:
        """Load every recording in a directory, ordered by recording id"""
        ids = discover_recordings(directory)
        if not ids:
            raise DataError(f'No HighD recordings (NN_tracks.csv + NN_recordingMeta.csv) in {directory}')
        if n_jobs <= 1:
            return [self.load_recording(directory, rid) for rid in ids]
        # one reader per worker; rejected_gaps is per-parse state
        def load(rid):
            return HighDReader(self.split_frame_gaps).load_recording(directory, rid)
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            return list(pool.map(load, ids))
