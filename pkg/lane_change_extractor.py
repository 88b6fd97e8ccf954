import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DropReason, RejectedSample
from highd_reader import Recording, RecordingMeta, Track, TrackIndex
from style_clustering import StyleFeatures, style_features

logger = logging.getLogger(__name__)

LEFT = 'left'
RIGHT = 'right'

LANE_CHANGE = 1
LANE_KEEP = 0
LABEL_NAMES = {LANE_CHANGE: 'lane_change', LANE_KEEP: 'lane_keep'}

# frames on each side of t_lc used to read the lateral displacement
_DIRECTION_SPAN = 5


@dataclass(frozen=True)
class LaneChangeEvent:
    recording_id: int
    track_id: int
    t_lc: int
    t_s: int
    t_e: int
    duration: float
    direction: str
    source_lane: int
    target_lane: int
    segment: int = 0

    def __post_init__(self):
        if not self.t_s <= self.t_lc <= self.t_e:
            raise ValueError(f'Event bounds out of order: t_s={self.t_s}, t_lc={self.t_lc}, t_e={self.t_e}')
        if self.duration <= 0:
            raise ValueError(f'Lane-change duration must be > 0, got {self.duration}')


@dataclass(frozen=True)
class ObservationWindow:
    """A 2 s observation span [start_frame, end_frame) of one subject vehicle"""

    recording_id: int
    track_id: int
    label: int
    start_frame: int
    end_frame: int
    direction_of_interest: str
    linked_event: Optional[LaneChangeEvent] = None
    segment: int = 0
    frame_rate: float = 25.0

    @property
    def n_frames(self) -> int:
        return self.end_frame - self.start_frame

    @property
    def label_name(self) -> str:
        return LABEL_NAMES[self.label]


@dataclass(frozen=True, eq=False)
class VehicleSlice:
    """Per-frame kinematics of one role (SV, CLV, TLV, TFV) over a window, canonical frame"""

    ids: np.ndarray
    x: np.ndarray
    length: np.ndarray
    vx: np.ndarray
    vy: np.ndarray
    ax: np.ndarray
    ay: np.ndarray
    lane_id: np.ndarray


@dataclass(frozen=True, eq=False)
class NeighborGroup:
    window: ObservationWindow
    sv: VehicleSlice
    clv: VehicleSlice
    tlv: VehicleSlice
    tfv: VehicleSlice


@dataclass(eq=False)
class DecisionPair:
    """A qualified lane-change window and its paired lane-keep window"""

    pair_id: int
    recording_id: int
    event: LaneChangeEvent
    lc: NeighborGroup
    lk: NeighborGroup
    style: StyleFeatures

    @property
    def group_key(self) -> Tuple[int, int]:
        return self.recording_id, self.event.track_id


@dataclass
class LcDecisionDataset:
    pairs: List[DecisionPair] = field(default_factory=list)
    events: List[LaneChangeEvent] = field(default_factory=list)
    drops: Counter = field(default_factory=Counter)
    n_transitions: int = 0

    def windows(self) -> List[NeighborGroup]:
        """LC and LK windows in pair order (LC first within each pair)"""
        out = []
        for pair in self.pairs:
            out.extend((pair.lc, pair.lk))
        return out


def detect_lane_transitions(track: Track) -> List[Tuple[int, str]]:
    """
    Find every consecutive-frame lane-id switch of a normalized track

    Returns:
        (t_lc, direction) per switch, t_lc being the last frame in the old lane
    """
    lanes = track.lane_id
    switches = np.flatnonzero(lanes[1:] != lanes[:-1])
    if not len(switches):
        return []
    center = track.y - track.height / 2.0
    n = len(track)
    out = []
    for i in switches:
        lo = max(0, i - _DIRECTION_SPAN)
        hi = min(n - 1, i + 1 + _DIRECTION_SPAN)
        displacement = center[hi] - center[lo]
        out.append((int(track.frame[i]), LEFT if displacement >= 0 else RIGHT))
    return out


def compute_lc_bounds(track: Track, t_lc: int, meta: RecordingMeta) -> LaneChangeEvent:
    """
    Start/end of the lane-change execution from body-edge crossings of the marking

    t_s is the last frame before t_lc whose leading body edge has not crossed the
    shared marking; t_e the first frame after t_lc whose trailing edge has.

    Raises:
        RejectedSample with TRUNCATED_START / TRUNCATED_END / NON_ADJACENT_LANES
    """
    i = track.index_of(t_lc)
    if i + 1 >= len(track):
        raise RejectedSample(DropReason.TRUNCATED_END, f'track {track.track_id} ends at t_lc={t_lc}')
    source, target = int(track.lane_id[i]), int(track.lane_id[i + 1])
    marking = meta.shared_marking(source, target)
    source_lo, source_hi = meta.canonical_lane_bounds(source)
    target_lo, target_hi = meta.canonical_lane_bounds(target)
    direction = LEFT if (target_lo + target_hi) > (source_lo + source_hi) else RIGHT

    left_edge = track.y
    right_edge = track.y - track.height
    if direction == LEFT:
        lead_crossed = left_edge > marking
        trail_crossed = right_edge > marking
    else:
        lead_crossed = right_edge < marking
        trail_crossed = left_edge < marking

    before = np.flatnonzero(~lead_crossed[:i])
    if not len(before):
        raise RejectedSample(DropReason.TRUNCATED_START,
                             f'track {track.track_id}: leading edge already across at first frame')
    after = np.flatnonzero(trail_crossed[i + 1:])
    if not len(after):
        raise RejectedSample(DropReason.TRUNCATED_END,
                             f'track {track.track_id}: trailing edge never crosses after t_lc={t_lc}')

    t_s = int(track.frame[before[-1]])
    t_e = int(track.frame[i + 1 + after[0]])
    return LaneChangeEvent(
        recording_id=meta.recording_id, track_id=track.track_id, segment=track.segment,
        t_lc=t_lc, t_s=t_s, t_e=t_e, duration=(t_e - t_s) / meta.frame_rate,
        direction=direction, source_lane=source, target_lane=target,
    )


class LaneChangeExtractor:
    """Builds the paired lane-change / lane-keep decision dataset"""

    def __init__(self, window_seconds: float = 2.0, n_jobs: int = 1):
        self.window_seconds = window_seconds
        self.n_jobs = n_jobs
        self.logger = logging.getLogger(__name__)

    def window_frames(self, frame_rate: float) -> int:
        return int(round(self.window_seconds * frame_rate))

    def detect_lane_transitions(self, track: Track) -> List[Tuple[int, str]]:
        return detect_lane_transitions(track)

    def compute_lc_bounds(self, track: Track, t_lc: int, meta: RecordingMeta) -> LaneChangeEvent:
        return compute_lc_bounds(track, t_lc, meta)

    def _window(self, track: Track, event: LaneChangeEvent, start: int, end: int, label: int,
                short_reason: DropReason, frame_rate: float) -> ObservationWindow:
        if start < track.first_frame:
            raise RejectedSample(short_reason,
                                 f'track {track.track_id}: window starts at {start} before frame {track.first_frame}')
        lanes = track.lane_id[track.index_of(start):track.index_of(end - 1) + 1]
        if (lanes != lanes[0]).any():
            raise RejectedSample(DropReason.LANE_NOT_CONSTANT,
                                 f'track {track.track_id}: lane changes inside [{start}, {end})')
        return ObservationWindow(recording_id=event.recording_id, track_id=track.track_id,
                                 segment=track.segment, label=label, start_frame=start, end_frame=end,
                                 direction_of_interest=event.direction, linked_event=event,
                                 frame_rate=frame_rate)

    def extract_prep_window(self, track: Track, event: LaneChangeEvent, frame_rate: float) -> ObservationWindow:
        """Lane-change preparation window [t_s - 2 s, t_s)"""
        n = self.window_frames(frame_rate)
        return self._window(track, event, event.t_s - n, event.t_s, LANE_CHANGE, DropReason.INSUFFICIENT_HISTORY,
                            frame_rate)

    def _lk_window(self, track: Track, event: LaneChangeEvent, frame_rate: float) -> ObservationWindow:
        n = self.window_frames(frame_rate)
        return self._window(track, event, event.t_s - 2 * n, event.t_s - n, LANE_KEEP,
                            DropReason.INSUFFICIENT_LK_HISTORY, frame_rate)

    def extract_lk_window(self, track: Track, event: LaneChangeEvent,
                          frame_rate: float) -> Optional[ObservationWindow]:
        """Lane-keep window [t_s - 4 s, t_s - 2 s) paired with the preparation window, or None"""
        try:
            return self._lk_window(track, event, frame_rate)
        except RejectedSample as e:
            self.logger.debug(f"No lane-keep window: {e}")
            return None

    def resolve_neighbors(self, window: ObservationWindow,
                          tracks: Union[TrackIndex, Sequence[Track]]) -> NeighborGroup:
        """
        Per-frame CLV/TLV/TFV of a window; every role must exist at every frame

        Raises:
            RejectedSample(MISSING_NEIGHBOR / NEIGHBOR_LANE_MISMATCH)
        """
        index = tracks if isinstance(tracks, TrackIndex) else TrackIndex(tracks)
        found = index.lookup(window.track_id, window.start_frame)
        if found is None:
            raise RejectedSample(DropReason.MISSING_NEIGHBOR, f'subject vehicle {window.track_id} not found')
        sv_track, sv_start = found
        side = 'left' if window.direction_of_interest == LEFT else 'right'
        role_columns = {
            'clv': 'precedingId',
            'tlv': f'{side}PrecedingId',
            'tfv': f'{side}FollowingId',
        }

        n = window.n_frames
        rows = {role: {k: np.empty(n) for k in ('x', 'length', 'vx', 'vy', 'ax', 'ay')}
                for role in role_columns}
        ids = {role: np.zeros(n, dtype=np.int64) for role in role_columns}
        lanes = {role: np.zeros(n, dtype=np.int64) for role in role_columns}

        for k in range(n):
            frame = window.start_frame + k
            sv_i = sv_start + k
            for role, column in role_columns.items():
                vid = int(sv_track.neighbor(column)[sv_i])
                hit = index.lookup(vid, frame) if vid > 0 else None
                if hit is None:
                    raise RejectedSample(DropReason.MISSING_NEIGHBOR,
                                         f'{role.upper()} absent for vehicle {window.track_id} at frame {frame}')
                other, j = hit
                ids[role][k] = vid
                lanes[role][k] = other.lane_id[j]
                row = rows[role]
                row['x'][k] = other.x[j]
                row['length'][k] = other.width[j]
                row['vx'][k] = other.vx[j]
                row['vy'][k] = other.vy[j]
                row['ax'][k] = other.ax[j]
                row['ay'][k] = other.ay[j]

        sv_rows = slice(sv_start, sv_start + n)
        sv_lane = sv_track.lane_id[sv_rows]
        if (lanes['clv'] != sv_lane).any():
            raise RejectedSample(DropReason.NEIGHBOR_LANE_MISMATCH, f'CLV not in lane of vehicle {window.track_id}')
        event = window.linked_event
        if event is not None:
            # lane ids step by one between adjacent lanes of a carriageway
            target_side = sv_lane + (event.target_lane - event.source_lane)
            misplaced = (lanes['tlv'] != target_side) | (lanes['tfv'] != target_side)
        else:
            misplaced = (lanes['tlv'] != lanes['tfv']) | (lanes['tlv'] == sv_lane)
        if misplaced.any():
            raise RejectedSample(DropReason.NEIGHBOR_LANE_MISMATCH,
                                 f'TLV/TFV not in the target-side lane of vehicle {window.track_id}')

        sv = VehicleSlice(
            ids=np.full(n, sv_track.track_id, dtype=np.int64),
            x=sv_track.x[sv_rows].copy(), length=sv_track.width[sv_rows].copy(),
            vx=sv_track.vx[sv_rows].copy(), vy=sv_track.vy[sv_rows].copy(),
            ax=sv_track.ax[sv_rows].copy(), ay=sv_track.ay[sv_rows].copy(),
            lane_id=sv_lane.copy(),
        )
        slices = {role: VehicleSlice(ids=ids[role], lane_id=lanes[role], **rows[role]) for role in role_columns}
        return NeighborGroup(window=window, sv=sv, **slices)

    def extract_recording(self, recording: Recording) -> Tuple[List[DecisionPair], List[LaneChangeEvent], Counter, int]:
        """Qualified pairs, emitted events, drop counts and transition count of one recording"""
        meta = recording.meta
        index = recording.index()
        pairs: List[DecisionPair] = []
        events: List[LaneChangeEvent] = []
        drops: Counter = Counter(recording.rejected)
        n_transitions = 0

        for track in sorted(recording.tracks, key=lambda t: (t.track_id, t.segment)):
            for t_lc, _ in detect_lane_transitions(track):
                n_transitions += 1
                try:
                    event = compute_lc_bounds(track, t_lc, meta)
                    events.append(event)
                    lc_window = self.extract_prep_window(track, event, meta.frame_rate)
                    lk_window = self._lk_window(track, event, meta.frame_rate)
                    lc_group = self.resolve_neighbors(lc_window, index)
                    lk_group = self.resolve_neighbors(lk_window, index)
                except RejectedSample as e:
                    drops[e.reason.value] += 1
                    self.logger.debug(f"Recording {meta.recording_id}, vehicle {track.track_id}, "
                                      f"t_lc={t_lc}: dropped ({e})")
                    continue
                pairs.append(DecisionPair(pair_id=-1, recording_id=meta.recording_id, event=event,
                                          lc=lc_group, lk=lk_group, style=style_features(event, track)))
        return pairs, events, drops, n_transitions

    def build_lc_decision_dataset(self, recordings: Sequence[Recording]) -> LcDecisionDataset:
        """
        Paired LC/LK decision dataset over all recordings

        Returns:
            Dataset ordered by (recording, track, t_s) with per-reason drop counts
        """
        if self.n_jobs > 1:
            with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                results = list(pool.map(self.extract_recording, recordings))
        else:
            results = [self.extract_recording(r) for r in recordings]

        dataset = LcDecisionDataset()
        for pairs, events, drops, n_transitions in results:
            dataset.pairs.extend(pairs)
            dataset.events.extend(events)
            dataset.drops.update(drops)
            dataset.n_transitions += n_transitions

        dataset.pairs.sort(key=lambda p: (p.recording_id, p.event.track_id, p.event.t_s))
        dataset.events.sort(key=lambda e: (e.recording_id, e.track_id, e.t_s))
        for pair_id, pair in enumerate(dataset.pairs):
            pair.pair_id = pair_id

        self.logger.info(f"Decision dataset: {len(dataset.pairs)} LC + {len(dataset.pairs)} LK windows "
                         f"from {dataset.n_transitions} lane transitions")
        for reason, count in sorted(dataset.drops.items()):
            self.logger.info(f"  dropped {count} ({reason})")
        return dataset
