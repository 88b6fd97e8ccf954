import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import DataError, DropReason, RejectedSample
from highd_reader import (LOWER, NEIGHBOR_COLUMNS, UPPER, HighDReader, Recording, RecordingMeta, Track,
                          build_direction_map, recording_paths, to_raw, write_recording_meta, write_tracks)
from lane_change_extractor import LEFT, RIGHT
from style_clustering import StyleFeatures

logger = logging.getLogger(__name__)

UPPER_MARKINGS = (1.0, 4.75, 8.5, 12.25)
LOWER_MARKINGS = (16.0, 19.75, 23.5, 27.25)

PRESETS = ('clean', 'style_blobs', 'truncated', 'double', 'missing_neighbor', 'lane_keep')

QUALIFIED = 'qualified'

# vehicles farther than this (m) are not reported as neighbors
NEIGHBOR_RANGE = 150.0

# commanded durations (s) and vehicle widths (m) of the three style blobs
_BLOBS = ((1.0, 1.7), (2.0, 1.9), (3.0, 2.3))


@dataclass(frozen=True)
class LaneChangeCommand:
    start_time: float
    duration: float
    target_lane: int

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f'lane-change duration must be > 0, got {self.duration}')


@dataclass
class VehicleScript:
    """A scripted vehicle in canonical coordinates (x along travel, lateral positive to the left)"""

    vehicle_id: int
    direction: int
    lane_id: int
    x0: float
    speed: float
    accel: float = 0.0
    length: float = 4.5
    width: float = 1.9
    start_time: float = 0.0
    end_time: Optional[float] = None
    lane_changes: List[LaneChangeCommand] = field(default_factory=list)
    # free-form tags carried into the ground truth (e.g. style blob index)
    tags: Dict[str, object] = field(default_factory=dict)


@dataclass
class ScenarioSpec:
    recording_id: int
    vehicles: List[VehicleScript]
    duration: float = 14.0
    frame_rate: float = 25.0
    upper_markings: Tuple[float, ...] = UPPER_MARKINGS
    lower_markings: Tuple[float, ...] = LOWER_MARKINGS
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.frame_rate))


@dataclass(frozen=True)
class CrossingTruth:
    """Closed-form crossing times (s) of one scripted change and the frames extraction should report"""

    vehicle_id: int
    direction: str
    source_lane: int
    target_lane: int
    t_lead: float
    t_center: float
    t_trail: float
    t_s: int
    t_e: int
    style: Optional[StyleFeatures]
    expected: str
    tags: Dict[str, object] = field(default_factory=dict, compare=False)


@dataclass
class GroundTruth:
    changes: List[CrossingTruth] = field(default_factory=list)

    @property
    def qualified(self) -> List[CrossingTruth]:
        return [c for c in self.changes if c.expected == QUALIFIED]

    def expected_drops(self) -> Counter:
        return Counter(c.expected for c in self.changes if c.expected != QUALIFIED)


@dataclass
class SyntheticRecording:
    meta: RecordingMeta
    tracks: List[Track]
    truth: GroundTruth
    preset: str = ''

    def recording(self) -> Recording:
        """Normalized view, as the reader would produce it"""
        return HighDReader().build_recording(self.meta, self.tracks)


def ease(u):
    """Lateral progress of a change: (1 - cos(pi u)) / 2 on [0, 1], clamped outside"""
    u = np.clip(u, 0.0, 1.0)
    return (1.0 - np.cos(np.pi * u)) / 2.0


def ease_inverse(s: float) -> float:
    return math.acos(1.0 - 2.0 * s) / math.pi


def _lane_table(meta: RecordingMeta, direction: int) -> List[Tuple[int, float, float]]:
    """(lane id, canonical lo, canonical hi) of one carriageway, right to left"""
    lanes = [lane for lane, d in meta.drive_direction_map.items() if d == direction]
    return sorted(((lane,) + meta.canonical_lane_bounds(lane) for lane in lanes), key=lambda r: r[1])


def _lateral_profile(script: VehicleScript, meta: RecordingMeta, t: np.ndarray):
    """Center, lateral speed and lateral acceleration of a scripted vehicle"""
    lo, hi = meta.canonical_lane_bounds(script.lane_id)
    center = np.full(len(t), (lo + hi) / 2.0)
    vy = np.zeros(len(t))
    ay = np.zeros(len(t))
    current = (lo + hi) / 2.0
    for command in script.lane_changes:
        t_lo, t_hi = meta.canonical_lane_bounds(command.target_lane)
        delta = (t_lo + t_hi) / 2.0 - current
        u = (t - command.start_time) / command.duration
        inside = (u >= 0) & (u <= 1)
        center += delta * ease(u)
        vy += np.where(inside, delta * math.pi / (2 * command.duration) * np.sin(np.pi * u), 0.0)
        ay += np.where(inside, delta * math.pi ** 2 / (2 * command.duration ** 2) * np.cos(np.pi * u), 0.0)
        current += delta
    return center, vy, ay


def _lane_of(center: np.ndarray, table: List[Tuple[int, float, float]], vehicle_id: int) -> np.ndarray:
    lanes = np.zeros(len(center), dtype=np.int64)
    for lane, lo, hi in table:
        lanes[(center >= lo) & (center < hi)] = lane
    if (lanes == 0).any():
        raise DataError(f'Scripted vehicle {vehicle_id} leaves the road')
    return lanes


def _snapshot(states: List[dict], frame: int) -> dict:
    """Per-frame arrays over the vehicles visible at a frame"""
    active = [(s, frame - s['frames'][0]) for s in states if s['frames'][0] <= frame <= s['frames'][-1]]
    return {
        'states': [s for s, _ in active],
        'rows': [i for _, i in active],
        'id': np.array([s['id'] for s, _ in active], dtype=np.int64),
        'direction': np.array([s['direction'] for s, _ in active], dtype=np.int64),
        'x': np.array([s['x'][i] for s, i in active], dtype=np.float64),
        'center': np.array([s['center'][i] for s, i in active], dtype=np.float64),
        'lane': np.array([s['lane'][i] for s, i in active], dtype=np.int64),
        'length': np.array([s['length'] for s, _ in active], dtype=np.float64),
        'width': np.array([s['width'] for s, _ in active], dtype=np.float64),
    }


def _neighbors(states: List[dict], n_frames: int, tables: Dict[int, list]) -> None:
    """Fill each state's (n, 8) neighbor id matrix from per-frame geometry"""
    for s in states:
        s['neighbors'] = np.zeros((len(s['frames']), len(NEIGHBOR_COLUMNS)), dtype=np.int64)
    col = {c: k for k, c in enumerate(NEIGHBOR_COLUMNS)}
    # lane -> (right neighbor lane, left neighbor lane), 0 when there is none
    sides: Dict[int, Tuple[int, int]] = {}
    for table in tables.values():
        order = [lane for lane, _, _ in table]
        for pos, lane in enumerate(order):
            sides[lane] = (order[pos - 1] if pos > 0 else 0, order[pos + 1] if pos + 1 < len(order) else 0)

    for frame in range(n_frames):
        snap = _snapshot(states, frame)
        if not len(snap['id']):
            continue
        x, length, lane = snap['x'], snap['length'], snap['lane']
        gap = np.abs(x[None, :] - x[:, None])
        near = (snap['direction'][None, :] == snap['direction'][:, None]) & (gap <= NEIGHBOR_RANGE)
        np.fill_diagonal(near, False)
        ahead = x[None, :] > x[:, None]
        fully_ahead = x[None, :] > (x + length)[:, None]
        fully_behind = (x + length)[None, :] < x[:, None]
        alongside = ~fully_ahead & ~fully_behind
        same = near & (lane[None, :] == lane[:, None])
        right = np.array([sides[int(v)][0] for v in lane])
        left = np.array([sides[int(v)][1] for v in lane])
        in_right = near & (lane[None, :] == right[:, None])
        in_left = near & (lane[None, :] == left[:, None])

        masks = {
            'precedingId': same & ahead,
            'followingId': same & ~ahead,
            'leftPrecedingId': in_left & fully_ahead,
            'leftAlongsideId': in_left & alongside,
            'leftFollowingId': in_left & fully_behind,
            'rightPrecedingId': in_right & fully_ahead,
            'rightAlongsideId': in_right & alongside,
            'rightFollowingId': in_right & fully_behind,
        }
        for column, mask in masks.items():
            masked = np.where(mask, gap, np.inf)
            nearest = masked.argmin(axis=1)
            found = np.isfinite(masked[np.arange(len(nearest)), nearest])
            ids = np.where(found, snap['id'][nearest], 0)
            for k, (s, i) in enumerate(zip(snap['states'], snap['rows'])):
                s['neighbors'][i, col[column]] = ids[k]


def _check_overlaps(states: List[dict], n_frames: int):
    for frame in range(n_frames):
        snap = _snapshot(states, frame)
        x, length = snap['x'], snap['length']
        x_overlap = (x[:, None] < x[None, :] + length[None, :]) & (x[None, :] < x[:, None] + length[:, None])
        y_overlap = (np.abs(snap['center'][:, None] - snap['center'][None, :])
                     < (snap['width'][:, None] + snap['width'][None, :]) / 2.0)
        same = snap['direction'][:, None] == snap['direction'][None, :]
        clash = np.triu(x_overlap & y_overlap & same, k=1)
        if clash.any():
            a, b = np.argwhere(clash)[0]
            raise DataError(f"Scripted vehicles {snap['id'][a]} and {snap['id'][b]} overlap at frame {frame}")


def gen_recording(spec: ScenarioSpec, preset: str = '') -> SyntheticRecording:
    """
    Sample a scripted scenario into HighD-format tracks with closed-form ground truth

    Raises:
        DataError for overlapping vehicles or vehicles leaving the road
        ValueError for commands outside the recording or to non-adjacent lanes
    """
    meta = RecordingMeta(recording_id=spec.recording_id, frame_rate=spec.frame_rate,
                         lane_markings_upper=tuple(spec.upper_markings),
                         lane_markings_lower=tuple(spec.lower_markings),
                         drive_direction_map=build_direction_map(spec.upper_markings, spec.lower_markings))
    tables = {UPPER: _lane_table(meta, UPPER), LOWER: _lane_table(meta, LOWER)}
    fr = spec.frame_rate
    n_frames = spec.n_frames

    ids = [v.vehicle_id for v in spec.vehicles]
    if len(set(ids)) != len(ids) or min(ids, default=1) < 1:
        raise ValueError('vehicle ids must be unique and positive')

    states = []
    for script in spec.vehicles:
        lane = script.lane_id
        for command in script.lane_changes:
            if command.start_time < 0 or command.start_time + command.duration > spec.duration:
                raise ValueError(f'vehicle {script.vehicle_id}: lane change outside the recording')
            try:
                meta.shared_marking(lane, command.target_lane)
            except RejectedSample as e:
                raise ValueError(f'vehicle {script.vehicle_id}: cannot change from lane {lane} '
                                 f'to {command.target_lane} ({e.reason.value})')
            lane = command.target_lane
        first = int(math.ceil(script.start_time * fr - 1e-9))
        last = n_frames - 1 if script.end_time is None else min(n_frames - 1, int(math.floor(script.end_time * fr)))
        if last <= first:
            raise ValueError(f'vehicle {script.vehicle_id} is not visible in the recording')
        frames = np.arange(first, last + 1, dtype=np.int64)
        t = frames / fr
        center, vy, ay = _lateral_profile(script, meta, t)
        states.append({
            'id': script.vehicle_id, 'script': script, 'direction': script.direction,
            'frames': frames, 't': t,
            'x': script.x0 + script.speed * t + 0.5 * script.accel * t ** 2,
            'vx': script.speed + script.accel * t,
            'ax': np.full(len(t), script.accel),
            'center': center, 'vy': vy, 'ay': ay,
            'lane': _lane_of(center, tables[script.direction], script.vehicle_id),
            'length': script.length, 'width': script.width,
        })

    _check_overlaps(states, n_frames)
    _neighbors(states, n_frames, tables)

    tracks = []
    for s in states:
        n = len(s['frames'])
        normalized = Track(
            track_id=s['id'], direction=s['direction'], frame=s['frames'],
            x=s['x'], y=s['center'] + s['width'] / 2.0,
            width=np.full(n, s['length']), height=np.full(n, s['width']),
            vx=s['vx'], vy=s['vy'], ax=s['ax'], ay=s['ay'],
            lane_id=s['lane'], neighbors=s['neighbors'], normalized=True,
        )
        tracks.append(to_raw(normalized))

    truth = GroundTruth([c for s in states for c in _crossings(s, meta)])
    logger.info(f"Generated recording {spec.recording_id}: {len(tracks)} vehicles, {n_frames} frames, "
                f"{len(truth.changes)} scripted changes")
    return SyntheticRecording(meta=meta, tracks=tracks, truth=truth, preset=preset)


def _crossings(state: dict, meta: RecordingMeta) -> List[CrossingTruth]:
    script: VehicleScript = state['script']
    fr = meta.frame_rate
    out = []
    lo, hi = meta.canonical_lane_bounds(script.lane_id)
    current_lane, current = script.lane_id, (lo + hi) / 2.0
    for k, command in enumerate(script.lane_changes):
        t_lo, t_hi = meta.canonical_lane_bounds(command.target_lane)
        delta = (t_lo + t_hi) / 2.0 - current
        sign = 1.0 if delta > 0 else -1.0
        marking = meta.shared_marking(current_lane, command.target_lane)
        half = script.width / 2.0

        def crossing(level):
            return command.start_time + command.duration * ease_inverse((level - current) / delta)

        t_lead, t_center, t_trail = crossing(marking - sign * half), crossing(marking), crossing(marking + sign * half)
        t_s = int(math.floor(t_lead * fr))
        t_e = int(math.floor(t_trail * fr)) + 1
        frames = state['frames']
        style = None
        if frames[0] <= t_s and t_e <= frames[-1]:
            i0, i1 = t_s - frames[0], t_e - frames[0]
            style = StyleFeatures(duration=(t_e - t_s) / fr,
                                  lat_accel=float(np.mean(np.abs(state['ay'][i0:i1 + 1]))),
                                  lat_speed=float(np.mean(np.abs(state['vy'][i0:i1 + 1]))))
        expected = script.tags.get('expected', [QUALIFIED] * len(script.lane_changes))[k]
        out.append(CrossingTruth(
            vehicle_id=script.vehicle_id, direction=LEFT if delta > 0 else RIGHT,
            source_lane=current_lane, target_lane=command.target_lane,
            t_lead=t_lead, t_center=t_center, t_trail=t_trail, t_s=t_s, t_e=t_e,
            style=style, expected=expected, tags={k2: v for k2, v in script.tags.items() if k2 != 'expected'},
        ))
        current_lane, current = command.target_lane, current + delta
    return out


def _platoon(rng: np.random.Generator, next_id: int, direction: int, lanes: Sequence[int], x0: float,
             change_time: float, duration: float, to_left: bool, width: float = 1.9,
             with_tfv: bool = True) -> Tuple[List[VehicleScript], int]:
    """SV in the middle lane with CLV ahead, TLV ahead and TFV behind in the target lane"""
    source = lanes[1]
    target = lanes[2] if to_left else lanes[0]
    speed = float(rng.uniform(25.0, 32.0))

    def jitter():
        return float(rng.uniform(-0.3, 0.3))

    sv = VehicleScript(next_id, direction, source, x0, speed, width=width,
                       lane_changes=[LaneChangeCommand(change_time, duration, target)])
    vehicles = [
        sv,
        VehicleScript(next_id + 1, direction, source, x0 + float(rng.uniform(35.0, 45.0)), speed + jitter()),
        VehicleScript(next_id + 2, direction, target, x0 + float(rng.uniform(20.0, 30.0)), speed + jitter()),
    ]
    if with_tfv:
        vehicles.append(VehicleScript(next_id + 3, direction, target, x0 - float(rng.uniform(20.0, 30.0)),
                                      speed + jitter()))
    return vehicles, next_id + 4


def _carriageway(k: int) -> Tuple[int, Tuple[int, int, int]]:
    """Alternate platoons between the two carriageways (canonical lanes listed right to left)"""
    if k % 2 == 0:
        return LOWER, (8, 7, 6)
    return UPPER, (2, 3, 4)


def preset_scenario(preset: str, recording_id: int, seed: int, n_events: int = 20,
                    frame_rate: float = 25.0) -> ScenarioSpec:
    """One recording holding n_events platoons of a preset, spaced 250 m apart"""
    if preset not in PRESETS:
        raise ValueError(f"Unknown synthetic preset '{preset}'")
    rng = np.random.default_rng([seed, PRESETS.index(preset)])
    vehicles: List[VehicleScript] = []
    next_id = 1
    for k in range(n_events):
        direction, lanes = _carriageway(k)
        x0 = 250.0 * k
        to_left = bool(rng.integers(2))
        change_time = float(rng.uniform(5.0, 6.5))

        if preset == 'lane_keep':
            for lane in lanes:
                vehicles.append(VehicleScript(next_id, direction, lane, x0 + float(rng.uniform(0, 50)),
                                              float(rng.uniform(22.0, 33.0))))
                next_id += 1
            continue

        if preset == 'style_blobs':
            blob = k % len(_BLOBS)
            duration = _BLOBS[blob][0] + float(rng.uniform(-0.05, 0.05))
            width = _BLOBS[blob][1] + float(rng.uniform(-0.02, 0.02))
        else:
            blob, duration, width = None, float(rng.uniform(0.8, 3.0)), float(rng.uniform(1.7, 2.1))

        platoon, next_id = _platoon(rng, next_id, direction, lanes, x0, change_time, duration, to_left,
                                    width=width, with_tfv=preset != 'missing_neighbor')
        sv = platoon[0]
        if blob is not None:
            sv.tags['blob'] = blob
        if preset == 'missing_neighbor':
            sv.tags['expected'] = [DropReason.MISSING_NEIGHBOR.value]
        elif preset == 'truncated':
            if k % 2 == 0:
                # vehicle enters the scene mid-change
                sv.start_time = change_time + 0.43 * duration
                sv.tags['expected'] = [DropReason.TRUNCATED_START.value]
            else:
                # vehicle leaves before its trailing edge crosses
                sv.end_time = change_time + 0.6 * duration
                sv.tags['expected'] = [DropReason.TRUNCATED_END.value]
        elif preset == 'double':
            back = LaneChangeCommand(change_time + duration + 0.5, float(rng.uniform(0.8, 1.5)), lanes[1])
            sv.lane_changes.append(back)
            sv.tags['expected'] = [QUALIFIED, DropReason.LANE_NOT_CONSTANT.value]
        vehicles.extend(platoon)

    return ScenarioSpec(recording_id=recording_id, vehicles=vehicles, duration=14.0 if preset != 'double' else 16.0,
                        frame_rate=frame_rate, seed=seed)


def corpus(presets: Sequence[str] = PRESETS, seed: int = 0, events_per_preset: int = 20,
           frame_rate: float = 25.0) -> List[SyntheticRecording]:
    """Deterministic battery, one recording per preset numbered from 1"""
    return [gen_recording(preset_scenario(p, i + 1, seed, events_per_preset, frame_rate), preset=p)
            for i, p in enumerate(presets)]


def write_recording(synthetic: SyntheticRecording, directory: str) -> Tuple[str, str]:
    os.makedirs(directory, exist_ok=True)
    meta_path, tracks_path = recording_paths(directory, synthetic.meta.recording_id)
    write_recording_meta(synthetic.meta, meta_path)
    write_tracks(synthetic.tracks, tracks_path)
    return meta_path, tracks_path


def write_corpus(recordings: Sequence[SyntheticRecording], directory: str) -> List[str]:
    paths = []
    for synthetic in recordings:
        paths.extend(write_recording(synthetic, directory))
    logger.info(f"Wrote {len(recordings)} synthetic recordings to {directory}")
    return paths
