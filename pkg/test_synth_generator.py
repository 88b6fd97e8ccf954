#!/usr/bin/env python3
"""
Tests for scripted synthetic recordings and their closed-form ground truth
"""

import math
import sys
import tempfile
from collections import Counter

import numpy as np

from errors import DataError, DropReason
from highd_reader import LOWER, UPPER, HighDReader
from lane_change_extractor import LEFT
from synth_generator import (PRESETS, LaneChangeCommand, ScenarioSpec, VehicleScript, corpus, ease, ease_inverse,
                             gen_recording, preset_scenario, write_corpus)


def single_change(duration=2.0, direction=LOWER, lane=7, target=6, width=1.9):
    script = VehicleScript(1, direction, lane, 0.0, 30.0, width=width,
                           lane_changes=[LaneChangeCommand(4.0, duration, target)])
    return ScenarioSpec(recording_id=3, vehicles=[script], duration=10.0)


def test_ease_profile():
    assert ease(0.0) == 0.0 and ease(1.0) == 1.0
    assert abs(ease(0.5) - 0.5) < 1e-15
    assert ease(-1.0) == 0.0 and ease(2.0) == 1.0
    for u in np.linspace(0.0, 1.0, 11):
        assert abs(ease_inverse(float(ease(u))) - u) < 1e-7


def test_lateral_kinematics_follow_the_profile():
    synthetic = gen_recording(single_change(duration=2.0))
    track = synthetic.recording().tracks[0]
    delta = 3.75
    # peak lateral speed at mid-change
    mid = int(5.0 * 25)
    assert abs(track.vy[mid] - delta * math.pi / 4.0) < 1e-9
    assert abs(track.ay[int(4.0 * 25)] - delta * math.pi ** 2 / 8.0) < 1e-9
    assert track.vy[0] == 0.0 and track.vy[-1] == 0.0
    assert track.lane_id[0] == 7 and track.lane_id[-1] == 6


def test_truth_frames_from_edge_crossings():
    synthetic = gen_recording(single_change(duration=2.0))
    (change,) = synthetic.truth.changes
    assert change.direction == LEFT
    assert (change.source_lane, change.target_lane) == (7, 6)
    assert change.t_lead < change.t_center < change.t_trail
    assert abs(change.t_center - 5.0) < 1e-12
    assert change.t_s == math.floor(change.t_lead * 25)
    assert change.t_e == math.floor(change.t_trail * 25) + 1
    assert abs(change.style.duration - (change.t_e - change.t_s) / 25.0) < 1e-12


def test_raw_tracks_use_recording_coordinates():
    lower = gen_recording(single_change()).tracks[0]
    assert (lower.y > 16.0).all() and (lower.vx > 0).all()
    upper = gen_recording(single_change(direction=UPPER, lane=3, target=4)).tracks[0]
    assert (upper.y < 12.25).all() and (upper.vx < 0).all()


def test_scripts_are_validated():
    bad_specs = [
        single_change(lane=8, target=6),
        ScenarioSpec(1, [VehicleScript(1, LOWER, 7, 0.0, 30.0), VehicleScript(1, LOWER, 6, 50.0, 30.0)]),
        ScenarioSpec(1, [VehicleScript(1, LOWER, 7, 0.0, 30.0, lane_changes=[LaneChangeCommand(13.0, 2.0, 6)])]),
    ]
    for spec in bad_specs:
        try:
            gen_recording(spec)
            assert False
        except ValueError:
            pass
    try:
        gen_recording(ScenarioSpec(1, [VehicleScript(1, LOWER, 7, 0.0, 30.0), VehicleScript(2, LOWER, 7, 2.0, 30.0)]))
        assert False, 'vehicles 1 and 2 share road space'
    except DataError:
        pass
    try:
        LaneChangeCommand(1.0, 0.0, 6)
        assert False
    except ValueError:
        pass


def test_platoon_neighbors():
    synthetic = gen_recording(preset_scenario('clean', 1, seed=0, n_events=2))
    recording = synthetic.recording()
    by_id = {t.track_id: t for t in recording.tracks}
    for change in synthetic.truth.changes:
        sv = by_id[change.vehicle_id]
        side = 'left' if change.direction == LEFT else 'right'
        assert sv.neighbor('precedingId')[0] == change.vehicle_id + 1
        assert sv.neighbor(f'{side}PrecedingId')[0] == change.vehicle_id + 2
        assert sv.neighbor(f'{side}FollowingId')[0] == change.vehicle_id + 3


def test_presets_declare_their_drops():
    truncated = gen_recording(preset_scenario('truncated', 1, seed=0, n_events=6))
    assert truncated.truth.expected_drops() == Counter({DropReason.TRUNCATED_START.value: 3,
                                                        DropReason.TRUNCATED_END.value: 3})
    assert truncated.truth.qualified == []

    double = gen_recording(preset_scenario('double', 1, seed=0, n_events=4))
    assert len(double.truth.qualified) == 4
    assert double.truth.expected_drops() == Counter({DropReason.LANE_NOT_CONSTANT.value: 4})

    keep = gen_recording(preset_scenario('lane_keep', 1, seed=0, n_events=4))
    assert keep.truth.changes == [] and len(keep.tracks) == 12

    try:
        preset_scenario('rush_hour', 1, seed=0)
        assert False
    except ValueError:
        pass


def test_corpus_is_deterministic():
    a = corpus(('clean', 'style_blobs'), seed=4, events_per_preset=3)
    b = corpus(('clean', 'style_blobs'), seed=4, events_per_preset=3)
    assert [r.meta.recording_id for r in a] == [1, 2]
    for ra, rb in zip(a, b):
        assert ra.truth == rb.truth
        for ta, tb in zip(ra.tracks, rb.tracks):
            assert np.array_equal(ta.y, tb.y) and np.array_equal(ta.neighbors, tb.neighbors)
    c = corpus(('clean',), seed=5, events_per_preset=3)
    assert c[0].truth != a[0].truth


def test_written_corpus_reads_back():
    recordings = corpus(PRESETS[:2], seed=0, events_per_preset=2)
    with tempfile.TemporaryDirectory() as tmp:
        paths = write_corpus(recordings, tmp)
        assert len(paths) == 4
        loaded = HighDReader().load_directory(tmp)
    for synthetic, back in zip(recordings, loaded):
        direct = synthetic.recording()
        assert [t.track_id for t in direct.tracks] == [t.track_id for t in back.tracks]
        for a, b in zip(direct.tracks, back.tracks):
            assert np.array_equal(a.x, b.x) and np.array_equal(a.lane_id, b.lane_id)


if __name__ == "__main__":
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith('test_') and callable(fn)]
    failed = 0
    for name, fn in tests:
        try:
            fn()
            print(f"✅ {name}")
        except Exception as e:
            failed += 1
            print(f"❌ {name}: {e!r}")
    print("=" * 50)
    print(f"{len(tests) - failed}/{len(tests)} tests passed")
    sys.exit(1 if failed else 0)
