#!/usr/bin/env python3
"""
Tests for HighD recording parsing and direction normalization
"""

import os
import sys
import tempfile

import numpy as np
import pandas as pd

from errors import DataError, DropReason, ParseError, RejectedSample
from highd_reader import (LOWER, NEIGHBOR_COLUMNS, TRACK_COLUMNS, UPPER, HighDReader, RecordingMeta, Track,
                          build_direction_map, discover_recordings, mirror_track, normalize_direction,
                          recording_paths, to_raw, write_recording_meta, write_tracks)

UPPER_MARKINGS = (1.0, 4.75, 8.5, 12.25)
LOWER_MARKINGS = (16.0, 19.75, 23.5, 27.25)


def make_meta(recording_id=1, frame_rate=25.0):
    return RecordingMeta(recording_id=recording_id, frame_rate=frame_rate,
                         lane_markings_upper=UPPER_MARKINGS, lane_markings_lower=LOWER_MARKINGS,
                         drive_direction_map=build_direction_map(UPPER_MARKINGS, LOWER_MARKINGS))


def make_raw_track(track_id, lane, y, n=10, first_frame=0, x0=100.0, vx=30.0, vy=0.1):
    frames = np.arange(first_frame, first_frame + n, dtype=np.int64)
    return Track(
        track_id=track_id, direction=0, frame=frames,
        x=x0 + vx * np.arange(n) / 25.0, y=np.full(n, y),
        width=np.full(n, 4.5), height=np.full(n, 1.8),
        vx=np.full(n, vx), vy=np.full(n, vy), ax=np.full(n, 0.2), ay=np.full(n, -0.05),
        lane_id=np.full(n, lane, dtype=np.int64),
        neighbors=np.zeros((n, len(NEIGHBOR_COLUMNS)), dtype=np.int64),
    )


def write_fixture(directory, tracks, recording_id=1):
    meta = make_meta(recording_id)
    meta_path, tracks_path = recording_paths(directory, recording_id)
    write_recording_meta(meta, meta_path)
    write_tracks(tracks, tracks_path)
    return meta_path, tracks_path


def test_lane_numbering():
    mapping = build_direction_map(UPPER_MARKINGS, LOWER_MARKINGS)
    assert mapping == {2: UPPER, 3: UPPER, 4: UPPER, 6: LOWER, 7: LOWER, 8: LOWER}
    meta = make_meta()
    assert meta.lane_bounds(3) == (UPPER, 4.75, 8.5)
    assert meta.lane_bounds(6) == (LOWER, 16.0, 19.75)
    try:
        meta.lane_bounds(5)
        assert False, 'lane 5 is the id gap between carriageways'
    except DataError:
        pass


def test_shared_marking_rejects_bad_pairs():
    meta = make_meta()
    assert meta.shared_marking(7, 6) == -19.75
    assert meta.shared_marking(2, 3) == 4.75
    for a, b, reason in ((2, 4, DropReason.NON_ADJACENT_LANES), (4, 6, DropReason.MIXED_CARRIAGEWAY)):
        try:
            meta.shared_marking(a, b)
            assert False, f'{a}->{b} should be rejected'
        except RejectedSample as e:
            assert e.reason is reason


def test_csv_round_trip_is_exact():
    tracks = [make_raw_track(1, 7, 20.123456789012345), make_raw_track(2, 3, 5.5, first_frame=3)]
    with tempfile.TemporaryDirectory() as tmp:
        write_fixture(tmp, tracks)
        meta_path, tracks_path = recording_paths(tmp, 1)
        reader = HighDReader()
        meta = reader.parse_recording_meta(meta_path)
        parsed = reader.parse_tracks(tracks_path, meta)

    assert meta.frame_rate == 25.0
    assert meta.lane_markings_lower == LOWER_MARKINGS
    assert [t.track_id for t in parsed] == [1, 2]
    for original, back in zip(tracks, parsed):
        for name in ('frame', 'x', 'y', 'width', 'height', 'vx', 'vy', 'ax', 'ay', 'lane_id', 'neighbors'):
            assert np.array_equal(getattr(original, name), getattr(back, name)), name


def test_parse_error_names_row_and_column():
    with tempfile.TemporaryDirectory() as tmp:
        _, tracks_path = write_fixture(tmp, [make_raw_track(1, 7, 20.0)])
        table = pd.read_csv(tracks_path, dtype=str)
        table.loc[3, 'xVelocity'] = 'fast'
        table.to_csv(tracks_path, index=False)
        try:
            HighDReader().parse_tracks(tracks_path, make_meta())
            assert False, 'non-numeric cell should fail'
        except ParseError as e:
            assert e.row == 5
            assert e.column == 'xVelocity'
            assert e.path == tracks_path


def test_missing_column_and_empty_file():
    with tempfile.TemporaryDirectory() as tmp:
        _, tracks_path = write_fixture(tmp, [make_raw_track(1, 7, 20.0)])
        table = pd.read_csv(tracks_path).drop(columns=['laneId'])
        table.to_csv(tracks_path, index=False)
        try:
            HighDReader().parse_tracks(tracks_path, make_meta())
            assert False
        except ParseError as e:
            assert e.column == 'laneId'

        empty = os.path.join(tmp, 'empty.csv')
        open(empty, 'w').close()
        try:
            HighDReader().parse_tracks(empty, make_meta())
            assert False
        except ParseError as e:
            assert 'empty' in str(e)


def test_frame_gaps_reject_or_split():
    track = make_raw_track(1, 7, 20.0, n=12)
    table = track.to_frame()
    table = table[~table['frame'].isin([5, 6])]
    reader = HighDReader()
    assert reader.tracks_from_frame(table, make_meta()) == []
    assert reader.rejected_gaps == 1

    pieces = HighDReader(split_frame_gaps=True).tracks_from_frame(table, make_meta())
    assert [(p.segment, p.first_frame, p.last_frame) for p in pieces] == [(0, 0, 4), (1, 7, 11)]


def test_non_contiguous_rows_fail():
    table = pd.concat([make_raw_track(1, 7, 20.0, n=3).to_frame(), make_raw_track(2, 7, 20.0, n=3).to_frame(),
                       make_raw_track(1, 7, 20.0, n=3, first_frame=3).to_frame()], ignore_index=True)
    try:
        HighDReader().tracks_from_frame(table, make_meta())
        assert False
    except ParseError as e:
        assert e.column == 'id'


def test_lower_direction_normalization():
    raw = make_raw_track(1, 7, 20.0)
    track = normalize_direction(raw, make_meta())
    assert track.normalized and track.direction == LOWER
    assert np.array_equal(track.x, raw.x)
    assert np.array_equal(track.y, -raw.y)
    assert np.array_equal(track.vy, -raw.vy)
    assert np.array_equal(track.ay, -raw.ay)
    assert np.array_equal(track.vx, raw.vx)


def test_upper_direction_normalization():
    raw = make_raw_track(1, 3, 5.0, vx=-30.0)
    track = normalize_direction(raw, make_meta())
    assert track.direction == UPPER
    assert np.allclose(track.x, -(raw.x + raw.width))
    assert np.allclose(track.y, raw.y + raw.height)
    assert (track.vx > 0).all()
    assert np.array_equal(track.vy, raw.vy)
    assert np.array_equal(track.ax, -raw.ax)


def test_normalization_is_idempotent_and_invertible():
    meta = make_meta()
    for raw in (make_raw_track(1, 7, 20.0), make_raw_track(2, 3, 5.0, vx=-30.0)):
        once = normalize_direction(raw, meta)
        assert normalize_direction(once, meta) is once
        back = to_raw(once)
        assert np.allclose(back.x, raw.x) and np.allclose(back.y, raw.y)
        assert np.array_equal(back.vy, raw.vy)


def test_mirror_is_an_involution():
    track = normalize_direction(make_raw_track(1, 7, 20.0), make_meta())
    neighbors = track.neighbors.copy()
    neighbors[:, NEIGHBOR_COLUMNS.index('leftPrecedingId')] = 9
    track = Track(**{**track.__dict__, 'neighbors': neighbors})
    mirrored = mirror_track(track)
    assert (mirrored.neighbor('rightPrecedingId') == 9).all()
    twice = mirror_track(mirrored)
    assert np.allclose(twice.y, track.y)
    for name in ('x', 'vy', 'ay', 'neighbors'):
        assert np.array_equal(getattr(twice, name), getattr(track, name)), name


def test_mixed_carriageway_track_is_rejected():
    raw = make_raw_track(1, 7, 20.0)
    lanes = raw.lane_id.copy()
    lanes[5:] = 3
    raw = Track(**{**raw.__dict__, 'lane_id': lanes})
    recording = HighDReader().build_recording(make_meta(), [raw])
    assert recording.tracks == []
    assert recording.rejected[DropReason.MIXED_CARRIAGEWAY.value] == 1


def test_load_directory():
    with tempfile.TemporaryDirectory() as tmp:
        write_fixture(tmp, [make_raw_track(1, 7, 20.0)], recording_id=2)
        write_fixture(tmp, [make_raw_track(1, 7, 20.0), make_raw_track(2, 8, 24.0)], recording_id=1)
        assert discover_recordings(tmp) == [1, 2]
        recordings = HighDReader().load_directory(tmp, n_jobs=2)
        assert [r.meta.recording_id for r in recordings] == [1, 2]
        assert [len(r.tracks) for r in recordings] == [2, 1]
        assert list(recordings[0].tracks[0].to_frame().columns) == TRACK_COLUMNS

    with tempfile.TemporaryDirectory() as tmp:
        try:
            HighDReader().load_directory(tmp)
            assert False, 'empty directory should fail'
        except DataError:
            pass


def test_unpadded_file_names_resolve():
    with tempfile.TemporaryDirectory() as tmp:
        meta_path = os.path.join(tmp, '3_recordingMeta.csv')
        tracks_path = os.path.join(tmp, '3_tracks.csv')
        write_recording_meta(make_meta(3), meta_path)
        write_tracks([make_raw_track(1, 7, 20.0)], tracks_path)
        write_fixture(tmp, [make_raw_track(1, 7, 20.0), make_raw_track(2, 8, 24.0)], recording_id=12)

        assert discover_recordings(tmp) == [3, 12]
        assert recording_paths(tmp, 3) == (meta_path, tracks_path)
        assert recording_paths(tmp, 5)[1] == os.path.join(tmp, '05_tracks.csv')
        for recording_id in discover_recordings(tmp):
            assert all(os.path.exists(p) for p in recording_paths(tmp, recording_id))

        recordings = HighDReader().load_directory(tmp)
        assert [r.meta.recording_id for r in recordings] == [3, 12]
        assert [len(r.tracks) for r in recordings] == [1, 2]


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
