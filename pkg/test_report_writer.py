#!/usr/bin/env python3
"""
Tests for provenance-stamped artifact writing
"""

import json
import os
import sys
import tempfile

import numpy as np
import pandas as pd

from report_writer import (PROVENANCE_PREFIX, ReportWriter, canonical_json, content_hash, missing_files, read_csv,
                           read_provenance)


def test_csv_carries_provenance():
    with tempfile.TemporaryDirectory() as tmp:
        writer = ReportWriter(tmp, 'abc123', 42)
        table = pd.DataFrame({'style': ['Aggressive', 'Overall'], 'n': [3, 9], 'duration_mean': [0.1, 2 / 3]})
        path = writer.write_csv('cluster/report.csv', table)
        assert path == os.path.join(tmp, 'cluster', 'report.csv')
        with open(path) as f:
            assert f.readline() == f'{PROVENANCE_PREFIX} config_hash=abc123 seed=42\n'
        back = read_csv(path)
        assert list(back.columns) == ['style', 'n', 'duration_mean']
        assert back['duration_mean'].tolist() == [0.1, 2 / 3]
        assert read_provenance(path) == {'config_hash': 'abc123', 'seed': '42'}


def test_json_is_sorted_and_stamped():
    with tempfile.TemporaryDirectory() as tmp:
        writer = ReportWriter(tmp, 'h', 1)
        path = writer.write_json('manifest.json', {'b': np.int64(2), 'a': np.array([1.5, 2.5]), 'c': np.float32(0.5)})
        with open(path) as f:
            text = f.read()
        assert text.endswith('\n')
        data = json.loads(text)
        assert list(data) == ['a', 'b', 'c', 'provenance']
        assert data['a'] == [1.5, 2.5] and data['b'] == 2
        assert read_provenance(path) == {'config_hash': 'h', 'seed': 1}


def test_rewrites_are_byte_identical_and_leave_no_temporaries():
    table = pd.DataFrame({'x': np.linspace(0.0, 1.0, 7)})
    with tempfile.TemporaryDirectory() as tmp:
        writer = ReportWriter(tmp, 'h', 0)
        first = open(writer.write_csv('t.csv', table), 'rb').read()
        second = open(writer.write_csv('t.csv', table), 'rb').read()
        assert first == second
        assert os.listdir(tmp) == ['t.csv']


def test_content_hash_ignores_key_order():
    assert content_hash({'a': 1, 'b': [1, 2]}) == content_hash({'b': [1, 2], 'a': 1})
    assert content_hash(b'LCTS') != content_hash('LCTS')
    assert canonical_json({'b': 1, 'a': np.int32(2)}) == '{"a":2,"b":1}'
    try:
        canonical_json({'a': object()})
        assert False
    except TypeError:
        pass


def test_summary_markdown():
    summary = {
        'leaderboard': [
            {'rank': 1, 'variant': 'F_0.2_0.3', 'test_accuracy': 0.91, 'test_f1': 0.9, 'test_auc': 0.95,
             'train_accuracy': 1.0, 'status': 'ok'},
            {'rank': 2, 'variant': 'Bird', 'test_accuracy': float('nan'), 'test_f1': None, 'test_auc': None,
             'train_accuracy': None, 'status': 'failed'},
        ],
        'clusters': [{'style': 'Aggressive', 'n': 4, 'duration_mean': 2.0, 'duration_std': 0.5,
                      'lat_accel_mean': 0.3, 'lat_accel_std': 0.1, 'lat_speed_mean': 1.2, 'lat_speed_std': 0.2}],
        'importance': [{'feature': 'dy_tlv_sv_mean', 'importance': 0.25}],
    }
    with tempfile.TemporaryDirectory() as tmp:
        path = ReportWriter(tmp, 'cfg', 7).write_summary_markdown('report/summary.md', summary)
        with open(path) as f:
            text = f.read()
    assert '`cfg`' in text and '- seed: 7' in text
    assert '| 1 | F_0.2_0.3 | 0.910 | 0.900 | 0.950 | 1.000 |' in text
    assert '| 2 | Bird | n/a | n/a | n/a | n/a |' in text
    assert 'Failed runs: Bird' in text
    assert '| Aggressive | 4 | 2.000 ± 0.500 |' in text
    assert '| dy_tlv_sv_mean | 0.250 |' in text


def test_missing_files():
    with tempfile.TemporaryDirectory() as tmp:
        ReportWriter(tmp, 'h', 0).write_text('extract/manifest.json', '{}')
        assert missing_files(tmp, ['extract/manifest.json', 'sweep/leaderboard.csv']) == ['sweep/leaderboard.csv']


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
