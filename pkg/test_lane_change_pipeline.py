#!/usr/bin/env python3
"""
End-to-end tests for the lane_change_pipeline command line
"""

import json
import os
import sys
import tempfile

import yaml

from errors import ConfigurationError
from lane_change_pipeline import REPORT_INPUTS, main, parse_grid, run_slug, validate_summary
from report_writer import read_csv, read_provenance

STAGES = ['synth', 'extract', 'cluster', 'build-datasets', 'sweep', 'report']


def write_config(directory, output='run', **extra):
    data = {
        'seed': 3,
        'input_dir': os.path.join(directory, 'data'),
        'output_dir': os.path.join(directory, output),
        'fuzzy': {'grid': [[0.2, 0.3]], 'coefficients': [0.2, 0.3]},
        'classifier': {'kind': 'rf', 'rf': {'n_trees': 5}, 'cnn_lstm': {'epochs': 1, 'conv_filters': 4,
                                                                        'hidden_size': 4}},
        'synth': {'presets': ['clean', 'style_blobs', 'truncated'], 'events_per_preset': 8},
    }
    data.update(extra)
    path = os.path.join(directory, f'{output}.yaml')
    with open(path, 'w') as f:
        yaml.safe_dump(data, f)
    return path


def run(stages, config, *flags):
    return [main([stage, '--config', config, *flags]) for stage in stages]


def tree_bytes(root):
    files = {}
    for directory, _, names in os.walk(root):
        for name in names:
            path = os.path.join(directory, name)
            with open(path, 'rb') as f:
                files[os.path.relpath(path, root)] = f.read()
    return files


def test_full_run_writes_every_artifact():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp)
        assert run(STAGES, config) == [0] * len(STAGES)
        out = os.path.join(tmp, 'run')

        truth = read_csv(os.path.join(tmp, 'data', 'ground_truth.csv'))
        assert len(truth) == 24
        for relative in REPORT_INPUTS:
            assert os.path.exists(os.path.join(out, relative)), relative

        with open(os.path.join(out, 'extract', 'drops.json')) as f:
            drops = json.load(f)
        assert drops['qualified_pairs'] == 16
        assert drops['drops'] == {'truncated_end': 4, 'truncated_start': 4}

        board = read_csv(os.path.join(out, 'sweep', 'leaderboard.csv'))
        assert sorted(board['variant']) == ['Bird', 'Bird&DS', 'F_0.2_0.3']
        assert list(board['rank']) == [1, 2, 3]
        assert set(board['status']) == {'ok'}
        for tag in board['variant']:
            run_dir = os.path.join(out, 'sweep', 'runs', run_slug(tag))
            for name in ('manifest.json', 'model.json', 'roc.csv', 'importance.csv'):
                assert os.path.exists(os.path.join(run_dir, name)), (tag, name)

        for tag in ('Bird', 'Bird_DS', 'F_0.2_0.3'):
            assert os.path.exists(os.path.join(out, 'datasets', tag, 'dataset.csv'))

        with open(os.path.join(out, 'report', 'summary.json')) as f:
            summary = json.load(f)
        assert validate_summary(summary) == []
        assert summary['best_run']['variant'] == board['variant'][0]
        assert 'fpr' in summary['best_run']['roc']
        assert [row['style'] for row in summary['clusters']] == ['Aggressive', 'General', 'Cautious', 'Overall']
        provenance = read_provenance(os.path.join(out, 'sweep', 'leaderboard.csv'))
        assert provenance['config_hash'] == summary['provenance']['config_hash']
        assert os.path.exists(os.path.join(out, 'report', 'summary.md'))


def test_reruns_are_byte_identical():
    with tempfile.TemporaryDirectory() as tmp:
        first = write_config(tmp, 'first')
        second = write_config(tmp, 'second')
        assert run(STAGES, first) == [0] * len(STAGES)
        assert run(STAGES[1:], second) == [0] * (len(STAGES) - 1)
        a = tree_bytes(os.path.join(tmp, 'first'))
        b = tree_bytes(os.path.join(tmp, 'second'))
        assert sorted(a) == sorted(b)
        for relative in a:
            assert a[relative] == b[relative], relative


def test_train_one_variant():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp)
        assert run(['synth', 'extract', 'cluster', 'train'], config) == [0, 0, 0, 0]
        with open(os.path.join(tmp, 'run', 'train', 'F_0.2_0.3', 'manifest.json')) as f:
            manifest = json.load(f)
        assert manifest['variant'] == 'F_0.2_0.3' and manifest['status'] == 'ok'
        assert manifest['coefficients'] == {'a': 0.2, 'b': 0.3}


def test_sequence_classifier_sweep():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp)
        codes = run(['synth', 'extract', 'cluster', 'build-datasets', 'sweep'], config,
                    '--classifier', 'cnn_lstm', '--grid', 'identity')
        assert codes == [0] * 5
        out = os.path.join(tmp, 'run')
        assert os.path.exists(os.path.join(out, 'datasets', 'F_0.2_0.3', 'dataset.lcts'))
        assert not os.path.exists(os.path.join(out, 'datasets', 'Bird_DS'))
        board = read_csv(os.path.join(out, 'sweep', 'leaderboard.csv'))
        assert sorted(board['variant']) == ['Bird', 'F_0_0']
        bird = board[board['variant'] == 'Bird'].iloc[0]
        identity = board[board['variant'] == 'F_0_0'].iloc[0]
        assert bird['test_accuracy'] == identity['test_accuracy']
        assert os.path.exists(os.path.join(out, 'sweep', 'runs', 'Bird', 'history.csv'))
        assert os.path.exists(os.path.join(out, 'sweep', 'runs', 'Bird', 'model.lcts'))


def test_empty_input_fails():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp)
        os.makedirs(os.path.join(tmp, 'data'))
        assert main(['extract', '--config', config]) == 2
        assert main(['extract', '--config', config, '--input-dir', os.path.join(tmp, 'nowhere')]) == 2


def test_report_on_a_partial_run():
    with tempfile.TemporaryDirectory() as tmp:
        config = write_config(tmp)
        assert run(['synth', 'extract'], config) == [0, 0]
        assert main(['report', '--config', config]) == 2
        assert main(['report', '--config', config, os.path.join(tmp, 'run')]) == 2
        assert not os.path.exists(os.path.join(tmp, 'run', 'report'))
        assert main(['build-datasets', '--config', config]) == 2


def test_configuration_errors_exit_one():
    with tempfile.TemporaryDirectory() as tmp:
        bad_key = write_config(tmp, 'bad', colour='red')
        assert main(['extract', '--config', bad_key]) == 1
        no_seed = os.path.join(tmp, 'no_seed.yaml')
        with open(no_seed, 'w') as f:
            yaml.safe_dump({'input_dir': tmp}, f)
        assert main(['extract', '--config', no_seed]) == 1
        assert main(['extract', '--config', os.path.join(tmp, 'missing.yaml')]) == 1
        config = write_config(tmp)
        assert main(['sweep', '--config', config, '--grid', '0.5:x']) == 1
        try:
            main(['fly', '--config', config])
            assert False, 'unknown subcommand'
        except SystemExit as e:
            assert e.code == 1


def test_cli_helpers():
    assert parse_grid(None) is None
    assert parse_grid('full') == 'full'
    assert parse_grid('0.1:0.2,0.5:0.5') == [[0.1, 0.2], [0.5, 0.5]]
    try:
        parse_grid('0.1-0.2')
        assert False
    except ConfigurationError:
        pass
    assert run_slug('Bird&DS') == 'Bird_DS'
    assert run_slug('F_0.1_0.9') == 'F_0.1_0.9'
    assert 'missing key: best_run' in validate_summary({'provenance': {'config_hash': 'x', 'seed': 1}})


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
