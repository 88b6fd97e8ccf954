#!/usr/bin/env python3
"""
Test script for the lane-change pipeline configuration
This script helps verify that your environment and pipeline YAML are usable.
"""

import os
import sys
import tempfile

import yaml

from config import Config, PipelineConfig, derive_seed, load_pipeline_config
from errors import ConfigurationError


def test_environment_configuration():
    assert Config.validate_config()
    original = Config.LOG_LEVEL
    try:
        Config.LOG_LEVEL = 'LOUD'
        try:
            Config.validate_config()
            assert False, 'unknown log level should fail'
        except ValueError as e:
            assert 'LOG_LEVEL' in str(e)
    finally:
        Config.LOG_LEVEL = original


def test_yaml_and_overrides():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, 'pipeline.yaml')
        with open(path, 'w') as f:
            yaml.safe_dump({'seed': 7, 'clustering': {'k': 2}, 'classifier': {'rf': {'n_trees': 50}}}, f)
        config = load_pipeline_config(path, {'classifier.kind': 'cnn_lstm', 'fuzzy.grid': 'identity',
                                             'output_dir': None})
    assert config.seed == 7
    assert config.clustering.k == 2 and config.clustering.restarts == 10
    assert config.classifier.kind == 'cnn_lstm' and config.classifier.rf == {'n_trees': 50}
    assert config.fuzzy.grid == 'identity'
    assert config.output_dir == Config.OUTPUT_DIR
    assert config.validate()


def test_seed_is_mandatory_and_keys_are_checked():
    try:
        load_pipeline_config(None, {})
        assert False
    except ConfigurationError as e:
        assert e.exit_code == 1
    assert load_pipeline_config(None, {'seed': 1}).seed == 1
    try:
        load_pipeline_config(None, {'seed': 1, 'clustering.kk': 3})
        assert False
    except ConfigurationError as e:
        assert 'kk' in str(e)


def test_invalid_values_are_listed():
    config = PipelineConfig(seed=1)
    config.clustering.k = 4
    config.split.train_ratio = 1.0
    config.fuzzy.grid = [[0.1, 1.2]]
    try:
        config.validate()
        assert False
    except ConfigurationError as e:
        for fragment in ('clustering.k', 'split.train_ratio', 'fuzzy.grid'):
            assert fragment in str(e)

    missing = PipelineConfig(seed=1, input_dir='/nonexistent/recordings')
    assert missing.validate()
    try:
        missing.validate(require_input=True)
        assert False
    except ConfigurationError:
        pass


def test_config_hash_ignores_locations():
    a = PipelineConfig(seed=1, input_dir='a', output_dir='x')
    b = PipelineConfig(seed=1, input_dir='b', output_dir='y')
    assert a.config_hash() == b.config_hash()
    assert len(a.config_hash()) == 64
    assert PipelineConfig(seed=2).config_hash() != a.config_hash()


def test_derived_seeds():
    assert derive_seed(42, 'split') == derive_seed(42, 'split')
    assert derive_seed(42, 'split') != derive_seed(42, 'rf')
    assert derive_seed(42, 'split') != derive_seed(43, 'split')
    assert 0 <= derive_seed(0, 'kmeans') < 2 ** 63


if __name__ == "__main__":
    print("🧪 Testing Lane-Change Pipeline Configuration")
    print("=" * 50)
    tests = [(name, fn) for name, fn in sorted(globals().items()) if name.startswith('test_') and callable(fn)]
    failed = 0
    for name, fn in tests:
        try:
            fn()
            print(f"✅ {name}")
        except Exception as e:
            failed += 1
            print(f"❌ {name}: {e!r}")
    print("\n" + "=" * 50)
    if failed:
        print("❌ Some checks failed. Verify your .env file and pipeline YAML.")
    else:
        print("🎉 All checks passed! Your configuration is ready.")
    sys.exit(1 if failed else 0)
