#!/usr/bin/env python3
"""
Tests for style-conditioned fuzzification and dataset variants
"""

import sys

import numpy as np

from errors import ConfigurationError
from feature_builder import AGGREGATE_NAMES, FEATURE_KINDS, FEATURE_NAMES, SequenceSample, DISTANCE, SPEED
from fuzzifier import (AGGREGATE, SEQUENCE, STYLE_COLUMNS, DatasetVariant, FeatureSample, FuzzyCoefficients,
                       build_dataset_variant, coefficient_grid, column_factors, fuzzify_features, resolve_grid)
from style_clustering import DrivingStyle, kmeans_fit

STYLES = [DrivingStyle.CAUTIOUS, DrivingStyle.GENERAL, DrivingStyle.AGGRESSIVE]


def make_samples(n_pairs=6, seed=0):
    rng = np.random.default_rng(seed)
    samples = []
    for pair in range(n_pairs):
        style = STYLES[pair % 3].value
        for label in (1, 0):
            samples.append(SequenceSample(values=rng.uniform(1.0, 40.0, size=(50, 16)), label=label, style=style,
                                          pair_id=pair, recording_id=1, track_id=pair + 1))
    return samples


def columns_of(kind):
    return [j for j, name in enumerate(FEATURE_NAMES) if FEATURE_KINDS[name] == kind]


def test_zero_coefficients_reproduce_the_raw_dataset():
    samples = make_samples()
    bird = build_dataset_variant(samples, DatasetVariant.bird())
    same = build_dataset_variant(samples, DatasetVariant.fuzzy(0.0, 0.0))
    assert np.array_equal(bird.X, same.X)
    assert np.array_equal(bird.y, same.y)
    assert same.variant.tag == 'F_0_0'

    seq_bird = build_dataset_variant(samples, DatasetVariant.bird(), form=SEQUENCE)
    seq_same = build_dataset_variant(samples, DatasetVariant.fuzzy(0.0, 0.0), form=SEQUENCE)
    assert np.array_equal(seq_bird.X, seq_same.X)


def test_general_rows_never_change():
    samples = make_samples()
    bird = build_dataset_variant(samples, DatasetVariant.bird())
    general = [i for i, s in enumerate(samples) if s.style == 'general']
    for coeffs in coefficient_grid():
        fuzzy = build_dataset_variant(samples, DatasetVariant.fuzzy(coeffs.a, coeffs.b))
        assert np.array_equal(fuzzy.X[general], bird.X[general]), coeffs.tag


def test_cautious_and_aggressive_scaling():
    samples = make_samples()
    bird = build_dataset_variant(samples, DatasetVariant.bird())
    fuzzy = build_dataset_variant(samples, DatasetVariant.fuzzy(0.3, 0.2))
    distance = columns_of(DISTANCE)
    speed = columns_of(SPEED)
    accel = [j for j in range(16) if j not in distance + speed]
    for i, sample in enumerate(samples):
        for offset in (0, 16):
            d, v, a = (np.array(c) + offset for c in (distance, speed, accel))
            if sample.style == 'cautious':
                assert np.allclose(fuzzy.X[i, d], 0.7 * bird.X[i, d])
                assert np.allclose(fuzzy.X[i, v], 1.2 * bird.X[i, v])
            elif sample.style == 'aggressive':
                assert np.allclose(fuzzy.X[i, d], 1.3 * bird.X[i, d])
                assert np.allclose(fuzzy.X[i, v], 0.8 * bird.X[i, v])
            assert np.array_equal(fuzzy.X[i, a], bird.X[i, a])


def test_perception_is_monotone_in_the_coefficients():
    rng = np.random.default_rng(11)
    distance = np.array(columns_of(DISTANCE) * 2) + np.repeat([0, 16], len(columns_of(DISTANCE)))
    speed = np.array(columns_of(SPEED) * 2) + np.repeat([0, 16], len(columns_of(SPEED)))
    accel = np.array([j for j in range(32) if j not in set(distance) | set(speed)])
    for case in range(10000):
        a, b = rng.uniform(0.0, 0.99, size=2)
        a2, b2 = rng.uniform(a, 0.99), rng.uniform(b, 0.99)
        sample = FeatureSample(rng.uniform(0.01, 60.0, size=32), AGGREGATE)
        raw = sample.values
        general = fuzzify_features(sample, DrivingStyle.GENERAL, FuzzyCoefficients(a, b)).values
        assert np.array_equal(general, raw), case
        low = {s: fuzzify_features(sample, s, FuzzyCoefficients(a, b)).values for s in STYLES[::2]}
        high = {s: fuzzify_features(sample, s, FuzzyCoefficients(a2, b2)).values for s in STYLES[::2]}
        cautious, aggressive = DrivingStyle.CAUTIOUS, DrivingStyle.AGGRESSIVE
        assert (high[cautious][distance] <= low[cautious][distance]).all(), case
        assert (low[cautious][distance] <= raw[distance]).all(), case
        assert (high[aggressive][distance] >= low[aggressive][distance]).all(), case
        assert (low[aggressive][distance] >= raw[distance]).all(), case
        assert (high[cautious][speed] >= low[cautious][speed]).all(), case
        assert (low[cautious][speed] >= raw[speed]).all(), case
        assert (high[aggressive][speed] <= low[aggressive][speed]).all(), case
        assert (low[aggressive][speed] <= raw[speed]).all(), case
        assert np.allclose(low[cautious][distance], (1 - a) * raw[distance], rtol=1e-12, atol=0)
        assert np.allclose(low[aggressive][speed], (1 - b) * raw[speed], rtol=1e-12, atol=0)
        for style in (cautious, aggressive):
            assert np.array_equal(low[style][accel], raw[accel]), case


def test_own_speed_can_be_left_alone():
    coeffs = FuzzyCoefficients(0.5, 0.5)
    on = column_factors(DrivingStyle.CAUTIOUS, coeffs, fuzz_own_speed=True)
    off = column_factors(DrivingStyle.CAUTIOUS, coeffs, fuzz_own_speed=False)
    for name in ('vy_sv', 'vx_sv'):
        j = FEATURE_NAMES.index(name)
        assert on[j] == 1.5 and off[j] == 1.0
    j = FEATURE_NAMES.index('vy_clv')
    assert on[j] == off[j] == 1.5


def test_style_one_hot_columns():
    samples = make_samples()
    data = build_dataset_variant(samples, DatasetVariant.bird_with_style())
    assert data.X.shape == (len(samples), 35)
    assert data.feature_names[-3:] == STYLE_COLUMNS
    assert data.feature_names[:32] == AGGREGATE_NAMES
    for i, sample in enumerate(samples):
        one_hot = data.X[i, 32:]
        assert one_hot.sum() == 1.0
        assert data.feature_names[32 + int(np.argmax(one_hot))] == f'style_{sample.style}'


def test_style_variant_has_no_sequence_form():
    try:
        build_dataset_variant(make_samples(), DatasetVariant.bird_with_style(), form=SEQUENCE)
        assert False
    except ConfigurationError:
        pass


def test_styles_come_from_the_cluster_model():
    samples = make_samples()
    points = np.array([[0.5, 0.3, 2.5], [1.5, 0.1, 1.2], [2.5, 0.05, 0.8]])
    blobs = np.vstack([p + np.random.default_rng(i).normal(scale=0.01, size=(10, 3)) for i, p in enumerate(points)])
    model = kmeans_fit(blobs, k=3, seed=0)
    for sample in samples:
        sample.style = None
        sample.style_point = points[sample.pair_id % 3]
    data = build_dataset_variant(samples, DatasetVariant.fuzzy(0.1, 0.1), cluster_model=model)
    assert data.styles[:6] == ['aggressive', 'aggressive', 'cautious', 'cautious', 'general', 'general']

    try:
        build_dataset_variant(samples, DatasetVariant.fuzzy(0.1, 0.1))
        assert False, 'fuzzy datasets need styles'
    except ConfigurationError:
        pass
    assert build_dataset_variant(samples, DatasetVariant.bird()).styles is None


def test_grid_resolution():
    grid = resolve_grid('full')
    assert len(grid) == 81
    assert (grid[0].a, grid[0].b) == (0.1, 0.1)
    assert (grid[1].a, grid[1].b) == (0.1, 0.2)
    assert (grid[-1].a, grid[-1].b) == (0.9, 0.9)
    assert resolve_grid('identity') == [FuzzyCoefficients(0.0, 0.0)]
    assert resolve_grid([[0.2, 0.3]]) == [FuzzyCoefficients(0.2, 0.3)]
    for bad in ('half', [[1.0, 0.0]], [['x', 0.1]]):
        try:
            resolve_grid(bad)
            assert False, bad
        except ConfigurationError:
            pass


def test_variant_tags_round_trip():
    for variant in (DatasetVariant.bird(), DatasetVariant.bird_with_style(), DatasetVariant.fuzzy(0.3, 0.7)):
        assert DatasetVariant.from_tag(variant.tag) == variant
    assert DatasetVariant.fuzzy(0.3, 0.7).tag == 'F_0.3_0.7'
    for bad in (lambda: FuzzyCoefficients(1.0, 0.0), lambda: FuzzyCoefficients(0.1, -0.1),
                lambda: DatasetVariant.from_tag('Fuzzy')):
        try:
            bad()
            assert False
        except ValueError:
            pass


def test_aggregate_table_export():
    data = build_dataset_variant(make_samples(n_pairs=2), DatasetVariant.bird())
    table = data.to_frame()
    assert list(table.columns[:4]) == ['pair_id', 'recording_id', 'track_id', 'label']
    assert list(table['label']) == [1, 0, 1, 0]
    manifest = data.manifest('abc')
    assert manifest['rows'] == 4 and manifest['label_counts'] == {'0': 2, '1': 2}
    assert manifest['cluster_model_hash'] == 'abc'


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
