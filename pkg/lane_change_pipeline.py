#!/usr/bin/env python3
import argparse
import json
import logging
import os
import re
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import Config, PipelineConfig, derive_seed, load_pipeline_config
from errors import ConfigurationError, DataError, PipelineError
from evaluation import ClassifierSpec, ExperimentResult, Leaderboard, run_experiment, sweep
from feature_builder import FeatureBuilder, SequenceSample, encode_tensors, samples_from_table
from fuzzifier import AGGREGATE, DatasetVariant, ModelDataset, build_dataset_variant, resolve_grid
from highd_reader import HighDReader
from lane_change_extractor import LaneChangeExtractor, LcDecisionDataset
from report_writer import ReportWriter, content_hash, missing_files, read_csv
from style_clustering import STYLE_FEATURE_NAMES, ClusterModel, assign_styles, cluster_report, kmeans_fit
from synth_generator import corpus, write_corpus

EXTRACT_DIR = 'extract'
CLUSTER_DIR = 'cluster'
DATASETS_DIR = 'datasets'
TRAIN_DIR = 'train'
SWEEP_DIR = 'sweep'
REPORT_DIR = 'report'

PAIR_COLUMNS = ['pair_id', 'recording_id', 'track_id', 't_lc', 't_s', 't_e', 'direction',
                'source_lane', 'target_lane'] + list(STYLE_FEATURE_NAMES)

# artifacts the report stage needs from a finished run
REPORT_INPUTS = [
    f'{EXTRACT_DIR}/manifest.json',
    f'{EXTRACT_DIR}/drops.json',
    f'{CLUSTER_DIR}/model.json',
    f'{CLUSTER_DIR}/report.csv',
    f'{SWEEP_DIR}/leaderboard.csv',
    f'{SWEEP_DIR}/manifest.json',
]

SUMMARY_KEYS = ('artifacts', 'clusters', 'drops', 'extraction', 'importance', 'leaderboard', 'best_run',
                'provenance')

TOP_N = 5


def run_slug(tag: str) -> str:
    """Directory-safe name of a variant tag (Bird&DS -> Bird_DS)"""
    return re.sub(r'[^A-Za-z0-9_.-]+', '_', tag)


class LanePipeline:
    """Stage orchestration for the lane-change prediction pipeline"""

    def __init__(self, config: PipelineConfig, require_input: bool = False):
        self.setup_logging()
        self.logger = logging.getLogger(__name__)

        try:
            Config.validate_config()
        except ValueError as e:
            self.logger.error(f"Configuration validation failed: {e}")
            raise ConfigurationError(str(e))
        config.validate(require_input=require_input)
        self.logger.info("Configuration validated successfully")

        self.config = config
        self.config_hash = config.config_hash()
        self.writer = ReportWriter(config.output_dir, self.config_hash, config.seed)
        self.logger.info(f"Pipeline initialized: config {self.config_hash[:12]}, seed {config.seed}, "
                         f"output {config.output_dir}")

    def setup_logging(self):
        """Setup logging configuration"""
        logging.basicConfig(
            level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            handlers=[
                logging.FileHandler(Config.LOG_FILE),
                logging.StreamHandler()
            ]
        )

    @property
    def spec(self) -> ClassifierSpec:
        c = self.config.classifier
        return ClassifierSpec.from_options(c.kind, c.rf, c.cnn_lstm, self.config.split.train_ratio, Config.N_JOBS)

    # ---- extract ------------------------------------------------------------------------------

    def extract(self) -> LcDecisionDataset:
        """Parse the input recordings and write the paired LC/LK window dataset"""
        self.logger.info(f"Extracting lane-change decisions from {self.config.input_dir}")
        if not os.path.isdir(self.config.input_dir):
            raise DataError(f'Input directory not found: {self.config.input_dir}')
        options = self.config.extraction
        recordings = HighDReader(options.split_frame_gaps).load_directory(self.config.input_dir, Config.N_JOBS)
        extractor = LaneChangeExtractor(options.window_seconds, Config.N_JOBS)
        dataset = extractor.build_lc_decision_dataset(recordings)
        if not dataset.pairs:
            self.logger.warning("No qualified lane changes were extracted")

        windows = FeatureBuilder().dataset_table(dataset)
        pairs = pd.DataFrame([{
            'pair_id': p.pair_id, 'recording_id': p.recording_id, 'track_id': p.event.track_id,
            't_lc': p.event.t_lc, 't_s': p.event.t_s, 't_e': p.event.t_e, 'direction': p.event.direction,
            'source_lane': p.event.source_lane, 'target_lane': p.event.target_lane,
            'duration': p.style.duration, 'lat_accel': p.style.lat_accel, 'lat_speed': p.style.lat_speed,
        } for p in dataset.pairs], columns=PAIR_COLUMNS)

        self.writer.write_csv(f'{EXTRACT_DIR}/windows.csv', windows)
        self.writer.write_csv(f'{EXTRACT_DIR}/pairs.csv', pairs)
        self.writer.write_json(f'{EXTRACT_DIR}/drops.json', {
            'transitions': dataset.n_transitions,
            'events': len(dataset.events),
            'qualified_pairs': len(dataset.pairs),
            'drops': dict(sorted(dataset.drops.items())),
        })
        self.writer.write_json(f'{EXTRACT_DIR}/manifest.json', {
            'stage': 'extract',
            'recordings': [r.meta.recording_id for r in recordings],
            'window_seconds': options.window_seconds,
            'pairs': len(dataset.pairs),
            'windows': 2 * len(dataset.pairs),
            'windows_hash': content_hash(windows.to_csv(index=False, float_format='%.17g').encode('utf-8')),
        })
        self.logger.info(f"Extracted {len(dataset.pairs)} pairs from {len(recordings)} recordings")
        return dataset

    def _read_pairs(self) -> pd.DataFrame:
        path = self.writer.path(EXTRACT_DIR, 'pairs.csv')
        if not os.path.exists(path):
            raise DataError(f'Extracted dataset not found: {path} (run extract first)')
        return read_csv(path)

    def _read_samples(self) -> List[SequenceSample]:
        pairs = self._read_pairs()
        path = self.writer.path(EXTRACT_DIR, 'windows.csv')
        if not os.path.exists(path):
            raise DataError(f'Extracted windows not found: {path} (run extract first)')
        points = {int(row.pair_id): np.array([getattr(row, f) for f in STYLE_FEATURE_NAMES], dtype=np.float64)
                  for row in pairs.itertuples(index=False)}
        return samples_from_table(read_csv(path), points, window_seconds=self.config.extraction.window_seconds)

    # ---- cluster ------------------------------------------------------------------------------

    def cluster(self) -> ClusterModel:
        """Fit the driving-style model on the extracted style features"""
        pairs = self._read_pairs()
        options = self.config.clustering
        if len(pairs) < options.k:
            raise DataError(f'Clustering needs at least {options.k} lane changes, found {len(pairs)}')
        points = pairs[list(STYLE_FEATURE_NAMES)].to_numpy(dtype=np.float64)
        try:
            model = kmeans_fit(points, options.k, derive_seed(self.config.seed, 'kmeans'),
                               options.restarts, options.tol, options.max_iter)
        except ValueError as e:
            raise DataError(f'Clustering failed: {e}')

        styles = assign_styles(model, points)
        self.writer.write_json(f'{CLUSTER_DIR}/model.json', {'model': model.to_dict()})
        self.writer.write_csv(f'{CLUSTER_DIR}/report.csv', cluster_report(points, styles))
        self.writer.write_csv(f'{CLUSTER_DIR}/styles.csv', pd.DataFrame({
            'pair_id': pairs['pair_id'], 'style': [s.value for s in styles]}))
        self.logger.info(f"Clustered {len(points)} lane changes into {options.k} styles")
        return model

    def _read_cluster_model(self) -> Tuple[ClusterModel, str]:
        path = self.writer.path(CLUSTER_DIR, 'model.json')
        if not os.path.exists(path):
            raise DataError(f'Cluster model not found: {path} (run cluster first)')
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)['model']
        return ClusterModel.from_dict(data), content_hash(data)

    # ---- build-datasets -----------------------------------------------------------------------

    def _fuzzy_coefficients(self):
        fuzzy = self.config.fuzzy
        if fuzzy.coefficients is not None:
            return resolve_grid([fuzzy.coefficients])
        return resolve_grid(fuzzy.grid)

    def build_datasets(self) -> List[ModelDataset]:
        """Materialize Bird, Bird&DS (aggregate form) and the configured fuzzy variants"""
        samples = self._read_samples()
        model, model_hash = self._read_cluster_model()
        form = self.spec.form
        variants = [DatasetVariant.bird()]
        if form == AGGREGATE:
            variants.append(DatasetVariant.bird_with_style())
        variants += [DatasetVariant.fuzzy(c.a, c.b) for c in self._fuzzy_coefficients()]

        datasets = []
        index = []
        for variant in variants:
            dataset = build_dataset_variant(samples, variant, model, form, self.config.fuzzy.fuzz_own_speed)
            relative = f'{DATASETS_DIR}/{run_slug(variant.tag)}'
            if form == AGGREGATE:
                self.writer.write_csv(f'{relative}/dataset.csv', dataset.to_frame())
            else:
                self.writer.write_bytes(f'{relative}/dataset.lcts', encode_tensors({
                    'X': dataset.X, 'y': dataset.y, 'pair_id': dataset.pair_ids,
                    'recording_id': dataset.recording_ids, 'track_id': dataset.track_ids,
                }))
            self.writer.write_json(f'{relative}/manifest.json', dataset.manifest(model_hash))
            index.append({'tag': variant.tag, 'path': relative, 'rows': len(dataset)})
            datasets.append(dataset)

        self.writer.write_json(f'{DATASETS_DIR}/manifest.json', {
            'form': form, 'cluster_model_hash': model_hash, 'variants': index})
        self.logger.info(f"Built {len(datasets)} {form} datasets")
        return datasets

    # ---- train / sweep ------------------------------------------------------------------------

    def _configured_variant(self) -> DatasetVariant:
        if self.config.variant == 'bird':
            return DatasetVariant.bird()
        if self.config.variant == 'bird_with_style':
            return DatasetVariant.bird_with_style()
        if self.config.fuzzy.coefficients is None:
            raise ConfigurationError('variant fuzzy needs fuzzy.coefficients [a, b] for train')
        a, b = self.config.fuzzy.coefficients
        return DatasetVariant.fuzzy(a, b)

    def train(self) -> ExperimentResult:
        """Train and evaluate one classifier on the configured variant"""
        spec = self.spec
        samples = self._read_samples()
        variant = self._configured_variant()
        model = None
        if variant.uses_styles:
            model, _ = self._read_cluster_model()
        dataset = build_dataset_variant(samples, variant, model, spec.form, self.config.fuzzy.fuzz_own_speed)
        result = run_experiment(dataset, spec, self.config.seed)
        self._write_run(f'{TRAIN_DIR}/{run_slug(variant.tag)}', result)
        return result

    def sweep(self) -> Leaderboard:
        """Every grid point plus the baselines on one shared split; writes the leaderboard"""
        spec = self.spec
        samples = self._read_samples()
        model, model_hash = self._read_cluster_model()
        grid = resolve_grid(self.config.fuzzy.grid)
        board = sweep(samples, grid, spec, self.config.seed, model, include_baselines=True,
                      n_jobs=Config.N_JOBS, fuzz_own_speed=self.config.fuzzy.fuzz_own_speed)

        for result in board.results:
            self._write_run(f'{SWEEP_DIR}/runs/{run_slug(result.variant.tag)}', result)
        table = board.to_frame()
        self.writer.write_csv(f'{SWEEP_DIR}/leaderboard.csv', table)
        self.writer.write_json(f'{SWEEP_DIR}/manifest.json', {
            'stage': 'sweep',
            'classifier': spec.kind,
            'grid_points': len(grid),
            'runs': len(board.results),
            'failed': [r.variant.tag for r in board.failures],
            'cluster_model_hash': model_hash,
        })

        top = board.top(TOP_N)
        print(f"\nTop {len(top)} of {len(table)} runs ({spec.kind}, by test accuracy):")
        print(top[['rank', 'variant', 'test_accuracy', 'test_f1', 'test_auc', 'status']].to_string(index=False))
        return board

    def _write_run(self, relative: str, result: ExperimentResult):
        """Manifest, ROC points, importance or learning curve, and the model of one run"""
        manifest = result.manifest()
        if result.ok:
            if result.roc is not None:
                self.writer.write_csv(f'{relative}/roc.csv', result.roc.to_frame())
            if result.importance is not None:
                self.writer.write_csv(f'{relative}/importance.csv', pd.DataFrame({
                    'feature': list(result.importance), 'importance': list(result.importance.values())}))
                manifest['grouped_importance'] = result.grouped_importance
            if result.history is not None:
                self.writer.write_csv(f'{relative}/history.csv', result.history.to_frame())
            kind, payload = result.model_payload()
            if kind == 'json':
                self.writer.write_json(f'{relative}/model.json', {'model': payload})
            else:
                self.writer.write_bytes(f'{relative}/model.lcts', payload)
            if result.scaler is not None:
                manifest['scaler'] = result.scaler.to_dict()
        self.writer.write_json(f'{relative}/manifest.json', manifest)

    # ---- report -------------------------------------------------------------------------------

    def report(self, run_dir: Optional[str] = None) -> Dict[str, Any]:
        """Consolidate a finished run into report/summary.json and report/summary.md"""
        root = run_dir or self.config.output_dir
        missing = missing_files(root, REPORT_INPUTS)
        if missing:
            raise DataError(f"Run directory {root} is missing artifacts: {', '.join(missing)}")
        writer = self.writer if root == self.config.output_dir else ReportWriter(root, self.config_hash,
                                                                                 self.config.seed)

        def load_json(relative):
            with open(os.path.join(root, relative), 'r', encoding='utf-8') as f:
                return json.load(f)

        leaderboard = read_csv(os.path.join(root, SWEEP_DIR, 'leaderboard.csv'))
        leaderboard = leaderboard.astype(object).where(leaderboard.notna(), None)
        rows = leaderboard.to_dict(orient='records')

        best_run = None
        importance = []
        if rows and rows[0].get('status') == 'ok':
            best_dir = os.path.join(SWEEP_DIR, 'runs', run_slug(rows[0]['variant']))
            best_run = load_json(os.path.join(best_dir, 'manifest.json'))
            best_run.pop('provenance', None)
            roc_path = os.path.join(root, best_dir, 'roc.csv')
            if os.path.exists(roc_path):
                best_run['roc'] = read_csv(roc_path).to_dict(orient='list')
            importance_path = os.path.join(root, best_dir, 'importance.csv')
            if os.path.exists(importance_path):
                table = read_csv(importance_path).sort_values('importance', ascending=False, kind='mergesort')
                importance = table.to_dict(orient='records')

        clusters = read_csv(os.path.join(root, CLUSTER_DIR, 'report.csv')).to_dict(orient='records')
        drops = load_json(f'{EXTRACT_DIR}/drops.json')
        drops.pop('provenance', None)
        extraction = load_json(f'{EXTRACT_DIR}/manifest.json')
        extraction.pop('provenance', None)

        artifacts = {}
        for relative in REPORT_INPUTS:
            with open(os.path.join(root, relative), 'rb') as f:
                artifacts[relative] = content_hash(f.read())

        summary = {
            'artifacts': artifacts,
            'clusters': clusters,
            'drops': drops,
            'extraction': extraction,
            'importance': importance,
            'leaderboard': rows,
            'best_run': best_run,
        }
        writer.write_json(f'{REPORT_DIR}/summary.json', summary)
        writer.write_summary_markdown(f'{REPORT_DIR}/summary.md', summary, top=TOP_N)
        summary['provenance'] = writer.provenance
        self.logger.info(f"Wrote run summary to {os.path.join(root, REPORT_DIR)}")
        return summary

    # ---- synth --------------------------------------------------------------------------------

    def synth(self) -> List[str]:
        """Write the seeded synthetic HighD-format corpus into input_dir"""
        options = self.config.synth
        recordings = corpus(options.presets, derive_seed(self.config.seed, 'synth'), options.events_per_preset)
        paths = write_corpus(recordings, self.config.input_dir)
        truth = pd.DataFrame([{
            'recording_id': r.meta.recording_id, 'preset': r.preset, 'vehicle_id': c.vehicle_id,
            'direction': c.direction, 'source_lane': c.source_lane, 'target_lane': c.target_lane,
            't_lead': c.t_lead, 't_center': c.t_center, 't_trail': c.t_trail, 't_s': c.t_s, 't_e': c.t_e,
            'expected': c.expected,
        } for r in recordings for c in r.truth.changes])
        ReportWriter(self.config.input_dir, self.config_hash, self.config.seed).write_csv('ground_truth.csv', truth)
        self.logger.info(f"Synthetic corpus: {len(recordings)} recordings, {len(truth)} scripted changes")
        return paths


def validate_summary(summary: Dict[str, Any]) -> List[str]:
    """Problems with a summary document; empty when it has the published layout"""
    problems = [f'missing key: {k}' for k in SUMMARY_KEYS if k not in summary]
    if 'provenance' in summary and set(summary['provenance'] or {}) != {'config_hash', 'seed'}:
        problems.append('provenance must hold config_hash and seed')
    for row in summary.get('leaderboard') or []:
        if 'rank' not in row or 'variant' not in row:
            problems.append('leaderboard rows need rank and variant')
            break
    return problems


class _ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f'{self.prog}: error: {message}\n')


def parse_grid(text: Optional[str]):
    """'full', 'identity' or 'a:b,a:b,...'"""
    if text is None or text in ('full', 'identity'):
        return text
    try:
        return [[float(v) for v in item.split(':')] for item in text.split(',') if item]
    except ValueError:
        raise ConfigurationError(f"--grid must be 'full', 'identity' or a:b pairs, got '{text}'")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='pipeline YAML file (default: $LC_CONFIG_FILE when it exists)')
    common.add_argument('--seed', type=int)
    common.add_argument('--input-dir')
    common.add_argument('--output-dir')
    common.add_argument('--classifier', choices=('rf', 'cnn_lstm'))
    common.add_argument('--grid', help="'full', 'identity' or a:b pairs such as 0.1:0.2,0.5:0.5")

    parser = _ArgumentParser(prog='lane_change_pipeline', description='Lane-change decision prediction pipeline')
    commands = parser.add_subparsers(dest='command', required=True, parser_class=_ArgumentParser)
    commands.add_parser('extract', parents=[common], help='extract the paired LC/LK window dataset')
    commands.add_parser('cluster', parents=[common], help='fit the driving-style model')
    commands.add_parser('build-datasets', parents=[common], help='write Bird, Bird&DS and fuzzy datasets')
    commands.add_parser('train', parents=[common], help='train one classifier on the configured variant')
    commands.add_parser('sweep', parents=[common], help='fuzzy-coefficient sensitivity sweep')
    report = commands.add_parser('report', parents=[common], help='consolidated run summary')
    report.add_argument('run_dir', nargs='?', help='run directory (default: output_dir)')
    commands.add_parser('synth', parents=[common], help='write the synthetic corpus into input_dir')
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    path = args.config
    if path is None and os.path.exists(Config.CONFIG_FILE):
        path = Config.CONFIG_FILE
    overrides = {
        'seed': args.seed,
        'input_dir': args.input_dir,
        'output_dir': args.output_dir,
        'classifier.kind': args.classifier,
        'fuzzy.grid': parse_grid(args.grid),
    }
    return load_pipeline_config(path, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run one subcommand; returns the process exit code"""
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args)
        pipeline = LanePipeline(config)
        if args.command == 'extract':
            pipeline.extract()
        elif args.command == 'cluster':
            pipeline.cluster()
        elif args.command == 'build-datasets':
            pipeline.build_datasets()
        elif args.command == 'train':
            pipeline.train()
        elif args.command == 'sweep':
            pipeline.sweep()
        elif args.command == 'report':
            pipeline.report(args.run_dir)
        elif args.command == 'synth':
            pipeline.synth()
        return 0
    except PipelineError as e:
        logging.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logging.exception(f"{args.command} failed unexpectedly: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
