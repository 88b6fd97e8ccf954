import hashlib
import json
import logging
import os
import tempfile
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

PROVENANCE_PREFIX = '# provenance:'


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(',', ':'), default=_json_default)


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f'Object of type {type(value).__name__} is not JSON serializable')


def content_hash(data: Any) -> str:
    """SHA-256 of bytes, or of the canonical JSON of anything else"""
    payload = data if isinstance(data, (bytes, bytearray)) else canonical_json(data).encode('utf-8')
    return hashlib.sha256(payload).hexdigest()


class ReportWriter:
    """Writes run artifacts atomically, each stamped with the run's provenance"""

    def __init__(self, output_dir: str, config_hash: str, seed: int):
        self.logger = logging.getLogger(__name__)
        self.output_dir = output_dir
        self.config_hash = config_hash
        self.seed = seed

    @property
    def provenance(self) -> Dict[str, Any]:
        return {'config_hash': self.config_hash, 'seed': self.seed}

    def path(self, *parts: str) -> str:
        return os.path.join(self.output_dir, *parts)

    def _atomic_write(self, relative: str, payload: bytes) -> str:
        """Write to a temporary file in the target directory, then rename over the target"""
        target = self.path(relative)
        directory = os.path.dirname(target)
        os.makedirs(directory, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix='.tmp-', dir=directory)
        try:
            with os.fdopen(fd, 'wb') as f:
                f.write(payload)
            os.replace(tmp, target)
        except Exception:
            if os.path.exists(tmp):
                os.remove(tmp)
            raise
        self.logger.debug(f"Wrote {target} ({len(payload)} bytes)")
        return target

    def write_json(self, relative: str, data: Dict[str, Any]) -> str:
        document = dict(data)
        document['provenance'] = self.provenance
        text = json.dumps(document, sort_keys=True, indent=2, default=_json_default) + '\n'
        return self._atomic_write(relative, text.encode('utf-8'))

    def write_csv(self, relative: str, table: pd.DataFrame) -> str:
        """CSV with a leading provenance comment line; floats keep full precision"""
        header = f'{PROVENANCE_PREFIX} config_hash={self.config_hash} seed={self.seed}\n'
        body = table.to_csv(index=False, float_format='%.17g', lineterminator='\n')
        return self._atomic_write(relative, (header + body).encode('utf-8'))

    def write_text(self, relative: str, text: str) -> str:
        return self._atomic_write(relative, text.encode('utf-8'))

    def write_bytes(self, relative: str, payload: bytes) -> str:
        return self._atomic_write(relative, payload)

    def write_summary_markdown(self, relative: str, summary: Dict[str, Any], top: int = 5) -> str:
        """Human-readable run summary: leaderboard head, clusters and importance"""
        lines = ['# Lane-change prediction run', '',
                 f"- config hash: `{self.config_hash}`", f"- seed: {self.seed}", '']

        leaderboard = summary.get('leaderboard') or []
        if leaderboard:
            lines += [f'## Leaderboard (top {min(top, len(leaderboard))} by test accuracy)', '',
                      '| Rank | Variant | Test accuracy | Test F1 | Test AUC | Train accuracy |',
                      '|------|---------|---------------|---------|----------|----------------|']
            for row in leaderboard[:top]:
                lines.append(f"| {row['rank']} | {row['variant']} | {_fmt(row.get('test_accuracy'))} | "
                             f"{_fmt(row.get('test_f1'))} | {_fmt(row.get('test_auc'))} | "
                             f"{_fmt(row.get('train_accuracy'))} |")
            failed = [row['variant'] for row in leaderboard if row.get('status') != 'ok']
            if failed:
                lines += ['', f"Failed runs: {', '.join(failed)}"]
            lines.append('')

        clusters = summary.get('clusters') or []
        if clusters:
            lines += ['## Driving styles', '',
                      '| Style | n | Duration (s) | Lateral accel (m/s²) | Lateral speed (m/s) |',
                      '|-------|---|--------------|----------------------|---------------------|']
            for row in clusters:
                lines.append(f"| {row['style']} | {row['n']} | {_pm(row, 'duration')} | "
                             f"{_pm(row, 'lat_accel')} | {_pm(row, 'lat_speed')} |")
            lines.append('')

        importance = summary.get('importance') or []
        if importance:
            lines += ['## Feature importance', '', '| Feature | Importance |', '|---------|------------|']
            for row in importance:
                lines.append(f"| {row['feature']} | {_fmt(row['importance'])} |")
            lines.append('')

        return self.write_text(relative, '\n'.join(lines))


def _fmt(value) -> str:
    if value is None or (isinstance(value, float) and np.isnan(value)):
        return 'n/a'
    return f'{value:.3f}'


def _pm(row: Dict[str, Any], feature: str) -> str:
    return f"{_fmt(row.get(f'{feature}_mean'))} ± {_fmt(row.get(f'{feature}_std'))}"


def read_csv(path: str) -> pd.DataFrame:
    """Read a CSV written by ReportWriter, skipping the provenance line"""
    return pd.read_csv(path, skiprows=_provenance_rows(path))


def _provenance_rows(path: str) -> List[int]:
    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline()
    return [0] if first.startswith(PROVENANCE_PREFIX) else []


def read_provenance(path: str) -> Optional[Dict[str, str]]:
    """config_hash and seed from a CSV provenance line or a JSON provenance object"""
    if path.endswith('.json'):
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f).get('provenance')
    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline().strip()
    if not first.startswith(PROVENANCE_PREFIX):
        return None
    fields = dict(item.split('=', 1) for item in first[len(PROVENANCE_PREFIX):].split())
    return fields


def missing_files(root: str, relatives: Sequence[str]) -> List[str]:
    return [r for r in relatives if not os.path.exists(os.path.join(root, r))]
