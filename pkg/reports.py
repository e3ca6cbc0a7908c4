"""
Campaign reports: coverage table, exception table, search summary and an
HTML page with the OLC trend chart.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import pandas as pd
import plotly.graph_objects as go

from config import REPORT_TEMPLATE
from op_coverage import CoverageState, coverage_table
from triage import ExceptionRegistry
from utils.logger import setup_logger

logger = setup_logger(__name__)

COVERAGE_CSV = 'coverage_table.csv'
EXCEPTIONS_CSV = 'exceptions_table.csv'
SEARCH_CSV = 'search_summary.csv'
REPORT_HTML = 'report.html'

TRACE_COLUMNS = ['round', 'blocks', 'expanded', 'generated', 'new_exceptions', 'reward', 'olc', 'retained']
SEARCH_COLUMNS = ['Block', 'Rounds', 'Expanded', 'Rewarded', 'NewExceptions']


class CampaignReport:
    def __init__(self, registry: ExceptionRegistry, coverage: CoverageState,
                 trace: Optional[Sequence[Mapping[str, Any]]] = None, title: str = 'Fuzzing campaign'):
        self.registry = registry
        self.coverage = coverage
        self.title = title
        self.trace = pd.DataFrame(list(trace or []), columns=TRACE_COLUMNS)

    def coverage_frame(self) -> pd.DataFrame:
        return coverage_table(self.coverage).round(1)

    def exception_frame(self) -> pd.DataFrame:
        return self.registry.table()

    def exception_entries(self) -> pd.DataFrame:
        rows = [[e.status, e.detail.get('fault_op', e.detail.get('op')), e.key, e.first_model, e.count] for e in
                sorted(self.registry.entries.values(), key=lambda e: (e.status, e.first_model, e.key))]
        return pd.DataFrame(rows, columns=['Status', 'Operator', 'Key', 'FirstModel', 'Count'])

    def search_frame(self) -> pd.DataFrame:
        """Per block: rounds it was in the vocabulary, times expanded, rewarded rounds."""
        stats: Dict[str, List[int]] = {}
        for record in self.trace.to_dict('records'):
            for block in set(record['blocks'] or []):
                row = stats.setdefault(block, [0, 0, 0, 0])
                row[0] += 1
                row[2] += int(record['reward'] or 0)
                row[3] += int(record['new_exceptions'] or 0)
            if record['expanded'] is not None:
                stats.setdefault(record['expanded'], [0, 0, 0, 0])[1] += 1
        rows = [[block, *values] for block, values in sorted(stats.items())]
        return pd.DataFrame(rows, columns=SEARCH_COLUMNS)

    def generate_trend_chart(self) -> str:
        """HTML fragment (Plotly) with set OLC after each round."""
        if self.trace.empty:
            return ''
        fig = go.Figure()
        fig.add_trace(go.Scatter(x=self.trace['round'], y=self.trace['olc'] * 100, name='OLC',
                                 line=dict(color='#2E86C1')))
        fig.add_trace(go.Scatter(x=self.trace['round'], y=self.trace['new_exceptions'].cumsum(),
                                 name='Exceptions (dedup)', yaxis='y2', line=dict(color='#E67E22', dash='dash')))
        fig.update_layout(title='Coverage over rounds', xaxis_title='Round', yaxis_title='OLC (%)',
                          yaxis2=dict(title='Exceptions', overlaying='y', side='right'),
                          template='simple_white', height=400, margin=dict(t=40, r=40, l=40, b=40))
        return fig.to_html(full_html=False, include_plotlyjs='cdn')

    def generate_summary_html(self) -> str:
        parts = ['<h3>Exceptions</h3>', self.exception_frame().to_html(index=False)]
        entries = self.exception_entries()
        if not entries.empty:
            parts.append(entries.to_html(index=False))
        parts += ['<h3>Operator-level coverage</h3>', self.coverage_frame().to_html(index=False)]
        chart = self.generate_trend_chart()
        if chart:
            parts += ['<div class="chart-container">', chart, '</div>']
        return '\n'.join(parts)

    def to_html(self) -> str:
        dedup = sum(self.registry.dedup_counts().values())
        raw = sum(self.registry.raw_counts().values())
        footer = f"{self.coverage.models} models retained; {dedup}/{raw} exceptions (deduplicated/total)"
        return REPORT_TEMPLATE.format(title=self.title, content=self.generate_summary_html(), footer=footer)


def emit_reports(registry: ExceptionRegistry, coverage: CoverageState, out_dir: Path,
                 trace: Optional[Sequence[Mapping[str, Any]]] = None,
                 title: str = 'Fuzzing campaign') -> Dict[str, Path]:
    """Write the report files into ``out_dir`` and return their paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = CampaignReport(registry, coverage, trace, title)
    paths = {
        'coverage': out_dir / COVERAGE_CSV,
        'exceptions': out_dir / EXCEPTIONS_CSV,
        'search': out_dir / SEARCH_CSV,
        'html': out_dir / REPORT_HTML,
    }
    report.coverage_frame().to_csv(paths['coverage'], index=False)
    report.exception_frame().to_csv(paths['exceptions'], index=False)
    report.search_frame().to_csv(paths['search'], index=False)
    paths['html'].write_text(report.to_html(), encoding='utf-8')
    logger.info("Reports written to %s", out_dir)
    return paths


def read_jsonl(path: Path) -> List[Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        return []
    return [json.loads(line) for line in path.read_text(encoding='utf-8').splitlines() if line.strip()]
