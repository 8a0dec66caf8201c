"""Report emitters: CSV tables, JSON-lines records and the rendered text report."""
import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

from jinja2 import Environment, FileSystemLoader, StrictUndefined

from config import RunConfig
from schemas import ResolvedRunConfigSchema

logger = logging.getLogger(__name__)

TEMPLATE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "templates")
REPORT_TEMPLATE = "report.txt.j2"


def _cell(value):
    if isinstance(value, float):
        return f"{value:.4f}"
    return value


@dataclass
class Table:
    name: str
    columns: List[str]
    rows: List[Dict[str, Any]]
    title: Optional[str] = None

    def formatted_rows(self) -> List[List[str]]:
        return [[str(_cell(row.get(column, ""))) for column in self.columns] for row in self.rows]


@dataclass
class Report:
    """One command's output: tables, structured records and free-text notes"""
    title: str
    run_config: Optional[RunConfig] = None
    tables: List[Table] = field(default_factory=list)
    records: Dict[str, List[dict]] = field(default_factory=dict)
    headline: Dict[str, Any] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    def add_table(self, name: str, columns: Sequence[str], rows: Sequence[Dict[str, Any]], title: str = None):
        self.tables.append(Table(name, list(columns), list(rows), title or name))

    def add_records(self, name: str, schema, objs, many: bool = True):
        dumped = schema.dump(objs, many=many)
        self.records.setdefault(name, []).extend(dumped if many else [dumped])


def render_report(report: Report, template_path: str = REPORT_TEMPLATE) -> str:
    """Render the human-readable report"""
    try:
        env = Environment(loader=FileSystemLoader(TEMPLATE_DIR), undefined=StrictUndefined,
                          trim_blocks=True, lstrip_blocks=True)
        template = env.get_template(template_path)
        config = ResolvedRunConfigSchema().dump(asdict(report.run_config)) if report.run_config else {}
        return template.render(report=report, run_config=config, cell=_cell)
    except Exception as e:
        logger.error(f"Failed to render report template {template_path}: {e}")
        raise


def write_table(stream, table: Table):
    writer = csv.DictWriter(stream, fieldnames=table.columns, extrasaction="ignore")
    writer.writeheader()
    for row in table.rows:
        writer.writerow(row)


def table_to_csv(table: Table) -> str:
    output = io.StringIO()
    write_table(output, table)
    return output.getvalue()


def write_records(stream, records: Sequence[dict]):
    for record in records:
        stream.write(json.dumps(record, sort_keys=True) + "\n")


def records_as_json(report: Report) -> str:
    config = ResolvedRunConfigSchema().dump(asdict(report.run_config)) if report.run_config else {}
    payload = {"title": report.title, "run_config": config, "headline": report.headline, "records": report.records}
    return json.dumps(payload, indent=2, sort_keys=True)


def save_report(report: Report, out_dir: str) -> List[str]:
    """Write every table as CSV, every record group as JSON lines, plus report.txt"""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for table in report.tables:
        path = os.path.join(out_dir, f"{table.name}.csv")
        with open(path, "w", newline="", encoding="utf-8") as handle:
            write_table(handle, table)
        written.append(path)
    for name, records in report.records.items():
        path = os.path.join(out_dir, f"{name}.jsonl")
        with open(path, "w", encoding="utf-8") as handle:
            write_records(handle, records)
        written.append(path)
    path = os.path.join(out_dir, "report.txt")
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(render_report(report))
    written.append(path)
    logger.info(f"Wrote {len(written)} files to {out_dir}")
    return written
