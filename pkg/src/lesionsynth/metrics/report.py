"""Table-shaped metric reports with JSON/CSV writers and schema checks."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import jsonschema

TABLE_COLUMNS = {
    "table1": ("Data for calculations", "FID", "LPIPS", "MS-SSIM"),
    "table2_cls": ("Models", "Train Dataset", "Accuracy", "Sensitivity", "Precision", "F1score"),
    "table2_seg": ("Models", "Train Dataset", "Dice", "IoU", "ASD", "HD"),
    "table3_cls": ("Models", "Dataset", "Accuracy", "Sensitivity", "Precision", "F1score"),
    "table3_seg": ("Models", "Dataset", "Dice", "IoU"),
}
# metrics where smaller is better; everything else is larger-is-better
LOWER_IS_BETTER = {"FID", "LPIPS", "ASD", "HD"}
NULLABLE = {"ASD", "HD"}


class ReportError(ValueError):
    pass


def key_columns(kind: str) -> tuple[str, ...]:
    cols = TABLE_COLUMNS[kind]
    return cols[:1] if kind == "table1" else cols[:2]


def metric_columns(kind: str) -> tuple[str, ...]:
    return TABLE_COLUMNS[kind][len(key_columns(kind)) :]


@dataclass
class MetricReport:
    """One table's worth of rows plus the context needed to reproduce it.

    ``undefined`` counts, per metric column, samples whose value could not be
    computed and were left out of the mean. A metric cell is ``None`` only
    when no sample was defined.
    """

    kind: str
    rows: list[dict]
    datasets: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    undefined: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TABLE_COLUMNS:
            raise ReportError(f"unknown report kind {self.kind!r}; expected one of {sorted(TABLE_COLUMNS)}")
        cols = TABLE_COLUMNS[self.kind]
        for i, row in enumerate(self.rows):
            if set(row) != set(cols):
                raise ReportError(f"row {i} has columns {sorted(row)}, expected {list(cols)}")
            for c in metric_columns(self.kind):
                v = row[c]
                if v is None:
                    if c not in NULLABLE:
                        raise ReportError(f"row {i}: {c} may not be undefined")
                elif not math.isfinite(float(v)):
                    raise ReportError(f"row {i}: {c} is not finite ({v})")

    @property
    def columns(self) -> tuple[str, ...]:
        return TABLE_COLUMNS[self.kind]

    def to_dict(self) -> dict:
        rows = [{c: (None if r[c] is None else r[c] if c in key_columns(self.kind) else float(r[c])) for c in self.columns} for r in self.rows]
        return {
            "kind": self.kind,
            "columns": list(self.columns),
            "rows": rows,
            "datasets": self.datasets,
            "config": self.config,
            "extra": self.extra,
            "undefined": {k: int(v) for k, v in self.undefined.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        validate_report(d)
        return cls(d["kind"], list(d["rows"]), d.get("datasets", {}), d.get("config", {}), d.get("extra", {}), d.get("undefined", {}))


def load_schema(kind: str) -> dict:
    text = resources.files("lesionsynth").joinpath("schemas", f"{kind}.schema.json").read_text()
    return json.loads(text)


def validate_report(doc: dict) -> None:
    kind = doc.get("kind") if isinstance(doc, dict) else None
    if kind not in TABLE_COLUMNS:
        raise ReportError(f"unknown report kind {kind!r}")
    try:
        jsonschema.validate(doc, load_schema(kind))
    except jsonschema.ValidationError as exc:
        raise ReportError(f"{kind} report does not match its schema: {exc.message}") from None


def write_report(report: MetricReport, out_dir, stem: Optional[str] = None) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and ``<stem>.csv``; the JSON is schema-checked first."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or report.kind
    doc = report.to_dict()
    validate_report(doc)
    jpath, cpath = out_dir / f"{stem}.json", out_dir / f"{stem}.csv"
    jpath.write_text(json.dumps(doc, indent=2, default=str))
    with cpath.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(report.columns))
        w.writeheader()
        for r in doc["rows"]:
            w.writerow({k: "" if v is None else v for k, v in r.items()})
    return jpath, cpath


def read_report(path) -> MetricReport:
    return MetricReport.from_dict(json.loads(Path(path).read_text()))


def render_markdown(report: MetricReport, precision: int = 3, bold_best: bool = True) -> str:
    """Markdown table; within each model group the best value per metric is bold."""
    kind, cols = report.kind, report.columns
    keys, metrics = key_columns(kind), metric_columns(kind)
    group_of = (lambda r: r[keys[0]]) if len(keys) == 2 else (lambda r: "")
    best: dict = {}
    if bold_best:
        for r in report.rows:
            for c in metrics:
                v = r[c]
                if v is None:
                    continue
                g = (group_of(r), c)
                if g not in best or (v < best[g] if c in LOWER_IS_BETTER else v > best[g]):
                    best[g] = v
    lines = ["| " + " | ".join(cols) + " |", "|" + "|".join("---" for _ in cols) + "|"]
    for r in report.rows:
        cells = []
        for c in cols:
            v = r[c]
            if c in keys:
                cells.append(str(v))
            elif v is None:
                cells.append("undefined")
            else:
                s = f"{v:.{precision}f}"
                cells.append(f"**{s}**" if bold_best and best.get((group_of(r), c)) == v else s)
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines)


def merge_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Concatenate rows of same-kind reports (e.g. one per model)."""
    if not reports:
        raise ReportError("nothing to merge")
    kind = reports[0].kind
    if any(r.kind != kind for r in reports):
        raise ReportError("cannot merge reports of different kinds")
    undefined: dict = {}
    for r in reports:
        for k, v in r.undefined.items():
            undefined[k] = undefined.get(k, 0) + v
    return MetricReport(
        kind,
        [row for r in reports for row in r.rows],
        datasets={k: v for r in reports for k, v in r.datasets.items()},
        config=reports[0].config,
        extra={"parts": [r.extra for r in reports]},
        undefined=undefined,
    )
