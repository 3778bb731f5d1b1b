"""
Report serialisation helpers: rate formatting, the transfer matrix CSV,
the full JSON document and the plain-text summary table.
"""

import csv
import io
import json
from dataclasses import asdict
from typing import Dict, List, Optional, Sequence

from taabench.models import TransferReport

NA = "NA"


def format_rate(value: Optional[float]) -> str:
    """ASR cells: 4 decimals, or NA when the cell is undefined."""
    if value is None:
        return NA
    return f"{value:.4f}"


def matrix_rows(report: TransferReport) -> List[List[str]]:
    rows = [["attack", "surrogate"] + list(report.targets)]
    for row in report.rows:
        cells = [format_rate(report.cell(row.attack, row.surrogate, t).asr) for t in report.targets]
        rows.append([row.attack, row.surrogate] + cells)
    return rows


def matrix_csv(report: TransferReport) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerows(matrix_rows(report))
    return buffer.getvalue()


def report_document(report: TransferReport) -> Dict:
    return {
        "generated_at": report.generated_at,
        "plan": report.plan,
        "targets": list(report.targets),
        "cells": [asdict(cell) for cell in report.cells],
        "flags": list(report.flags),
        "rows": [asdict(row) for row in report.rows],
    }


def report_json(report: TransferReport) -> str:
    return json.dumps(report_document(report), indent=2, sort_keys=True) + "\n"


def recompute_asr(document: Dict, attack: str, surrogate: str, target: str) -> Optional[float]:
    """ASR for one cell straight from the per-sample records of a parsed report.json."""
    for row in document["rows"]:
        if row["attack"] == attack and row["surrogate"] == surrogate:
            correct = [r for r in row["records"] if r["target_clean"][target] == r["label"]]
            if not correct:
                return None
            return sum(r["target_adv"][target] != r["label"] for r in correct) / len(correct)
    raise KeyError(f"no row for attack '{attack}' on surrogate '{surrogate}'")


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(line[i])) for line in [header, *rows]) for i in range(len(header))]

    def render(line):
        return "  ".join(str(value).ljust(width) for value, width in zip(line, widths)).rstrip()

    rule = "  ".join("-" * width for width in widths)
    return "\n".join([render(header), rule] + [render(line) for line in rows])


def summary_text(report: TransferReport) -> str:
    matrix = matrix_rows(report)
    sections = [
        f"Transfer ASR (clean-correct filtered), generated {report.generated_at}",
        "",
        format_table(matrix[0], matrix[1:]),
        "",
        "Perturbation norms and timing",
        "",
    ]
    norms = []
    for row in report.rows:
        cell = report.cell(row.attack, row.surrogate, report.targets[0])
        norms.append([row.attack, row.surrogate, f"{cell.mean_linf:.6f}", f"{cell.mean_l2:.6f}",
                      f"{row.wall_time:.2f}s", str(len(row.records))])
    sections.append(format_table(["attack", "surrogate", "mean_linf", "mean_l2", "wall_time", "samples"], norms))
    if report.flags:
        sections += ["", "Directional checks"]
        for flag in report.flags:
            status = "ok" if flag["holds"] else "FLAGGED"
            sections.append(f"  {flag['attack']} >= {flag['baseline']} on {flag['surrogate']} -> "
                            f"{flag['target']}: {format_rate(flag['attack_asr'])} vs "
                            f"{format_rate(flag['baseline_asr'])} [{status}]")
    return "\n".join(sections) + "\n"
