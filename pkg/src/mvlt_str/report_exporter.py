"""
Export of evaluation reports.

Writes the JSON report, the iteration accuracy curve as CSV and a formatted
XLSX workbook with Summary, Iterations and Predictions sheets.
"""

import csv
import logging
import os
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Union

from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter
from openpyxl.worksheet.worksheet import Worksheet

from .errors import StorageError
from .evaluator import EvalReport
from .utils import format_file_size, write_json


logger = logging.getLogger(__name__)

REPORT_JSON = "eval_report.json"
CURVE_CSV = "iteration_accuracy.csv"
REPORT_XLSX = "eval_report.xlsx"


class ReportExporter:
    """Writes an EvalReport to ``out_dir``."""

    def __init__(self, out_dir: Union[str, Path], checkpoint_name: str = ""):
        self.out_dir = Path(out_dir)
        self.checkpoint_name = checkpoint_name

        self.header_font = Font(bold=True, color="FFFFFF")
        self.header_fill = PatternFill(start_color="366092", end_color="366092", fill_type="solid")
        self.header_alignment = Alignment(horizontal="center", vertical="center")
        self.cell_alignment = Alignment(horizontal="left", vertical="center")
        self.number_alignment = Alignment(horizontal="right", vertical="center")
        self.border = Border(
            left=Side(style="thin"),
            right=Side(style="thin"),
            top=Side(style="thin"),
            bottom=Side(style="thin"),
        )
        self.wrong_fill = PatternFill(start_color="FFCCCC", end_color="FFCCCC", fill_type="solid")

    def _write_headers(self, ws: Worksheet, headers: List[str]) -> None:
        for col, header in enumerate(headers, 1):
            cell = ws.cell(row=1, column=col, value=header)
            cell.font = self.header_font
            cell.fill = self.header_fill
            cell.alignment = self.header_alignment
            cell.border = self.border

    def _fit_columns(self, ws: Worksheet, headers: List[str], max_width: int = 50) -> None:
        for col in range(1, len(headers) + 1):
            width = len(headers[col - 1])
            for row in range(2, ws.max_row + 1):
                value = ws.cell(row=row, column=col).value
                if value is not None:
                    width = max(width, len(str(value)))
            ws.column_dimensions[get_column_letter(col)].width = min(width + 2, max_width)
        ws.freeze_panes = "A2"

    def _create_summary_sheet(self, workbook: Workbook, report: EvalReport) -> Worksheet:
        ws = workbook.create_sheet("Summary", 0)
        ws.cell(row=1, column=1, value="Scene Text Recognition Evaluation")
        ws.cell(row=1, column=1).font = Font(size=16, bold=True)
        ws.merge_cells("A1:D1")

        rows = [
            ("Checkpoint:", self.checkpoint_name),
            ("Config hash:", report.config_hash),
            ("Export date:", datetime.now().strftime("%Y-%m-%d %H:%M:%S")),
            ("Samples:", report.sample_count),
            ("Correction iterations:", report.iterations),
            ("Word accuracy:", report.word_accuracy),
            ("Char accuracy:", report.char_accuracy),
        ]
        for offset, (label, value) in enumerate(rows):
            ws.cell(row=3 + offset, column=1, value=label).font = Font(bold=True)
            cell = ws.cell(row=3 + offset, column=2, value=value)
            if isinstance(value, float):
                cell.number_format = "0.0000"
                cell.alignment = self.number_alignment
        ws.column_dimensions["A"].width = 25
        ws.column_dimensions["B"].width = 24
        return ws

    def _create_iterations_sheet(self, workbook: Workbook, report: EvalReport) -> Worksheet:
        ws = workbook.create_sheet("Iterations")
        headers = ["Iteration Count", "Word Accuracy"]
        self._write_headers(ws, headers)
        for row, accuracy in enumerate(report.iteration_accuracy, 2):
            ws.cell(row=row, column=1, value=row - 2)
            cell = ws.cell(row=row, column=2, value=accuracy)
            cell.number_format = "0.0000"
            for col in (1, 2):
                ws.cell(row=row, column=col).border = self.border
                ws.cell(row=row, column=col).alignment = self.number_alignment
        self._fit_columns(ws, headers)
        return ws

    def _create_predictions_sheet(self, workbook: Workbook, report: EvalReport) -> Worksheet:
        logger.debug(f"Creating Predictions sheet with {len(report.predictions)} rows")
        ws = workbook.create_sheet("Predictions")
        headers = ["Sample", "Label"] + [f"Iteration {k}" for k in range(report.iterations + 1)] + ["Correct"]
        self._write_headers(ws, headers)
        for row, record in enumerate(report.predictions, 2):
            values = [record.sample_id, record.label, *record.predictions, record.correct]
            for col, value in enumerate(values, 1):
                cell = ws.cell(row=row, column=col, value=value)
                cell.border = self.border
                cell.alignment = self.cell_alignment
                if not record.correct:
                    cell.fill = self.wrong_fill
        self._fit_columns(ws, headers)
        return ws

    def write_curve(self, report: EvalReport) -> Path:
        path = self.out_dir / CURVE_CSV
        try:
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["iteration_count", "accuracy"])
                for k, accuracy in enumerate(report.iteration_accuracy):
                    writer.writerow([k, repr(float(accuracy))])
        except OSError as e:
            raise StorageError(f"cannot write accuracy curve: {e}", str(path)) from e
        return path

    def write_workbook(self, report: EvalReport) -> Path:
        path = self.out_dir / REPORT_XLSX
        workbook = Workbook()
        workbook.remove(workbook.active)
        try:
            self._create_iterations_sheet(workbook, report)
            self._create_predictions_sheet(workbook, report)
            self._create_summary_sheet(workbook, report)
            workbook.save(path)
        except OSError as e:
            raise StorageError(f"cannot write workbook: {e}", str(path)) from e
        finally:
            workbook.close()
        logger.info(f"  - Workbook: {path} ({format_file_size(os.path.getsize(path))})")
        return path

    def export(self, report: EvalReport) -> Dict[str, Path]:
        """Write all three report files; returns their paths keyed by kind."""
        try:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageError(f"cannot create report directory: {e}", str(self.out_dir)) from e
        logger.info(f"Exporting evaluation report to {self.out_dir}")
        written = {
            "json": write_json(self.out_dir / REPORT_JSON, report.to_dict()),
            "csv": self.write_curve(report),
            "xlsx": self.write_workbook(report),
        }
        logger.info(f"✓ Report exported: word accuracy {report.word_accuracy:.4f} over {report.sample_count} samples")
        return written
