import json
import logging
import math
from dataclasses import asdict, is_dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import openpyxl
import pandas as pd
import scipy
import sklearn
from openpyxl.styles import Font
from openpyxl.utils import get_column_letter
from openpyxl.worksheet.worksheet import Worksheet

from .. import SCHEMA_VERSION, __version__

logger = logging.getLogger("discount_kernel.report")

MAX_COLUMN_WIDTH = 50
MAX_SHEET_ROWS = 100_000


class ReportService:
    """CSV tables, the optional .xlsx workbook and the run manifest of one command"""

    def __init__(self, out_dir: Path, xlsx: bool = False):
        self.out_dir = Path(out_dir)
        self.xlsx = xlsx
        self.tables: Dict[str, pd.DataFrame] = {}

    def write_csv(self, frame: pd.DataFrame, name: str) -> Path:
        path = self.out_dir / f"{name}.csv"
        frame.to_csv(path, index=False)
        self.tables[name] = frame
        logger.info(f"Wrote {path} ({len(frame)} rows)")
        return path

    @staticmethod
    def workbook(tables: Dict[str, pd.DataFrame]) -> openpyxl.Workbook:
        """
        One sheet per table with bold headers and column widths fitted to
        the content, capped at 50 characters.
        """
        workbook = openpyxl.Workbook()
        default_sheet = workbook.active
        if default_sheet:
            workbook.remove(default_sheet)

        if not tables:
            ws = workbook.create_sheet("Data")
            ws.append(["No data provided"])

        for name, frame in tables.items():
            # Excel limits sheet titles to 31 characters
            ws: Worksheet = workbook.create_sheet(title=name[:31])
            ws.append([str(c) for c in frame.columns])
            for cell in ws[1]:
                cell.font = Font(bold=True)

            for row in frame.head(MAX_SHEET_ROWS).itertuples(index=False):
                ws.append([_cell_value(v) for v in row])

            for i, col in enumerate(ws.columns, 1):
                max_length = max((len(str(cell.value)) for cell in col if cell.value is not None), default=0)
                ws.column_dimensions[get_column_letter(i)].width = min(max_length + 2, MAX_COLUMN_WIDTH)

        return workbook

    def write_workbook(self, name: str = "report") -> Optional[Path]:
        if not self.xlsx:
            return None
        path = self.out_dir / f"{name}.xlsx"
        try:
            self.workbook(self.tables).save(path)
        except Exception as e:
            logger.error(f"Error creating workbook {path}: {e}", exc_info=True)
            raise
        logger.info(f"Wrote {path}")
        return path

    def write_manifest(self, subcommand: str, config: Any, extra: Optional[Dict[str, Any]] = None) -> Path:
        manifest = {
            "subcommand": subcommand,
            "parameters": _jsonable(asdict(config) if is_dataclass(config) else config),
            "outputs": sorted(f"{name}.csv" for name in self.tables),
            "schema_version": SCHEMA_VERSION,
            "versions": {
                "discount_kernel": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "pandas": pd.__version__,
                "scikit-learn": sklearn.__version__,
                "openpyxl": openpyxl.__version__,
            },
            "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        if extra:
            manifest.update(_jsonable(extra))
        path = self.out_dir / "run_manifest.json"
        path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
        return path


def _cell_value(value: Any) -> Any:
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if math.isfinite(value) else str(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    return value


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, (np.generic,)):
        return value.item()
    return value
