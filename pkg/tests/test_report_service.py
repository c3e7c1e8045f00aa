import json
import math

import numpy as np
import openpyxl
import pandas as pd

from discount_kernel import __version__
from discount_kernel.core.config import RunConfig
from discount_kernel.services.report_service import ReportService


def test_workbook_basic():
    """One sheet per table, bold headers"""
    frame = pd.DataFrame({"date": ["2021-01-04", "2021-01-05"], "rmse_yield": [1e-4, 2e-4]})
    wb = ReportService.workbook({"fit_rmse": frame})

    sheet = wb["fit_rmse"]
    assert sheet["A1"].value == "date"
    assert sheet["B1"].value == "rmse_yield"
    assert sheet["A1"].font.bold
    assert sheet["A2"].value == "2021-01-04"
    assert sheet["B3"].value == 2e-4


def test_workbook_empty():
    wb = ReportService.workbook({})
    assert "Data" in wb.sheetnames
    assert wb["Data"]["A1"].value == "No data provided"


def test_workbook_non_finite_and_numpy_values():
    frame = pd.DataFrame({"score": [math.inf, np.nan], "n_days": np.array([3, 4], dtype=np.int64)})
    sheet = ReportService.workbook({"cv_scores": frame})["cv_scores"]
    assert sheet["A2"].value == "inf"
    assert sheet["A3"].value == "nan"
    assert sheet["B2"].value == 3


def test_workbook_column_width_is_capped():
    frame = pd.DataFrame({"reason": ["x" * 200]})
    sheet = ReportService.workbook({"rejects": frame})["rejects"]
    assert sheet.column_dimensions["A"].width == 50


def test_write_csv_and_workbook(tmp_path):
    report = ReportService(tmp_path, xlsx=True)
    report.write_csv(pd.DataFrame({"a": [1, 2]}), "first")
    report.write_csv(pd.DataFrame({"b": [3.5]}), "second")

    assert pd.read_csv(tmp_path / "first.csv")["a"].tolist() == [1, 2]
    path = report.write_workbook("run")
    assert path == tmp_path / "run.xlsx"
    assert openpyxl.load_workbook(path).sheetnames == ["first", "second"]


def test_workbook_skipped_without_flag(tmp_path):
    report = ReportService(tmp_path)
    report.write_csv(pd.DataFrame({"a": [1]}), "only")
    assert report.write_workbook() is None
    assert not list(tmp_path.glob("*.xlsx"))


def test_manifest(tmp_path):
    report = ReportService(tmp_path)
    report.write_csv(pd.DataFrame({"a": [1]}), "fit_rmse")
    config = RunConfig(subcommand="fit", out=tmp_path, systems_dir=tmp_path / "systems")
    path = report.write_manifest("fit", config, {"n_days": np.int64(3)})

    manifest = json.loads(path.read_text())
    assert manifest["subcommand"] == "fit"
    assert manifest["outputs"] == ["fit_rmse.csv"]
    assert manifest["parameters"]["systems_dir"] == str(tmp_path / "systems")
    assert manifest["parameters"]["alpha"] == 0.2
    assert manifest["versions"]["discount_kernel"] == __version__
    assert manifest["n_days"] == 3
