import json

import pytest

from schemas.report_model import AblationResult, AblationRow, ApMode
from services.report_services import (PER_CLASS_FILE, REPORT_FILE,
                                      TABLE_FILE, emit_report, format_cell,
                                      format_percent, read_table,
                                      write_ablation)


class TestFormatting:
    def test_percent(self):
        assert format_percent(0.98224) == "98.22%"
        assert format_percent(None) == ""

    def test_cells(self):
        assert format_cell(True) == "1"
        assert format_cell(None) == ""
        assert float(format_cell(0.1 + 0.2)) == 0.1 + 0.2


class TestEmitReport:
    def test_files_and_table(self, tmp_path, pipeline_result):
        written = emit_report([pipeline_result], tmp_path, ApMode.ALLPOINT)
        names = {path.name for path in written}
        assert {REPORT_FILE, TABLE_FILE, PER_CLASS_FILE,
                "curves_img1-fea1-out1.svg"} <= names
        row = read_table(tmp_path / TABLE_FILE)[0]
        assert row["coverage_pct"] == "98.22%"
        assert float(row["coverage"]) == pipeline_result.coverage
        assert float(row["adapted_map50"]) == 0.4731
        assert row["scenario"] == "adverse-weather"

    def test_per_class_rows(self, tmp_path, pipeline_result):
        emit_report([pipeline_result], tmp_path)
        rows = read_table(tmp_path / PER_CLASS_FILE)
        # 3 models x 2 modes x 3 classes
        assert len(rows) == 18
        assert {row["mode"] for row in rows} == {"voc11", "allpoint"}

    def test_report_json_round_trips(self, tmp_path, pipeline_result):
        emit_report([pipeline_result], tmp_path)
        payload = json.loads((tmp_path / REPORT_FILE).read_text())
        assert payload["mode"] == "allpoint"
        assert payload["results"][0]["adapted"]["map50"]["allpoint"] == 0.4731

    def test_empty_history_omits_chart(self, tmp_path, pipeline_result):
        result = pipeline_result.model_copy(update={"curves": {}})
        written = emit_report([result], tmp_path)
        assert not any(path.suffix == ".svg" for path in written)
        assert not list(tmp_path.glob("*.svg"))

    def test_chart_is_reproducible(self, tmp_path, pipeline_result):
        emit_report([pipeline_result], tmp_path / "a")
        emit_report([pipeline_result], tmp_path / "b")
        chart = "curves_img1-fea1-out1.svg"
        assert ((tmp_path / "a" / chart).read_bytes()
                == (tmp_path / "b" / chart).read_bytes())


class TestWriteAblation:
    def test_failed_rows_are_kept(self, tmp_path, pipeline_result):
        ablation = AblationResult(
            scenario="adverse-weather",
            rows=[AblationRow(label="img1-fea1-out1", img=True, fea=True,
                              out=True, map50=0.4731,
                              coverage=pipeline_result.coverage),
                  AblationRow(label="img0-fea1-out0", img=False, fea=True,
                              out=False, status="failed",
                              error="diverged"),
                  AblationRow(label="oracle", map50=0.4756, coverage=1.0)],
            results=[pipeline_result])
        write_ablation(ablation, tmp_path)
        rows = read_table(tmp_path / TABLE_FILE)
        assert [row["label"] for row in rows] == [
            "img1-fea1-out1", "img0-fea1-out0", "oracle"]
        assert rows[0]["coverage_pct"] == "98.22%"
        assert rows[1]["status"] == "failed"
        assert rows[1]["mAP@50"] == ""
        assert rows[2]["coverage_pct"] == "100.00%"

    @pytest.mark.parametrize("mode", list(ApMode))
    def test_mode_is_recorded(self, tmp_path, pipeline_result, mode):
        write_ablation(AblationResult(scenario="x", results=[
            pipeline_result]), tmp_path, mode)
        payload = json.loads((tmp_path / REPORT_FILE).read_text())
        assert payload["mode"] == mode.value
