"""
Metrics stream and run plots
"""
import math

import pandas as pd

from app.utils.metrics import MetricsWriter, read_metrics, write_json
from app.utils.plotting import render_heatmap, render_loss_curve


class TestMetricsWriter:
    def test_records_carry_step_and_hash(self, tmp_path):
        writer = MetricsWriter(tmp_path / "m.jsonl", config_hash="abc")
        writer.write(1, loss=2.5)
        writer.write(2, loss=float("nan"))
        records = read_metrics(tmp_path / "m.jsonl")
        assert [r["step"] for r in records] == [1, 2]
        assert records[0]["config_hash"] == "abc"
        assert records[1]["loss"] == "nan"
        assert "wallclock" in records[0]

    def test_truncate_after_drops_later_steps(self, tmp_path):
        writer = MetricsWriter(tmp_path / "m.jsonl")
        for step in range(1, 6):
            writer.write(step, loss=float(step))
        writer.truncate_after(3)
        assert [r["step"] for r in read_metrics(writer.path)] == [1, 2, 3]

    def test_fresh_writer_replaces_file(self, tmp_path):
        MetricsWriter(tmp_path / "m.jsonl").write(1, loss=1.0)
        MetricsWriter(tmp_path / "m.jsonl", append=False).write(1, loss=2.0)
        assert [r["loss"] for r in read_metrics(tmp_path / "m.jsonl")] == [2.0]

    def test_malformed_lines_are_skipped(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"step": 1, "loss": 1.0}\nnot json\n{"step": 2}\n')
        assert len(read_metrics(path)) == 2
        assert len(read_metrics(path, "loss")) == 1

    def test_write_json(self, tmp_path):
        path = write_json(tmp_path / "nested" / "report.json", {"path": tmp_path, "value": 1})
        assert path.is_file()


class TestPlots:
    def test_loss_curve(self, tmp_path):
        records = [{"step": s, "loss": 1.0 / s, "mi/j5_jp8": math.log(s)} for s in range(1, 5)]
        assert render_loss_curve(records, tmp_path / "loss.png").is_file()

    def test_loss_curve_without_records(self, tmp_path):
        assert render_loss_curve([], tmp_path / "loss.png") is None

    def test_heatmap_with_failed_cell(self, tmp_path):
        table = pd.DataFrame({
            "lr": [1e-3, 1e-3, 1e-4, 1e-4],
            "decay": [0.5, 0.9, 0.5, 0.9],
            "test_acc": [0.5, float("nan"), 0.25, 0.75],
        })
        assert render_heatmap(table, "lr", "decay", tmp_path / "grid.png").is_file()

    def test_single_axis_heatmap(self, tmp_path):
        table = pd.DataFrame({"K": [1, 2, 4], "test_acc": [0.3, 0.4, 0.5]})
        assert render_heatmap(table, "K", "K", tmp_path / "grid.png").is_file()
