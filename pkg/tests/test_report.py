from pathlib import Path

import pytest

from fsvlm.errors import ReportError
from fsvlm.report import _best_record, render_report
from fsvlm.runner import aggregate

from test_runner import _record, tiny_config


@pytest.fixture(scope="module")
def rendered(synthetic_dataset, tmp_path_factory):
    from fsvlm.runner import run_grid

    out = tmp_path_factory.mktemp("report-grid")
    config = tiny_config(synthetic_dataset, out)
    result = run_grid(config)
    report_dir = tmp_path_factory.mktemp("report-out")
    render_report(result.table, result.records, config, report_dir)
    return config, result, report_dir


class TestRenderReport:
    def test_table_files_shape(self, rendered):
        config, result, report_dir = rendered
        for metric in ("accuracy", "macro_auc", "macro_f1"):
            csv = (report_dir / f"table_{metric}.csv").read_text().splitlines()
            assert csv[0] == f"# config_fingerprint={config.fingerprint()}"
            assert csv[1].startswith("backbone,strategy,shot_0,shot_1,shot_2")
            # one row per backbone x strategy
            assert len(csv) == 2 + len(config.backbones) * len(config.strategies)
            md = (report_dir / f"table_{metric}.md").read_text()
            assert config.fingerprint() in md

    def test_zero_shot_column_repeats_across_rows(self, rendered):
        config, result, report_dir = rendered
        csv = (report_dir / "table_accuracy.csv").read_text().splitlines()
        zero_cells = [line.split(",")[2] for line in csv[2:]]
        assert len(set(zero_cells)) == 1
        assert "±0.0000" in zero_cells[0]

    def test_figures_exist(self, rendered):
        config, result, report_dir = rendered
        assert (report_dir / "roc" / "toy__lora.png").exists()
        assert (report_dir / "per_class_auc__toy.png").exists()
        assert (report_dir / "per_class_auc.csv").exists()
        assert (report_dir / "alignment_gap__toy.png").exists()
        assert (report_dir / "alignment_gap.csv").exists()
        assert (report_dir / "provenance.json").exists()

    def test_projection_panels_from_best_run(self, rendered):
        config, result, report_dir = rendered
        panels = sorted(p.name for p in (report_dir / "projections").glob("*.png"))
        assert "toy__lora__s1.png" in panels
        assert "toy__classifier__s2.png" in panels
        # zero-shot panel rendered once per strategy row
        assert "toy__lora__s0.png" in panels

    def test_rerender_byte_identical_tables(self, rendered, tmp_path):
        config, result, report_dir = rendered
        again = tmp_path / "again"
        render_report(result.table, result.records, config, again)
        for metric in ("accuracy", "macro_auc", "macro_f1"):
            a = (report_dir / f"table_{metric}.csv").read_bytes()
            b = (again / f"table_{metric}.csv").read_bytes()
            assert a == b

    def test_empty_records_error_without_artifacts(self, rendered, tmp_path):
        config, _, _ = rendered
        target = tmp_path / "empty"
        with pytest.raises(ReportError):
            render_report(aggregate([]), [], config, target)
        assert not any(target.rglob("*.csv"))


def test_best_record_selection():
    records = [
        _record(run_id=0, acc=0.1),
        _record(run_id=1, acc=0.2),
        _record(run_id=2, acc=0.3),
    ]
    records[0].metrics.macro_auc = 0.7
    records[1].metrics.macro_auc = 0.9
    records[2].metrics.macro_auc = 0.8
    assert _best_record(records).run_id == 1
