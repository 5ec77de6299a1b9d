import pytest
import sys
import os

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import InvalidArgumentError
from models import AttackTrace, EpochRecord, InnerLoopRecord, RobustnessReport, TransformSet
from report_writer import (
    RESULTS_HEADER,
    format_results_csv,
    format_runtime_csv,
    format_trace_csv,
    parse_results_csv,
    render_report_text,
    render_results_markdown,
    result_rows,
)

TSET = TransformSet(rotation_deg=10, translate_x=2, translate_y=2)


def _report(asr_r, clamped=None) -> RobustnessReport:
    return RobustnessReport(
        n_samples=185,
        asr_u_clean=0.8,
        asr_r_by_gamma=asr_r,
        avg_asr_u=0.61234,
        norm_violations=2,
        seed=0,
        asr_u_clean_clamped=clamped,
    )


@pytest.fixture
def rows():
    return result_rows("robust-uap", TSET, _report({0.5: 0.9, 0.6: 0.8, 0.7: 0.5}), 12.345678) + result_rows(
        "standard-uap", TSET, _report({0.5: 0.2, 0.6: 0.1, 0.7: 0.0}), 1.5
    )


class TestResultsCsv:
    """Test the results.csv schema"""

    def test_fixed_header_and_row_count(self, rows):
        lines = format_results_csv(rows).splitlines()

        assert lines[0] == ",".join(RESULTS_HEADER)
        assert len(lines) == 7

    def test_four_fractional_digits(self, rows):
        first = format_results_csv(rows).splitlines()[1]

        assert first == 'robust-uap,"R(10), T(2,2)",0.5000,0.9000,0.6123,0.8000,2,12.3457'

    def test_round_trip(self, rows):
        parsed = parse_results_csv(format_results_csv(rows))

        assert [(r.attack, r.gamma, r.asr_r) for r in parsed] == [(r.attack, r.gamma, r.asr_r) for r in rows]
        assert parsed[0].transform_set == "R(10), T(2,2)"

    def test_clamped_column_only_when_requested(self):
        rows = result_rows("sgd", TSET, _report({0.5: 0.3}, clamped=0.25), 0.0)

        content = format_results_csv(rows)

        assert content.splitlines()[0].endswith(",asr_u_clean_clamped")
        assert parse_results_csv(content)[0].asr_u_clean_clamped == 0.25

    def test_header_mismatch(self):
        with pytest.raises(InvalidArgumentError, match="header mismatch"):
            parse_results_csv("attack,gamma\nsgd,0.5\n")

    def test_bad_field(self, rows):
        content = format_results_csv(rows).replace("0.9000", "lots", 1)

        with pytest.raises(InvalidArgumentError, match="line 2"):
            parse_results_csv(content)

    def test_short_row(self):
        content = ",".join(RESULTS_HEADER) + "\nsgd,none,0.5\n"

        with pytest.raises(InvalidArgumentError, match="expected 8 fields"):
            parse_results_csv(content)


class TestMarkdown:
    """Test the results.md grid"""

    def test_grid_per_gamma(self, rows):
        markdown = render_results_markdown(rows)

        assert "## ASR_R at gamma = 0.5000" in markdown
        assert "## ASR_R at gamma = 0.7000" in markdown
        assert "| Transformation set | robust-uap | standard-uap |" in markdown
        assert "| R(10), T(2,2) | 0.9000 | 0.2000 |" in markdown
        assert "| R(10), T(2,2) | 0.5000 | 0.0000 |" in markdown

    def test_detail_table(self, rows):
        markdown = render_results_markdown(rows)

        assert "| robust-uap | R(10), T(2,2) | 0.6123 | 0.8000 | 2 | 12.3457 |" in markdown
        assert "clamped" not in markdown


class TestTextReport:
    """Test the human-readable evaluation block"""

    def test_report_block(self):
        text = render_report_text("sgd", TSET, _report({0.5: 0.25, 0.7: 0.125}, clamped=0.5))

        assert "attack:          sgd" in text
        assert "transforms:      R(10), T(2,2)" in text
        assert "ASR_R @ 0.50:   0.2500" in text
        assert "ASR_R @ 0.70:   0.1250" in text
        assert "clamped ASR_U:   0.5000" in text


class TestTraces:
    """Test runtime and trace tables"""

    def _trace(self) -> AttackTrace:
        return AttackTrace(
            algorithm="robust-uap",
            epochs=[EpochRecord(epoch=1, batches=3, metric="robustness", estimate=0.97, seconds=1.25, printed_until_met=False)],
            inner_loops=[
                InnerLoopRecord(epoch=1, batch=0, entry_estimate=0.1, exit_estimate=0.96, iterations=4, cap_hit=False)
            ],
            final_norm=1.0,
            total_seconds=1.3,
        )

    def test_trace_rows(self):
        lines = format_trace_csv(self._trace()).splitlines()

        assert lines[0].startswith("record,epoch,batch")
        assert lines[1] == "epoch,1,3,robustness,,0.9700,,,1.2500"
        assert lines[2] == "inner,1,0,robustness,0.1000,0.9600,4,false,"

    def test_trace_without_timing(self):
        lines = format_trace_csv(self._trace(), record_timing=False).splitlines()

        assert lines[1].endswith(",0.0000")

    def test_runtime_table(self):
        lines = format_runtime_csv([("R(10)", self._trace(), 2.5), ("none", self._trace(), 0.0)]).splitlines()

        assert lines == [
            "attack,transform_set,epochs,inner_loops,final_norm,runtime_seconds",
            "robust-uap,R(10),1,1,1.0000,2.5000",
            "robust-uap,none,1,1,1.0000,0.0000",
        ]
