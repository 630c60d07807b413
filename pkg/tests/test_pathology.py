""" Tests for detection output failure-mode scans """
import pytest

from groundgenie.exceptions import GroundgenieError
from groundgenie.geometry import Box
from groundgenie.pathology import *
from groundgenie.pathology import ELLIPSIS, MAX_LENGTH, UNCLOSED


class TestRepetition:
    def test_car_sequence(self, car_boxes):
        runs = detect_arith_repetition(car_boxes)
        assert len(runs) == 1
        run = runs[0]
        assert (run.start, run.length) == (3, 5)
        assert run.delta == pytest.approx((24.0, 0.25, 24.0, 0.0))

    def test_too_few_boxes(self):
        assert detect_arith_repetition([Box(0, 0, 1, 1), Box(1, 0, 2, 1)]) == []

    def test_tolerance(self):
        boxes = [[0, 0, 10, 10], [10, 0, 20, 10], [21.5, 0, 31.5, 10], [31.5, 0, 41.5, 10]]
        assert detect_arith_repetition(boxes) == []
        assert detect_arith_repetition(boxes, tol=2.0)[0].length == 4

    def test_two_runs(self):
        a = [[i * 10, 0, i * 10 + 5, 5] for i in range(4)]
        b = [[500, 500 + i * 7, 520, 520 + i * 7] for i in range(3)]
        runs = detect_arith_repetition(a + [[900, 900, 950, 950]] + b)
        assert [(r.start, r.length) for r in runs] == [(0, 4), (5, 3)]

    def test_min_run(self, car_boxes):
        assert detect_arith_repetition(car_boxes, min_run=6) == []
        with pytest.raises(GroundgenieError):
            detect_arith_repetition(car_boxes, min_run=2)


class TestTruncation:
    @pytest.mark.parametrize(["raw", "reason"], [
        ("[{class: car, rect: [1, 2, 3, 4]}", UNCLOSED),
        ("A <g>cat</g><o><obj0>", UNCLOSED),
        ("[{class: car, rect: [1, 2, 3, 4]}]...", ELLIPSIS),
        ("a list of things …", ELLIPSIS),
    ])
    def test_truncated(self, raw, reason):
        t = detect_truncation(raw)
        assert t.truncated and t.reason == reason

    def test_unclosed_position_is_innermost(self):
        t = detect_truncation("ok [x, {y")
        assert t.position == 7

    def test_max_length(self):
        assert detect_truncation("one two three", max_len=3).reason == MAX_LENGTH
        assert not detect_truncation("one two three", max_len=4).truncated

    def test_alternate_closer_closes_group(self):
        assert not detect_truncation("<g>cat</g><o><obj0><o>").truncated

    def test_complete(self):
        assert detect_truncation("[{class: car, rect: [1, 2, 3, 4]}]") == (False, None, None)


class TestSurvival:
    @pytest.mark.parametrize(["p", "expected"], [(0.9, 0.3874), (0.99, 0.9135), (1.0, 1.0), (0.0, 0.0)])
    def test_closed_form(self, p, expected):
        assert box_survival(BoxTokenErrorModel(p)) == pytest.approx(expected, abs=1e-4)

    @pytest.mark.parametrize(["p", "t"], [(1.2, 9), (-0.1, 9), (0.5, 0), (0.5, 2.5)])
    def test_invalid(self, p, t):
        with pytest.raises(GroundgenieError):
            BoxTokenErrorModel(p, t)


class TestScan:
    def test_car_transcript(self, car_transcript_path):
        with open(car_transcript_path) as f:
            text = f.read()
        report = scan_transcript(text, "cars", p=0.9)
        assert len(report.records) == 8
        assert len(report.runs) == 1 and report.runs[0].length == 5
        assert report.truncation.truncated and report.truncation.reason == ELLIPSIS
        assert not report.clean
        assert report.survival["survival"] == pytest.approx(0.3874, abs=1e-4)
        text = report.render()
        assert "repetition runs: 1" in text and "truncated: yes" in text
        d = report.to_dict()
        assert d["boxes"] == 8 and d["runs"][0]["start"] == 3

    def test_clean_transcript(self, clean_transcript_path):
        with open(clean_transcript_path) as f:
            report = scan_transcript(f.read())
        assert report.clean
        assert "survival" not in report.to_dict()

    def test_unparseable_lines(self):
        report = scan_transcript("{class: car, rect: [5, 5, 1, 1]}\n{class: dog}")
        assert len(report.unparseable) == 2
        assert not report.clean

    def test_scan_boxes(self, car_boxes):
        report = scan_boxes(car_boxes, "boxes")
        assert len(report.runs) == 1
        assert not report.truncation.truncated

    def test_detection_prompt(self):
        assert "class" in DETECTION_PROMPT and "rect" in DETECTION_PROMPT
