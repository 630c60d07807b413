""" Tests for the command line entry point """
import os
import sys

import pytest

from groundgenie.const import *
from groundgenie.groundgenie import build_argparser, main
from groundgenie.io_formats import REPORT_KIND, read_predictions, read_records


@pytest.fixture
def run_cli(monkeypatch):
    def _run(*argv):
        monkeypatch.setattr(sys, "argv", ["groundgenie"] + [str(a) for a in argv])
        return main()
    return _run


class TestParser:
    @pytest.mark.parametrize("cmd", list(SUBPARSER_MESSAGES))
    def test_commands_registered(self, cmd):
        assert cmd in build_argparser().format_help()

    def test_simulate_needs_kind(self):
        with pytest.raises(SystemExit):
            build_argparser().parse_args(["simulate", "unknown"])


class TestCommands:
    def test_no_command(self, run_cli):
        assert run_cli() == EXIT_INPUT_ERROR

    def test_eval(self, run_cli, tmpdir, capsys, gt_path, unscored_preds_path):
        out = str(tmpdir.join("report.json"))
        assert run_cli("eval", "--gt", gt_path, "--preds", unscored_preds_path, "-o", out, "-j", 1) == EXIT_OK
        assert "P@0.50: 0.7000  R@0.50: 0.7000" in capsys.readouterr().out
        report = read_records(out, REPORT_KIND)[0]
        assert report["mode"] == MODE_UNSCORED
        assert report["config"]["command"] == EVAL_CMD
        assert os.path.isfile(str(tmpdir.join("report.txt")))

    def test_eval_warns_on_unknown_image(self, run_cli, tmpdir, gt_path):
        preds = tmpdir.join("p.jsonl")
        preds.write('{"image_id": 99, "category_id": 1, "box": [0, 0, 5, 5]}\n')
        assert run_cli("eval", "--gt", gt_path, "--preds", str(preds)) == EXIT_WARN

    def test_eval_missing_input(self, run_cli, tmpdir, gt_path):
        assert run_cli("eval", "--gt", gt_path, "--preds", tmpdir.join("none.jsonl")) == EXIT_INPUT_ERROR

    def test_eval_bad_mode(self, run_cli, gt_path, car_transcript_path):
        assert run_cli("eval", "--gt", gt_path, "--preds", car_transcript_path, "--mode", MODE_SCORED) \
            == EXIT_INPUT_ERROR

    def test_parse(self, run_cli, tmpdir, capsys, answer_path, boxes_path):
        out = str(tmpdir.join("dets.jsonl"))
        assert run_cli("parse", "--answer", answer_path, "--boxes", boxes_path, "-o", out) == EXIT_OK
        assert "two dogs" in capsys.readouterr().out
        dets = read_predictions(out)
        assert [d.label for d in dets] == ["man", "two dogs", "two dogs"]
        assert [d.source for d in dets] == ["<obj0>", "<obj1>", "<obj2>"]

    def test_parse_strict_out_of_range(self, run_cli, answer_path, boxes_path):
        assert run_cli("parse", "--answer", answer_path, "--boxes", boxes_path, "--num-objects", 2,
                       "--strict") == EXIT_INPUT_ERROR

    def test_pathology(self, run_cli, tmpdir, capsys, car_transcript_path):
        out = str(tmpdir.join("scan.json"))
        assert run_cli("pathology", "--transcript", car_transcript_path, "-p", 0.99, "-o", out) == EXIT_OK
        text = capsys.readouterr().out
        assert "repetition runs: 1" in text
        assert "truncated: yes" in text
        assert read_records(out, REPORT_KIND)[0]["runs"][0]["start"] == 3

    def test_simulate_quant(self, run_cli, tmpdir, sim_spec_path):
        out = tmpdir.join("quant.tsv")
        assert run_cli("simulate", "quant", "--spec", sim_spec_path, "--trials", 50, "-o", out) == EXIT_OK
        rows = out.read().splitlines()
        assert rows[0] == "frame\tbin_px\tmean_iou"
        assert [r.split("\t")[0] for r in rows[1:]] == ["250", "1000"]

    def test_engine_run(self, run_cli, tmpdir, capsys, manifest_path):
        out = str(tmpdir.join("triplets.jsonl"))
        assert run_cli("engine", "run", "--manifest", manifest_path, "--out", out, "-j", 1) == EXIT_OK
        assert "complete: yes" in capsys.readouterr().out
        report = read_records(str(tmpdir.join("triplets.report.json")), REPORT_KIND)[0]
        assert report["counts"]["images"] == 3

    def test_engine_needs_out(self, run_cli, manifest_path):
        assert run_cli("engine", "run", "--manifest", manifest_path) == EXIT_INPUT_ERROR

    def test_match(self, run_cli, tmpdir, capsys, gt_path, scored_preds_path):
        out = tmpdir.join("pairs.tsv")
        assert run_cli("match", "--gt", gt_path, "--preds", scored_preds_path, "-o", out) == EXIT_OK
        assert "ground_truth" in capsys.readouterr().out
        rows = [r.split("\t") for r in out.read().splitlines()]
        assert rows[0] == ["image_id", "prediction", "ground_truth", "cost"]
        assert len(rows) == 5
        assert ["1", "0", "0", "0.2000"] in rows
        assert ["1", "1", "1", "0.4000"] in rows
        assert ["2", "0", "0", "0.1000"] in rows

    def test_match_reads_focal_setting(self, run_cli, tmpdir, gt_path, scored_preds_path):
        cfg = tmpdir.join("focal.yaml")
        cfg.write("matching:\n  focal: true\n")
        out = tmpdir.join("pairs.tsv")
        assert run_cli("match", "--gt", gt_path, "--preds", scored_preds_path, "-c", cfg, "-o", out) == EXIT_OK
        first = out.read().splitlines()[1].split("\t")
        assert first[:3] == ["1", "0", "0"]
        assert float(first[3]) < 0

    def test_match_bad_weights(self, run_cli, tmpdir, gt_path, scored_preds_path):
        cfg = tmpdir.join("neg.yaml")
        cfg.write("matching:\n  w_l1: -1.0\n")
        assert run_cli("match", "--gt", gt_path, "--preds", scored_preds_path, "-c", cfg) == EXIT_INPUT_ERROR

    def test_match_warns_on_unknown_image(self, run_cli, tmpdir, gt_path):
        preds = tmpdir.join("p.jsonl")
        preds.write('{"image_id": 99, "category_id": 1, "box": [0, 0, 5, 5], "score": 0.5}\n')
        assert run_cli("match", "--gt", gt_path, "--preds", preds) == EXIT_WARN
