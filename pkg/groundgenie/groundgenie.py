#!/usr/bin/env python

import os
import sys
from collections import OrderedDict

import logmuse
from ubiquerg import VersionInHelpParser

from ._version import __version__
from .config import RunConfig, overlay_section
from .const import *
from .engine import EngineSettings, run_pipeline
from .exceptions import GroundgenieError
from .grammar import LENIENT, STRICT, LabeledBox, answer_to_detections, parse_grounded_answer
from .io_formats import AUTO, CANONICAL, TRANSCRIPT, PredictionRecord, format_table, \
    predictions_to_detection_set, read_boxes, read_coco_ground_truth, read_predictions, \
    write_predictions, write_report, write_table
from .matching import CostWeights, ScoredBox, match_predictions, pair_cost
from .metrics import evaluate
from .pathology import scan_boxes, scan_transcript
from .simulator import compare_pipelines, quantization_sweep, retrieval_experiment, specs_from_mapping

_LOGGER = None


def build_argparser():
    """
    Builds argument parser.

    :return argparse.ArgumentParser
    """

    banner = "%(prog)s - grounding protocol and evaluation toolkit"
    additional_description = "\nDetection metrics, grounded-answer parsing, failure-mode scans, " \
                             "simulations and the annotation data engine."

    parser = VersionInHelpParser(
        prog=PKG_NAME,
        version=__version__,
        description=banner,
        epilog=additional_description)

    subparsers = parser.add_subparsers(dest="command")

    def add_subparser(cmd, description):
        return subparsers.add_parser(
            cmd, description=description, help=description)

    sps = {}
    for cmd, desc in SUBPARSER_MESSAGES.items():
        sps[cmd] = add_subparser(cmd, desc)
        sps[cmd].add_argument(
            '-c', '--config', required=False, default=None, dest="config",
            help="Path to a settings file. Optional if {} environment variable is set."
                 .format(", ".join(CFG_ENV_VARS)))
        sps[cmd].add_argument(
            '-o', '--out', required=False, default=None,
            help="Output file.")

    for cmd in [EVAL_CMD, SIMULATE_CMD, ENGINE_CMD]:
        sps[cmd].add_argument(
            '-j', '--jobs', type=int, default=os.cpu_count() or 1,
            help="Number of worker threads. Default: available cores.")

    sps[EVAL_CMD].add_argument(
        '--gt', required=True, help="COCO-style ground truth JSON file.")
    sps[EVAL_CMD].add_argument(
        '--preds', required=True, help="Prediction file, canonical records or a raw transcript.")
    sps[EVAL_CMD].add_argument(
        '--mode', choices=EVAL_MODES, default=None,
        help="Evaluation mode. Default: taken from the prediction file.")
    sps[EVAL_CMD].add_argument(
        '--iou', type=float, nargs="+", default=None,
        help="IoU thresholds for precision and recall. Default: {}.".format(IOU_THRESHOLD))
    sps[EVAL_CMD].add_argument(
        '--dialect', choices=[AUTO, CANONICAL, TRANSCRIPT], default=AUTO,
        help="Prediction file dialect. Default: detected from the content.")
    sps[EVAL_CMD].add_argument(
        '--image-id', default=None, dest="image_id",
        help="Image id of a transcript. Default: the file name stem.")

    sps[MATCH_CMD].add_argument(
        '--gt', required=True, help="COCO-style ground truth JSON file.")
    sps[MATCH_CMD].add_argument(
        '--preds', required=True, help="Prediction file in the canonical dialect.")

    sps[PARSE_CMD].add_argument(
        '--answer', required=True, help="File holding the grounded answer text.")
    sps[PARSE_CMD].add_argument(
        '--boxes', required=True, help="Input boxes the object indices refer to.")
    sps[PARSE_CMD].add_argument(
        '--num-objects', type=int, default=None, dest="num_objects",
        help="Number of input objects. Default: number of boxes.")
    sps[PARSE_CMD].add_argument(
        '--image-id', default="image", dest="image_id", help="Image id written to the detections.")

    sps[PARSE_CMD].add_argument(
        "--strict", action="store_true",
        help="Fail on the first grammar error instead of recovering.")

    sps[SIMULATE_CMD].add_argument(
        'kind', choices=SIM_KINDS, help="Experiment to run.")
    sps[SIMULATE_CMD].add_argument(
        '--spec', default=None, help="YAML file overriding the 'simulate' settings.")
    sps[SIMULATE_CMD].add_argument(
        '--trials', type=int, default=None, help="Number of trials. Default: from the settings.")

    sps[SIMULATE_CMD].add_argument(
        '--seed', type=int, default=0, help="Master random seed. Default: 0.")

    group = sps[PATHOLOGY_CMD].add_mutually_exclusive_group(required=True)
    group.add_argument('--transcript', default=None, help="Raw detection transcript.")
    group.add_argument('--boxes', default=None, help="Ordered boxes file.")
    sps[PATHOLOGY_CMD].add_argument(
        '--max-len', type=int, default=None, dest="max_len",
        help="Output length limit in words; outputs reaching it count as truncated.")
    sps[PATHOLOGY_CMD].add_argument(
        '-p', '--token-accuracy', type=float, default=None, dest="p",
        help="Per-token correctness for the box survival summary.")

    sps[ENGINE_CMD].add_argument(
        'action', choices=ENGINE_ACTIONS, help="Start a new run or resume from the checkpoint.")
    sps[ENGINE_CMD].add_argument(
        '--manifest', required=True, help="Image manifest, one JSON record per line.")
    sps[ENGINE_CMD].add_argument(
        '--client', choices=["mock", "http", "replay"], default=None,
        help="Stage client. Default: from the settings.")
    sps[ENGINE_CMD].add_argument(
        '--record', default=None, help="Record every stage call to this file.")
    sps[ENGINE_CMD].add_argument(
        '--replay', default=None, help="Stage log to answer from with the replay client.")
    sps[ENGINE_CMD].add_argument(
        '--limit', type=int, default=None, help="Stop after this many images.")

    return parser


def _emit(text):
    sys.stdout.write(text)
    sys.stdout.flush()


def _cmd_eval(args):
    rc = RunConfig.from_args(args, inputs=OrderedDict([("gt", args.gt), ("preds", args.preds)]),
                             outputs=OrderedDict([("out", args.out)]))
    ev = rc.section(CFG_EVAL_KEY)
    bundle = read_coco_ground_truth(args.gt)
    diagnostics = []
    records = read_predictions(args.preds, args.mode, bundle.category_by_name(), args.dialect,
                               args.image_id, diagnostics)
    report = evaluate(predictions_to_detection_set(records), bundle.to_ground_truth(), args.mode,
                      ev["iou_thresholds"], ev["aggregate"], rc.jobs, rc.echo())
    report.warnings.extend(diagnostics)
    _emit(report.render(ev["decimals"]))
    if args.out:
        write_report(report, args.out)
        _LOGGER.info("Report written to: {}".format(args.out))
    return EXIT_WARN if report.warnings else EXIT_OK


def _cmd_match(args):
    rc = RunConfig.from_args(args, inputs=OrderedDict([("gt", args.gt), ("preds", args.preds)]),
                             outputs=OrderedDict([("out", args.out)]))
    m = rc.section(CFG_MATCHING_KEY)
    weights = CostWeights(m["w_cls"], m["w_l1"], m["w_giou"])
    bundle = read_coco_ground_truth(args.gt)
    diagnostics = []
    records = read_predictions(args.preds, None, bundle.category_by_name(), CANONICAL, None, diagnostics)
    per_image = OrderedDict()
    for r in records:
        if r.category_id is None:
            continue
        scores = None if r.score is None else {r.category_id: r.score}
        per_image.setdefault(r.image_id, []).append(ScoredBox(r.box, r.category_id, scores))
    gts = bundle.to_ground_truth()
    rows = []
    for image_id, preds in per_image.items():
        if image_id not in bundle.images:
            diagnostics.append("predictions for unknown image {}".format(image_id))
            continue
        targets = [LabeledBox(g.category_id, g.box, j) for j, g in enumerate(gts.images[image_id])
                   if not g.ignore]
        frame = bundle.images[image_id].extent
        for i, j in match_predictions(preds, targets, frame, weights, m["focal"]).pairs:
            cost = pair_cost(preds[i], targets[j], weights, frame, m["focal"])
            rows.append([image_id, i, targets[j].index, cost])
    header = ["image_id", "prediction", "ground_truth", "cost"]
    _emit(format_table(header, rows))
    for d in diagnostics:
        _LOGGER.warning(d)
    if args.out:
        write_table(header, rows, args.out)
        _LOGGER.info("Table written to: {}".format(args.out))
    return EXIT_WARN if diagnostics else EXIT_OK


def _cmd_parse(args):
    RunConfig.from_args(args, inputs=OrderedDict([("answer", args.answer), ("boxes", args.boxes)]))
    boxes = read_boxes(args.boxes)
    with open(args.answer, encoding="utf-8") as f:
        text = f.read()
    mode = STRICT if args.strict else LENIENT
    num_objects = args.num_objects if args.num_objects is not None else len(boxes)
    ans = parse_grounded_answer(text, num_objects, mode)
    dets = answer_to_detections(ans, boxes, mode)
    rows = [[d.index, d.label] + list(d.box) for d in dets]
    _emit(format_table(["index", "phrase", "xmin", "ymin", "xmax", "ymax"], rows, 2))
    for d in ans.diagnostics:
        _LOGGER.warning("{} at {}: {}".format(d.kind, d.position, d.message))
    if args.out:
        write_predictions([PredictionRecord(args.image_id, None, d.label, d.box, None, "<obj{}>".format(d.index))
                           for d in dets], args.out)
        _LOGGER.info("Detections written to: {}".format(args.out))
    return EXIT_WARN if ans.diagnostics else EXIT_OK


def _cmd_simulate(args):
    rc = RunConfig.from_args(args, inputs=OrderedDict([("spec", args.spec)]),
                             outputs=OrderedDict([("out", args.out)]))
    sim = rc.section(CFG_SIMULATE_KEY)
    if args.spec:
        sim = overlay_section(rc.settings, CFG_SIMULATE_KEY, args.spec)
    trials = args.trials or sim["trials"]
    scene, retrieval, accuracy, regression = specs_from_mapping(sim)
    if args.kind == SIM_QUANT:
        header = ["frame", "bin_px", "mean_iou"]
        rows = [list(r) for r in quantization_sweep(sim["frame_sizes"], sim["bins"], sim["box_size"],
                                                    trials, args.seed)]
    elif args.kind == SIM_RETRIEVAL:
        res = retrieval_experiment(scene, retrieval, accuracy, trials, args.seed, rc.jobs)
        header = ["pipeline", "R@0.5", "P@0.5", "mAP", "expected_R@0.5"]
        rows = [list(res)]
    else:
        report = compare_pipelines(scene, retrieval, accuracy, regression, trials, args.seed, rc.jobs)
        _emit(report.render())
        if args.out:
            report.write_table(args.out)
            _LOGGER.info("Table written to: {}".format(args.out))
        return EXIT_OK
    _emit(format_table(header, rows))
    if args.out:
        write_table(header, rows, args.out)
        _LOGGER.info("Table written to: {}".format(args.out))
    return EXIT_OK


def _cmd_pathology(args):
    source = args.transcript or args.boxes
    rc = RunConfig.from_args(args, inputs=OrderedDict([("input", source)]))
    pc = rc.section(CFG_PATHOLOGY_KEY)
    p = args.p if args.p is not None else pc["p"]
    if args.transcript:
        with open(args.transcript, encoding="utf-8") as f:
            text = f.read()
        report = scan_transcript(text, source, args.max_len or pc["max_len"], pc["min_run"], pc["tol"],
                                 p, pc["tokens_per_box"])
    else:
        report = scan_boxes(read_boxes(args.boxes), source, pc["min_run"], pc["tol"], p, pc["tokens_per_box"])
    _emit(report.render())
    if args.out:
        write_report(report, args.out)
        _LOGGER.info("Report written to: {}".format(args.out))
    return EXIT_OK


def _cmd_engine(args):
    if not args.out:
        raise GroundgenieError("The engine needs an output file: --out")
    rc = RunConfig.from_args(args, inputs=OrderedDict([("manifest", args.manifest), ("replay", args.replay)]),
                             outputs=OrderedDict([("out", args.out)]))
    settings = EngineSettings.from_mapping(rc.section(CFG_ENGINE_KEY), jobs=rc.jobs, client=args.client,
                                           record=args.record, replay=args.replay)
    report = run_pipeline(args.manifest, args.out, settings, resume=args.action == ENGINE_RESUME,
                          limit=args.limit)
    _emit(report.render())
    write_report(report, os.path.splitext(args.out)[0] + ".report.json")
    return EXIT_WARN if report.errors else EXIT_OK


def main():
    """ Primary workflow """
    parser = logmuse.add_logging_options(build_argparser())
    args, remaining_args = parser.parse_known_args()
    global _LOGGER
    _LOGGER = logmuse.logger_via_cli(args, make_root=True)
    _LOGGER.debug("groundgenie {}".format(__version__))
    _LOGGER.debug("Args: {}".format(args))

    if not args.command:
        parser.print_help()
        _LOGGER.error("No command given")
        return EXIT_INPUT_ERROR
    if remaining_args:
        parser.error("Unrecognized arguments: {}".format(" ".join(remaining_args)))

    try:
        if args.command == EVAL_CMD:
            return _cmd_eval(args)
        elif args.command == PARSE_CMD:
            return _cmd_parse(args)
        elif args.command == SIMULATE_CMD:
            return _cmd_simulate(args)
        elif args.command == PATHOLOGY_CMD:
            return _cmd_pathology(args)
        elif args.command == ENGINE_CMD:
            return _cmd_engine(args)
        elif args.command == MATCH_CMD:
            return _cmd_match(args)
    except (GroundgenieError, OSError) as e:
        sys.stderr.write("{}: error: {}\n".format(PKG_NAME, e))
        _LOGGER.debug("Failed command: {}".format(args.command), exc_info=True)
        return EXIT_INPUT_ERROR
