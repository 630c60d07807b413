"""
Failure modes of coordinate-as-text detectors: arithmetic repetition of
emitted boxes, outputs cut at the length limit, and box loss when any one of
the tokens spelling a box goes wrong.
"""
import logging
import re
from collections import OrderedDict, namedtuple

import numpy as np

from .const import REPORT_DECIMALS, TOKENS_PER_BOX
from .exceptions import GroundgenieError
from .geometry import boxes_to_array
from .io_formats import parse_transcript

__all__ = ["RepetitionRun", "BoxTokenErrorModel", "Truncation", "PathologyReport",
           "detect_arith_repetition", "box_survival", "detect_truncation", "scan_transcript", "scan_boxes",
           "DETECTION_PROMPT", "MIN_RUN", "REPETITION_TOL"]

_LOGGER = logging.getLogger(__name__)

MIN_RUN = 3
REPETITION_TOL = 1.0

# Category-list detection prompt for general multimodal models; '{}' takes the
# category list, e.g. "['person', 'car']".
DETECTION_PROMPT = (
    "In this picture, you are required to finish object detection for every instance of the "
    "category we provide. To complete the above mission, you need to provide me with the answers "
    "in the format of a Python list of dictionaries by the category provided above. Attention: No "
    "other category shall appear in the detection object attributes, except for the genre we offer. "
    "Bounding box format: [108(xmin), 210(ymin), 810(xmax), 640(ymax)], where xmin, ymin, xmax and "
    "ymax must be positive integers. If there is no object in the picture, please provide an empty "
    "list. Here is an example which you must follow in your responses. Example: If the question is "
    "as below: Category: ['person', 'car']. If there is an object of the category, The Answer should "
    "be: [{{\"class\": \"person\", \"rect\": [0, 614, 220, 771]}}, {{\"class\": \"person\", \"rect\": "
    "[638, 468, 784, 941]}}, {{\"class\": \"car\", \"rect\": [110, 100, 500, 300]}}]. Else if no "
    "object of the category in the picture, the Answer should be:[]. Here is the question you shall "
    "answer: Category: {}")

RepetitionRun = namedtuple("RepetitionRun", ["start", "length", "delta", "tolerance"])
Truncation = namedtuple("Truncation", ["truncated", "position", "reason"])

UNCLOSED = "unclosed"
ELLIPSIS = "ellipsis"
MAX_LENGTH = "max_length"

_OPENERS = {"[": "]", "{": "}", "(": ")"}
_CLOSERS = {v: k for k, v in _OPENERS.items()}
_GROUP_RE = re.compile(r"</?[go]>")
_ELLIPSIS_RE = re.compile(r"(\.\.\.|…)\s*$")


class BoxTokenErrorModel(namedtuple("BoxTokenErrorModel", ["p", "tokens_per_box"])):
    """ Each of the tokens spelling one box is right with probability p, independently """
    __slots__ = ()

    def __new__(cls, p, tokens_per_box=TOKENS_PER_BOX):
        if not 0.0 <= p <= 1.0:
            raise GroundgenieError("Token correctness must be in [0, 1], got: {}".format(p))
        if int(tokens_per_box) != tokens_per_box or tokens_per_box < 1:
            raise GroundgenieError("tokens_per_box must be a positive integer, got: {}"
                                   .format(tokens_per_box))
        return super(BoxTokenErrorModel, cls).__new__(cls, float(p), int(tokens_per_box))


def box_survival(model):
    """
    Probability that every token of a box is emitted correctly, p ** t.

    :param BoxTokenErrorModel model: token error model
    :return float: survival probability
    """
    return model.p ** model.tokens_per_box


def _longest_from(deltas, start, stop, tol):
    """ Number of deltas from start (before stop) within tol of deltas[start] """
    ref = deltas[start]
    n = 0
    for k in range(start, stop):
        if np.all(np.abs(deltas[k] - ref) <= tol):
            n += 1
        else:
            break
    return n


def detect_arith_repetition(boxes, min_run=MIN_RUN, tol=REPETITION_TOL):
    """
    Find runs of boxes where each box is the previous one shifted by the same
    per-coordinate step.

    A run starting at box i extends while every consecutive difference stays
    within ``tol`` of the run's first difference, coordinate by coordinate.
    The longest run is taken first (ties go to the earliest), then the search
    repeats on the boxes not yet covered.

    :param list boxes: ordered Box or 4-sequence items
    :param int min_run: shortest reported run, in boxes; at least 3
    :param float tol: per-coordinate tolerance in pixels
    :return list[RepetitionRun]: runs ordered by start; delta is the mean step
    """
    if min_run < 3:
        raise GroundgenieError("min_run must be at least 3, got: {}".format(min_run))
    arr = boxes_to_array(boxes)
    n = len(arr)
    if n < min_run:
        return []
    deltas = np.diff(arr, axis=0)
    free = np.ones(n, dtype=bool)
    runs = []
    while True:
        best = None
        for s in range(n - 1):
            if not (free[s] and free[s + 1]):
                continue
            stop = s
            while stop < n - 1 and free[stop + 1]:
                stop += 1
            length = _longest_from(deltas, s, stop, tol) + 1
            if best is None or length > best[1]:
                best = (s, length)
        if best is None or best[1] < min_run:
            break
        s, length = best
        free[s:s + length] = False
        delta = tuple(float(x) for x in deltas[s:s + length - 1].mean(axis=0))
        runs.append(RepetitionRun(s, length, delta, tol))
    runs.sort(key=lambda r: r.start)
    if runs:
        _LOGGER.debug("Found {} repetition run(s): {}".format(
            len(runs), ", ".join("{}+{}".format(r.start, r.length) for r in runs)))
    return runs


def detect_truncation(raw, max_len=None):
    """
    Flag output that stops before its structure is complete.

    Checked in order: an unclosed bracket, brace, parenthesis or grounding
    group (position of the innermost unclosed opener); a trailing ellipsis
    marker (position of the marker); a word count of at least max_len
    (position of the text end).

    :param str raw: model output
    :param int max_len: output length limit in words, None to skip the check
    :return Truncation: flag, cut position and reason
    """
    stack = []
    group_re = _GROUP_RE
    i = 0
    while i < len(raw):
        m = group_re.match(raw, i)
        if m:
            tok = m.group(0)
            if tok.startswith("</"):
                if stack and stack[-1][0] == tok.replace("/", ""):
                    stack.pop()
            elif tok == "<o>" and stack and stack[-1][0] == "<o>":
                # a repeated opener closes the group
                stack.pop()
            else:
                stack.append((tok, i))
            i = m.end()
            continue
        c = raw[i]
        if c in _OPENERS:
            stack.append((c, i))
        elif c in _CLOSERS and stack and stack[-1][0] == _CLOSERS[c]:
            stack.pop()
        i += 1
    if stack:
        return Truncation(True, stack[-1][1], UNCLOSED)
    m = _ELLIPSIS_RE.search(raw.rstrip())
    if m:
        return Truncation(True, m.start(), ELLIPSIS)
    if max_len is not None and len(raw.split()) >= max_len:
        return Truncation(True, len(raw), MAX_LENGTH)
    return Truncation(False, None, None)


class PathologyReport(object):
    """ Findings of one scanned output """

    def __init__(self, source, records, unparseable, runs, truncation, survival=None):
        self.source = source
        self.records = records
        self.unparseable = unparseable
        self.runs = runs
        self.truncation = truncation
        self.survival = survival

    @property
    def clean(self):
        return not self.runs and not self.truncation.truncated and not self.unparseable

    def to_dict(self):
        out = OrderedDict([
            ("source", self.source),
            ("boxes", len(self.records)),
            ("unparseable", len(self.unparseable)),
            ("runs", [r._asdict() for r in self.runs]),
            ("truncation", self.truncation._asdict()),
        ])
        if self.survival is not None:
            out["survival"] = self.survival
        return out

    def render(self, decimals=REPORT_DECIMALS):
        fmt = "{:." + str(decimals) + "f}"
        lines = ["source: {}".format(self.source),
                 "boxes: {}  unparseable lines: {}".format(len(self.records), len(self.unparseable)),
                 "repetition runs: {}".format(len(self.runs))]
        for r in self.runs:
            lines.append("  start {} length {} delta ({})".format(
                r.start, r.length, ", ".join(fmt.format(d) for d in r.delta)))
        t = self.truncation
        lines.append("truncated: {}".format(
            "yes ({} at {})".format(t.reason, t.position) if t.truncated else "no"))
        if self.survival is not None:
            lines.append("box survival p={} over {} tokens: {}".format(
                self.survival["p"], self.survival["tokens_per_box"], fmt.format(self.survival["survival"])))
        return "\n".join(lines) + "\n"


def _survival_summary(p, tokens_per_box):
    if p is None:
        return None
    model = BoxTokenErrorModel(p, tokens_per_box)
    return OrderedDict([("p", model.p), ("tokens_per_box", model.tokens_per_box),
                        ("survival", box_survival(model))])


def scan_transcript(text, source=None, max_len=None, min_run=MIN_RUN, tol=REPETITION_TOL,
                    p=None, tokens_per_box=TOKENS_PER_BOX):
    """
    Parse a raw detection transcript and run every pathology check on it.

    :param str text: transcript text in the class/rect dialect
    :param str source: name shown in the report
    :param int max_len: output length limit in words
    :param float p: per-token correctness for the survival summary, optional
    :return PathologyReport: report
    """
    records, unparseable = parse_transcript(text)
    runs = detect_arith_repetition([r.box for r in records], min_run, tol)
    truncation = detect_truncation(text, max_len)
    if unparseable:
        _LOGGER.warning("{}: {} unparseable line(s)".format(source or "transcript", len(unparseable)))
    return PathologyReport(source, records, unparseable, runs, truncation,
                           _survival_summary(p, tokens_per_box))


def scan_boxes(boxes, source=None, min_run=MIN_RUN, tol=REPETITION_TOL, p=None,
               tokens_per_box=TOKENS_PER_BOX):
    """ Repetition scan of an already parsed box sequence; no truncation check applies """
    runs = detect_arith_repetition(boxes, min_run, tol)
    return PathologyReport(source, list(boxes), [], runs, Truncation(False, None, None),
                           _survival_summary(p, tokens_per_box))
