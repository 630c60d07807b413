"""
The grounded input/output protocol of a retrieval-based grounding model.

The model sees numbered object tokens and answers with noun phrases linked to
object indices::

    <image>\\n<obj0><roi><obj1><roi>...\\nQuestion
    <g>noun phrase</g><o><obj3><obj7></o>

Special tokens travel as literal text markers; no tokenizer is involved.
Indices are 0-based throughout. Some write-ups of the input template count
from ``<obj1>`` while defining the vocabulary from ``<obj0>``; this module
sticks to the vocabulary.
"""
import logging
import re
from collections import namedtuple
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .const import MAX_OBJECTS
from .exceptions import GrammarError
from .geometry import iou

__all__ = ["TokenKind", "SpecialToken", "GroundedSpan", "GroundedAnswer", "Diagnostic",
           "LabeledBox", "STRICT", "LENIENT", "TASK_PROMPTS", "build_input_sequence",
           "render_input_sequence", "parse_grounded_answer", "serialize_grounded_answer",
           "answer_to_detections", "build_task_prompt", "mix_input_boxes"]

_LOGGER = logging.getLogger(__name__)

STRICT = "strict"
LENIENT = "lenient"

GROUND_START = "<g>"
GROUND_END = "</g>"
OBJ_START = "<o>"
OBJ_END = "</o>"
IMAGE_PLACEHOLDER = "<image>"
ROI_PLACEHOLDER = "<roi>"
OBJ_TEMPLATE = "<obj{}>"

_TOKEN_RE = re.compile(r"<g>|</g>|<o>|</o>|<obj(\d+)>")

# diagnostic kinds
UNBALANCED = "unbalanced"
STRAY_INDEX = "stray_index"
INDEX_RANGE = "index_out_of_range"
DUPLICATE_INDEX = "duplicate_index"
EMPTY_PHRASE = "empty_phrase"
MISSING_GROUP = "missing_object_group"
ALT_CLOSER = "alternate_closer"
UNCLOSED = "unclosed"

# Task prompt templates for querying the model; {target} is an object
# reference, a category name or a question.
TASK_PROMPTS = {
    "detect": "Please detect {target} in this image. Answer the question with object indexes.",
    "brief_caption": "Please briefly describe this image and detect all the mentioned objects. "
                     "Answer with grounded object indexes.",
    "detailed_caption": "Please provide a detailed description of the image and detect all the "
                        "mentioned objects. Answer the question with grounded object indexes.",
    "region_category": "What is the category name of {target}? "
                       "Answer the question with its category name in free format.",
    "region_phrase": "Can you provide me with a short phrase description of {target}? "
                     "Answer the question with short phrases.",
    "region_brief": "Can you provide me with a brief description of {target}? "
                    "Answer the question with brief description.",
    "region_sentence": "Can you provide a one sentence description of {target} in the image? "
                       "Answer the question with one sentence description.",
    "counting": "How many {target} are there in this image? Answer the question with the number "
                "of objects and locate them with object indexes.",
    "conversation": "Answer the question in grounded format. Question: {target}",
}


class TokenKind(Enum):
    OBJ_INDEX = "obj"
    GROUND_START = GROUND_START
    GROUND_END = GROUND_END
    OBJ_START = OBJ_START
    OBJ_END = OBJ_END
    IMAGE = IMAGE_PLACEHOLDER
    ROI = ROI_PLACEHOLDER


class SpecialToken(namedtuple("SpecialToken", ["kind", "index"])):
    """ One special vocabulary entry; index is only set for object index tokens """
    __slots__ = ()

    def __new__(cls, kind, index=None):
        if kind is TokenKind.OBJ_INDEX:
            if index is None or not 0 <= index < MAX_OBJECTS:
                raise GrammarError("Object index token out of range: {}".format(index))
        elif index is not None:
            raise GrammarError("Only object index tokens carry an index")
        return super(SpecialToken, cls).__new__(cls, kind, index)

    @classmethod
    def obj(cls, k):
        return cls(TokenKind.OBJ_INDEX, k)

    @property
    def text(self):
        if self.kind is TokenKind.OBJ_INDEX:
            return OBJ_TEMPLATE.format(self.index)
        return self.kind.value

    def __str__(self):
        return self.text


Diagnostic = namedtuple("Diagnostic", ["position", "kind", "message"])
GroundedSpan = namedtuple("GroundedSpan", ["phrase", "indices"])
LabeledBox = namedtuple("LabeledBox", ["label", "box", "index"])


@dataclass
class GroundedAnswer:
    """
    Parsed answer. ``texts`` interleaves with ``spans``: ``texts[i]`` precedes
    ``spans[i]`` and ``texts[-1]`` trails the last span, so
    ``len(texts) == len(spans) + 1`` and no plain text is lost.
    """
    spans: list = field(default_factory=list)
    texts: list = None
    diagnostics: list = field(default_factory=list, compare=False, repr=False)

    def __post_init__(self):
        self.spans = [GroundedSpan(s[0], tuple(s[1])) for s in self.spans]
        for span in self.spans:
            if not isinstance(span.phrase, str) or not span.phrase.strip():
                raise GrammarError("Grounded phrase must be non-empty text: {!r}".format(span.phrase))
            if _TOKEN_RE.search(span.phrase):
                raise GrammarError("Grounded phrase contains markup: {!r}".format(span.phrase))
            if any(isinstance(i, bool) or not isinstance(i, int) or i < 0 for i in span.indices):
                raise GrammarError("Object indices must be nonnegative integers: {}".format(span.indices))
            if len(set(span.indices)) != len(span.indices):
                raise GrammarError("Object indices repeated in span '{}': {}".format(span.phrase, span.indices))
        if self.texts is None:
            self.texts = [""] * (len(self.spans) + 1)
        if len(self.texts) != len(self.spans) + 1:
            raise GrammarError("Expected {} text segments around {} spans, got {}"
                               .format(len(self.spans) + 1, len(self.spans), len(self.texts)))

    @property
    def plain_text(self):
        """ Answer text with markup removed and phrases kept in place """
        out = [self.texts[0]]
        for span, txt in zip(self.spans, self.texts[1:]):
            out.extend([span.phrase, txt])
        return "".join(out)

    @property
    def indices(self):
        return sorted({i for s in self.spans for i in s.indices})


def build_input_sequence(num_objects, question):
    """
    Build the symbolic model input: image placeholder, newline, one
    (index, roi) pair per object, newline, question.

    :param int num_objects: number of input boxes, 1..100
    :param str question: question text
    :return list: SpecialToken and str items
    :raise GrammarError: if the object count is out of range or the question is empty
    """
    if not 1 <= num_objects <= MAX_OBJECTS:
        raise GrammarError("Object count must be within [1, {}], got: {}"
                           .format(MAX_OBJECTS, num_objects))
    if not question or not question.strip():
        raise GrammarError("Question must not be empty")
    seq = [SpecialToken(TokenKind.IMAGE), "\n"]
    for i in range(num_objects):
        seq.extend([SpecialToken.obj(i), SpecialToken(TokenKind.ROI)])
    seq.extend(["\n", question])
    return seq


def render_input_sequence(seq):
    return "".join(str(x) for x in seq)


def build_task_prompt(task, target=None):
    """
    Instantiate a task prompt template.

    :param str task: key of TASK_PROMPTS
    :param str target: object reference, category or question, if the template needs one
    :return str: prompt text
    """
    try:
        template = TASK_PROMPTS[task]
    except KeyError:
        raise GrammarError("Unknown task '{}'. Available tasks: {}"
                           .format(task, ", ".join(TASK_PROMPTS.keys())))
    if "{target}" in template and not target:
        raise GrammarError("Task '{}' needs a target".format(task))
    return template.format(target=target)


class _Parser(object):
    """ Single-pass state machine over special tokens """

    def __init__(self, text, num_objects, mode):
        if mode not in (STRICT, LENIENT):
            raise GrammarError("Unknown parse mode: {}".format(mode))
        self.text = text
        self.num_objects = num_objects
        self.strict = mode == STRICT
        self.diagnostics = []
        self.spans = []
        self.texts = []
        self._plain = []
        self._phrase = None
        self._phrase_pos = None
        self._indices = None

    def problem(self, pos, kind, msg):
        d = Diagnostic(pos, kind, msg)
        self.diagnostics.append(d)
        if self.strict and kind != DUPLICATE_INDEX:
            raise GrammarError("{} at {}: {}".format(kind, pos, msg), self.diagnostics)
        _LOGGER.debug("Grammar recovery at {} ({}): {}".format(pos, kind, msg))

    def _open_phrase(self, pos):
        self.texts.append("".join(self._plain))
        self._plain = []
        self._phrase, self._phrase_pos, self._indices = [], pos, None

    def _close_span(self):
        phrase = "".join(self._phrase)
        indices = self._indices or []
        if not phrase.strip():
            self.problem(self._phrase_pos, EMPTY_PHRASE, "grounded phrase is empty")
            # the span is dropped, so its leading text goes back to plain text
            self._plain = [self.texts.pop()]
        else:
            self.spans.append(GroundedSpan(phrase, tuple(indices)))
        self._phrase = self._indices = None

    def _add_index(self, pos, k):
        if self.num_objects is not None and k >= self.num_objects:
            self.problem(pos, INDEX_RANGE, "index {} >= number of objects {}".format(k, self.num_objects))
            return
        if k in self._indices:
            self.problem(pos, DUPLICATE_INDEX, "index {} repeated within a span".format(k))
            return
        self._indices.append(k)

    def run(self):
        # states: text, phrase, after_phrase, group
        state = "text"
        pos = 0
        for m in _TOKEN_RE.finditer(self.text):
            chunk = self.text[pos:m.start()]
            tok, start = m.group(0), m.start()
            pos = m.end()
            if chunk:
                if state == "phrase":
                    self._phrase.append(chunk)
                elif state == "text":
                    self._plain.append(chunk)
                else:
                    if state == "after_phrase":
                        self.problem(start - len(chunk), MISSING_GROUP, "phrase without object group")
                        self._indices = []
                    else:
                        self.problem(start - len(chunk), UNCLOSED, "text inside object group")
                    self._close_span()
                    self._plain.append(chunk)
                    state = "text"
            if state == "text":
                if tok == GROUND_START:
                    self._open_phrase(start)
                    state = "phrase"
                elif m.group(1) is not None:
                    self.problem(start, STRAY_INDEX, "{} outside an object group".format(tok))
                else:
                    self.problem(start, UNBALANCED, "unexpected {}".format(tok))
            elif state == "phrase":
                if tok == GROUND_END:
                    state = "after_phrase"
                elif tok == OBJ_START:
                    self.problem(start, UNBALANCED, "{} before {}".format(tok, GROUND_END))
                    self._indices = []
                    state = "group"
                elif tok == GROUND_START:
                    self.problem(start, UNBALANCED, "nested {}".format(tok))
                    self._phrase = []
                    self._phrase_pos = start
                else:
                    self.problem(start, STRAY_INDEX if m.group(1) else UNBALANCED,
                                 "{} inside a phrase".format(tok))
            elif state == "after_phrase":
                if tok == OBJ_START:
                    self._indices = []
                    state = "group"
                else:
                    self.problem(start, MISSING_GROUP, "phrase without object group")
                    self._indices = []
                    self._close_span()
                    state = "text"
                    if tok == GROUND_START:
                        self._open_phrase(start)
                        state = "phrase"
                    elif m.group(1) is not None:
                        self.problem(start, STRAY_INDEX, "{} outside an object group".format(tok))
                    else:
                        self.problem(start, UNBALANCED, "unexpected {}".format(tok))
            else:  # group
                if m.group(1) is not None:
                    self._add_index(start, int(m.group(1)))
                elif tok == OBJ_END:
                    self._close_span()
                    state = "text"
                elif tok == OBJ_START:
                    self.problem(start, ALT_CLOSER, "object group closed with {}".format(tok))
                    self._close_span()
                    state = "text"
                else:
                    self.problem(start, UNCLOSED, "object group interrupted by {}".format(tok))
                    self._close_span()
                    state = "text"
                    if tok == GROUND_START:
                        self._open_phrase(start)
                        state = "phrase"
        tail = self.text[pos:]
        if state == "text":
            self._plain.append(tail)
        elif state == "phrase":
            self.problem(len(self.text), UNBALANCED, "unterminated phrase")
            # unrecoverable phrase: keep its raw text as plain text
            self._plain = [self.texts.pop(), GROUND_START] + self._phrase + [tail]
        else:
            if state == "after_phrase":
                self.problem(len(self.text), MISSING_GROUP, "phrase without object group")
                self._indices = []
            else:
                self.problem(len(self.text), UNCLOSED, "unclosed object group")
            self._close_span()
            self._plain.append(tail)
        self.texts.append("".join(self._plain))
        return GroundedAnswer(self.spans, self.texts, self.diagnostics)


def parse_grounded_answer(text, num_objects=None, mode=STRICT):
    """
    Parse grounded answer text.

    Strict mode raises on any malformed structure. Lenient mode never raises
    on input text: it recovers what it can and records a Diagnostic for every
    repair, including an object group closed by a repeated ``<o>`` instead of
    ``</o>``. Repeated indices within one span are dropped in both modes.

    :param str text: model output
    :param int num_objects: number of input boxes; indices must be below it.
        None skips the range check
    :param str mode: 'strict' or 'lenient'
    :return GroundedAnswer: spans in textual order, plain text preserved
    :raise GrammarError: strict mode only
    """
    return _Parser(text, num_objects, mode).run()


def serialize_grounded_answer(ans):
    """
    Canonical text form; the object group is always closed with ``</o>``.

    :param GroundedAnswer ans: answer
    :return str: text
    """
    out = [ans.texts[0]]
    for span, txt in zip(ans.spans, ans.texts[1:]):
        out.append("{}{}{}{}{}{}".format(
            GROUND_START, span.phrase, GROUND_END, OBJ_START,
            "".join(OBJ_TEMPLATE.format(i) for i in span.indices), OBJ_END))
        out.append(txt)
    return "".join(out)


def answer_to_detections(ans, boxes, mode=STRICT):
    """
    Resolve every (phrase, index) pair into a labeled box. One box may carry
    several labels when different phrases refer to it.

    :param GroundedAnswer ans: parsed answer
    :param list[Box] boxes: input boxes the indices refer to
    :param str mode: 'strict' raises on a bad index, 'lenient' drops it and
        appends a Diagnostic to ans.diagnostics
    :return list[LabeledBox]: detections in span order, then index order
    :raise GrammarError: strict mode, index out of range
    """
    dets = []
    for span in ans.spans:
        for i in span.indices:
            if not 0 <= i < len(boxes):
                msg = "span '{}' references box {} of {}".format(span.phrase, i, len(boxes))
                if mode == STRICT:
                    raise GrammarError(msg)
                _LOGGER.warning("Dropping detection: {}".format(msg))
                ans.diagnostics.append(Diagnostic(None, INDEX_RANGE, msg))
                continue
            dets.append(LabeledBox(span.phrase, boxes[i], i))
    return dets


def mix_input_boxes(gt_boxes, proposals, max_boxes=MAX_OBJECTS, seed=None, dedupe_iou=None):
    """
    Mix ground-truth boxes into the proposal list and keep at most max_boxes,
    always keeping every ground-truth box that fits.

    :param list[Box] gt_boxes: ground-truth boxes
    :param list[Box] proposals: proposal boxes, best first
    :param int max_boxes: capacity, N_max by default
    :param int seed: shuffling seed; the final order is a random permutation
    :param float dedupe_iou: drop proposals overlapping a ground-truth box at
        or above this IoU; None keeps them all
    :return (list[Box], list[int]): mixed boxes and, per ground-truth box, its
        position in the mixed list (-1 if it did not fit)
    """
    if max_boxes < 1 or max_boxes > MAX_OBJECTS:
        raise GrammarError("max_boxes must be within [1, {}]".format(MAX_OBJECTS))
    gts = list(gt_boxes)[:max_boxes]
    props = [p for p in proposals
             if dedupe_iou is None or all(iou(p, g) < dedupe_iou for g in gts)]
    pool = [("gt", i, b) for i, b in enumerate(gts)] + \
        [("prop", i, b) for i, b in enumerate(props[:max_boxes - len(gts)])]
    order = np.random.default_rng(seed).permutation(len(pool))
    mixed = [pool[k] for k in order]
    positions = [-1] * len(list(gt_boxes))
    for pos, (src, i, _) in enumerate(mixed):
        if src == "gt":
            positions[i] = pos
    return [b for _, _, b in mixed], positions
