"""
Readers and writers for every on-disk format: COCO-style ground truth,
prediction records, raw detection transcripts, manifests, boxes files,
feature grids, record files and tables.

All text is UTF-8 with LF newlines. Record files are newline-delimited JSON
preceded by one header comment line, ``# groundgenie <kind> v1``.
"""
import csv
import json
import logging
import os
import re
import struct
from collections import OrderedDict, namedtuple

import numpy as np

from .const import FREQ_ABBREVIATIONS, FREQUENCIES, MODE_SCORED, MODE_UNSCORED, RECORD_HEADER
from .encoding import FeatureGrid
from .exceptions import BoxError, FormatError, GroundgenieError, MissingFolderError
from .geometry import Box, Extent, box_from_xywh
from .metrics import Category, Detection, DetectionSet, GroundTruth, GroundTruthSet

__all__ = ["ImageInfo", "Annotation", "DatasetBundle", "PredictionRecord", "TranscriptRecord",
           "ManifestRecord", "read_coco_ground_truth", "read_predictions", "parse_transcript",
           "predictions_to_detection_set", "write_predictions", "write_records", "append_records",
           "read_records",
           "write_report", "write_triplets", "read_triplets", "read_manifest", "write_manifest",
           "read_boxes", "read_feature_grid", "write_feature_grid", "write_table", "format_table",
           "CANONICAL", "TRANSCRIPT", "AUTO"]

_LOGGER = logging.getLogger(__name__)

CANONICAL = "canonical"
TRANSCRIPT = "transcript"
AUTO = "auto"

PREDICTION_KIND = "predictions"
TRIPLET_KIND = "triplets"
REPORT_KIND = "report"

_GRID_HEADER = struct.Struct("<3If")

ImageInfo = namedtuple("ImageInfo", ["id", "extent", "file_name"])
Annotation = namedtuple("Annotation", ["image_id", "category_id", "box", "ignore"])
PredictionRecord = namedtuple("PredictionRecord",
                              ["image_id", "category_id", "label", "box", "score", "source"])
PredictionRecord.__new__.__defaults__ = (None, None, None)
TranscriptRecord = namedtuple("TranscriptRecord", ["label", "box", "line", "span"])
ManifestRecord = namedtuple("ManifestRecord", ["id", "uri", "width", "height", "tags", "caption"])
ManifestRecord.__new__.__defaults__ = ((), None)

# {class: car, rect: [110, 199, 128, 240]} with optional quoting of keys and values
_TRANSCRIPT_RE = re.compile(
    r"""\{+\s*['"]?class['"]?\s*:\s*['"]?(?P<label>[^,'"{}]+?)['"]?\s*,\s*"""
    r"""['"]?rect['"]?\s*:\s*\[\s*(?P<c0>-?\d+(?:\.\d+)?)\s*,\s*(?P<c1>-?\d+(?:\.\d+)?)\s*,"""
    r"""\s*(?P<c2>-?\d+(?:\.\d+)?)\s*,\s*(?P<c3>-?\d+(?:\.\d+)?)\s*\]\s*\}+""")
_TRANSCRIPT_HINT_RE = re.compile(r"\b(?:class|rect)\b")


class DatasetBundle(object):
    """ Images, categories and annotations with referential integrity """

    def __init__(self, images, categories, annotations):
        self.images = images
        self.categories = categories
        self.annotations = annotations

    def to_ground_truth(self):
        """
        :return GroundTruthSet: annotations grouped per image; images without
            annotations are kept so that detections on them count as false positives
        """
        per_image = OrderedDict((i, []) for i in self.images)
        for a in self.annotations:
            per_image[a.image_id].append(GroundTruth(a.box, a.category_id, a.ignore))
        return GroundTruthSet(per_image, self.categories.values())

    def category_by_name(self):
        return {c.name.lower(): c.id for c in self.categories.values()}

    def __repr__(self):
        return "DatasetBundle({} images, {} categories, {} annotations)".format(
            len(self.images), len(self.categories), len(self.annotations))


def _load_json(path):
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError("invalid JSON: {}".format(e.msg), path, e.lineno)


def _frequency(value, path, field):
    if value is None:
        return None
    v = str(value).lower()
    if v in FREQ_ABBREVIATIONS:
        return FREQ_ABBREVIATIONS[v]
    if v in FREQUENCIES:
        return v
    raise FormatError("unknown frequency tag '{}'".format(value), path, field=field)


def read_coco_ground_truth(path):
    """
    Read COCO-style ground truth. Boxes are stored as (x, y, w, h) and come
    back as xyxy Box objects; LVIS single-letter frequency tags are expanded.
    ``iscrowd`` or ``ignore`` set on an annotation marks it as ignored.

    :param str path: JSON file
    :return DatasetBundle: validated bundle
    :raise FormatError: malformed content, dangling references or negative sizes
    """
    data = _load_json(path)
    if not isinstance(data, dict):
        raise FormatError("top level must be an object", path)
    images = OrderedDict()
    for n, img in enumerate(data.get("images", [])):
        field = "images[{}]".format(n)
        try:
            extent = Extent(img["width"], img["height"])
            images[img["id"]] = ImageInfo(img["id"], extent, img.get("file_name"))
        except KeyError as e:
            raise FormatError("missing key {}".format(e), path, field=field)
        except (BoxError, TypeError, ValueError) as e:
            raise FormatError(str(e), path, field=field)
    categories = OrderedDict()
    for n, cat in enumerate(data.get("categories", [])):
        field = "categories[{}]".format(n)
        if "id" not in cat or "name" not in cat:
            raise FormatError("category needs 'id' and 'name'", path, field=field)
        categories[cat["id"]] = Category(cat["id"], cat["name"],
                                         _frequency(cat.get("frequency"), path, field + ".frequency"))
    annotations = []
    for n, ann in enumerate(data.get("annotations", [])):
        field = "annotations[{}]".format(n)
        image_id, cat_id = ann.get("image_id"), ann.get("category_id")
        if image_id not in images:
            raise FormatError("unknown image id {}".format(image_id), path, field=field + ".image_id")
        if cat_id not in categories:
            raise FormatError("unknown category id {}".format(cat_id), path, field=field + ".category_id")
        bbox = ann.get("bbox")
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise FormatError("bbox must be a list of 4 numbers", path, field=field + ".bbox")
        try:
            box = box_from_xywh(*[float(x) for x in bbox])
        except (BoxError, TypeError, ValueError) as e:
            raise FormatError(str(e), path, field=field + ".bbox")
        ignore = bool(ann.get("iscrowd", 0)) or bool(ann.get("ignore", 0))
        annotations.append(Annotation(image_id, cat_id, box, ignore))
    bundle = DatasetBundle(images, categories, annotations)
    _LOGGER.debug("Read {} from {}".format(bundle, path))
    return bundle


def _box_from_list(value, path, line, field="box"):
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise FormatError("box must be a list of 4 numbers", path, line, field)
    try:
        return Box(*[float(x) for x in value])
    except (BoxError, TypeError, ValueError) as e:
        raise FormatError(str(e), path, line, field)


def _record_lines(path):
    """ (line number, text) of the non-blank, non-comment lines """
    with open(path, encoding="utf-8") as f:
        for n, line in enumerate(f, start=1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield n, s


def _resolve_label(label, names, diagnostics, where):
    cat_id = names.get(label.lower()) if names is not None else None
    if cat_id is None and names is not None:
        msg = "{}: unresolved label '{}'".format(where, label)
        _LOGGER.warning(msg)
        diagnostics.append(msg)
    return cat_id


def parse_transcript(text):
    """
    Tolerant reader for raw detection answers of the form
    ``{class: car, rect: [110, 199, 128, 240]}``, quoted or not, one or many
    per line.

    :param str text: raw model output
    :return (list[TranscriptRecord], list[(int, str)]): records in emitted
        order, and the lines that look like records but could not be read
    """
    records, unparseable = [], []
    for n, line in enumerate(text.splitlines(), start=1):
        found = False
        for m in _TRANSCRIPT_RE.finditer(line):
            found = True
            try:
                box = Box(*[float(m.group("c{}".format(i))) for i in range(4)])
            except BoxError:
                unparseable.append((n, m.group(0)))
                continue
            records.append(TranscriptRecord(m.group("label").strip(), box, n, m.group(0)))
        if not found and _TRANSCRIPT_HINT_RE.search(line):
            unparseable.append((n, line))
    return records, unparseable


def _looks_canonical(path):
    for _, s in _record_lines(path):
        if not s.startswith("{"):
            return False
        try:
            return isinstance(json.loads(s), dict)
        except ValueError:
            return False
    return True


def read_predictions(path, mode=None, categories=None, dialect=AUTO, image_id=None,
                     diagnostics=None):
    """
    Read prediction records.

    The canonical dialect is one JSON object per line with ``image_id``,
    ``category_id`` or ``label``, ``box`` (xyxy) and, in scored files,
    ``score``. The transcript dialect is raw model output read with
    parse_transcript; it carries no scores.

    :param str path: prediction file
    :param str mode: 'scored', 'unscored' or None to take it from the file
    :param Mapping[str, int] categories: lowercase name -> category id used to
        resolve free-text labels
    :param str dialect: 'canonical', 'transcript' or 'auto'
    :param image_id: image the transcript belongs to; file stem by default
    :param list diagnostics: receives a message per unresolved label
    :return list[PredictionRecord]: records; unresolved labels keep category_id None
    :raise FormatError: malformed record, or scores inconsistent with the mode
    """
    diagnostics = diagnostics if diagnostics is not None else []
    if dialect == AUTO:
        dialect = CANONICAL if _looks_canonical(path) else TRANSCRIPT
    if dialect == TRANSCRIPT:
        if mode == MODE_SCORED:
            raise FormatError("transcripts carry no confidence; scored mode is impossible", path)
        with open(path, encoding="utf-8") as f:
            text = f.read()
        found, unparseable = parse_transcript(text)
        if unparseable:
            n, s = unparseable[0]
            raise FormatError("unreadable record '{}'".format(s.strip()), path, n)
        image = image_id if image_id is not None else os.path.splitext(os.path.basename(path))[0]
        return [PredictionRecord(image, _resolve_label(r.label, categories, diagnostics,
                                                       "{}:{}".format(path, r.line)),
                                 r.label, r.box, None, r.span) for r in found]
    if dialect != CANONICAL:
        raise GroundgenieError("Unknown prediction dialect: {}".format(dialect))
    records = []
    seen_scores = set()
    for n, s in _record_lines(path):
        try:
            obj = json.loads(s)
        except ValueError as e:
            raise FormatError("invalid JSON: {}".format(e), path, n)
        if not isinstance(obj, dict):
            raise FormatError("record must be a JSON object", path, n)
        if "image_id" not in obj:
            raise FormatError("missing image_id", path, n, "image_id")
        box = _box_from_list(obj.get("box"), path, n)
        label = obj.get("label")
        cat_id = obj.get("category_id")
        if cat_id is None:
            if label is None:
                raise FormatError("record needs category_id or label", path, n)
            cat_id = _resolve_label(label, categories, diagnostics, "{}:{}".format(path, n))
        score = obj.get("score")
        if score is not None:
            if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
                raise FormatError("score must be a number in [0, 1]", path, n, "score")
            score = float(score)
        has = score is not None
        if mode == MODE_SCORED and not has:
            raise FormatError("missing score in scored mode", path, n, "score")
        if mode is None and seen_scores and has not in seen_scores:
            raise FormatError("scored and unscored records mixed", path, n, "score")
        seen_scores.add(has)
        if mode == MODE_UNSCORED:
            score = None
        records.append(PredictionRecord(obj["image_id"], cat_id, label, box, score, obj.get("source")))
    _LOGGER.debug("Read {} prediction records from {}".format(len(records), path))
    return records


def predictions_to_detection_set(records):
    """ Group resolved prediction records per image; unresolved ones are left out """
    images = OrderedDict()
    for r in records:
        if r.category_id is None:
            continue
        images.setdefault(r.image_id, []).append(Detection(r.box, r.category_id, r.score))
    return DetectionSet(images)


def _check_writable(path):
    folder = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(folder):
        raise MissingFolderError(folder)


def write_records(records, path, kind):
    """
    Write dict records as newline-delimited JSON after a header comment.
    Field order is kept as given.

    :param Iterable[Mapping] records: records
    :param str path: output file
    :param str kind: record kind named in the header
    :return str: path written
    """
    _check_writable(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(RECORD_HEADER.format(kind=kind) + "\n")
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return path


def append_records(records, path, kind):
    """
    Append dict records to a record file, writing the header first when the
    file is missing or empty. Output equals a single write_records call.

    :return str: path written
    """
    _check_writable(path)
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", encoding="utf-8", newline="\n") as f:
        if fresh:
            f.write(RECORD_HEADER.format(kind=kind) + "\n")
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return path


def read_records(path, kind=None, drop_torn=False):
    """
    :param str path: record file
    :param str kind: expected kind; checked against the header when given
    :param bool drop_torn: skip an unreadable last line that has no newline,
        as left behind by an interrupted append
    :return list[OrderedDict]: records
    """
    with open(path, encoding="utf-8", errors="replace" if drop_torn else "strict") as f:
        text = f.read()
    if drop_torn and "\n" not in text:
        return []
    first = text.split("\n", 1)[0]
    if kind is not None and first != RECORD_HEADER.format(kind=kind):
        raise FormatError("expected header '{}'".format(RECORD_HEADER.format(kind=kind)), path, 1)
    lines = text.split("\n")
    out = []
    for n, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        try:
            out.append(json.loads(s, object_pairs_hook=OrderedDict))
        except ValueError as e:
            if drop_torn and n == len(lines):
                _LOGGER.warning("Dropping incomplete last line of {}".format(path))
                break
            raise FormatError("invalid JSON: {}".format(e), path, n)
    return out


def _prediction_dict(r):
    rec = OrderedDict([("image_id", r.image_id)])
    if r.category_id is not None:
        rec["category_id"] = r.category_id
    if r.label is not None:
        rec["label"] = r.label
    rec["box"] = list(r.box)
    if r.score is not None:
        rec["score"] = r.score
    if r.source is not None:
        rec["source"] = r.source
    return rec


def write_predictions(records, path):
    return write_records((_prediction_dict(r) for r in records), path, PREDICTION_KIND)


def write_report(report, path):
    """
    Write a report as a one-record file; its text form goes next to it with a
    ``.txt`` suffix when the report can render itself.

    :param report: object with to_dict() and optionally render()
    :param str path: record file
    :return str: path written
    """
    write_records([report.to_dict()], path, REPORT_KIND)
    if hasattr(report, "render"):
        with open(os.path.splitext(path)[0] + ".txt", "w", encoding="utf-8", newline="\n") as f:
            f.write(report.render())
    return path


def write_triplets(triplets, path):
    """ :param Iterable[AnnotationTriplet] triplets: engine output records """
    return write_records((t.to_dict() for t in triplets), path, TRIPLET_KIND)


def read_triplets(path):
    from .engine import AnnotationTriplet
    return [AnnotationTriplet.from_dict(d) for d in read_records(path, TRIPLET_KIND)]


def read_manifest(path):
    """
    Manifest of images: one JSON object per line with ``id``, ``uri``,
    ``width`` and ``height``, optionally ``tags`` and ``caption``.

    :param str path: manifest file
    :return list[ManifestRecord]: images in file order
    :raise FormatError: unreadable or incomplete line, duplicate id
    """
    out, seen = [], set()
    for n, s in _record_lines(path):
        try:
            obj = json.loads(s)
        except ValueError as e:
            raise FormatError("invalid JSON: {}".format(e), path, n)
        for key in ("id", "uri", "width", "height"):
            if key not in obj:
                raise FormatError("missing '{}'".format(key), path, n, key)
        try:
            Extent(obj["width"], obj["height"])
        except (BoxError, TypeError, ValueError) as e:
            raise FormatError(str(e), path, n, "width/height")
        if obj["id"] in seen:
            raise FormatError("duplicate image id '{}'".format(obj["id"]), path, n, "id")
        seen.add(obj["id"])
        out.append(ManifestRecord(str(obj["id"]), obj["uri"], obj["width"], obj["height"],
                                  tuple(obj.get("tags", ())), obj.get("caption")))
    return out


def write_manifest(records, path):
    _check_writable(path)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for r in records:
            rec = OrderedDict([("id", r.id), ("uri", r.uri), ("width", r.width), ("height", r.height)])
            if r.tags:
                rec["tags"] = list(r.tags)
            if r.caption is not None:
                rec["caption"] = r.caption
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")
    return path


def read_boxes(path):
    """
    Boxes file: a JSON list of [xmin, ymin, xmax, ymax] lists, or one box per
    line with the four numbers separated by commas or whitespace.

    :param str path: boxes file
    :return list[Box]: boxes in file order
    """
    with open(path, encoding="utf-8") as f:
        text = f.read()
    if text.lstrip().startswith("[["):
        try:
            data = json.loads(text)
        except ValueError as e:
            raise FormatError("invalid JSON: {}".format(e), path)
        return [_box_from_list(b, path, None, "[{}]".format(i)) for i, b in enumerate(data)]
    boxes = []
    for n, s in _record_lines(path):
        parts = [p for p in re.split(r"[,\s]+", s.strip("[]")) if p]
        try:
            boxes.append(_box_from_list([float(p) for p in parts], path, n))
        except ValueError:
            raise FormatError("expected 4 numbers", path, n)
    return boxes


def read_feature_grid(path):
    """
    Binary feature grid: little-endian header (H, W, D as uint32, stride as
    float32) followed by H*W*D float32 values in row-major H, W, D order.

    :param str path: grid file
    :return FeatureGrid: grid
    """
    with open(path, "rb") as f:
        head = f.read(_GRID_HEADER.size)
        if len(head) != _GRID_HEADER.size:
            raise FormatError("truncated header", path)
        h, w, d, stride = _GRID_HEADER.unpack(head)
        body = np.frombuffer(f.read(), dtype="<f4")
    if body.size != h * w * d:
        raise FormatError("expected {} values, found {}".format(h * w * d, body.size), path)
    return FeatureGrid(body.reshape(h, w, d).astype(float), stride)


def write_feature_grid(grid, path):
    _check_writable(path)
    with open(path, "wb") as f:
        f.write(_GRID_HEADER.pack(grid.height, grid.width, grid.channels, grid.stride))
        f.write(np.ascontiguousarray(grid.values, dtype="<f4").tobytes())
    return path


def _cell(x, decimals):
    if isinstance(x, float):
        return "{:.{}f}".format(x, decimals)
    return "-" if x is None else str(x)


def write_table(header, rows, path, delimiter="\t", decimals=4):
    """ Delimiter-separated table with a header row """
    _check_writable(path)
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, delimiter=delimiter, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([_cell(x, decimals) for x in row])
    return path


def format_table(header, rows, decimals=4):
    """ Aligned plain-text table """
    cells = [[str(h) for h in header]] + [[_cell(x, decimals) for x in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells) + "\n"
