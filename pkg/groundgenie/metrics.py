"""
Detection and region-description metrics.

Unscored predictions (free-form model answers) are judged by precision and
recall at an IoU threshold; scored predictions additionally get COCO-style
mAP with 101-point interpolation over IoU 0.50:0.05:0.95, and LVIS-style
AP per frequency bucket.
"""
import hashlib
import logging
import re
import string
from collections import OrderedDict, namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .const import COCO_IOU_THRESHOLDS, FREQUENCIES, IOU_THRESHOLD, MODE_SCORED, \
    MODE_UNSCORED, RECALL_POINTS, REPORT_DECIMALS
from .exceptions import GroundgenieError
from .geometry import boxes_to_array, iou, pairwise_iou

__all__ = ["Category", "GroundTruth", "Detection", "GroundTruthSet", "DetectionSet",
           "ImageMatch", "PrecisionRecall", "APResult", "FrequencyAP", "EvalReport",
           "RegionCaptionScores", "HashedBagOfWords", "match_detections",
           "precision_recall_at", "average_precision", "frequency_ap", "referring_accuracy",
           "referring_accuracy_rate", "semantic_iou", "semantic_similarity",
           "region_caption_scores", "evaluate", "GLOBAL", "PER_IMAGE"]

_LOGGER = logging.getLogger(__name__)

TP, FP, IGNORED = "tp", "fp", "ignored"
GLOBAL = "global"
PER_IMAGE = "per_image"

Category = namedtuple("Category", ["id", "name", "frequency"])
Category.__new__.__defaults__ = (None,)
GroundTruth = namedtuple("GroundTruth", ["box", "category_id", "ignore"])
GroundTruth.__new__.__defaults__ = (False,)
Detection = namedtuple("Detection", ["box", "category_id", "score"])
Detection.__new__.__defaults__ = (None,)

ImageMatch = namedtuple("ImageMatch", ["labels", "gt_match", "tp", "fp", "fn"])
PrecisionRecall = namedtuple("PrecisionRecall", ["precision", "recall", "tp", "fp", "fn"])
APResult = namedtuple("APResult", ["per_class", "map", "per_threshold"])
FrequencyAP = namedtuple("FrequencyAP", FREQUENCIES)
RegionCaptionScores = namedtuple("RegionCaptionScores", ["ss", "s_iou", "count"])


class GroundTruthSet(object):
    """ Per-image ground truth plus the category table """

    def __init__(self, images=None, categories=None):
        """
        :param Mapping[str, list[GroundTruth]] images: annotations per image id
        :param Iterable[Category] categories: category table; derived from the
            annotations when omitted
        """
        self.images = OrderedDict((k, list(v)) for k, v in (images or {}).items())
        if categories is None:
            ids = sorted({g.category_id for gts in self.images.values() for g in gts}, key=str)
            categories = [Category(i, str(i)) for i in ids]
        self.categories = OrderedDict((c.id, c) for c in categories)
        for image_id, gts in self.images.items():
            for g in gts:
                if g.category_id not in self.categories:
                    raise GroundgenieError("Image '{}' references unknown category {}"
                                           .format(image_id, g.category_id))

    def num_positives(self, category_id=None):
        return sum(1 for gts in self.images.values() for g in gts
                   if not g.ignore and (category_id is None or g.category_id == category_id))

    def __len__(self):
        return len(self.images)


class DetectionSet(object):
    """ Per-image detections; either every detection has a score or none does """

    def __init__(self, images=None):
        """
        :param Mapping[str, list[Detection]] images: detections per image id
        :raise GroundgenieError: mixed scored and unscored detections, or
            scores outside [0, 1]
        """
        self.images = OrderedDict((k, list(v)) for k, v in (images or {}).items())
        has_score = {d.score is not None for dets in self.images.values() for d in dets}
        if len(has_score) > 1:
            raise GroundgenieError("Detections mix scored and unscored records")
        self.scored = has_score == {True}
        for dets in self.images.values():
            for d in dets:
                if d.score is not None and not 0.0 <= d.score <= 1.0:
                    raise GroundgenieError("Confidence out of [0, 1]: {}".format(d.score))

    @property
    def mode(self):
        return MODE_SCORED if self.scored else MODE_UNSCORED

    def __len__(self):
        return sum(len(v) for v in self.images.values())


def _order(dets):
    if dets and all(d.score is not None for d in dets):
        # stable, so equal scores keep their given order
        return sorted(range(len(dets)), key=lambda i: -dets[i].score)
    return list(range(len(dets)))


def _greedy(ious, same_cls, ignore, order, thr):
    labels = [FP] * ious.shape[0]
    gt_match = [-1] * ious.shape[1]
    for i in order:
        best, best_iou = -1, thr
        for j in range(ious.shape[1]):
            if not same_cls[i, j] or ignore[j] or gt_match[j] >= 0:
                continue
            if ious[i, j] >= best_iou and (best < 0 or ious[i, j] > ious[i, best]):
                best, best_iou = j, ious[i, j]
        if best >= 0:
            gt_match[best] = i
            labels[i] = TP
        elif any(same_cls[i, j] and ignore[j] and ious[i, j] >= thr for j in range(ious.shape[1])):
            labels[i] = IGNORED
    fn = sum(1 for j, m in enumerate(gt_match) if m < 0 and not ignore[j])
    return ImageMatch(labels, gt_match, labels.count(TP), labels.count(FP), fn)


def _image_matches(dets, gts, thresholds):
    if dets and gts:
        ious = pairwise_iou(boxes_to_array(d.box for d in dets), boxes_to_array(g.box for g in gts))
    else:
        ious = np.zeros((len(dets), len(gts)))
    same_cls = np.array([[d.category_id == g.category_id for g in gts] for d in dets],
                        dtype=bool).reshape(len(dets), len(gts))
    ignore = [g.ignore for g in gts]
    order = _order(dets)
    return {t: _greedy(ious, same_cls, ignore, order, t) for t in thresholds}


def match_detections(dets, gts, iou_threshold=IOU_THRESHOLD):
    """
    Label the detections of one image as true or false positives.

    Detections are visited in descending confidence when every one has a
    score (ties keep their given order), otherwise in the given order. Each
    takes the unmatched ground truth of its category with the highest IoU at
    or above the threshold. A detection only overlapping ignored ground truth
    is labeled 'ignored' and counts neither way; ignored ground truth never
    counts as a miss.

    :param list[Detection] dets: detections of the image
    :param list[GroundTruth] gts: ground truth of the image
    :param float iou_threshold: minimum IoU for a true positive
    :return ImageMatch: per-detection labels in input order, the detection
        matched to each ground truth (-1 if none), and TP/FP/FN counts
    """
    return _image_matches(list(dets), list(gts), [iou_threshold])[iou_threshold]


def _all_image_ids(dets, gts):
    return sorted(set(gts.images) | set(dets.images), key=str)


def _match_all(dets, gts, thresholds, jobs=1):
    """ {image_id: {threshold: ImageMatch}}, images in sorted id order """
    image_ids = _all_image_ids(dets, gts)

    def _one(image_id):
        return _image_matches(dets.images.get(image_id, []), gts.images.get(image_id, []), thresholds)

    if jobs and jobs > 1 and len(image_ids) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            results = list(executor.map(_one, image_ids))
    else:
        results = [_one(i) for i in image_ids]
    return OrderedDict(zip(image_ids, results))


def _ratio(num, den, empty):
    return num / den if den else empty


def _pr_from_counts(tp, fp, fn):
    # no detections: precision 0 if anything was missed, 1 if there was nothing to find
    precision = _ratio(tp, tp + fp, 0.0 if fn else 1.0)
    recall = _ratio(tp, tp + fn, 1.0)
    return precision, recall


def _reduce_pr(matches, threshold, aggregate):
    per_image = [m[threshold] for m in matches.values()]
    tp = sum(m.tp for m in per_image)
    fp = sum(m.fp for m in per_image)
    fn = sum(m.fn for m in per_image)
    if aggregate == GLOBAL:
        p, r = _pr_from_counts(tp, fp, fn)
    elif aggregate == PER_IMAGE:
        if not per_image:
            p, r = 1.0, 1.0
        else:
            pairs = [_pr_from_counts(m.tp, m.fp, m.fn) for m in per_image]
            p = float(np.mean([x[0] for x in pairs]))
            r = float(np.mean([x[1] for x in pairs]))
    else:
        raise GroundgenieError("Unknown aggregation: {}".format(aggregate))
    return PrecisionRecall(p, r, tp, fp, fn)


def precision_recall_at(dets, gts, iou_threshold=IOU_THRESHOLD, aggregate=GLOBAL, jobs=1):
    """
    Precision and recall at one IoU threshold.

    With 'global' aggregation TP/FP/FN are summed over the dataset first;
    'per_image' averages per-image rates instead. Precision is 0 when ground
    truth exists but nothing was detected and 1 when there is neither.

    :param DetectionSet dets: predictions
    :param GroundTruthSet gts: ground truth
    :param float iou_threshold: IoU threshold
    :param str aggregate: 'global' or 'per_image'
    :return PrecisionRecall: rates and counts
    """
    matches = _match_all(dets, gts, [iou_threshold], jobs)
    return _reduce_pr(matches, iou_threshold, aggregate)


def _interpolated_ap(labels, npos):
    """ 101-point interpolated AP of a confidence-ordered TP/FP label list """
    rec_thrs = np.linspace(0.0, 1.0, RECALL_POINTS)
    if not labels:
        return 0.0
    is_tp = np.array([lab == TP for lab in labels], dtype=float)
    tp = np.cumsum(is_tp)
    fp = np.cumsum(1.0 - is_tp)
    recall = tp / npos
    precision = tp / (tp + fp)
    # make precision monotone non-increasing from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    inds = np.searchsorted(recall, rec_thrs, side="left")
    q = np.zeros(RECALL_POINTS)
    valid = inds < len(precision)
    q[valid] = precision[inds[valid]]
    return float(np.mean(q))


def _ap_from_matches(dets, gts, matches, thresholds):
    per_class = OrderedDict()
    per_threshold = OrderedDict((t, []) for t in thresholds)
    by_cat = {}
    for rank, image_id in enumerate(matches):
        for k, d in enumerate(dets.images.get(image_id, [])):
            score = d.score if d.score is not None else 1.0
            by_cat.setdefault(d.category_id, []).append((-score, rank, k, image_id))
    for ranked in by_cat.values():
        ranked.sort(key=lambda x: x[:3])
    for cat_id in gts.categories:
        npos = gts.num_positives(cat_id)
        if not npos:
            continue
        aps = []
        for t in thresholds:
            labels = [matches[image_id][t].labels[k] for _, _, k, image_id in by_cat.get(cat_id, [])]
            ap = _interpolated_ap([lab for lab in labels if lab != IGNORED], npos)
            per_threshold[t].append(ap)
            aps.append(ap)
        per_class[cat_id] = float(np.mean(aps))
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return APResult(per_class, mean_ap,
                    OrderedDict((t, float(np.mean(v)) if v else 0.0) for t, v in per_threshold.items()))


def average_precision(dets, gts, iou_thresholds=COCO_IOU_THRESHOLDS, jobs=1):
    """
    COCO-style AP. Each class with at least one non-ignored ground truth
    gets the 101-point interpolated AP averaged over the IoU thresholds;
    mAP is the mean over those classes.

    :param DetectionSet dets: scored predictions
    :param GroundTruthSet gts: ground truth
    :param Iterable[float] iou_thresholds: IoU thresholds
    :return APResult: per-class AP, mAP and the class-mean AP per threshold
    """
    thresholds = list(iou_thresholds)
    if not dets.scored and len(dets):
        _LOGGER.warning("Computing AP over unscored detections; every score is taken as 1")
    matches = _match_all(dets, gts, thresholds, jobs)
    return _ap_from_matches(dets, gts, matches, thresholds)


def frequency_ap(per_class, categories):
    """
    Macro AP restricted to each frequency bucket.

    :param Mapping per_class: category id -> AP
    :param Mapping[int, Category] categories: category table with frequency tags
    :return FrequencyAP: bucket AP, None for an empty bucket
    """
    buckets = {f: [] for f in FREQUENCIES}
    for cat_id, ap in per_class.items():
        cat = categories.get(cat_id)
        if cat is not None and cat.frequency in buckets:
            buckets[cat.frequency].append(ap)
    return FrequencyAP(*[float(np.mean(buckets[f])) if buckets[f] else None for f in FREQUENCIES])


def referring_accuracy(pred, gt, threshold=IOU_THRESHOLD, strict=True):
    """
    Whether a single answer box hits the referred object.

    :param Box pred: predicted box, None for no answer
    :param Box gt: ground-truth box
    :param float threshold: IoU threshold
    :param bool strict: require IoU > threshold rather than >=
    :return bool: hit
    """
    if pred is None:
        return False
    overlap = iou(pred, gt)
    return overlap > threshold if strict else overlap >= threshold


def referring_accuracy_rate(pairs, threshold=IOU_THRESHOLD, strict=True):
    """
    :param Iterable[(Box, Box)] pairs: (prediction, ground truth) per expression
    :return float: fraction of hits, 0 for no expressions
    """
    hits = [referring_accuracy(p, g, threshold, strict) for p, g in pairs]
    return sum(hits) / len(hits) if hits else 0.0


_PUNCT = str.maketrans("", "", string.punctuation)


def _tokens(text):
    return (text or "").lower().translate(_PUNCT).split()


def semantic_iou(pred, gt):
    """
    Token-set Jaccard overlap of two descriptions after lowercasing and
    punctuation stripping. Two empty descriptions score 1.

    :param str pred: predicted description
    :param str gt: reference description
    :return float: overlap in [0, 1]
    """
    a, b = set(_tokens(pred)), set(_tokens(gt))
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


class HashedBagOfWords(object):
    """
    Deterministic stand-in text embedder: token counts hashed into a fixed
    number of buckets. It measures word overlap, not meaning.
    """

    def __init__(self, dim=1024):
        self.dim = dim

    def __call__(self, text):
        vec = np.zeros(self.dim)
        for tok in _tokens(text):
            h = int(hashlib.md5(tok.encode("utf-8")).hexdigest(), 16)
            vec[h % self.dim] += 1.0
        return vec


_DEFAULT_EMBEDDER = HashedBagOfWords()


def semantic_similarity(pred, gt, embedder=None):
    """
    Cosine similarity of the two embeddings mapped to [0, 1] as (1 + cos) / 2.

    A zero embedding has no direction: two of them score 1, one scores 0.5.

    :param str pred: predicted description
    :param str gt: reference description
    :param callable embedder: text -> vector; HashedBagOfWords by default
    :return float: similarity in [0, 1]
    """
    embed = embedder or _DEFAULT_EMBEDDER
    u = np.asarray(embed(pred), dtype=float)
    v = np.asarray(embed(gt), dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 and nv == 0:
        return 1.0
    if nu == 0 or nv == 0:
        return 0.5
    if np.array_equal(u, v):
        return 1.0
    cos = min(max(float(np.dot(u, v) / (nu * nv)), -1.0), 1.0)
    # parallel vectors score exactly 1
    return round((1.0 + cos) / 2.0, 12)


def region_caption_scores(pairs, embedder=None):
    """
    Mean SS and S-IoU over (prediction, reference) description pairs.

    :param Iterable[(str, str)] pairs: description pairs
    :return RegionCaptionScores: means (None without pairs) and pair count
    """
    pairs = list(pairs)
    if not pairs:
        return RegionCaptionScores(None, None, 0)
    ss = [semantic_similarity(p, g, embedder) for p, g in pairs]
    si = [semantic_iou(p, g) for p, g in pairs]
    return RegionCaptionScores(float(np.mean(ss)), float(np.mean(si)), len(pairs))


class EvalReport(object):
    """ Everything one evaluation run produced """

    def __init__(self, mode, precision_recall, ap=None, frequency=None, warnings=None, config=None):
        self.mode = mode
        self.precision_recall = precision_recall
        self.ap = ap
        self.frequency = frequency
        self.warnings = list(warnings or [])
        self.config = dict(config or {})

    @property
    def map(self):
        return None if self.ap is None else self.ap.map

    def to_dict(self):
        out = OrderedDict([("mode", self.mode)])
        out["precision_recall"] = OrderedDict(
            ("{:.2f}".format(t), pr._asdict()) for t, pr in self.precision_recall.items())
        if self.ap is not None:
            out["map"] = self.ap.map
            out["ap_per_class"] = OrderedDict((str(k), v) for k, v in self.ap.per_class.items())
            out["ap_per_threshold"] = OrderedDict(
                ("{:.2f}".format(t), v) for t, v in self.ap.per_threshold.items())
        if self.frequency is not None:
            out["ap_frequency"] = self.frequency._asdict()
        out["warnings"] = self.warnings
        out["config"] = self.config
        return out

    def render(self, decimals=REPORT_DECIMALS):
        """ Aligned text form, numbers fixed to the given number of decimals """
        fmt = "{:." + str(decimals) + "f}"

        def _num(x):
            return "-" if x is None else fmt.format(x)

        lines = ["mode: {}".format(self.mode)]
        for t, pr in self.precision_recall.items():
            lines.append("P@{t:.2f}: {p}  R@{t:.2f}: {r}  (TP {tp}, FP {fp}, FN {fn})".format(
                t=t, p=_num(pr.precision), r=_num(pr.recall), tp=pr.tp, fp=pr.fp, fn=pr.fn))
        if self.ap is not None:
            lines.append("mAP@[0.50:0.95]: {}".format(_num(self.ap.map)))
            for t, v in self.ap.per_threshold.items():
                lines.append("  AP@{:.2f}: {}".format(t, _num(v)))
        if self.frequency is not None:
            lines.append("AP-r: {}  AP-c: {}  AP-f: {}".format(
                *[_num(getattr(self.frequency, f)) for f in FREQUENCIES]))
        if self.ap is not None and self.ap.per_class:
            lines.append("per-class AP:")
            width = max(len(str(k)) for k in self.ap.per_class)
            for k, v in self.ap.per_class.items():
                lines.append("  {}  {}".format(str(k).ljust(width), _num(v)))
        for w in self.warnings:
            lines.append("warning: {}".format(w))
        return "\n".join(lines) + "\n"


def _input_warnings(dets, gts):
    warnings = []
    unknown_images = sorted(set(dets.images) - set(gts.images), key=str)
    if unknown_images:
        warnings.append("detections for {} image(s) without ground truth: {}".format(
            len(unknown_images), ", ".join(str(i) for i in unknown_images[:5])))
    unknown_cats = sorted({d.category_id for v in dets.images.values() for d in v
                           if d.category_id not in gts.categories}, key=str)
    if unknown_cats:
        warnings.append("detections with unknown category: {}".format(
            ", ".join(str(c) for c in unknown_cats)))
    return warnings


def evaluate(dets, gts, mode=None, iou_thresholds=(IOU_THRESHOLD,), aggregate=GLOBAL,
             jobs=1, config=None):
    """
    Full evaluation of a detection set.

    P@t and R@t are reported for every requested threshold in both modes.
    Scored mode adds per-class AP, mAP over IoU 0.50:0.95 and the frequency
    buckets when the category table carries frequency tags.

    :param DetectionSet dets: predictions
    :param GroundTruthSet gts: ground truth
    :param str mode: 'scored' or 'unscored'; taken from the detections if None
    :param Iterable[float] iou_thresholds: thresholds for P/R
    :param str aggregate: P/R aggregation, 'global' or 'per_image'
    :param int jobs: worker threads for per-image matching
    :param Mapping config: settings echoed into the report
    :return EvalReport: the report
    """
    mode = mode or dets.mode
    if mode == MODE_SCORED and len(dets) and not dets.scored:
        raise GroundgenieError("Scored evaluation requested but detections carry no confidence")
    pr_thresholds = list(iou_thresholds)
    thresholds = sorted(set(pr_thresholds) | (set(COCO_IOU_THRESHOLDS) if mode == MODE_SCORED else set()))
    matches = _match_all(dets, gts, thresholds, jobs)
    pr = OrderedDict((t, _reduce_pr(matches, t, aggregate)) for t in pr_thresholds)
    ap = freq = None
    if mode == MODE_SCORED:
        ap = _ap_from_matches(dets, gts, matches, list(COCO_IOU_THRESHOLDS))
        if any(c.frequency for c in gts.categories.values()):
            freq = frequency_ap(ap.per_class, gts.categories)
    warnings = _input_warnings(dets, gts)
    for w in warnings:
        _LOGGER.warning(w)
    _LOGGER.info("Evaluated {} detections over {} images ({} mode)".format(
        len(dets), len(matches), mode))
    return EvalReport(mode, pr, ap, freq, warnings, config)
