"""
Desk-scale experiments comparing detection by retrieval over proposal boxes
with detection by regressing quantized coordinates as tokens.

Every experiment takes a master seed. Per-trial generators are spawned from
it with numpy's SeedSequence, so results do not depend on how trials are
scheduled across workers.
"""
import logging
import math
from collections import OrderedDict, namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .const import IOU_THRESHOLD, TOKENS_PER_BOX
from .exceptions import ConfigError
from .geometry import Box, Extent, clip_box, dequantize, iou, quantize
from .io_formats import format_table, write_table
from .metrics import Category, Detection, DetectionSet, GroundTruth, GroundTruthSet, \
    average_precision, precision_recall_at

__all__ = ["SceneSpec", "ProposalModelSpec", "RegressionModelSpec", "SweepRow", "PipelineResult",
           "ComparisonReport", "generate_scene", "simulate_retrieval", "simulate_regression",
           "quantization_sweep", "compare_pipelines", "retrieval_experiment", "expected_retrieval_recall",
           "expected_regression_recall", "specs_from_mapping", "BOX_MODE", "DIGIT_MODE"]

_LOGGER = logging.getLogger(__name__)

BOX_MODE = "box"
DIGIT_MODE = "digit"
MIN_SWEEP_TRIALS = 1000
HIT_SCORE = 0.8
DISTRACTOR_SCORE = 0.4
_JITTER_ATTEMPTS = 20
_DISTRACTOR_ATTEMPTS = 50

SweepRow = namedtuple("SweepRow", ["frame", "bin_size", "mean_iou"])
PipelineResult = namedtuple("PipelineResult", ["name", "recall", "precision", "map", "expected_recall"])


def _range(value, name, lo=0.0):
    """ Normalize a fixed value or a (low, high) pair """
    pair = tuple(value) if isinstance(value, (list, tuple)) else (value, value)
    if len(pair) != 2 or pair[0] > pair[1] or pair[0] < lo:
        raise ConfigError("{} must be a value or a (low, high) pair >= {}, got: {}".format(name, lo, value))
    return pair


def _probability(value, name):
    if not 0.0 <= value <= 1.0:
        raise ConfigError("{} must be in [0, 1], got: {}".format(name, value))
    return float(value)


class SceneSpec(namedtuple("SceneSpec", ["frame", "num_objects", "box_size", "num_classes", "seed"])):
    """
    Synthetic scene: object count and box side lengths are fixed values or
    (low, high) ranges sampled uniformly; boxes lie fully inside the frame.
    """
    __slots__ = ()

    def __new__(cls, frame=Extent(1000, 1000), num_objects=10, box_size=(20, 60), num_classes=5, seed=0):
        if not isinstance(frame, Extent):
            frame = Extent(*frame)
        lo, hi = _range(num_objects, "num_objects")
        size = _range(box_size, "box_size")
        if size[1] > min(frame):
            raise ConfigError("Boxes of side {} do not fit a {}x{} frame".format(size[1], *frame))
        if num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        return super(SceneSpec, cls).__new__(cls, frame, (int(lo), int(hi)), size, int(num_classes), seed)


class ProposalModelSpec(namedtuple("ProposalModelSpec",
                                   ["recall_target", "jitter", "distractors", "score_noise"])):
    """
    Proposal generator: each object is covered by a proposal (IoU >= 0.5)
    with probability recall_target; jitter is the pixel stddev of the covering
    proposal; distractors are proposals that cover nothing.
    """
    __slots__ = ()

    def __new__(cls, recall_target=0.9, jitter=2.0, distractors=10, score_noise=0.05):
        if jitter < 0 or distractors < 0 or score_noise < 0:
            raise ConfigError("jitter, distractors and score_noise must be nonnegative")
        return super(ProposalModelSpec, cls).__new__(
            cls, _probability(recall_target, "recall_target"), float(jitter), int(distractors),
            float(score_noise))


class RegressionModelSpec(namedtuple("RegressionModelSpec",
                                     ["p", "bins", "tokens_per_box", "cls_accuracy", "mode",
                                      "order_penalty"])):
    """
    Coordinate-as-token detector. bins=None skips quantization. In 'box'
    mode any wrong token loses the whole box; in 'digit' mode every box is
    emitted and each wrong token shifts one coordinate. order_penalty, if
    set, is called as f(position, count) and scales the emission probability
    of the object at that output position.
    """
    __slots__ = ()

    def __new__(cls, p=1.0, bins=1000, tokens_per_box=TOKENS_PER_BOX, cls_accuracy=1.0, mode=BOX_MODE,
                order_penalty=None):
        if bins is not None and (int(bins) != bins or bins < 2):
            raise ConfigError("bins must be an integer >= 2 or None, got: {}".format(bins))
        if int(tokens_per_box) != tokens_per_box or tokens_per_box < 1:
            raise ConfigError("tokens_per_box must be a positive integer")
        if mode not in (BOX_MODE, DIGIT_MODE):
            raise ConfigError("Unknown regression mode: {}".format(mode))
        return super(RegressionModelSpec, cls).__new__(
            cls, _probability(p, "p"), None if bins is None else int(bins), int(tokens_per_box),
            _probability(cls_accuracy, "cls_accuracy"), mode, order_penalty)


def expected_retrieval_recall(recall_target, accuracy):
    """ R@0.5 ceiling of retrieval: an object needs a covering proposal and the right pick """
    return recall_target * accuracy


def expected_regression_recall(p, tokens_per_box=TOKENS_PER_BOX, cls_accuracy=1.0, quant_hit_rate=1.0):
    """ R@0.5 ceiling of box-mode regression """
    return (p ** tokens_per_box) * cls_accuracy * quant_hit_rate


def _sample_box(rng, frame, size):
    w = rng.uniform(*size) if size[0] < size[1] else size[0]
    h = rng.uniform(*size) if size[0] < size[1] else size[0]
    x = rng.uniform(0, frame.width - w)
    y = rng.uniform(0, frame.height - h)
    return clip_box(Box(x, y, x + w, y + h), frame)


def generate_scene(spec, seed=None, image_id="scene"):
    """
    One synthetic image.

    :param SceneSpec spec: scene parameters
    :param seed: seed, SeedSequence or Generator; spec.seed when None
    :param image_id: id of the generated image
    :return GroundTruthSet: one image with the generated objects
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    lo, hi = spec.num_objects
    n = int(rng.integers(lo, hi + 1)) if lo < hi else lo
    gts = []
    for _ in range(n):
        box = _sample_box(rng, spec.frame, spec.box_size)
        gts.append(GroundTruth(box, int(rng.integers(spec.num_classes))))
    return GroundTruthSet({image_id: gts}, _categories(spec))


def _categories(spec):
    return [Category(i, "class{}".format(i)) for i in range(spec.num_classes)]


def _jittered(rng, box, frame, jitter):
    """ A proposal covering the box with IoU >= 0.5 """
    if jitter <= 0:
        return box
    for _ in range(_JITTER_ATTEMPTS):
        c = np.asarray(box) + rng.normal(0.0, jitter, 4)
        cand = clip_box(Box(min(c[0], c[2]), min(c[1], c[3]), max(c[0], c[2]), max(c[1], c[3])), frame)
        if iou(cand, box) >= IOU_THRESHOLD:
            return cand
    return box


def _distractors(rng, gts, frame, size, count):
    """ Proposals overlapping no object at IoU >= 0.5 """
    out = []
    for _ in range(count):
        for _ in range(_DISTRACTOR_ATTEMPTS):
            cand = _sample_box(rng, frame, size)
            if all(iou(cand, g.box) < IOU_THRESHOLD for g in gts):
                out.append(cand)
                break
    return out


def _score(rng, centre, noise):
    return float(min(max(centre + rng.normal(0.0, noise), 0.0), 1.0)) if noise > 0 else centre


def simulate_retrieval(gt, spec, accuracy, scene=SceneSpec(), seed=None):
    """
    Retrieval over proposals: an object gets a covering proposal with
    probability recall_target and the model picks it with probability
    accuracy; otherwise the model answers with a distractor proposal, if the
    image has any. Expected R@0.5 is recall_target * accuracy.

    :param GroundTruthSet gt: scenes
    :param ProposalModelSpec spec: proposal model
    :param float accuracy: probability of picking the right proposal
    :param SceneSpec scene: frame and box sizes used for distractors
    :param seed: seed, SeedSequence or Generator
    :return DetectionSet: scored detections
    """
    accuracy = _probability(accuracy, "accuracy")
    rng = np.random.default_rng(seed)
    images = OrderedDict()
    for image_id, gts in gt.images.items():
        pool = _distractors(rng, gts, scene.frame, scene.box_size, spec.distractors)
        dets = []
        for g in gts:
            covered = rng.random() < spec.recall_target
            picked = rng.random() < accuracy
            if covered:
                proposal = _jittered(rng, g.box, scene.frame, spec.jitter)
            if covered and picked:
                dets.append(Detection(proposal, g.category_id, _score(rng, HIT_SCORE, spec.score_noise)))
            elif pool:
                box = pool[int(rng.integers(len(pool)))]
                dets.append(Detection(box, g.category_id, _score(rng, DISTRACTOR_SCORE, spec.score_noise)))
        images[image_id] = dets
    return DetectionSet(images)


def _digit_shift(rng, box, frame, errors):
    c = list(box)
    for _ in range(errors):
        k = int(rng.integers(4))
        c[k] += float(rng.choice([-1, 1])) * 10 ** int(rng.integers(3))
    c = [min(max(v, 0.0), frame.width if k % 2 == 0 else frame.height) for k, v in enumerate(c)]
    return Box(min(c[0], c[2]), min(c[1], c[3]), max(c[0], c[2]), max(c[1], c[3]))


def _round_trip(box, frame, bins):
    return box if bins is None else dequantize(quantize(box, frame, bins), frame)


def simulate_regression(gt, spec, scene=SceneSpec(), seed=None):
    """
    Coordinate regression through tokens. In 'box' mode an object is emitted
    with probability p ** tokens_per_box; emitted boxes pass through
    quantize/dequantize and keep their class with probability cls_accuracy.

    :param GroundTruthSet gt: scenes
    :param RegressionModelSpec spec: regression model
    :param SceneSpec scene: frame and class count
    :param seed: seed, SeedSequence or Generator
    :return DetectionSet: unscored detections
    """
    rng = np.random.default_rng(seed)
    survival = spec.p ** spec.tokens_per_box
    images = OrderedDict()
    for image_id, gts in gt.images.items():
        dets = []
        for pos, g in enumerate(gts):
            factor = spec.order_penalty(pos, len(gts)) if spec.order_penalty else 1.0
            box = _round_trip(g.box, scene.frame, spec.bins)
            if spec.mode == BOX_MODE:
                if rng.random() >= survival * factor:
                    continue
            else:
                if rng.random() >= factor:
                    continue
                errors = int(rng.binomial(spec.tokens_per_box, 1.0 - spec.p))
                if errors:
                    box = _digit_shift(rng, box, scene.frame, errors)
            cls = g.category_id
            if scene.num_classes > 1 and rng.random() >= spec.cls_accuracy:
                others = [c for c in range(scene.num_classes) if c != cls]
                cls = others[int(rng.integers(len(others)))]
            dets.append(Detection(box, cls))
        images[image_id] = dets
    return DetectionSet(images)


def quantization_sweep(frame_sizes, bins, box_size=(20, 20), trials=10000, seed=0):
    """
    Mean IoU between boxes and their quantize/dequantize round trip, per
    square frame size, at a fixed bin count and fixed absolute box sizes.
    All frame sizes see the same random draws.

    :param Iterable[int] frame_sizes: frame sides in pixels
    :param int bins: bin count per axis
    :param box_size: box side, fixed or (low, high)
    :param int trials: boxes per frame size, at least 1000
    :return list[SweepRow]: rows in the given frame order
    """
    frame_sizes = list(frame_sizes)
    if trials < MIN_SWEEP_TRIALS:
        raise ConfigError("A sweep needs at least {} trials, got: {}".format(MIN_SWEEP_TRIALS, trials))
    if not frame_sizes:
        return []
    size = _range(box_size, "box_size")
    if size[1] > min(frame_sizes):
        raise ConfigError("Box side {} exceeds the smallest frame {}".format(size[1], min(frame_sizes)))
    u = np.random.default_rng(seed).random((trials, 4))
    w = size[0] + u[:, 0] * (size[1] - size[0])
    h = size[0] + u[:, 1] * (size[1] - size[0])
    rows = []
    for side in frame_sizes:
        frame = Extent(side, side)
        x = u[:, 2] * (side - w)
        y = u[:, 3] * (side - h)
        boxes = (clip_box(Box(x[i], y[i], x[i] + w[i], y[i] + h[i]), frame) for i in range(trials))
        ious = [iou(b, _round_trip(b, frame, bins)) for b in boxes]
        rows.append(SweepRow(side, side / bins, float(np.mean(ious))))
        _LOGGER.debug("Frame {}: bin {:.3f}px, mean IoU {:.4f}".format(side, side / bins, rows[-1].mean_iou))
    return rows


class ComparisonReport(object):
    """ Retrieval vs regression on the same simulated scenes """

    HEADER = ["pipeline", "R@0.5", "P@0.5", "mAP", "expected_R@0.5"]

    def __init__(self, retrieval, regression, objects, images, config=None):
        self.retrieval = retrieval
        self.regression = regression
        self.objects = objects
        self.images = images
        self.config = dict(config or {})

    @property
    def winner(self):
        if math.isclose(self.retrieval.expected_recall, self.regression.expected_recall):
            return "tie"
        return self.retrieval.name if self.retrieval.expected_recall > self.regression.expected_recall \
            else self.regression.name

    @property
    def rows(self):
        return [list(self.retrieval), list(self.regression)]

    def to_dict(self):
        return OrderedDict([
            ("objects", self.objects), ("images", self.images),
            ("retrieval", self.retrieval._asdict()), ("regression", self.regression._asdict()),
            ("crossover", "{} ceiling {:.4f} vs {} ceiling {:.4f}".format(
                self.retrieval.name, self.retrieval.expected_recall,
                self.regression.name, self.regression.expected_recall)),
            ("winner", self.winner), ("config", self.config)])

    def render(self, decimals=4):
        return format_table(self.HEADER, self.rows, decimals) + \
            "objects: {}  images: {}  higher ceiling: {}\n".format(self.objects, self.images, self.winner)

    def write_table(self, path, decimals=4):
        return write_table(self.HEADER, self.rows, path, decimals=decimals)


def _trial(args):
    child, scene, retrieval_spec, accuracy, regression_spec, image_id = args
    scene_seed, ret_seed, reg_seed = child.spawn(3)
    gt = generate_scene(scene, scene_seed, image_id)
    ret = simulate_retrieval(gt, retrieval_spec, accuracy, scene, ret_seed) \
        if retrieval_spec is not None else None
    reg = simulate_regression(gt, regression_spec, scene, reg_seed) \
        if regression_spec is not None else None
    return gt, ret, reg


def _run_trials(scene, trials, seed, jobs, retrieval_spec=None, accuracy=1.0, regression_spec=None):
    """ Simulate one scene per trial; returns ground truth and both detection sets """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    master = np.random.SeedSequence(scene.seed if seed is None else seed)
    args = [(child, scene, retrieval_spec, accuracy, regression_spec, "t{:06d}".format(i))
            for i, child in enumerate(master.spawn(trials))]
    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            results = list(executor.map(_trial, args))
    else:
        results = [_trial(a) for a in args]
    gt_images, ret_images, reg_images = OrderedDict(), OrderedDict(), OrderedDict()
    for gt, ret, reg in results:
        gt_images.update(gt.images)
        if ret is not None:
            ret_images.update(ret.images)
        if reg is not None:
            reg_images.update((k, [Detection(d.box, d.category_id, 1.0) for d in v])
                              for k, v in reg.images.items())
    return GroundTruthSet(gt_images, _categories(scene)), DetectionSet(ret_images), DetectionSet(reg_images)


def _score_pipeline(name, dets, gts, expected, jobs):
    pr = precision_recall_at(dets, gts, IOU_THRESHOLD, jobs=jobs)
    ap = average_precision(dets, gts, jobs=jobs)
    return PipelineResult(name, pr.recall, pr.precision, ap.map, expected)


def retrieval_experiment(scene, retrieval_spec, accuracy, trials=1000, seed=None, jobs=1):
    """
    Score simulate_retrieval alone over one scene per trial.

    :return PipelineResult: R@0.5, P@0.5, mAP and the recall_target * accuracy ceiling
    """
    gts, dets, _ = _run_trials(scene, trials, seed, jobs, retrieval_spec, accuracy)
    return _score_pipeline("retrieval", dets, gts,
                           expected_retrieval_recall(retrieval_spec.recall_target, accuracy), jobs)


def compare_pipelines(scene, retrieval_spec, accuracy, regression_spec, trials=1000, seed=None, jobs=1):
    """
    Run both simulators over the same scenes and score them with the metrics
    module. Regression output carries no confidence; it is ranked with score 1
    for mAP.

    :param SceneSpec scene: scene parameters; one scene per trial
    :param ProposalModelSpec retrieval_spec: proposal model
    :param float accuracy: retrieval pick accuracy
    :param RegressionModelSpec regression_spec: regression model
    :param int trials: number of scenes
    :param int seed: master seed; scene.seed when None
    :param int jobs: worker threads
    :return ComparisonReport: metrics plus closed-form ceilings
    """
    gts, ret_dets, reg_dets = _run_trials(scene, trials, seed, jobs, retrieval_spec, accuracy, regression_spec)
    n_objects = gts.num_positives()
    quant_hits = [iou(_round_trip(g.box, scene.frame, regression_spec.bins), g.box) >= IOU_THRESHOLD
                  for v in gts.images.values() for g in v]
    quant_rate = float(np.mean(quant_hits)) if quant_hits else 1.0
    cls_accuracy = regression_spec.cls_accuracy if scene.num_classes > 1 else 1.0
    retrieval = _score_pipeline("retrieval", ret_dets, gts,
                                expected_retrieval_recall(retrieval_spec.recall_target, accuracy), jobs)
    regression = _score_pipeline("regression", reg_dets, gts, expected_regression_recall(
        regression_spec.p, regression_spec.tokens_per_box, cls_accuracy, quant_rate), jobs)
    _LOGGER.info("Compared pipelines over {} objects in {} scenes".format(n_objects, trials))
    config = OrderedDict([("scene", _spec_dict(scene)), ("retrieval", _spec_dict(retrieval_spec)),
                          ("accuracy", accuracy), ("regression", _spec_dict(regression_spec)),
                          ("trials", trials), ("seed", scene.seed if seed is None else seed)])
    return ComparisonReport(retrieval, regression, n_objects, trials, config)


def _spec_dict(spec):
    out = OrderedDict()
    for k, v in spec._asdict().items():
        if callable(v):
            v = getattr(v, "__name__", repr(v))
        elif isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def specs_from_mapping(m):
    """
    Build simulator specs from a config mapping with optional 'scene',
    'retrieval' and 'regression' sections.

    :param Mapping m: settings
    :return (SceneSpec, ProposalModelSpec, float, RegressionModelSpec): specs
        and the retrieval pick accuracy
    :raise ConfigError: unknown keys or invalid values
    """
    m = dict(m or {})
    scene = dict(m.get("scene") or {})
    retrieval = dict(m.get("retrieval") or {})
    regression = dict(m.get("regression") or {})
    accuracy = retrieval.pop("accuracy", 1.0)
    if "frame" in scene:
        scene["frame"] = Extent(*scene["frame"])
    try:
        return SceneSpec(**scene), ProposalModelSpec(**retrieval), float(accuracy), \
            RegressionModelSpec(**regression)
    except TypeError as e:
        raise ConfigError("Invalid simulation settings: {}".format(e))
