"""
Bipartite matching of predictions to ground truth with a weighted
classification + L1 + GIoU cost, and dual-granularity prompt scoring of
decoder queries.
"""
import logging
from collections import namedtuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .exceptions import MatchingError
from .geometry import giou, l1_distance

__all__ = ["CostWeights", "Assignment", "ScoredBox", "MATCH_WEIGHTS", "LOSS_WEIGHTS",
           "NUM_QUERIES", "granularity_scores", "concat_prompts", "classify_granularity",
           "class_agreement", "pair_cost", "cost_matrix", "hungarian", "match_predictions"]

_LOGGER = logging.getLogger(__name__)

NUM_QUERIES = 900
FINE, COARSE = 0, 1
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
_EPS = 1e-8


class CostWeights(namedtuple("CostWeights", ["w_cls", "w_l1", "w_giou"])):
    __slots__ = ()

    def __new__(cls, w_cls=2.0, w_l1=5.0, w_giou=2.0):
        if min(w_cls, w_l1, w_giou) < 0:
            raise MatchingError("Cost weights must be nonnegative: {}".format((w_cls, w_l1, w_giou)))
        return super(CostWeights, cls).__new__(cls, float(w_cls), float(w_l1), float(w_giou))


# weights used while matching, and the ones of the overall training loss
MATCH_WEIGHTS = CostWeights(2.0, 5.0, 2.0)
LOSS_WEIGHTS = CostWeights(1.0, 5.0, 2.0)

# label: hard class, or None; scores: optional {class: probability}
ScoredBox = namedtuple("ScoredBox", ["box", "label", "scores"])
ScoredBox.__new__.__defaults__ = (None, None)


class Assignment(namedtuple("Assignment", ["pairs", "cost"])):
    """ Injective (row, col) pairs sorted by row, and their total cost """
    __slots__ = ()

    @property
    def mapping(self):
        return dict(self.pairs)

    @property
    def rows(self):
        return [r for r, _ in self.pairs]

    @property
    def cols(self):
        return [c for _, c in self.pairs]

    def __len__(self):
        return len(self.pairs)


def granularity_scores(p, q):
    """
    Prompt-query similarity S = P . Q^T.

    :param numpy.ndarray p: C x D prompt matrix
    :param numpy.ndarray q: N x D query matrix
    :return numpy.ndarray: C x N scores
    :raise MatchingError: on dimension mismatch or non-finite input
    """
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    if p.shape[1] != q.shape[1]:
        raise MatchingError("Prompt dimension {} does not match query dimension {}"
                            .format(p.shape[1], q.shape[1]))
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise MatchingError("Prompts and queries must be finite")
    return p @ q.T


def concat_prompts(fine, coarse):
    """
    Stack the fine- and coarse-granularity prompts into a 2 x D matrix.

    :param numpy.ndarray fine: D vector
    :param numpy.ndarray coarse: D vector
    :return numpy.ndarray: 2 x D matrix, row 0 fine, row 1 coarse
    """
    fine, coarse = np.ravel(fine), np.ravel(coarse)
    if fine.shape != coarse.shape:
        raise MatchingError("Prompt sizes differ: {} vs {}".format(fine.shape, coarse.shape))
    return np.stack([fine, coarse])


def classify_granularity(scores):
    """
    :param numpy.ndarray scores: 2 x N output of granularity_scores
    :return numpy.ndarray: per query 0 (fine) or 1 (coarse); ties go to fine
    """
    return np.argmax(np.asarray(scores), axis=0)


def class_agreement(pred, gt_label):
    """
    Score the prediction assigns to the ground-truth class: the probability
    from ``scores`` when present, else 1/0 for a hard label.
    """
    if pred.scores is not None:
        return float(pred.scores.get(gt_label, 0.0))
    return 1.0 if pred.label == gt_label else 0.0


def _focal_cost(s):
    neg = (1 - FOCAL_ALPHA) * (s ** FOCAL_GAMMA) * (-np.log(1 - s + _EPS))
    pos = FOCAL_ALPHA * ((1 - s) ** FOCAL_GAMMA) * (-np.log(s + _EPS))
    return pos - neg


def pair_cost(pred, gt, weights=MATCH_WEIGHTS, frame=None, focal=False):
    """
    w_cls * (1 - s) + w_l1 * L1 + w_giou * (1 - GIoU), where s is the
    prediction's score for the ground-truth class. With ``focal`` the class
    term is the focal-weighted cost instead of 1 - s.

    :param ScoredBox pred: prediction
    :param LabeledBox gt: ground truth with .box and .label
    :param CostWeights weights: term weights
    :param Extent frame: frame used to normalize the L1 term
    :return float: matching cost
    """
    if frame is None:
        raise MatchingError("A frame is required to normalize the L1 term")
    s = class_agreement(pred, gt.label)
    cls_cost = float(_focal_cost(s)) if focal else 1.0 - s
    return weights.w_cls * cls_cost + weights.w_l1 * l1_distance(pred.box, gt.box, frame) + \
        weights.w_giou * (1.0 - giou(pred.box, gt.box))


def cost_matrix(preds, gts, weights=MATCH_WEIGHTS, frame=None, focal=False):
    """
    :return numpy.ndarray: len(preds) x len(gts) cost matrix
    """
    out = np.zeros((len(preds), len(gts)))
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            out[i, j] = pair_cost(p, g, weights, frame, focal)
    return out


def _completion_cost(cost, rows, cols):
    if not rows:
        return 0.0
    sub = cost[np.ix_(rows, cols)]
    r, c = linear_sum_assignment(sub)
    return float(sub[r, c].sum())


def _lexicographic(cost, cols_of_rows, optimum, tol):
    """
    Walk rows in order and move each to the lowest column that still admits an
    optimal completion. Rows never outnumber columns here.
    """
    n_rows, n_cols = cost.shape
    chosen = []
    fixed = 0.0
    free = np.ones(n_cols, dtype=bool)
    for i in range(n_rows):
        rest = list(range(i + 1, n_rows))
        current = cols_of_rows[i]
        candidates = [j for j in np.flatnonzero(free) if j < current]
        if candidates and rest:
            # lower bound: every remaining row takes its cheapest free column
            sub = cost[rest][:, free]
            best = np.sort(sub, axis=1)
            free_idx = np.flatnonzero(free)
            bounds = {}
            for j in candidates:
                k = int(np.searchsorted(free_idx, j))
                row_min = np.where(sub[:, k] == best[:, 0], best[:, 1] if best.shape[1] > 1 else np.inf,
                                   best[:, 0])
                bounds[j] = fixed + cost[i, j] + row_min.sum()
            candidates = [j for j in candidates if bounds[j] <= optimum + tol]
        for j in candidates:
            cols = [k for k in np.flatnonzero(free) if k != j]
            if fixed + cost[i, j] + _completion_cost(cost, rest, cols) <= optimum + tol:
                current = j
                break
        chosen.append(current)
        free[current] = False
        fixed += cost[i, current]
        if rest and current != cols_of_rows[i]:
            cols = list(np.flatnonzero(free))
            sub = cost[np.ix_(rest, cols)]
            r, c = linear_sum_assignment(sub)
            for rr, cc in zip(r, c):
                cols_of_rows[rest[rr]] = cols[cc]
    return chosen


def hungarian(cost, tie_break=True):
    """
    Minimum-cost injective assignment covering min(M, K) pairs.

    Rectangular matrices go to scipy as they are, which gives the same
    optimum as padding the short side with dummy rows or columns of equal
    cost. Among equal-cost optima the one
    whose column sequence (taken over rows of the smaller side, in order) is
    lexicographically lowest is returned.

    :param numpy.ndarray cost: M x K finite cost matrix
    :param bool tie_break: apply lexicographic tie-breaking
    :return Assignment: pairs (row, col) sorted by row, total cost
    :raise MatchingError: non-finite costs or a non-2D matrix
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise MatchingError("Cost must be a 2D matrix, got shape {}".format(cost.shape))
    if cost.size == 0:
        return Assignment((), 0.0)
    if not np.all(np.isfinite(cost)):
        raise MatchingError("Cost matrix contains non-finite values")
    transposed = cost.shape[0] > cost.shape[1]
    work = cost.T if transposed else cost
    rows, cols = linear_sum_assignment(work)
    optimum = float(work[rows, cols].sum())
    cols = [int(c) for c in cols]
    if tie_break:
        tol = 1e-9 * max(1.0, abs(optimum))
        cols = _lexicographic(work, cols, optimum, tol)
    pairs = [(i, c) for i, c in enumerate(cols)]
    if transposed:
        pairs = sorted((c, i) for i, c in pairs)
    total = float(sum(cost[r, c] for r, c in pairs))
    return Assignment(tuple(pairs), total)


def match_predictions(preds, gts, frame, weights=MATCH_WEIGHTS, focal=False):
    """
    Match predictions (rows) to ground truth (columns).

    :param list[ScoredBox] preds: predictions, e.g. the decoder's query boxes
    :param list[LabeledBox] gts: ground truth
    :param Extent frame: image frame
    :return Assignment: prediction index -> ground-truth index
    """
    cost = cost_matrix(preds, gts, weights, frame, focal)
    assignment = hungarian(cost)
    _LOGGER.debug("Matched {} of {} predictions to {} targets, cost {:.4f}".format(
        len(assignment), len(preds), len(gts), assignment.cost))
    return assignment
