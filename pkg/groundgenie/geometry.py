"""
Box algebra, overlap measures and coordinate quantization.

Boxes are continuous ``xyxy`` pixel rectangles with the origin at the top-left
corner, the same convention COCO annotations use once converted from ``xywh``.
"""
import math
from collections import namedtuple

import numpy as np

from .exceptions import BoxError, UndefinedGiouError

__all__ = ["Box", "Extent", "QuantizedBox", "area", "iou", "giou", "l1_distance",
           "quantize", "dequantize", "box_from_xywh", "box_to_xywh", "inside",
           "clip_box", "translate", "enclosing_box", "boxes_to_array", "pairwise_iou"]


class Box(namedtuple("Box", ["xmin", "ymin", "xmax", "ymax"])):
    """ Axis-aligned rectangle in pixel coordinates """
    __slots__ = ()

    def __new__(cls, xmin, ymin, xmax, ymax):
        coords = [float(c) for c in (xmin, ymin, xmax, ymax)]
        if not all(math.isfinite(c) for c in coords):
            raise BoxError("Box coordinates must be finite: {}".format(coords))
        if coords[0] > coords[2] or coords[1] > coords[3]:
            raise BoxError("Box corners out of order: {}".format(coords))
        return super(Box, cls).__new__(cls, *coords)

    @property
    def width(self):
        return self.xmax - self.xmin

    @property
    def height(self):
        return self.ymax - self.ymin


class Extent(namedtuple("Extent", ["width", "height"])):
    """ Image frame size in pixels """
    __slots__ = ()

    def __new__(cls, width, height):
        width, height = float(width), float(height)
        if not (math.isfinite(width) and math.isfinite(height)) or width <= 0 or height <= 0:
            raise BoxError("Extent must be strictly positive: {}x{}".format(width, height))
        return super(Extent, cls).__new__(cls, width, height)


class QuantizedBox(namedtuple("QuantizedBox", ["qxmin", "qymin", "qxmax", "qymax", "bins"])):
    """ Box coordinates mapped to integer bin indices in [0, bins-1] """
    __slots__ = ()

    @property
    def indices(self):
        return self.qxmin, self.qymin, self.qxmax, self.qymax


def area(b):
    """
    Area of a box.

    :param Box b: box
    :return float: nonnegative area
    """
    return (b.xmax - b.xmin) * (b.ymax - b.ymin)


def _intersection(a, b):
    w = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    h = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    return max(w, 0.0) * max(h, 0.0)


def enclosing_box(a, b):
    """
    Smallest box containing both inputs.

    :param Box a: first box
    :param Box b: second box
    :return Box: enclosing box
    """
    return Box(min(a.xmin, b.xmin), min(a.ymin, b.ymin),
               max(a.xmax, b.xmax), max(a.ymax, b.ymax))


def iou(a, b):
    """
    Intersection over union. Defined as 0 when the union is empty so that
    degenerate ground truth does not abort an evaluation.

    :param Box a: first box
    :param Box b: second box
    :return float: IoU in [0, 1]
    """
    inter = _intersection(a, b)
    union = area(a) + area(b) - inter
    if union <= 0:
        return 0.0
    return inter / union


def giou(a, b):
    """
    Generalized IoU: IoU minus the share of the enclosing box not covered by
    the union.

    :param Box a: first box
    :param Box b: second box
    :return float: GIoU in (-1, 1]
    :raise UndefinedGiouError: if both boxes have zero area
    """
    area_a, area_b = area(a), area(b)
    if area_a <= 0 and area_b <= 0:
        raise UndefinedGiouError(a, b)
    inter = _intersection(a, b)
    union = area_a + area_b - inter
    hull = area(enclosing_box(a, b))
    return inter / union - (hull - union) / hull


def l1_distance(a, b, frame):
    """
    Sum of absolute coordinate differences, x coordinates normalized by the
    frame width and y coordinates by the frame height.

    :param Box a: first box
    :param Box b: second box
    :param Extent frame: image frame
    :return float: normalized L1 distance
    """
    return (abs(a.xmin - b.xmin) + abs(a.xmax - b.xmax)) / frame.width + \
        (abs(a.ymin - b.ymin) + abs(a.ymax - b.ymax)) / frame.height


def inside(b, frame):
    """
    Check whether a box lies within the frame.

    :param Box b: box
    :param Extent frame: image frame
    :return bool: True if all corners are within [0, width] x [0, height]
    """
    return b.xmin >= 0 and b.ymin >= 0 and b.xmax <= frame.width and b.ymax <= frame.height


def clip_box(b, frame):
    """
    Clip a box to the frame.

    :param Box b: box
    :param Extent frame: image frame
    :return Box: clipped box, possibly with zero area
    """
    xmin = min(max(b.xmin, 0.0), frame.width)
    ymin = min(max(b.ymin, 0.0), frame.height)
    return Box(xmin, ymin, min(max(b.xmax, xmin), frame.width), min(max(b.ymax, ymin), frame.height))


def translate(b, dx, dy):
    return Box(b.xmin + dx, b.ymin + dy, b.xmax + dx, b.ymax + dy)


def quantize(b, frame, bins):
    """
    Map each coordinate to floor(coord / frame_dim * bins), clamped to
    [0, bins-1].

    :param Box b: box inside the frame
    :param Extent frame: image frame
    :param int bins: number of bins per axis, at least 2
    :return QuantizedBox: bin indices
    :raise BoxError: if the box leaves the frame or bins < 2
    """
    if int(bins) != bins or bins < 2:
        raise BoxError("Bin count must be an integer >= 2, got: {}".format(bins))
    bins = int(bins)
    if not inside(b, frame):
        raise BoxError("Box {} outside frame {}x{}".format(tuple(b), frame.width, frame.height))

    def _q(c, dim):
        return min(max(int(math.floor(c / dim * bins)), 0), bins - 1)

    return QuantizedBox(_q(b.xmin, frame.width), _q(b.ymin, frame.height),
                        _q(b.xmax, frame.width), _q(b.ymax, frame.height), bins)


def dequantize(q, frame):
    """
    Map bin indices back to pixels. Bin centers are used, not lower edges,
    which bounds the per-coordinate round-trip error by half a bin.

    :param QuantizedBox q: bin indices
    :param Extent frame: image frame the indices refer to
    :return Box: box at bin centers
    """
    sx, sy = frame.width / q.bins, frame.height / q.bins
    return Box((q.qxmin + 0.5) * sx, (q.qymin + 0.5) * sy,
               (q.qxmax + 0.5) * sx, (q.qymax + 0.5) * sy)


def box_from_xywh(x, y, w, h):
    """
    Convert COCO storage order to a Box.

    :raise BoxError: on negative sizes
    """
    if w < 0 or h < 0:
        raise BoxError("Negative box size: w={}, h={}".format(w, h))
    return Box(x, y, x + w, y + h)


def box_to_xywh(b):
    return [b.xmin, b.ymin, b.xmax - b.xmin, b.ymax - b.ymin]


def boxes_to_array(boxes):
    """
    Stack boxes into an (N, 4) float array.

    :param Iterable[Box] boxes: boxes
    :return numpy.ndarray: array of shape (N, 4)
    """
    arr = np.asarray([tuple(b) for b in boxes], dtype=float)
    return arr.reshape(-1, 4)


def pairwise_iou(boxes_a, boxes_b):
    """
    IoU for every pair of boxes, vectorized.

    :param numpy.ndarray boxes_a: (N, 4) xyxy array
    :param numpy.ndarray boxes_b: (M, 4) xyxy array
    :return numpy.ndarray: (N, M) IoU matrix, 0 where the union is empty
    """
    a = np.asarray(boxes_a, dtype=float).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=float).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out
