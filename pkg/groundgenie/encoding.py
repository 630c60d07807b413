"""
Numeric object tokens: multi-scale RoI align over feature grids, sin-cos box
positional embedding, and their sum ``V = pool(RoIAlign(F, B)) + PE(B)``.

Channel layout of the positional embedding: the first D/4 entries encode
xmin, then ymin, xmax and ymax; inside a block entries alternate sin, cos.
"""
import logging
import math
from collections import namedtuple

import numpy as np

from .exceptions import EncodingError
from .geometry import area, inside

__all__ = ["FeatureGrid", "FeaturePyramid", "ObjectToken", "sincos_pe", "select_level",
           "roi_align", "assemble_object_token", "encode_objects", "fuse_dual_features",
           "POOL_SIZE", "SAMPLES_PER_BIN", "PE_TEMPERATURE"]

_LOGGER = logging.getLogger(__name__)

POOL_SIZE = 7
SAMPLES_PER_BIN = 2
PE_TEMPERATURE = 10000.0
PE_SCALE = 2 * math.pi
CANONICAL_SIZE = 224.0
CANONICAL_LEVEL = 4
LEVEL_OFFSET = 2

ObjectToken = namedtuple("ObjectToken", ["vector", "box", "level"])


class FeatureGrid(object):
    """ H x W x D feature map; ``stride`` pixels per cell """

    def __init__(self, values, stride):
        values = np.asarray(values, dtype=float)
        if values.ndim != 3:
            raise EncodingError("Feature grid must be H x W x D, got shape {}".format(values.shape))
        if not np.all(np.isfinite(values)):
            raise EncodingError("Feature grid contains non-finite values")
        if not stride > 0:
            raise EncodingError("Stride must be positive, got: {}".format(stride))
        self.values = values
        self.stride = float(stride)

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]

    def __repr__(self):
        return "FeatureGrid({}x{}x{}, stride={})".format(
            self.height, self.width, self.channels, self.stride)


class FeaturePyramid(object):
    """ Feature grids ordered by strictly increasing stride, same channel count """

    def __init__(self, levels):
        levels = list(levels)
        if not levels:
            raise EncodingError("A feature pyramid needs at least one level")
        strides = [g.stride for g in levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise EncodingError("Pyramid strides must strictly increase: {}".format(strides))
        if len({g.channels for g in levels}) != 1:
            raise EncodingError("Pyramid levels disagree on channel count: {}"
                                .format([g.channels for g in levels]))
        self.levels = levels

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    @property
    def channels(self):
        return self.levels[0].channels


def sincos_pe(b, frame, dim, temperature=PE_TEMPERATURE, scale=PE_SCALE):
    """
    Sin-cos positional embedding of a box.

    Coordinates are normalized by the frame and multiplied by ``scale``; each
    expands into D/4 entries [sin(c/f0), cos(c/f0), sin(c/f1), ...] with
    f_k = temperature ** (2k / (D/4)).

    :param Box b: box within the frame
    :param Extent frame: image frame
    :param int dim: embedding size, divisible by 8
    :param float temperature: frequency base
    :param float scale: multiplier applied to normalized coordinates
    :return numpy.ndarray: vector of length dim, entries in [-1, 1]
    :raise EncodingError: if dim is not divisible by 8 or the box leaves the frame
    """
    if dim <= 0 or dim % 8:
        raise EncodingError("Embedding dimension must be a positive multiple of 8, got: {}".format(dim))
    if not inside(b, frame):
        raise EncodingError("Box {} outside frame {}".format(tuple(b), tuple(frame)))
    per_coord = dim // 4
    coords = np.array([b.xmin / frame.width, b.ymin / frame.height,
                       b.xmax / frame.width, b.ymax / frame.height]) * scale
    k = np.arange(per_coord // 2, dtype=float)
    freqs = temperature ** (2 * k / per_coord)
    phases = coords[:, None] / freqs[None, :]
    out = np.empty((4, per_coord))
    out[:, 0::2] = np.sin(phases)
    out[:, 1::2] = np.cos(phases)
    return out.reshape(-1)


def select_level(b, num_levels, level_offset=LEVEL_OFFSET,
                 canonical_size=CANONICAL_SIZE, canonical_level=CANONICAL_LEVEL):
    """
    FPN level assignment:
    clamp(floor(log2(sqrt(area) / 224) + 4) - level_offset, 0, L-1).

    :param Box b: box with positive area
    :param int num_levels: pyramid depth L
    :return int: pyramid level index
    """
    a = area(b)
    if a <= 0:
        raise EncodingError("Cannot assign a pyramid level to zero-area box {}".format(tuple(b)))
    lvl = int(math.floor(math.log2(math.sqrt(a) / canonical_size) + canonical_level)) - level_offset
    return min(max(lvl, 0), num_levels - 1)


def _bilinear(values, ys, xs):
    """ Sample an H x W x D grid at float cell coordinates, clamped to the grid """
    h, w = values.shape[:2]
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    ly = (ys - y0)[..., None]
    lx = (xs - x0)[..., None]
    return values[y0, x0] * (1 - ly) * (1 - lx) + values[y0, x1] * (1 - ly) * lx + \
        values[y1, x0] * ly * (1 - lx) + values[y1, x1] * ly * lx


def roi_align(pyr, b, output=POOL_SIZE, samples_per_bin=SAMPLES_PER_BIN,
              level_offset=LEVEL_OFFSET, level=None):
    """
    Multi-scale RoI align of one box.

    The level comes from select_level unless given. Pixel coordinates map to
    cell coordinates as ``p / stride - 0.5`` so cell centers sit on integers;
    each of the P x P bins averages s x s bilinear samples placed at the
    centers of an s x s sub-grid. Samples are clamped to the grid, so a
    constant grid always yields a constant patch.

    :param FeaturePyramid pyr: feature pyramid
    :param Box b: box with positive area, in pixels
    :param int output: P, output patch side
    :param int samples_per_bin: s, samples per bin side
    :param int level: force a pyramid level
    :return (numpy.ndarray, int): P x P x D patch and the level used
    :raise EncodingError: zero-area box or bad sizes
    """
    if area(b) <= 0:
        raise EncodingError("RoI align needs a positive-area box, got {}".format(tuple(b)))
    if output < 1 or samples_per_bin < 1:
        raise EncodingError("Output size and samples per bin must be >= 1")
    if not isinstance(pyr, FeaturePyramid):
        pyr = FeaturePyramid([pyr])
    lvl = select_level(b, len(pyr), level_offset) if level is None else level
    grid = pyr[lvl]
    x0, y0 = b.xmin / grid.stride - 0.5, b.ymin / grid.stride - 0.5
    bin_w = (b.xmax - b.xmin) / grid.stride / output
    bin_h = (b.ymax - b.ymin) / grid.stride / output
    n = output * samples_per_bin
    # sample centers along each axis, s per bin
    offsets = (np.arange(n) + 0.5) / samples_per_bin
    ys, xs = np.meshgrid(y0 + offsets * bin_h, x0 + offsets * bin_w, indexing="ij")
    samples = _bilinear(grid.values, ys, xs)
    patch = samples.reshape(output, samples_per_bin, output, samples_per_bin, -1).mean(axis=(1, 3))
    return patch, lvl


def assemble_object_token(c, pe, pool="mean", box=None, level=None):
    """
    Object token V = pool(C) + PE.

    :param numpy.ndarray c: P x P x D RoI patch (or an already pooled D vector)
    :param numpy.ndarray pe: positional embedding of length D
    :param str pool: 'mean' or 'max'
    :return ObjectToken: token with provenance
    :raise EncodingError: dimension mismatch
    """
    c = np.asarray(c, dtype=float)
    pe = np.asarray(pe, dtype=float)
    if c.ndim == 1:
        pooled = c
    elif pool == "mean":
        pooled = c.reshape(-1, c.shape[-1]).mean(axis=0)
    elif pool == "max":
        pooled = c.reshape(-1, c.shape[-1]).max(axis=0)
    else:
        raise EncodingError("Unknown pooling: {}".format(pool))
    if pooled.shape != pe.shape:
        raise EncodingError("Pooled content has {} channels, positional embedding {}"
                            .format(pooled.shape[0], pe.shape[0] if pe.ndim else pe.shape))
    return ObjectToken(pooled + pe, box, level)


def encode_objects(pyr, boxes, frame, output=POOL_SIZE, samples_per_bin=SAMPLES_PER_BIN,
                   temperature=PE_TEMPERATURE, pool="mean", level_offset=LEVEL_OFFSET):
    """
    Build one object token per box; tokens are independent of box order.

    :param FeaturePyramid pyr: feature pyramid
    :param list[Box] boxes: boxes within frame
    :param Extent frame: image frame
    :return list[ObjectToken]: tokens, in box order
    """
    tokens = []
    for b in boxes:
        patch, lvl = roi_align(pyr, b, output, samples_per_bin, level_offset)
        pe = sincos_pe(b, frame, pyr.channels, temperature)
        tokens.append(assemble_object_token(patch, pe, pool, box=b, level=lvl))
    _LOGGER.debug("Encoded {} object tokens".format(len(tokens)))
    return tokens


def fuse_dual_features(low, high):
    """
    Concatenate low- and high-resolution tokens along channels. The output keeps
    the low-resolution token layout.

    :param numpy.ndarray low: tokens, last axis is channels
    :param numpy.ndarray high: tokens, last axis is channels, same token count
    :return numpy.ndarray: low.shape[:-1] + (C_low + C_high,)
    :raise EncodingError: token count mismatch
    """
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    n_low = int(np.prod(low.shape[:-1]))
    n_high = int(np.prod(high.shape[:-1]))
    if n_low != n_high:
        raise EncodingError("Token count mismatch: {} low-resolution vs {} high-resolution"
                            .format(n_low, n_high))
    high = high.reshape(low.shape[:-1] + (high.shape[-1],))
    return np.concatenate([low, high], axis=-1)
