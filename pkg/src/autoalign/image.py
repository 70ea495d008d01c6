"""Toy image backbone, channel reduction and spatial flattening."""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .layers import Conv2d, Module
from .tensor import Tensor

SUPPORTED_STRIDES = (4, 8, 16, 32)


@dataclass
class FeatureMap:
    feats: Tensor   # [c, h, w]
    stride: int

    @property
    def channels(self):
        return self.feats.shape[0]

    @property
    def hw(self):
        return self.feats.shape[1:]


def pixel_to_index(coord, stride):
    """Continuous image pixel coordinate -> feature-map index coordinate.

    With stride-2, pad-1 3x3 convolutions, feature cell k is centred on
    pixel k*stride, so the map is a plain division.
    """
    return np.asarray(coord, dtype=np.float64) / stride


def stage_strides(stride, min_stages=4):
    n2 = int(round(math.log2(stride)))
    if stride not in SUPPORTED_STRIDES:
        raise DimensionError(f"unsupported backbone stride {stride}; choose from {SUPPORTED_STRIDES}")
    return [2] * n2 + [1] * max(min_stages - n2, 0)


class ImageBackbone(Module):
    """Plain strided conv stack ("C5") plus one extra 3x3 conv ("P5")."""

    def __init__(self, rng, stride=8, channels=(16, 32, 64, 64)):
        strides = stage_strides(stride, len(channels))
        if len(channels) < len(strides):
            channels = tuple(channels) + (channels[-1],) * (len(strides) - len(channels))
        c_prev = 3
        self.stages = []
        for c, s in zip(channels, strides):
            self.stages.append(Conv2d(c_prev, c, 3, rng, stride=s))
            c_prev = c
        self.neck = Conv2d(c_prev, c_prev, 3, rng)
        self.stride = stride
        self.channels = c_prev

    def __call__(self, image):
        img = image if isinstance(image, Tensor) else Tensor(image)
        _, H, W = img.shape
        if H % self.stride or W % self.stride:
            raise DimensionError(f"image {H}x{W} is not divisible by backbone stride {self.stride}")
        x = img
        for conv in self.stages:
            x = T.relu(conv(x))
        c5 = FeatureMap(x, self.stride)
        p5 = FeatureMap(self.neck(x), self.stride)
        return {"c5": c5, "p5": p5}


def backbone_forward(image, params):
    return params(image)


class ReduceDim(Module):
    """1x1 convolution to ``d`` channels."""

    def __init__(self, c, d, rng):
        self.conv = Conv2d(c, d, 1, rng, gain=1.0)

    def __call__(self, z):
        return FeatureMap(self.conv(z.feats), z.stride)


def reduce_dim(z, params):
    return params(z)


def flatten_spatial(f):
    """[c, h, w] -> [h*w, c]; row index = v*w + u."""
    c, h, w = f.feats.shape
    return T.reshape(T.transpose(f.feats, (1, 2, 0)), (h * w, c))


def unflatten_spatial(flat, h, w, stride=1):
    """Inverse of :func:`flatten_spatial`."""
    n, c = flat.shape
    if n != h * w:
        raise DimensionError(f"cannot unflatten {n} rows into {h}x{w}")
    return FeatureMap(T.transpose(T.reshape(flat, (h, w, c)), (2, 0, 1)), stride)


def flat_index_to_pixel(k, w):
    """Row k of a flattened map -> (v, u) feature cell."""
    return k // w, k % w
