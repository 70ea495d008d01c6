"""
Cross-attention feature alignment between voxel and image features.

Each voxel feature queries every position of the flattened image map;
the row-softmax of scaled dot products is the alignment map.  The attended
values pass through a one-layer FFN and are concatenated with the voxel
feature before a linear mix back to ``d`` channels.

Alternative query strategies for ablation: point projection with bilinear
sampling, a non-local mean block, and multi-head cross-attention.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .geometry import project_points
from .image import pixel_to_index
from .layers import Linear, Module, _param


@dataclass
class AlignmentMap:
    weights: np.ndarray    # [J, h*w], rows sum to 1
    per_head: list = None  # multi-head variant only

    def row_image(self, j, h, w):
        return self.weights[j].reshape(h, w)


class CafaParams(Module):
    def __init__(self, d, rng, d_k=128, d_v=128, heads=1, dropout=0.0, layer_norm=False):
        if d_k % heads or d_v % heads:
            raise DimensionError(f"d_k={d_k} and d_v={d_v} must be divisible by heads={heads}")
        self.w_q = _param(rng.standard_normal((d, d_k)) / math.sqrt(d))
        self.w_k = _param(rng.standard_normal((d, d_k)) / math.sqrt(d))
        self.w_v = _param(rng.standard_normal((d, d_v)) / math.sqrt(d))
        self.ffn = Linear(d_v, d, rng, gain=1.0)
        self.mix = Linear(2 * d, d, rng, gain=1.0)
        self.d, self.d_k, self.d_v = d, d_k, d_v
        self.heads = heads
        self.dropout = dropout
        self.layer_norm = layer_norm


class MixParams(Module):
    """Concat-and-project head shared by strategies without attention params."""

    def __init__(self, d, rng):
        self.mix = Linear(2 * d, d, rng, gain=1.0)
        self.d = d


def _layer_norm(x, eps=1e-5):
    centered = x - T.mean(x, axis=-1, keepdims=True)
    var = T.mean(centered * centered, axis=-1, keepdims=True)
    return centered / T.sqrt(var + eps)


def _dropout(x, p, rng):
    if p <= 0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep


def _check_dims(P, F_flat, d):
    if P.ndim != 2 or F_flat.ndim != 2 or P.shape[1] != d or F_flat.shape[1] != d:
        raise DimensionError(f"voxel feats {P.shape} and image feats {F_flat.shape} must both have d={d}")
    if P.shape[0] < 1 or F_flat.shape[0] < 1:
        raise DimensionError("cross-attention needs at least one voxel and one image position")


def _attend(Q, K, V, d_head, dropout, rng):
    beta = T.scale(T.matmul(Q, T.transpose(K)), 1.0 / math.sqrt(d_head))
    align = T.softmax(beta, axis=-1)
    return T.matmul(_dropout(align, dropout, rng), V), align


def _finish(P, attended, params):
    f_att = params.ffn(attended)
    if params.layer_norm:
        f_att = _layer_norm(f_att)
    return params.mix(T.concat([P, f_att], axis=1))


def cafa_forward(P, F_flat, params, rng=None):
    """Single-head cross-attention; returns (fused [J, d], AlignmentMap)."""
    P, F_flat = T._as_tensor(P), T._as_tensor(F_flat)
    _check_dims(P, F_flat, params.d)
    Q = T.matmul(P, params.w_q)
    K = T.matmul(F_flat, params.w_k)
    V = T.matmul(F_flat, params.w_v)
    attended, align = _attend(Q, K, V, params.d_k, params.dropout, rng)
    return _finish(P, attended, params), AlignmentMap(align.data)


def multihead_cafa_forward(P, F_flat, params, heads=None, rng=None):
    """Channel-split multi-head variant; the reported map is the head mean."""
    heads = params.heads if heads is None else heads
    if params.d_k % heads or params.d_v % heads:
        raise DimensionError(f"d_k={params.d_k}, d_v={params.d_v} not divisible by {heads} heads")
    P, F_flat = T._as_tensor(P), T._as_tensor(F_flat)
    _check_dims(P, F_flat, params.d)
    Q = T.matmul(P, params.w_q)
    K = T.matmul(F_flat, params.w_k)
    V = T.matmul(F_flat, params.w_v)
    hk, hv = params.d_k // heads, params.d_v // heads
    outs, maps = [], []
    for h in range(heads):
        out, align = _attend(Q[:, h * hk:(h + 1) * hk], K[:, h * hk:(h + 1) * hk],
                             V[:, h * hv:(h + 1) * hv], hk, params.dropout, rng)
        outs.append(out)
        maps.append(align.data)
    attended = outs[0] if heads == 1 else T.concat(outs, axis=1)
    mean_map = maps[0] if heads == 1 else np.mean(maps, axis=0)
    fused = _finish(P, attended, params)
    return fused, AlignmentMap(mean_map, per_head=maps)


def nonlocal_fusion(P, F_flat, params):
    """Non-local mean block: unscaled dot products normalised by 1/(h*w), no softmax."""
    P, F_flat = T._as_tensor(P), T._as_tensor(F_flat)
    _check_dims(P, F_flat, params.d)
    Q = T.matmul(P, params.w_q)
    K = T.matmul(F_flat, params.w_k)
    V = T.matmul(F_flat, params.w_v)
    weights = T.scale(T.matmul(Q, T.transpose(K)), 1.0 / F_flat.shape[0])
    return _finish(P, T.matmul(weights, V), params)


def project_voxels(centers, proj, image_size, stride):
    """Feature-map sample coordinates and visibility mask for voxel centres."""
    H, W = image_size
    u, v, depth = project_points(proj, centers)
    visible = (depth > 1e-6) & (u >= 0) & (u <= W) & (v >= 0) & (v <= H)
    fu = np.where(visible, pixel_to_index(np.nan_to_num(u), stride), 0.0)
    fv = np.where(visible, pixel_to_index(np.nan_to_num(v), stride), 0.0)
    return fu, fv, visible


def point_projection_fusion(P, fmap, centers, proj, image_size, params):
    """Bilinear-sample the image map at each projected voxel centre.

    Voxels behind the camera or outside the image receive a zero image feature.
    """
    P = T._as_tensor(P)
    if fmap.channels != params.d or P.shape[1] != params.d:
        raise DimensionError(f"voxel feats {P.shape} and image channels {fmap.channels} must match d={params.d}")
    fu, fv, visible = project_voxels(centers, proj, image_size, fmap.stride)
    sampled = T.bilinear_sample_many(fmap.feats, fu, fv) * visible[:, None].astype(np.float64)
    return params.mix(T.concat([P, sampled], axis=1))


# ---------------------------------------------------------------------------
# diagnostics


def attention_mass_in_box(row, box2d, fmap_hw, stride):
    """Attention weight falling inside a 2D pixel box.

    Each feature cell contributes its weight times the fraction of its
    stride x stride pixel footprint (centred on pixel k*stride) covered by
    the box.
    """
    h, w = fmap_hw
    u0 = np.arange(w) * stride - stride / 2
    v0 = np.arange(h) * stride - stride / 2
    cov_u = np.clip(np.minimum(u0 + stride, box2d.u_max) - np.maximum(u0, box2d.u_min), 0, None) / stride
    cov_v = np.clip(np.minimum(v0 + stride, box2d.v_max) - np.maximum(v0, box2d.v_min), 0, None) / stride
    coverage = np.outer(cov_v, cov_u).reshape(-1)
    return float(np.dot(np.asarray(row).reshape(-1), coverage))


def write_alignment_pgm(row, h, w, path):
    """16-bit binary PGM of one alignment row, scaled so the maximum maps to 65535."""
    img = np.asarray(row, dtype=np.float64).reshape(h, w)
    peak = img.max()
    scaled = img / peak if peak > 0 else np.zeros_like(img)
    q = np.round(scaled * 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode())
        fh.write(q.tobytes())


def read_pgm16(path):
    raw = open(path, "rb").read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=">u2").reshape(h, w).astype(np.int64)
