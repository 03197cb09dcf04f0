"""
Spatial-awareness stage: RoI-align pooling, the candidate/target
cross-attention block, view fusion and the latent-query aligner that turns
fused region tokens into the LLM prefix.
"""
import math
from typing import Sequence

import numpy as np

from models import BBox, PreconditionError
from modules.layers import Component, LayerNorm, Linear, MultiHeadCrossAttention, fan_in_uniform
from modules.tensor import Parameter, Rng, ShapeError, Tensor, dropout, matmul, reshape, silu


# Type aliases for readability; all are plain Tensors.
FeatureMap = Tensor       # G x G x D_v
RegionFeature = Tensor    # P*P x D_v
LatentQuery = Tensor      # M x D_llm


def _bilinear_taps(y: float, x: float, g: int):
    y = min(max(y, 0.0), g - 1.0)
    x = min(max(x, 0.0), g - 1.0)
    y_lo, x_lo = int(math.floor(y)), int(math.floor(x))
    y_hi, x_hi = min(y_lo + 1, g - 1), min(x_lo + 1, g - 1)
    ly, lx = y - y_lo, x - x_lo
    hy, hx = 1.0 - ly, 1.0 - lx
    return ((y_lo * g + x_lo, hy * hx), (y_lo * g + x_hi, hy * lx),
            (y_hi * g + x_lo, ly * hx), (y_hi * g + x_hi, ly * lx))


def roi_sampling_matrix(grid_size: int, box: BBox, output_size: int, sampling_ratio: int) -> np.ndarray:
    """Linear map from the flattened G*G grid to the P*P RoI bins.

    Bin (by, bx) averages sampling_ratio**2 bilinear samples placed at regular
    offsets inside the bin. Continuous grid coordinate u samples feature
    index u - 0.5, so cell centres land exactly on grid points.
    """
    g, p, sr = grid_size, output_size, sampling_ratio
    x0, y0 = box.x0 * g, box.y0 * g
    bin_w = (box.x1 - box.x0) * g / p
    bin_h = (box.y1 - box.y0) * g / p
    weights = np.zeros((p * p, g * g))
    share = 1.0 / (sr * sr)
    for by in range(p):
        for bx in range(p):
            row = by * p + bx
            for iy in range(sr):
                y = y0 + (by + (iy + 0.5) / sr) * bin_h - 0.5
                for ix in range(sr):
                    x = x0 + (bx + (ix + 0.5) / sr) * bin_w - 0.5
                    for col, w in _bilinear_taps(y, x, g):
                        weights[row, col] += w * share
    return weights


def roi_align(fm: FeatureMap, box: BBox, output_size: int, sampling_ratio: int) -> RegionFeature:
    if output_size < 1 or sampling_ratio < 1:
        raise PreconditionError(f"roi_align needs P >= 1 and sampling_ratio >= 1, got {output_size}, {sampling_ratio}")
    if fm.ndim != 3 or fm.shape[0] != fm.shape[1]:
        raise ShapeError(f"roi_align expects a G x G x D feature map, got {fm.shape}")
    g, d = fm.shape[0], fm.shape[2]
    weights = roi_sampling_matrix(g, box, output_size, sampling_ratio)
    return matmul(Tensor(weights), reshape(fm, (g * g, d)))


class SpatialBlock(Component):
    """Pre-norm cross-attention (Q, V from the candidate; K from the target) followed by a SiLU MLP."""

    def __init__(self, name: str, d_v: int, num_heads: int, mlp_hidden: int, dropout_p: float, rng: Rng):
        self.d_v = d_v
        self.dropout_p = dropout_p
        self.ln1_target = LayerNorm(f"{name}.ln1_target", d_v)
        self.ln1_candidate = LayerNorm(f"{name}.ln1_candidate", d_v)
        self.mhca = MultiHeadCrossAttention(f"{name}.mhca", d_v, num_heads, rng, zero_out=True)
        self.ln2 = LayerNorm(f"{name}.ln2", d_v)
        self.mlp_fc1 = Linear(f"{name}.mlp.fc1", d_v, mlp_hidden, rng)
        self.mlp_fc2 = Linear(f"{name}.mlp.fc2", mlp_hidden, mlp_hidden, rng)
        self.mlp_fc3 = Linear(f"{name}.mlp.fc3", mlp_hidden, d_v, rng, zero_init=True)

    def __call__(self, candidate: RegionFeature, target: RegionFeature, rng: Rng, training: bool) -> RegionFeature:
        if candidate.ndim != 2 or target.ndim != 2 or candidate.shape[1] != self.d_v or target.shape[1] != self.d_v:
            raise ShapeError(f"spatial_block: candidate {candidate.shape} / target {target.shape} must be tokens x {self.d_v}")
        if candidate.shape[0] != target.shape[0]:
            raise ShapeError(f"spatial_block: candidate {candidate.shape} and target {target.shape} need equal token counts")
        c = self.ln1_candidate(candidate)
        t = self.ln1_target(target)
        attended = self.mhca(c, t, c)
        y1 = candidate + dropout(attended, self.dropout_p, rng, training)
        m = self.mlp_fc3(silu(self.mlp_fc2(silu(self.mlp_fc1(self.ln2(y1))))))
        return y1 + m


def spatial_block(candidate: RegionFeature, target: RegionFeature, params: SpatialBlock, rng: Rng,
                  training: bool) -> RegionFeature:
    return params(candidate, target, rng, training)


def fuse_views(views: Sequence[RegionFeature], block: SpatialBlock, rng: Rng, training: bool) -> RegionFeature:
    """Token-wise mean of the target and every candidate refined against it; views[0] is the target.

    Dropout streams are keyed by candidate position, so the result is invariant
    to candidate order only with training=False or dropout_p == 0.
    """
    if not views:
        raise PreconditionError("fuse_views needs at least the target view")
    target = views[0]
    total = target
    for i, candidate in enumerate(views[1:], start=1):
        total = total + block(candidate, target, rng.child("view", i), training)
    if len(views) == 1:
        return target
    return total * (1.0 / len(views))


class LatentQueryAligner(Component):
    """Learned query bank attending over fused region tokens, projected to the LLM width."""

    def __init__(self, name: str, d_v: int, d_llm: int, num_queries: int, num_heads: int, rng: Rng):
        self.queries = Parameter(f"{name}.queries", fan_in_uniform(rng.child(name, "queries"), d_v, (num_queries, d_v)))
        self.attn = MultiHeadCrossAttention(f"{name}.attn", d_v, num_heads, rng)
        self.proj = Linear(f"{name}.proj", d_v, d_llm, rng)

    def __call__(self, fused: RegionFeature) -> LatentQuery:
        latents = self.queries + self.attn(self.queries, fused, fused)
        return self.proj(latents)


def build_latent_queries(fused: RegionFeature, align_params: LatentQueryAligner) -> LatentQuery:
    return align_params(fused)
