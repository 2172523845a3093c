"""Input-gradient sensitivity maps and low-sensitivity masking.

Pipeline: the gradient of the winning class probability with respect to
the input gives a signed per-pixel sensitivity (L1-normalized). Absolute
sensitivity is aggregated over a rectangular block partition; blocks are
then accumulated in ascending order of aggregate sensitivity until the
requested mass threshold is crossed, and the accumulated region is
replaced with per-pixel noise drawn from the dataset's pixel statistics.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as af
from . import network

ZERO_GRAD_EPS = 1e-12


class PartitionError(Exception):
    pass


@dataclass(frozen=True)
class Block:
    """Half-open pixel rectangle [r0, r1) x [c0, c1)."""

    r0: int
    c0: int
    r1: int
    c1: int

    @property
    def area(self):
        return (self.r1 - self.r0) * (self.c1 - self.c0)


class BlockPartition:
    """Disjoint rectangular blocks covering an image grid exactly."""

    def __init__(self, image_hw, blocks):
        self.image_hw = tuple(image_hw)
        self.blocks = list(blocks)
        h, w = self.image_hw
        index_map = np.full((h, w), -1, dtype=np.int64)
        for q, b in enumerate(self.blocks):
            if b.r0 < 0 or b.c0 < 0 or b.r1 > h or b.c1 > w or b.r0 >= b.r1 or b.c0 >= b.c1:
                raise PartitionError(f"block {q} out of bounds: {b}")
            region = index_map[b.r0 : b.r1, b.c0 : b.c1]
            if np.any(region != -1):
                raise PartitionError(f"block {q} overlaps an earlier block")
            region[...] = q
        if np.any(index_map == -1):
            raise PartitionError("blocks do not cover the image")
        self.index_map = index_map

    @property
    def num_blocks(self):
        return len(self.blocks)

    @classmethod
    def regular(cls, image_hw, block_h, block_w):
        """Grid of block_h x block_w blocks; trailing blocks absorb remainders."""
        h, w = image_hw
        if block_h <= 0 or block_w <= 0 or block_h > h or block_w > w:
            raise PartitionError(f"block size {block_h}x{block_w} invalid for {h}x{w}")
        row_starts = list(range(0, h - h % block_h, block_h)) or [0]
        col_starts = list(range(0, w - w % block_w, block_w)) or [0]
        blocks = []
        for i, r0 in enumerate(row_starts):
            r1 = row_starts[i + 1] if i + 1 < len(row_starts) else h
            for j, c0 in enumerate(col_starts):
                c1 = col_starts[j + 1] if j + 1 < len(col_starts) else w
                blocks.append(Block(r0, c0, r1, c1))
        return cls(image_hw, blocks)

    @classmethod
    def default(cls, image_hw):
        """Recommended layout: blocks of (rows/8) x (cols/8) pixels."""
        h, w = image_hw
        return cls.regular(image_hw, max(1, h // 8), max(1, w // 8))

    def region_mask(self, block_indices):
        """Boolean (H, W) mask of the union of the given blocks."""
        mask = np.zeros(self.image_hw, dtype=bool)
        for q in block_indices:
            b = self.blocks[q]
            mask[b.r0 : b.r1, b.c0 : b.c1] = True
        return mask


@dataclass
class SensitivityMap:
    """Signed per-pixel sensitivity plus its per-block aggregate."""

    r3d: np.ndarray  # (H, W, C), L1-normalized
    r2d: np.ndarray  # (Q,), nonnegative, sums to 1
    fallback: bool = False  # zero-gradient input, uniform substitute used


@dataclass
class MaskRegion:
    block_indices: list
    mu: float


@dataclass
class PixelStats:
    """Per-pixel population mean and standard deviation of a dataset."""

    mean: np.ndarray
    std: np.ndarray


def compute_pixel_stats(images):
    """Population mean/std per pixel over an image collection (N, H, W, C)."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("compute_pixel_stats requires a nonempty (N, H, W, C) array")
    mean = images.mean(axis=0, dtype=np.float64)
    std = images.std(axis=0, dtype=np.float64)
    return PixelStats(mean=mean.astype(images.dtype), std=std.astype(images.dtype))


def normalize_sensitivity(grad):
    """L1-normalize a raw input gradient; uniform fallback when degenerate.

    Returns (r3d, fallback). The fallback substitutes equal absolute mass
    per pixel so downstream ordering still has a total order.
    """
    total = np.sum(np.abs(grad))
    if total < ZERO_GRAD_EPS:
        return np.full(grad.shape, 1.0 / grad.size, dtype=grad.dtype), True
    return grad / total, False


def input_gradients(model, x, dropout_rng=None):
    """Gradient of the winning class probability w.r.t. a batch of inputs.

    Runs a train-mode forward pass (batch statistics, dropout when a
    generator is given) and one backward pass over the summed per-sample
    maxima. Ties on the maximum route to the smallest class index.
    """
    x = np.asarray(x, dtype=model.dtype())
    with af.Tape() as tape:
        xt = af.leaf(x.copy(), requires_grad=True)
        probs = network.forward_graph(model, xt, train=True, dropout_rng=dropout_rng)
        gmax = af.reduce_sum(af.reduce_max(probs, axis=1))
        tape.backward(gmax)
    return xt.grad


def pixel_sensitivity(model, x, dropout_rng=None):
    """Sensitivity map (r3d part) for one image."""
    grad = input_gradients(model, x[None], dropout_rng=dropout_rng)[0]
    r3d, fallback = normalize_sensitivity(grad)
    return SensitivityMap(r3d=r3d, r2d=None, fallback=fallback)


def block_sensitivity(smap, partition):
    """Aggregate |r3d| per block; fills in the r2d part of the map."""
    if smap.fallback:
        r2d = np.full(partition.num_blocks, 1.0 / partition.num_blocks)
    else:
        per_pixel = np.abs(smap.r3d).sum(axis=-1)
        r2d = np.bincount(
            partition.index_map.ravel(),
            weights=per_pixel.ravel().astype(np.float64),
            minlength=partition.num_blocks,
        )
    smap.r2d = r2d
    return smap


def select_mask(smap, lam):
    """Accumulate blocks in ascending sensitivity order until mass >= lam.

    Ties order by (sensitivity, row-major block index); the greedy loop
    adds blocks while the accumulated mass is still below the threshold.
    """
    if not 0.0 < lam < 1.0:
        raise ValueError(f"mask replacement ratio must lie in (0, 1), got {lam}")
    r2d = np.asarray(smap.r2d, dtype=np.float64)
    order = np.argsort(r2d, kind="stable")
    selected = []
    mu = 0.0
    for q in order:
        if mu >= lam:
            break
        selected.append(int(q))
        mu += float(r2d[q])
    return MaskRegion(block_indices=selected, mu=mu)


def apply_mask(x, region, partition, stats, rng):
    """Replace the selected blocks with mean + std * uniform(-1, 1) noise.

    Pixels outside the region are copied bit-exactly; noise is drawn
    independently per pixel and channel on every call.
    """
    x = np.asarray(x)
    noise = rng.uniform(-1.0, 1.0, size=x.shape)
    if not region.block_indices:
        return x.copy()
    mask2d = partition.region_mask(region.block_indices)
    fill = (stats.mean + stats.std * noise).astype(x.dtype)
    return np.where(mask2d[:, :, None], fill, x)


def masked_batch(grads, x_batch, partition, lam, stats, rng):
    """Build masked twins for a batch from precomputed raw input gradients."""
    out = np.empty_like(x_batch)
    for i in range(x_batch.shape[0]):
        r3d, fallback = normalize_sensitivity(grads[i])
        smap = block_sensitivity(SensitivityMap(r3d=r3d, r2d=None, fallback=fallback), partition)
        region = select_mask(smap, lam)
        out[i] = apply_mask(x_batch[i], region, partition, stats, rng)
    return out
