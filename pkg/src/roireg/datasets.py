"""Dataset ingestion, preprocessing, splitting, and the synthetic benchmark.

Images live in float32 arrays of shape (N, rows, cols, channels); labels,
when present, are integers in 1..K. Files use a little-endian binary
container (magic "RRDS") so loading is deterministic and codec-free.

The synthetic "glyph" generator draws K block-structured shapes on small
gray canvases with background clutter and additive noise. It stands in
for natural-image benchmarks at desk scale: learnable by a small
convnet, not linearly separable, and cheap enough for full training
runs inside a test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

RRDS_MAGIC = b"RRDS"
RRDS_VERSION = 1


class DatasetFormatError(Exception):
    """Malformed dataset file; the message carries the byte offset."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float32
    labels: np.ndarray = None  # (N,) ints in 1..K, or None
    num_classes: int = 0
    note: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise ValueError("labels length does not match image count")
            if self.labels.size and (
                self.labels.min() < 1 or (self.num_classes and self.labels.max() > self.num_classes)
            ):
                raise ValueError("labels out of range 1..K")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx):
        labels = self.labels[idx] if self.labels is not None else None
        return Dataset(self.images[idx], labels, self.num_classes, self.note)


def save_rrds(ds, path):
    with open(path, "wb") as fh:
        fh.write(RRDS_MAGIC)
        n, h, w, c = ds.images.shape
        has_labels = ds.labels is not None
        fh.write(struct.pack("<IQIIIIB", RRDS_VERSION, n, h, w, c, ds.num_classes, has_labels))
        fh.write(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
        if has_labels:
            fh.write(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())


def load_rrds(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise DatasetFormatError(f"truncated file reading {what} at byte {off} of {len(blob)}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != RRDS_MAGIC:
        raise DatasetFormatError("bad magic at byte 0: not a dataset file")
    version, n, h, w, c, k, has_labels = struct.unpack("<IQIIIIB", take(29, "header"))
    if version != RRDS_VERSION:
        raise DatasetFormatError(f"unsupported version {version} at byte 4")
    count = n * h * w * c
    images = np.frombuffer(take(4 * count, "image payload"), dtype="<f4").reshape(n, h, w, c)
    labels = None
    if has_labels:
        labels = np.frombuffer(take(4 * n, "labels"), dtype="<u4").astype(np.int64)
    if off != len(blob):
        raise DatasetFormatError(f"{len(blob) - off} trailing bytes at byte {off}")
    return Dataset(images.copy(), labels, num_classes=int(k))


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------


def scale_to_unit_range(ds):
    """Map raw byte values [0, 255] onto [-1, 1] via v / 127.5 - 1."""
    imgs = ds.images
    if imgs.min() < 0.0 or imgs.max() > 255.0:
        raise ValueError(
            "scale_to_unit_range expects raw values in [0, 255]; "
            f"got [{imgs.min():.3f}, {imgs.max():.3f}] (already scaled?)"
        )
    return Dataset(imgs / 127.5 - 1.0, ds.labels, ds.num_classes, ds.note)


def unscale_from_unit_range(images):
    """Inverse of scale_to_unit_range (returns float values, not bytes)."""
    return (np.asarray(images) + 1.0) * 127.5


@dataclass
class ZcaTransform:
    """Whitening transform fit on a training split.

    The whitening matrix is U diag(1/sqrt(s + eps)) U^T for the covariance
    eigendecomposition, hence symmetric; the stored inverse undoes it up
    to the regularization.
    """

    mean: np.ndarray
    matrix: np.ndarray
    inverse: np.ndarray
    eps: float


def fit_zca(train_ds, eps=1e-5):
    x = train_ds.images.reshape(len(train_ds), -1).astype(np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / x.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    if np.min(evals) + eps <= 0:
        raise ValueError(f"covariance not positive definite after eps={eps}")
    scale = 1.0 / np.sqrt(evals + eps)
    matrix = (evecs * scale) @ evecs.T
    inverse = (evecs * np.sqrt(evals + eps)) @ evecs.T
    return ZcaTransform(mean=mean, matrix=matrix, inverse=inverse, eps=eps)


def apply_zca(zca, images):
    shape = images.shape
    flat = images.reshape(shape[0], -1).astype(np.float64)
    out = (flat - zca.mean) @ zca.matrix
    return out.reshape(shape).astype(np.float32)


def invert_zca(zca, images):
    shape = images.shape
    flat = images.reshape(shape[0], -1).astype(np.float64)
    out = flat @ zca.inverse + zca.mean
    return out.reshape(shape).astype(np.float32)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentationPolicy:
    translate: int = 0  # max offset in pixels, each axis
    flip: bool = False
    rgb_shuffle: bool = False
    noise_sigma: float = 0.0

    def __post_init__(self):
        if self.translate < 0 or self.noise_sigma < 0:
            raise ValueError("augmentation parameters must be nonnegative")

    @property
    def enabled(self):
        return self.translate > 0 or self.flip or self.rgb_shuffle or self.noise_sigma > 0


def _translate(x, dr, dc):
    out = np.zeros_like(x)
    h, w = x.shape[:2]
    src_r = slice(max(0, -dr), min(h, h - dr))
    dst_r = slice(max(0, dr), min(h, h + dr))
    src_c = slice(max(0, -dc), min(w, w - dc))
    dst_c = slice(max(0, dc), min(w, w + dc))
    out[dst_r, dst_c] = x[src_r, src_c]
    return out


def augment(x, policy, rng):
    """Apply the policy to one image: shuffle, flip, translate, then noise."""
    x = np.asarray(x)
    if policy.rgb_shuffle:
        if x.shape[-1] != 3:
            raise ValueError("rgb_shuffle requires 3-channel images")
        x = x[:, :, rng.permutation(3)]
    if policy.flip and rng.random() < 0.5:
        x = x[:, ::-1, :]
    if policy.translate > 0:
        dr = int(rng.integers(-policy.translate, policy.translate + 1))
        dc = int(rng.integers(-policy.translate, policy.translate + 1))
        if dr or dc:
            x = _translate(x, dr, dc)
    if policy.noise_sigma > 0:
        x = x + rng.standard_normal(size=x.shape).astype(x.dtype) * policy.noise_sigma
    return np.ascontiguousarray(x, dtype=np.float32)


def augment_batch(xb, policy, rng):
    if not policy.enabled:
        return xb
    return np.stack([augment(xb[i], policy, rng) for i in range(xb.shape[0])])


# ---------------------------------------------------------------------------
# splits and sampling
# ---------------------------------------------------------------------------


@dataclass
class SplitPlan:
    n_labeled: int = 0
    labels_per_class: int = 0  # alternative to n_labeled; balanced draw
    n_val: int = 0
    n_unlabeled: int = -1  # -1: everything left over
    seed: int = 0
    lambda_mis: float = None  # contamination percentage, 0..100
    in_classes: tuple = None  # task classes when lambda_mis is set


@dataclass
class SplitResult:
    labeled: Dataset
    val: Dataset
    unlabeled_images: np.ndarray
    usl_images: np.ndarray  # labeled images followed by unlabeled images
    n_in_class: int = 0
    n_out_class: int = 0
    class_map: dict = None  # original label -> task label, when remapped


def _balanced_pick(labels, per_class, classes, rng):
    picks = []
    for cls in classes:
        pool = np.flatnonzero(labels == cls)
        if pool.size < per_class:
            raise ValueError(f"class {cls}: need {per_class} samples, have {pool.size}")
        picks.append(rng.choice(pool, size=per_class, replace=False))
    return np.concatenate(picks)


def build_splits(source, plan):
    """Carve labeled / validation / unlabeled splits out of one dataset.

    Without contamination, validation is removed first, then the labeled
    set, and the remainder becomes the unlabeled pool (all disjoint).
    With ``lambda_mis`` set, the unlabeled pool mixes exact counts of
    task-class and off-task samples, the labeled set is drawn
    class-balanced from task classes, and labels are remapped to 1..K.
    """
    if source.labels is None:
        raise ValueError("build_splits needs a labeled source dataset")
    rng = np.random.default_rng(plan.seed)

    if plan.lambda_mis is None:
        order = rng.permutation(len(source))
        if plan.n_val + max(plan.n_labeled, 1) > len(source):
            raise ValueError("split sizes exceed the dataset")
        val_idx = order[: plan.n_val]
        rest = order[plan.n_val :]
        rest_labels = source.labels[rest]
        if plan.labels_per_class:
            classes = np.unique(source.labels)
            lab_pos = _balanced_pick(rest_labels, plan.labels_per_class, classes, rng)
        else:
            if plan.n_labeled > rest.size:
                raise ValueError("n_labeled exceeds remaining samples")
            lab_pos = np.arange(plan.n_labeled)
        lab_idx = rest[lab_pos]
        ul_mask = np.ones(rest.size, dtype=bool)
        ul_mask[lab_pos] = False
        ul_idx = rest[ul_mask]
        if plan.n_unlabeled >= 0:
            if plan.n_unlabeled > ul_idx.size:
                raise ValueError("n_unlabeled exceeds remaining samples")
            ul_idx = ul_idx[: plan.n_unlabeled]
        labeled = source.subset(lab_idx)
        val = source.subset(val_idx)
        ul_images = source.images[ul_idx]
        return SplitResult(
            labeled=labeled,
            val=val,
            unlabeled_images=ul_images,
            usl_images=np.concatenate([labeled.images, ul_images]),
            n_in_class=ul_idx.size,
        )

    # class-distribution-mismatch construction
    if not plan.in_classes:
        raise ValueError("lambda_mis requires in_classes")
    if not 0.0 <= plan.lambda_mis <= 100.0:
        raise ValueError("lambda_mis must lie in [0, 100]")
    if plan.n_unlabeled < 0:
        raise ValueError("lambda_mis requires an explicit n_unlabeled")
    n_out_f = 0.01 * plan.lambda_mis * plan.n_unlabeled
    n_out = int(round(n_out_f))
    if abs(n_out_f - n_out) > 1e-9:
        raise ValueError(
            f"lambda_mis={plan.lambda_mis} with n_unlabeled={plan.n_unlabeled} "
            "does not give an integral contamination count"
        )
    n_in = plan.n_unlabeled - n_out

    in_classes = tuple(sorted(plan.in_classes))
    class_map = {orig: i + 1 for i, orig in enumerate(in_classes)}
    in_mask = np.isin(source.labels, in_classes)
    in_pool = np.flatnonzero(in_mask)
    out_pool = np.flatnonzero(~in_mask)
    rng.shuffle(in_pool)
    rng.shuffle(out_pool)

    val_idx = in_pool[: plan.n_val]
    rest_in = in_pool[plan.n_val :]
    per_class = plan.labels_per_class
    if not per_class:
        raise ValueError("mismatch splits draw the labeled set per class")
    lab_pos = _balanced_pick(source.labels[rest_in], per_class, in_classes, rng)
    lab_idx = rest_in[lab_pos]
    remaining = np.ones(rest_in.size, dtype=bool)
    remaining[lab_pos] = False
    ul_in_pool = rest_in[remaining]
    if n_in > ul_in_pool.size or n_out > out_pool.size:
        raise ValueError("not enough samples for the requested contamination mix")
    ul_idx = np.concatenate([ul_in_pool[:n_in], out_pool[:n_out]])

    def remap(ds):
        labels = np.array([class_map[v] for v in ds.labels], dtype=np.int64)
        return Dataset(ds.images, labels, num_classes=len(in_classes), note=ds.note)

    labeled = remap(source.subset(lab_idx))
    val = remap(source.subset(val_idx))
    ul_images = source.images[ul_idx]
    return SplitResult(
        labeled=labeled,
        val=val,
        unlabeled_images=ul_images,
        usl_images=np.concatenate([labeled.images, ul_images]),
        n_in_class=n_in,
        n_out_class=n_out,
        class_map=class_map,
    )


@dataclass
class Minibatch:
    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray


def sample_minibatch(labeled, usl_images, m_l, m_ul, rng):
    """Draw a labeled part and an unlabeled part, without replacement within
    the batch (the unlabeled part comes from the union pool, labels ignored)."""
    if m_l > len(labeled):
        raise ValueError(f"m_l={m_l} exceeds labeled set size {len(labeled)}")
    li = rng.choice(len(labeled), size=m_l, replace=False)
    ui = rng.choice(usl_images.shape[0], size=m_ul, replace=False)
    return Minibatch(labeled.images[li], labeled.labels[li], usl_images[ui])


# ---------------------------------------------------------------------------
# synthetic glyph benchmark
# ---------------------------------------------------------------------------

_GLYPHS = {}


def _stencil(rows):
    return np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)


_GLYPHS[1] = _stencil(  # hollow box
    ["########", "#......#", "#......#", "#......#", "#......#", "#......#", "#......#", "########"]
)
_GLYPHS[2] = _stencil(  # plus
    ["...##...", "...##...", "...##...", "########", "########", "...##...", "...##...", "...##..."]
)
_GLYPHS[3] = _stencil(  # diagonal cross
    ["#......#", ".#....#.", "..#..#..", "...##...", "...##...", "..#..#..", ".#....#.", "#......#"]
)
_GLYPHS[4] = _stencil(  # double bars
    ["########", "########", "........", "........", "........", "........", "########", "########"]
)
_GLYPHS[5] = _stencil(  # tee
    ["########", "########", "...##...", "...##...", "...##...", "...##...", "...##...", "...##..."]
)
_GLYPHS[6] = _stencil(  # filled block
    ["........", "..####..", ".######.", ".######.", ".######.", ".######.", "..####..", "........"]
)

GLYPH_CLASSES = len(_GLYPHS)


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    height: int = 16
    width: int = 16
    per_class: int = 100
    noise: float = 12.0  # additive gaussian sigma, raw units
    clutter: int = 6  # number of 2x2 distractor dots
    jitter: int = 3  # max placement offset of the glyph
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= GLYPH_CLASSES:
            raise ValueError(f"num_classes must lie in 2..{GLYPH_CLASSES}")
        if self.height < 8 + 2 * self.jitter or self.width < 8 + 2 * self.jitter:
            raise ValueError("canvas too small for the glyph plus jitter")


BACKGROUND = 18.0
FOREGROUND = 220.0


def generate_synthetic(spec):
    """Deterministic glyph dataset in raw [0, 255] units."""
    rng = np.random.default_rng(spec.seed)
    n = spec.num_classes * spec.per_class
    images = np.full((n, spec.height, spec.width, 1), BACKGROUND, dtype=np.float32)
    labels = np.repeat(np.arange(1, spec.num_classes + 1), spec.per_class)
    base_r = (spec.height - 8) // 2
    base_c = (spec.width - 8) // 2
    for i in range(n):
        canvas = images[i, :, :, 0]
        for _ in range(spec.clutter):
            rr = int(rng.integers(0, spec.height - 1))
            cc = int(rng.integers(0, spec.width - 1))
            canvas[rr : rr + 2, cc : cc + 2] = rng.uniform(70.0, 150.0)
        dr = int(rng.integers(-spec.jitter, spec.jitter + 1))
        dc = int(rng.integers(-spec.jitter, spec.jitter + 1))
        r0, c0 = base_r + dr, base_c + dc
        glyph = _GLYPHS[int(labels[i])]
        region = canvas[r0 : r0 + 8, c0 : c0 + 8]
        region[glyph] = FOREGROUND
        if spec.noise > 0:
            canvas += rng.standard_normal(size=canvas.shape).astype(np.float32) * spec.noise
    np.clip(images, 0.0, 255.0, out=images)
    order = rng.permutation(n)
    return Dataset(images[order], labels[order], num_classes=spec.num_classes, note="synthetic glyphs")
