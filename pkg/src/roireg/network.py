"""Classifier architectures and model state.

Two builders are provided: ``conv_large`` (the 13-layer, ~3.1M-parameter
convolutional network: nine conv layers, two dropout max-pools, global
average pooling, and a dense head) and ``conv_tiny``, a two-conv desk-scale
reduction that keeps every mechanism (batch norm, pooling, the
input-gradient path) while training in milliseconds.

A ``ModelState`` owns plain numpy parameter arrays plus per-layer batch
norm running statistics. Each forward pass wraps the parameters in fresh
graph tensors, so one model can serve many tapes.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as af
from .autodiff import ShapeError

CHECKPOINT_MAGIC = b"ROIR"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # conv | pool | gap | dense
    filters: int = 0
    ksize: int = 0
    padding: str = "same"
    pool_size: int = 2
    dropout: float = 0.0
    slope: float = 0.1
    bn: bool = True


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: tuple
    input_shape: tuple  # (rows, cols, channels)
    num_classes: int
    bn_eps: float = 1e-5

    def validate(self):
        """Walk the layer chain; raise ShapeError naming the broken layer."""
        h, w, c = self.input_shape
        seen_dense = False
        for i, layer in enumerate(self.layers):
            name = f"layer {i} ({layer.kind})"
            if seen_dense:
                raise ShapeError(f"{name}: dense must be the final layer")
            if layer.kind == "conv":
                if layer.padding == "same":
                    pass
                elif layer.padding == "valid":
                    h, w = h - layer.ksize + 1, w - layer.ksize + 1
                else:
                    raise ShapeError(f"{name}: unknown padding {layer.padding!r}")
                if h <= 0 or w <= 0:
                    raise ShapeError(f"{name}: spatial size collapsed to {h}x{w}")
                c = layer.filters
            elif layer.kind == "pool":
                if h % layer.pool_size or w % layer.pool_size:
                    raise ShapeError(
                        f"{name}: {h}x{w} not divisible by pool size {layer.pool_size}"
                    )
                h, w = h // layer.pool_size, w // layer.pool_size
            elif layer.kind == "gap":
                h, w = 1, 1
            elif layer.kind == "dense":
                seen_dense = True
            else:
                raise ShapeError(f"{name}: unknown layer kind")
        if not seen_dense:
            raise ShapeError("architecture must end with a dense layer")
        return self

    def digest(self):
        parts = [repr(self.input_shape), str(self.num_classes), repr(self.bn_eps)]
        for layer in self.layers:
            parts.append(repr(layer))
        return hashlib.sha256("|".join(parts).encode()).hexdigest()


def conv_large(input_shape=(32, 32, 3), num_classes=10, final_bn=True):
    """The full-scale network: 9 conv layers, 2 dropout pools, GAP, dense head.

    ``final_bn`` toggles batch norm on the dense logits (off for
    ZCA-preprocessed natural-image profiles).
    """
    layers = (
        LayerSpec("conv", filters=128, ksize=3),
        LayerSpec("conv", filters=128, ksize=3),
        LayerSpec("conv", filters=128, ksize=3),
        LayerSpec("pool", pool_size=2, dropout=0.5),
        LayerSpec("conv", filters=256, ksize=3),
        LayerSpec("conv", filters=256, ksize=3),
        LayerSpec("conv", filters=256, ksize=3),
        LayerSpec("pool", pool_size=2, dropout=0.5),
        LayerSpec("conv", filters=512, ksize=3, padding="valid"),
        LayerSpec("conv", filters=256, ksize=1, padding="valid"),
        LayerSpec("conv", filters=128, ksize=1, padding="valid"),
        LayerSpec("gap"),
        LayerSpec("dense", bn=final_bn),
    )
    return ArchitectureSpec(layers, tuple(input_shape), num_classes).validate()


def conv_tiny(input_shape=(16, 16, 1), num_classes=4):
    """Desk-scale network: conv16-pool-conv32-pool-GAP-dense, no dropout."""
    layers = (
        LayerSpec("conv", filters=16, ksize=3),
        LayerSpec("pool", pool_size=2),
        LayerSpec("conv", filters=32, ksize=3),
        LayerSpec("pool", pool_size=2),
        LayerSpec("gap"),
        LayerSpec("dense", bn=False),
    )
    return ArchitectureSpec(layers, tuple(input_shape), num_classes).validate()


class ModelState:
    """Trainable parameters plus batch norm running statistics."""

    def __init__(self, arch, params, bn_mean, bn_var, step=0):
        self.arch = arch
        self.params = params  # name -> ndarray
        self.bn_mean = bn_mean  # layer name -> ndarray
        self.bn_var = bn_var
        self.step = step

    def param_count(self):
        return sum(int(v.size) for v in self.params.values())

    def dtype(self):
        return next(iter(self.params.values())).dtype

    def astype(self, dtype):
        return ModelState(
            self.arch,
            {k: v.astype(dtype) for k, v in self.params.items()},
            {k: v.astype(dtype) for k, v in self.bn_mean.items()},
            {k: v.astype(dtype) for k, v in self.bn_var.items()},
            self.step,
        )

    def copy(self):
        return self.astype(self.dtype())

    def stats_digest(self):
        h = hashlib.sha256()
        for k in sorted(self.bn_mean):
            h.update(self.bn_mean[k].tobytes())
            h.update(self.bn_var[k].tobytes())
        return h.hexdigest()

    def params_digest(self):
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(self.params[k].tobytes())
        return h.hexdigest()


def build(arch, seed, dtype=np.float32):
    """Initialize a model: He-style fan-in weights, BN stats at (0, 1)."""
    rng = np.random.default_rng(seed)
    params = {}
    bn_mean = {}
    bn_var = {}
    h, w, c = arch.input_shape
    conv_idx = 0
    for layer in arch.layers:
        if layer.kind == "conv":
            conv_idx += 1
            name = f"conv{conv_idx}"
            fan_in = layer.ksize * layer.ksize * c
            std = np.sqrt(2.0 / fan_in)
            params[f"{name}.w"] = rng.normal(
                0.0, std, size=(layer.ksize, layer.ksize, c, layer.filters)
            ).astype(dtype)
            if layer.bn:
                params[f"{name}.gamma"] = np.ones(layer.filters, dtype=dtype)
                params[f"{name}.beta"] = np.zeros(layer.filters, dtype=dtype)
                bn_mean[name] = np.zeros(layer.filters, dtype=dtype)
                bn_var[name] = np.ones(layer.filters, dtype=dtype)
            else:
                params[f"{name}.b"] = np.zeros(layer.filters, dtype=dtype)
            c = layer.filters
            if layer.padding == "valid":
                h, w = h - layer.ksize + 1, w - layer.ksize + 1
        elif layer.kind == "pool":
            h, w = h // layer.pool_size, w // layer.pool_size
        elif layer.kind == "gap":
            h, w = 1, 1
        elif layer.kind == "dense":
            fan_in = c
            std = np.sqrt(2.0 / fan_in)
            params["dense.w"] = rng.normal(0.0, std, size=(c, arch.num_classes)).astype(dtype)
            params["dense.b"] = np.zeros(arch.num_classes, dtype=dtype)
            if layer.bn:
                params["dense.gamma"] = np.ones(arch.num_classes, dtype=dtype)
                params["dense.beta"] = np.zeros(arch.num_classes, dtype=dtype)
                bn_mean["dense"] = np.zeros(arch.num_classes, dtype=dtype)
                bn_var["dense"] = np.ones(arch.num_classes, dtype=dtype)
    return ModelState(arch, params, bn_mean, bn_var)


BN_MOMENTUM = 0.9  # running <- 0.9 * running + 0.1 * batch


def forward_graph(
    model,
    x,
    *,
    train,
    dropout_rng=None,
    update_stats=False,
    params=None,
    use_running_stats=None,
):
    """Run the network on a graph tensor and return class probabilities.

    ``params`` maps parameter names to already-wrapped tensors (leaves for
    a training pass); missing entries are wrapped as constants, which also
    lets the backward pass skip their gradients entirely. ``train`` selects
    batch statistics for BN and enables dropout (when a generator is
    supplied); ``use_running_stats`` overrides the BN branch independently.
    """
    if not isinstance(x, af.Tensor):
        raise ShapeError("forward_graph expects a Tensor input")
    expect = model.arch.input_shape
    if tuple(x.data.shape[1:]) != tuple(expect):
        raise ShapeError(f"input shape {x.data.shape[1:]} does not match network {expect}")
    if params is None:
        params = {}

    def p(name):
        t = params.get(name)
        if t is None:
            t = af.constant(model.params[name])
            params[name] = t
        return t

    bn_batch = (not use_running_stats) if use_running_stats is not None else train
    out = x
    conv_idx = 0
    for layer in model.arch.layers:
        if layer.kind == "conv":
            conv_idx += 1
            name = f"conv{conv_idx}"
            out = af.conv2d(out, p(f"{name}.w"), padding=layer.padding)
            if layer.bn:
                out = _bn(model, name, out, p, bn_batch, update_stats)
            else:
                out = af.add(out, p(f"{name}.b"))
            out = af.leaky_relu(out, layer.slope)
        elif layer.kind == "pool":
            out = af.max_pool(out, layer.pool_size)
            if train and layer.dropout > 0.0:
                out = af.dropout(out, layer.dropout, dropout_rng)
        elif layer.kind == "gap":
            out = af.global_avg_pool(out)
        elif layer.kind == "dense":
            logits = af.add(af.matmul(out, p("dense.w")), p("dense.b"))
            if layer.bn:
                logits = _bn(model, "dense", logits, p, bn_batch, update_stats)
            out = af.softmax(logits)
    return out


def _bn(model, name, out, p, bn_batch, update_stats):
    if bn_batch:
        out, mean, var = af.batch_norm_train(
            out, p(f"{name}.gamma"), p(f"{name}.beta"), eps=model.arch.bn_eps
        )
        if update_stats:
            dt = model.bn_mean[name].dtype
            model.bn_mean[name] = (
                BN_MOMENTUM * model.bn_mean[name] + (1 - BN_MOMENTUM) * mean
            ).astype(dt)
            model.bn_var[name] = (
                BN_MOMENTUM * model.bn_var[name] + (1 - BN_MOMENTUM) * var
            ).astype(dt)
        return out
    return af.batch_norm_eval(
        out,
        p(f"{name}.gamma"),
        p(f"{name}.beta"),
        model.bn_mean[name],
        model.bn_var[name],
        eps=model.arch.bn_eps,
    )


def predict(model, x, mode="eval", use_running_stats=None, dropout_rng=None):
    """Class probabilities for a batch, as a plain array.

    Eval mode is a pure function of (weights, running stats, input):
    running statistics, no dropout, no graph recording.
    """
    x = np.asarray(x, dtype=model.dtype())
    single = x.ndim == 3
    if single:
        x = x[None]
    probs = forward_graph(
        model,
        af.constant(x),
        train=(mode == "train"),
        dropout_rng=dropout_rng if mode == "train" else None,
        update_stats=False,
        use_running_stats=use_running_stats,
    )
    return probs.data[0] if single else probs.data


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_model(model, path):
    """Write a checkpoint: magic, version, architecture digest, tensors.

    Tensors cover parameters, BN running statistics, and the update
    counter, each as (name length, name, rank, extents, float32 payload),
    little-endian throughout.
    """
    entries = []
    for k in sorted(model.params):
        entries.append((k, model.params[k]))
    for k in sorted(model.bn_mean):
        entries.append((f"stats.{k}.mean", model.bn_mean[k]))
        entries.append((f"stats.{k}.var", model.bn_var[k]))
    entries.append(("step", np.asarray([model.step], dtype=np.float32)))

    digest = model.arch.digest().encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(digest)))
        fh.write(digest)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            arr32 = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<I", arr32.ndim))
            for extent in arr32.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr32.tobytes())


class CheckpointError(Exception):
    pass


def load_model(path, arch):
    """Load a checkpoint saved by ``save_model`` for a known architecture."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {off}")
        chunk = blob[off : off + n]
        off += n
        return chunk

    if take(4, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (dlen,) = struct.unpack("<I", take(4, "digest length"))
    digest = take(dlen, "digest").decode()
    if digest != arch.digest():
        raise CheckpointError("architecture digest mismatch")
    (count,) = struct.unpack("<I", take(4, "tensor count"))

    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        name = take(nlen, "name").decode()
        (rank,) = struct.unpack("<I", take(4, "rank"))
        shape = tuple(struct.unpack("<I", take(4, "extent"))[0] for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        payload = take(4 * n, f"tensor {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()

    model = build(arch, seed=0)
    for k in model.params:
        if k not in tensors:
            raise CheckpointError(f"missing parameter {k}")
        if tensors[k].shape != model.params[k].shape:
            raise CheckpointError(f"shape mismatch for {k}")
        model.params[k] = tensors[k]
    for k in model.bn_mean:
        model.bn_mean[k] = tensors[f"stats.{k}.mean"]
        var = tensors[f"stats.{k}.var"]
        if np.any(var <= 0):
            raise CheckpointError(f"non-positive running variance in {k}")
        model.bn_var[k] = var
    model.step = int(tensors["step"][0])
    return model
