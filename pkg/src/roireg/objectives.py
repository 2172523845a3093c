"""Scalar objectives and their building blocks.

Five terms can be combined into one training objective:

  ce      mean negative log-probability of the true class (labeled batch)
  vat     mean KL from the snapshot prediction to the prediction on the
          adversarially perturbed input
  roireg  reliability-weighted KL from the snapshot prediction to the
          prediction on the sensitivity-masked input, scaled by rho
  ent     mean prediction entropy (unlabeled batch)
  roiaug  snapshot-confidence-weighted cross-entropy on masked labeled
          inputs, scaled by rho (supervised augmentation variant)

Snapshot quantities (targets, reliabilities, masks, perturbation
directions) are functions of the pre-update weights and enter the live
graph as constants, so no gradient flows into them. Natural logarithms
throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as af
from . import network

LOG_EPS = af.LOG_EPS


# ---------------------------------------------------------------------------
# scalar probability math (plain float64; used for targets and tests)
# ---------------------------------------------------------------------------


def entropy(p):
    """Shannon entropy with the 0 log 0 = 0 convention, in nats."""
    p = np.asarray(p, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(-np.sum(terms))


def kl_divergence(p, q):
    """KL(p || q) in nats; q is floored at 1e-12 like the graph-side log."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    logq = np.log(np.maximum(q, LOG_EPS))
    cross = float(-np.sum(p * logq))
    return cross - entropy(p)


def reliability(p):
    """1 - H(p)/ln K: 0 for uniform predictions, 1 for one-hot."""
    p = np.asarray(p, dtype=np.float64)
    return float(1.0 - entropy(p) / np.log(p.shape[-1]))


def reliability_rows(probs):
    """Per-row reliability for a (N, K) probability matrix."""
    probs = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.maximum(probs, LOG_EPS))
    h = -np.sum(np.where(probs > 0, probs * logp, 0.0), axis=1)
    return 1.0 - h / np.log(probs.shape[1])


# ---------------------------------------------------------------------------
# graph-side term builders
# ---------------------------------------------------------------------------


def _check_labels(labels, num_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 1 or labels.max() > num_classes):
        raise ValueError(
            f"labels must lie in 1..{num_classes}, got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    return labels


def kl_rows(target_probs, q):
    """Per-sample KL(target || q) as a graph tensor of shape (N,).

    The target side carries no gradient: tensors are passed through
    stop_gradient, arrays are used as constants.
    """
    if isinstance(target_probs, af.Tensor):
        target_probs = af.stop_gradient(target_probs).data
    p = np.asarray(target_probs, dtype=q.dtype)
    logp = np.log(np.maximum(p.astype(np.float64), LOG_EPS))
    plogp = np.sum(np.where(p > 0, p * logp, 0.0), axis=1).astype(q.dtype)
    cross = af.reduce_sum(af.mul(af.constant(p), af.log(q)), axis=1)
    return af.add(af.neg(cross), af.constant(plogp))


def ce_term(probs, labels):
    """Mean negative log-probability of the labeled class."""
    labels = _check_labels(labels, probs.data.shape[1])
    picked = af.gather_rows(probs, labels - 1)
    m = labels.shape[0]
    return af.mul(af.neg(af.reduce_sum(af.log(picked))), af.constant(1.0 / m, dtype=probs.dtype))


def kl_consistency_term(target_probs, probs):
    """Mean KL(target || probs) over the batch."""
    kls = kl_rows(target_probs, probs)
    m = probs.data.shape[0]
    return af.mul(af.reduce_sum(kls), af.constant(1.0 / m, dtype=probs.dtype))


def weighted_kl_term(target_probs, probs, weights, rho):
    """(rho / m) * sum of weight_i * KL(target_i || probs_i).

    Weights (the per-sample reliabilities) are snapshot constants.
    """
    kls = kl_rows(target_probs, probs)
    w = np.asarray(weights, dtype=probs.dtype)
    m = probs.data.shape[0]
    weighted = af.reduce_sum(af.mul(kls, af.constant(w)))
    return af.mul(weighted, af.constant(rho / m, dtype=probs.dtype))


def entropy_term(probs):
    """Mean prediction entropy over the batch; gradient flows into probs."""
    h_rows = af.neg(af.reduce_sum(af.mul(probs, af.log(probs)), axis=1))
    m = probs.data.shape[0]
    return af.mul(af.reduce_sum(h_rows), af.constant(1.0 / m, dtype=probs.dtype))


def masked_ce_term(probs_masked, labels, weights, rho):
    """-(rho / m) * sum of weight_i * log probs_masked[i, label_i].

    Weights are the snapshot probabilities of the true class, held
    constant.
    """
    labels = _check_labels(labels, probs_masked.data.shape[1])
    picked = af.gather_rows(probs_masked, labels - 1)
    w = np.asarray(weights, dtype=probs_masked.dtype)
    m = labels.shape[0]
    weighted = af.reduce_sum(af.mul(af.log(picked), af.constant(w)))
    return af.mul(af.neg(weighted), af.constant(rho / m, dtype=probs_masked.dtype))


# ---------------------------------------------------------------------------
# snapshot pass and adversarial direction
# ---------------------------------------------------------------------------


@dataclass
class SnapshotTargets:
    """Outputs of one pre-update forward pass, all gradient-free."""

    probs: np.ndarray  # (N, K)
    reliability: np.ndarray  # (N,)
    input_grad: np.ndarray = None  # (N, H, W, C) d(max prob)/d(input)


def snapshot_targets(model, x, *, need_input_grad=False, dropout_rng=None):
    """Single forward pass supplying targets, reliabilities, and (optionally)
    the input gradient of the winning probability.

    One pass feeds all three consumers so they are mutually consistent.
    """
    x = np.asarray(x, dtype=model.dtype())
    with af.Tape() as tape:
        xt = af.leaf(x.copy(), requires_grad=need_input_grad)
        probs_t = network.forward_graph(model, xt, train=True, dropout_rng=dropout_rng)
        if need_input_grad:
            gmax = af.reduce_sum(af.reduce_max(probs_t, axis=1))
            tape.backward(gmax)
    probs = probs_t.data.copy()
    return SnapshotTargets(
        probs=probs,
        reliability=reliability_rows(probs),
        input_grad=xt.grad if need_input_grad else None,
    )


@dataclass
class VatConfig:
    epsilon: float
    xi: float = 1e-6
    power_iterations: int = 1


def _unit_vectors(rng, shape, dtype):
    d = rng.standard_normal(size=shape)
    flat = d.reshape(shape[0], -1)
    norms = np.linalg.norm(flat, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return (flat / norms).reshape(shape).astype(dtype)


def _sample_norms(v):
    return np.sqrt(np.sum((v.astype(np.float64)) ** 2, axis=tuple(range(1, v.ndim))))


def vat_direction(forward_fn, x, target_probs, cfg, rng):
    """Adversarial perturbation of norm epsilon for each sample.

    Starting from an independent random unit direction d per sample, each
    power iteration probes the KL divergence at radius xi and replaces d
    with the normalized probe gradient. If a probe gradient collapses
    below 1e-12, that sample's direction is redrawn once and, failing
    that, falls back to the random direction (flagged).

    Returns (perturbations, fallback_flags).
    """
    x = np.asarray(x)
    d = _unit_vectors(rng, x.shape, x.dtype)
    flags = np.zeros(x.shape[0], dtype=bool)

    def probe(direction):
        with af.Tape() as tape:
            r = af.leaf((cfg.xi * direction).astype(x.dtype), requires_grad=True)
            xin = af.add(af.constant(x), r)
            q = forward_fn(xin)
            tape.backward(af.reduce_sum(kl_rows(target_probs, q)))
        return r.grad

    for _ in range(cfg.power_iterations):
        grad = probe(d)
        norms = _sample_norms(grad)
        tiny = norms < 1e-12
        if tiny.any():
            d_retry = d.copy()
            d_retry[tiny] = _unit_vectors(rng, x[tiny].shape, x.dtype)
            grad = probe(d_retry)
            norms = _sample_norms(grad)
            still = norms < 1e-12
            grad[still] = d_retry[still]
            norms[still] = 1.0
            flags |= still
        d = (grad / norms.reshape((-1,) + (1,) * (x.ndim - 1))).astype(x.dtype)
    return (cfg.epsilon * d).astype(x.dtype), flags


# ---------------------------------------------------------------------------
# loss configuration and bundling
# ---------------------------------------------------------------------------

TERM_NAMES = ("ce", "vat", "roireg", "ent", "roiaug")


@dataclass(frozen=True)
class LossConfig:
    """Which terms participate in the training objective."""

    ce: bool = False
    vat: bool = False
    roireg: bool = False
    ent: bool = False
    roiaug: bool = False

    def __post_init__(self):
        if not any(getattr(self, t) for t in TERM_NAMES):
            raise ValueError("loss configuration enables no terms")

    @classmethod
    def from_name(cls, name):
        """Parse a named configuration, e.g. "vat+roireg+ent" or "supervised".

        Cross-entropy on the labeled batch is always included; the name
        lists the additional terms.
        """
        key = name.strip().lower()
        if key in ("supervised", "ce"):
            return cls(ce=True)
        flags = {"ce": True}
        for token in key.split("+"):
            token = token.strip()
            if token == "ce":
                continue
            if token not in ("vat", "roireg", "ent", "roiaug"):
                raise ValueError(f"unknown loss term {token!r} in configuration {name!r}")
            flags[token] = True
        return cls(**flags)

    def enabled(self):
        return tuple(t for t in TERM_NAMES if getattr(self, t))


@dataclass
class LossBundle:
    """Per-term scalars and their sum for one training step."""

    config: LossConfig
    ce: float = 0.0
    vat: float = 0.0
    roireg: float = 0.0
    ent: float = 0.0
    roiaug: float = 0.0
    total: float = 0.0

    @classmethod
    def assemble(cls, config, **terms):
        unknown = set(terms) - set(TERM_NAMES)
        if unknown:
            raise ValueError(f"unknown loss terms: {sorted(unknown)}")
        values = {t: float(terms.get(t, 0.0)) for t in TERM_NAMES}
        for t, v in values.items():
            if v != 0.0 and not getattr(config, t):
                raise ValueError(f"term {t!r} supplied but not enabled")
        total = sum(values[t] for t in config.enabled())
        return cls(config=config, total=total, **values)

    def as_row(self):
        return {t: getattr(self, t) for t in TERM_NAMES} | {"total": self.total}
