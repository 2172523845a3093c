"""Finite-difference validation of the tensor engine and the loss terms.

Every analytic gradient is compared against float64 central differences,
f'(x) ~ (f(x+h) - f(x-h)) / 2h with h = 1e-5. The reported figure per
check is the worst-case relative error

    max|analytic - numeric| / (max|numeric| + 1e-12)

over all perturbed coordinates. Inputs are drawn away from the kinks of
abs / leaky-relu / max-pool so the two-sided difference never straddles a
nondifferentiable point.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as af

FD_STEP = 1e-5
PRIMITIVE_TOL = 1e-4
LOSS_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def numeric_grad(fn, x, step=FD_STEP):
    """Central-difference gradient of a scalar function of one array."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return float(np.max(np.abs(analytic - numeric)) / (np.max(np.abs(numeric)) + 1e-12))


def check_unary(name, graph_fn, x, tol=PRIMITIVE_TOL, step=FD_STEP):
    """Check d(sum(op(x) * c))/dx for a fixed random weighting c."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(abs(hash(name)) % (2**32))

    with af.Tape() as tape:
        xt = af.leaf(x.copy())
        out = graph_fn(xt)
        c = rng.normal(size=out.data.shape)
        loss = af.reduce_sum(af.mul(out, af.constant(c)))
        tape.backward(loss)
    analytic = xt.grad

    def scalar(arr):
        with af.Tape():
            t = af.leaf(arr.copy(), requires_grad=False)
            return float(np.sum(graph_fn(t).data * c))

    numeric = numeric_grad(scalar, x, step=step)
    return CheckResult(name, rel_error(analytic, numeric), tol)


def _away_from_kinks(rng, shape, margin=1e-2):
    """Random values kept at least `margin` away from zero."""
    vals = rng.normal(size=shape)
    vals = vals + np.sign(vals) * margin
    vals[vals == 0] = margin
    return vals


def run_primitive_checks(seed=0):
    """Gradient-check every primitive on small random float64 tensors."""
    rng = np.random.default_rng(seed)
    results = []

    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4)) + 2.5  # keep divisors away from zero

    results.append(check_unary("add", lambda t: af.add(t, af.constant(b)), a))
    results.append(check_unary("sub", lambda t: af.sub(t, af.constant(b)), a))
    results.append(check_unary("mul", lambda t: af.mul(t, af.constant(b)), a))
    results.append(check_unary("div", lambda t: af.div(t, af.constant(b)), a))
    results.append(check_unary("div_denominator", lambda t: af.div(af.constant(a), t), b))
    results.append(check_unary("neg", af.neg, a))
    results.append(check_unary("add_broadcast", lambda t: af.add(t, af.constant(b[0])), a))
    results.append(
        check_unary("add_broadcast_vec", lambda t: af.add(af.constant(a), t), b[0].copy())
    )

    pos = np.abs(rng.normal(size=(3, 4))) + 0.5
    results.append(check_unary("log", af.log, pos))
    results.append(check_unary("exp", af.exp, a))
    results.append(check_unary("sqrt", af.sqrt, pos))
    results.append(check_unary("abs", af.absolute, _away_from_kinks(rng, (3, 4))))
    results.append(
        check_unary("leaky_relu", lambda t: af.leaky_relu(t, 0.1), _away_from_kinks(rng, (3, 4)))
    )

    results.append(check_unary("reduce_sum", af.reduce_sum, a))
    results.append(check_unary("reduce_sum_axis", lambda t: af.reduce_sum(t, axis=1), a))
    sep = rng.normal(size=(4, 5)) * 3  # distinct maxima with high probability
    results.append(check_unary("reduce_max", lambda t: af.reduce_max(t, axis=1), sep))
    results.append(check_unary("reduce_max_all", af.reduce_max, sep))
    results.append(check_unary("reshape", lambda t: af.reshape(t, (4, 3)), a))
    labels = rng.integers(0, 5, size=4)
    results.append(check_unary("gather_rows", lambda t: af.gather_rows(t, labels), sep))
    results.append(check_unary("l1_norm", af.l1_norm, _away_from_kinks(rng, (3, 4))))
    results.append(check_unary("l2_norm", af.l2_norm, a))
    results.append(check_unary("softmax", af.softmax, rng.normal(size=(4, 6))))

    x4 = rng.normal(size=(2, 5, 5, 2))
    w4 = rng.normal(size=(3, 3, 2, 3)) * 0.5
    results.append(check_unary("conv2d_same_x", lambda t: af.conv2d(t, af.constant(w4), "same"), x4))
    results.append(
        check_unary("conv2d_same_w", lambda t: af.conv2d(af.constant(x4), t, "same"), w4)
    )
    results.append(
        check_unary("conv2d_valid_x", lambda t: af.conv2d(t, af.constant(w4), "valid"), x4)
    )
    results.append(
        check_unary("conv2d_valid_w", lambda t: af.conv2d(af.constant(x4), t, "valid"), w4)
    )

    xm = rng.normal(size=(2, 4, 4, 2)) * 2
    xm += np.sign(xm) * 0.05  # separate pool-window candidates
    results.append(check_unary("max_pool", lambda t: af.max_pool(t, 2), xm))
    results.append(check_unary("global_avg_pool", af.global_avg_pool, x4))

    xw = rng.normal(size=(4, 3))
    wm = rng.normal(size=(3, 5))
    results.append(check_unary("matmul_lhs", lambda t: af.matmul(t, af.constant(wm)), xw))
    results.append(check_unary("matmul_rhs", lambda t: af.matmul(af.constant(xw), t), wm))

    gamma = rng.normal(size=2) + 1.5
    beta = rng.normal(size=2)
    xbn = rng.normal(size=(4, 3, 3, 2))

    results.append(
        check_unary(
            "batch_norm_x",
            lambda t: af.batch_norm_train(t, af.constant(gamma), af.constant(beta))[0],
            xbn,
        )
    )
    results.append(
        check_unary(
            "batch_norm_gamma",
            lambda t: af.batch_norm_train(af.constant(xbn), t, af.constant(beta))[0],
            gamma,
        )
    )
    results.append(
        check_unary(
            "batch_norm_beta",
            lambda t: af.batch_norm_train(af.constant(xbn), af.constant(gamma), t)[0],
            beta,
        )
    )
    rmean, rvar = rng.normal(size=2), np.abs(rng.normal(size=2)) + 0.5
    results.append(
        check_unary(
            "batch_norm_eval",
            lambda t: af.batch_norm_eval(t, af.constant(gamma), af.constant(beta), rmean, rvar),
            xbn,
        )
    )

    mask_rng_seed = 7

    def dropout_fixed(t):
        return af.dropout(t, 0.4, np.random.default_rng(mask_rng_seed))

    results.append(check_unary("dropout", dropout_fixed, a))

    # stop_gradient deliberately disagrees with finite differences of the
    # value function, so compare against the closed form instead: the
    # gradient of sum(stop(x) * x * c) is exactly x * c.
    with af.Tape() as tape:
        xt = af.leaf(a.copy())
        c = rng.normal(size=a.shape)
        loss = af.reduce_sum(af.mul(af.mul(af.stop_gradient(xt), xt), af.constant(c)))
        tape.backward(loss)
    results.append(CheckResult("stop_gradient", rel_error(xt.grad, a * c), PRIMITIVE_TOL))
    return results


def run_loss_checks(seed=0, coords_per_param=4):
    """End-to-end theta-gradient checks for every loss term on Conv-Tiny.

    Targets, masks, and adversarial perturbations are functions of the
    snapshot weights, so they are built once and held fixed while the live
    weights are perturbed. The numeric side pairs central differences at
    steps h and h/2 through one Richardson step, (4 D(h/2) - D(h)) / 3,
    because the adversarially perturbed forward pass has enough curvature
    for the plain O(h^2) truncation term to show at h = 1e-5.
    """
    from . import network, objectives, saliency
    from .objectives import VatConfig

    rng = np.random.default_rng(seed)
    arch = network.conv_tiny(input_shape=(8, 8, 1), num_classes=3)
    model = network.build(arch, seed=seed).astype(np.float64)

    xl = rng.normal(size=(4, 8, 8, 1)).astype(np.float64)
    yl = rng.integers(1, 4, size=4)
    xu = rng.normal(size=(5, 8, 8, 1)).astype(np.float64)

    tgt = objectives.snapshot_targets(model, xu, need_input_grad=True)
    partition = saliency.BlockPartition.regular((8, 8), 2, 2)
    stats = saliency.PixelStats(
        mean=np.zeros((8, 8, 1)), std=np.full((8, 8, 1), 0.3)
    )
    x_roi = saliency.masked_batch(
        tgt.input_grad, xu, partition, 0.5, stats, np.random.default_rng(3)
    )
    r_vadv, _ = objectives.vat_direction(
        lambda t: network.forward_graph(model, t, train=True),
        xu,
        tgt.probs,
        VatConfig(epsilon=1.5),
        np.random.default_rng(4),
    )

    tgt_l = objectives.snapshot_targets(model, xl, need_input_grad=True)
    xl_roi = saliency.masked_batch(
        tgt_l.input_grad, xl, partition, 0.05, stats, np.random.default_rng(5)
    )
    w_label = tgt_l.probs[np.arange(4), yl - 1]

    def term_builders():
        yield "loss_ce", lambda p: objectives.ce_term(
            network.forward_graph(model, af.constant(xl), train=True, params=p), yl
        )
        yield "loss_vat", lambda p: objectives.kl_consistency_term(
            tgt.probs,
            network.forward_graph(model, af.constant(xu + r_vadv), train=True, params=p),
        )
        yield "loss_roireg", lambda p: objectives.weighted_kl_term(
            tgt.probs,
            network.forward_graph(model, af.constant(x_roi), train=True, params=p),
            tgt.reliability,
            rho=0.9,
        )
        yield "loss_ent", lambda p: objectives.entropy_term(
            network.forward_graph(model, af.constant(xu), train=True, params=p)
        )
        yield "loss_roiaug", lambda p: objectives.masked_ce_term(
            network.forward_graph(model, af.constant(xl_roi), train=True, params=p),
            yl,
            w_label,
            rho=0.9,
        )

    results = []
    coord_rng = np.random.default_rng(seed + 1)
    for name, builder in term_builders():
        with af.Tape() as tape:
            params = {k: af.leaf(v.copy()) for k, v in model.params.items()}
            loss = builder(params)
            tape.backward(loss)

        worst = 0.0
        for pname, arr in model.params.items():
            n = min(coords_per_param, arr.size)
            picks = coord_rng.choice(arr.size, size=n, replace=False)
            for flat_idx in picks:
                orig = arr.reshape(-1)[flat_idx]

                def eval_at(v):
                    arr.reshape(-1)[flat_idx] = v
                    with af.Tape():
                        p2 = {k: af.constant(pv) for k, pv in model.params.items()}
                        val = builder(p2).item()
                    arr.reshape(-1)[flat_idx] = orig
                    return val

                def central(h):
                    return (eval_at(orig + h) - eval_at(orig - h)) / (2 * h)

                fd = (4.0 * central(FD_STEP / 2) - central(FD_STEP)) / 3.0
                analytic = params[pname].grad.reshape(-1)[flat_idx]
                denom = max(abs(fd), 1e-6)
                worst = max(worst, abs(analytic - fd) / denom)
        results.append(CheckResult(name, worst, LOSS_TOL))
    return results


def run_all(seed=0):
    return run_primitive_checks(seed) + run_loss_checks(seed)


def format_report(results):
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{status}  {r.name:<22} max_rel_err={r.max_rel_error:.3e}  tol={r.tolerance:g}")
    return "\n".join(lines)
