"""Numerical oracle suite.

Finite differences are the independent reference: they only evaluate
forward passes, never the backward kernels they check. Every check runs in
64-bit precision.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import losses
from .nn import group_norm

FD_STEP = 1e-4
OP_TOLERANCE = 1e-5
META_TOLERANCE = 1e-4


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest absolute deviation, relative to the largest gradient entry."""
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def numeric_grad(fn: Callable[[list[np.ndarray]], float], arrays: Sequence[np.ndarray],
                 h: float = FD_STEP) -> list[np.ndarray]:
    """Central differences of scalar ``fn`` w.r.t. every entry of every array."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = fn(arrays)
            flat[i] = keep - h
            down = fn(arrays)
            flat[i] = keep
            gflat[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def check_gradient(op: Callable[..., ad.Tensor], arrays: Sequence[np.ndarray],
                   rng: np.random.Generator, h: float = FD_STEP) -> float:
    """Relative error between backward and finite differences for a random
    linear functional of ``op(*arrays)``.

    The functional is applied in numpy and seeded through ``grad_output``,
    so the harness itself adds no graph ops that a mutation could touch.
    """
    with ad.precision("float64"):
        leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
        out = op(*leaves)
        weights = rng.normal(size=out.shape)
        analytic = [g.data for g in ad.grad(out, leaves, grad_output=weights)]

        def fn(vals):
            with ad.no_grad():
                return float(np.sum(op(*[ad.Tensor(v) for v in vals]).data * weights))

        numeric = numeric_grad(fn, arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def check_second_order(op: Callable[..., ad.Tensor], arrays: Sequence[np.ndarray],
                       rng: np.random.Generator, h: float = FD_STEP) -> float:
    """Check the derivative of ``<grad(f), v>`` (a Hessian-vector product)."""
    with ad.precision("float64"):
        leaves = [ad.Tensor(a, requires_grad=True) for a in arrays]
        out = op(*leaves)
        weights = rng.normal(size=out.shape)
        vs = [rng.normal(size=np.shape(a)) for a in arrays]
        gs = ad.grad(out, leaves, grad_output=weights, create_graph=True)
        analytic = [np.zeros(np.shape(a)) for a in arrays]
        for g, v in zip(gs, vs):
            for acc, hv in zip(analytic, ad.grad(g, leaves, grad_output=v)):
                acc += hv.data

        def fn(vals):
            ts = [ad.Tensor(v, requires_grad=True) for v in vals]
            first = ad.grad(op(*ts), ts, grad_output=weights)
            return float(sum(np.sum(g.data * v) for g, v in zip(first, vs)))

        numeric = numeric_grad(fn, arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


# ---------------------------------------------------------------------------
# random problem generators, one per forward op


def _dims(rng, k, lo=1, hi=4):
    return tuple(int(d) for d in rng.integers(lo, hi + 1, size=k))


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(lo, hi, size=shape)


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _broadcast_pair(rng):
    shape = _dims(rng, 3)
    other = tuple(1 if rng.random() < 0.4 else d for d in shape)
    if rng.random() < 0.3:
        other = other[1:]
    return shape, other


def _conv_case(rng):
    n, c, o = _dims(rng, 3, 1, 3)
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, 2)) if k == 3 else 0
    hw = int(rng.integers(k + 1, 7))
    x, w = rng.normal(size=(n, c, hw, hw)), rng.normal(size=(o, c, k, k))
    return (lambda a, b: ad.conv2d(a, b, stride, pad)), [x, w]


def _slice_case(rng):
    shape = _dims(rng, 3, 2, 5)
    idx = tuple(slice(int(rng.integers(0, d)), None, int(rng.integers(1, 3))) for d in shape)
    return (lambda a: a[idx]), [rng.normal(size=shape)]


def _concat_case(rng):
    shape = _dims(rng, 3)
    axis = int(rng.integers(0, 3))
    other = list(shape)
    other[axis] = int(rng.integers(1, 4))
    return (lambda a, b: ad.concat([a, b], axis)), [rng.normal(size=shape), rng.normal(size=other)]


def _gn_case(rng):
    groups = int(rng.integers(1, 4))
    c = groups * int(rng.integers(1, 3))
    n, h, w = _dims(rng, 3, 1, 3)
    h, w = h + 1, w + 1
    return ((lambda x, g, b: group_norm(x, groups, g, b)),
            [rng.normal(size=(n, c, h, w)), rng.normal(size=c), rng.normal(size=c)])


def _matmul_case(rng):
    m, k, n = _dims(rng, 3)
    if rng.random() < 0.4:
        b = int(rng.integers(1, 4))
        return ad.matmul, [rng.normal(size=(b, m, k)), rng.normal(size=(k, n))]
    return ad.matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))]


def _reduce_case(fn):
    def make(rng):
        shape = _dims(rng, 3)
        axis = None if rng.random() < 0.3 else int(rng.integers(0, 3))
        keep = bool(rng.random() < 0.5)
        return (lambda a: fn(a, axis, keep)), [rng.normal(size=shape)]
    return make


def _binary(fn, denom=False):
    def make(rng):
        s1, s2 = _broadcast_pair(rng)
        if rng.random() < 0.5:
            s1, s2 = s2, s1
        b = _away_from_zero(rng, s2, 0.5, 2.0) if denom else rng.normal(size=s2)
        return fn, [rng.normal(size=s1), b]
    return make


def _unary(fn, sampler=None):
    def make(rng):
        shape = _dims(rng, 3)
        x = sampler(rng, shape) if sampler else rng.normal(size=shape)
        return fn, [x]
    return make


def _unfold_case(rng):
    n, c = _dims(rng, 2, 1, 2)
    k = int(rng.choice([2, 3]))
    stride = int(rng.choice([1, 2]))
    pad = int(rng.integers(0, 2))
    hw = int(rng.integers(k + 1, 6))
    return (lambda a: ad.unfold(a, k, stride, pad)), [rng.normal(size=(n, c, hw, hw))]


def _fold_case(rng):
    n, c = _dims(rng, 2, 1, 2)
    k, stride, pad = 3, int(rng.choice([1, 2])), int(rng.integers(0, 2))
    hw = int(rng.integers(4, 6))
    ho = (hw + 2 * pad - k) // stride + 1
    return ((lambda a: ad.fold(a, (n, c, hw, hw), k, stride, pad)),
            [rng.normal(size=(n, c * k * k, ho * ho))])


def _broadcast_case(rng):
    small, big = _broadcast_pair(rng)
    target = np.broadcast_shapes(small, big)
    return (lambda a: ad.broadcast_to(a, target)), [rng.normal(size=big)]


def _sum_to_case(rng):
    big, small = _broadcast_pair(rng)
    full = np.broadcast_shapes(big, small)
    return (lambda a: ad.sum_to(a, small)), [rng.normal(size=full)]


def _transpose_case(rng):
    shape = _dims(rng, 3)
    perm = tuple(int(i) for i in rng.permutation(3))
    return (lambda a: ad.transpose(a, perm)), [rng.normal(size=shape)]


def _reshape_case(rng):
    shape = _dims(rng, 3)
    return (lambda a: ad.reshape(a, (-1,))), [rng.normal(size=shape)]


def _avg_pool_case(rng):
    n, c = _dims(rng, 2, 1, 2)
    k = int(rng.choice([1, 2]))
    hw = k * int(rng.integers(1, 4))
    return (lambda a: ad.avg_pool2d(a, k)), [rng.normal(size=(n, c, hw, hw))]


def _axis_case(fn):
    def make(rng):
        shape = _dims(rng, 2, 2, 4)
        return (lambda a: fn(a, -1)), [rng.normal(size=shape)]
    return make


def _scatter_case(rng):
    shape = _dims(rng, 2, 2, 4)
    idx = (slice(0, None, 2), slice(None))
    sub = np.zeros(shape)[idx].shape
    return (lambda a: ad.scatter(a, idx, shape)), [rng.normal(size=sub)]


def _byol_case(rng):
    shape = _dims(rng, 2, 2, 4)
    vals = [rng.normal(size=shape) for _ in range(4)]
    return losses.byol_loss, vals


def _ce_case(rng):
    n, c = _dims(rng, 2, 1, 5)
    c += 1
    labels = rng.integers(0, c, size=n)
    return (lambda a: losses.cross_entropy(a, labels)), [rng.normal(size=(n, c))]


OP_CASES: dict[str, Callable] = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div, denom=True),
    "neg": _unary(ad.neg),
    "identity": _unary(ad.identity),
    "affine": _unary(lambda a: ad.affine(a, -1.7, 0.3)),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, _positive),
    "sqrt": _unary(ad.sqrt, _positive),
    "pow": _unary(lambda a: ad.power(a, 1.5), _positive),
    "relu": _unary(ad.relu, _away_from_zero),
    "reshape": _reshape_case,
    "transpose": _transpose_case,
    "broadcast": _broadcast_case,
    "sum_to": _sum_to_case,
    "sum": _reduce_case(ad.reduce_sum),
    "mean": _reduce_case(ad.reduce_mean),
    "slice": _slice_case,
    "scatter": _scatter_case,
    "concat": _concat_case,
    "matmul": _matmul_case,
    "unfold": _unfold_case,
    "fold": _fold_case,
    "conv2d": _conv_case,
    "avg_pool": _avg_pool_case,
    "global_avg_pool": _unary(lambda a: ad.global_avg_pool(ad.reshape(a, (1,) + a.shape))),
    "swapaxes": _unary(ad.swapaxes),
    "l2_normalize": _axis_case(ad.l2_normalize),
    "softmax": _axis_case(ad.softmax),
    "log_softmax": _axis_case(ad.log_softmax),
    "group_norm": _gn_case,
    "byol_loss": _byol_case,
    "cross_entropy": _ce_case,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float | None = None
    tolerance: float | None = None
    detail: str = ""
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def op_gradient_checks(trials: int = 20, seed: int = 0, second_order: bool = False,
                       ops: Sequence[str] | None = None) -> list[CheckResult]:
    results = []
    fn = check_second_order if second_order else check_gradient
    tol = OP_TOLERANCE if not second_order else 1e-4
    for name in ops or OP_CASES:
        t0 = time.perf_counter()
        rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
        worst = 0.0
        for _ in range(trials):
            op, arrays = OP_CASES[name](rng)
            worst = max(worst, fn(op, arrays, rng))
        kind = "hvp" if second_order else "grad"
        results.append(CheckResult(f"{kind}:{name}", worst < tol, worst, tol,
                                   seconds=time.perf_counter() - t0))
    return results


# ---------------------------------------------------------------------------
# second-order oracle on a small end-to-end problem


def toy_meta_problem(seed: int = 0, k: int = 4, d_in: int = 3, d_hidden: int = 4,
                     d_proj: int = 3, classes: int = 2):
    """A <=50 parameter stand-in for the full pipeline.

    f: softplus(x @ Wf), p: @ Wp, q: @ Wq, h: @ Wh. Returns
    ``(theta_arrays, loss_fn)`` where ``loss_fn(theta_arrays, create_graph)``
    gives the mean outer loss after one inner BYOL step and the leaves.
    """
    rng = np.random.default_rng(seed)
    theta0 = {"f": rng.normal(0, 0.8, (d_in, d_hidden)), "p": rng.normal(0, 0.8, (d_hidden, d_proj)),
              "q": rng.normal(0, 0.8, (d_proj, d_proj)), "h": rng.normal(0, 0.8, (d_hidden, classes))}
    x = rng.normal(size=(k, d_in))
    a = x + 0.3 * rng.normal(size=(k, d_in))
    at = x + 0.3 * rng.normal(size=(k, d_in))
    y = rng.integers(0, classes, size=k)
    alpha, gamma, clip = 0.1, 0.1, 10.0

    def net(P, inp):
        g = ad.log(ad.affine(ad.exp(ad.matmul(inp, P["f"])), 1.0, 1.0))
        z = ad.matmul(g, P["p"])
        return ad.matmul(g, P["h"]), z, ad.matmul(z, P["q"])

    def adapted_loss(theta: dict, create_graph: bool = True):
        _, z_a, _ = net(theta, a)
        _, z_b, _ = net(theta, at)
        names = ["f", "p", "q"]
        phi = dict(theta)
        phi.update({n: ad.identity(theta[n]) for n in names})
        _, _, r_a = net(phi, a)
        _, _, r_b = net(phi, at)
        inner = ad.reduce_mean(losses.byol_loss(r_a, r_b, z_a, z_b))
        gs = ad.grad_map(inner, phi, names, create_graph=create_graph)
        gs, _, _ = ad.clip_by_global_norm(gs, clip)
        phi = ad.sgd_step(phi, gs, alpha, names)
        logits, _, _ = net(phi, x)
        _, _, r_a = net(phi, a)
        _, _, r_b = net(phi, at)
        outer = losses.total_loss(losses.cross_entropy(logits, y),
                                  losses.byol_loss(r_a, r_b, z_a, z_b), losses.LossWeights(gamma))
        return ad.reduce_mean(outer)

    return theta0, adapted_loss


def meta_gradient_check(seed: int = 0, h: float = FD_STEP) -> CheckResult:
    t0 = time.perf_counter()
    with ad.precision("float64"):
        theta0, loss_fn = toy_meta_problem(seed)
        names = list(theta0)
        leaves = {n: ad.Tensor(v, requires_grad=True, name=n) for n, v in theta0.items()}
        g = ad.grad_map(loss_fn(leaves, True), leaves)

        def fn(vals):
            ts = {n: ad.Tensor(v, requires_grad=True) for n, v in zip(names, vals)}
            return float(loss_fn(ts, False).data)

        numeric = numeric_grad(fn, [theta0[n] for n in names], h)
    err = relative_error(np.concatenate([g[n].data.ravel() for n in names]),
                         np.concatenate([v.ravel() for v in numeric]))
    n_params = sum(v.size for v in theta0.values())
    return CheckResult("meta_gradient", err < META_TOLERANCE, err, META_TOLERANCE,
                       f"{n_params} parameters", time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# property checks


def loss_property_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    with ad.precision("float64"):
        a = rng.normal(size=16)
        d_same = float(losses.pair_distance(a, a).data)
        d_neg = float(losses.pair_distance(a, -a).data)
        b = rng.normal(size=16)
        b -= a * (a @ b) / (a @ a)
        d_orth = float(losses.pair_distance(a, b).data)
        ok = abs(d_same) < 1e-12 and abs(d_neg - 4) < 1e-12 and abs(d_orth - 2) < 1e-12
        out.append(CheckResult("pair_distance_identities", ok,
                               max(abs(d_same), abs(d_neg - 4), abs(d_orth - 2)), 1e-12))
        vals = [rng.normal(size=(64, 8)) for _ in range(4)]
        base = losses.byol_loss(*vals).data
        worst = 0.0
        for i in range(4):
            scaled = list(vals)
            scaled[i] = vals[i] * rng.uniform(0.1, 10.0, size=(64, 1))
            worst = max(worst, float(np.max(np.abs(losses.byol_loss(*scaled).data - base))))
        swapped = losses.byol_loss(vals[1], vals[0], vals[3], vals[2]).data
        worst_swap = float(np.max(np.abs(swapped - base)))
        out.append(CheckResult("byol_scale_invariance", worst < 1e-6, worst, 1e-6))
        out.append(CheckResult("byol_view_swap", worst_swap < 1e-6, worst_swap, 1e-6))
        in_range = bool(np.all(base >= -1e-12) and np.all(base <= 8 + 1e-12))
        out.append(CheckResult("byol_range", in_range))
        logits = rng.normal(size=(8, 10))
        labels = rng.integers(0, 10, size=8)
        ce = losses.cross_entropy(logits, labels).data
        shifted = losses.cross_entropy(logits + 123.0, labels).data
        shift_err = float(np.max(np.abs(ce - shifted)))
        out.append(CheckResult("ce_shift_invariance", shift_err < 1e-6, shift_err, 1e-6))
        lt = ad.Tensor(logits, requires_grad=True)
        (g,) = ad.grad(ad.reduce_sum(losses.cross_entropy(lt, labels)), [lt])
        p = np.exp(logits - logits.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        onehot = np.eye(10)[labels]
        closed = float(np.max(np.abs(g.data - (p - onehot))))

        def fn(vals):
            with ad.no_grad():
                return float(np.sum(losses.cross_entropy(vals[0], labels).data))

        (num,) = numeric_grad(fn, [logits])
        fd = relative_error(p - onehot, num)
        out.append(CheckResult("ce_grad_softmax_minus_onehot", closed < 1e-12 and fd < 1e-5,
                               max(closed, fd), 1e-5))
    return out


def group_norm_checks(seed: int = 0, trials: int = 20) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    worst_mean = worst_var = 0.0
    with ad.precision("float64"):
        for _ in range(trials):
            groups = int(rng.integers(1, 5))
            c = groups * int(rng.integers(1, 4))
            n, h, w = (int(v) for v in rng.integers(1, 6, size=3))
            x = rng.normal(3.0, 2.0, size=(n, c, h + 2, w + 2))
            y = group_norm(x, groups, np.ones(c), np.zeros(c)).data
            yg = y.reshape(n, groups, -1)
            worst_mean = max(worst_mean, float(np.max(np.abs(yg.mean(-1)))))
            worst_var = max(worst_var, float(np.max(np.abs(yg.var(-1) - 1))))
    return [CheckResult("group_norm_mean", worst_mean < 1e-6, worst_mean, 1e-6),
            CheckResult("group_norm_variance", worst_var < 1e-4, worst_var, 1e-4)]


def format_checks(seed: int = 0) -> list[CheckResult]:
    from . import checkpoint, data
    from .nn import ModelConfig, init_params
    from .trainers import TrainState

    rng = np.random.default_rng(seed)
    out = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        ok = True
        for dtype in (np.uint8, np.float32, np.float64, np.int64):
            arr = (rng.random((3, 4, 2)) * 200).astype(dtype)
            data.write_npy(tmp / "a.npy", arr)
            back = data.read_npy(tmp / "a.npy", (np.dtype(dtype).str if np.dtype(dtype).itemsize > 1
                                                 else "|u1",))
            ok &= back.dtype == arr.dtype and back.tobytes() == arr.tobytes()
            ok &= np.load(tmp / "a.npy").tobytes() == arr.tobytes()
        out.append(CheckResult("npy_roundtrip", bool(ok)))
        img = np.full((1, 32, 32, 3), 255, dtype=np.uint8)
        data.write_cifar10_binary(tmp / "c.bin", img, [7])
        ds = data.read_cifar10_binary(tmp / "c.bin")
        out.append(CheckResult("cifar10_single_record",
                               bool(ds.labels.tolist() == [7] and np.all(ds.images == 1.0))))
        cfg = ModelConfig.toy(resolution=8)
        params = init_params(cfg, rng)
        st = TrainState("mt3", params, {n: rng.normal(size=a.shape).astype(a.dtype)
                                        for n, a in params.arrays().items()}, None, 7)
        checkpoint.save(tmp / "m.ckpt", checkpoint.Checkpoint(cfg, st, {"seed": seed}))
        back = checkpoint.load(tmp / "m.ckpt")
        same = all(back.state.params[n].data.tobytes() == params[n].data.tobytes() for n in params)
        same &= back.state.params.groups == params.groups and back.state.step == 7
        same &= all(back.state.opt_state[n].tobytes() == st.opt_state[n].tobytes() for n in params)
        out.append(CheckResult("checkpoint_roundtrip", bool(same)))
    return out


def run_all(trials: int = 20, seed: int = 0, second_order_trials: int = 3) -> list[CheckResult]:
    results = op_gradient_checks(trials, seed)
    results += op_gradient_checks(second_order_trials, seed, second_order=True)
    results.append(meta_gradient_check(seed))
    results += loss_property_checks(seed)
    results += group_norm_checks(seed)
    results += format_checks(seed)
    return results
