"""Central finite-difference checking of every backward implementation.

:func:`grad_check` is the harness; :func:`run_suite` applies it to each
operator, each layer and a small end-to-end model in 64-bit precision.
:func:`flip_sign` negates one named backward, which the suite must catch.
"""
from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass

import numpy as np

from speednet import layers, losses, ops
from speednet.model import build, toy_config

OP_TOL = 1e-4
MODEL_TOL = 1e-3
LOSS_TOL = 1e-6
MODEL_STEPS = (1e-6, 1e-7, 1e-8)
LAYER_STEPS = (1e-4, 1e-5, 1e-6)
LAYER_CASES = ("conv_block", "involution_layer", "dipc_block")
MODEL_MIN_COORDS = 200
MODEL_COORD_POOL = 600


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class GradCheckResult:
    max_error: float
    array_index: int
    coord: tuple[int, ...]
    checked: int = 0
    skipped: int = 0


class SwitchRecorder:
    """Record every ReLU mask and max-pool argmax computed while active.

    Two evaluations with equal :meth:`signature` lie on the same smooth
    piece of a piecewise-smooth network, so a central difference between
    them estimates the derivative; otherwise the step straddles a kink.
    """

    def __init__(self):
        self._log: list[bytes] = []

    def __enter__(self):
        relu, maxpool = ops.relu, ops.maxpool2d
        self._saved = relu, maxpool

        def rec_relu(x):
            self._log.append(np.packbits(x > 0).tobytes())
            return relu(x)

        def rec_maxpool(x, k=2, stride=2):
            out, argmax = maxpool(x, k, stride)
            self._log.append(argmax.tobytes())
            return out, argmax

        ops.relu, ops.maxpool2d = rec_relu, rec_maxpool
        return self

    def __exit__(self, *exc):
        ops.relu, ops.maxpool2d = self._saved

    def clear(self):
        self._log = []

    def signature(self) -> int:
        return hash(tuple(self._log))


def grad_check(loss_fn, arrays: list[np.ndarray], grads: list[np.ndarray], h: float = 1e-5,
               coords=None, steps=None, switches: SwitchRecorder | None = None,
               min_checked: int = 0) -> GradCheckResult:
    """Compare analytic ``grads`` with central differences of ``loss_fn``.

    ``loss_fn()`` must read ``arrays`` (they are perturbed in place and
    restored). ``coords`` optionally restricts the check to
    ``(array_index, flat_index)`` pairs. The error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``; the maximum is returned with its
    location.

    With ``switches``, a coordinate whose ``+h`` and ``-h`` evaluations take
    different ReLU/max-pool branches is retried with each smaller step in
    ``steps``; if no step avoids the kink the coordinate is skipped. Checking
    stops once ``min_checked`` coordinates have been compared (0: all).
    """
    if coords is None:
        coords = [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    steps = tuple(steps) if steps else (h,)
    worst = GradCheckResult(0.0, -1, (), 0)
    checked = skipped = 0
    for i, j in coords:
        if min_checked and checked >= min_checked:
            break
        arr = arrays[i]
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"array {i} is not contiguous")
        orig = flat[j]
        numeric = None
        for step in steps:
            fp, sig_p = _eval_at(loss_fn, flat, j, orig + step, switches)
            fm, sig_m = _eval_at(loss_fn, flat, j, orig - step, switches)
            if sig_p == sig_m:
                numeric = (fp - fm) / (2 * step)
                break
        flat[j] = orig
        if numeric is None:
            skipped += 1
            continue
        checked += 1
        analytic = grads[i].reshape(-1)[j]
        if not (np.isfinite(numeric) and np.isfinite(analytic)):
            raise NonFiniteError(
                f"non-finite gradient at array {i}, index {np.unravel_index(j, arr.shape)}: "
                f"analytic={analytic}, numeric={numeric}")
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        if err > worst.max_error:
            worst = GradCheckResult(float(err), i, tuple(int(k) for k in np.unravel_index(j, arr.shape)))
    worst.checked, worst.skipped = checked, skipped
    return worst


def _eval_at(loss_fn, flat, j, value, switches):
    flat[j] = value
    if switches is None:
        return loss_fn(), None
    switches.clear()
    out = loss_fn()
    return out, switches.signature()


# --------------------------------------------------------------------------
# the suite
# --------------------------------------------------------------------------

BACKWARDS = {
    "conv2d": (ops, "conv2d_backward"),
    "involution2d": (ops, "involution2d_backward"),
    "maxpool2d": (ops, "maxpool2d_backward"),
    "avgpool2d": (ops, "avgpool2d_backward"),
    "upsample2x": (ops, "upsample2x_backward"),
    "concat_channels": (ops, "concat_channels_backward"),
    "batchnorm2d": (ops, "batchnorm2d_backward"),
    "relu": (ops, "relu_backward"),
    "sigmoid": (ops, "sigmoid_backward"),
    "add": (ops, "add_backward"),
    "mul": (ops, "mul_backward"),
    "tversky_loss": (losses, "tversky_loss"),
}


def _negate(value):
    if isinstance(value, np.ndarray):
        return -value
    if isinstance(value, tuple):
        return tuple(_negate(v) for v in value)
    if isinstance(value, list):
        return [_negate(v) for v in value]
    return value


@contextlib.contextmanager
def flip_sign(op: str):
    """Temporarily negate the backward of ``op`` (mutation testing)."""
    module, attr = BACKWARDS[op]
    original = getattr(module, attr)
    if op == "tversky_loss":
        def mutated(*args, **kwargs):
            loss, grad = original(*args, **kwargs)
            return loss, -grad
    else:
        def mutated(*args, **kwargs):
            return _negate(original(*args, **kwargs))
    setattr(module, attr, mutated)
    try:
        yield
    finally:
        setattr(module, attr, original)


@dataclass
class CaseResult:
    name: str
    max_error: float
    tol: float
    where: str
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


SHAPE = (2, 4, 6, 6)
LAYER_COORDS_PER_ARRAY = 24


def _projection(rng, shape):
    return rng.standard_normal(shape)


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


def _case_conv2d(rng, seed):
    x = rng.standard_normal(SHAPE)
    w = rng.standard_normal((3, 4, 3, 3))
    b = rng.standard_normal(3)
    d = 1 + seed % 3
    stride = 1 + seed % 2
    r = _projection(rng, ops.conv2d(x, w, b, stride, d, d).shape)

    def f():
        return float(np.sum(r * ops.conv2d(x, w, b, stride, d, d)))

    gx, gw, gb = ops.conv2d_backward(x, w, r, stride, d, d)
    return f, [x, w, b], [gx, gw, gb]


def _case_involution2d(rng, seed):
    x = rng.standard_normal(SHAPE)
    K, G, d = 3, 2, 1 + seed % 3
    kern = rng.standard_normal((2, G * K * K, 6, 6))
    r = _projection(rng, SHAPE)

    def f():
        return float(np.sum(r * ops.involution2d(x, kern, K, G, 1, d)))

    gx, gk = ops.involution2d_backward(x, kern, K, G, 1, d, r)
    return f, [x, kern], [gx, gk]


def _case_maxpool2d(rng, seed):
    x = rng.standard_normal(SHAPE)
    k, s = (2, 2) if seed % 2 == 0 else (3, 1)
    out, idx = ops.maxpool2d(x, k, s)
    r = _projection(rng, out.shape)

    def f():
        return float(np.sum(r * ops.maxpool2d(x, k, s)[0]))

    return f, [x], [ops.maxpool2d_backward(x.shape, idx, r, k, s)]


def _case_avgpool2d(rng, seed):
    x = rng.standard_normal(SHAPE)
    k = 2 + seed % 2
    r = _projection(rng, ops.avgpool2d(x, k).shape)

    def f():
        return float(np.sum(r * ops.avgpool2d(x, k)))

    return f, [x], [ops.avgpool2d_backward(x.shape, r, k)]


def _case_upsample2x(rng, seed):
    x = rng.standard_normal(SHAPE)
    r = _projection(rng, (2, 4, 12, 12))

    def f():
        return float(np.sum(r * ops.upsample2x(x)))

    return f, [x], [ops.upsample2x_backward(r)]


def _case_concat(rng, seed):
    a = rng.standard_normal(SHAPE)
    b = rng.standard_normal((2, 3, 6, 6))
    r = _projection(rng, (2, 7, 6, 6))

    def f():
        return float(np.sum(r * ops.concat_channels([a, b])))

    return f, [a, b], ops.concat_channels_backward(r, [4, 3])


def _case_batchnorm2d(rng, seed, training=True):
    x = rng.standard_normal(SHAPE) * 2 + 0.5
    gamma = rng.standard_normal(4)
    beta = rng.standard_normal(4)
    rm, rv = rng.standard_normal(4), rng.uniform(0.5, 2.0, 4)
    r = _projection(rng, SHAPE)

    def f():
        out, _ = ops.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), training)
        return float(np.sum(r * out))

    _, cache = ops.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), training)
    return f, [x, gamma, beta], list(ops.batchnorm2d_backward(cache, r))


def _case_relu(rng, seed):
    x = _away_from_zero(rng, SHAPE)
    r = _projection(rng, SHAPE)
    return (lambda: float(np.sum(r * ops.relu(x)))), [x], [ops.relu_backward(x, r)]


def _case_sigmoid(rng, seed):
    x = rng.standard_normal(SHAPE) * 3
    r = _projection(rng, SHAPE)
    return (lambda: float(np.sum(r * ops.sigmoid(x)))), [x], [ops.sigmoid_backward(ops.sigmoid(x), r)]


def _case_add(rng, seed):
    a, b = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    r = _projection(rng, SHAPE)
    return (lambda: float(np.sum(r * ops.add(a, b)))), [a, b], list(ops.add_backward(r))


def _case_mul(rng, seed):
    a, b = rng.standard_normal(SHAPE), rng.standard_normal(SHAPE)
    r = _projection(rng, SHAPE)
    return (lambda: float(np.sum(r * ops.mul(a, b)))), [a, b], list(ops.mul_backward(a, b, r))


def _case_tversky(rng, seed):
    pred = rng.uniform(0.05, 0.95, (2, 1, 6, 6))
    target = (rng.random((2, 1, 6, 6)) > 0.5).astype(np.float64)
    params = losses.TverskyParams(0.3, 0.7, 1.0 if seed % 2 == 0 else 0.0)

    def f():
        return losses.tversky_loss(pred, target, params)[0]

    return f, [pred], [losses.tversky_loss(pred, target, params)[1]]


def _layer_case(module, inputs, rng, seed, input_grad=True):
    """Check a layer w.r.t. its parameters and (optionally) its first input.

    The loss is a mean reduction ``sum(R * out) / out.size``: finite-difference
    roundoff scales with the loss value, and structurally-zero gradients
    (a bias cancelled by a following batch norm) must stay below the 1e-8
    floor of the error measure.
    """
    module.astype(np.float64).train()
    out = module(*inputs)
    r = _projection(rng, out.shape) / out.size
    module.zero_grad()
    gx = module.backward(r)
    params = module.parameters()
    arrays = [p.value for p in params]
    grads = [p.grad.copy() for p in params]
    if input_grad:
        arrays.append(inputs[0])
        grads.append(gx)

    def f():
        return float(np.sum(r * module(*inputs)))

    return f, arrays, grads, _sample_coords(rng, arrays, LAYER_COORDS_PER_ARRAY)


def _sample_coords(rng, arrays, per_array):
    coords = []
    for i, a in enumerate(arrays):
        idx = np.arange(a.size) if a.size <= per_array else np.sort(
            rng.choice(a.size, per_array, replace=False))
        coords.extend((i, int(j)) for j in idx)
    return coords


def _case_conv_block(rng, seed):
    block = layers.ConvBlock(4, 5, 3, dilation=1 + seed % 2, rng=rng)
    return _layer_case(block, [rng.standard_normal(SHAPE)], rng, seed)


def _case_involution_layer(rng, seed):
    inv = layers.Involution(4, 3, groups=2, reduction=2, dilation=1 + seed % 3,
                            stride=1 + (seed == 4), rng=rng)
    shape = (2, 4, 8, 8) if seed == 4 else SHAPE
    return _layer_case(inv, [rng.standard_normal(shape)], rng, seed)


def _case_dipc(rng, seed):
    level = 1 + seed % 2
    size = 8
    block = layers.DipcBlock(level, 4, 3, (1, 2, 3), reduction=2, groups=2,
                             residual=seed != 3, rng=rng)
    f_in = rng.standard_normal((2, 4, size, size))
    image = rng.random((2, 3, size * 2 ** (level - 1), size * 2 ** (level - 1)))
    return _layer_case(block, [f_in, image], rng, seed)


def _case_model(rng, seed, n_coords=MODEL_COORD_POOL):
    model = build(toy_config(32, seed=seed)).astype(np.float64)
    image = rng.random((2, 3, 32, 32))
    fn, arrays, grads, _ = _layer_case(model, [image], rng, seed, input_grad=False)
    sizes = np.array([a.size for a in arrays])
    flat = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)
    coords = []
    for k in flat:
        i = int(np.searchsorted(bounds, k, side="right"))
        coords.append((i, int(k - (bounds[i - 1] if i else 0))))
    return fn, arrays, grads, coords


OP_CASES = {
    "conv2d": _case_conv2d,
    "involution2d": _case_involution2d,
    "maxpool2d": _case_maxpool2d,
    "avgpool2d": _case_avgpool2d,
    "upsample2x": _case_upsample2x,
    "concat_channels": _case_concat,
    "batchnorm2d": _case_batchnorm2d,
    "batchnorm2d_infer": lambda rng, seed: _case_batchnorm2d(rng, seed, training=False),
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "add": _case_add,
    "mul": _case_mul,
    "tversky_loss": _case_tversky,
    "conv_block": _case_conv_block,
    "involution_layer": _case_involution_layer,
    "dipc_block": _case_dipc,
}


def run_case(name: str, seeds=range(5)) -> CaseResult:
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    tol = LOSS_TOL if name == "tversky_loss" else OP_TOL
    for seed in seeds:
        rng = np.random.default_rng(1000 + seed)
        case = OP_CASES[name](rng, seed)
        coords = case[3] if len(case) == 4 else None
        if name in LAYER_CASES:
            with SwitchRecorder() as switches:
                res = grad_check(*case[:3], coords=coords, steps=LAYER_STEPS, switches=switches)
        else:
            res = grad_check(*case[:3], coords=coords)
        if res.max_error >= worst:
            worst = res.max_error
            where = f"seed {seed}, input {res.array_index}, index {res.coord}"
    return CaseResult(name, worst, tol, where, time.perf_counter() - t0)


def run_model_case(seeds=range(1), n_coords=MODEL_MIN_COORDS) -> CaseResult:
    """End-to-end check of the toy network on ``n_coords`` random parameters.

    Coordinates whose perturbation flips a ReLU or max-pool decision are
    retried with smaller steps and, failing that, replaced by further
    random coordinates.
    """
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    for seed in seeds:
        rng = np.random.default_rng(2000 + seed)
        fn, arrays, grads, coords = _case_model(rng, seed)
        with SwitchRecorder() as switches:
            res = grad_check(fn, arrays, grads, coords=coords, steps=MODEL_STEPS,
                             switches=switches, min_checked=n_coords)
        if res.checked < n_coords:
            raise RuntimeError(f"only {res.checked} smooth coordinates found for seed {seed}")
        if res.max_error >= worst:
            worst = res.max_error
            where = (f"seed {seed}, param {res.array_index}, index {res.coord}, "
                     f"{res.checked} checked, {res.skipped} kinked")
    return CaseResult("speednet_toy", worst, MODEL_TOL, where, time.perf_counter() - t0)


def run_suite(seeds=range(5), model: bool = True) -> list[CaseResult]:
    results = [run_case(name, seeds) for name in OP_CASES]
    if model:
        results.append(run_model_case())
    return results
