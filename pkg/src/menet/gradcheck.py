"""Finite-difference verification for the registered tensor ops.

Checks run in wide (64-bit) precision with central differences, h = 1e-5.
The reported figure is the max over all input elements of
|analytic - numeric| / max(1e-8, |analytic| + |numeric|).
"""

import numpy as np

from . import tensor as T
from .rng import DetRng

FD_STEP = 1e-5


def _rand(rng: DetRng, shape) -> T.Tensor:
    return T.Tensor(rng.normal(shape).astype(T.WIDE), requires_grad=True)


def _rand_gapped(rng: DetRng, shape, gap=0.05) -> T.Tensor:
    """Distinct values with pairwise gaps >> h, for max pools and relu."""
    n = int(np.prod(shape))
    base = (np.arange(n, dtype=T.WIDE) - n / 2) * gap + gap / 2  # keeps 0 off the grid
    vals = base[rng.permutation(n)] + rng.uniform(n, -gap / 8, gap / 8)
    return T.Tensor(vals.reshape(shape), requires_grad=True)


def _build_conv2d(rng, shapes):
    xs, ks = shapes if shapes else ((2, 4, 4), (3, 2, 3, 3))
    x, k = _rand(rng, xs), _rand(rng, ks)
    b = _rand(rng, (ks[0],))
    return [x, k, b], lambda x, k, b: T.conv2d(x, k, b, stride=1, padding=1)


def _build_conv2d_strided(rng, shapes):
    x, k = _rand(rng, (2, 7, 7)), _rand(rng, (3, 2, 3, 3))
    b = _rand(rng, (3,))
    return [x, k, b], lambda x, k, b: T.conv2d(x, k, b, stride=2, padding=0)


def _build_conv1d(rng, shapes):
    cs = shapes if shapes else (1, 6)
    x, k = _rand(rng, cs), _rand(rng, (1, 1, 3))
    return [x, k], T.conv1d


def _build_matmul(rng, shapes):
    a_s, b_s = shapes if shapes else ((3, 4), (4, 2))
    return [_rand(rng, a_s), _rand(rng, b_s)], T.matmul


def _build_pool(mode, gapped):
    def build(rng, shapes):
        s = shapes if shapes else (3, 4, 4)
        x = _rand_gapped(rng, s) if gapped else _rand(rng, s)
        return [x], lambda x: T.pool(x, mode)
    return build


def _build_concat(rng, shapes):
    a, b = _rand(rng, (2, 3, 4)), _rand(rng, (3, 3, 4))
    return [a, b], lambda a, b: T.concat([a, b], axis=0)


def _build_elementwise(rng, shapes):
    s = shapes if shapes else (3, 4)
    a, b = _rand(rng, s), _rand(rng, s)
    b.data += np.where(b.data >= 0, 1.5, -1.5)  # keep divisor away from zero
    return [a, b], lambda a, b: a * b + a / b - b


def _build_log(rng, shapes):
    s = shapes if shapes else (3, 4)
    x = T.Tensor(rng.uniform(s, 0.2, 3.0), requires_grad=True)
    return [x], T.log


def _build_clip(rng, shapes):
    x = _rand_gapped(rng, shapes if shapes else (3, 4))
    return [x], lambda x: T.clip(x, -0.3, 0.3) * x


def _build_mean(rng, shapes):
    x = _rand(rng, shapes if shapes else (3, 4, 4))
    return [x], lambda x: T.tmean(x, axis=(1, 2), keepdims=True) * x


REGISTRY = {
    "conv2d": _build_conv2d,
    "conv2d_strided": _build_conv2d_strided,
    "conv1d": _build_conv1d,
    "matmul": _build_matmul,
    "softmax": lambda rng, shapes: ([_rand(rng, shapes if shapes else (4, 5))],
                                    lambda x: T.softmax(x, axis=-1)),
    "sigmoid": lambda rng, shapes: ([_rand(rng, shapes if shapes else (3, 4))], T.sigmoid),
    "relu": lambda rng, shapes: ([_rand_gapped(rng, shapes if shapes else (3, 4))], T.relu),
    "pool_gap": _build_pool("gap", gapped=False),
    "pool_channel_avg": _build_pool("channel_avg", gapped=False),
    "pool_channel_max": _build_pool("channel_max", gapped=True),
    "pool_spatial_max2x2": _build_pool("spatial_max2x2", gapped=True),
    "concat": _build_concat,
    "upsample_nearest2": lambda rng, shapes: ([_rand(rng, shapes if shapes else (2, 3, 3))],
                                              T.upsample_nearest2),
    "elementwise": _build_elementwise,
    "log": _build_log,
    "clip": _build_clip,
    "mean": _build_mean,
}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_function(inputs, fn, rng: DetRng, h: float = FD_STEP) -> float:
    """Compare backward() against central differences of a scalar projection."""
    out = fn(*inputs)
    weights = rng.normal(out.data.shape).astype(T.WIDE)

    def loss_value() -> float:
        return float((fn(*inputs).data * weights).sum())

    for t in inputs:
        t.zero_grad()
    T.backward(T.tsum(fn(*inputs) * T.Tensor(weights)))

    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            nflat[i] = (up - down) / (2.0 * h)
        worst = max(worst, relative_error(analytic, numeric))
    return worst


def grad_check(op_name: str, shapes=None, seed: int = 0) -> float:
    """Finite-difference check for one registered op; returns max relative error."""
    if op_name not in REGISTRY:
        raise KeyError(f"unknown op {op_name!r}; registered: {sorted(REGISTRY)}")
    rng = DetRng(seed)
    inputs, fn = REGISTRY[op_name](rng, shapes)
    return check_function(inputs, fn, rng)


# Whole-net checks difference a loss of order 1, so central differences at
# h = 1e-5 carry ~eps/h rounding noise; 80-bit extended precision keeps that
# noise below the tolerance even for near-zero attention-projection gradients.
EXTRA_WIDE = np.longdouble


def model_check(seed: int = 0, levels: int = 2, size: int = 8,
                base: int = 2, h: float = FD_STEP) -> float:
    """Whole-network check: total loss on a bimodal input, every parameter
    element perturbed centrally. Returns the worst relative error across
    all parameters."""
    from . import losses
    from . import model as M

    cfg = M.MeNetConfig(levels=levels, base_channels=base, height=size, width=size)
    params = M.init(cfg, seed)
    rng = DetRng(seed + 0x5EED)
    for t in params.store.tensors():
        # nudge to a generic point: zero-initialized biases put relu plateaus
        # exactly on their kinks, where finite differences are one-sided
        t.data = t.data.astype(EXTRA_WIDE) + rng.uniform(t.data.shape, -0.05, 0.05).astype(EXTRA_WIDE)
    t1w = T.Tensor(rng.uniform((1, size, size)).astype(EXTRA_WIDE))
    fa = T.Tensor(rng.uniform((1, size, size)).astype(EXTRA_WIDE))
    label = T.Tensor((rng.uniform((1, size, size)) > 0.7).astype(EXTRA_WIDE))

    def loss_value():
        probs = M.forward(params, t1w, fa).probabilities
        return losses.total_loss(probs, label).total.data.reshape(())[()]

    def loss_tensor():
        probs = M.forward(params, t1w, fa).probabilities
        return losses.total_loss(probs, label).total

    params.store.zero_grad()
    T.backward(loss_tensor(), params.store)
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for n, t in params.store.items()}

    step = EXTRA_WIDE(h)
    worst = 0.0
    with M._inference(params.store):
        for name, t in params.store.items():
            flat = t.data.reshape(-1)
            numeric = np.zeros_like(flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                up = loss_value()
                flat[i] = orig - step
                down = loss_value()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * step)
            worst = max(worst, relative_error(analytic[name].astype(T.WIDE).reshape(-1),
                                              numeric.astype(T.WIDE)))
    return worst
