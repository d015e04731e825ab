# masrc/kernel.py
"""
Differentiable building blocks with hand-derived gradients.

Every forward op is a pure function of its inputs. Each has a matching
``*_backward`` taking the upstream gradient plus the forward inputs (or the
forward output where that is cheaper) and returning input gradients.
"""
import contextlib
import contextvars
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from errors import DegenerateInputError, NumericError, ShapeMismatchError

logger = logging.getLogger(__name__)

LAYER_NORM_EPS = 1e-5
PROB_FLOOR = 1e-7
KINK_TOLERANCE = 1e-6

GradDict = dict[str, np.ndarray]


class ParamStore:
    """Named parameter slots, each with a gradient accumulator of the same shape."""

    def __init__(self) -> None:
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._values:
            raise ValueError(f"Parameter slot '{name}' is already registered.")
        value = np.array(value, copy=True)
        self._values[name] = value
        self._grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def items(self):
        return self._values.items()

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set_value(self, name: str, value: np.ndarray) -> None:
        current = self._values[name]
        if np.shape(value) != current.shape:
            raise ShapeMismatchError(
                f"Slot '{name}' expects shape {current.shape}, got {np.shape(value)}.", slot=name)
        self._values[name] = np.asarray(value, dtype=current.dtype).copy()

    def zero_grad(self) -> None:
        for grad in self._grads.values():
            grad.fill(0.0)

    def accumulate(self, grads: GradDict, scale: float = 1.0) -> None:
        for name, g in grads.items():
            target = self._grads[name]
            if g.shape != target.shape:
                raise ShapeMismatchError(
                    f"Gradient for '{name}' has shape {g.shape}, slot has {target.shape}.", slot=name)
            target += scale * g

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self._values.values()))

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, value in self._values.items():
            out.add(name, value.astype(dtype))
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self._values.items():
            out.add(name, value)
        return out

    def equals(self, other: "ParamStore") -> bool:
        if self.names() != other.names():
            return False
        return all(np.array_equal(self[n], other[n]) for n in self)


def add_grad(grads: GradDict, name: str, g: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


def check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"Non-finite values in {name}.")


def glorot_uniform(shape: tuple[int, ...], rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    if len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    else:
        raise ValueError(f"glorot_uniform supports 2-D and 4-D shapes, got {shape}")
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


# Kink tracking: relu and maxpool report their activation pattern while active.
_kink_log: contextvars.ContextVar[Optional[list]] = contextvars.ContextVar("_kink_log", default=None)


@contextlib.contextmanager
def track_kinks() -> Iterator[list]:
    log: list = []
    token = _kink_log.set(log)
    try:
        yield log
    finally:
        _kink_log.reset(token)


def _record_pattern(pattern: np.ndarray) -> None:
    log = _kink_log.get()
    if log is not None:
        log.append(pattern.copy())


def _near_kink(values: np.ndarray) -> bool:
    log = _kink_log.get()
    return log is not None and bool(np.any(np.abs(values) < KINK_TOLERANCE))


def _same_patterns(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


# --- dense ops -------------------------------------------------------------

def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatchError(f"linear: input {x.shape}, weight {w.shape}, bias {b.shape}")
    return x @ w + b


def linear_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray):
    x2 = np.atleast_2d(x)
    d2 = np.atleast_2d(dout)
    dx = (d2 @ w.T).reshape(x.shape)
    dw = x2.T @ d2
    db = d2.sum(axis=0)
    return dx, dw, db


def gcn_smooth(x: np.ndarray, a: np.ndarray, w: np.ndarray) -> np.ndarray:
    t, d = x.shape
    if a.shape != (t, t) or w.shape[0] != d:
        raise ShapeMismatchError(f"gcn_smooth: features {x.shape}, adjacency {a.shape}, weight {w.shape}")
    return a @ x @ w


def gcn_smooth_backward(dout: np.ndarray, x: np.ndarray, a: np.ndarray, w: np.ndarray):
    """Returns gradients for (x, a, w)."""
    dx = a.T @ dout @ w.T
    da = dout @ (x @ w).T
    dw = (a @ x).T @ dout
    return dx, da, dw


def relu(x: np.ndarray) -> np.ndarray:
    mask = x > 0
    _record_pattern(mask)
    if _near_kink(x):
        # A value sitting on the kink flips under any perturbation.
        _record_pattern(np.abs(x) < KINK_TOLERANCE)
    return np.where(mask, x, 0).astype(x.dtype, copy=False)


def relu_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0)


def sigmoid(z):
    z = np.asarray(z)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype if z.dtype.kind == "f" else np.float64)


def sigmoid_backward(dout, p):
    return dout * p * (1.0 - p)


def clamp_probability(p):
    return np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)


def bce_loss(p, y) -> float:
    """Mean binary cross-entropy of probabilities ``p`` against targets ``y``."""
    p = clamp_probability(np.asarray(p, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if p.shape != y.shape:
        raise ShapeMismatchError(f"bce_loss: predictions {p.shape}, targets {y.shape}")
    losses = -y * np.log(p) - (1.0 - y) * np.log(1.0 - p)
    return float(np.mean(losses))


def bce_backward(p, y):
    p = np.asarray(p)
    y = np.asarray(y, dtype=p.dtype)
    pc = clamp_probability(p)
    inside = (p > PROB_FLOOR) & (p < 1.0 - PROB_FLOOR)
    return np.where(inside, (pc - y) / (pc * (1.0 - pc)), 0.0) / max(p.size, 1)


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    d = x.shape[-1]
    if d < 2:
        raise ShapeMismatchError("layer_norm needs at least two features per row.")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatchError(f"layer_norm: features {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + eps)
    return xhat * gamma + beta


def layer_norm_backward(dout: np.ndarray, x: np.ndarray, gamma: np.ndarray, eps: float = LAYER_NORM_EPS):
    """Returns gradients for (x, gamma, beta)."""
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.var(axis=-1, keepdims=True) + eps)
    xhat = (x - mu) * inv_std
    dgamma = (dout * xhat).sum(axis=0)
    dbeta = dout.sum(axis=0)
    dxhat = dout * gamma
    dx = inv_std / d * (d * dxhat - dxhat.sum(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def masked_softmax(e: np.ndarray) -> np.ndarray:
    """Row softmax over finite entries; an all -inf row maps to zeros."""
    finite = np.isfinite(e)
    has_support = finite.any(axis=-1, keepdims=True)
    row_max = np.where(finite, e, -np.inf).max(axis=-1, keepdims=True)
    row_max = np.where(has_support, row_max, 0.0)
    shifted = np.where(finite, e, row_max) - row_max
    ex = np.where(finite, np.exp(shifted), 0.0)
    total = ex.sum(axis=-1, keepdims=True)
    return (ex / np.where(total > 0, total, 1.0)).astype(e.dtype, copy=False)


def masked_softmax_backward(dout: np.ndarray, p: np.ndarray) -> np.ndarray:
    return p * (dout - (dout * p).sum(axis=-1, keepdims=True))


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    if np.any(norms == 0):
        rows = np.nonzero(norms[..., 0] == 0)[0].tolist()
        raise DegenerateInputError(f"Zero-norm feature rows {rows}; cosine similarity is undefined.")
    return x / norms


def l2_normalize_backward(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    norms = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    u = x / norms
    return (dout - u * (dout * u).sum(axis=-1, keepdims=True)) / norms


def residual_gcn_block(x, a, w, gamma, beta):
    """LN(x + relu(a @ x @ w)); returns the output and the values backward needs."""
    h = gcn_smooth(x, a, w)
    z = x + relu(h)
    return layer_norm(z, gamma, beta), (x, a, h, z)


def residual_gcn_block_backward(dout, cache, w, gamma):
    """Returns gradients for (x, a, w, gamma, beta)."""
    x, a, h, z = cache
    dz, dgamma, dbeta = layer_norm_backward(dout, z, gamma)
    dh = relu_backward(dz, h)
    dx_gcn, da, dw = gcn_smooth_backward(dh, x, a, w)
    return dz + dx_gcn, da, dw, dgamma, dbeta


# --- convolutional ops -----------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int, pad: int):
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    cols = np.empty((c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + ho, j:j + wo]
    return cols.reshape(c * kh * kw, ho * wo), ho, wo


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: int = 1) -> np.ndarray:
    """Stride-1 convolution of a (C, H, W) map with (O, C, kh, kw) filters."""
    out_ch, in_ch, kh, kw = w.shape
    if x.ndim != 3 or x.shape[0] != in_ch or b.shape != (out_ch,):
        raise ShapeMismatchError(f"conv2d: input {x.shape}, filters {w.shape}, bias {b.shape}")
    cols, ho, wo = _im2col(x, kh, kw, pad)
    out = w.reshape(out_ch, -1) @ cols + b[:, None]
    return out.reshape(out_ch, ho, wo)


def conv2d_backward(dout: np.ndarray, x: np.ndarray, w: np.ndarray, pad: int = 1):
    """Returns gradients for (x, w, b)."""
    out_ch, in_ch, kh, kw = w.shape
    c, h, wd = x.shape
    cols, ho, wo = _im2col(x, kh, kw, pad)
    dflat = dout.reshape(out_ch, -1)
    dw = (dflat @ cols.T).reshape(w.shape)
    db = dflat.sum(axis=1)
    dcols = (w.reshape(out_ch, -1).T @ dflat).reshape(c, kh, kw, ho, wo)
    dxp = np.zeros((c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + ho, j:j + wo] += dcols[:, i, j]
    return dxp[:, pad:pad + h, pad:pad + wd], dw, db


def _pool_windows(x: np.ndarray, size: int) -> np.ndarray:
    c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeMismatchError(f"maxpool2d: input {x.shape} is smaller than the {size}x{size} window.")
    core = x[:, :ho * size, :wo * size]
    return core.reshape(c, ho, size, wo, size).transpose(0, 1, 3, 2, 4).reshape(c, ho, wo, size * size)


def maxpool2d(x: np.ndarray, size: int = 2) -> np.ndarray:
    """Non-overlapping max pooling (stride = size, floor on odd extents)."""
    windows = _pool_windows(x, size)
    idx = windows.argmax(axis=-1)
    _record_pattern(idx)
    if _kink_log.get() is not None:
        ordered = np.sort(windows, axis=-1)
        _record_pattern((ordered[..., -1] - ordered[..., -2]) < KINK_TOLERANCE)
    return np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]


def maxpool2d_backward(dout: np.ndarray, x: np.ndarray, size: int = 2) -> np.ndarray:
    windows = _pool_windows(x, size)
    idx = windows.argmax(axis=-1)
    dwin = np.zeros_like(windows, dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    c, ho, wo, _ = windows.shape
    dx = np.zeros(x.shape, dtype=dout.dtype)
    dx[:, :ho * size, :wo * size] = (
        dwin.reshape(c, ho, wo, size, size).transpose(0, 1, 3, 2, 4).reshape(c, ho * size, wo * size))
    return dx


# --- finite-difference verification ----------------------------------------

@dataclass
class SlotReport:
    max_rel_error: float
    compared: int
    excluded: int


@dataclass
class GradCheckReport:
    slots: dict[str, SlotReport] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max((s.max_rel_error for s in self.slots.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def failures(self) -> list[str]:
        return [name for name, s in self.slots.items() if s.max_rel_error >= self.tolerance]


LossAndGrads = Callable[[ParamStore], tuple[float, GradDict]]


def grad_check(f: LossAndGrads, params: ParamStore, eps: float = 1e-3, tolerance: float = 1e-4,
               max_entries_per_slot: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """
    Compares analytic gradients with central differences in double precision.

    Args:
        f: Maps a ParamStore to (scalar value, analytic gradients by slot name).
        params: Point of evaluation; copied to float64, never mutated.
        eps: Finite-difference step.
        tolerance: Relative error bound used by ``GradCheckReport.passed``.
        max_entries_per_slot: When set, a seeded sample of entries per slot is checked.
        seed: Seed for the entry sample.

    Returns:
        Per-slot max normwise relative error
        max|a - n| / max(max|a|, max|n|, 1e-8) with compared/excluded counts.
        An entry is excluded when its perturbation crosses a relu/maxpool kink.
    """
    theta = params.astype(np.float64)
    with track_kinks() as base_pattern:
        value, analytic = f(theta)
    if not np.isfinite(value):
        raise NumericError("grad_check: objective is not finite at the evaluation point.")

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name in theta.names():
        slot = theta[name]
        grad = np.asarray(analytic.get(name, np.zeros_like(slot)), dtype=np.float64)
        if grad.shape != slot.shape:
            raise ShapeMismatchError(f"Analytic gradient for '{name}' has shape {grad.shape}.", slot=name)
        flat_indices = np.arange(slot.size)
        if max_entries_per_slot is not None and slot.size > max_entries_per_slot:
            flat_indices = np.sort(rng.choice(slot.size, size=max_entries_per_slot, replace=False))

        analytic_vals, numeric_vals = [], []
        excluded = 0
        flat = slot.reshape(-1)
        for idx in flat_indices:
            original = flat[idx]
            flat[idx] = original + eps
            with track_kinks() as plus_pattern:
                f_plus, _ = f(theta)
            flat[idx] = original - eps
            with track_kinks() as minus_pattern:
                f_minus, _ = f(theta)
            flat[idx] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NumericError(f"grad_check: objective not finite while perturbing '{name}'.")
            if not (_same_patterns(base_pattern, plus_pattern) and _same_patterns(base_pattern, minus_pattern)):
                excluded += 1
                continue
            analytic_vals.append(grad.reshape(-1)[idx])
            numeric_vals.append((f_plus - f_minus) / (2.0 * eps))

        if analytic_vals:
            a = np.asarray(analytic_vals)
            n = np.asarray(numeric_vals)
            scale = max(np.abs(a).max(), np.abs(n).max(), 1e-8)
            rel = float(np.abs(a - n).max() / scale)
        else:
            rel = 0.0
        report.slots[name] = SlotReport(max_rel_error=rel, compared=len(analytic_vals), excluded=excluded)
        logger.debug("grad_check %s: rel=%.3e compared=%d excluded=%d", name, rel, len(analytic_vals), excluded)
    return report


def kernel_gradient_suite(seeds: int = 10, eps: float = 1e-3, tolerance: float = 1e-4) -> dict[str, float]:
    """Gradient-checks every kernel op on random small shapes; returns the worst error per op."""
    worst: dict[str, float] = {}

    def record(op: str, report: GradCheckReport) -> None:
        worst[op] = max(worst.get(op, 0.0), report.max_error)

    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        t, d = 5, 4
        x = rng.standard_normal((t, d))
        a = np.abs(rng.standard_normal((t, t)))
        y = float(rng.integers(0, 2))

        store = ParamStore()
        store.add("x", x)
        store.add("w", rng.standard_normal((d, d)))
        store.add("a", a)
        store.add("gamma", 1.0 + 0.1 * rng.standard_normal(d))
        store.add("beta", 0.1 * rng.standard_normal(d))
        store.add("e", rng.standard_normal((t, t)))
        store.add("head", rng.standard_normal((d, 1)))
        store.add("head_bias", rng.standard_normal(1))
        mask = rng.random((t, t)) < 0.3
        mask[0] = True
        readout = rng.standard_normal((t, d))

        def gcn_ln(p: ParamStore):
            h = gcn_smooth(p["x"], p["a"], p["w"])
            out = layer_norm(h, p["gamma"], p["beta"])
            value = float((out * readout).sum())
            dh, dg, db = layer_norm_backward(readout, h, p["gamma"])
            dx_, da, dw = gcn_smooth_backward(dh, p["x"], p["a"], p["w"])
            return value, {"x": dx_, "a": da, "w": dw, "gamma": dg, "beta": db}

        record("gcn_smooth+layer_norm", grad_check(gcn_ln, store, eps, tolerance))

        def softmax_relu(p: ParamStore):
            e = np.where(mask, -np.inf, p["e"])
            s = masked_softmax(e)
            h = relu(s @ p["x"])
            value = float((h * readout).sum())
            dh = relu_backward(readout, s @ p["x"])
            ds = dh @ p["x"].T
            de = np.where(mask, 0.0, masked_softmax_backward(ds, s))
            return value, {"e": de, "x": s.T @ dh}

        record("masked_softmax+relu", grad_check(softmax_relu, store, eps, tolerance))

        def linear_bce(p: ParamStore):
            v = p["x"][0]
            z = linear(v, p["head"], p["head_bias"])
            prob = sigmoid(z)
            value = bce_loss(prob, np.array([y]))
            dz = sigmoid_backward(bce_backward(prob, np.array([y])), prob)
            dv, dw, db = linear_backward(dz, v, p["head"])
            dx_ = np.zeros_like(p["x"])
            dx_[0] = dv
            return value, {"x": dx_, "head": dw, "head_bias": db}

        record("linear+sigmoid+bce", grad_check(linear_bce, store, eps, tolerance))

        def normalize(p: ParamStore):
            u = l2_normalize(p["x"])
            return float((u * readout).sum()), {"x": l2_normalize_backward(readout, p["x"])}

        record("l2_normalize", grad_check(normalize, store, eps, tolerance))

        conv = ParamStore()
        conv.add("img", rng.standard_normal((2, 5, 5)))
        conv.add("filters", rng.standard_normal((3, 2, 3, 3)))
        conv.add("bias", rng.standard_normal(3))
        pooled_readout = rng.standard_normal((3, 2, 2))

        def conv_pool(p: ParamStore):
            h = conv2d_forward(p["img"], p["filters"], p["bias"])
            r = relu(h)
            o = maxpool2d(r)
            value = float((o * pooled_readout).sum())
            dr = maxpool2d_backward(pooled_readout, r)
            dh = relu_backward(dr, h)
            dimg, dw, db = conv2d_backward(dh, p["img"], p["filters"])
            return value, {"img": dimg, "filters": dw, "bias": db}

        record("conv2d+relu+maxpool2d", grad_check(conv_pool, conv, eps, tolerance))
    return worst
