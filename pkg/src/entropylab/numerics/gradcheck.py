"""Central finite-difference auditing of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamVector

DEFAULT_STEP = 1e-5


@dataclass
class FDReport:
    max_rel_error: float
    numeric: np.ndarray
    analytic: np.ndarray
    nonfinite: list[int] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.nonfinite and np.isfinite(self.max_rel_error)


def scaled_max_error(numeric: np.ndarray, analytic: np.ndarray) -> float:
    """Worst coordinate error relative to the larger gradient's max-norm.

    Normalising per coordinate would blow up on coordinates whose true
    derivative is ~0 (rounding noise / tiny value); the gradient scale is the
    meaningful yardstick.
    """
    diff = np.max(np.abs(numeric - analytic), initial=0.0)
    scale = max(np.max(np.abs(numeric), initial=0.0), np.max(np.abs(analytic), initial=0.0))
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)


def central_differences(f, point: ParamVector, step: float = DEFAULT_STEP,
                        coords: np.ndarray | None = None) -> tuple[np.ndarray, list[int]]:
    if step <= 0:
        raise ValueError("step must be positive")
    shapes = point.shapes
    base = point.flatten()
    idx = np.arange(base.size) if coords is None else np.asarray(coords)
    out = np.zeros(idx.size)
    bad = []
    buf = base.copy()
    for n, i in enumerate(idx):
        buf[i] = base[i] + step
        fp = f(ParamVector.unflatten(shapes, buf))
        buf[i] = base[i] - step
        fm = f(ParamVector.unflatten(shapes, buf))
        buf[i] = base[i]
        if not (np.isfinite(fp) and np.isfinite(fm)):
            bad.append(int(i))
            out[n] = np.nan
            continue
        out[n] = (fp - fm) / (2.0 * step)
    return out, bad


def batched_central_differences(f_batch, point: ParamVector, step: float = DEFAULT_STEP,
                                chunk: int = 512) -> tuple[np.ndarray, list[int]]:
    """Central differences where ``f_batch(name, values)`` evaluates many perturbed copies of
    one segment at once (``values`` has shape (B, *segment_shape)) and returns B results."""
    if step <= 0:
        raise ValueError("step must be positive")
    parts, bad, offset = [], [], 0
    for name, base in point.items():
        flat = base.ravel()
        grads = np.empty(flat.size)
        for lo in range(0, flat.size, chunk):
            idx = np.arange(lo, min(lo + chunk, flat.size))
            vals = np.repeat(flat[None, :], 2 * idx.size, axis=0)
            vals[np.arange(idx.size), idx] += step
            vals[np.arange(idx.size) + idx.size, idx] -= step
            out = np.asarray(f_batch(name, vals.reshape((2 * idx.size,) + base.shape)), dtype=np.float64)
            fp, fm = out[:idx.size], out[idx.size:]
            grads[idx] = (fp - fm) / (2.0 * step)
            nonfinite = ~(np.isfinite(fp) & np.isfinite(fm))
            bad.extend(int(offset + i) for i in idx[nonfinite])
            grads[idx[nonfinite]] = np.nan
        parts.append(grads)
        offset += flat.size
    return np.concatenate(parts) if parts else np.zeros(0), bad


def finite_difference_check(f, point: ParamVector, step: float = DEFAULT_STEP, grad=None,
                            coords: np.ndarray | None = None, batch_f=None) -> FDReport:
    """Compare ``grad(point)`` (a ParamVector) against central differences of ``f``.

    ``grad`` may be a callable or an already computed ParamVector.  When
    ``batch_f`` is given it replaces the per-coordinate loop over ``f``.
    """
    analytic_pv = grad(point) if callable(grad) else grad
    if analytic_pv is None:
        raise ValueError("an analytic gradient is required")
    analytic = analytic_pv.flatten()
    if coords is not None:
        analytic = analytic[np.asarray(coords)]
    if batch_f is not None:
        numeric, bad = batched_central_differences(batch_f, point, step)
        if coords is not None:
            numeric = numeric[np.asarray(coords)]
    else:
        numeric, bad = central_differences(f, point, step, coords)
    ok = np.isfinite(numeric)
    err = scaled_max_error(numeric[ok], analytic[ok]) if ok.any() else float("nan")
    return FDReport(err, numeric, analytic, bad)


def directional_check(f, point: ParamVector, grad: ParamVector, directions,
                      step: float = DEFAULT_STEP) -> float:
    """Worst relative error of ``<grad, d>`` against central differences along each d."""
    worst = 0.0
    for d in directions:
        fd = (f(point + d * step) - f(point - d * step)) / (2.0 * step)
        an = grad.inner(d)
        denom = max(abs(fd), abs(an), 1e-300)
        worst = max(worst, abs(fd - an) / denom)
    return worst
