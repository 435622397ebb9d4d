"""Central finite-difference check of tape gradients."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import GradTape, Tensor


@dataclass
class TensorCheck:
    name: str
    checked: int
    max_rel_err: float
    max_abs_err: float
    passed: bool


@dataclass
class GradCheckReport:
    tol: float
    h: float
    tensors: list[TensorCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(t.passed for t in self.tensors)

    @property
    def max_rel_err(self) -> float:
        return max((t.max_rel_err for t in self.tensors), default=0.0)

    def lines(self) -> list[str]:
        return [f"{'PASS' if t.passed else 'FAIL'} {t.name}: max rel err {t.max_rel_err:.3e} "
                f"({t.checked} entries)" for t in self.tensors]


def _scalar(f, params) -> float:
    out = f(params)
    val = float(np.sum(out.data if isinstance(out, Tensor) else out))
    if not np.isfinite(val):
        raise NumericError("finite_diff_check: objective is not finite")
    return val


def finite_diff_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` with ``(f(p+h) - f(p-h)) / 2h``.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``.
    With ``max_entries`` set, that many entries per tensor are sampled
    (without replacement) instead of checking every element.
    """
    params = dict(params)
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ConfigError(f"finite_diff_check needs float64 parameters, {name} is {p.dtype}")

    with GradTape() as tape:
        tape.watch(params)
        out = f(params)
    if not np.isfinite(out.data).all():
        raise NumericError("finite_diff_check: objective is not finite")
    grads = tape.gradient(out, params)

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tol=tol, h=h)
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        analytic = grads[name].data.reshape(-1)
        max_rel = max_abs = 0.0
        for i in idx:
            plus = flat.copy()
            plus[i] += h
            minus = flat.copy()
            minus[i] -= h
            fp = _scalar(f, {**params, name: Tensor(plus.reshape(p.shape))})
            fm = _scalar(f, {**params, name: Tensor(minus.reshape(p.shape))})
            num = (fp - fm) / (2 * h)
            err = abs(analytic[i] - num)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(analytic[i]), abs(num), floor))
        report.tensors.append(TensorCheck(name, len(idx), max_rel, max_abs, max_rel <= tol))
    return report


@dataclass
class DirectionCheck:
    analytic: float
    numeric: float

    @property
    def rel_err(self) -> float:
        return abs(self.analytic - self.numeric) / max(abs(self.analytic), abs(self.numeric), 1e-7)


def directional_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-5,
    directions: int = 3,
    seed: int = 0,
) -> list[DirectionCheck]:
    """Compare ``<grad f, v>`` with ``(f(p+hv) - f(p-hv)) / 2h`` for random unit ``v``.

    One direction touches every entry of every tensor at once, which
    complements the per-entry sampling of :func:`finite_diff_check`.
    """
    params = dict(params)
    with GradTape() as tape:
        tape.watch(params)
        out = f(params)
    grads = tape.gradient(out, params)
    rng = np.random.default_rng(seed)
    checks = []
    for _ in range(directions):
        v = {k: rng.standard_normal(p.shape) for k, p in params.items()}
        scale = np.sqrt(sum(float(np.sum(x * x)) for x in v.values()))
        v = {k: x / scale for k, x in v.items()}
        analytic = sum(float(np.sum(grads[k].data * v[k])) for k in params)
        fp = _scalar(f, {k: Tensor(p.data + h * v[k]) for k, p in params.items()})
        fm = _scalar(f, {k: Tensor(p.data - h * v[k]) for k, p in params.items()})
        checks.append(DirectionCheck(analytic, (fp - fm) / (2 * h)))
    return checks
