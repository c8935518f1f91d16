"""Central-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor

FD_STEP = 1e-5
# one-sided slopes that disagree by more than this (relative) mark a kink
KINK_TOL = 1e-3


def _prepare(f: Callable[[], Tensor], params: Sequence[Tensor]):
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        p.requires_grad = True
        p.grad = None
    out = f()
    out.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    for p in params:
        p.grad = None
    return out.item(), analytic


def _is_kink(up: float, base: float, down: float, step: float) -> bool:
    right, left = (up - base) / step, (base - down) / step
    return abs(right - left) > KINK_TOL * max(1.0, abs(right), abs(left))


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      step: float = FD_STEP, samples: int | None = None,
                      rng: np.random.Generator | None = None, skipped: list | None = None) -> float:
    """Max over entries of |analytic - numeric| / max(1, |numeric|).

    ``f`` is re-evaluated from scratch for every perturbation and must return a
    scalar Tensor. With ``samples`` set, only that many randomly chosen entries
    per parameter are perturbed (the analytic gradient is still computed in full).
    Entries where the left and right slopes disagree sit on a kink (e.g. a
    leaky-ReLU input within ``step`` of zero) and have no derivative; they are
    skipped and, if ``skipped`` is given, recorded there as (param, index).
    """
    base, analytic = _prepare(f, params)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for k, (p, ga) in enumerate(zip(params, analytic)):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and samples < flat.size:
            idx = rng.choice(flat.size, size=samples, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            if _is_kink(up, base, down, step):
                if skipped is not None:
                    skipped.append((k, int(i)))
                continue
            numeric = (up - down) / (2.0 * step)
            err = abs(ga.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


def directional_check(f: Callable[[], Tensor], params: Sequence[Tensor],
                      rng: np.random.Generator, step: float = FD_STEP, tries: int = 5) -> float:
    """Compares grad . u against a central difference along one random unit
    direction ``u`` spanning every parameter at once; same error measure.
    A direction that crosses a kink is redrawn."""
    base, analytic = _prepare(f, params)
    data = [p.data.copy() for p in params]
    for _ in range(tries):
        dirs = [rng.standard_normal(p.shape) for p in params]
        scale = np.sqrt(sum(float((u * u).sum()) for u in dirs))
        dirs = [u / scale for u in dirs]
        values = []
        for sign in (1.0, -1.0):
            for p, b, u in zip(params, data, dirs):
                p.data = b + sign * step * u
            values.append(f().item())
        for p, b in zip(params, data):
            p.data = b
        if not _is_kink(values[0], base, values[1], step):
            break
    else:
        raise RuntimeError("every sampled direction crossed a kink")
    g = sum(float((ga * u).sum()) for ga, u in zip(analytic, dirs))
    numeric = (values[0] - values[1]) / (2.0 * step)
    return abs(g - numeric) / max(1.0, abs(numeric))
