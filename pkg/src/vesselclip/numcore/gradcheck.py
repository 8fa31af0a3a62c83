"""Central-difference verification of recorded gradients."""
from dataclasses import dataclass, field

import numpy as np

from .tensor import trace_kinks


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    tol: float
    n_checked: int
    n_skipped: int
    per_input: list = field(default_factory=list)

    def __str__(self):
        verdict = "pass" if self.passed else "FAIL"
        return (f"grad_check {verdict}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g}), "
                f"{self.n_checked} coords checked, {self.n_skipped} skipped near kinks")


def _kinks_disturbed(base, trial, kink_tol):
    if len(base) != len(trial):
        return True
    for b, t in zip(base, trial):
        if b.shape != t.shape:
            return True
        moved = b != t
        if not moved.any():
            continue
        if np.any(np.abs(b[moved]) < kink_tol) or np.any(np.sign(b[moved]) != np.sign(t[moved])):
            return True
    return False


def grad_check(f, inputs, tol=1e-4, h=1e-5, kink_tol=1e-4, floor=1e-6, max_coords=None, rng=None):
    """Compare autodiff gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, floor)``.  A
    coordinate is skipped when its perturbation moves any ReLU-type input that
    sits within ``kink_tol`` of its kink or flips its side.  ``max_coords``
    subsamples coordinates per input (seeded by ``rng``) for large tensors.
    """
    for x in inputs:
        x.grad = None
    with trace_kinks() as base_kinks:
        out = f(*inputs)
    out.backward()
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]

    worst = 0.0
    checked = skipped = 0
    per_input = []
    for x, a in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(gen.choice(flat.size, size=max_coords, replace=False))
        input_worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            with trace_kinks() as kp:
                fp = f(*inputs).item()
            flat[i] = orig - h
            with trace_kinks() as km:
                fm = f(*inputs).item()
            flat[i] = orig
            if _kinks_disturbed(base_kinks, kp, kink_tol) or _kinks_disturbed(base_kinks, km, kink_tol):
                skipped += 1
                continue
            num = (fp - fm) / (2 * h)
            ana = a.reshape(-1)[i]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            input_worst = max(input_worst, err)
            checked += 1
        per_input.append(input_worst)
        worst = max(worst, input_worst)
    for x in inputs:
        x.grad = None
    return GradCheckReport(passed=worst < tol, max_rel_error=worst, tol=tol,
                           n_checked=checked, n_skipped=skipped, per_input=per_input)
