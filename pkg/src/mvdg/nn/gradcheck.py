"""Central-finite-difference verification of analytic gradients.

Every probed parameter scalar is nudged by +/- step and the loss
recomputed, giving (loss_plus - loss_minus) / (2 * step) to compare
against the backward pass. The comparison is a relative error with an
absolute floor:

    err = |fd - analytic| / max(|fd|, |analytic|, floor)

so near-zero gradient pairs are judged on the finite-difference noise
scale instead of blowing up.

The floor is scale-aware. A central difference cannot resolve the
derivative below roughly ulp(loss) / (2 * step): the two loss
evaluations each carry rounding on the order of a few dozen ulps (the
forward pass is a long chain of reductions), and that noise is divided
by the 2 * step baseline. We budget FD_NOISE_ULPS of loss rounding,
convert it to a gradient-scale noise estimate, and set the floor so
that an error entirely explained by that noise sits exactly at the
tolerance. Gradients well above the floor are still compared at full
relative precision; a structurally wrong backward (dropped term, wrong
sign, bad scaling) produces relative errors orders of magnitude above
any tolerance in use, floored or not.

One failure mode is not noise and not a bug: when a probed parameter
sits within step of a relu or max switching point, the central
difference straddles the kink and measures the average of two different
slopes, while the analytic gradient reports the slope of the segment
the parameter is actually on. Such discrepancies can be arbitrarily
large, they depend only on where the fixture happens to land, and they
vanish under a different input or init seed. If a deep model check
fails at an isolated parameter while every layer passes in isolation,
suspect a kink before suspecting the backward pass.

Requires float64 parameters; cast the module with to_dtype(np.float64)
first. Running buffers (normalization statistics) are snapshotted once
and restored before every forward, so probe evaluations all see
identical state even in train mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Module

REL_ERROR_FLOOR = 1e-6
FD_NOISE_ULPS = 64.0


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance

    def summary(self) -> str:
        status = "pass" if self.passed else "FAIL"
        return (
            f"{status}: max relative error {self.max_rel_error:.3e} over "
            f"{self.checked} parameters (tolerance {self.tolerance:.1e}, "
            f"worst {self.worst_param})"
        )


def check_gradients(
    module: Module,
    loss_fn,
    rng: np.random.Generator,
    samples: int = 200,
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare backward gradients of loss_fn against finite differences.

    loss_fn takes no arguments and returns a scalar Tensor; it closes
    over the module and a fixed input. samples parameter scalars are
    probed, drawn without replacement across all parameters (all of them
    if the module has fewer).
    """
    named = list(module.named_parameters())
    if not named:
        raise ValueError("module has no parameters to check")
    for name, p in named:
        if p.data.dtype != np.float64:
            raise ValueError(
                f"gradient checking requires float64 parameters; {name} is {p.data.dtype}"
            )

    buffers = [(buf, buf.copy()) for _, buf in module.named_buffers()]

    def restore_buffers():
        for buf, snapshot in buffers:
            buf[...] = snapshot

    def evaluate() -> float:
        restore_buffers()
        return float(loss_fn().data)

    module.zero_grad()
    restore_buffers()
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name, p in named:
        if p.grad is None:
            raise ValueError(f"parameter {name} received no gradient")
        analytic[name] = p.grad.copy()

    sizes = np.array([p.size for _, p in named])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    count = min(samples, total)
    chosen = np.sort(rng.choice(total, size=count, replace=False))

    eps = float(np.finfo(np.float64).eps)
    fd_noise = FD_NOISE_ULPS * eps * max(1.0, abs(float(loss.data))) / (2.0 * step)
    floor = max(REL_ERROR_FLOOR, fd_noise / tolerance)

    max_err = 0.0
    worst = named[0][0]
    for flat in chosen:
        pi = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, p = named[pi]
        local = int(flat - offsets[pi])
        view = p.data.reshape(-1)
        original = view[local]

        view[local] = original + step
        plus = evaluate()
        view[local] = original - step
        minus = evaluate()
        view[local] = original

        fd = (plus - minus) / (2.0 * step)
        an = float(analytic[name].reshape(-1)[local])
        err = abs(fd - an) / max(abs(fd), abs(an), floor)
        if err > max_err:
            max_err = err
            worst = f"{name}[{local}]"

    restore_buffers()
    module.zero_grad()
    return GradCheckReport(
        max_rel_error=max_err, worst_param=worst, checked=count, tolerance=tolerance
    )
