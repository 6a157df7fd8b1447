"""Gradient verification against central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ParameterSet, ValueGraph


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    worst_index: tuple
    analytic: float
    numeric: float
    entries_checked: int


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    passed: bool
    max_rel_err: float
    per_param: list[ParamCheck] = field(default_factory=list)

    def summary(self) -> str:
        lines = [
            f"grad check: {'PASS' if self.passed else 'FAIL'} "
            f"(max rel err {self.max_rel_err:.3e}, tolerance {self.tolerance:.1e})"
        ]
        for pc in self.per_param:
            lines.append(
                f"  {pc.name}: max rel err {pc.max_rel_err:.3e} at {pc.worst_index} "
                f"(analytic {pc.analytic:+.6e}, numeric {pc.numeric:+.6e}, "
                f"{pc.entries_checked} entries)"
            )
        return "\n".join(lines)


def grad_check(
    graph: ValueGraph,
    *,
    step: float = 1e-5,
    tolerance: float = 1e-4,
    rel_floor: float = 1e-4,
    max_entries_per_param: int | None = None,
    rng: np.random.Generator | None = None,
    inputs: dict | None = None,
) -> GradCheckReport:
    """Compare backward gradients to central finite differences.

    Relative error per entry is |a - n| / max(|a|, |n|, rel_floor). The
    floor guards against dividing finite-difference roundoff (~1e-10 for
    O(1) losses at step 1e-5) by a near-zero gradient; errors below the
    floor scale are irrelevant to training. Set `max_entries_per_param` to
    spot-check large tensors on a random subset of entries.

    The graph's builder must be deterministic in (parameters, inputs):
    pre-draw any randomness into `inputs`.
    """
    if len(graph.params) == 0:
        raise ValueError("grad check requires at least one trainable parameter")
    inputs = inputs or {}

    out = graph.forward(**inputs)
    if out.data.size != 1:
        raise ValueError("grad check expects a scalar output")
    analytic = {k: v.copy() for k, v in graph.backward().items()}

    def eval_loss() -> float:
        return float(graph.forward(**inputs).data)

    report = GradCheckReport(tolerance=tolerance, step=step, passed=True, max_rel_err=0.0)
    for name, p in graph.params:
        flat = p.data.reshape(-1)
        n_entries = flat.size
        if max_entries_per_param is not None and n_entries > max_entries_per_param:
            gen = rng if rng is not None else np.random.default_rng(0)
            idxs = gen.choice(n_entries, size=max_entries_per_param, replace=False)
        else:
            idxs = np.arange(n_entries)
        a_flat = analytic[name].reshape(-1)
        worst = ParamCheck(name, 0.0, (), 0.0, 0.0, len(idxs))
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + step
            f_plus = eval_loss()
            flat[i] = orig - step
            f_minus = eval_loss()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(a_flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), rel_floor)
            if rel >= worst.max_rel_err:
                worst.max_rel_err = rel
                worst.worst_index = tuple(int(v) for v in np.unravel_index(i, p.data.shape))
                worst.analytic = a
                worst.numeric = float(numeric)
        report.per_param.append(worst)
        report.max_rel_err = max(report.max_rel_err, worst.max_rel_err)
    # restore a clean forward state at the original parameters
    graph.forward(**inputs)
    report.passed = report.max_rel_err < tolerance
    return report
