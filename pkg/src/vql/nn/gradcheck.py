"""Central finite-difference gradient checking.

The checked loss must be evaluated in float64; with step 1e-5 the finite
difference then resolves relative errors well below the 1e-4 acceptance
threshold. An element passes when

    |analytic - fd| <= atol  or  |analytic - fd| / max(|analytic|, |fd|) < rtol
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    n_checked: int
    passed: bool

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (f"{self.name}: rel_err={self.max_rel_err:.3e} "
                f"({self.n_checked} elements) {status}")


def scalar_readout(rng, shape, dtype=np.float64) -> np.ndarray:
    """Fixed random projection turning a block output into a scalar loss;
    its gradient w.r.t. the output is the projection itself."""
    return rng.standard_normal(shape).astype(dtype)


def fd_gradient(loss_fn, value: np.ndarray, indices, step: float) -> np.ndarray:
    """Central finite differences of ``loss_fn()`` w.r.t. value[indices].

    ``value`` is perturbed in place and restored.
    """
    out = np.empty(len(indices))
    for n, idx in enumerate(indices):
        orig = value[idx]
        value[idx] = orig + step
        up = loss_fn()
        value[idx] = orig - step
        down = loss_fn()
        value[idx] = orig
        out[n] = (up - down) / (2.0 * step)
    return out


def check_gradients(loss_fn, named_values, step: float = 1e-5,
                    rtol: float = 1e-4, atol: float = 1e-8,
                    max_elements: int | None = None, rng=None):
    """Compare analytic gradients against central finite differences.

    Parameters
    ----------
    loss_fn : () -> float
        Re-evaluates the scalar loss from current array contents.
    named_values : iterable of (name, value_array, analytic_grad_array)
    max_elements : optional cap of checked elements per array (random subset,
        requires ``rng``); None checks every element.

    Returns a list of GradCheckResult, one per array.
    """
    results = []
    for name, value, analytic in named_values:
        flat_n = value.size
        all_idx = [np.unravel_index(i, value.shape) for i in range(flat_n)]
        if max_elements is not None and flat_n > max_elements:
            pick = rng.choice(flat_n, size=max_elements, replace=False)
            idx = [all_idx[i] for i in sorted(pick)]
        else:
            idx = all_idx
        fd = fd_gradient(loss_fn, value, idx, step)
        ana = np.array([analytic[i] for i in idx])
        err = np.abs(ana - fd)
        denom = np.maximum(np.abs(ana), np.abs(fd))
        rel = np.where(err <= atol, 0.0, err / np.maximum(denom, 1e-300))
        results.append(GradCheckResult(name=name, max_rel_err=float(rel.max(initial=0.0)),
                                       n_checked=len(idx), passed=bool(np.all(rel < rtol))))
    return results
