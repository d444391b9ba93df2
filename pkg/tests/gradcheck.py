"""Central finite-difference gradient oracle shared by the test suite.

Deliberately independent of the tape: it re-runs the forward function on
perturbed copies of the raw arrays and never inspects backward rules.
"""

import numpy as np

from graphads import numkit as nk


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def check_gradients(f, arrays, h=1e-4, tol=1e-4, max_coords=None, rng=None):
    """Compare tape gradients of scalar ``f`` against central differences.

    ``f`` maps a list of Tensors to a scalar Tensor and must be pure.
    When ``max_coords`` is set, a random subset of coordinates per input is
    probed instead of the full Jacobian.  Returns the worst relative error.
    """
    tensors = [nk.Tensor(a, requires_grad=True) for a in arrays]
    loss = f(tensors)
    nk.backward(loss)

    def eval_perturbed(which, coord, delta):
        pert = [np.array(a, copy=True) for a in arrays]
        pert[which].reshape(-1)[coord] += delta
        with nk.no_grad():
            return f([nk.Tensor(p) for p in pert]).item()

    worst = 0.0
    for ti, t in enumerate(tensors):
        assert t.grad is not None, f"input {ti} received no gradient"
        flat = t.grad.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for c in coords:
            fd = (eval_perturbed(ti, c, h) - eval_perturbed(ti, c, -h)) / (2.0 * h)
            err = relative_error(float(flat[c]), fd)
            worst = max(worst, err)
            assert err < tol, (
                f"input {ti} coord {c}: analytic {flat[c]:.8g} vs fd {fd:.8g} "
                f"(rel err {err:.3g})")
    return worst
