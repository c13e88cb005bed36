"""Finite-difference verification of reverse-mode gradients.

`finite_diff_check` is the package's independent gradient oracle: it
re-evaluates a scalar function under central per-coordinate perturbations
and compares against the gradients `backward` produces.  Tests and the
`gradcheck` CLI command are built on it.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, backward


def finite_diff_check(f, inputs: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be scalar-valued and differentiable at `inputs`.  Gradients
    are checked for every input with `requires_grad`.  The relative error
    of one coordinate uses the denominator max(|analytic|, |numeric|, 1e-8).
    Inputs are never mutated; perturbed evaluations build fresh tensors.
    """
    loss = f(*inputs)
    if loss.shape != ():
        raise ValueError(f"finite_diff_check: f must return a scalar, got {loss.shape}")
    grads = backward(loss)

    def eval_with(k: int, flat: np.ndarray) -> float:
        args = list(inputs)
        args[k] = Tensor(flat.reshape(inputs[k].shape))
        return float(f(*args).data)

    worst = 0.0
    for k, x in enumerate(inputs):
        if not x.requires_grad:
            continue
        analytic = grads[x.graph_id].data.reshape(-1)
        base = x.data.reshape(-1).copy()
        for i in range(base.size):
            flat = base.copy()
            flat[i] = base[i] + eps
            f_plus = eval_with(k, flat)
            flat[i] = base[i] - eps
            f_minus = eval_with(k, flat)
            numeric = (f_plus - f_minus) / (2.0 * eps)
            denom = max(abs(analytic[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic[i] - numeric) / denom)
    return worst
