import logging
from typing import Callable, Optional, Sequence

import numpy as np

import transpillars


logger = logging.getLogger(__name__)


###############################################################################
# Finite-difference gradient oracle
###############################################################################


def finite_diff_check(
    f: Callable[['transpillars.tensor.Tensor'], 'transpillars.tensor.Tensor'],
    x: 'transpillars.tensor.Tensor',
    eps: float = 1e-6,
    indices: Optional[Sequence[int]] = None,
    floor: float = 1e-8) -> float:
    """Compare backward() against central differences

    Arguments
        f
            Deterministic scalar function of x
        x
            The tensor to differentiate with respect to (64-bit)
        eps
            Central-difference step
        indices
            Optional flat indices of x to check; defaults to all entries
        floor
            Smallest denominator of the relative error

    Returns
        The maximum relative error over the checked entries
    """
    if x.data.dtype != np.float64:
        logger.warning(
            'finite_diff_check on %s data; use 64-bit precision',
            x.data.dtype)

    # Perturbations must write through to the tensor
    x.data = np.ascontiguousarray(x.data)

    # Analytic gradient
    requires_grad = x.requires_grad
    x.requires_grad = True
    x.grad = None
    transpillars.tensor.clear_tape()
    f(x).backward()

    # f may not depend on x at all
    if x.grad is None:
        analytic = np.zeros(x.data.size)
    else:
        analytic = x.grad.reshape(-1).copy()
    transpillars.tensor.clear_tape()

    # Numerical gradient
    flat = x.data.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    worst = 0.
    with transpillars.tensor.no_grad():
        for i in indices:
            original = flat[i]
            flat[i] = original + eps
            plus = f(x).item()
            flat[i] = original - eps
            minus = f(x).item()
            flat[i] = original
            numeric = (plus - minus) / (2 * eps)
            error = abs(analytic[i] - numeric) / max(
                abs(analytic[i]), abs(numeric), floor)
            worst = max(worst, error)

    x.requires_grad = requires_grad
    logger.debug('finite difference check: max relative error %.3e', worst)
    return worst
