import logging
from typing import Callable
import numpy as np
from l0_dynamics.my_types import BlockCheck, GradientCheckReport

logger = logging.getLogger(__name__)


def gradient_check(
    fn: Callable[[], float],
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    h: float = 1e-5,
    tol: float = 1e-4,
    scale_floor: float = 1e-6,
) -> GradientCheckReport:
    """
    Compare analytic gradients with central differences.

    `fn` must read the arrays in `params` (they are perturbed in place and
    restored) and be deterministic, so any gate noise has to be frozen.
    Relative errors use max(|analytic|, |numeric|, scale_floor) as the
    denominator. Non-finite function values fail the block and are counted.
    """
    report = GradientCheckReport(tolerance=tol)
    for name, param in params.items():
        analytic = np.asarray(grads[name], dtype=np.float64)
        numeric = np.empty_like(param, dtype=np.float64)
        non_finite = 0

        if not param.flags.c_contiguous:
            raise ValueError(f"Parameter block `{name}` must be C-contiguous")
        flat = param.reshape(-1)
        numeric_flat = numeric.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus = fn()
            flat[i] = original - h
            f_minus = fn()
            flat[i] = original
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                non_finite += 1
                numeric_flat[i] = np.nan
                continue
            numeric_flat[i] = (f_plus - f_minus) / (2.0 * h)

        finite = np.isfinite(numeric)
        abs_err = np.abs(analytic - numeric)[finite]
        denom = np.maximum(
            np.maximum(np.abs(analytic), np.abs(numeric))[finite], scale_floor
        )
        rel_err = abs_err / denom
        max_rel = float(rel_err.max()) if rel_err.size else 0.0
        block = BlockCheck(
            max_abs_error=float(abs_err.max()) if abs_err.size else 0.0,
            max_rel_error=max_rel,
            non_finite=non_finite,
            passed=non_finite == 0 and max_rel < tol,
        )
        if not block.passed:
            logger.warning(f"Gradient check failed for `{name}`: {block}")
        report.blocks[name] = block
    return report
