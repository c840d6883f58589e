"""Learning-rate schedules: decreasing polynomial and triangular cyclical."""

import math


def poly_lr(base_lr, iteration, max_iters, power=0.9):
    """base_lr * (1 - iteration/max_iters) ** power."""
    if max_iters <= 0:
        raise ValueError(f"max_iters must be positive, got {max_iters}")
    if not 0 <= iteration <= max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {max_iters}]")
    if power <= 0:
        raise ValueError(f"power must be positive, got {power}")
    return base_lr * (1.0 - iteration / max_iters) ** power


def cyclical_lr(lower, upper, step_size, iteration, decreasing=False):
    """Triangular wave between the bounds with half-cycle step_size.

    Starts at the lower bound, peaks at the upper bound after step_size
    iterations. In decreasing mode the peak amplitude halves every full
    cycle (the triangular2 policy).
    """
    if step_size <= 0:
        raise ValueError(f"step_size must be positive, got {step_size}")
    cycle = math.floor(1 + iteration / (2 * step_size))
    x = abs(iteration / step_size - 2 * cycle + 1)
    scale = 0.5 ** (cycle - 1) if decreasing else 1.0
    return lower + (upper - lower) * max(0.0, 1.0 - x) * scale


def constant_lr(base_lr, iteration=0):
    return base_lr
