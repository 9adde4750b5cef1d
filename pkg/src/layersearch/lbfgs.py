"""Limited-memory BFGS minimizer over flat parameter vectors.

Search directions come from the standard two-loop recursion over a ring
buffer of curvature pairs; step lengths satisfy the strong Wolfe
conditions via a bracketing-then-zoom line search. Used as the sole
trainer for the network models.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, IO

import numpy as np

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]

# pairs with y.s at or below this are discarded to keep the implicit
# inverse Hessian positive definite
CURVATURE_EPS = 1e-10


class TerminationReason(Enum):
    GRAD_TOL = "grad_tol"
    LOSS_TOL = "loss_tol"
    MAX_ITER = "max_iter"
    LINE_SEARCH_FAILED = "line_search_failed"


class NonFiniteAtStart(Exception):
    pass


class LineSearchFailed(Exception):
    pass


@dataclass(frozen=True)
class LbfgsConfig:
    memory: int = 10
    max_iter: int = 500
    grad_tol: float = 1e-5
    loss_tol: float = 1e-9
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    max_line_search_steps: int = 20

    def __post_init__(self):
        if self.memory < 1 or self.max_iter < 1 or self.max_line_search_steps < 1:
            raise ValueError("memory, max_iter, max_line_search_steps must be positive")
        if self.grad_tol <= 0:
            raise ValueError("grad_tol must be positive")
        if self.loss_tol < 0:
            raise ValueError("loss_tol must be non-negative (0 disables the check)")
        if not 0.0 < self.wolfe_c1 < self.wolfe_c2 < 1.0:
            raise ValueError("need 0 < wolfe_c1 < wolfe_c2 < 1")


@dataclass(frozen=True)
class MinimizeResult:
    x: np.ndarray
    loss: float
    iterations_used: int
    reason: TerminationReason


class LbfgsMemory:
    """Ring buffer of (s, y, 1/y.s) curvature pairs."""

    def __init__(self, memory: int):
        self._pairs: deque[tuple[np.ndarray, np.ndarray, float]] = deque(maxlen=memory)

    def __len__(self) -> int:
        return len(self._pairs)

    def push(self, s: np.ndarray, y: np.ndarray) -> bool:
        """Store a pair if it passes the curvature safeguard; report whether it did."""
        ys = float(y @ s)
        if ys <= CURVATURE_EPS:
            return False
        self._pairs.append((s, y, 1.0 / ys))
        return True

    def clear(self) -> None:
        self._pairs.clear()

    @property
    def gamma(self) -> float:
        """Initial inverse-Hessian scaling y.s / y.y from the newest pair."""
        if not self._pairs:
            return 1.0
        s, y, _ = self._pairs[-1]
        return float(y @ s) / float(y @ y)

    @property
    def pairs(self) -> tuple[tuple[np.ndarray, np.ndarray, float], ...]:
        return tuple(self._pairs)


def two_loop_direction(grad: np.ndarray, memory: LbfgsMemory) -> np.ndarray:
    """Approximate -H.g via the two-loop recursion; -g when the memory is empty."""
    q = -grad.copy()
    pairs = memory.pairs
    if not pairs:
        return q
    alphas = np.empty(len(pairs))
    for idx in range(len(pairs) - 1, -1, -1):
        s, y, rho = pairs[idx]
        alphas[idx] = rho * float(s @ q)
        q -= alphas[idx] * y
    q *= memory.gamma
    for idx in range(len(pairs)):
        s, y, rho = pairs[idx]
        beta = rho * float(y @ q)
        q += (alphas[idx] - beta) * s
    return q


@dataclass(frozen=True)
class LineSearchResult:
    step: float
    loss: float
    grad: np.ndarray
    n_evals: int


def _interpolate(lo: float, f_lo: float, d_lo: float, hi: float, f_hi: float) -> float:
    """Quadratic minimizer from (f, f') at lo and f at hi, safeguarded to the interior."""
    span = hi - lo
    denom = 2.0 * (f_hi - f_lo - d_lo * span)
    if denom != 0.0 and np.isfinite(denom):
        cand = lo - d_lo * span * span / denom
    else:
        cand = lo + 0.5 * span
    left, right = (lo, hi) if lo < hi else (hi, lo)
    margin = 0.1 * (right - left)
    if not np.isfinite(cand) or cand < left + margin or cand > right - margin:
        cand = 0.5 * (left + right)
    return cand


def wolfe_line_search(
    objective: Objective,
    x: np.ndarray,
    direction: np.ndarray,
    loss0: float,
    grad0: np.ndarray,
    config: LbfgsConfig,
    initial_step: float = 1.0,
) -> LineSearchResult:
    """Find a step along ``direction`` satisfying the strong Wolfe conditions.

    Bracketing phase grows the trial step until the minimum is bracketed,
    then the zoom phase shrinks the bracket with safeguarded interpolation.
    Non-finite trial values are treated as overshoots. Raises
    LineSearchFailed when the evaluation budget runs out.
    """
    dphi0 = float(grad0 @ direction)
    if dphi0 >= 0.0:
        raise ValueError(f"not a descent direction (g.d = {dphi0:g})")
    c1, c2 = config.wolfe_c1, config.wolfe_c2
    budget = config.max_line_search_steps
    evals = 0
    # once loss differences shrink to rounding noise the sufficient-decrease
    # test can no longer be verified from values alone; within this slack a
    # step is accepted on the curvature condition (approximate Wolfe)
    f_eps = 1e-12 * max(1.0, abs(loss0))

    def phi(alpha: float) -> tuple[float, np.ndarray, float]:
        nonlocal evals
        evals += 1
        f, g = objective(x + alpha * direction)
        return float(f), g, float(g @ direction)

    def acceptable(alpha: float, f: float, d: float) -> bool:
        if abs(d) > -c2 * dphi0:
            return False
        return f <= loss0 + c1 * alpha * dphi0 or abs(f - loss0) <= f_eps

    def zoom(
        lo: float, f_lo: float, d_lo: float, hi: float, f_hi: float
    ) -> LineSearchResult:
        while evals < budget:
            alpha = _interpolate(lo, f_lo, d_lo, hi, f_hi)
            f, g, d = phi(alpha)
            if not np.isfinite(f):
                hi, f_hi = alpha, np.inf
                continue
            if acceptable(alpha, f, d):
                return LineSearchResult(alpha, f, g, evals)
            if f > loss0 + c1 * alpha * dphi0 or f >= f_lo:
                hi, f_hi = alpha, f
            else:
                if d * (hi - lo) >= 0.0:
                    hi, f_hi = lo, f_lo
                lo, f_lo, d_lo = alpha, f, d
        raise LineSearchFailed(f"no strong Wolfe step within {budget} evaluations")

    alpha_prev, f_prev, d_prev = 0.0, loss0, dphi0
    alpha = initial_step
    first = True
    while evals < budget:
        f, g, d = phi(alpha)
        if not np.isfinite(f):
            return zoom(alpha_prev, f_prev, d_prev, alpha, np.inf)
        if acceptable(alpha, f, d):
            return LineSearchResult(alpha, f, g, evals)
        if f > loss0 + c1 * alpha * dphi0 or (f >= f_prev and not first):
            return zoom(alpha_prev, f_prev, d_prev, alpha, f)
        if d >= 0.0:
            return zoom(alpha, f, d, alpha_prev, f_prev)
        alpha_prev, f_prev, d_prev = alpha, f, d
        alpha = min(2.0 * alpha, 1e10)
        first = False
    raise LineSearchFailed(f"no strong Wolfe step within {budget} evaluations")


def minimize(
    objective: Objective,
    x0: np.ndarray,
    config: LbfgsConfig | None = None,
    trace: str | Path | IO[str] | None = None,
) -> MinimizeResult:
    """Minimize a smooth objective returning (loss, gradient) at a flat vector.

    Stops on the infinity-norm gradient tolerance, on a relative loss
    decrease below loss_tol, at max_iter, or when the line search fails
    even after a steepest-descent restart. ``trace`` optionally writes a
    per-iteration CSV (iteration, loss, grad_norm, step).
    """
    config = config or LbfgsConfig()
    x = np.asarray(x0, dtype=np.float64).copy()
    f, g = objective(x)
    f = float(f)
    if not (np.isfinite(f) and np.all(np.isfinite(g))):
        raise NonFiniteAtStart("objective is not finite at the starting point")

    trace_file = None
    trace_writer = None
    if trace is not None:
        if isinstance(trace, (str, Path)):
            trace_file = open(trace, "w", newline="")
            out = trace_file
        else:
            out = trace
        trace_writer = csv.writer(out)
        trace_writer.writerow(["iteration", "loss", "grad_norm", "step"])

    memory = LbfgsMemory(config.memory)
    reason = TerminationReason.MAX_ITER
    iterations = 0
    grad_norm = float(np.max(np.abs(g)))
    # first trial step mimics a cautious steepest-descent scale; afterwards
    # the two-loop scaling makes the unit step the natural choice
    next_step = min(1.0, 1.0 / max(float(np.sum(np.abs(g))), 1e-12))
    try:
        if grad_norm <= config.grad_tol:
            return MinimizeResult(x, f, 0, TerminationReason.GRAD_TOL)
        for iteration in range(1, config.max_iter + 1):
            d = two_loop_direction(g, memory)
            if float(d @ g) >= 0.0 or not np.all(np.isfinite(d)):
                memory.clear()
                d = -g
            try:
                ls = wolfe_line_search(objective, x, d, f, g, config, next_step)
            except LineSearchFailed:
                if len(memory) == 0:
                    reason = TerminationReason.LINE_SEARCH_FAILED
                    break
                memory.clear()
                d = -g
                try:
                    restart_step = min(1.0, 1.0 / max(float(np.sum(np.abs(g))), 1e-12))
                    ls = wolfe_line_search(objective, x, d, f, g, config, restart_step)
                except LineSearchFailed:
                    reason = TerminationReason.LINE_SEARCH_FAILED
                    break
            x_new = x + ls.step * d
            memory.push(x_new - x, ls.grad - g)
            rel_decrease = (f - ls.loss) / max(abs(f), abs(ls.loss), 1.0)
            x, f, g = x_new, ls.loss, ls.grad
            iterations = iteration
            grad_norm = float(np.max(np.abs(g)))
            if trace_writer is not None:
                trace_writer.writerow([iteration, repr(f), repr(grad_norm), repr(ls.step)])
            if grad_norm <= config.grad_tol:
                reason = TerminationReason.GRAD_TOL
                break
            if config.loss_tol > 0.0 and rel_decrease < config.loss_tol:
                reason = TerminationReason.LOSS_TOL
                break
            next_step = 1.0
    finally:
        if trace_file is not None:
            trace_file.close()
    return MinimizeResult(x, f, iterations, reason)
