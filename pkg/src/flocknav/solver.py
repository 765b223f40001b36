"""Budget-aware constrained solver.

The inner solver is PANOC: projected-gradient (forward-backward) steps on a
box, accelerated by L-BFGS directions that are accepted only when they
decrease the forward-backward envelope (FBE).  The outer loop handles general
inequality constraints ``g(x) <= 0`` in two ways:

* augmented Lagrangian (ALM): ``(c/2) * ||max(0, g1(x) + y/c)||^2`` with
  multipliers ``y`` updated after every inner solve;
* quadratic penalty (PM): ``(c/2) * ||max(0, g2(x))||^2``.

Both share one penalty weight ``c``, which grows by ``rho`` whenever the
constraint violation fails to shrink enough between outer iterations.

Constraint callbacks return ``(values, vjp)`` where ``vjp(w)`` computes
``J(x).T @ w`` lazily, so value-only evaluations skip the Jacobian.
"""
from __future__ import annotations

import enum
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

ConstraintFn = Callable[[np.ndarray], "tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]"]

_GAMMA_L_COEFF = 0.95
_LIPSCHITZ_FUDGE = 1e-6
_MIN_LIPSCHITZ = 1e-10
_MAX_LIPSCHITZ = 1e12
_MAX_LINESEARCH = 10
_MAX_BACKTRACKS = 30
_MULTIPLIER_CAP = 1e6


class NonFiniteCost(FloatingPointError):
    """Cost or gradient evaluated to NaN/inf."""


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    BUDGET_EXHAUSTED = "BudgetExhausted"
    MAX_ITERS = "MaxIters"


@dataclass(frozen=True)
class SolverConfig:
    epsilon: float = 1e-5
    delta: float = 1e-4
    lambda0: float = 1e-2
    rho: float = 5.0
    max_inner_iters: int = 500
    max_outer_iters: int = 10
    lbfgs_memory: int = 10
    time_budget: Optional[float] = 95.0  # milliseconds; None disables
    sufficient_decrease: float = 0.25
    # consecutive backtrack-free iterations before the step is doubled; None disables
    grow_after: Optional[int] = None

    def __post_init__(self):
        if min(self.epsilon, self.delta, self.lambda0) <= 0:
            raise ValueError("epsilon, delta and lambda0 must be positive")
        if self.rho <= 1:
            raise ValueError("rho must exceed 1")
        if self.lbfgs_memory < 1 or self.max_inner_iters < 0 or self.max_outer_iters < 1:
            raise ValueError("iteration limits and memory must be positive")
        if self.time_budget is not None and self.time_budget < 0:
            raise ValueError("time_budget must be non-negative")


@dataclass
class BoxProblem:
    """Smooth cost over ``lower <= x <= upper``."""

    cost: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    lower: np.ndarray
    upper: np.ndarray
    cost_grad: Optional[Callable[[np.ndarray], tuple]] = None

    def project(self, x: np.ndarray) -> np.ndarray:
        return np.minimum(np.maximum(x, self.lower), self.upper)

    def value_and_grad(self, x: np.ndarray):
        if self.cost_grad is not None:
            f, g = self.cost_grad(x)
        else:
            f, g = self.cost(x), self.grad(x)
        f = float(f)
        if not np.isfinite(f) or not np.all(np.isfinite(g)):
            raise NonFiniteCost(f"non-finite cost/gradient at x={x}")
        return f, g

    def value(self, x: np.ndarray) -> float:
        f = float(self.cost(x))
        if not np.isfinite(f):
            raise NonFiniteCost(f"non-finite cost at x={x}")
        return f


@dataclass
class ConstrainedSpec(BoxProblem):
    alm: Optional[ConstraintFn] = None
    pm: Optional[ConstraintFn] = None
    # optional fast path: (y, c) -> fn(z, need_grad) -> (value, grad) of the augmented cost
    augmented: Optional[Callable] = None
    # optional compiled inner loop: (y, c, x, config, deadline) -> InnerResult
    inner: Optional[Callable] = None
    # optional fast candidate check: z -> (cost, alm values or None, violation)
    assess: Optional[Callable] = None


@dataclass
class InnerResult:
    x: np.ndarray
    residual: float
    iters: int
    status: Status
    cost: float
    # (step, envelope) at the start of every iteration
    fbe_trace: list = field(default_factory=list)


@dataclass
class OuterResult:
    x: np.ndarray
    status: Status
    infeasibility: float
    solve_time: float  # milliseconds
    cost: float
    residual: float
    outer_iters: int
    inner_iters: int
    penalties: list = field(default_factory=list)
    multipliers: Optional[np.ndarray] = None


class LBFGS:
    """Two-loop recursion over ``(s, y)`` pairs with a cautious-update guard."""

    def __init__(self, memory: int, sy_eps: float = 1e-10, cbfgs_eps: float = 1e-8):
        self.s: deque = deque(maxlen=memory)
        self.y: deque = deque(maxlen=memory)
        self.sy_eps = sy_eps
        self.cbfgs_eps = cbfgs_eps

    def reset(self):
        self.s.clear()
        self.y.clear()

    def __len__(self):
        return len(self.s)

    def update(self, s: np.ndarray, y: np.ndarray, r_norm: float) -> bool:
        sy = float(s @ y)
        ss = float(s @ s)
        # scale-free curvature test; an absolute floor on s.y starves the memory near convergence
        if ss <= 0 or sy <= self.sy_eps * ss or sy / ss <= self.cbfgs_eps * r_norm:
            return False
        self.s.append(s)
        self.y.append(y)
        return True

    def apply(self, q: np.ndarray) -> np.ndarray:
        if not self.s:
            return q.copy()
        q = q.copy()
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            a = float(s @ q) / float(s @ y)
            alphas.append(a)
            q -= a * y
        s, y = self.s[-1], self.y[-1]
        q *= float(s @ y) / float(y @ y)
        for (s, y), a in zip(zip(self.s, self.y), reversed(alphas)):
            b = float(y @ q) / float(s @ y)
            q += (a - b) * s
        return q


def estimate_lipschitz(problem: BoxProblem, x: np.ndarray, g: np.ndarray) -> float:
    h = np.maximum(1e-12, 1e-6 * np.abs(x))
    _, g_h = problem.value_and_grad(x + h)
    return max(float(np.linalg.norm(g_h - g) / np.linalg.norm(h)), _MIN_LIPSCHITZ)


def line_search_step_size(problem: BoxProblem, x: np.ndarray, fx: float, gx: np.ndarray, step: float,
                          max_backtracks: int = _MAX_BACKTRACKS):
    """Largest ``step`` (halving from the given one) passing the upper-bound test.

    The forward-backward envelope only decreases when the quadratic model
    ``f(x) - <g, r> + (L/2)||r||^2`` with ``L = 0.95/step`` dominates ``f`` at
    the projected point.  Returns ``(step, x_bar, f_bar, backtracks)``.
    """
    backtracks = 0
    while True:
        x_bar = problem.project(x - step * gx)
        r = x - x_bar
        f_bar = problem.value(x_bar)
        lipschitz = _GAMMA_L_COEFF / step
        bound = fx + _LIPSCHITZ_FUDGE * abs(fx) - float(gx @ r) + 0.5 * lipschitz * float(r @ r)
        if f_bar <= bound or backtracks >= max_backtracks or lipschitz >= _MAX_LIPSCHITZ:
            return step, x_bar, f_bar, backtracks
        step *= 0.5
        backtracks += 1


def _envelope(fx: float, gx: np.ndarray, r: np.ndarray, step: float) -> float:
    return fx - float(gx @ r) + float(r @ r) / (2.0 * step)


def inner_solve(problem: BoxProblem, x_init, config: SolverConfig = SolverConfig(), *,
                tolerance: Optional[float] = None, deadline: Optional[float] = None,
                max_iters: Optional[int] = None) -> InnerResult:
    """PANOC on a box.  ``deadline`` is an absolute ``time.perf_counter()`` value."""
    tol = config.epsilon if tolerance is None else tolerance
    max_iters = config.max_inner_iters if max_iters is None else max_iters
    x = problem.project(np.asarray(x_init, dtype=float).copy())
    trace: list = []

    if deadline is not None and time.perf_counter() >= deadline:
        return InnerResult(x, np.inf, 0, Status.BUDGET_EXHAUSTED, np.nan, trace)

    fx, gx = problem.value_and_grad(x)
    step = _GAMMA_L_COEFF / estimate_lipschitz(problem, x, gx)
    lbfgs = LBFGS(config.lbfgs_memory)
    x_prev = r_prev = None
    clean_iters = 0
    status = Status.MAX_ITERS
    x_bar, r, residual, f_bar = x, np.zeros_like(x), np.inf, fx
    it = 0
    while True:
        if deadline is not None and time.perf_counter() >= deadline:
            status = Status.BUDGET_EXHAUSTED
            break
        if config.grow_after is not None and clean_iters >= config.grow_after:
            step *= 2.0
            clean_iters = 0
            lbfgs.reset()
            x_prev = None
        new_step, x_bar, f_bar, backtracks = line_search_step_size(problem, x, fx, gx, step)
        if backtracks:
            lbfgs.reset()
            x_prev = None
            clean_iters = 0
        else:
            clean_iters += 1
        step = new_step
        r = x - x_bar
        residual = float(np.max(np.abs(r))) / step if r.size else 0.0
        if residual <= tol:
            status = Status.CONVERGED
            break
        if it >= max_iters:
            break
        phi = _envelope(fx, gx, r, step)
        trace.append((step, phi))

        if x_prev is not None:
            lbfgs.update(x - x_prev, r - r_prev, float(np.linalg.norm(r)))
        x_prev, r_prev = x, r

        sigma = (1.0 - _GAMMA_L_COEFF) / (4.0 * step)
        target = phi - sigma * float(r @ r)
        if len(lbfgs) == 0:
            x_new = x_bar
            f_new, g_new = problem.value_and_grad(x_new)
        else:
            d = lbfgs.apply(r)
            tau = 1.0
            for _ in range(_MAX_LINESEARCH):
                x_new = x - (1.0 - tau) * r - tau * d
                f_new, g_new = problem.value_and_grad(x_new)
                r_new = x_new - problem.project(x_new - step * g_new)
                if _envelope(f_new, g_new, r_new, step) <= target:
                    break
                tau *= 0.5
            else:
                x_new = x_bar
                f_new, g_new = problem.value_and_grad(x_new)
        x, fx, gx = x_new, f_new, g_new
        it += 1
    return InnerResult(x_bar, residual, it, status, f_bar, trace)


def _violation(g: Optional[np.ndarray]) -> float:
    if g is None or g.size == 0:
        return 0.0
    return max(0.0, float(np.max(g)))


def outer_solve(spec: ConstrainedSpec, x_init, config: SolverConfig = SolverConfig()) -> OuterResult:
    """Augmented-Lagrangian / penalty loop around :func:`inner_solve`.

    Returns the best iterate seen: among the outer iterates and the projected
    starting point, those whose constraint violation is within
    ``max(delta, smallest violation seen)``, the one with the lowest cost.
    """
    t0 = time.perf_counter()
    deadline = None if config.time_budget is None else t0 + config.time_budget / 1000.0
    x = spec.project(np.asarray(x_init, dtype=float).copy())
    x0 = x.copy()

    def assess(z):
        if spec.assess is not None:
            return spec.assess(z)
        g1 = spec.alm(z)[0] if spec.alm is not None else None
        g2 = spec.pm(z)[0] if spec.pm is not None else None
        return spec.value(z), g1, max(_violation(g1), _violation(g2))

    # the starting point competes too; assessed up front so none of it follows a budget cut
    cost0, g0, violation0 = assess(x0)
    n_alm = 0 if g0 is None else g0.shape[0]
    y = np.zeros(n_alm)
    c = config.lambda0
    penalties = [c]
    candidates = []  # (violation, cost, x, residual)
    prev_violation = np.inf
    status = Status.MAX_ITERS
    total_inner = 0
    outer = 0

    def augmented(y, c):
        if spec.augmented is not None:
            fused = spec.augmented(y, c)
            return BoxProblem(cost=lambda z: fused(z, False)[0], grad=lambda z: fused(z, True)[1],
                              lower=spec.lower, upper=spec.upper, cost_grad=lambda z: fused(z, True))

        def cost(z):
            f = spec.cost(z)
            if spec.alm is not None:
                g1 = np.maximum(spec.alm(z)[0] + y / c, 0.0)
                f += 0.5 * c * float(g1 @ g1)
            if spec.pm is not None:
                g2 = np.maximum(spec.pm(z)[0], 0.0)
                f += 0.5 * c * float(g2 @ g2)
            return f

        def cost_grad(z):
            f, grad = spec.value_and_grad(z)
            grad = np.array(grad, dtype=float, copy=True)
            if spec.alm is not None:
                g1, vjp1 = spec.alm(z)
                w = np.maximum(g1 + y / c, 0.0)
                f += 0.5 * c * float(w @ w)
                if w.any():
                    grad += c * vjp1(w)
            if spec.pm is not None:
                g2, vjp2 = spec.pm(z)
                w = np.maximum(g2, 0.0)
                f += 0.5 * c * float(w @ w)
                if w.any():
                    grad += c * vjp2(w)
            return f, grad

        return BoxProblem(cost=cost, grad=lambda z: cost_grad(z)[1], lower=spec.lower, upper=spec.upper,
                          cost_grad=cost_grad)

    residual = np.inf
    for outer in range(1, config.max_outer_iters + 1):
        if spec.inner is not None and config.grow_after is None:
            res = spec.inner(y, c, x, config, deadline)
        else:
            res = inner_solve(augmented(y, c), x, config, deadline=deadline)
        total_inner += res.iters
        # cut before any iteration: x is the start or the last candidate, both already assessed
        if res.status is Status.BUDGET_EXHAUSTED and not np.isfinite(res.residual):
            status = Status.BUDGET_EXHAUSTED
            break
        x = res.x
        residual = res.residual
        cost, g1, violation = assess(x)
        candidates.append((violation, cost, x, residual))
        if g1 is not None:
            y = np.clip(y + c * g1, 0.0, _MULTIPLIER_CAP)
        if res.status is Status.BUDGET_EXHAUSTED:
            status = Status.BUDGET_EXHAUSTED
            break
        if violation <= config.delta and res.status is Status.CONVERGED:
            status = Status.CONVERGED
            break
        if violation > config.delta and violation > config.sufficient_decrease * prev_violation:
            c *= config.rho
            penalties.append(c)
        prev_violation = violation

    # listed last so solver iterates win ties
    candidates.append((violation0, cost0, x0, np.inf))
    floor = max(config.delta, min(v for v, *_ in candidates))
    violation, cost, x, residual = min((cand for cand in candidates if cand[0] <= floor),
                                       key=lambda cand: cand[1])
    elapsed = (time.perf_counter() - t0) * 1000.0
    return OuterResult(x=x, status=status, infeasibility=violation, solve_time=elapsed, cost=cost,
                       residual=residual, outer_iters=outer, inner_iters=total_inner,
                       penalties=penalties, multipliers=y)
