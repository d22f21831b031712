"""Limited-memory BFGS with a strong Wolfe line search and an optional [0, 1] box clamp.

An *iteration* is one outer step: one search direction plus its line search,
however many objective evaluations that takes.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Objective = Callable[[np.ndarray], tuple[float, np.ndarray]]

TOLERANCE_MET = "tolerance_met"
MAX_ITERATIONS = "max_iterations"
LINE_SEARCH_FAILURE = "line_search_failure"
NON_FINITE = "non_finite"


@dataclass(frozen=True)
class LbfgsOptions:
    learning_rate: float = 1.0
    history_size: int = 10
    max_iterations: int = 300
    gradient_tolerance: float = 1e-10
    line_search: str = "strong_wolfe"
    wolfe_c1: float = 1e-4
    wolfe_c2: float = 0.9
    # stop as soon as the loss drops to this value (None disables)
    target_loss: float | None = None
    max_line_search_evals: int = 25
    # after a Wolfe point is found, try the secant line minimizer once, unless the
    # point's slope is already within refine_slope_ratio of the initial slope
    refine_step: bool = True
    refine_slope_ratio: float = 1e-12
    project_box: bool = True

    def __post_init__(self):
        if not 0 < self.wolfe_c1 < self.wolfe_c2 < 1:
            raise ValueError("need 0 < wolfe_c1 < wolfe_c2 < 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.history_size < 1:
            raise ValueError("history_size must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if self.gradient_tolerance < 0:
            raise ValueError("gradient_tolerance must be non-negative")
        if self.line_search not in ("strong_wolfe", "fixed_step"):
            raise ValueError(f"unknown line search {self.line_search!r}")


@dataclass
class OptimResult:
    x_final: np.ndarray
    loss: float
    initial_loss: float
    loss_trace: list[float] = field(default_factory=list)
    iterations_used: int = 0
    converged: bool = False
    termination: str = MAX_ITERATIONS
    evaluations: int = 0


class _Box:
    """Clamp for the coordinates selected by ``mask``; a no-op without one."""

    def __init__(self, mask: np.ndarray | None):
        self.mask = mask

    def project(self, x):
        if self.mask is None:
            return x
        x = x.copy()
        x[self.mask] = np.clip(x[self.mask], 0.0, 1.0)
        return x

    def free_direction(self, x, d):
        """Zero the components of ``d`` that push an active bound outward."""
        if self.mask is None:
            return d
        blocked = self.mask & (((x <= 0.0) & (d < 0)) | ((x >= 1.0) & (d > 0)))
        if not blocked.any():
            return d
        d = d.copy()
        d[blocked] = 0.0
        return d

    def projected_grad(self, x, g):
        return -self.free_direction(x, -g)


def _two_loop(g, pairs):
    q = g.copy()
    alphas = []
    for s, y, rho in reversed(pairs):
        a = rho * s.dot(q)
        alphas.append(a)
        q -= a * y
    if pairs:
        s, y, _ = pairs[-1]
        q *= s.dot(y) / y.dot(y)
    for (s, y, rho), a in zip(pairs, reversed(alphas)):
        b = rho * y.dot(q)
        q += (a - b) * s
    return -q


def _cubic_min(x1, f1, g1, x2, f2, g2, lo, hi):
    """Minimizer of the cubic through two (point, value, slope) triples, clipped to [lo, hi]."""
    if not all(map(math.isfinite, (f1, g1, f2, g2))) or x1 == x2:
        return 0.5 * (lo + hi)
    d1 = g1 + g2 - 3.0 * (f1 - f2) / (x1 - x2)
    disc = d1 * d1 - g1 * g2
    if disc < 0:
        return 0.5 * (lo + hi)
    d2 = math.sqrt(disc)
    if x1 <= x2:
        denom = g2 - g1 + 2.0 * d2
        t = x2 - (x2 - x1) * ((g2 + d2 - d1) / denom) if denom != 0 else 0.5 * (lo + hi)
    else:
        denom = g1 - g2 + 2.0 * d2
        t = x1 - (x1 - x2) * ((g1 + d2 - d1) / denom) if denom != 0 else 0.5 * (lo + hi)
    if not math.isfinite(t):
        return 0.5 * (lo + hi)
    return min(max(t, lo), hi)


class _Trial:
    __slots__ = ("t", "f", "g", "x", "slope")

    def __init__(self, t, f, g, x, slope):
        self.t, self.f, self.g, self.x, self.slope = t, f, g, x, slope


def _strong_wolfe(evaluate, f0, slope0, t, c1, c2, max_evals):
    """Return (accepted trial or None, evaluations used, saw_non_finite)."""
    prev = _Trial(0.0, f0, None, None, slope0)
    evals = 0
    saw_bad = False
    # decrease below this is lost to rounding; demand only what is measurable
    noise = 4.0 * np.finfo(float).eps * abs(f0)

    def sufficient(tr):
        return math.isfinite(tr.f) and tr.f <= f0 + min(c1 * tr.t * slope0, -noise) or (
            math.isfinite(tr.f) and tr.f <= f0 and c1 * tr.t * slope0 > -noise)

    def no_better(tr, ref):
        # higher than ref beyond rounding, or level within rounding and no flatter
        return tr.f > ref.f + noise or (tr.f >= ref.f - noise and abs(tr.slope) >= abs(ref.slope))

    def armijo_fails(tr, ref):
        return not sufficient(tr) or (ref is not None and no_better(tr, ref))

    lo = hi = None
    while evals < max_evals:
        cur = evaluate(t)
        evals += 1
        saw_bad |= not math.isfinite(cur.f)
        if armijo_fails(cur, prev if evals > 1 else None):
            lo, hi = prev, cur
            break
        if abs(cur.slope) <= -c2 * slope0:
            return cur, evals, saw_bad
        if cur.slope >= 0:
            lo, hi = cur, prev
            break
        step = _cubic_min(prev.t, prev.f, prev.slope, cur.t, cur.f, cur.slope,
                          cur.t + 0.01 * (cur.t - prev.t), cur.t * 10.0)
        prev, t = cur, step
    else:
        return (prev if prev.t > 0 else None), evals, saw_bad

    while evals < max_evals:
        a, b = sorted((lo.t, hi.t))
        width = b - a
        if width <= 1e-14 * max(1.0, b):
            break
        if math.isfinite(hi.f):
            t = _cubic_min(lo.t, lo.f, lo.slope, hi.t, hi.f, hi.slope, a, b)
            # keep trials away from the bracket ends
            if min(t - a, b - t) < 0.1 * width:
                t = 0.5 * (a + b)
        else:
            t = 0.5 * (a + b)
        cur = evaluate(t)
        evals += 1
        saw_bad |= not math.isfinite(cur.f)
        if not sufficient(cur) or no_better(cur, lo):
            hi = cur
        else:
            if abs(cur.slope) <= -c2 * slope0:
                return cur, evals, saw_bad
            if cur.slope * (hi.t - lo.t) >= 0:
                hi = lo
            lo = cur
    return (lo if lo.t > 0 else None), evals, saw_bad


def _refine(evaluate, f0, slope0, trial, ratio):
    """One extra evaluation at the secant root of the directional derivative.

    Uses slopes only, so it is exact on quadratics without the cancellation
    that value differences suffer near the optimum. The refined point replaces
    the trial if it is lower, or level within rounding but flatter; it never
    rises above the starting loss.
    Returns None when no evaluation was spent.
    """
    curvature = trial.slope - slope0
    if abs(trial.slope) <= ratio * abs(slope0) or not curvature > 0:
        return None
    t = trial.t * (-slope0) / curvature
    if not 0 < t <= 10.0 * trial.t or abs(t - trial.t) <= 1e-12 * trial.t:
        return None
    cand = evaluate(t)
    if not math.isfinite(cand.f) or cand.f > f0:
        return trial
    noise = 4.0 * np.finfo(float).eps * abs(f0)
    if cand.f < trial.f or (cand.f <= trial.f + noise and abs(cand.slope) < abs(trial.slope)):
        return cand
    return trial


def minimize(objective: Objective, x0, opts: LbfgsOptions | None = None,
             box_mask: np.ndarray | None = None) -> OptimResult:
    """Minimize ``objective`` (x -> (loss, gradient)) starting from ``x0``.

    Coordinates flagged in ``box_mask`` are kept inside [0, 1] when
    ``opts.project_box`` is set. Returns the best iterate seen.
    """
    opts = opts or LbfgsOptions()
    box = _Box(np.asarray(box_mask, dtype=bool) if (box_mask is not None and opts.project_box) else None)
    x = box.project(np.array(x0, dtype=np.float64).reshape(-1))
    f, g = objective(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64).reshape(-1)
    if not math.isfinite(f) or not np.all(np.isfinite(g)):
        raise FloatingPointError("objective is not finite at the starting point")
    evals = 1
    result = OptimResult(x_final=x, loss=f, initial_loss=f)

    def done(fv, xv, gv):
        if opts.target_loss is not None and fv <= opts.target_loss:
            return True
        return np.max(np.abs(box.projected_grad(xv, gv)), initial=0.0) <= opts.gradient_tolerance

    if done(f, x, g):
        result.converged, result.termination = True, TOLERANCE_MET
        return result

    def evaluate_at(x_base, d):
        def evaluate(t):
            xt = box.project(x_base + t * d)
            ft, gt = objective(xt)
            ft = float(ft)
            gt = np.asarray(gt, dtype=np.float64).reshape(-1)
            if not math.isfinite(ft) or not np.all(np.isfinite(gt)):
                return _Trial(t, math.inf, gt, xt, math.nan)
            moving = d if box.mask is None else np.where(xt == x_base + t * d, d, 0.0)
            return _Trial(t, ft, gt, xt, float(gt.dot(moving)))
        return evaluate

    pairs: deque = deque(maxlen=opts.history_size)
    termination = MAX_ITERATIONS
    for k in range(opts.max_iterations):
        d = box.free_direction(x, _two_loop(g, list(pairs)))
        slope = float(g.dot(d))
        if not slope < 0:
            pairs.clear()
            d = box.free_direction(x, -g)
            slope = float(g.dot(d))
            if not slope < 0:
                termination = TOLERANCE_MET
                break
        t0 = opts.learning_rate if k > 0 else min(1.0, 1.0 / np.abs(g).sum()) * opts.learning_rate
        evaluate = evaluate_at(x, d)
        if opts.line_search == "strong_wolfe":
            trial, used, saw_bad = _strong_wolfe(evaluate, f, slope, t0, opts.wolfe_c1, opts.wolfe_c2,
                                                 opts.max_line_search_evals)
            evals += used
            if trial is None and pairs:
                # stale curvature pairs: restart once from steepest descent
                pairs.clear()
                d = box.free_direction(x, -g)
                slope = float(g.dot(d))
                t0 = min(1.0, 1.0 / np.abs(d).sum()) * opts.learning_rate
                evaluate = evaluate_at(x, d)
                trial, used, bad = _strong_wolfe(evaluate, f, slope, t0, opts.wolfe_c1, opts.wolfe_c2,
                                                 opts.max_line_search_evals)
                evals += used
                saw_bad |= bad
            if trial is None:
                termination = NON_FINITE if saw_bad else LINE_SEARCH_FAILURE
                break
            if opts.refine_step:
                better = _refine(evaluate, f, slope, trial, opts.refine_slope_ratio)
                if better is not None:
                    evals += 1
                    trial = better
        else:
            trial = evaluate(opts.learning_rate if k > 0 else t0)
            evals += 1
            if not math.isfinite(trial.f):
                termination = NON_FINITE
                break
        s, y = trial.x - x, trial.g - g
        sy = float(s.dot(y))
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            pairs.append((s, y, 1.0 / sy))
        x, f, g = trial.x, trial.f, trial.g
        result.loss_trace.append(f)
        if f <= result.loss:
            result.loss, result.x_final = f, x
        if done(f, x, g):
            termination = TOLERANCE_MET
            break

    result.iterations_used = len(result.loss_trace)
    result.termination = termination
    result.converged = termination == TOLERANCE_MET
    result.evaluations = evals
    return result
