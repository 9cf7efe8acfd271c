"""CenteredClip aggregation, its clipping-radius schedule and median baselines."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .vecmath import exact_mean

# aggregation quality constant for the known-count case
QUALITY_CONSTANT = 4001 + 4 * ((1 + math.sqrt(3)) ** 2 + 3)


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class ClipConfig:
    """``mode`` is one of ``"fixed"``, ``"schedule"`` or ``"infinite"``.

    ``solver="step"`` runs the damped update ``v += mean(clipped deviations)``.
    ``solver="reweighted"`` solves the same fixed-point equation with
    ``v = sum(w_i x_i) / sum(w_i)``, which does not crawl when tau is tiny.
    """

    mode: str = "infinite"
    tau: float = math.inf
    delta: float = 0.0
    sigma: float = 0.0
    b0_sq: float = 0.0
    tol: float = 1e-6
    max_iters: int = 1000
    solver: str = "step"

    def __post_init__(self):
        if self.mode not in ("fixed", "schedule", "infinite"):
            raise ValueError(f"unknown clip mode {self.mode!r}")
        if self.mode == "fixed" and not self.tau > 0:
            raise ValueError("fixed clipping needs tau > 0")
        if self.mode == "schedule" and not 0 <= self.delta < 0.5:
            raise ValueError("schedule needs 0 <= delta < 0.5")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.solver not in ("step", "reweighted"):
            raise ValueError(f"unknown solver {self.solver!r}")

    @classmethod
    def fixed(cls, tau, **kw):
        return cls(mode="fixed", tau=float(tau), **kw)

    @classmethod
    def infinite(cls, **kw):
        return cls(mode="infinite", **kw)

    @classmethod
    def schedule(cls, delta, sigma, b0_sq=0.0, **kw):
        # no attackers expected: the analysis falls back to the plain mean
        if delta == 0:
            return cls(mode="infinite", **kw)
        return cls(mode="schedule", delta=float(delta), sigma=float(sigma), b0_sq=float(b0_sq), **kw)

    @property
    def effective_mode(self) -> str:
        if self.mode == "fixed" and math.isinf(self.tau):
            return "infinite"
        return self.mode

    def limit_tau(self) -> float:
        """Clipping radius the fixed-point (and hence the checksum) refers to."""
        mode = self.effective_mode
        if mode == "infinite":
            return math.inf
        if mode == "fixed":
            return self.tau
        rate = 6.45 * self.delta
        if rate >= 1:
            # the radius recursion does not settle; it keeps growing
            return math.inf
        b_sq = 5 * self.sigma ** 2 / (1 - rate)
        return tau_schedule_step(self.delta, self.sigma, b_sq)[0]


def tau_schedule_step(delta: float, sigma: float, b_sq: float) -> tuple:
    if delta <= 0:
        raise AggregationError("tau schedule is undefined for delta = 0; use infinite mode")
    tau = 4 * math.sqrt((1 - delta) * (b_sq / 3 + sigma ** 2) / (math.sqrt(3) * delta))
    return tau, 6.45 * delta * b_sq + 5 * sigma ** 2


def clip_weights(diffs: np.ndarray, tau: float) -> np.ndarray:
    """min{1, tau/||row||} per row; zero rows get weight 1."""
    if math.isinf(tau):
        return np.ones(diffs.shape[0])
    norms = np.sqrt(np.einsum("ij,ij->i", diffs, diffs))
    if tau > 0:
        # same bits as the branch below: exactly 1.0 when norm <= tau
        return tau / np.maximum(norms, tau)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(norms > tau, tau / norms, 1.0)
    return w


def clip_step(inputs: np.ndarray, v: np.ndarray, tau: float) -> np.ndarray:
    """(1/n) sum (x_i - v) min{1, tau/||x_i - v||}."""
    diffs = inputs - v
    w = clip_weights(diffs, tau)
    return (w @ diffs) / inputs.shape[0]


class ClipResult(NamedTuple):
    v: np.ndarray
    iters: int
    residual: float


def _as_matrix(inputs) -> np.ndarray:
    if isinstance(inputs, np.ndarray) and inputs.ndim == 2:
        mat = inputs.astype(np.float64, copy=False)
    else:
        if len(inputs) == 0:
            raise AggregationError("no inputs to aggregate")
        mat = np.vstack([np.asarray(x, dtype=np.float64).ravel() for x in inputs])
    if mat.shape[0] == 0:
        raise AggregationError("no inputs to aggregate")
    return mat


def centered_clip(inputs, cfg: ClipConfig = ClipConfig(), v0=None) -> ClipResult:
    """Iterate v <- v + (1/n) sum (x_i - v) min{1, tau_l/||x_i - v||}.

    Returns the first iterate whose update norm is at most ``cfg.tol`` (the
    update norm at that iterate is the reported residual), or the last iterate
    after ``max_iters`` updates.
    """
    mat = _as_matrix(inputs)
    mode = cfg.effective_mode
    if mode == "infinite":
        v = exact_mean(list(mat))
        if not np.all(np.isfinite(v)):
            raise AggregationError("aggregate is not finite")
        return ClipResult(v, 1, 0.0)

    v = coordinate_median(mat) if v0 is None else np.array(v0, dtype=np.float64)
    limit = cfg.limit_tau()
    b_sq = cfg.b0_sq
    step_norm = math.inf
    iters = 0
    while True:
        if mode == "schedule":
            tau, next_b = tau_schedule_step(cfg.delta, cfg.sigma, b_sq)
            if math.isinf(limit):
                settled = True
            else:
                settled = abs(tau - limit) <= 1e-12 * max(limit, 1.0)
                if settled:
                    tau = limit
            b_sq = next_b
        else:
            tau, settled = limit, True
        if cfg.solver == "reweighted":
            diffs = mat - v
            w = clip_weights(diffs, tau)
            nxt = (w[:, None] * mat).sum(axis=0) / w.sum()
            moved = float(np.linalg.norm(nxt - v))
            if (settled and moved <= cfg.tol) or iters >= cfg.max_iters:
                step_norm = fixed_point_residual(mat, nxt, tau)
                v = nxt
                break
            v = nxt
            iters += 1
            continue
        step = clip_step(mat, v, tau)
        step_norm = float(np.sqrt(np.dot(step, step)))
        if (settled and step_norm <= cfg.tol) or iters >= cfg.max_iters:
            break
        v = v + step
        iters += 1
    if not np.all(np.isfinite(v)):
        raise AggregationError("aggregate is not finite")
    return ClipResult(v, iters, step_norm)


def converged_clip(inputs, cfg: ClipConfig = ClipConfig()) -> ClipResult:
    """CenteredClip run to convergence.

    The configured solver goes first; if it stops at ``max_iters`` short of
    ``tol``, the reweighted update finishes from that iterate. Honest
    aggregators use this so a slow damped solve never leaves checksums that
    fail to cancel.
    """
    res = centered_clip(inputs, cfg)
    if res.residual <= cfg.tol or cfg.effective_mode == "infinite":
        return res
    tau = cfg.limit_tau()
    polish = ClipConfig.fixed(tau, tol=cfg.tol, max_iters=max(cfg.max_iters, 100_000), solver="reweighted")
    out = centered_clip(inputs, polish, v0=res.v)
    # the reweighted stopping rule bounds the move; report the true residual
    return ClipResult(out.v, res.iters + out.iters, fixed_point_residual(inputs, out.v, tau))


def fixed_point_residual(inputs, v, tau: float) -> float:
    """Norm of the clipped-deviation sum divided by n (zero at the fixed point)."""
    mat = _as_matrix(inputs)
    step = clip_step(mat, np.asarray(v, dtype=np.float64), tau)
    return float(np.linalg.norm(step))


def coordinate_median(inputs) -> np.ndarray:
    mat = _as_matrix(inputs)
    srt = np.sort(mat, axis=0)
    return srt[(mat.shape[0] - 1) // 2].copy()


def geometric_median(inputs, tol: float = 1e-10, max_iters: int = 100_000) -> np.ndarray:
    """Weiszfeld iteration started from the mean.

    If the iterate lands on an input point, that point is returned when it
    satisfies the optimality condition (pull of the others at most 1).
    """
    mat = _as_matrix(inputs)
    v = mat.mean(axis=0)
    for _ in range(max_iters):
        diffs = mat - v
        dist = np.sqrt(np.einsum("ij,ij->i", diffs, diffs))
        hit = dist < 1e-15
        if np.any(hit):
            others = ~hit
            if not np.any(others):
                return v
            pull = (diffs[others] / dist[others, None]).sum(axis=0)
            if np.linalg.norm(pull) <= 1.0:
                return v
            dist = np.where(hit, 1e-15, dist)
        w = 1.0 / dist
        nxt = (w[:, None] * mat).sum(axis=0) / w.sum()
        if np.linalg.norm(nxt - v) <= tol:
            return nxt
        v = nxt
    return v


def mean(inputs) -> np.ndarray:
    return exact_mean(list(_as_matrix(inputs)))
