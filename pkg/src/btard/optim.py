"""Synthetic objectives, seeded gradient oracles, stepsize presets and training loops."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .robustagg import QUALITY_CONSTANT
from .vecmath import PartitionLayout, SeededStream, exact_mean

# --- noise ------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianNoise:
    """Per-coordinate N(0, sigma^2/d): any s-subvector has variance s sigma^2/d."""

    sigma: float = 1.0

    def sample(self, stream: SeededStream, d: int) -> np.ndarray:
        if self.sigma == 0:
            return np.zeros(d)
        return stream.normal(d) * (self.sigma / math.sqrt(d))


def pareto_scale(alpha: float, G: float, tail: float) -> float:
    """Scale x_m of a symmetric Pareto(tail) with E|X|^alpha = G^alpha."""
    return G * ((tail - alpha) / tail) ** (1.0 / alpha)


def heavy_tail_samples(stream: SeededStream, k: int, alpha: float, G: float, tail: float) -> np.ndarray:
    u = stream.uniform(k)
    sign = np.where(stream.uniform(k) < 0.5, -1.0, 1.0)
    return sign * pareto_scale(alpha, G, tail) * u ** (-1.0 / tail)


@dataclass(frozen=True)
class HeavyTailNoise:
    """Symmetrized Pareto noise whose alpha-th moment is bounded by G^alpha.

    The tail index defaults to alpha + 0.3: above alpha (finite alpha moment)
    and, for alpha < 1.7, at most 2 (infinite variance). Each coordinate gets
    E|X_c|^alpha = G^alpha / d, so the alpha-moment of the whole noise vector
    is at most G^alpha.
    """

    alpha: float = 1.5
    G: float = 1.0
    tail: float | None = None

    def __post_init__(self):
        if not 1 < self.alpha <= 2:
            raise ValueError("alpha must lie in (1, 2]")
        if self.tail is not None and self.tail <= self.alpha:
            raise ValueError("tail index must exceed alpha")

    @property
    def tail_index(self) -> float:
        return self.tail if self.tail is not None else self.alpha + 0.3

    def sample(self, stream: SeededStream, d: int) -> np.ndarray:
        g_coord = self.G * d ** (-1.0 / self.alpha)
        return heavy_tail_samples(stream, d, self.alpha, g_coord, self.tail_index)


def make_noise(spec):
    if spec is None:
        return GaussianNoise(0.0)
    if isinstance(spec, (GaussianNoise, HeavyTailNoise)):
        return spec
    kind = spec.get("kind", "gaussian")
    if kind == "gaussian":
        return GaussianNoise(float(spec.get("sigma", 1.0)))
    if kind in ("heavy_tail", "heavytail"):
        tail = spec.get("tail")
        return HeavyTailNoise(float(spec.get("alpha", 1.5)), float(spec.get("G", 1.0)),
                              None if tail is None else float(tail))
    raise ValueError(f"unknown noise kind {kind!r}")


# --- objectives -------------------------------------------------------------


class Objective:
    """Base class: ``value``, exact ``grad`` and the seeded ``stochastic_grad``."""

    d: int
    noise = GaussianNoise(0.0)
    f_star: float | None = 0.0
    x_star: np.ndarray | None = None
    L: float = 1.0
    mu: float = 0.0

    def value(self, x) -> float:
        raise NotImplementedError

    def grad(self, x) -> np.ndarray:
        raise NotImplementedError

    def stochastic_grad(self, x, seed) -> np.ndarray:
        stream = SeededStream(seed)
        return self.grad(x) + self.noise.sample(stream, self.d)

    def wrong(self) -> "Objective":
        """The plausible-but-wrong objective used by the wrong_objective attack."""
        raise NotImplementedError

    def gap(self, x) -> float:
        return self.value(x) - (self.f_star if self.f_star is not None else 0.0)

    @property
    def sigma(self) -> float:
        return getattr(self.noise, "sigma", 0.0)


class Quadratic(Objective):
    """f(x) = 1/2 (x - x*)^T A (x - x*) with A diagonal (vector) or dense SPD."""

    def __init__(self, A, x_star, noise=None):
        A = np.asarray(A, dtype=np.float64)
        self.x_star = np.asarray(x_star, dtype=np.float64)
        self.d = self.x_star.shape[0]
        self.diagonal = A.ndim == 1
        if self.diagonal:
            if A.shape != (self.d,) or np.any(A <= 0):
                raise ValueError("diagonal A must be positive with length d")
            eig = A
        else:
            if A.shape != (self.d, self.d) or not np.allclose(A, A.T):
                raise ValueError("A must be a symmetric d x d matrix")
            eig = np.linalg.eigvalsh(A)
            if eig[0] <= 0:
                raise ValueError("A must be positive definite")
        self.A = A
        self.L = float(eig.max())
        self.mu = float(eig.min())
        self.f_star = 0.0
        self.noise = make_noise(noise)

    def grad(self, x):
        diff = np.asarray(x, dtype=np.float64) - self.x_star
        return self.A * diff if self.diagonal else self.A @ diff

    def value(self, x):
        diff = np.asarray(x, dtype=np.float64) - self.x_star
        return 0.5 * float(diff @ self.grad(x))

    def wrong(self):
        return Quadratic(self.A, -self.x_star, self.noise)


class NonConvex(Objective):
    """Rastrigin-like: sum 1/2 (x-c)^2 + amp (1 - cos(2 pi (x-c)))."""

    def __init__(self, center, amplitude=0.1, noise=None):
        self.x_star = np.asarray(center, dtype=np.float64)
        self.d = self.x_star.shape[0]
        self.amplitude = float(amplitude)
        self.L = 1.0 + 4 * math.pi ** 2 * self.amplitude
        self.mu = 0.0
        self.f_star = 0.0
        self.noise = make_noise(noise)

    def value(self, x):
        u = np.asarray(x, dtype=np.float64) - self.x_star
        return float(np.sum(0.5 * u * u + self.amplitude * (1 - np.cos(2 * math.pi * u))))

    def grad(self, x):
        u = np.asarray(x, dtype=np.float64) - self.x_star
        return u + 2 * math.pi * self.amplitude * np.sin(2 * math.pi * u)

    def wrong(self):
        return NonConvex(-self.x_star, self.amplitude, self.noise)


class Quartic(Objective):
    """sum a/4 (x-c)^4 + mu/2 (x-c)^2.

    Smooth only on bounded sets; stochastic gradient steps that land far from c
    overshoot, which makes heavy-tailed noise visibly destabilizing.
    """

    def __init__(self, center, a=1.0, mu=0.1, radius=10.0, noise=None):
        self.x_star = np.asarray(center, dtype=np.float64)
        self.d = self.x_star.shape[0]
        self.a = float(a)
        self.mu = float(mu)
        # smoothness on the ball of the given radius around the centre
        self.L = 3 * self.a * radius ** 2 + self.mu
        self.f_star = 0.0
        self.noise = make_noise(noise)

    def value(self, x):
        u = np.asarray(x, dtype=np.float64) - self.x_star
        return float(np.sum(0.25 * self.a * u ** 4 + 0.5 * self.mu * u * u))

    def grad(self, x):
        u = np.asarray(x, dtype=np.float64) - self.x_star
        return self.a * u ** 3 + self.mu * u

    def wrong(self):
        return Quartic(-self.x_star, self.a, self.mu, noise=self.noise)


class LogisticRegression(Objective):
    """L2-regularized logistic loss on a synthetic dataset; noise comes from minibatches."""

    def __init__(self, features, labels, reg=0.01, batch=8, f_star=None):
        self.features = np.asarray(features, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.float64)
        if set(np.unique(self.labels)) - {-1.0, 1.0}:
            raise ValueError("labels must be +-1")
        self.N, self.d = self.features.shape
        self.reg = float(reg)
        self.batch = int(batch)
        row_sq = np.einsum("ij,ij->i", self.features, self.features)
        self.L = 0.25 * float(np.linalg.eigvalsh(self.features.T @ self.features / self.N).max()) + self.reg
        self.mu = self.reg
        self._row_sq = row_sq
        self.noise = GaussianNoise(0.0)
        if f_star is None:
            from scipy.optimize import minimize

            res = minimize(self.value, np.zeros(self.d), jac=self.grad, method="L-BFGS-B",
                           options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 10_000})
            self.x_star, f_star = res.x, float(res.fun)
        self.f_star = f_star

    @classmethod
    def synthetic(cls, n_samples, d, seed=0, reg=0.01, batch=8, label_noise=0.1):
        stream = SeededStream(b"logistic" + int(seed).to_bytes(8, "little"))
        X = stream.normal(n_samples * d).reshape(n_samples, d)
        w = stream.normal(d)
        y = np.where(X @ w >= 0, 1.0, -1.0)
        flip = stream.uniform(n_samples) < label_noise
        y[flip] = -y[flip]
        return cls(X, y, reg, batch)

    def _loss_grad(self, x, rows):
        X = self.features[rows]
        y = self.labels[rows]
        margin = y * (X @ x)
        value = float(np.mean(np.logaddexp(0.0, -margin))) + 0.5 * self.reg * float(x @ x)
        weight = -y * 0.5 * (1 - np.tanh(margin / 2))  # -y * sigmoid(-margin)
        return value, X.T @ weight / X.shape[0] + self.reg * x

    def value(self, x):
        return self._loss_grad(np.asarray(x, dtype=np.float64), slice(None))[0]

    def grad(self, x):
        return self._loss_grad(np.asarray(x, dtype=np.float64), slice(None))[1]

    def stochastic_grad(self, x, seed):
        rows = np.floor(SeededStream(seed).uniform(self.batch) * self.N).astype(np.int64)
        return self._loss_grad(np.asarray(x, dtype=np.float64), rows)[1]

    def wrong(self):
        return LogisticRegression(self.features, -self.labels, self.reg, self.batch)


def make_objective(spec: dict, d: int, seed: int = 0) -> Objective:
    """Build an objective from a config section."""
    kind = spec.get("kind", "quadratic")
    stream = SeededStream(b"objective" + int(seed).to_bytes(8, "little", signed=True))
    noise = spec.get("noise", {"kind": "gaussian", "sigma": 1.0})
    if kind == "quadratic":
        lo, hi = spec.get("eigen_range", [1.0, 1.0])
        if spec.get("spacing", "log") == "log" and lo > 0:
            A = np.geomspace(lo, hi, d)
        else:
            A = np.linspace(lo, hi, d)
        x_star = stream.normal(d) * float(spec.get("x_star_scale", 1.0))
        return Quadratic(A, x_star, noise)
    if kind == "nonconvex":
        return NonConvex(stream.normal(d) * float(spec.get("x_star_scale", 1.0)),
                         float(spec.get("amplitude", 0.1)), noise)
    if kind == "quartic":
        return Quartic(stream.normal(d) * float(spec.get("x_star_scale", 0.0)), float(spec.get("a", 1.0)),
                       float(spec.get("mu", 0.1)), float(spec.get("radius", 10.0)), noise)
    if kind == "logistic":
        return LogisticRegression.synthetic(int(spec.get("samples", 512)), d, seed,
                                            float(spec.get("reg", 0.01)), int(spec.get("batch", 8)))
    raise ValueError(f"unknown objective kind {kind!r}")


def compute_gradient(objective: Objective, x, seed) -> np.ndarray:
    return objective.stochastic_grad(np.asarray(x, dtype=np.float64), seed)


# --- clipping, projection ---------------------------------------------------


def clip_gradient_part(g_part, lam: float) -> np.ndarray:
    if not lam > 0:
        raise ValueError("clip level must be positive")
    g = np.asarray(g_part, dtype=np.float64)
    nrm = float(np.sqrt(np.dot(g, g)))
    if nrm <= lam or nrm == 0:
        return g.copy()
    return g * (lam / nrm)


def clip_by_parts(g, layout: PartitionLayout, lam: float | None) -> np.ndarray:
    if lam is None or math.isinf(lam):
        return g
    out = np.empty_like(g)
    for j in range(layout.n):
        sl = layout.bounds(j)
        out[sl] = clip_gradient_part(g[sl], lam)
    return out


@dataclass(frozen=True)
class Projection:
    """Identity when ``radius`` is None, otherwise the Euclidean ball around ``center``."""

    radius: float | None = None
    center: np.ndarray | None = None

    def __call__(self, x):
        if self.radius is None:
            return x
        c = 0.0 if self.center is None else self.center
        u = x - c
        nrm = float(np.linalg.norm(u))
        if nrm <= self.radius:
            return x
        return c + u * (self.radius / nrm)


# --- stepsize presets -------------------------------------------------------


def sgd_stepsize(L, delta0, n, sigma, K):
    """min{1/(4L), sqrt(Delta0 n / (L sigma^2 K))}."""
    cap = 1 / (4 * L)
    if sigma == 0:
        return cap
    return min(cap, math.sqrt(delta0 * n / (L * sigma ** 2 * K)))


def clip_level(G, K, alpha):
    """lambda = G K^{1/alpha}."""
    return G * K ** (1.0 / alpha)


def part_clip_level(lam, n_parts):
    """lambda_k = lambda / sqrt(n_k - m), with n_parts = n_k - m."""
    return lam / math.sqrt(n_parts)


def restart_count(mu, R0, eps):
    """r = ceil(log2(mu R0^2 / eps)) - 1."""
    return max(1, math.ceil(math.log2(mu * R0 ** 2 / eps)) - 1)


def restart_schedule(t, *, L, mu, sigma, R0, n, m, delta, C=QUALITY_CONSTANT):
    """(K_t, gamma_t) for restart t of restarted BTARD-SGD (strongly convex case)."""
    terms = [16 * L / mu, 32 * sigma ** 2 * 2 ** t / (mu ** 2 * R0 ** 2)]
    if delta > 0 and m > 0:
        terms.append(48 * math.sqrt(10 * C) * n * math.sqrt(delta) * sigma * 2 ** (t / 2) / (m * mu * R0))
    K = math.ceil(max(terms))
    gammas = [1 / (4 * L)]
    if sigma > 0:
        gammas.append(math.sqrt(7 * n * R0 ** 2 / (120 * 2 ** t * sigma ** 2 * K)))
        if delta > 0 and m > 0:
            gammas.append(math.sqrt(m ** 2 * R0 ** 2 / (1440 * 2 ** t * C * sigma ** 2 * n ** 2 * delta)))
    return K, min(gammas)


CLIP_C1 = 384.0
CLIP_C2 = 4.0


def clipped_restart_schedule(t, *, mu, R0, G, alpha, n, m, delta):
    """(K_t, gamma_t, lambda_t) for the restarted clipped variant (known attacker count)."""
    expo = alpha / (alpha - 1)
    terms = [(2 * math.sqrt(6) * G * 2 ** (t / 2) / (mu * R0)) ** expo]
    if delta > 0 and m > 0:
        terms.append((24 * G * n * math.sqrt(10 * delta * (CLIP_C1 + CLIP_C2)) * 2 ** (t / 2)
                      / (m * mu * R0)) ** expo)
    K = math.ceil(max(terms))
    lam = clip_level(G, K, alpha)
    gammas = [R0 / (math.sqrt(6) * 2 ** (t / 2) * G * K ** (1 / alpha))]
    if delta > 0 and m > 0:
        inner = CLIP_C1 * K ** ((4 - alpha) / (2 * alpha)) + CLIP_C2 * K ** (2 / alpha)
        gammas.append(m * R0 / (12 * 2 ** (t / 2) * G * n * math.sqrt(10 * delta * inner)))
    return K, min(gammas), lam


# --- training loops ---------------------------------------------------------


@dataclass
class Trajectory:
    """Final iterate, running average of x^0..x^{K-1}, snapshots and per-step reports."""

    x: np.ndarray
    average: np.ndarray
    snapshots: dict = field(default_factory=dict)
    reports: list = field(default_factory=list)
    steps: int = 0


def _lr_at(lr, k):
    return lr(k) if callable(lr) else lr


def btard_sgd(engine, x0, steps: int, lr, *, projection: Projection = Projection(), start_step: int = 0,
              callback=None, snapshot_every: int = 100, keep_reports: bool = True) -> Trajectory:
    """x^{k+1} = proj(x^k - lr * g_hat^k) with g_hat from one BTARD round per step.

    ``callback(k, x_before, report)`` runs after every step. The engine raises
    :class:`~btard.simnet.AllBanned` when no honest peer is left.
    """
    x = np.array(x0, dtype=np.float64)
    total = np.zeros_like(x)
    traj = Trajectory(x=x, average=x.copy())
    for i in range(steps):
        k = start_step + i
        if snapshot_every and i % snapshot_every == 0:
            traj.snapshots[k] = x.copy()
        total += x
        report = engine.step(k, x)
        x_new = projection(x - _lr_at(lr, k) * report.update)
        if callback is not None:
            callback(k, x, report)
        if keep_reports:
            traj.reports.append(report)
        x = x_new
        traj.steps = i + 1
    traj.x = x
    traj.average = total / max(steps, 1) if steps else x.copy()
    return traj


def btard_clipped_sgd(engine, x0, steps: int, lr, *, projection: Projection, **kw) -> Trajectory:
    """Same loop with per-part gradient clipping; needs a bounded feasible set."""
    if projection.radius is None:
        raise ValueError("the clipped variant needs a bounded projection set")
    if getattr(engine.cfg, "grad_clip", None) is None:
        raise ValueError("engine has no gradient clip level; set ProtocolConfig.grad_clip")
    return btard_sgd(engine, x0, steps, lr, projection=projection, **kw)


def restarted(run_stage, x0, schedule) -> list:
    """Run stage t for K_t steps from the previous stage's averaged iterate.

    ``run_stage(x_start, K, lr, start_step)`` returns a :class:`Trajectory`;
    ``schedule`` is a list of (K_t, lr_t). Returns the restart points
    x_hat^1..x_hat^r.
    """
    points = []
    x = np.array(x0, dtype=np.float64)
    step = 0
    for K, lr in schedule:
        traj = run_stage(x, int(K), lr, step)
        x = traj.average
        points.append(x.copy())
        step += int(K)
    return points


def reference_sgd(objective: Objective, x0, lr, seed_lists, *, grad_clip: float | None = None,
                  projection: Projection = Projection()) -> list:
    """Centralized mini-batch SGD that averages the gradients of the given seeds.

    ``seed_lists[k]`` lists the public seeds of the workers at step k, in
    participant order. Returns x^0..x^K.
    """
    x = np.array(x0, dtype=np.float64)
    xs = [x.copy()]
    for k, seeds in enumerate(seed_lists):
        layout = PartitionLayout(objective.d, len(seeds))
        lam = None if grad_clip is None else part_clip_level(grad_clip, len(seeds))
        grads = [clip_by_parts(objective.stochastic_grad(x, s), layout, lam) for s in seeds]
        x = projection(x - _lr_at(lr, k) * exact_mean(grads))
        xs.append(x.copy())
    return xs


def serial_sgd(objective: Objective, x0, lr, steps: int, *, workers: int = 1, seed: int = 0,
               grad_clip: float | None = None, projection: Projection = Projection(),
               record_every: int = 1) -> tuple:
    """Plain (optionally clipped) mini-batch SGD; returns (final x, {step: x})."""
    x = np.array(x0, dtype=np.float64)
    rec = {}
    base = int(seed).to_bytes(8, "little", signed=True)
    layout = PartitionLayout(objective.d, workers)
    lam = None if grad_clip is None else part_clip_level(grad_clip, workers)
    for k in range(steps):
        if record_every and k % record_every == 0:
            rec[k] = x.copy()
        seeds = [base + k.to_bytes(8, "little") + w.to_bytes(4, "little") for w in range(workers)]
        grads = [clip_by_parts(objective.stochastic_grad(x, s), layout, lam) for s in seeds]
        x = projection(x - _lr_at(lr, k) * exact_mean(grads))
        if not np.all(np.isfinite(x)):
            rec[k + 1] = x.copy()
            break
    rec.setdefault(steps, x.copy())
    return x, rec
