"""Small-swarm builders shared by the engine-level tests."""
import copy

from btard.config import ExperimentConfig
from btard.simnet import build_engine


def small_raw(n=8, b=0, m=1, d=32, steps=30, seed=0, attack=(), fault=(), hash_mode="fast-sim", tau=1.0,
              trace="full", sigma=1.0, lr=0.1):
    return {
        "seed": seed,
        "hash_mode": hash_mode,
        "trace": trace,
        "swarm": {"n": n, "b": b, "m": m},
        "objective": {"kind": "quadratic", "d": d, "noise": {"kind": "gaussian", "sigma": sigma}},
        "clip": {"mode": "fixed", "tau": tau} if tau != "inf" else {"mode": "infinite"},
        "trainer": {"steps": steps, "lr": lr},
        "attack": [copy.deepcopy(a) for a in attack],
        "fault": [copy.deepcopy(f) for f in fault],
    }


def small_config(**kw) -> ExperimentConfig:
    return ExperimentConfig(small_raw(**kw))


def steps_until_banned(config: ExperimentConfig, peers, max_steps=500):
    """Step the engine until every peer in ``peers`` is banned; returns the step count or None."""
    objective, engine, x = build_engine(config)
    lr = float(config.raw["trainer"]["lr"])
    for k in range(max_steps):
        report = engine.step(k, x)
        x = x - lr * report.update
        if all(engine.ledger.is_banned(p) for p in peers):
            return k + 1, engine
    return None, engine


# (criterion number, line) pairs filled by test_acceptance, printed at session end
ACCEPTANCE_LINES: list = []


class Criterion:
    """Collects the checks of one acceptance criterion and reports PASS/FAIL once."""

    def __init__(self, number: int, title: str, budget_s: float):
        self.number, self.title, self.budget = number, title, budget_s
        self.failures: list = []
        self.measured: list = []

    def check(self, ok, what: str):
        if not ok:
            self.failures.append(what)

    def note(self, text: str):
        self.measured.append(text)

    def __enter__(self):
        import time
        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        import time
        elapsed = time.perf_counter() - self._t0
        if exc is not None:
            self.failures.append(f"{exc_type.__name__}: {exc}")
        if elapsed > self.budget:
            self.failures.append(f"runtime {elapsed:.1f}s over budget {self.budget:.0f}s")
        status = "FAIL" if self.failures else "PASS"
        line = (f"[{status}] criterion {self.number:2d} {self.title}: {'; '.join(self.measured)} "
                f"({elapsed:.1f}s of {self.budget:.0f}s)")
        if self.failures:
            line += " | " + "; ".join(self.failures)
        ACCEPTANCE_LINES.append((self.number, line))
        print(line)
        if exc is None and self.failures:
            raise AssertionError("; ".join(self.failures))
        return False
