import math

import numpy as np
import pytest
from scipy import stats

from btard.adversary import (
    ATTACK_KINDS,
    AttackStrategy,
    ChecksumPlan,
    Coordinator,
    alie_z,
    forge_aggregate,
    forge_gradient,
    shared_direction,
    slander,
)

from helpers import small_config, steps_until_banned


class TestStrategy:
    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            AttackStrategy("teleport")

    def test_periodic_needs_inner(self):
        with pytest.raises(ValueError):
            AttackStrategy("periodic")
        with pytest.raises(ValueError):
            AttackStrategy("periodic", inner=AttackStrategy("sign_flip"), period=0)

    def test_bad_phase_and_lag(self):
        with pytest.raises(ValueError):
            AttackStrategy("silent_drop", phase="lunch")
        with pytest.raises(ValueError):
            AttackStrategy("delayed_gradient", lag=0)

    def test_window(self):
        s = AttackStrategy("sign_flip", start_step=5, stop_step=8)
        assert [s.active_at(k) is not None for k in range(4, 10)] == [False, True, True, True, False, False]

    def test_periodic_steps(self):
        s = AttackStrategy("periodic", start_step=3, period=4, inner=AttackStrategy("sign_flip"))
        hits = [k for k in range(30) if s.active_at(k) is not None]
        assert hits == list(range(3, 30, 4))
        assert s.active_at(7).kind == "sign_flip"


class TestForgeGradient:
    def test_sign_flip(self):
        out = forge_gradient(AttackStrategy("sign_flip", scale=1000), [], np.array([1.0, -2.0]), 0)
        np.testing.assert_array_equal(out, [-1000.0, 2000.0])

    def test_ipm(self):
        out = forge_gradient(AttackStrategy("ipm", scale=0.1), [[1.0, 3.0], [3.0, 5.0]], np.zeros(2), 0)
        np.testing.assert_allclose(out, [-0.2, -0.4])

    def test_honest_identity(self):
        g = np.array([1.0, 2.0])
        out = forge_gradient(AttackStrategy(), [], g, 0)
        np.testing.assert_array_equal(out, g)
        assert out is not g

    def test_random_direction_shared(self):
        s = AttackStrategy("random_direction", scale=1000)
        a = forge_gradient(s, [], np.zeros(16), 4, attack_seed=b"k")
        b = forge_gradient(s, [], np.ones(16), 4, attack_seed=b"k")
        np.testing.assert_array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1000)
        assert not np.array_equal(a, forge_gradient(s, [], np.zeros(16), 5, attack_seed=b"k"))

    def test_wrong_objective(self):
        wrong = np.array([5.0, 6.0])
        out = forge_gradient(AttackStrategy("wrong_objective"), [], np.zeros(2), 0, wrong_gradient=wrong)
        np.testing.assert_array_equal(out, wrong)
        with pytest.raises(ValueError):
            forge_gradient(AttackStrategy("wrong_objective"), [], np.zeros(2), 0)

    def test_delayed(self):
        s = AttackStrategy("delayed_gradient", lag=2)
        hist = {3: np.array([7.0])}
        np.testing.assert_array_equal(forge_gradient(s, [], np.array([1.0]), 5, history=hist), [7.0])
        # nothing old enough yet: honest
        np.testing.assert_array_equal(forge_gradient(s, [], np.array([1.0]), 1, history=hist), [1.0])

    def test_alie_stays_in_honest_range(self):
        rng = np.random.default_rng(0)
        honest = rng.standard_normal((9, 20))
        out = forge_gradient(AttackStrategy("alie"), honest, honest[0], 0, n_byzantine=7, n_total=16)
        assert np.all(out >= honest.min(axis=0) - 1e-12)
        assert np.all(out <= honest.mean(axis=0) + 1e-12)

    def test_alie_z(self):
        # n=16, b=7: s = floor(9) - 7 = 2, quantile (16-2)/16
        assert alie_z(16, 7) == pytest.approx(stats.norm.ppf(14 / 16))

    def test_inactive_before_start(self):
        g = np.array([1.0])
        np.testing.assert_array_equal(forge_gradient(AttackStrategy("sign_flip", start_step=9), [], g, 3), g)


class TestForgeAggregate:
    def test_shift_size_and_plan(self):
        v = np.array([3.0, 4.0])
        forged, plan = forge_aggregate(AttackStrategy("agg_shift", shift=2.0), v, 1, delta_max=0.5,
                                       colluders=(1, 5))
        assert np.linalg.norm(forged - v) == pytest.approx(1.0)
        assert plan.partition == 1 and plan.colluders == (1, 5)

    def test_zero_output_uses_shared_direction(self):
        forged, _ = forge_aggregate(AttackStrategy("agg_shift", shift=1.0), np.zeros(4), 0, delta_max=2.0)
        assert np.linalg.norm(forged) == pytest.approx(2.0)

    def test_checksum_plan_balances(self):
        plan = ChecksumPlan(0, (2, 3))
        true = {0: 0.4, 1: -0.1, 2: 0.7, 3: 0.2}
        over = plan.overrides(None, true)
        total = sum(over.get(p, v) for p, v in true.items())
        assert abs(total) < 1e-15
        assert ChecksumPlan(0, (2,), active=False).overrides(None, true) == {}

    def test_slander_payload(self):
        assert slander(1, 4, 7) == (4, 7, "slander")


class TestCoordinator:
    def test_history_pruned(self):
        c = Coordinator({3: AttackStrategy("delayed_gradient", lag=1)})
        for k in range(10):
            c.gradient(3, k, np.array([float(k)]), [np.zeros(1)])
        assert max(c.history[3]) == 9 and min(c.history[3]) >= 9 - 3
        out = c.gradient(3, 10, np.array([10.0]), [np.zeros(1)])
        np.testing.assert_array_equal(out, [9.0])

    def test_byzantine_set(self):
        c = Coordinator({1: AttackStrategy(), 4: AttackStrategy("ipm")})
        assert c.byzantine == {1, 4}
        assert c.active(1, 0) is None and c.active(4, 0).kind == "ipm"


ENGINE_ATTACKS = [
    {"kind": "sign_flip"},
    {"kind": "random_direction"},
    {"kind": "wrong_objective"},
    {"kind": "delayed_gradient"},
    {"kind": "ipm", "scale": 0.6},
    {"kind": "alie"},
    {"kind": "agg_shift", "shift": 0.5},
    {"kind": "agg_shift", "shift": 0.5, "cover": False},
    {"kind": "slander"},
    {"kind": "silent_drop", "phase": "part"},
    {"kind": "silent_drop", "phase": "reveal"},
    {"kind": "periodic", "period": 3, "inner": {"kind": "sign_flip"}},
]


class TestEveryStrategyGetsBanned:
    def test_kinds_covered(self):
        kinds = {a["kind"] for a in ENGINE_ATTACKS}
        assert kinds == set(ATTACK_KINDS) - {"honest"}

    @pytest.mark.parametrize("attack", ENGINE_ATTACKS, ids=lambda a: "-".join(str(v) for v in a.values()))
    def test_hundred_trials(self, attack):
        for seed in range(100):
            cfg = small_config(n=4, b=1, m=1, d=8, seed=seed, attack=[attack], trace="light")
            steps, engine = steps_until_banned(cfg, [3], max_steps=400)
            assert steps is not None, f"seed {seed}: attacker survived"
            honest_lost = [r.peer for r in engine.ledger.entries if r.peer != 3]
            assert len(honest_lost) <= 1
