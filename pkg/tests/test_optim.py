import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from btard.optim import (
    GaussianNoise,
    HeavyTailNoise,
    LogisticRegression,
    NonConvex,
    Projection,
    Quadratic,
    Quartic,
    Trajectory,
    btard_clipped_sgd,
    btard_sgd,
    clip_by_parts,
    clip_gradient_part,
    clip_level,
    compute_gradient,
    heavy_tail_samples,
    make_noise,
    make_objective,
    part_clip_level,
    reference_sgd,
    restart_count,
    restart_schedule,
    restarted,
    serial_sgd,
    sgd_stepsize,
)
from btard.protocol import BtardEngine, ProtocolConfig
from btard.robustagg import ClipConfig
from btard.vecmath import PartitionLayout, SeededStream


class TestObjectives:
    def test_identity_quadratic(self):
        q = Quadratic(np.ones(1), np.zeros(1), noise={"kind": "gaussian", "sigma": 0.0})
        np.testing.assert_array_equal(compute_gradient(q, [3.0], b"s"), [3.0])
        assert q.value([3.0]) == 4.5

    def test_deterministic(self):
        q = make_objective({"kind": "quadratic"}, 16, seed=3)
        x = np.linspace(-1, 1, 16)
        assert compute_gradient(q, x, b"xi").tobytes() == compute_gradient(q, x, b"xi").tobytes()
        assert compute_gradient(q, x, b"xi").tobytes() != compute_gradient(q, x, b"xj").tobytes()

    def test_unbiased(self):
        sigma, d, N = 1.0, 4, 100_000
        q = Quadratic(np.ones(d), np.zeros(d), noise={"kind": "gaussian", "sigma": sigma})
        x = np.array([1.0, -2.0, 0.5, 3.0])
        mean = np.zeros(d)
        for i in range(N):
            mean += q.stochastic_grad(x, i)
        mean /= N
        # each coordinate has std sigma/sqrt(d)
        assert np.all(np.abs(mean - q.grad(x)) <= 4 * sigma / math.sqrt(d) / math.sqrt(N))

    def test_variance_scaling(self):
        d, sigma = 256, 2.0
        noise = GaussianNoise(sigma)
        samples = np.vstack([noise.sample(SeededStream(i), d) for i in range(4000)])
        for s in (64, 128, 256):
            var = float(np.mean(np.sum(samples[:, :s] ** 2, axis=1)))
            assert abs(var - s * sigma ** 2 / d) <= 0.05 * s * sigma ** 2 / d

    def test_dense_and_diagonal_agree(self):
        a = np.array([1.0, 2.0, 5.0])
        xs = np.array([1.0, -1.0, 0.0])
        x = np.array([0.3, 0.2, -4.0])
        np.testing.assert_allclose(Quadratic(a, xs).grad(x), Quadratic(np.diag(a), xs).grad(x))
        with pytest.raises(ValueError):
            Quadratic(np.array([1.0, -1.0, 1.0]), xs)
        with pytest.raises(ValueError):
            Quadratic(np.array([[1.0, 2.0], [0.0, 1.0]]), xs[:2])

    @pytest.mark.parametrize("obj", [
        NonConvex(np.array([0.5, -1.0]), 0.2),
        Quartic(np.array([0.5, -1.0])),
        Quadratic(np.array([1.0, 3.0]), np.array([0.5, -1.0])),
    ])
    def test_gradient_matches_finite_difference(self, obj):
        x = np.array([0.1, 0.7])
        h = 1e-6
        fd = [(obj.value(x + h * e) - obj.value(x - h * e)) / (2 * h) for e in np.eye(2)]
        np.testing.assert_allclose(obj.grad(x), fd, rtol=1e-5, atol=1e-7)
        assert obj.gap(obj.x_star) == pytest.approx(0.0, abs=1e-15)

    def test_wrong_objective_differs(self):
        q = make_objective({"kind": "quadratic"}, 8, seed=1)
        x = np.zeros(8)
        assert not np.allclose(q.grad(x), q.wrong().grad(x))

    def test_logistic(self):
        lr = LogisticRegression.synthetic(128, 5, seed=2, batch=16)
        g = lr.grad(lr.x_star)
        assert np.linalg.norm(g) < 1e-5
        h = 1e-6
        x = np.full(5, 0.3)
        fd = [(lr.value(x + h * e) - lr.value(x - h * e)) / (2 * h) for e in np.eye(5)]
        np.testing.assert_allclose(lr.grad(x), fd, rtol=1e-5, atol=1e-8)
        a = lr.stochastic_grad(x, b"q")
        np.testing.assert_array_equal(a, lr.stochastic_grad(x, b"q"))

    def test_make_objective_errors(self):
        with pytest.raises(ValueError):
            make_objective({"kind": "banana"}, 4)
        with pytest.raises(ValueError):
            make_noise({"kind": "cauchy"})


class TestHeavyTail:
    def test_alpha_range(self):
        with pytest.raises(ValueError):
            HeavyTailNoise(alpha=1.0)
        with pytest.raises(ValueError):
            HeavyTailNoise(alpha=1.5, tail=1.4)
        assert HeavyTailNoise(1.5).tail_index == pytest.approx(1.8)

    def test_alpha_moment_bounded(self):
        x = heavy_tail_samples(SeededStream(0), 1_000_000, 1.5, 1.0, 1.8)
        assert np.mean(np.abs(x) ** 1.5) <= 1.0 * 1.1

    def test_second_moment_grows(self):
        small, large = [], []
        for s in range(20):
            x = heavy_tail_samples(SeededStream(s), 1_000_000, 1.5, 1.0, 1.8)
            small.append(np.mean(x[:100] ** 2))
            large.append(np.mean(x ** 2))
        assert np.median(large) > 1.5 * np.median(small)

    def test_vector_alpha_moment(self):
        noise = HeavyTailNoise(1.5, G=2.0)
        d = 16
        vals = [np.linalg.norm(noise.sample(SeededStream(i), d)) ** 1.5 for i in range(20_000)]
        assert np.mean(vals) <= 2.0 ** 1.5 * 1.1


class TestClipping:
    def test_scaling(self):
        np.testing.assert_allclose(clip_gradient_part(np.array([0.0, 3.0, 4.0]), 2.0), [0.0, 1.2, 1.6])

    def test_no_clip_branch(self):
        g = np.array([0.3, 0.4])
        np.testing.assert_array_equal(clip_gradient_part(g, 1.0), g)

    def test_zero(self):
        np.testing.assert_array_equal(clip_gradient_part(np.zeros(3), 1.0), np.zeros(3))
        with pytest.raises(ValueError):
            clip_gradient_part(np.ones(2), 0.0)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=40), st.floats(0.01, 10))
    def test_parts_bounded(self, xs, lam):
        g = np.array(xs)
        lay = PartitionLayout(len(xs), 4)
        out = clip_by_parts(g, lay, lam)
        for j in range(4):
            assert np.linalg.norm(out[lay.bounds(j)]) <= lam * (1 + 1e-12)

    def test_projection(self):
        p = Projection(1.0, np.array([1.0, 0.0]))
        np.testing.assert_allclose(p(np.array([4.0, 0.0])), [2.0, 0.0])
        np.testing.assert_array_equal(Projection()(np.array([9.0])), [9.0])


class TestPresets:
    def test_sgd_stepsize(self):
        assert sgd_stepsize(1, 1, 16, 1, 4096) == 0.0625
        assert sgd_stepsize(1, 1, 16, 0, 4096) == 0.25

    def test_clip_level(self):
        assert clip_level(1, 1024, 2) == 32.0
        assert part_clip_level(32.0, 16) == 8.0

    def test_restart_count(self):
        assert restart_count(1.0, 4.0, 1.0) == 3

    def test_restart_schedule_grows(self):
        kw = dict(L=1.0, mu=0.5, sigma=1.0, R0=4.0, n=16, m=1, delta=0.0)
        k1, g1 = restart_schedule(1, **kw)
        k2, g2 = restart_schedule(2, **kw)
        assert k2 >= k1 and g2 <= g1 <= 0.25


def small_engine(n=4, d=8, clip=None, grad_clip=None, seed=0):
    q = make_objective({"kind": "quadratic", "eigen_range": [0.5, 1.0]}, d, seed)
    cfg = ProtocolConfig(m=1, clip=clip or ClipConfig.infinite(), hash_mode="fast-sim", grad_clip=grad_clip)
    return q, BtardEngine(q, n, cfg, seed=seed)


class TestLoops:
    def test_honest_path_matches_reference(self):
        q, engine = small_engine(n=6, d=24)
        x0 = np.ones(24)
        traj = btard_sgd(engine, x0, 25, 0.2)
        ref = reference_sgd(q, x0, 0.2, [[r.seeds[p] for p in r.participants] for r in traj.reports])
        assert traj.x.tobytes() == ref[-1].tobytes()
        assert all(not r.bans for r in traj.reports)

    def test_average_and_snapshots(self):
        q, engine = small_engine()
        xs = []
        traj = btard_sgd(engine, np.ones(8), 10, 0.1, snapshot_every=5, callback=lambda k, x, r: xs.append(x))
        np.testing.assert_allclose(traj.average, np.mean(xs, axis=0))
        assert sorted(traj.snapshots) == [0, 5]
        assert isinstance(traj, Trajectory) and traj.steps == 10

    def test_clipped_requires_bounds(self):
        q, engine = small_engine()
        with pytest.raises(ValueError):
            btard_clipped_sgd(engine, np.ones(8), 2, 0.1, projection=Projection())
        q, engine = small_engine(grad_clip=1.0)
        traj = btard_clipped_sgd(engine, np.ones(8), 3, 0.1, projection=Projection(5.0, q.x_star))
        assert np.linalg.norm(traj.x - q.x_star) <= 5.0 + 1e-12

    def test_clipped_matches_reference(self):
        q, engine = small_engine(grad_clip=0.5)
        proj = Projection(20.0, q.x_star)
        traj = btard_clipped_sgd(engine, np.ones(8), 10, 0.1, projection=proj)
        ref = reference_sgd(q, np.ones(8), 0.1, [[r.seeds[p] for p in r.participants] for r in traj.reports],
                            grad_clip=0.5, projection=proj)
        assert traj.x.tobytes() == ref[-1].tobytes()

    def test_restarted_single_stage(self):
        q, engine = small_engine()

        def stage(x, K, lr, start):
            return btard_sgd(engine, x, K, lr, start_step=start)

        pts = restarted(stage, np.ones(8), [(12, 0.1)])
        q2, engine2 = small_engine()
        direct = btard_sgd(engine2, np.ones(8), 12, 0.1)
        assert pts[0].tobytes() == direct.average.tobytes()

    def test_serial_sgd_converges(self):
        q = make_objective({"kind": "quadratic", "noise": {"kind": "gaussian", "sigma": 0.1}}, 8, 0)
        x, rec = serial_sgd(q, np.ones(8) * 5, 0.5, 200, workers=4, record_every=50)
        assert q.gap(x) < 1e-2 * q.gap(rec[0])
        assert sorted(rec) == [0, 50, 100, 150, 200]

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_serial_sgd_stops_on_overflow(self):
        q = Quadratic(np.ones(2), np.zeros(2), noise={"kind": "gaussian", "sigma": 0.0})
        x, rec = serial_sgd(q, np.ones(2), 1e155, 50)
        assert not np.all(np.isfinite(x))
        assert max(rec) < 50 or not np.all(np.isfinite(rec[max(rec)]))
