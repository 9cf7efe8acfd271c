import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from btard.cryptokit import Hasher, KeyPair, Signer
from btard.protocol import (
    BanLedger,
    BanRecord,
    Cause,
    Kind,
    ProtocolConfig,
    authentic,
    collect_evidence,
    derive_bans,
    elect_validators,
    expected_metadata,
    make_message,
    next_seeds,
    initial_seeds,
)
from btard.simnet import AllBanned, ConfigError, run

from helpers import small_config

BYZ = {5, 6, 7}


def ban_counter(result):
    return Counter((b["peer"] in result.engine.byzantine, b["cause"]) for b in result.summary["bans"])


class TestMetadata:
    def test_clipped_checksum(self):
        norm, s, flag = expected_metadata(np.array([3.0, 4.0]), np.zeros(2), np.array([1.0, 0.0]), 1.0, 1.0)
        assert norm == 5.0
        assert s == pytest.approx(0.6, abs=1e-15)
        assert flag is True

    def test_unclipped(self):
        norm, s, flag = expected_metadata(np.array([0.3, 0.4]), np.zeros(2), np.array([0.0, 1.0]), 1.0, 1.0)
        assert (norm, flag) == (0.5, False)
        assert s == pytest.approx(0.4)

    def test_infinite_tau(self):
        _, s, _ = expected_metadata(np.array([30.0, 40.0]), np.zeros(2), np.array([1.0, 0.0]), math.inf, math.inf)
        assert s == 30.0

    def test_delta_max_noise(self):
        cfg = ProtocolConfig(m=2, sigma=1.0)
        assert cfg.resolve_delta_max(16 - 2, None) == pytest.approx((1 + math.sqrt(3)) * math.sqrt(2) / math.sqrt(14))
        assert cfg.resolve_delta_max(14, None) == pytest.approx(1.0325, abs=5e-4)  # quoted to four digits: 1.03262...

    def test_delta_max_policies(self):
        assert ProtocolConfig(delta_max="off").resolve_delta_max(8, None) == math.inf
        assert ProtocolConfig(delta_max=2.5).resolve_delta_max(8, None) == 2.5
        assert ProtocolConfig(delta_max="clipped", grad_clip=3.0).resolve_delta_max(8, 0.5) == 1.0
        with pytest.raises(ConfigError):
            ProtocolConfig(delta_max="clipped")
        with pytest.raises(ConfigError):
            ProtocolConfig(delta_max="nope")


class TestMessages:
    def test_authentic_and_tampered(self):
        kp = KeyPair.generate(b"p", "crypto")
        h = Hasher("crypto")
        msg = make_message(3, 1, Kind.CHECKSUM, (0.5, None), Signer(kp), h)
        assert authentic(msg, kp.public, h)
        forged = type(msg)(msg.step, msg.sender, msg.kind, (0.6, None), msg.digest, msg.signature, msg.size)
        assert not authentic(forged, kp.public, h)

    def test_slots(self):
        kp = KeyPair.generate(b"p", "fast-sim")
        h = Hasher("fast-sim")
        a = make_message(0, 1, Kind.ACCUSE, (2, 0, "sum"), Signer(kp), h)
        b = make_message(0, 1, Kind.ACCUSE, (3, 0, "sum"), Signer(kp), h)
        assert a.slot() != b.slot()
        c = make_message(0, 1, Kind.CHECKSUM, (1.0,), Signer(kp), h)
        d = make_message(0, 1, Kind.CHECKSUM, (2.0,), Signer(kp), h)
        assert c.slot() == d.slot()


class TestLedger:
    def test_first_ban_wins(self):
        led = BanLedger()
        assert led.ban(BanRecord(3, 1, Cause.GRADIENT_FRAUD))
        assert not led.ban(BanRecord(3, 2, Cause.COVER_UP))
        assert led.is_banned(3) and len(led) == 1
        assert led.counts()[Cause.GRADIENT_FRAUD] == 1

    def test_bytes_ignore_detail(self):
        a, b = BanLedger(), BanLedger()
        a.ban(BanRecord(1, 0, Cause.FALSE_ACCUSATION, "x"))
        b.ban(BanRecord(1, 0, Cause.FALSE_ACCUSATION, "y"))
        assert a.to_bytes() == b.to_bytes()
        b.ban(BanRecord(2, 0, Cause.FALSE_ACCUSATION))
        assert a.to_bytes() != b.to_bytes()


class TestElection:
    def test_deterministic_and_distinct(self):
        beacon = b"\x42" * 32
        c1, t1, m = elect_validators(beacon, range(16), 2)
        assert (c1, t1, m) == elect_validators(beacon, range(16), 2)
        assert len(set(c1 + t1)) == 4 and m == 2

    def test_reduced_when_few_peers(self):
        c, t, m = elect_validators(b"\x00" * 32, [4, 9, 11], 2)
        assert m == 1 and len(c) == len(t) == 1
        assert elect_validators(b"\x00" * 32, [4], 1) == ((), (), 0)

    def test_uniform_frequency(self):
        counts = Counter()
        for i in range(4000):
            c, t, _ = elect_validators(i.to_bytes(32, "little"), range(16), 2)
            counts.update(c)
        obs = [counts[p] for p in range(16)]
        assert stats.chisquare(obs).pvalue > 0.001

    def test_seeds(self):
        assert next_seeds(b"a", [1, 2]) != next_seeds(b"b", [1, 2])
        s = initial_seeds(0, range(3))
        assert len(set(s.values())) == 3


class TestHonestRun:
    def test_no_bans_no_triggers(self):
        r = run(small_config(n=8, d=32, steps=20, sigma=0.0, tau="inf"))
        assert r.summary["bans"] == []
        assert r.summary["check_averaging_triggers"] == 0

    def test_two_barriers_per_step(self):
        r = run(small_config(n=6, d=24, steps=5))
        import json
        events = [json.loads(line) for line in r.trace.lines]
        per_step = Counter(e["step"] for e in events if e["kind"] == "Barrier")
        assert set(per_step.values()) == {2}
        names = [e["name"] for e in events if e["kind"] == "Barrier"][:2]
        assert names == ["pre-aggregation", "verification"]

    def test_slow_clip_solve_does_not_ban_honest_owners(self):
        # heavy-tailed parts with a tiny radius: the damped solve stops at its cap
        from btard.config import ExperimentConfig
        from helpers import small_raw
        raw = small_raw(n=6, d=12, steps=3, tau=0.01)
        raw["objective"]["noise"] = {"kind": "heavy_tail", "alpha": 1.5, "G": 100.0}
        raw["clip"]["max_iters"] = 50
        r = run(ExperimentConfig(raw))
        assert r.summary["bans"] == []

    def test_every_honest_broadcast_reaches_everyone(self):
        r = run(small_config(n=6, d=24, steps=3))
        net = r.engine.network
        for p in net.active:
            assert len(net.view(p)) == len(net.log)


SCENARIOS = {
    # attack list, b, expected Counter of (is_byzantine, cause)
    "silent part to everyone": ([{"kind": "silent_drop", "phase": "part"}], 1,
                                {(True, Cause.MUTUAL_ELIMINATE): 1, (False, Cause.MUTUAL_ELIMINATE): 1}),
    "colluding silent parts": ([{"kind": "silent_drop", "phase": "part"}], 3,
                               {(True, Cause.PROTOCOL_VIOLATION): 3}),
    "silent part to one victim": ([{"kind": "silent_drop", "phase": "part", "victim": 0}], 3,
                                  {(True, Cause.MUTUAL_ELIMINATE): 1, (False, Cause.MUTUAL_ELIMINATE): 1}),
    "silent aggregate": ([{"kind": "silent_drop", "phase": "agg_part"}], 3,
                         {(True, Cause.MUTUAL_ELIMINATE): 3, (False, Cause.MUTUAL_ELIMINATE): 3}),
    "silent commitment": ([{"kind": "silent_drop", "phase": "part_hash"}], 3, {(True, Cause.PROTOCOL_VIOLATION): 3}),
    "silent reveal": ([{"kind": "silent_drop", "phase": "reveal"}], 3, {(True, Cause.PROTOCOL_VIOLATION): 3}),
    "silent checksum": ([{"kind": "silent_drop", "phase": "checksum"}], 3, {(True, Cause.PROTOCOL_VIOLATION): 3}),
    "covered aggregate shift": ([{"kind": "agg_shift", "shift": 0.5}], 3,
                                {(True, Cause.PROTOCOL_VIOLATION): 1, (True, Cause.COVER_UP): 2}),
    "uncovered aggregate shift": ([{"kind": "agg_shift", "shift": 0.5, "cover": False}], 3,
                                  {(True, Cause.AGGREGATION_FRAUD): 3}),
    "slander": ([{"kind": "slander"}], 3, {(True, Cause.FALSE_ACCUSATION): 3}),
    "slander by eliminate": ([{"kind": "slander", "phase": "eliminate"}], 3,
                             {(True, Cause.MUTUAL_ELIMINATE): 3, (False, Cause.MUTUAL_ELIMINATE): 3}),
    "sign flip": ([{"kind": "sign_flip"}], 3, {(True, Cause.GRADIENT_FRAUD): 3}),
    "alie": ([{"kind": "alie"}], 3, {(True, Cause.GRADIENT_FRAUD): 3}),
}


class TestScenarios:
    @pytest.mark.parametrize("name", list(SCENARIOS))
    def test_outcome(self, name):
        attack, b, expected = SCENARIOS[name]
        r = run(small_config(n=8, b=b, m=1, d=32, steps=40, attack=attack))
        assert dict(ban_counter(r)) == expected
        # a single victim can only be traded once; every other scenario removes all attackers
        byz_expected = sum(c for (byz, _), c in expected.items() if byz)
        assert r.summary["all_byzantine_banned"] == (byz_expected == b)
        assert all(r.summary["bound_checks"].values())

    def test_big_shift_triggers_check_averaging(self):
        r = run(small_config(n=8, b=3, m=1, d=32, steps=20, attack=[{"kind": "agg_shift", "shift": 10.0}]))
        assert r.summary["check_averaging_triggers"] >= 1
        assert dict(ban_counter(r)) == {(True, Cause.AGGREGATION_FRAUD): 3}

    def test_honest_ledgers_identical(self):
        r = run(small_config(n=8, b=3, m=1, d=32, steps=40,
                             attack=[{"kind": "slander", "phase": "eliminate", "peers": [5]},
                                     {"kind": "sign_flip", "peers": [6]}, {"kind": "agg_shift", "peers": [7]}]))
        engine = r.engine
        live = [p for p in engine.peer_ledgers if not engine.ledger.is_banned(p)]
        assert live
        for p in live:
            assert engine.peer_ledgers[p].to_bytes() == engine.ledger.to_bytes()

    def test_validator_needed_for_gradient_fraud(self):
        r = run(small_config(n=8, b=3, m=0, d=32, steps=30, attack=[{"kind": "sign_flip"}]))
        assert r.summary["bans"] == []

    def test_all_banned_aborts(self):
        from btard.protocol import BtardEngine
        from btard.optim import make_objective
        from btard.adversary import AttackStrategy
        q = make_objective({"kind": "quadratic"}, 8, 0)
        engine = BtardEngine(q, 2, ProtocolConfig(m=0, hash_mode="fast-sim"),
                             byzantine={1: AttackStrategy("slander", phase="eliminate")})
        x = np.zeros(8)
        engine.step(0, x)
        with pytest.raises(AllBanned):
            engine.step(1, x)


@pytest.fixture(scope="module")
def adversarial_step():
    r = run(small_config(n=8, b=3, m=1, d=32, steps=4,
                         attack=[{"kind": "slander", "phase": "eliminate", "peers": [5]},
                                 {"kind": "agg_shift", "shift": 0.5, "cover": False, "peers": [6]},
                                 {"kind": "silent_drop", "phase": "checksum", "peers": [7]}]))
    return r


class TestEvidenceReplay:
    @given(st.randoms(use_true_random=False))
    def test_order_invariance(self, adversarial_step, rnd):
        engine = adversarial_step.engine
        k = max(engine.history)
        ev = engine.history[k]
        msgs = list(engine.network.log)
        agreed = dict(ev.aggregate)
        banned_before = {b.peer for b in engine.ledger.entries if b.step < k}
        base = derive_bans(collect_evidence(ev.ctx, msgs, agreed), engine.history, engine.oracle,
                           engine.public_keys, banned_before)
        rnd.shuffle(msgs)
        again = derive_bans(collect_evidence(ev.ctx, msgs, agreed), engine.history, engine.oracle,
                            engine.public_keys, banned_before)
        assert again == base

    def test_stale_accusation_bans_accuser(self, adversarial_step):
        engine = adversarial_step.engine
        k = max(engine.history)
        ev = engine.history[k]
        accuser = next(p for p in ev.ctx.active if p not in engine.byzantine)
        target = next(p for p in ev.ctx.active if p != accuser)
        stale = engine._msg(k, accuser, Kind.ACCUSE, (target, k - 3, "validation"))
        fresh = collect_evidence(ev.ctx, list(engine.network.log) + [stale], dict(ev.aggregate))
        bans = derive_bans(fresh, engine.history, engine.oracle, engine.public_keys, set(engine.ledger.banned))
        assert (accuser, Cause.PROTOCOL_VIOLATION) in [(b.peer, b.cause) for b in bans]

    def test_false_accusation_of_honest_peer(self, adversarial_step):
        engine = adversarial_step.engine
        k = max(engine.history)
        ev = engine.history[k]
        live = [p for p in ev.ctx.participants if not engine.ledger.is_banned(p)]
        accuser, target = live[0], live[1]
        msg = engine._msg(k, accuser, Kind.ACCUSE, (target, k, "validation"))
        fresh = collect_evidence(ev.ctx, list(engine.network.log) + [msg], dict(ev.aggregate))
        bans = derive_bans(fresh, engine.history, engine.oracle, engine.public_keys, set(engine.ledger.banned))
        assert [(b.peer, b.cause) for b in bans] == [(accuser, Cause.FALSE_ACCUSATION)]

    def test_contradiction_bans_sender(self, adversarial_step):
        engine = adversarial_step.engine
        k = max(engine.history)
        ev = engine.history[k]
        sender = next(p for p in ev.ctx.participants if not engine.ledger.is_banned(p))
        original = next(m for m in engine.network.log if m.sender == sender and m.kind == Kind.CHECKSUM)
        twin = engine._mutate(original)
        fresh = collect_evidence(ev.ctx, list(engine.network.log) + [twin], dict(ev.aggregate))
        assert sender in fresh.contradictions
        bans = derive_bans(fresh, engine.history, engine.oracle, engine.public_keys, set(engine.ledger.banned))
        assert bans[0].peer == sender and bans[0].cause == Cause.PROTOCOL_VIOLATION

    def test_malformed_broadcast(self, adversarial_step):
        engine = adversarial_step.engine
        k = max(engine.history)
        ev = engine.history[k]
        sender = next(p for p in ev.ctx.participants if not engine.ledger.is_banned(p))
        bad = engine._msg(k, sender, Kind.ACCUSE, ("nobody",))
        fresh = collect_evidence(ev.ctx, list(engine.network.log) + [bad], dict(ev.aggregate))
        assert sender in fresh.malformed
