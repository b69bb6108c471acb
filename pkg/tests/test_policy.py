import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import gradcheck
from conftest import foreign_checkpoint
from negplan.csp import build_record
from negplan.policy import (
    AGENT_SLOTS,
    ANALYSIS_SLOT,
    DIM,
    GROUPS,
    N_SLOTS,
    PARAM_SHAPES,
    PolicyParams,
    ShapeMismatch,
    act,
    backward,
    dumps_params,
    encode_features,
    forward,
    grad,
    loads_params,
    perturb,
    plan,
    pool,
    update,
)
from negplan.scenario import generate_scene


class TestEncoder:
    def test_deterministic(self, lead_brake_scene):
        a = encode_features(lead_brake_scene)
        assert np.array_equal(a, encode_features(lead_brake_scene))
        assert a.shape == (N_SLOTS, DIM) and np.all(np.isfinite(a))

    def test_no_agents_pads_zero(self):
        scene = generate_scene("free_road", 0)
        assert not scene.agents
        f = encode_features(scene)
        assert not np.any(f[list(AGENT_SLOTS)])
        assert not np.any(f[ANALYSIS_SLOT])

    def test_analysis_only_touches_its_slot(self, lead_brake_scene):
        rec = build_record(lead_brake_scene)
        plain = encode_features(lead_brake_scene)
        cond = encode_features(lead_brake_scene, rec.analysis, rec.tau_neg)
        changed = np.flatnonzero(np.any(plain != cond, axis=1))
        assert changed.tolist() == [ANALYSIS_SLOT]


class TestPool:
    def test_uniform_scores_give_mean(self):
        f = np.random.default_rng(0).normal(size=(N_SLOTS, DIM))
        assert np.allclose(pool(f, PolicyParams.zeros()), f.mean(axis=0), atol=1e-12)

    def test_saturation(self):
        f = np.zeros((N_SLOTS, DIM))
        f[3, 0] = 1.0
        f[3, 5] = 2.0
        p = PolicyParams.zeros().map(lambda n, a: a + (np.eye(DIM)[0] * 30.0 if n == "pool_w" else 0.0))
        assert np.allclose(pool(f, p), f[3], atol=1e-9)

    def test_zero_features(self):
        assert not np.any(pool(np.zeros((N_SLOTS, DIM)), PolicyParams.init(1)))

    @given(st.integers(0, 1000), st.integers(0, N_SLOTS - 1), st.integers(0, N_SLOTS - 1))
    def test_permutation_invariant(self, seed, i, j):
        rng = np.random.default_rng(seed)
        f = rng.normal(size=(N_SLOTS, DIM))
        p = gradcheck.random_params(rng)
        perm = np.arange(N_SLOTS)
        perm[[i, j]] = perm[[j, i]]
        assert np.allclose(pool(f[perm], p), pool(f, p), atol=1e-12)


class TestPerturb:
    def test_zero_sigma_identity(self):
        v = np.arange(DIM, dtype=float)
        assert np.array_equal(perturb(v, 0.0, None), v)

    def test_seeded(self):
        v = np.zeros(DIM)
        a = perturb(v, 0.1, np.random.default_rng(5))
        assert np.array_equal(a, perturb(v, 0.1, np.random.default_rng(5)))

    def test_sample_std(self):
        draws = perturb(np.zeros((100_000, DIM)), 0.1, np.random.default_rng(0))
        std = draws.std(axis=0)
        assert np.all((std >= 0.097) & (std <= 0.103))

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            perturb(np.zeros(DIM), -0.1, np.random.default_rng(0))


class TestAct:
    def test_zero_params_at_origin(self):
        out = act(np.ones(DIM), PolicyParams.zeros())
        assert not np.any(out.trajectory.xy)
        assert np.allclose(out.trajectory.t, np.arange(1, 9) * 0.5)

    def test_pure(self):
        p = PolicyParams.init(3)
        v = np.random.default_rng(1).normal(size=DIM)
        a, b = act(v, p), act(v, p)
        assert np.array_equal(a.trajectory.xy, b.trajectory.xy) and np.array_equal(a.meta_logits, b.meta_logits)

    def test_cumulative_steps(self):
        b3 = np.tile([1.0, 0.0], 8)
        p = PolicyParams.zeros().map(lambda n, a: b3 if n == "b3" else a)
        xy = act(np.zeros(DIM), p).trajectory.xy
        assert np.array_equal(xy[:, 0], np.arange(1, 9)) and not np.any(xy[:, 1])

    def test_plan_is_pure(self, lead_brake_scene):
        p = PolicyParams.init(2)
        assert plan(p, lead_brake_scene) == plan(p, lead_brake_scene)


class TestGrad:
    def test_constant_loss(self):
        rng = np.random.default_rng(0)
        _, g = grad(lambda wp, lg: (3.0, None, None), PolicyParams.init(0), gradcheck.random_inputs(rng))
        assert g.norm() == 0.0

    def test_last_layer_closed_form(self):
        rng = np.random.default_rng(4)
        p = gradcheck.random_params(rng)
        xa, xb, noise = gradcheck.random_inputs(rng, batch=1)
        y = rng.normal(size=16)
        _, _, cache = forward(p, xa, xb, noise)
        out = cache.h2[0] @ p["W3"].T + p["b3"]
        d_out = 2.0 * (out - y)
        # loss on per-step outputs; map to waypoint derivatives (waypoint k sums steps <= k)
        d_steps = d_out.reshape(8, 2)
        d_wp = d_steps - np.vstack([d_steps[1:], np.zeros((1, 2))])
        g = backward(p, cache, d_wp[None], None)
        assert np.allclose(g["W3"], np.outer(d_out, cache.h2[0]), atol=1e-12)
        assert np.allclose(g["b3"], d_out, atol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        p = gradcheck.random_params(rng)
        inputs = gradcheck.random_inputs(rng)
        target = rng.normal(0.0, 3.0, (3, 8, 2))
        classes = np.stack([[rng.integers(3), rng.integers(5), rng.integers(3), rng.integers(5)] for _ in range(3)])
        assert gradcheck.check(gradcheck.traj_loss_fn(target), p, inputs, rng) <= 1e-4
        assert gradcheck.check(gradcheck.text_loss_fn(classes), p, inputs, rng) <= 1e-4


class TestUpdate:
    def test_zero_grad(self):
        p = PolicyParams.init(0)
        assert update(p, PolicyParams.zeros(), 0.1) == p

    def test_scalar_step(self):
        p = PolicyParams.zeros().map(lambda n, a: a + 0.5 if n == "pool_b" else a)
        g = PolicyParams.zeros().map(lambda n, a: a + 1.0 if n == "pool_b" else a)
        assert update(p, g, 0.1)["pool_b"][0] == pytest.approx(0.4, abs=1e-15)

    def test_sequential_steps_sum(self):
        p = PolicyParams.init(0)
        g1, g2 = PolicyParams.init(1), PolicyParams.init(2)
        two = update(update(p, g1, 0.01), g2, 0.01)
        one = update(p, g1 + g2, 0.01)
        assert all(np.allclose(two[n], one[n], atol=1e-14) for n in PARAM_SHAPES)

    def test_group_rates_and_freeze(self):
        p = PolicyParams.zeros()
        g = PolicyParams.zeros().map(lambda n, a: a + 1.0)
        q = update(p, g, {"pooling": 0.1, "action": 0.2, "meta": 0.3}, groups=("pooling", "action"))
        assert np.all(q["pool_w"] == -0.1) and np.all(q["W2"] == -0.2)
        assert not np.any(q["M"]) and not np.any(q["c"])
        assert set(GROUPS) == {"pooling", "action", "meta"}


class TestCheckpoint:
    def test_bit_exact_round_trip(self):
        p = gradcheck.random_params(np.random.default_rng(9))
        data = dumps_params(p, "sft1")
        back, stage = loads_params(data)
        assert stage == "sft1" and back == p
        assert dumps_params(back, "sft1") == data

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            loads_params(b"NOTAPLAN" + dumps_params(PolicyParams.zeros())[8:])

    def test_truncated(self):
        data = dumps_params(PolicyParams.zeros())
        with pytest.raises(ValueError):
            loads_params(data[:-8])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            loads_params(foreign_checkpoint())

    def test_unknown_stage(self):
        with pytest.raises(ValueError):
            dumps_params(PolicyParams.zeros(), "final")
