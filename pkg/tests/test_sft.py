import dataclasses
import math

import numpy as np
import pytest

from negplan.csp import build_dataset
from negplan.policy import (
    ANALYSIS_SLOT,
    PolicyParams,
    dumps_params,
    forward,
    plan,
    scene_only,
    update,
    with_meta,
)
from negplan.scenario import DirectionDecision, DrivingCommand, SpeedDecision, generate_scene, mixed_suite
from negplan.sft import (
    ALPHA_MAX,
    ALPHA_MIN,
    SftConfig,
    balance_alpha,
    batch_gradients,
    joint_step,
    make_sample,
    mixed_batches,
    text_loss,
    train_stage1,
    train_stage2,
    traj_loss,
)

LINE = np.stack([np.arange(1, 9) * 5.0, np.zeros(8)], axis=1)


@pytest.fixture(scope="module")
def mixed():
    return build_dataset(mixed_suite(120, 0))


@pytest.fixture(scope="module")
def holdout():
    return build_dataset(mixed_suite(40, 100_000))


@pytest.fixture(scope="module")
def stage1(mixed):
    return train_stage1(mixed, PolicyParams.init(0), SftConfig())


def mean_traj_loss(params, records, analysis=False):
    return float(np.mean([
        traj_loss(plan(params, r.scene, r.analysis if analysis else None, r.tau_neg if analysis else None)[0],
                  r.tau_pos)[0]
        for r in records
    ]))


class TestLosses:
    def test_traj_examples(self):
        assert traj_loss(LINE, LINE)[0] == 0.0
        assert traj_loss(LINE + [1.0, 0.0], LINE)[0] == pytest.approx(1.0)
        off = LINE.copy()
        off[4] += [3.0, 4.0]
        assert traj_loss(off, LINE)[0] == pytest.approx(3.125)

    def test_traj_length_mismatch(self):
        with pytest.raises(ValueError):
            traj_loss(LINE[:7], LINE)

    def test_text_examples(self):
        target = (DrivingCommand(SpeedDecision.DECELERATE, DirectionDecision.TURN_LEFT),
                  DrivingCommand(SpeedDecision.MAINTAIN, DirectionDecision.KEEP_LANE))
        loss, g = text_loss(np.zeros(16), target)
        assert loss == pytest.approx(2 * math.log(3) + 2 * math.log(5), abs=1e-12)
        assert loss == pytest.approx(5.416, abs=1e-3)
        for grp in (slice(0, 3), slice(3, 8), slice(8, 11), slice(11, 16)):
            assert abs(g[grp].sum()) < 1e-12

    def test_text_saturation(self):
        idx = np.array([2, 4, 0, 1])
        logits = np.zeros(16)
        logits[[2, 3 + 4, 8 + 0, 11 + 1]] = 30.0
        assert text_loss(logits, idx)[0] < 1e-9


class TestAlpha:
    def test_equal_norms(self):
        g = PolicyParams.init(0)
        assert balance_alpha(g, g) == pytest.approx(1.0, abs=1e-9)

    def test_clipped(self):
        g = PolicyParams.init(0)
        assert balance_alpha(g.scaled(1e6), g) == ALPHA_MAX
        assert balance_alpha(g.scaled(1e-6), g) == ALPHA_MIN
        assert balance_alpha(g, PolicyParams.zeros()) == ALPHA_MAX

    def test_zero_traj_loss_is_text_only(self, mixed):
        params = PolicyParams.init(0)
        batch = [make_sample(r) for r in mixed[:4]]
        feats = np.stack([s.features for s in batch])
        wp, _, _ = forward(params, scene_only(feats), with_meta(feats, np.stack([s.meta_codes for s in batch])))
        exact = [dataclasses.replace(s, target=wp[i]) for i, s in enumerate(batch)]
        config = SftConfig()
        new, lb = joint_step(exact, params, config)
        _, loss_traj, g_text, _ = batch_gradients(exact, params)
        assert loss_traj == 0.0 and lb.loss_traj == 0.0
        assert new == update(params, g_text, config.learning_rates)

    def test_fixed_alpha(self, mixed):
        batch = [make_sample(r) for r in mixed[:4]]
        _, lb = joint_step(batch, PolicyParams.init(0), SftConfig(adaptive_alpha=False, alpha=2.5))
        assert lb.alpha == 2.5
        assert lb.loss_total == lb.loss_text + 2.5 * lb.loss_traj

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            joint_step([], PolicyParams.init(0), SftConfig())


class TestConfig:
    @pytest.mark.parametrize("kw", [{"alpha": 0.0}, {"mix_ratio": 1.5}, {"batch_size": 0}, {"lr_action": 0.0}])
    def test_rejected(self, kw):
        with pytest.raises(ValueError):
            SftConfig(**kw)


class TestStage1:
    def test_free_road_fit(self):
        records = build_dataset([generate_scene("free_road", s) for s in range(200)])
        p0 = PolicyParams.init(0)
        before = mean_traj_loss(p0, records)
        after = mean_traj_loss(train_stage1(records, p0, SftConfig()), records)
        assert after < 0.05 * before

    def test_single_record_monotone(self, mixed):
        config = SftConfig(lr_pooling=1e-3, lr_action=1e-3, lr_meta=1e-3, epochs_stage1=10)
        rows = []
        train_stage1([next(r for r in mixed if not r.is_neg)], PolicyParams.init(0), config, rows.append)
        losses = [r["loss_traj"] for r in rows]
        assert len(losses) == 10
        assert all(b <= a for a, b in zip(losses, losses[1:]))

    def test_trace_and_determinism(self, mixed):
        rows_a, rows_b = [], []
        config = SftConfig(epochs_stage1=2)
        a = train_stage1(mixed, PolicyParams.init(0), config, rows_a.append)
        b = train_stage1(mixed, PolicyParams.init(0), config, rows_b.append)
        assert dumps_params(a, "sft1") == dumps_params(b, "sft1")
        assert rows_a == rows_b
        pos = sum(not r.is_neg for r in mixed)
        assert len(rows_a) == 2 * math.ceil(pos / config.batch_size)
        for r in rows_a:
            assert set(r) == {"step", "stage", "loss_total", "loss_text", "loss_traj", "alpha", "grad_norm"}
            assert r["loss_total"] == r["loss_text"] + r["alpha"] * r["loss_traj"]

    def test_needs_pos(self, mixed):
        with pytest.raises(ValueError):
            train_stage1([r for r in mixed if r.is_neg], PolicyParams.init(0), SftConfig())


class TestStage2:
    def test_mix_accounting(self):
        rng = np.random.default_rng(0)
        batches = list(mixed_batches(list("PPP"), list("NN"), 100, 8, 0.5, rng))
        assert sum(b.count("P") for b in batches) == 400
        assert all(b.count("P") == 4 for b in batches)
        again = list(mixed_batches(list("PPP"), list("NN"), 100, 8, 0.5, np.random.default_rng(0)))
        assert batches == again

    def test_pos_samples_have_no_analysis(self, mixed):
        for r in mixed:
            s = make_sample(r)
            assert np.any(s.features[ANALYSIS_SLOT]) == r.is_neg
            assert not np.any(make_sample(r, with_analysis=False).features[ANALYSIS_SLOT])

    def test_needs_both_labels(self, mixed):
        with pytest.raises(ValueError):
            train_stage2([r for r in mixed if not r.is_neg], PolicyParams.init(0), SftConfig())

    def test_analysis_helps_after_50_steps(self, mixed, stage1):
        config = SftConfig()
        pos = [make_sample(r) for r in mixed if not r.is_neg]
        neg = [make_sample(r) for r in mixed if r.is_neg]
        params = stage1
        for batch in mixed_batches(pos, neg, 50, config.batch_size, 0.5, np.random.default_rng(7)):
            params, _ = joint_step(batch, params, config)
        negs = [r for r in mixed if r.is_neg]
        assert mean_traj_loss(params, negs, analysis=True) < mean_traj_loss(params, negs, analysis=False)

    def test_self_correction_on_holdout(self, mixed, holdout, stage1):
        params = train_stage2(mixed, stage1, SftConfig())
        negs = [r for r in holdout if r.is_neg]
        assert negs

        def fde(r, analysis):
            tr = plan(params, r.scene, r.analysis if analysis else None, r.tau_neg if analysis else None)[0]
            return float(np.hypot(*(tr.xy[-1] - r.tau_pos.xy[-1])))

        assert np.mean([fde(r, True) for r in negs]) <= np.mean([fde(r, False) for r in negs])
