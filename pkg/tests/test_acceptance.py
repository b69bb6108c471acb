"""Acceptance criteria, one test each; every test records a PASS/FAIL line."""

import json
import time

import numpy as np
import pytest

import gradcheck
import oracles
from conftest import read_summary
from negplan.csp import build_dataset, generate_candidates
from negplan.grpo import GrpoConfig, combine_rewards, dual_branch_terms, normalize_advantages, reward_goal, reward_pref
from negplan.metrics import SubScores, pdms, score_trajectory, trajectory_progress
from negplan.policy import forward
from negplan.scenario import FUTURE_TIMES, Trajectory, mixed_suite

pytestmark = pytest.mark.slow

CFG = GrpoConfig()


def rel(a, b):
    return oracles.rel_err(a, b, floor=1e-300)


def test_formula_fidelity(criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = dict.fromkeys(("pdms", "reward_pref", "reward_goal", "reward_total", "advantages", "dual_branch"), 0.0)
    for _ in range(1000):
        nc, dac, ttc, c = (int(v) for v in rng.integers(0, 2, 4))
        nc, dac = (1, 1) if rng.random() < 0.7 else (nc, dac)
        ep = float(rng.random())
        worst["pdms"] = max(worst["pdms"], rel(pdms(SubScores(nc, dac, ep, ttc, c)), oracles.pdms(nc, dac, ep, ttc, c)))

        tau, tau_pos, tau_neg = (rng.normal(0.0, 8.0, (8, 2)) for _ in range(3))
        t = [Trajectory(FUTURE_TIMES, x, 2.0) for x in (tau, tau_pos, tau_neg)]
        rp = reward_pref(*t, CFG)
        rg = reward_goal(t[0], t[1], CFG)
        worst["reward_pref"] = max(worst["reward_pref"], rel(rp, oracles.reward_pref(tau, tau_pos, tau_neg)))
        worst["reward_goal"] = max(worst["reward_goal"], rel(rg, oracles.reward_goal(tau, tau_pos)))
        rt = float(rng.random())
        worst["reward_total"] = max(worst["reward_total"],
                                    rel(combine_rewards(rt, rp, rg, CFG).total, oracles.reward_total(rt, rp, rg)))

        n = int(rng.integers(2, 9))
        samples, anchors = rng.random(n).tolist(), rng.random(2).tolist()
        s, a = normalize_advantages(samples, anchors)
        ref_s, ref_a = oracles.advantages(samples, anchors)
        worst["advantages"] = max([worst["advantages"]] + [rel(x, y) for x, y in zip(list(s) + list(a), ref_s + ref_a)])

        members = tau_neg + rng.normal(0.0, 1.0, (n, 8, 2)) * rng.choice([0.02, 0.3, 2.0])
        adv = rng.normal(size=n)
        terms, _ = dual_branch_terms(members, adv, tau_pos, tau_neg, CFG)
        ref = oracles.dual_branch_loss(members.tolist(), adv.tolist(), tau_pos.tolist(), tau_neg.tolist())
        worst["dual_branch"] = max(worst["dual_branch"], rel(float(terms.mean()), ref))
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-12 and elapsed < 10.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion("formula fidelity", ok, f"max rel err {detail}; {elapsed:.1f}s")


def test_csp_improvement(criterion):
    start = time.perf_counter()
    scenes = mixed_suite(500, 0)
    records = build_dataset(scenes)
    neg = [r for r in records if r.is_neg]
    worse, mismatched = 0, 0
    for r in neg:
        ref = r.reference_progress
        if pdms(score_trajectory(r.scene, r.tau_pos, ref)) < pdms(score_trajectory(r.scene, r.tau_neg, ref)):
            worse += 1
        cands = generate_candidates(r.scene)
        top = max(trajectory_progress(r.scene, c) for c in cands)
        scores = [pdms(score_trajectory(r.scene, c, max(top, 1e-6))) for c in cands]
        best = next(i for i, v in enumerate(scores) if v == max(scores))
        if cands[best] != r.tau_pos:
            mismatched += 1
    elapsed = time.perf_counter() - start
    ok = worse == 0 and mismatched == 0 and elapsed < 120.0
    criterion("CSP improvement", ok,
              f"{len(neg)} Neg of {len(records)}; pdms(tau_pos) < pdms(tau_neg) in {worse}; "
              f"argmax mismatches {mismatched}; {elapsed:.1f}s")


def test_gradient_checks(criterion):
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    worst = {"traj_loss": 0.0, "text_loss": 0.0, "dual_branch_loss": 0.0}
    done = skipped = 0
    while done < 100:
        params = gradcheck.random_params(rng)
        inputs = gradcheck.random_inputs(rng, batch=4)
        wp, _, _ = forward(params, *inputs)
        tau_pos = wp[0] + rng.normal(0.0, 1.5, (8, 2))
        tau_neg = wp[int(rng.integers(4))] + rng.normal(0.0, 0.15, (8, 2))
        adv = rng.normal(size=4)
        if gradcheck.near_kink(wp, adv, tau_pos, tau_neg, CFG):
            skipped += 1
            continue
        target = rng.normal(0.0, 3.0, (4, 8, 2))
        classes = np.stack([[rng.integers(3), rng.integers(5), rng.integers(3), rng.integers(5)] for _ in range(4)])
        for name, fn in (("traj_loss", gradcheck.traj_loss_fn(target)),
                         ("text_loss", gradcheck.text_loss_fn(classes)),
                         ("dual_branch_loss", gradcheck.dual_branch_fn(adv, tau_pos, tau_neg, CFG))):
            worst[name] = max(worst[name], gradcheck.check(fn, params, inputs, rng))
        done += 1
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed < 60.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    criterion("gradient checks", ok,
              f"{done} draws ({skipped} kink-adjacent skipped, margin {gradcheck.KINK_MARGIN}); max rel err {detail}; "
              f"{elapsed:.1f}s")


def test_anchor_exclusion(criterion):
    rng = np.random.default_rng(5)
    changed = 0
    for _ in range(100):
        samples = rng.random(int(rng.integers(2, 9)))
        anchors = rng.random(2)
        delta = rng.normal(0.0, 10.0 ** rng.uniform(-6, 6), 2)
        base, _ = normalize_advantages(samples, anchors)
        moved, _ = normalize_advantages(samples, anchors + delta)
        changed += int(not np.array_equal(base, moved))
    criterion("anchor-exclusion invariance", changed == 0, f"{changed} of 100 groups changed a sampled advantage")


def test_ablation_trend(criterion, pipeline, grpo_no_anchors):
    assert all(code == 0 for code in pipeline.codes.values()), pipeline.codes
    sft = read_summary(pipeline.file("reports/eval-sft2-summary.csv"))["pdms"]
    full = read_summary(pipeline.file("reports/eval-grpo-summary.csv"))["pdms"]
    no_anchor = read_summary(grpo_no_anchors)["pdms"]
    ok = full >= sft + 0.005 and full >= no_anchor and pipeline.seconds < 1800
    criterion("ablation trend", ok,
              f"PDMS sft {sft:.4f}, grpo-full {full:.4f}, grpo-without-anchors {no_anchor:.4f} "
              f"(full >= sft+0.005: {full >= sft + 0.005}; full >= no-anchors: {full >= no_anchor}); "
              f"pipeline {pipeline.seconds:.0f}s")


def test_safety_trend(criterion, pipeline):
    sft = read_summary(pipeline.file("reports/eval-sft2-summary.csv"))["coll_rate"]
    full = read_summary(pipeline.file("reports/eval-grpo-summary.csv"))["coll_rate"]
    criterion("safety trend", full <= sft, f"collision rate sft {sft:.3f}, grpo-full {full:.3f}")


def test_refinement_contract(criterion, pipeline):
    rows = [json.loads(line) for line in pipeline.file("traces/grpo.jsonl").read_text().splitlines()]
    violations = triggered = refined = 0
    for row in rows:
        best = row["sampled_max"]
        sampled = [m["reward"] for m in row["members"] if m["role"] == "sampled"]
        kept = [m["reward"] for m in row["members"] if m["role"] == "refined"]
        triggered += row["triggered"]
        refined += len(kept)
        if best != max(sampled) or row["triggered"] != (best < CFG.delta):
            violations += 1
        if kept and (not row["triggered"] or min(kept) <= best or len(kept) > CFG.k):
            violations += 1
    ok = violations == 0 and refined > 0
    criterion("refinement contract", ok,
              f"{len(rows)} steps, {triggered} triggered, {refined} refined samples, {violations} violations")


def test_determinism(criterion, pipeline, pipeline_rerun):
    names = ["scenes/train.jsonl", "scenes/holdout.jsonl", "csp/train.jsonl", "csp/holdout.jsonl",
             "checkpoints/sft1.ckpt", "checkpoints/sft2.ckpt", "checkpoints/grpo.ckpt",
             "reports/eval-sft2.csv", "reports/eval-sft2-summary.csv",
             "reports/eval-grpo.csv", "reports/eval-grpo-summary.csv"]
    differing = [n for n in names if pipeline.file(n).read_bytes() != pipeline_rerun.file(n).read_bytes()]
    criterion("determinism", not differing and pipeline_rerun.codes == pipeline.codes,
              f"{len(names) - len(differing)}/{len(names)} artifacts byte-identical"
              + (f"; differing: {', '.join(differing)}" if differing else ""))
