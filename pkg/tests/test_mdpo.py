"""Rollout rewards, step scores, advantages, surrogate, and the trainer."""

import copy

import numpy as np
import pytest
import torch

from mdlab.core import DecodeConfig, Vocab
from mdlab.decoding import ConfigError
from mdlab.mdpo import (
    MdpoConfig,
    build_training_rows,
    collect_rollouts,
    draw_modes,
    filter_backslide,
    group_advantages,
    group_step_advantages,
    rollout_rewards,
    step_scores,
    surrogate_loss,
    train_mdpo,
)
from mdlab.model import MaskPredictor, ModelConfig
from mdlab.rewards import gen_instances
from mdlab.util import substream

VOCAB = Vocab.default()


def tiny_model(max_len=32, seed=0):
    return MaskPredictor(
        ModelConfig(vocab_size=VOCAB.size, max_len=max_len, d_model=16,
                    n_layers=1, n_heads=2), seed=seed)


def tiny_cfg(**kw):
    base = dict(group_size=2, rollout_steps=4, updates=1, batch_prompts=2,
                response_len=8, block_size=4, mode_mix=0.5, lr=1e-3,
                temperature=1.0, strategy="lcr", schedule="linear", seed=0,
                train_on_backslide_only=False)
    base.update(kw)
    return MdpoConfig(**base)


class TestStepScores:
    def test_hand_example_T3(self):
        # r = [r0, r1, r2, r3] with r3 = 0 (fully masked start)
        r = np.array([1.0, 0.0, 1.0, 0.0])
        s = step_scores(r)
        # s[0] = r0 - r1 = 1
        # s[1] = r1 - r2 + r0 = 0 - 1 + 1 = 0
        # s[2] = r2 - r3 + mean(r0, r1) = 1 + 0.5 = 1.5
        # s[3] = r3 - 0 + mean(r0, r1, r2) = 2/3
        assert np.allclose(s, [1.0, 0.0, 1.5, 2.0 / 3.0])

    def test_final_answer_dominates_s0(self):
        s = step_scores(np.array([1.0, 0.0, 0.0]))
        assert s[0] == 1.0

    def test_all_zero_rewards(self):
        assert np.allclose(step_scores(np.zeros(5)), 0.0)


class TestGroupAdvantages:
    def test_hand_example(self):
        scores = np.array([[2.0], [0.0], [0.0], [0.0]])
        adv = group_advantages(scores)
        assert np.allclose(adv[:, 0], [1.7321, -0.5774, -0.5774, -0.5774], atol=1e-4)

    def test_normalization(self):
        rng = substream(0, "adv")
        scores = rng.normal(size=(8, 5))
        adv = group_advantages(scores)
        assert np.allclose(adv.mean(axis=0), 0.0, atol=1e-6)
        assert np.allclose(adv.std(axis=0), 1.0, atol=1e-6)

    def test_constant_rows_get_zero(self):
        scores = np.ones((4, 3))
        assert np.allclose(group_advantages(scores), 0.0)

    def test_mixed_columns(self):
        scores = np.array([[1.0, 5.0], [1.0, 7.0]])
        adv = group_advantages(scores)
        assert np.allclose(adv[:, 0], 0.0)
        assert adv[0, 1] < 0 < adv[1, 1]

    def test_requires_group(self):
        with pytest.raises(ConfigError):
            group_advantages(np.array([[1.0, 2.0]]))


class TestDrawModes:
    def test_extremes(self):
        rng = substream(0, "m")
        assert draw_modes(10, 0.0, rng) == ["pure-diff"] * 10
        assert draw_modes(10, 1.0, rng) == ["semi-ar"] * 10

    def test_mix_ratio(self):
        modes = draw_modes(4000, 0.5, substream(0, "m"))
        share = modes.count("semi-ar") / 4000
        assert share == pytest.approx(0.5, abs=0.03)


@pytest.fixture(scope="module")
def rollout_setup():
    model = tiny_model()
    items = gen_instances("countdown", 2, substream(0, "items"))
    cfg = tiny_cfg(rollout_steps=8, block_size=4, response_len=8)
    groups = collect_rollouts(model, items, 2, cfg, VOCAB, round_seed=7)
    return model, items, cfg, groups


class TestRollouts:
    def test_group_shapes(self, rollout_setup):
        _, items, cfg, groups = rollout_setup
        assert len(groups) == len(items)
        for g in groups:
            assert len(g.trajectories) == 2
            assert g.rewards.shape == (2, cfg.rollout_steps + 1)
            assert (g.rewards[:, -1] == 0).all()
            assert set(g.modes) <= {"pure-diff", "semi-ar"}

    def test_rollout_rewards_full_stride(self, rollout_setup):
        _, items, cfg, groups = rollout_setup
        traj = groups[0].trajectories[0]
        r, n_ver = rollout_rewards(traj, groups[0].item, VOCAB, stride=1)
        assert len(r) == traj.total_steps + 1
        assert r[-1] == 0.0
        assert n_ver == traj.total_steps

    def test_reward_stride_carries_values(self, rollout_setup):
        _, items, cfg, groups = rollout_setup
        traj = groups[0].trajectories[0]
        r1, n1 = rollout_rewards(traj, groups[0].item, VOCAB, stride=1)
        r4, n4 = rollout_rewards(traj, groups[0].item, VOCAB, stride=4)
        assert n4 < n1
        # strided values agree wherever a verification actually happened
        for t in range(traj.total_steps):
            if t == 0 or t % 4 == 0:
                assert r4[t] == r1[t]

    def test_deterministic_given_round_seed(self, rollout_setup):
        model, items, cfg, _ = rollout_setup
        a = collect_rollouts(model, items, 2, cfg, VOCAB, round_seed=7)
        b = collect_rollouts(model, items, 2, cfg, VOCAB, round_seed=7)
        for ga, gb in zip(a, b):
            assert ga.modes == gb.modes
            assert (ga.rewards == gb.rewards).all()
            for ta, tb in zip(ga.trajectories, gb.trajectories):
                assert ta.final_ids() == tb.final_ids()

    def test_group_size_guard(self, rollout_setup):
        model, items, cfg, _ = rollout_setup
        with pytest.raises(ConfigError):
            collect_rollouts(model, items, 1, cfg, VOCAB, round_seed=0)

    def test_mixed_mode_step_misalignment_rejected(self):
        model = tiny_model()
        items = gen_instances("countdown", 1, substream(0, "items"))
        # semi-AR with B=4, L=8, T=6 -> 3+3 = 6 steps per block plan of 2
        # blocks with budget (6*4)//8 = 3 -> total 6 == T, fine;
        # but T=7 -> budgets 3+3 = 6 != 7 -> misaligned
        bad = tiny_cfg(rollout_steps=7, block_size=4, response_len=8)
        with pytest.raises(ConfigError):
            collect_rollouts(model, items, 2, bad, VOCAB, round_seed=0)

    def test_single_mode_skips_alignment_check(self):
        model = tiny_model()
        items = gen_instances("countdown", 1, substream(0, "items"))
        cfg = tiny_cfg(rollout_steps=7, block_size=4, response_len=8, mode_mix=0.0)
        groups = collect_rollouts(model, items, 2, cfg, VOCAB, round_seed=0)
        assert groups[0].modes == ["pure-diff", "pure-diff"]


class TestTrainingRows:
    def test_rows_cover_all_sampled_positions(self, rollout_setup):
        _, _, cfg, groups = rollout_setup
        rows = build_training_rows(groups, VOCAB.mask_id)
        assert rows.n_rows > 0
        # every row has at least one action, inputs are masked there
        assert (rows.action_mask.sum(axis=1) > 0).all()
        assert (rows.inputs[rows.action_mask] == VOCAB.mask_id).all()
        assert (rows.targets[rows.action_mask] != VOCAB.mask_id).all()

    def test_old_probs_are_valid(self, rollout_setup):
        _, _, cfg, groups = rollout_setup
        rows = build_training_rows(groups, VOCAB.mask_id)
        assert ((rows.old_prob > 0) & (rows.old_prob <= 1)).all()
        assert np.allclose(rows.old_prob[~rows.action_mask], 1.0)

    def test_advantages_match_group_algebra(self, rollout_setup):
        _, _, cfg, groups = rollout_setup
        g = groups[0]
        A = group_step_advantages(g)
        rows = build_training_rows([g], VOCAB.mask_id)
        traj0 = g.trajectories[0]
        # first n rows belong to trajectory 0, in decode order t = T..1
        expected = [A[0, s.t - 1] for s in traj0.steps
                    if ((np.array(s.masked_ids) == VOCAB.mask_id)
                        & (np.array(s.predicted_ids) != VOCAB.mask_id)).any()]
        assert np.allclose(rows.advantage[:len(expected)], expected)


class TestSurrogate:
    def test_zero_at_init_when_beta_zero_and_ratio_one(self, rollout_setup):
        model, _, cfg, groups = rollout_setup
        # at theta == theta_old the ratio is 1, so the objective reduces to
        # minus the action-averaged advantage
        loss = surrogate_loss(model, model, groups, eps_clip=0.2, beta=0.0,
                              vocab=VOCAB)
        rows = build_training_rows(groups, VOCAB.mask_id)
        adv_mean = float(
            (rows.advantage[:, None] * rows.action_mask).sum() / rows.n_actions)
        assert loss.item() == pytest.approx(-adv_mean, abs=1e-4)

    def test_kl_penalty_increases_loss_away_from_ref(self, rollout_setup):
        model, _, cfg, groups = rollout_setup
        ref = model.snapshot("reference")
        far = tiny_model(seed=99)
        l_near = surrogate_loss(model, ref, groups, 0.2, beta=1.0, vocab=VOCAB)
        l_far = surrogate_loss(far, ref, groups, 0.2, beta=1.0, vocab=VOCAB)
        l_far_nokl = surrogate_loss(far, ref, groups, 0.2, beta=0.0, vocab=VOCAB)
        assert l_far.item() > l_far_nokl.item()
        # KL(theta||theta) = 0: beta changes nothing at the reference point
        l_near_nokl = surrogate_loss(model, ref, groups, 0.2, beta=0.0, vocab=VOCAB)
        assert l_near.item() == pytest.approx(l_near_nokl.item(), abs=1e-6)

    def test_clipping_bounds_the_update_incentive(self, rollout_setup):
        model, _, cfg, groups = rollout_setup
        groups = copy.deepcopy(groups)  # keep the shared fixture pristine
        # inject synthetic rewards so advantages are nonzero
        rng = substream(0, "rw")
        for g in groups:
            g.rewards[:] = rng.integers(0, 2, size=g.rewards.shape).astype(float)
            g.rewards[:, -1] = 0.0
        rows = build_training_rows(groups, VOCAB.mask_id)
        if rows.n_actions == 0:
            pytest.skip("no actions sampled")
        far = tiny_model(seed=99)
        l_eps_small = surrogate_loss(far, far, groups, 0.01, 0.0, VOCAB).item()
        l_eps_big = surrogate_loss(far, far, groups, 10.0, 0.0, VOCAB).item()
        # wider clip range admits larger (more negative or positive) objective
        assert l_eps_small != pytest.approx(l_eps_big, abs=1e-9)


class TestFilterAndTrain:
    def test_filter_backslide_selects_reported_prompts(self):
        model = tiny_model()
        items = gen_instances("countdown", 4, substream(1, "items"))
        cfg = DecodeConfig(strategy="lcr", schedule="linear", steps=8,
                           response_len=8, temperature=0.0, seed=0)
        kept, reports = filter_backslide(model, items, cfg, VOCAB, seed=0)
        assert len(reports) == len(items)
        assert len(kept) == sum(r.backslide for r in reports)

    def test_train_mdpo_runs_and_logs(self, tmp_path):
        items = gen_instances("countdown", 4, substream(2, "items"))
        cfg = tiny_cfg(updates=2, rollout_steps=8,
                       log_path=str(tmp_path / "m.jsonl"),
                       ckpt_path=str(tmp_path / "ck"))
        model, log = train_mdpo(items, cfg, VOCAB, tiny_model())
        assert len(log) == 2
        for e in log:
            for key in ("mean_final_reward", "kl", "clip_fraction",
                        "n_verifications", "total_verifications",
                        "backslide_rate"):
                assert key in e
        assert log[1]["total_verifications"] == (
            log[0]["n_verifications"] + log[1]["n_verifications"])
        assert (tmp_path / "ck.json").exists()
        assert (tmp_path / "m.jsonl").exists()

    def test_train_mdpo_changes_parameters(self):
        items = gen_instances("countdown", 4, substream(2, "items"))
        init = tiny_model()
        before = [p.clone() for p in init.parameters()]
        cfg = tiny_cfg(updates=1, rollout_steps=8, lr=1e-2)
        model, _ = train_mdpo(items, cfg, VOCAB, init)
        assert any(not torch.equal(p, b)
                   for p, b in zip(model.parameters(), before))

    def test_eval_hook_lands_in_log(self):
        items = gen_instances("countdown", 4, substream(2, "items"))
        eval_cfg = DecodeConfig(strategy="lcr", schedule="linear", steps=8,
                                response_len=8, temperature=0.0, seed=0)
        cfg = tiny_cfg(updates=2, rollout_steps=8)
        _, log = train_mdpo(items, cfg, VOCAB, tiny_model(),
                            eval_items=items[:2], eval_cfgs={"pd": eval_cfg},
                            eval_every=2)
        assert "eval_accuracy" not in log[0]
        assert "pd" in log[1]["eval_accuracy"]

    def test_backslide_filter_empty_falls_back_to_all_data(self):
        # a freshly initialized model rarely backslides on 2 prompts; force
        # the branch by checking the trainer still completes when filtering
        items = gen_instances("countdown", 2, substream(3, "items"))
        cfg = tiny_cfg(updates=1, rollout_steps=8, train_on_backslide_only=True)
        model, log = train_mdpo(items, cfg, VOCAB, tiny_model())
        assert log[0]["filtered_dataset_size"] is not None
