import io
import json

import numpy as np
import pytest

from adapower.mpc import (CandidateSet, PlannerConfig, PlannerError, control_loop, evaluate_and_select,
                          policy_episode, propose_candidates, reward_progress)
from adapower.numeric import ContractError, NumericError, RngStream
from adapower.pushbox import (DEFAULT_TASKS, EXPERT, IMPERFECT, EnvState, render, reset, run_episode,
                              scripted_policy, task_by_id)
from adapower.world_model import GroundTruthModel, WorldModel, WorldModelConfig

S0 = EnvState((6.0, 16.0), (12.0, 16.0), (24.0, 16.0), 3)


def frames_with_block(positions, goal=(24.0, 16.0)):
    return np.stack([render(EnvState((2.0, 2.0), p, goal)) for p in positions])


@pytest.mark.parametrize("kw", [dict(K=0, M=0), dict(K=0, M=2), dict(horizon=2, replan_stride=3),
                                dict(replan_stride=0), dict(sigma=-0.1)])
def test_invalid_planner_config_raises(kw):
    with pytest.raises(ContractError):
        PlannerConfig(**kw)


def test_zero_sigma_duplicates_sources():
    c = propose_candidates(IMPERFECT, S0, PlannerConfig(K=3, M=5, sigma=0.0), RngStream(1))
    assert c.actions.shape == (8, 8, 2)
    for m, src in enumerate(c.sources[3:]):
        assert np.array_equal(c.actions[3 + m], c.actions[int(src.split(":")[1])])


def test_perturbed_actions_stay_clipped():
    c = propose_candidates(IMPERFECT, S0, PlannerConfig(K=2, M=30, sigma=2.0), RngStream(2))
    assert np.abs(c.actions).max() <= 1.0
    assert len({tuple(a.ravel()) for a in c.actions}) == 32


def test_first_candidate_replays_policy_draw():
    rng = RngStream(3)
    c = propose_candidates(IMPERFECT, S0, PlannerConfig(K=2, M=0), rng)
    assert np.array_equal(c.actions[0, 0], scripted_policy(S0, IMPERFECT, rng.derive("policy", S0.step)))


def test_reward_examples():
    on_goal = frames_with_block([(24.0, 16.0)] * 4)
    assert abs(reward_progress(on_goal, (24.0, 16.0))) <= 0.5 * np.sqrt(2)
    assert reward_progress(np.zeros((3, 32, 32, 3), dtype=np.uint8), (24.0, 16.0)) == -64.0
    near = frames_with_block([(14.0, 16.0), (16.0, 16.0), (18.0, 16.0)])
    far = frames_with_block([(12.0, 16.0), (13.0, 16.0), (15.0, 16.0)])
    assert reward_progress(near, (24.0, 16.0)) > reward_progress(far, (24.0, 16.0))
    with pytest.raises(ContractError):
        reward_progress(np.zeros((0, 32, 32, 3), dtype=np.uint8), (0, 0))


def test_reward_discount_weights_early_frames():
    f = frames_with_block([(24.0, 16.0), (14.0, 16.0)])
    assert reward_progress(f, (24.0, 16.0), 0.5) > reward_progress(f, (24.0, 16.0), 1.0)


def oracle_pick(actions, state=S0, cfg=PlannerConfig(), **kw):
    hist = np.stack([render(state)] * 2)
    return evaluate_and_select(GroundTruthModel(state), hist, None, CandidateSet(np.asarray(actions), ["x"] * len(actions)),
                               state.goal, cfg, **kw)


def test_single_candidate_and_ties():
    a = np.full((1, 4, 2), 0.5)
    assert oracle_pick(a)[0] == 0
    dup = np.concatenate([np.zeros((1, 4, 2)), np.full((2, 4, 2), 1.0) * [1, 0]])
    best, r = oracle_pick(dup)
    assert r[1] == r[2] and best == 1


def test_selection_is_invariant_to_monotone_reward_transforms():
    cands = propose_candidates(IMPERFECT, S0, PlannerConfig(), RngStream(4))
    best, r = oracle_pick(cands.actions)
    assert int(np.argmax(3.0 * r)) == best
    assert int(np.argmax(np.exp(r / 10.0))) == best


def test_parallel_matches_sequential():
    cands = propose_candidates(IMPERFECT, S0, PlannerConfig(), RngStream(5))
    cfg = PlannerConfig(group_size=3, workers=4)
    m = WorldModel(WorldModelConfig(dim=16, blocks=3, heads=2, adapter_stride=1, ttt_rank=4, ttt_chunk=8,
                                    action_hidden=16, attn_dim=8, mem_dim=16), seed=1)
    hist = np.stack([render(S0)] * 2)
    seq = evaluate_and_select(m, hist, m.new_bank(), cands, S0.goal, cfg, parallel=False)
    par = evaluate_and_select(m, hist, m.new_bank(), cands, S0.goal, cfg, parallel=True)
    assert seq[0] == par[0] and np.array_equal(seq[1], par[1])
    whole = evaluate_and_select(m, hist, m.new_bank(), cands, S0.goal, PlannerConfig())
    np.testing.assert_allclose(whole[1], seq[1], rtol=0, atol=1e-9)


class FlakyModel(GroundTruthModel):
    """Ground truth that blows up on any candidate whose first action pushes hard left."""

    def rollout(self, init_frames, actions, bank=None, past_actions=None):
        if (np.asarray(actions).reshape(-1, np.asarray(actions).shape[-2], 2)[:, 0, 0] < -0.5).any():
            raise NumericError("non-finite activations", "block 1")
        return super().rollout(init_frames, actions, bank, past_actions)


def test_failed_candidates_score_minus_inf():
    acts = np.zeros((3, 4, 2))
    acts[1, 0, 0] = -1.0
    hist = np.stack([render(S0)] * 2)
    cands = CandidateSet(acts, ["a", "b", "c"])
    best, r = evaluate_and_select(FlakyModel(S0), hist, None, cands, S0.goal, PlannerConfig(group_size=3))
    assert r[1] == -np.inf and np.isfinite(r[[0, 2]]).all()
    assert cands.failed.tolist() == [False, True, False]
    assert best == 0
    with pytest.raises(PlannerError):
        evaluate_and_select(FlakyModel(S0), hist, None, CandidateSet(np.full((2, 4, 2), -1.0), ["a", "b"]),
                            S0.goal, PlannerConfig())


def test_degenerate_planner_is_the_bare_policy():
    cfg = PlannerConfig(K=1, M=0)
    model = WorldModel(WorldModelConfig(dim=16, blocks=3, heads=2, adapter_stride=1, ttt_rank=4, ttt_chunk=8,
                                        action_hidden=16, attn_dim=8, mem_dim=16), seed=0)
    for i, task in enumerate(DEFAULT_TASKS[:2]):
        rng = RngStream(9).derive(task.task_id, i)
        planned = control_loop(task, IMPERFECT, model, cfg, rng)
        bare = policy_episode(task, IMPERFECT, rng)
        rec = run_episode(task, IMPERFECT, rng)
        assert planned.success == bare.success == rec.success
        assert np.array_equal(planned.states, bare.states)
        assert np.array_equal(bare.states, rec.states)
        assert np.array_equal(planned.actions, bare.actions)


def test_control_loop_is_deterministic_and_logs():
    cfg = PlannerConfig(K=2, M=2, horizon=4)
    task = task_by_id(2)
    log = io.StringIO()
    a = control_loop(task, IMPERFECT, GroundTruthModel(reset(task, RngStream(0))), cfg, RngStream(11), log)
    b = control_loop(task, IMPERFECT, GroundTruthModel(reset(task, RngStream(0))), cfg, RngStream(11))
    assert a.as_dict() == b.as_dict()
    lines = [json.loads(x) for x in log.getvalue().splitlines()]
    assert len(lines) == len(a.choices) and {"step", "chosen", "rewards", "action"} <= set(lines[0])
    if a.success:
        s = EnvState.from_array(a.states[-1])
        assert s.block_goal_distance() <= task.success_radius


@pytest.mark.xfail(reason="measured 87.5% vs expert 100%: biased low-sigma proposals time out 2-7 px short; see ledger",
                   strict=False)
def test_oracle_planner_reaches_expert_level():
    cfg = PlannerConfig()
    planned, expert = [], []
    for i in range(40):
        task = DEFAULT_TASKS[i % len(DEFAULT_TASKS)]
        rng = RngStream(21).derive("oracle", i)
        planned.append(control_loop(task, IMPERFECT, GroundTruthModel(reset(task, RngStream(0))), cfg, rng).success)
        expert.append(run_episode(task, EXPERT, rng).success)
    assert np.mean(planned) >= np.mean(expert) - 0.05
