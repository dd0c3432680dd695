import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adapower.numeric import ContractError, RngStream
from adapower.pushbox import (DEFAULT_TASKS, EXPERT, IMPERFECT, EnvState, Profile, TaskSpec,
                              episodes_bytes, env_step, extract_centroids, gen_dataset, generate_episodes,
                              read_episodes, render, reset, run_episode, scripted_policy, summarize, task_by_id)

FAR = EnvState((4.0, 4.0), (16.0, 16.0), (26.0, 26.0))


def test_zero_action_only_counts_a_step():
    s = env_step(FAR, (0.0, 0.0))
    assert (s.agent, s.block, s.goal, s.step) == (FAR.agent, FAR.block, FAR.goal, 1)


def test_free_move_leaves_block_alone():
    s = env_step(FAR, (1.0, 0.0))
    assert s.agent == (6.0, 4.0) and s.block == FAR.block


def test_push_right_by_overlap_depth():
    # agent reaches x=12; half-extents 1 + 2 = 3 against a center gap of 1.5 -> depth 1.5
    s = env_step(EnvState((10.0, 16.0), (13.5, 16.0), (26.0, 16.0)), (1.0, 0.0))
    assert s.agent == (12.0, 16.0)
    assert s.block == (15.0, 16.0)


def test_block_against_wall_backs_agent_out():
    s = env_step(EnvState((26.0, 16.0), (29.5, 16.0), (5.0, 5.0)), (1.0, 0.0))
    assert s.block == (30.0, 16.0)
    assert s.agent == (27.0, 16.0)


@pytest.mark.parametrize("a", [(1.5, 0.0), (0.0, -1.01), (float("nan"), 0.0)])
def test_out_of_range_action_raises(a):
    with pytest.raises(ContractError):
        env_step(FAR, a)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_positions_stay_in_bounds(seed):
    rng = RngStream(seed)
    s = reset(DEFAULT_TASKS[seed % 5], rng.derive("reset"))
    for a in rng.derive("acts").uniform_np((60, 2)) * 2 - 1:
        s = env_step(s, a)
        arr = s.as_array()
        assert (arr >= 0).all() and (arr <= 32).all()


def test_render_pixel_counts():
    f = render(FAR)
    assert f.dtype == np.uint8 and f.shape == (32, 32, 3)
    lit = f.max(-1) == 255
    assert ((f == 255).sum(-1) <= 1).all()
    assert int((lit & (f[..., 1] == 255)).sum()) == 25
    assert int((lit & (f[..., 0] == 255)).sum()) == 16
    assert int((lit & (f[..., 2] == 255)).sum()) == 4
    assert int(lit.sum()) == 45


def test_render_is_deterministic():
    assert render(FAR).tobytes() == render(EnvState(*FAR.__dict__.values())).tobytes()


def test_black_frame_has_no_objects():
    c = extract_centroids(np.zeros((32, 32, 3), dtype=np.uint8))
    assert c.agent is None and c.block is None and c.goal is None


def test_occluded_block_is_absent():
    assert extract_centroids(render(EnvState((16.0, 16.0), (16.0, 16.0), (5.0, 5.0)))).block is not None
    f = render(EnvState((16.0, 16.0), (16.0, 16.0), (5.0, 5.0)))
    f[14:18, 14:18] = (0, 0, 255)
    c = extract_centroids(f)
    assert c.block is None and c.agent is not None and c.goal is not None


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_centroid_round_trip_within_half_pixel(seed):
    s = reset(DEFAULT_TASKS[seed % 5], RngStream(seed))
    c = extract_centroids(render(s))
    assert max(abs(c.agent[i] - s.agent[i]) for i in (0, 1)) <= 0.5
    # the agent never overlaps the block at reset; the goal may sit under either
    assert max(abs(c.block[i] - s.block[i]) for i in (0, 1)) <= 0.5
    if int((render(s)[..., 1] == 255).sum()) == 25:
        assert max(abs(c.goal[i] - s.goal[i]) for i in (0, 1)) <= 0.5


def test_expert_is_idle_when_block_on_goal():
    s = EnvState((5.0, 5.0), (16.0, 16.0), (16.2, 15.9))
    assert np.allclose(scripted_policy(s, EXPERT), 0.0)


def test_unbiased_noiseless_profile_equals_expert():
    prof = Profile(bias=(0.0, 0.0), noise_std=0.0)
    s = EnvState((5.0, 5.0), (16.0, 16.0), (26.0, 20.0))
    assert np.array_equal(scripted_policy(s, prof, RngStream(0)), scripted_policy(s, EXPERT))


def test_imperfect_without_rng_raises():
    with pytest.raises(ContractError):
        scripted_policy(FAR, IMPERFECT)


def test_expert_success_on_every_task():
    for task in DEFAULT_TASKS:
        ok = [run_episode(task, EXPERT, RngStream(7).derive(task.task_id, i)).success for i in range(40)]
        assert np.mean(ok) >= 0.95, task.task_id


def test_imperfect_success_rate_is_calibrated():
    eps = generate_episodes(200, 0.0, 11, tasks=list(DEFAULT_TASKS))
    rate = np.mean([e.success for e in eps])
    assert 0.15 <= rate <= 0.45


def test_frames_reproduce_from_states():
    ep = run_episode(task_by_id(1), IMPERFECT, RngStream(3))
    for f, st_ in zip(ep.frames, ep.states):
        assert np.array_equal(f, render(EnvState.from_array(st_)))
    assert len(ep.actions) == len(ep.frames)
    assert np.array_equal(ep.actions[-1], [0.0, 0.0])


def test_single_expert_episode_file(tmp_path):
    summary = gen_dataset(1, 1.0, 0, tmp_path / "one.apep")
    assert summary.episodes == 1 and summary.expert_episodes == 1 and summary.success_rate == 1.0
    eps = read_episodes(open(tmp_path / "one.apep", "rb"))
    assert len(eps) == 1 and eps[0].success


def test_same_seed_gives_identical_bytes(tmp_path):
    gen_dataset(6, 0.5, 42, tmp_path / "a.apep")
    gen_dataset(6, 0.5, 42, tmp_path / "b.apep")
    assert (tmp_path / "a.apep").read_bytes() == (tmp_path / "b.apep").read_bytes()
    gen_dataset(6, 0.5, 43, tmp_path / "c.apep")
    assert (tmp_path / "a.apep").read_bytes() != (tmp_path / "c.apep").read_bytes()


def test_mix_counts_expert_episodes():
    eps = generate_episodes(100, 0.5, 1)
    assert summarize(eps).expert_episodes == 50
    assert sum(e.expert for e in eps[:10]) == 5


def test_file_round_trip():
    eps = generate_episodes(4, 0.5, 2)
    back = read_episodes(io.BytesIO(episodes_bytes(eps)))
    for a, b in zip(eps, back):
        assert np.array_equal(a.frames, b.frames)
        assert a.success == b.success
        np.testing.assert_allclose(a.actions, b.actions, atol=1e-6)
        np.testing.assert_allclose(a.states, b.states, atol=1e-5)


def test_bad_files_and_args_raise(tmp_path):
    with pytest.raises(ValueError):
        read_episodes(io.BytesIO(b"NOPE" + bytes(8)))
    with pytest.raises(ValueError):
        read_episodes(io.BytesIO(episodes_bytes(generate_episodes(1, 1.0, 0))[:-10]))
    with pytest.raises(ContractError):
        generate_episodes(0, 0.5, 0)
    with pytest.raises(OSError):
        gen_dataset(1, 1.0, 0, tmp_path / "missing" / "x.apep")
    with pytest.raises(ContractError):
        TaskSpec(9, (0, 5, 5, 10), (5, 10, 5, 10))
