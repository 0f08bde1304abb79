"""Inversion properties that hold for any network (trained or not); the
trained-model quality orderings live in the acceptance suite."""

import numpy as np
import pytest

from attnedit.errors import ConfigError
from attnedit.inversion import (
    ddim_invert,
    edit_friendly_invert,
    load_trajectory,
    null_text_invert,
    reconstruct,
    save_trajectory,
)
from attnedit.net import EpsilonNet
from attnedit.rng import rng_for
from attnedit.sampling import encode_spectrogram
from attnedit.schedule import InferencePlan, make_schedule
from attnedit.world import EventSpec, World


@pytest.fixture(scope="module")
def setup():
    world = World()
    net = EpsilonNet()
    net.randomize(seed=20)
    sched = make_schedule()
    spec = world.render_event(EventSpec("tone", 10, 0.9, 8, 40), seed=0)
    x0 = encode_spectrogram(spec)
    cond = world.embed_text("a tone")
    null = world.null_embedding()
    return world, net, sched, x0, cond, null


class _ZeroNet:
    freq_bins, frames = 32, 64

    def forward(self, z, t, ctx, pass_ctx=None, want_cache=False):
        out = np.zeros_like(np.asarray(z, dtype=np.float64))
        return (out, {}) if want_cache else out


def test_ddim_invert_zero_latent_zero_net_fixed_point():
    world = World()
    plan = InferencePlan(steps=20, sampler="ddim")
    sched = make_schedule()
    traj = ddim_invert(np.zeros((32, 64)), world.embed_text("a tone"),
                       world.null_embedding(), plan, sched, _ZeroNet(), w=0.0)
    assert traj.latents.shape == (21, 1, 32, 64)
    np.testing.assert_array_equal(traj.latents, np.zeros_like(traj.latents))


def test_ddim_invert_deterministic(setup):
    world, net, sched, x0, cond, null = setup
    plan = InferencePlan(steps=15, sampler="ddim")
    a = ddim_invert(x0, cond, null, plan, sched, net, w=1.0)
    b = ddim_invert(x0, cond, null, plan, sched, net, w=1.0)
    np.testing.assert_array_equal(a.latents, b.latents)


def test_ddim_invert_requires_ddim_plan(setup):
    world, net, sched, x0, cond, null = setup
    with pytest.raises(ConfigError):
        ddim_invert(x0, cond, null, InferencePlan(steps=5, sampler="ddpm"),
                    sched, net)


def test_edit_friendly_exact_replay(setup):
    """Replay with stored noises reconstructs the input to float32 exactness,
    for any seeds, and different seeds give different trajectories."""
    world, net, sched, x0, cond, null = setup
    plan = InferencePlan(steps=25, sampler="ddpm")
    trajs = []
    for seed in (0, 1):
        traj = edit_friendly_invert(x0, cond, null, plan, sched, net, seed=seed)
        recon = reconstruct(traj, cond, null, plan, sched, net)
        err = np.max(np.abs(recon[0] - x0))
        assert err < 1e-4
        trajs.append(traj)
    assert not np.array_equal(trajs[0].latents[0], trajs[1].latents[0])


def test_edit_friendly_replay_is_bitwise(setup):
    world, net, sched, x0, cond, null = setup
    plan = InferencePlan(steps=10, sampler="ddpm")
    traj = edit_friendly_invert(x0, cond, null, plan, sched, net, seed=4)
    recon = reconstruct(traj, cond, null, plan, sched, net)
    np.testing.assert_array_equal(recon, traj.latents[-1])


def test_edit_friendly_skip_start_consistency(setup):
    """Replaying from a mid-trajectory latent reproduces the same clean latent
    as replay from the deepest one."""
    world, net, sched, x0, cond, null = setup
    plan = InferencePlan(steps=20, sampler="ddpm")
    traj = edit_friendly_invert(x0, cond, null, plan, sched, net, seed=9)
    full = reconstruct(traj, cond, null, plan, sched, net, from_step=0)
    for k in (5, 10, 19):
        partial = reconstruct(traj, cond, null, plan, sched, net, from_step=k)
        np.testing.assert_array_equal(partial, full)


def test_edit_friendly_batched_matches_stacked_shapes(setup):
    world, net, sched, x0, cond, null = setup
    plan = InferencePlan(steps=8, sampler="ddpm")
    batch = np.stack([x0, x0 * 0.5])
    traj = edit_friendly_invert(batch, cond, null, plan, sched, net, seed=2)
    assert traj.latents.shape == (9, 2, 32, 64)
    recon = reconstruct(traj, cond, null, plan, sched, net)
    assert np.max(np.abs(recon - batch)) < 1e-4


def test_null_text_zero_inner_steps_equals_ddim_replay_at_w(setup):
    world, net, sched, x0, cond, null = setup
    plan = InferencePlan(steps=6, sampler="ddim")
    traj = null_text_invert(x0, cond, null, plan, sched, net, w_edit=7.5,
                            inner_steps=0)
    pivot = ddim_invert(x0, cond, null, plan, sched, net, w=1.0)
    manual = reconstruct(pivot, cond, null, plan, sched, net, w=7.5)
    np.testing.assert_allclose(traj.latents[-1], manual, atol=1e-10)


def test_null_text_best_iterate_non_increasing(setup):
    """The kept per-step objective never exceeds the objective at the
    initialization of that step's null embedding."""
    world, net, sched, x0, cond, null = setup
    plan = InferencePlan(steps=5, sampler="ddim")
    from attnedit.schedule import ddim_step

    traj = null_text_invert(x0, cond, null, plan, sched, net, w_edit=7.5,
                            inner_steps=4, lr=1e-2)
    pivot = ddim_invert(x0, cond, null, plan, sched, net, w=1.0)
    ts = pivot.timesteps
    z = pivot.latents[0]
    prev_null = np.broadcast_to(null, (1,) + null.shape)
    for i in range(len(ts)):
        t = int(ts[i])
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        target = pivot.latents[i + 1]

        def obj(nl):
            eps = 7.5 * net.forward(z, t, cond) - 6.5 * net.forward(z, t, nl)
            zp = ddim_step(z, eps, t, t_prev, sched)
            return float(np.mean((zp - target) ** 2))

        init_obj = obj(prev_null)  # embedding inherited from the previous step
        kept_obj = obj(traj.null_embeddings[i])
        assert kept_obj <= init_obj + 1e-12
        prev_null = traj.null_embeddings[i]
        eps = 7.5 * net.forward(z, t, cond) - 6.5 * net.forward(z, t, prev_null)
        z = ddim_step(z, eps, t, t_prev, sched)
    np.testing.assert_allclose(z, traj.latents[-1], atol=1e-12)


def test_trajectory_save_load_roundtrip(tmp_path, setup):
    world, net, sched, x0, cond, null = setup
    plan = InferencePlan(steps=7, sampler="ddpm")
    traj = edit_friendly_invert(x0, cond, null, plan, sched, net, seed=5)
    path = tmp_path / "traj.ckpt"
    save_trajectory(path, traj)
    back = load_trajectory(path)
    assert back.kind == traj.kind
    assert back.inversion_w == traj.inversion_w
    np.testing.assert_array_equal(back.timesteps, traj.timesteps)
    np.testing.assert_allclose(back.latents, traj.latents, atol=1e-5)
    np.testing.assert_allclose(back.noises, traj.noises, atol=1e-5)


def test_reconstruct_validates_kind_and_range(setup):
    world, net, sched, x0, cond, null = setup
    plan_ddpm = InferencePlan(steps=5, sampler="ddpm")
    traj = edit_friendly_invert(x0, cond, null, plan_ddpm, sched, net, seed=1)
    with pytest.raises(ConfigError):
        reconstruct(traj, cond, null, InferencePlan(steps=5, sampler="ddim"),
                    sched, net)
    with pytest.raises(ConfigError):
        reconstruct(traj, cond, null, plan_ddpm, sched, net, from_step=5)
