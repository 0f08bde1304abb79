"""Edit-loop behavior that holds for any network: identity edits replay the
inversion bitwise, no-injection edits equal plain regeneration, refusion
degenerates to reconstruction."""

import numpy as np
import pytest

from attnedit.editor import EditInstruction, refuse, run_edit
from attnedit.errors import ConfigError
from attnedit.fuser import FuserConfig
from attnedit.inversion import edit_friendly_invert, reconstruct
from attnedit.net import EpsilonNet
from attnedit.sampling import cfg_epsilon, encode_spectrogram
from attnedit.schedule import InferencePlan, ddpm_step, make_schedule
from attnedit.world import EventSpec, World


@pytest.fixture(scope="module")
def setup():
    world = World()
    net = EpsilonNet()
    net.randomize(seed=31)
    sched = make_schedule()
    e1 = EventSpec("tone", 10, 0.9, 2, 26)
    e2 = EventSpec("pulse_train", 20, 0.8, 34, 26)
    scene, _ = world.compose_scene([e1, e2], seed=7)
    return world, net, sched, scene


def _cfg(**kw):
    kw.setdefault("skip", 4)
    return FuserConfig(**kw)


PLAN = InferencePlan(steps=12, sampler="ddpm")


@pytest.mark.parametrize("w", [0.0, 1.0])
def test_identity_edit_reproduces_reconstruction(setup, w):
    world, net, sched, scene = setup
    prompt = "a tone and a pulse train"
    res = run_edit(scene, prompt, prompt, EditInstruction.replace(), _cfg(),
                   w, net, world, PLAN, sched, seed=5, inversion_w=w)
    recon = reconstruct(res.trajectory, world.embed_text(prompt),
                        world.null_embedding(), PLAN, sched, net,
                        from_step=4)
    err = float(np.max(np.abs(res.latent - recon[0])))
    assert err < 1e-4
    # the fuse of identical maps is a bitwise no-op, so this is exact
    assert err == 0.0


def test_identity_reweight_c1(setup):
    world, net, sched, scene = setup
    prompt = "a tone and a pulse train"
    res = run_edit(scene, prompt, prompt, EditInstruction.reweight((1,), 1.0),
                   _cfg(), 1.0, net, world, PLAN, sched, seed=6, inversion_w=1.0)
    recon = reconstruct(res.trajectory, world.embed_text(prompt),
                        world.null_embedding(), PLAN, sched, net, from_step=4)
    assert float(np.max(np.abs(res.latent - recon[0]))) == 0.0


def test_no_injection_equals_plain_regeneration(setup):
    """cross/self fractions of zero degrade the edit to stored-noise
    regeneration from the skip-depth latent under the target prompt."""
    world, net, sched, scene = setup
    src, tgt = "a tone and a pulse train", "a sweep and a pulse train"
    w = 1.5
    res = run_edit(scene, src, tgt, EditInstruction.replace(),
                   _cfg(cross_replace_frac=0.0, self_replace_frac=0.0,
                        t_e=1),
                   w, net, world, PLAN, sched, seed=8)
    traj = res.trajectory
    ts = traj.timesteps
    z = traj.latents[4].copy()
    tgt_ctx = world.embed_text(tgt)
    null = world.null_embedding()
    for i in range(4, len(ts)):
        t = int(ts[i])
        t_prev = int(ts[i + 1]) if i + 1 < len(ts) else 0
        eps = cfg_epsilon(net, z, t, tgt_ctx, null, w)
        z = ddpm_step(z, eps, t, sched, traj.noises[i], t_prev)
    np.testing.assert_array_equal(res.latent, z[0])
    assert not res.fused_maps


def test_edit_records_and_fused_window(setup):
    world, net, sched, scene = setup
    src, tgt = "a tone and a pulse train", "a chirp and a pulse train"
    res = run_edit(scene, src, tgt, EditInstruction.replace(),
                   _cfg(cross_replace_frac=0.5), 2.0, net, world, PLAN, sched,
                   seed=9)
    denoise = PLAN.steps - 4
    n_cross = int(np.ceil(0.5 * denoise))
    fused_steps = sorted({k[0] for k in res.fused_maps})
    assert fused_steps == list(range(n_cross))
    assert all(k[3] == "cross" for k in res.fused_maps)  # self frac is 0
    src_steps = sorted({k[0] for k in res.source_record.maps})
    assert src_steps == list(range(denoise))
    assert res.config.t_e == n_cross
    assert res.guidance == 2.0
    assert res.spectrogram.min() >= 0.0


def test_edit_self_injection_window(setup):
    world, net, sched, scene = setup
    src, tgt = "a tone and a pulse train", "a chirp and a pulse train"
    res = run_edit(scene, src, tgt, EditInstruction.replace(),
                   _cfg(self_replace_frac=0.25), 1.0, net, world, PLAN, sched,
                   seed=10)
    self_fused = sorted({k[0] for k in res.fused_maps if k[3] == "self"})
    assert self_fused == list(range(int(np.ceil(0.25 * (PLAN.steps - 4)))))


def test_reweight_requires_equal_prompts(setup):
    world, net, sched, scene = setup
    with pytest.raises(ConfigError):
        run_edit(scene, "a tone and a pulse train", "a tone and a sweep",
                 EditInstruction.reweight((1,), 2.0), _cfg(), 1.0, net, world,
                 PLAN, sched, seed=0)


def test_skip_out_of_range_rejected(setup):
    world, net, sched, scene = setup
    with pytest.raises(ConfigError):
        run_edit(scene, "a tone and a pulse train", "a tone and a pulse train",
                 EditInstruction.replace(), _cfg(skip=12), 1.0, net, world,
                 PLAN, sched, seed=0)


def test_extra_regeneration_steps_smoke(setup):
    world, net, sched, scene = setup
    prompt = "a tone and a pulse train"
    res1 = run_edit(scene, prompt, prompt, EditInstruction.replace(),
                    _cfg(extra_steps=3), 1.0, net, world, PLAN, sched, seed=11)
    res2 = run_edit(scene, prompt, prompt, EditInstruction.replace(),
                    _cfg(extra_steps=3), 1.0, net, world, PLAN, sched, seed=11)
    np.testing.assert_array_equal(res1.latent, res2.latent)
    res0 = run_edit(scene, prompt, prompt, EditInstruction.replace(),
                    _cfg(), 1.0, net, world, PLAN, sched, seed=11)
    assert not np.array_equal(res1.latent, res0.latent)


# ----------------------------------------------------------------------
def test_refuse_degenerate_reduces_to_reconstruction(setup):
    world, net, sched, scene = setup
    other, _ = world.compose_scene(
        [EventSpec("chirp", 6, 0.7, 0, 24), EventSpec("noise_burst", 12, 0.9, 36, 20)],
        seed=13)
    cfg = FuserConfig(eta_min=1.0, eta_max=1.0, skip=4)
    res = refuse(scene, "a tone and a pulse train", (1,),
                 other, "a chirp and a noise burst", (),
                 cfg, 1.0, net, world, PLAN, sched, seeds=(3, 4),
                 inversion_w=1.0)
    recon = reconstruct(res.trajectory, world.embed_text("a tone and a pulse train"),
                        world.null_embedding(), PLAN, sched, net, from_step=4)
    assert float(np.max(np.abs(res.latent - recon[0]))) == 0.0


def test_refuse_half_ratio_is_arithmetic_mean_on_selected_columns(setup):
    world, net, sched, scene = setup
    other, _ = world.compose_scene(
        [EventSpec("chirp", 6, 0.7, 0, 24), EventSpec("noise_burst", 12, 0.9, 36, 20)],
        seed=14)
    cfg = FuserConfig(eta_min=0.5, eta_max=0.5, skip=4)
    res = refuse(scene, "a tone and a pulse train", (1,),
                 other, "a chirp and a noise burst", (4, 5),
                 cfg, 1.0, net, world, PLAN, sched, seeds=(5, 6))
    key = next(iter(res.fused_maps))
    m1 = res.source_record.maps[key]
    m2 = res.target_record.maps[key]
    fused = res.fused_maps[key]
    np.testing.assert_allclose(fused[..., 1], 0.5 * m1[..., 1], atol=1e-12)
    np.testing.assert_allclose(fused[..., 4], 0.5 * m2[..., 4], atol=1e-12)
    np.testing.assert_allclose(fused[..., 5], 0.5 * m2[..., 5], atol=1e-12)
    np.testing.assert_array_equal(fused[..., 2], m1[..., 2])


def test_refuse_rejects_overlapping_selections(setup):
    world, net, sched, scene = setup
    with pytest.raises(ConfigError):
        refuse(scene, "a tone and a pulse train", (1, 4),
               scene, "a tone and a pulse train", (4,),
               None, 1.0, net, world, PLAN, sched, seeds=(0, 1))
