"""Refusion: take one event from each of two scenes and fuse their attention
maps into a single output (balanced eta bounds 0.4/0.6)."""

from pathlib import Path

from attnedit.editor import refuse
from attnedit.fileio import save_graymap
from attnedit.fuser import FuserConfig
from attnedit.schedule import InferencePlan
from attnedit.world import EVENT_KINDS, EventSpec
from attnedit.zoo import load_or_train_reference

OUT = Path(__file__).parent / "out" / "refusion"


def main():
    world, net, sched = load_or_train_reference()
    plan = InferencePlan(steps=100, sampler="ddpm")

    scene_a, tok_a = world.compose_scene(
        [EventSpec("tone", 10, 0.9, 2, 26), EventSpec("pulse_train", 20, 0.8, 34, 24)],
        seed=11)
    scene_b, tok_b = world.compose_scene(
        [EventSpec("chirp", 6, 0.8, 0, 24), EventSpec("noise_burst", 18, 0.9, 36, 22)],
        seed=12)
    prompt_a = world.detokenize(tok_a)
    prompt_b = world.detokenize(tok_b)
    print("source A:", prompt_a, " -> keeping 'tone' (position 1)")
    print("source B:", prompt_b, " -> taking 'noise burst' (positions 4,5)")

    res = refuse(scene_a, prompt_a, (1,), scene_b, prompt_b, (4, 5),
                 FuserConfig(eta_min=0.4, eta_max=0.6), w=7.0, net=net,
                 world=world, plan=plan, sched=sched, seeds=(1, 2))
    probs = world.event_probabilities(res.spectrogram)
    print("fused output classifier probabilities:")
    for kind, p in zip(EVENT_KINDS, probs):
        print(f"  {kind:12s} {p:.3f}")

    save_graymap(OUT / "source_a.pgm", scene_a)
    save_graymap(OUT / "source_b.pgm", scene_b)
    save_graymap(OUT / "refused.pgm", res.spectrogram)
    print(f"images in {OUT}")


if __name__ == "__main__":
    main()
