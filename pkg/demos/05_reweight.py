"""Reweighting: scale one token's attention column by c and watch the
classifier's belief in that event follow."""

from attnedit.editor import EditInstruction, run_edit
from attnedit.fuser import FuserConfig
from attnedit.schedule import InferencePlan
from attnedit.world import EVENT_KINDS, build_edit_testset
from attnedit.zoo import load_or_train_reference


def main():
    world, net, sched = load_or_train_reference()
    plan = InferencePlan(steps=100, sampler="ddpm")
    cfg = FuserConfig()

    case = build_edit_testset(world, 1, "reweight", seed=33)[0]
    kinds = world.kinds_in_tokens(world.tokenize(case.source_prompt))
    target_kind = kinds[1]
    other_kind = kinds[0]
    print("prompt:", case.source_prompt)
    print(f"reweighting the '{target_kind}' token span {case.edit_positions_source}")

    print(f"{'c':>5s} {'p(' + target_kind + ')':>16s} {'p(' + other_kind + ')':>16s}")
    for c in (2.0, 1.0, 0.0, -1.0, -2.0):
        instr = EditInstruction.reweight(case.edit_positions_source, c)
        res = run_edit(case.source_scene, case.source_prompt, case.source_prompt,
                       instr, cfg, w=7.0, net=net, world=world, plan=plan,
                       sched=sched, seed=6)
        probs = world.event_probabilities(res.spectrogram)
        print(f"{c:5.1f} {probs[EVENT_KINDS.index(target_kind)]:16.3f} "
              f"{probs[EVENT_KINDS.index(other_kind)]:16.3f}")


if __name__ == "__main__":
    main()
