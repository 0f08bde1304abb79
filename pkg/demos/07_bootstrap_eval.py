"""Guidance bootstrapping and the evaluation table: run one edit across the
scale grid, show the filter's score table, then compare methods on a small
test set."""

from attnedit.bootstrap import GuidanceGrid, bootstrap_edit
from attnedit.editor import EditInstruction
from attnedit.evaluate import CSV_HEADER, evaluate_testset
from attnedit.fuser import FuserConfig
from attnedit.schedule import InferencePlan
from attnedit.world import build_edit_testset
from attnedit.zoo import load_or_train_reference


def main():
    world, net, sched = load_or_train_reference()
    plan = InferencePlan(steps=50, sampler="ddpm")
    cfg = FuserConfig(skip=25)

    case = build_edit_testset(world, 1, "replace", seed=41)[0]
    print("edit:", case.source_prompt, "->", case.target_prompt)
    boot = bootstrap_edit(
        dict(spectrogram=case.source_scene, source_prompt=case.source_prompt,
             target_prompt=case.target_prompt, instr=EditInstruction.replace(),
             cfg=cfg, net=net, world=world, plan=plan, sched=sched),
        GuidanceGrid(), world, base_seed=8)
    print(f"{'w':>6s} {'score':>8s}  selected")
    for w, score, selected, diag in boot.score_table:
        mark = "  <-- winner" if selected else (f"  ({diag})" if diag else "")
        print(f"{w:6.1f} {score if score is None else f'{score:8.3f}'}{mark}")

    print("\n== method comparison on 5 replace cases ==")
    cases = build_edit_testset(world, 5, "replace", seed=42)
    print(",".join(CSV_HEADER))
    for method in ("ppae", "regenerate", "unedited"):
        rows, _ = evaluate_testset(cases, method, world, net, sched, plan, cfg,
                                   w=7.0, seed=1)
        agg = rows[-1]
        print(",".join(str(v) for v in agg))


if __name__ == "__main__":
    main()
