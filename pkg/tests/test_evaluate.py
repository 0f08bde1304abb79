import numpy as np

from attnedit.evaluate import CSV_HEADER, evaluate_testset, instruction_for
from attnedit.fuser import FuserConfig
from attnedit.net import EpsilonNet
from attnedit.schedule import InferencePlan, make_schedule
from attnedit.world import build_edit_testset


def test_evaluate_testset_rows_and_methods(world):
    net = EpsilonNet()
    net.randomize(seed=91)
    sched = make_schedule()
    plan = InferencePlan(steps=8, sampler="ddpm")
    cfg = FuserConfig(skip=3)
    cases = build_edit_testset(world, 2, "replace", seed=51)
    for method in ("ppae", "regenerate", "unedited"):
        rows, outputs = evaluate_testset(cases, method, world, net, sched, plan,
                                         cfg, w=1.5, seed=4)
        assert len(rows) == 3  # 2 cases + aggregate
        assert rows[-1][0] == "all"
        assert all(len(r) == len(CSV_HEADER) for r in rows)
        assert len(outputs) == 2
        for r in rows:
            assert r[2] >= 0 and r[3] >= -1e-12 and r[6] >= 0
    unedited_rows, _ = evaluate_testset(cases, "unedited", world, net, sched,
                                        plan, cfg, w=1.5, seed=4)
    for r in unedited_rows[:-1]:
        assert r[6] == 0.0  # source untouched on its own mask


def test_instruction_for_each_task(world):
    for task in ("replace", "refine", "reweight"):
        case = build_edit_testset(world, 1, task, seed=61)[0]
        instr = instruction_for(case)
        assert instr.task == task
        if task == "reweight":
            assert instr.scale == case.reweight_alpha
            assert instr.columns == case.edit_positions_source
        if task == "refine":
            assert instr.columns == case.edit_positions_target
