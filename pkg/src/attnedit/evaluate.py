"""Test-set evaluation: per-case and aggregate metric tables comparing the
attention-editing pipeline against regeneration and the unedited source."""

from __future__ import annotations

import numpy as np

from .bootstrap import similarity_score
from .editor import EditInstruction, run_edit
from .errors import ConfigError
from .fuser import FuserConfig
from .metrics import frechet_distance, kl_divergence, lsd, region_preservation
from .net import EpsilonNet
from .rng import seed_for
from .sampling import sample, to_spectrogram
from .schedule import InferencePlan, NoiseSchedule
from .world import EditCase, World

METHODS = ("ppae", "regenerate", "unedited")

CSV_HEADER = ("case_id", "method", "lsd", "kl", "fd", "similarity",
              "region_preservation")


def instruction_for(case: EditCase) -> EditInstruction:
    if case.task == "replace":
        return EditInstruction.replace()
    if case.task == "refine":
        return EditInstruction.refine(case.edit_positions_target)
    return EditInstruction.reweight(case.edit_positions_source,
                                    c=case.reweight_alpha)


def edit_case(case: EditCase, cfg: FuserConfig, w: float, net: EpsilonNet,
              world: World, plan: InferencePlan, sched: NoiseSchedule,
              seed: int):
    """Run the editing pipeline on one test case."""
    return run_edit(case.source_scene, case.source_prompt, case.target_prompt,
                    instruction_for(case), cfg, w, net, world, plan, sched,
                    seed=seed)


def evaluate_testset(cases, method: str, world: World, net: EpsilonNet,
                     sched: NoiseSchedule, plan: InferencePlan,
                     cfg: FuserConfig, w: float, seed: int):
    """Per-case metrics plus an aggregate row (which carries the Frechet
    distance between edited and ground-truth feature sets).

    Returns (rows, outputs): CSV-ready rows and the per-case spectrograms.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}")
    outputs = []
    if method == "unedited":
        outputs = [case.source_scene for case in cases]
    elif method == "regenerate":
        for i, case in enumerate(cases):
            lat, _ = sample(net, world.embed_text(case.target_prompt),
                            world.null_embedding(), plan, sched, w,
                            seed=seed_for("eval-regen", seed, i), record=False)
            outputs.append(to_spectrogram(lat))
    else:
        for i, case in enumerate(cases):
            res = edit_case(case, cfg, w, net, world, plan, sched,
                            seed=seed_for("eval-edit", seed, i))
            outputs.append(res.spectrogram)

    rows = []
    sims, lsds, kls, preservations = [], [], [], []
    for i, (case, out) in enumerate(zip(cases, outputs)):
        gt = case.target_scene
        m_lsd = lsd(out, gt)
        m_kl = kl_divergence(world.classify(gt), world.classify(out))
        m_sim = similarity_score(out, world.tokenize(case.target_prompt), world)
        m_rp = region_preservation(case.source_scene, out, case.mask)
        rows.append((i, method, m_lsd, m_kl, "", m_sim, m_rp))
        lsds.append(m_lsd)
        kls.append(m_kl)
        sims.append(m_sim)
        preservations.append(m_rp)

    fd = ""
    if len(cases) >= 9:  # Frechet needs dim+1 = 9 vectors per feature set
        feats_out = world.classifier_features(np.stack(outputs))
        feats_gt = world.classifier_features(np.stack([c.target_scene
                                                       for c in cases]))
        fd = frechet_distance(feats_out, feats_gt)
    rows.append(("all", method, float(np.mean(lsds)), float(np.mean(kls)), fd,
                 float(np.mean(sims)), float(np.mean(preservations))))
    return rows, outputs
