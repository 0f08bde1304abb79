"""Guidance-scale bootstrapping: run the edit over a grid of scales, score
every candidate with a pluggable filter, keep the best."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import AttnEditError, ConfigError
from .rng import seed_for
from .world import World


@dataclass(frozen=True)
class GuidanceGrid:
    scales: tuple = (1.0, 3.0, 5.0, 10.0, 25.0)
    steps_heuristic: bool = False  # per-scale inference steps = T / w

    def __post_init__(self):
        if not self.scales:
            raise ConfigError("guidance grid must be non-empty")
        if not all(np.isfinite(self.scales)):
            raise ConfigError("guidance scales must be finite")


def similarity_score(candidate: np.ndarray, target_tokens: np.ndarray,
                     world: World) -> float:
    """Mean classifier probability of the event kinds named in the prompt."""
    kinds = world.kinds_in_tokens(np.asarray(target_tokens))
    if not kinds:
        raise ConfigError("target prompt names no known event kind")
    from .world import EVENT_KINDS

    probs = world.event_probabilities(np.asarray(candidate, dtype=np.float64))
    return float(np.mean([probs[EVENT_KINDS.index(k)] for k in kinds]))


def select(candidates, target_tokens, score_fn):
    """Argmax of the filter over (w, spectrogram) candidates; ties go to the
    smallest w."""
    if not candidates:
        raise ConfigError("no candidates to select from")
    best_idx = 0
    best_score = score_fn(candidates[0][1], target_tokens)
    for i in range(1, len(candidates)):
        s_i = score_fn(candidates[i][1], target_tokens)
        if s_i > best_score or (s_i == best_score
                                and candidates[i][0] < candidates[best_idx][0]):
            best_idx = i
            best_score = s_i
    return candidates[best_idx]


@dataclass
class BootstrapResult:
    guidance: float
    spectrogram: np.ndarray
    edit_result: object
    score_table: list  # (w, score or None, selected flag, diagnostic)
    failures: dict = field(default_factory=dict)


def _run_one(args):
    from .editor import run_edit

    (kwargs, w, seed_w) = args
    try:
        return True, run_edit(w=w, seed=seed_w, **kwargs)
    except AttnEditError as exc:
        return False, f"{type(exc).__name__}: {exc}"


def bootstrap_edit(edit_kwargs: dict, grid: GuidanceGrid, world: World,
                   base_seed: int, score_fn=None, target_tokens=None,
                   workers: int = 1) -> BootstrapResult:
    """Run the edit once per guidance scale (parallelizable across scales;
    per-scale seeds are derived so execution order cannot change results),
    score every finite candidate, return the filter's winner.

    ``edit_kwargs`` are the run_edit arguments minus ``w`` and ``seed``.
    A scale whose edit fails is excluded with a recorded diagnostic; if all
    scales fail the error propagates.
    """
    if score_fn is None:
        def score_fn(spec, toks):
            return similarity_score(spec, toks, world)
    if target_tokens is None:
        tp = edit_kwargs.get("target_prompt")
        target_tokens = world.tokenize(tp) if isinstance(tp, str) else np.asarray(tp)

    jobs = []
    for w in grid.scales:
        seed_w = seed_for("bootstrap", base_seed, float(w))
        kwargs = dict(edit_kwargs)
        if grid.steps_heuristic:
            from dataclasses import replace as dc_replace

            plan = kwargs["plan"]
            sched = kwargs["sched"]
            steps = max(1, min(sched.T, int(round(sched.T / max(float(w), 1.0)))))
            scaled = dc_replace(plan, steps=steps)
            cfg = kwargs["cfg"]
            kwargs["plan"] = scaled
            kwargs["cfg"] = type(cfg)(**{**cfg.__dict__,
                                         "skip": min(cfg.skip, steps - 1),
                                         "t_e": None})
        jobs.append((kwargs, float(w), seed_w))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            raw = list(pool.map(_run_one, jobs))
    else:
        raw = [_run_one(j) for j in jobs]

    candidates = []
    failures = {}
    results = {}
    scored = {}
    for (kwargs, w, _), (ok, res) in zip(jobs, raw):
        if not ok:
            failures[w] = res
            continue
        if not np.all(np.isfinite(res.spectrogram)):
            failures[w] = "non-finite output"
            continue
        try:
            scored[w] = score_fn(res.spectrogram, target_tokens)
        except AttnEditError as exc:
            failures[w] = str(exc)
            continue
        candidates.append((w, res.spectrogram))
        results[w] = res
    if not candidates:
        raise AttnEditError(f"all guidance scales failed: {failures}")

    w_best, spec_best = select(candidates, target_tokens, score_fn)
    score_table = []
    for w in grid.scales:
        w = float(w)
        if w in failures:
            score_table.append((w, None, False, failures[w]))
        else:
            score_table.append((w, scored[w], w == w_best, ""))
    return BootstrapResult(guidance=w_best, spectrogram=spec_best,
                           edit_result=results[w_best], score_table=score_table,
                           failures=failures)
