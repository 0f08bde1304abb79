"""Command-line surface: train | sample | invert | edit | refuse | testset | eval.

Configuration precedence is flags > config file > defaults; the resolved
configuration is echoed verbatim into each run's manifest. All randomness
derives from one base seed. Exit codes: 0 success, 2 config error, 3 numeric
failure, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from .attention import record_mean_map
from .bootstrap import GuidanceGrid, bootstrap_edit
from .editor import EditInstruction, EditResult, refuse, run_edit
from .errors import ConfigError, NumericError
from .evaluate import CSV_HEADER, evaluate_testset
from .fileio import (
    load_spectrogram_csv,
    load_tensors,
    read_kv,
    save_graymap,
    save_spectrogram_csv,
    save_tensors,
    write_csv,
    write_kv,
)
from .fuser import FuserConfig
from .inversion import (
    ddim_invert,
    edit_friendly_invert,
    null_text_invert,
    reconstruct,
    save_trajectory,
)
from .net import EpsilonNet
from .rng import seed_for
from .sampling import encode_spectrogram, sample, to_spectrogram
from .schedule import InferencePlan, make_schedule
from .training import TrainConfig, train
from .world import EditCase, EventClassifier, World, WorldConfig, build_edit_testset

DEFAULTS = {
    "freq_bins": 32, "frames": 64, "max_tokens": 16, "embed_dim": 32,
    "world_seed": 0,
    "timesteps": 1000, "beta_min": 1e-4, "beta_max": 2e-2,
    "steps": 100, "sampler": "ddpm", "eta": 0.0,
    "scheduler": "cosine_annealing", "eta_min": 0.0, "eta_max": 1.0,
    "t_s": 0, "t_e": "", "cross_replace": 0.8, "self_replace": 0.0,
    "skip": 50, "extra_steps": 0,
    "w": "", "seed": 0, "workers": 0,
    "epochs": 120, "batches_per_epoch": 100, "batch": 16, "lr": 0.15,
    "classifier_steps": 3000, "checkpoint": "", "classifier": "", "out": "out",
}

_FLOATS = {"beta_min", "beta_max", "eta", "eta_min", "eta_max",
           "cross_replace", "self_replace", "lr"}
_INTS = {"freq_bins", "frames", "max_tokens", "embed_dim", "world_seed",
         "timesteps", "steps", "t_s", "skip", "extra_steps", "seed", "workers",
         "epochs", "batches_per_epoch", "batch", "classifier_steps"}


def resolve_config(args) -> dict:
    cfg = dict(DEFAULTS)
    if args.config:
        for k, v in read_kv(args.config).items():
            if k not in cfg:
                raise ConfigError(f"unknown config key {k!r}")
            cfg[k] = v
    flag_map = {
        "seed": args.seed, "out": args.out, "steps": args.steps, "w": args.w,
        "scheduler": args.scheduler, "cross_replace": args.cross_replace,
        "self_replace": args.self_replace, "skip": args.skip,
        "workers": args.workers, "checkpoint": getattr(args, "checkpoint", None),
        "classifier": getattr(args, "classifier", None),
    }
    for k, v in flag_map.items():
        if v is not None:
            cfg[k] = v
    for k in _FLOATS:
        cfg[k] = float(cfg[k])
    for k in _INTS:
        cfg[k] = int(cfg[k])
    if cfg["workers"] <= 0:  # default: available parallelism
        cfg["workers"] = os.cpu_count() or 1
    return cfg


def build_world(cfg: dict) -> World:
    wc = WorldConfig(freq_bins=cfg["freq_bins"], frames=cfg["frames"],
                     max_tokens=cfg["max_tokens"], embed_dim=cfg["embed_dim"],
                     seed=cfg["world_seed"])
    return World(wc)


def load_net(cfg: dict, world: World) -> EpsilonNet:
    if not cfg["checkpoint"]:
        raise ConfigError("this command needs --checkpoint")
    net = EpsilonNet(freq_bins=world.config.freq_bins, frames=world.config.frames,
                     text_dim=world.config.embed_dim, seed=0)
    tensors = load_tensors(cfg["checkpoint"])
    missing = set(net.params) - set(tensors)
    if missing:
        raise ConfigError(f"checkpoint misses tensors: {sorted(missing)[:3]} ...")
    net.params = {k: np.asarray(v, dtype=net.dtype) for k, v in tensors.items()}
    return net


def load_classifier(cfg: dict, world: World) -> None:
    if not cfg["classifier"]:
        raise ConfigError("this command needs --classifier")
    clf = EventClassifier(world.config)
    clf.params = {k: np.asarray(v, dtype=clf.dtype)
                  for k, v in load_tensors(cfg["classifier"]).items()}
    clf.fitted = True
    world.classifier = clf


def fuser_config(cfg: dict, overrides: dict | None = None) -> FuserConfig:
    kv = dict(
        scheduler=cfg["scheduler"], eta_min=cfg["eta_min"], eta_max=cfg["eta_max"],
        t_s=cfg["t_s"], t_e=int(cfg["t_e"]) if str(cfg["t_e"]).strip() else None,
        cross_replace_frac=cfg["cross_replace"],
        self_replace_frac=cfg["self_replace"],
        skip=cfg["skip"], extra_steps=cfg["extra_steps"],
    )
    if overrides:
        kv.update(overrides)
    return FuserConfig(**kv)


def plan_config(cfg: dict) -> InferencePlan:
    return InferencePlan(steps=cfg["steps"], sampler=cfg["sampler"], eta=cfg["eta"])


def write_manifest(outdir: Path, cfg: dict, extra: dict | None = None) -> None:
    manifest = {k: cfg[k] for k in sorted(cfg)}
    if extra:
        manifest.update(extra)
    write_kv(outdir / "manifest.txt", manifest)


class _Workdir:
    """Artifacts are staged in a work directory, promoted on success, and
    quarantined on failure."""

    def __init__(self, out: str, label: str):
        self.final = Path(out) / label
        self.path = Path(out) / f"_work_{label}"
        if self.path.exists():
            shutil.rmtree(self.path)
        self.path.mkdir(parents=True, exist_ok=True)

    def promote(self):
        if self.final.exists():
            shutil.rmtree(self.final)
        self.path.rename(self.final)
        return self.final

    def quarantine(self):
        q = self.final.parent / "quarantine" / self.final.name
        q.parent.mkdir(parents=True, exist_ok=True)
        if q.exists():
            shutil.rmtree(q)
        if self.path.exists():
            self.path.rename(q)
        return q


def _export_spectrogram(outdir: Path, name: str, grid: np.ndarray) -> None:
    save_spectrogram_csv(outdir / f"{name}.csv", grid)
    save_graymap(outdir / f"{name}.pgm", grid)


def _export_edit_result(outdir: Path, res: EditResult) -> None:
    _export_spectrogram(outdir, "edited", res.spectrogram)
    steps = sorted({k[0] for k in res.fused_maps})
    for s in steps:
        maps = [v for k, v in res.fused_maps.items() if k[0] == s and k[3] == "cross"]
        if not maps:
            continue
        finest = max(m.shape[-2] for m in maps)
        acc = None
        for m in maps:
            m2 = m[0] if m.ndim == 3 else m
            reps = finest // m2.shape[0]
            up = np.repeat(m2, reps, axis=0)
            acc = up if acc is None else acc + up
        save_graymap(outdir / "fused_maps" / f"step_{s:04d}.pgm", acc / len(maps))


# ----------------------------------------------------------------------
def cmd_train(cfg: dict) -> None:
    work = _Workdir(cfg["out"], "train")
    try:
        world = build_world(cfg)
        from .world import save_world_config

        save_world_config(work.path / "world.txt", world.config)
        world.fit_classifier(steps=cfg["classifier_steps"],
                             seed=seed_for("classifier", cfg["seed"]))
        save_tensors(work.path / "classifier.ckpt", world.classifier.params)
        sched = make_schedule(cfg["timesteps"], cfg["beta_min"], cfg["beta_max"])
        net = EpsilonNet(freq_bins=cfg["freq_bins"], frames=cfg["frames"],
                         text_dim=cfg["embed_dim"], seed=0)
        tc = TrainConfig(epochs=cfg["epochs"],
                         batches_per_epoch=cfg["batches_per_epoch"],
                         batch=cfg["batch"], lr=cfg["lr"], seed=cfg["seed"])
        curve = train(net, world, sched, tc)
        save_tensors(work.path / "model.ckpt", net.params)
        write_csv(work.path / "loss.csv", ("step", "loss"), curve)
        write_manifest(work.path, cfg)
    except BaseException:
        work.quarantine()
        raise
    print(f"trained model written to {work.promote()}")


def cmd_sample(cfg: dict, prompt: str, n: int, export_attention: bool) -> None:
    work = _Workdir(cfg["out"], "sample")
    try:
        world = build_world(cfg)
        net = load_net(cfg, world)
        sched = make_schedule(cfg["timesteps"], cfg["beta_min"], cfg["beta_max"])
        plan = plan_config(cfg)
        w = float(cfg["w"]) if str(cfg["w"]).strip() else 1.0
        record = export_attention and n == 1
        lat, rec = sample(net, world.embed_text(prompt), world.null_embedding(),
                          plan, sched, w, seed=cfg["seed"], n=n, record=record)
        grids = [to_spectrogram(lat)] if n == 1 else [to_spectrogram(g) for g in lat]
        for i, g in enumerate(grids):
            _export_spectrogram(work.path, f"sample_{i:03d}", g)
        if record and rec is not None:
            for (s, layer, head, kind), m in rec.maps.items():
                write_csv(work.path / "attention" /
                          f"step{s:04d}_{layer}_h{head}.csv",
                          [f"tok{j}" for j in range(m.shape[-1])],
                          [list(row) for row in np.asarray(m[0])])
            mean = record_mean_map(rec, len(plan.timesteps(sched)) - 1)
            save_graymap(work.path / "attention" / "mean_final_step.pgm", mean)
        write_manifest(work.path, cfg, {"prompt": prompt, "n": n})
    except BaseException:
        work.quarantine()
        raise
    print(f"samples written to {work.promote()}")


def cmd_invert(cfg: dict, input_path: str, prompt: str, method: str) -> None:
    work = _Workdir(cfg["out"], "invert")
    try:
        world = build_world(cfg)
        net = load_net(cfg, world)
        sched = make_schedule(cfg["timesteps"], cfg["beta_min"], cfg["beta_max"])
        plan = plan_config(cfg)
        spec = load_spectrogram_csv(input_path)
        x0 = encode_spectrogram(spec)
        cond = world.embed_text(prompt)
        null = world.null_embedding()
        w = float(cfg["w"]) if str(cfg["w"]).strip() else 0.0
        if method == "ddpm_edit_friendly":
            plan = dc_replace(plan, sampler="ddpm")
            traj = edit_friendly_invert(x0, cond, null, plan, sched, net,
                                        seed=cfg["seed"], w=w)
        elif method == "ddim":
            plan = dc_replace(plan, sampler="ddim", eta=0.0)
            traj = ddim_invert(x0, cond, null, plan, sched, net, w=w)
        elif method == "null_text":
            plan = dc_replace(plan, sampler="ddim", eta=0.0)
            traj = null_text_invert(x0, cond, null, plan, sched, net)
        else:
            raise ConfigError(f"unknown inversion method {method!r}")
        save_trajectory(work.path / "trajectory.ckpt", traj)
        recon = reconstruct(traj, cond, null, plan, sched, net)[0]
        err = float(np.max(np.abs(recon - x0)))
        rel = float(np.linalg.norm(recon - x0) / max(np.linalg.norm(x0), 1e-12))
        write_kv(work.path / "reconstruction.txt",
                 {"max_abs_error": f"{err:.6g}", "relative_l2_error": f"{rel:.6g}"})
        _export_spectrogram(work.path, "reconstruction", to_spectrogram(recon))
        write_manifest(work.path, cfg, {"input": input_path, "prompt": prompt,
                                        "method": method})
    except BaseException:
        work.quarantine()
        raise
    print(f"trajectory written to {work.promote()}")


def _parse_selection(text: str):
    text = text.strip()
    if not text:
        return ()
    return tuple(int(v) for v in text.split(","))


def cmd_edit(cfg: dict, edit_spec_path: str) -> None:
    work = _Workdir(cfg["out"], "edit")
    try:
        spec_kv = read_kv(edit_spec_path)
        world = build_world(cfg)
        net = load_net(cfg, world)
        sched = make_schedule(cfg["timesteps"], cfg["beta_min"], cfg["beta_max"])
        plan = plan_config(cfg)

        task = spec_kv.get("task", "replace")
        source = load_spectrogram_csv(spec_kv["source"])
        source_prompt = spec_kv["source_prompt"]
        target_prompt = spec_kv.get("target_prompt", source_prompt)
        columns = _parse_selection(spec_kv.get("columns", ""))
        c = float(spec_kv.get("c", 1.0))
        seed = int(spec_kv.get("seed", cfg["seed"]))
        inversion = spec_kv.get("inversion", "ddpm_edit_friendly")
        fuser_overrides = {}
        for key in ("scheduler",):
            if key in spec_kv:
                fuser_overrides[key] = spec_kv[key]
        for key in ("eta_min", "eta_max", "cross_replace_frac",
                    "self_replace_frac"):
            if key in spec_kv:
                fuser_overrides[key] = float(spec_kv[key])
        for key in ("t_s", "t_e", "skip", "extra_steps"):
            if key in spec_kv:
                fuser_overrides[key] = int(spec_kv[key])
        fcfg = fuser_config(cfg, fuser_overrides)

        if task == "replace":
            instr = EditInstruction.replace()
        elif task == "refine":
            instr = EditInstruction.refine(columns)
        elif task == "reweight":
            instr = EditInstruction.reweight(columns, c)
        else:
            raise ConfigError(f"unknown edit task {task!r}")

        grid_text = spec_kv.get("w_grid", "")
        if not grid_text and "," in str(cfg["w"]):
            grid_text = str(cfg["w"])
        kwargs = dict(spectrogram=source, source_prompt=source_prompt,
                      target_prompt=target_prompt, instr=instr, cfg=fcfg,
                      net=net, world=world, plan=plan, sched=sched,
                      inversion=inversion)
        if grid_text:
            load_classifier(cfg, world)
            grid = GuidanceGrid(tuple(float(v) for v in grid_text.split(",")))
            boot = bootstrap_edit(kwargs, grid, world, base_seed=seed,
                                  workers=cfg["workers"])
            res = boot.edit_result
            write_csv(work.path / "scores.csv",
                      ("w", "score", "selected", "diagnostic"),
                      [(w_, "" if s is None else s, int(sel), diag)
                       for w_, s, sel, diag in boot.score_table])
            chosen_w = boot.guidance
        else:
            w = float(spec_kv.get("w", cfg["w"] if str(cfg["w"]).strip() else 1.0))
            res = run_edit(w=w, seed=seed, **kwargs)
            chosen_w = w
        _export_edit_result(work.path, res)
        write_manifest(work.path, cfg,
                       {**{f"edit.{k}": v for k, v in sorted(spec_kv.items())},
                        "resolved_w": chosen_w,
                        "resolved_t_e": res.config.t_e})
    except BaseException:
        work.quarantine()
        raise
    print(f"edit written to {work.promote()}")


def cmd_refuse(cfg: dict, input_a: str, prompt_a: str, select_a: str,
               input_b: str, prompt_b: str, select_b: str) -> None:
    work = _Workdir(cfg["out"], "refuse")
    try:
        world = build_world(cfg)
        net = load_net(cfg, world)
        sched = make_schedule(cfg["timesteps"], cfg["beta_min"], cfg["beta_max"])
        plan = dc_replace(plan_config(cfg), sampler="ddpm")
        fcfg = fuser_config(cfg, {"eta_min": cfg["eta_min"] or 0.4,
                                  "eta_max": cfg["eta_max"] or 0.6})
        w = float(cfg["w"]) if str(cfg["w"]).strip() else 1.0
        res = refuse(load_spectrogram_csv(input_a), prompt_a,
                     _parse_selection(select_a),
                     load_spectrogram_csv(input_b), prompt_b,
                     _parse_selection(select_b),
                     fcfg, w, net, world, plan, sched,
                     seeds=(seed_for("refuse-a", cfg["seed"]),
                            seed_for("refuse-b", cfg["seed"])))
        _export_edit_result(work.path, res)
        write_manifest(work.path, cfg, {"input_a": input_a, "input_b": input_b,
                                        "prompt_a": prompt_a, "prompt_b": prompt_b,
                                        "select_a": select_a, "select_b": select_b})
    except BaseException:
        work.quarantine()
        raise
    print(f"refusion written to {work.promote()}")


def cmd_testset(cfg: dict, task: str, n: int) -> None:
    work = _Workdir(cfg["out"], f"testset_{task}")
    try:
        world = build_world(cfg)
        cases = build_edit_testset(world, n, task, cfg["seed"])
        for i, case in enumerate(cases):
            cdir = work.path / f"case_{i:03d}"
            save_spectrogram_csv(cdir / "source.csv", case.source_scene)
            save_spectrogram_csv(cdir / "target.csv", case.target_scene)
            save_spectrogram_csv(cdir / "mask.csv", case.mask.astype(np.float64))
            write_kv(cdir / "case.txt", {
                "task": case.task,
                "source_prompt": case.source_prompt,
                "target_prompt": case.target_prompt,
                "edit_positions_source": ",".join(map(str, case.edit_positions_source)),
                "edit_positions_target": ",".join(map(str, case.edit_positions_target)),
                "reweight_alpha": ("" if case.reweight_alpha is None
                                   else f"{case.reweight_alpha:.10g}"),
                "seed": case.seed,
            })
        write_manifest(work.path, cfg, {"task": task, "n": n})
    except BaseException:
        work.quarantine()
        raise
    print(f"testset written to {work.promote()}")


def load_testset_dir(path) -> list:
    cases = []
    for cdir in sorted(Path(path).glob("case_*")):
        kv = read_kv(cdir / "case.txt")
        source = load_spectrogram_csv(cdir / "source.csv")
        target = load_spectrogram_csv(cdir / "target.csv")
        mask = load_spectrogram_csv(cdir / "mask.csv") > 0.5
        cases.append(EditCase(
            task=kv["task"], source_events=(), target_events=(),
            source_prompt=kv["source_prompt"], target_prompt=kv["target_prompt"],
            source_scene=source, target_scene=target, mask=mask,
            edit_positions_source=tuple(int(v) for v in
                                        kv["edit_positions_source"].split(",")),
            edit_positions_target=tuple(int(v) for v in
                                        kv["edit_positions_target"].split(",")),
            reweight_alpha=float(kv["reweight_alpha"]) if kv["reweight_alpha"] else None,
            seed=int(kv["seed"]),
        ))
    if not cases:
        raise ConfigError(f"no cases found under {path}")
    return cases


def cmd_eval(cfg: dict, testset_dir: str, methods: str) -> None:
    work = _Workdir(cfg["out"], "eval")
    try:
        world = build_world(cfg)
        net = load_net(cfg, world)
        load_classifier(cfg, world)
        sched = make_schedule(cfg["timesteps"], cfg["beta_min"], cfg["beta_max"])
        plan = plan_config(cfg)
        fcfg = fuser_config(cfg)
        cases = load_testset_dir(testset_dir)
        w = float(cfg["w"]) if str(cfg["w"]).strip() else 5.0
        rows = []
        for method in methods.split(","):
            r, _ = evaluate_testset(cases, method.strip(), world, net, sched,
                                    plan, fcfg, w, seed=cfg["seed"])
            rows.extend(r)
        write_csv(work.path / "metrics.csv", CSV_HEADER, rows)
        write_manifest(work.path, cfg, {"testset": testset_dir, "methods": methods})
    except BaseException:
        work.quarantine()
        raise
    print(f"evaluation written to {work.promote()}")


# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="attnedit",
                                 description="toy spectrogram diffusion editing")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, classifier=False):
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--w", default=None)
        p.add_argument("--scheduler", default=None)
        p.add_argument("--cross-replace", dest="cross_replace", type=float,
                       default=None)
        p.add_argument("--self-replace", dest="self_replace", type=float,
                       default=None)
        p.add_argument("--skip", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        if checkpoint:
            p.add_argument("--checkpoint", default=None)
        if classifier:
            p.add_argument("--classifier", default=None)

    p = sub.add_parser("train", help="train the classifier and diffusion model")
    common(p)

    p = sub.add_parser("sample", help="generate from a prompt")
    common(p, checkpoint=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--export-attention", action="store_true")

    p = sub.add_parser("invert", help="invert a spectrogram into noise space")
    common(p, checkpoint=True)
    p.add_argument("--input", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--method", default="ddpm_edit_friendly",
                   choices=("ddpm_edit_friendly", "ddim", "null_text"))

    p = sub.add_parser("edit", help="run an edit described by an edit-spec file")
    common(p, checkpoint=True, classifier=True)
    p.add_argument("--edit-spec", required=True)

    p = sub.add_parser("refuse", help="fuse components of two sources")
    common(p, checkpoint=True)
    p.add_argument("--input-a", required=True)
    p.add_argument("--prompt-a", required=True)
    p.add_argument("--select-a", default="")
    p.add_argument("--input-b", required=True)
    p.add_argument("--prompt-b", required=True)
    p.add_argument("--select-b", default="")

    p = sub.add_parser("testset", help="build an edit test set")
    common(p)
    p.add_argument("--task", required=True, choices=("replace", "refine", "reweight"))
    p.add_argument("--n", type=int, default=10)

    p = sub.add_parser("eval", help="evaluate methods on a test set")
    common(p, checkpoint=True, classifier=True)
    p.add_argument("--testset", required=True)
    p.add_argument("--methods", default="ppae,regenerate,unedited")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "train":
            cmd_train(cfg)
        elif args.command == "sample":
            cmd_sample(cfg, args.prompt, args.n, args.export_attention)
        elif args.command == "invert":
            cmd_invert(cfg, args.input, args.prompt, args.method)
        elif args.command == "edit":
            cmd_edit(cfg, args.edit_spec)
        elif args.command == "refuse":
            cmd_refuse(cfg, args.input_a, args.prompt_a, args.select_a,
                       args.input_b, args.prompt_b, args.select_b)
        elif args.command == "testset":
            cmd_testset(cfg, args.task, args.n)
        elif args.command == "eval":
            cmd_eval(cfg, args.testset, args.methods)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
