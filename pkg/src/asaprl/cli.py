"""Command-line entry point: ``asaprl <command> [options]``.

Every command writes into an output directory (``--out``, or
``$ASAPRL_OUT_DIR/<command>`` when the flag is omitted) together with a
``manifest.json`` describing the run.  Exit codes: 0 success, 1 runtime or
data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from . import __version__
from .agent.config import PRIOR_MODES, TrainConfig
from .agent.pretrain import (
    load_actor,
    load_pretrained,
    pretrain_pipeline,
    read_rollouts,
    save_pretrained,
    write_rollouts,
)
from .agent.train import evaluate, train, write_curve
from .expert import (
    DemoFormatError,
    ExpertQualityError,
    demo_observations,
    read_demonstrations,
    read_skill_records,
    run_expert,
    write_demonstrations,
    write_skill_records,
)
from .experiments import METRICS, SUITES, ExperimentConfig, Pipeline, ablation_grid, median_curves, run_rows
from .recovery import RecoveryConfig, annotate_demonstrations, recovery_report
from .sim.scenario import PRESETS, ScenarioConfig, load_scenario, preset, toml_loads
from .skills import SkillBounds

log = logging.getLogger("asaprl")

OUT_ENV = "ASAPRL_OUT_DIR"


class UsageError(Exception):
    pass


# ------------------------------------------------------------------ manifest
def _version_stamp() -> dict:
    stamp = {"version": __version__, "git": None}
    try:
        res = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if res.returncode == 0:
            stamp["git"] = res.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return stamp


@dataclass
class RunManifest:
    command: str
    config: dict
    stamp: dict = field(default_factory=_version_stamp)
    outputs: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    status: str = "running"

    def write(self, out_dir: Path) -> None:
        path = out_dir / "manifest.json"
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        tmp.replace(path)


def _write_json(path: Path, data) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    tmp.replace(path)


def _write_rows(path: Path, fieldnames, rows: list[dict]) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fieldnames), lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
    tmp.replace(path)


# -------------------------------------------------------------------- config
def read_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    text = p.read_text()
    try:
        if p.suffix == ".toml":
            return toml_loads(text)
        return json.loads(text)
    except ValueError as exc:
        raise UsageError(f"cannot parse config file {path}: {exc}") from None


def resolve_scenario(name: str | None, file_cfg: dict, **overrides) -> ScenarioConfig:
    """Preset name or scenario file, then config-file fields, then flags."""
    section = dict(file_cfg.get("scenario", {}))
    if name is not None and Path(name).suffix in (".json", ".toml") and Path(name).is_file():
        return load_scenario(name, **section, **overrides)
    kind = name or section.pop("kind", "corridor")
    section.pop("kind", None)
    if kind not in PRESETS:
        raise UsageError(f"unknown scenario {kind!r}; choose from {sorted(PRESETS)} or pass a scenario file")
    return preset(kind, **section, **overrides)


def resolve_train(file_cfg: dict, **overrides) -> TrainConfig:
    data = {**file_cfg.get("train", {}), **{k: v for k, v in overrides.items() if v is not None}}
    return TrainConfig.from_dict(data)


def resolve_experiment(args, file_cfg: dict, **train_overrides) -> ExperimentConfig:
    base = ExperimentConfig.from_dict({k: v for k, v in file_cfg.items() if k not in ("scenario", "train")})
    return replace(base, scenario=resolve_scenario(args.scenario, file_cfg),
                   train=resolve_train(file_cfg, **train_overrides))


def out_dir(args) -> Path:
    if args.out:
        path = Path(args.out)
    elif os.environ.get(OUT_ENV):
        path = Path(os.environ[OUT_ENV]) / args.command
    else:
        raise UsageError(f"--out is required (or set {OUT_ENV})")
    path.mkdir(parents=True, exist_ok=True)
    return path


# ------------------------------------------------------------------ commands
def cmd_demo_collect(args, file_cfg: dict, out: Path, manifest: RunManifest) -> None:
    exp = resolve_experiment(args, file_cfg)
    manifest.config.update(exp.to_dict(), episodes=args.episodes, seed=args.seed)
    manifest.write(out)
    demos, stats = run_expert(exp.scenario, exp.expert, args.episodes, args.seed, min_success=args.min_success)
    path = out / "demos.jsonl"
    write_demonstrations(path, demos)
    _write_json(out / "expert_stats.json", stats)
    manifest.outputs.update(demos=str(path), stats=str(out / "expert_stats.json"))
    print(f"{len(demos)} demonstrations ({stats['successes']}/{stats['episodes']} successful) -> {path}")


def _observations_or_none(_i, demo):
    try:
        return demo_observations(demo)
    except DemoFormatError as exc:
        log.warning("demonstration (seed %d) does not replay; records carry no observations (%s)", demo.seed, exc)
        return None


def cmd_recover(args, file_cfg: dict, out: Path, manifest: RunManifest) -> None:
    rc = dict(file_cfg.get("recovery", {}))
    if args.n_starts is not None:
        rc["n_starts"] = args.n_starts
    if args.weights is not None:
        rc["weights"] = args.weights
    if args.T is not None:
        rc["T"] = args.T
    if "weights" in rc:
        rc["weights"] = tuple(rc["weights"])
    cfg = RecoveryConfig(**rc)
    manifest.config.update(recovery={**asdict(cfg), "weights": list(cfg.weights)}, demos=args.demos)
    manifest.write(out)
    demos = read_demonstrations(args.demos)
    records = annotate_demonstrations(demos, SkillBounds(), cfg, observe=_observations_or_none)
    report = recovery_report(records)
    scenario = demos[0].scenario.to_dict() if demos else None
    path = out / "dtheta.jsonl"
    write_skill_records(path, records, {"T": cfg.T, "dt": cfg.dt, "scenario": scenario, "source": str(args.demos)})
    _write_json(out / "recovery_report.json", report)
    manifest.outputs.update(dtheta=str(path), report=str(out / "recovery_report.json"))
    print(f"{report['n_records']} segments, convergence rate {report['convergence_rate']:.3f}, "
          f"mean residual {report['mean_residual']:.3g} -> {path}")


def cmd_pretrain(args, file_cfg: dict, out: Path, manifest: RunManifest) -> None:
    records, meta = read_skill_records(args.dtheta)
    T = int(meta.get("T", 10))
    scenario = resolve_scenario(args.scenario, file_cfg)
    cfg = resolve_train(file_cfg, T=T, seed=args.seed)
    manifest.config.update(scenario=scenario.to_dict(), train=cfg.to_dict(), dtheta=args.dtheta)
    manifest.write(out)
    arts, rollouts, stats = pretrain_pipeline(records, scenario, cfg)
    paths = save_pretrained(out, arts)
    write_rollouts(out / "rollouts.jsonl", rollouts)
    rows = []
    for stage in ("actor", "critic"):
        for r in stats[stage]["curve"]:
            rows.append({"stage": stage, "iteration": r["iteration"], "loss": r["loss"],
                         "heldout": r.get("heldout_ll", r.get("heldout_td"))})
    _write_rows(out / "pretrain_curve.csv", ("stage", "iteration", "loss", "heldout"), rows)
    summary = {k: {kk: vv for kk, vv in v.items() if kk != "curve"} for k, v in stats.items()}
    _write_json(out / "pretrain_stats.json", summary)
    manifest.outputs.update({k: str(v) for k, v in paths.items()}, rollouts=str(out / "rollouts.jsonl"),
                            curve=str(out / "pretrain_curve.csv"))
    print(f"actor held-out log-likelihood {summary['actor']['heldout_ll_before']:.2f} -> "
          f"{summary['actor']['heldout_ll_after']:.2f}; {len(rollouts)} rollout transitions -> {out}")


def _load_prior(pretrained: str, mode: str, T: int, prefill: bool):
    root = Path(pretrained)
    critic = root / "critic.ckpt" if mode == "double_init" else None
    arts = load_pretrained(root / "actor.ckpt", critic)
    if int(arts.meta.get("T", T)) != T:
        raise ValueError(f"pretrained actor was trained at T={arts.meta.get('T')}, run requested T={T}")
    rollouts = None
    if prefill and mode == "double_init" and (root / "rollouts.jsonl").is_file():
        rollouts = read_rollouts(root / "rollouts.jsonl")
    return arts, rollouts


def figure_spec(curve_file: str, series: list[str], title: str) -> dict:
    return {"title": title, "data": curve_file, "x": {"field": "env_steps", "label": "environment steps"},
            "series": series,
            "panels": [{"y": m, "label": m.replace("_", " ")} for m in METRICS]}


def cmd_train(args, file_cfg: dict, out: Path, manifest: RunManifest) -> None:
    scenario = resolve_scenario(args.scenario, file_cfg)
    cfg = resolve_train(file_cfg, prior_mode=args.prior_mode, T=args.T, seed=args.seed,
                        total_env_steps=args.steps, eval_every=args.eval_every, eval_episodes=args.eval_episodes)
    manifest.config.update(scenario=scenario.to_dict(), train=cfg.to_dict(), pretrained=args.pretrained)
    manifest.write(out)
    arts, rollouts = None, None
    if cfg.prior_mode == "no_prior":
        if args.pretrained:
            log.warning("no_prior ignores --pretrained")
    else:
        if not args.pretrained:
            raise UsageError(f"--pretrained is required for prior mode {cfg.prior_mode}")
        arts, rollouts = _load_prior(args.pretrained, cfg.prior_mode, cfg.T, not args.no_prefill)
    res = train(cfg, scenario, arts, out, prefill=rollouts)
    _write_json(out / "figure.json", figure_spec("curve.csv", [cfg.prior_mode], f"{scenario.kind} T={cfg.T}"))
    manifest.outputs.update({k: str(v) for k, v in res.paths.items()}, figure=str(out / "figure.json"))
    last = res.curve[-1]
    print(f"{res.env_steps} env steps, {res.updates} updates; final reward {last['reward']:.2f}, "
          f"success {last['success']:.2f} -> {out}")


def format_table(summary: dict) -> str:
    lines = [f"episodes: {summary['episodes']}"]
    titles = {"stage1": "stage 1", "stage2": "stage 2", "stage3": "stage 3"}
    for stage, name in titles.items():
        items = ", ".join(f"{k} {v:.3f}" for k, v in summary[stage].items())
        lines.append(f"{name}: {items or '-'}")
    return "\n".join(lines)


def cmd_eval(args, file_cfg: dict, out: Path, manifest: RunManifest) -> None:
    scenario = resolve_scenario(args.scenario, file_cfg)
    actor, meta = load_actor(args.checkpoint)
    T = args.T or int(meta.get("T", 10))
    manifest.config.update(scenario=scenario.to_dict(), checkpoint=args.checkpoint, T=T,
                           episodes=args.episodes, seed=args.seed)
    manifest.write(out)
    summary = evaluate(actor, scenario, args.episodes, args.seed, T)
    table = format_table(summary)
    print(table)
    (out / "metrics.txt").write_text(table + "\n")
    _write_json(out / "metrics.json", {k: v for k, v in summary.items()})
    manifest.outputs.update(metrics=str(out / "metrics.json"), table=str(out / "metrics.txt"))


def _ablate_one(job):
    pipeline, mode, T, seed, run_dir = job
    return pipeline.run(mode, T, seed, run_dir).curve


def cmd_ablate(args, file_cfg: dict, out: Path, manifest: RunManifest) -> None:
    exp = resolve_experiment(args, file_cfg, total_env_steps=args.steps)
    if args.demo_episodes is not None:
        exp = replace(exp, demo_episodes=args.demo_episodes)
    grid = ablation_grid(args.suite, range(args.seeds), T=exp.train.T)
    manifest.config.update(exp.to_dict(), suite=args.suite, seeds=args.seeds, demos=args.demos)
    manifest.write(out)
    demos = read_demonstrations(args.demos) if args.demos else None
    pipeline = Pipeline(exp, demos=demos)
    t0 = time.perf_counter()
    for T in sorted({T for mode, T, _ in grid if mode != "no_prior"}):
        pipeline.prior(T)  # computed once here so workers share it
    manifest.timings["priors"] = time.perf_counter() - t0
    jobs = [(pipeline, mode, T, seed, out / f"{mode}_T{T}_seed{seed}") for mode, T, seed in grid]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            curves = list(pool.map(_ablate_one, jobs))
    else:
        curves = [_ablate_one(j) for j in jobs]
    rows = [run_rows(c) for c in curves]
    _write_rows(out / "runs.csv", list(rows[0]), rows)
    medians = median_curves(curves)
    _write_rows(out / "summary.csv", list(medians[0]), medians)
    all_rows = [r for c in curves for r in c]
    write_curve(out / "curves.csv", all_rows)
    series = sorted({f"{m}_T{T}" for m, T, _ in grid})
    _write_json(out / "figure.json", figure_spec("summary.csv", series, f"{args.suite} ablation (median of {args.seeds} seeds)"))
    manifest.outputs.update(runs=str(out / "runs.csv"), summary=str(out / "summary.csv"),
                            curves=str(out / "curves.csv"), figure=str(out / "figure.json"))
    final = [r for r in medians if r["env_steps"] == max(m["env_steps"] for m in medians)]
    for r in final:
        print(f"{r['prior_mode']:>14} T={r['T']:<3} median final reward {r['reward']:.2f}, success {r['success']:.2f}")


# ------------------------------------------------------------------- parser
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asaprl", description="Skill-space RL with expert priors for a 2D traffic simulator.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=True):
        p.add_argument("--out", help=f"output directory (default: ${OUT_ENV}/<command>)")
        p.add_argument("--config", help="JSON or TOML file with scenario/train/recovery/expert sections")
        if scenario:
            p.add_argument("--scenario", help=f"preset ({', '.join(sorted(PRESETS))}) or scenario file")

    p = sub.add_parser("demo-collect", help="roll out the scripted expert and write demonstrations")
    common(p)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-success", type=float, default=0.5, help="abort below this expert success rate")

    p = sub.add_parser("recover", help="recover skill parameters from demonstrations")
    common(p, scenario=False)
    p.add_argument("--demos", required=True)
    p.add_argument("--n-starts", type=int)
    p.add_argument("--weights", type=float, nargs=4, metavar=("XY", "PHI", "V", "A"))
    p.add_argument("--T", type=int, help="skill length in steps (default 10)")

    p = sub.add_parser("pretrain", help="behaviour cloning, rollouts and critic pretraining")
    common(p)
    p.add_argument("--dtheta", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="skill-space RL")
    common(p)
    p.add_argument("--prior-mode", choices=PRIOR_MODES, default="double_init")
    p.add_argument("--T", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--pretrained", help="directory written by 'pretrain'")
    p.add_argument("--steps", type=int, help="total environment steps")
    p.add_argument("--eval-every", type=int)
    p.add_argument("--eval-episodes", type=int)
    p.add_argument("--no-prefill", action="store_true", help="do not seed the replay buffer with pretraining rollouts")

    p = sub.add_parser("eval", help="deterministic evaluation of an actor checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--T", type=int, help="skill length (default: from the checkpoint)")

    p = sub.add_parser("ablate", help="skill-length or prior-mode grid with median summaries")
    common(p)
    p.add_argument("--suite", choices=SUITES, required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--steps", type=int, help="total environment steps per run")
    p.add_argument("--demos", help="demonstration file (default: collect with the expert)")
    p.add_argument("--demo-episodes", type=int)
    p.add_argument("--jobs", type=int, default=1, help="parallel training runs (results do not depend on it)")
    return parser


COMMANDS = {
    "demo-collect": cmd_demo_collect,
    "recover": cmd_recover,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "jobs", 1) < 1:
            raise UsageError("--jobs must be >= 1")
        file_cfg = read_config_file(args.config)
        out = out_dir(args)
    except UsageError as exc:
        parser.error(str(exc))
    manifest = RunManifest(command=" ".join(["asaprl", *(argv if argv is not None else sys.argv[1:])]), config={})
    t0 = time.perf_counter()
    try:
        COMMANDS[args.command](args, file_cfg, out, manifest)
    except UsageError as exc:
        parser.error(str(exc))
    except (DemoFormatError, ExpertQualityError, ValueError, KeyError, OSError, RuntimeError, FloatingPointError) as exc:
        manifest.status = "error"
        manifest.timings["total"] = time.perf_counter() - t0
        manifest.outputs["error"] = f"{type(exc).__name__}: {exc}"
        manifest.write(out)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    manifest.status = "ok"
    manifest.timings["total"] = time.perf_counter() - t0
    manifest.write(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
