"""End-to-end pipeline shared by the CLI and the acceptance suite.

expert episodes -> skill records (per skill length) -> pretrained priors
(per skill length) -> RL runs -> median summaries.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .agent.config import PRIOR_MODES, TrainConfig
from .agent.pretrain import PretrainArtifacts, SkillTransition, pretrain_pipeline
from .agent.train import TrainResult, train
from .expert import ControlDemonstration, ExpertPolicyConfig, demo_observations, run_expert
from .recovery import RecoveryConfig, SkillRecord, annotate_demonstrations, recovery_report
from .sim.scenario import ScenarioConfig, preset
from .skills import SkillBounds

log = logging.getLogger(__name__)

SKILL_LENGTHS = (1, 5, 10, 20)
SUITES = ("skill-length", "prior")
METRICS = ("reward", "success", "completion", "collision", "passed_cars")


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioConfig = field(default_factory=lambda: preset("corridor"))
    train: TrainConfig = TrainConfig()
    recovery: RecoveryConfig = RecoveryConfig()
    expert: ExpertPolicyConfig = ExpertPolicyConfig()
    demo_episodes: int = 200
    demo_seed: int = 0
    prefill: bool = True  # seed the RL replay buffer with the critic-pretraining rollouts
    max_records: int | None = None  # cap on recovered segments per skill length (whole trajectories)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "train": self.train.to_dict(),
            "recovery": {**asdict(self.recovery), "weights": list(self.recovery.weights)},
            "expert": asdict(self.expert),
            "demo_episodes": self.demo_episodes,
            "demo_seed": self.demo_seed,
            "prefill": self.prefill,
            "max_records": self.max_records,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        kw = {}
        if "scenario" in data:
            sc = dict(data.pop("scenario"))
            kw["scenario"] = preset(sc.pop("kind", "corridor"), **sc)
        if "train" in data:
            kw["train"] = TrainConfig.from_dict(data.pop("train"))
        if "recovery" in data:
            rc = dict(data.pop("recovery"))
            if "weights" in rc:
                rc["weights"] = tuple(rc["weights"])
            kw["recovery"] = RecoveryConfig(**rc)
        if "expert" in data:
            kw["expert"] = ExpertPolicyConfig(**data.pop("expert"))
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**kw, **data)


def record_demos(demos: list[ControlDemonstration], T: int, max_records: int | None) -> list[ControlDemonstration]:
    """Leading whole trajectories whose segment count stays within ``max_records``."""
    if max_records is None:
        return list(demos)
    out, total = [], 0
    for d in demos:
        n = (len(d.states) - 1) // T
        if out and total + n > max_records:
            break
        out.append(d)
        total += n
    return out


def skill_records(demos: list[ControlDemonstration], T: int, recovery: RecoveryConfig = RecoveryConfig(),
                  bounds: SkillBounds = SkillBounds(), max_records: int | None = None) -> list[SkillRecord]:
    """Recover skill parameters (with segment-start observations) at skill length ``T``."""
    cfg = replace(recovery, T=T)
    return annotate_demonstrations(record_demos(demos, T, max_records), bounds, cfg,
                                   observe=lambda _i, d: demo_observations(d))


class Pipeline:
    """Lazily computed, cached stages of one experiment configuration."""

    def __init__(self, cfg: ExperimentConfig = ExperimentConfig(), bounds: SkillBounds = SkillBounds(),
                 demos: list[ControlDemonstration] | None = None):
        self.cfg = cfg
        self.bounds = bounds
        self._demos = demos
        self.expert_stats: dict | None = None
        self._records: dict[int, list[SkillRecord]] = {}
        self._priors: dict[int, tuple[PretrainArtifacts, list[SkillTransition], dict]] = {}

    def train_cfg(self, T: int, seed: int, prior_mode: str) -> TrainConfig:
        return self.cfg.train.with_(T=T, seed=seed, prior_mode=prior_mode)

    def demos(self) -> list[ControlDemonstration]:
        if self._demos is None:
            self._demos, self.expert_stats = run_expert(self.cfg.scenario, self.cfg.expert,
                                                        self.cfg.demo_episodes, self.cfg.demo_seed)
            log.info("expert: %s", self.expert_stats)
        return self._demos

    def records(self, T: int) -> list[SkillRecord]:
        if T not in self._records:
            self._records[T] = skill_records(self.demos(), T, self.cfg.recovery, self.bounds, self.cfg.max_records)
            log.info("recovered %d segments at T=%d", len(self._records[T]), T)
        return self._records[T]

    def recovery_report(self, T: int) -> dict:
        return recovery_report(self.records(T))

    def prior(self, T: int) -> tuple[PretrainArtifacts, list[SkillTransition], dict]:
        """Pretrained actor and critic at skill length ``T`` (shared by all RL seeds)."""
        if T not in self._priors:
            cfg = self.cfg.train.with_(T=T)
            self._priors[T] = pretrain_pipeline(self.records(T), self.cfg.scenario, cfg, self.bounds)
        return self._priors[T]

    def run(self, prior_mode: str, T: int, seed: int, out_dir: str | Path | None = None) -> TrainResult:
        cfg = self.train_cfg(T, seed, prior_mode)
        if prior_mode == "no_prior":
            return train(cfg, self.cfg.scenario, None, out_dir, self.bounds)
        arts, rollouts, _ = self.prior(T)
        prefill = rollouts if (self.cfg.prefill and prior_mode == "double_init") else None
        return train(cfg, self.cfg.scenario, arts, out_dir, self.bounds, prefill=prefill)


# ---------------------------------------------------------------- ablations
def ablation_grid(suite: str, seeds, T: int = 10, prior_mode: str = "double_init") -> list[tuple[str, int, int]]:
    """(prior_mode, T, seed) triples for one suite."""
    seeds = list(seeds)
    if suite == "skill-length":
        return [(prior_mode, t, s) for t in SKILL_LENGTHS for s in seeds]
    if suite == "prior":
        return [(m, T, s) for m in PRIOR_MODES for s in seeds]
    raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")


def run_rows(curve: list[dict]) -> dict:
    """Per-run summary: initial and final evaluation metrics."""
    first, last = curve[0], curve[-1]
    row = {k: first[k] for k in ("scenario", "seed", "prior_mode", "T")}
    row["env_steps"] = last["env_steps"]
    for m in METRICS:
        row[f"initial_{m}"] = first[m]
        row[f"final_{m}"] = last[m]
    return row


def median_curves(curves: list[list[dict]]) -> list[dict]:
    """Median over seeds at each shared evaluation point, grouped by (prior_mode, T)."""
    groups: dict[tuple, dict[int, list[dict]]] = {}
    for curve in curves:
        for row in curve:
            key = (row["prior_mode"], int(row["T"]))
            groups.setdefault(key, {}).setdefault(int(row["env_steps"]), []).append(row)
    out = []
    for (mode, T), points in groups.items():
        for steps in sorted(points):
            rows = points[steps]
            med = {"prior_mode": mode, "T": T, "env_steps": steps, "n_seeds": len(rows)}
            med.update({m: float(np.median([r[m] for r in rows])) for m in METRICS})
            out.append(med)
    return out


def median_at(summary: list[dict], prior_mode: str, T: int, env_steps: int, metric: str) -> float:
    for row in summary:
        if row["prior_mode"] == prior_mode and row["T"] == T and row["env_steps"] == env_steps:
            return row[metric]
    raise KeyError(f"no median for {prior_mode} T={T} at {env_steps} steps")


def group_curve(summary: list[dict], prior_mode: str, T: int) -> list[dict]:
    return [r for r in summary if r["prior_mode"] == prior_mode and r["T"] == T]
