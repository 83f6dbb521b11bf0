"""Experiment configs, output layout, and the runners behind the CLI.

A config file plus the package version determines every output byte: no
timestamps or ambient entropy enter any result file (the timestamp appears
only in the output directory name).  The manifest is always written before
any result so a crashed run stays diagnosable.

Output layout:
    <out>/<experiment>/<timestamp>/
        manifest.json
        generations.jsonl
        metrics/generations.csv     (evolve)
        metrics/sweep.csv           (scaling sweep)
        images/*.pfm|*.pgm          (render / psf)
        checkpoints/
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import rng as rngmod
from .evolution import (EvolutionConfig, GenerationRecord, Phase, read_records_jsonl,
                        run_evolution, write_records_jsonl)
from .genotype import Genome, genome_from_dict, genome_to_dict
from .imgio import ensure_dir, save_arrays
from .metrics import bootstrap_ci, cpd
from .optics import DEFAULT_OPTICS, OpticsGeometry
from .policy import parameter_count
from .ppo import TrainerConfig, train
from .world import SPEC_BUILDERS, WorldSpec, evaluate_fitness

ENV_OUT = "EVOVISION_OUT"
ENV_JOBS = "EVOVISION_JOBS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    kind: str                      # "evolve" | "train" | "sweep"
    tasks: tuple[str, ...]
    template: Genome
    phases: tuple[Phase, ...]
    phases_by_task: dict = field(default_factory=dict)
    generations: int = 10
    population_size: int = 8
    sigma0: float = 0.3
    seed: int = 1234
    jobs: int = 1
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    fitness_episodes: int = 6
    fitness_seeds_per_candidate: int = 1
    metrics_psnr_ssim: bool = True
    world_overrides: dict = field(default_factory=dict)
    world_spec: Optional[dict] = None     # full inline spec wins over task builder
    optics: OpticsGeometry = field(default_factory=OpticsGeometry)
    sweep: dict = field(default_factory=dict)

    def phases_for(self, task: str) -> tuple[Phase, ...]:
        if task in self.phases_by_task:
            return self.phases_by_task[task]
        return self.phases

    def spec_for(self, task: str) -> WorldSpec:
        if self.world_spec is not None:
            return WorldSpec.from_dict(self.world_spec)
        if task not in SPEC_BUILDERS:
            raise ConfigError(f"unknown task {task!r}")
        return SPEC_BUILDERS[task](**self.world_overrides)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "tasks": list(self.tasks),
            "genome": genome_to_dict(self.template),
            "phases": [p.to_dict() for p in self.phases],
            "phases_by_task": {t: [p.to_dict() for p in ps]
                               for t, ps in self.phases_by_task.items()},
            "generations": self.generations,
            "population_size": self.population_size,
            "sigma0": self.sigma0,
            "seed": self.seed,
            "jobs": self.jobs,
            "trainer": self.trainer.to_dict(),
            "fitness_episodes": self.fitness_episodes,
            "fitness_seeds_per_candidate": self.fitness_seeds_per_candidate,
            "metrics_psnr_ssim": self.metrics_psnr_ssim,
            "world_overrides": self.world_overrides,
            "world_spec": self.world_spec,
            "optics": {
                "sensor_size_mm": self.optics.sensor_size_mm,
                "sensor_distance_mm": self.optics.sensor_distance_mm,
                "scene_distance_mm": self.optics.scene_distance_mm,
                "pupil_grid": self.optics.pupil_grid,
                "pad_factor": self.optics.pad_factor,
                "height_scale_um": self.optics.height_scale_um,
                "wavelengths_nm": list(self.optics.wavelengths_nm),
            },
            "sweep": self.sweep,
        }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        try:
            optics = d.get("optics", {})
            return ExperimentConfig(
                name=d["name"],
                kind=d.get("kind", "evolve"),
                tasks=tuple(d.get("tasks", ["detection"])),
                template=genome_from_dict(d["genome"]),
                phases=tuple(Phase.from_dict(p) for p in d.get("phases", [])),
                phases_by_task={t: tuple(Phase.from_dict(p) for p in ps)
                                for t, ps in d.get("phases_by_task", {}).items()},
                generations=int(d.get("generations", 10)),
                population_size=int(d.get("population_size", 8)),
                sigma0=float(d.get("sigma0", 0.3)),
                seed=int(d.get("seed", 1234)),
                jobs=int(d.get("jobs", 1)),
                trainer=TrainerConfig.from_dict(d.get("trainer", {})),
                fitness_episodes=int(d.get("fitness_episodes", 6)),
                fitness_seeds_per_candidate=int(d.get("fitness_seeds_per_candidate", 1)),
                metrics_psnr_ssim=bool(d.get("metrics_psnr_ssim", True)),
                world_overrides=dict(d.get("world_overrides", {})),
                world_spec=d.get("world_spec"),
                optics=OpticsGeometry(
                    sensor_size_mm=float(optics.get("sensor_size_mm", DEFAULT_OPTICS.sensor_size_mm)),
                    sensor_distance_mm=float(optics.get("sensor_distance_mm", DEFAULT_OPTICS.sensor_distance_mm)),
                    scene_distance_mm=float(optics.get("scene_distance_mm", DEFAULT_OPTICS.scene_distance_mm)),
                    pupil_grid=int(optics.get("pupil_grid", DEFAULT_OPTICS.pupil_grid)),
                    pad_factor=int(optics.get("pad_factor", DEFAULT_OPTICS.pad_factor)),
                    height_scale_um=float(optics.get("height_scale_um", DEFAULT_OPTICS.height_scale_um)),
                    wavelengths_nm=tuple(optics.get("wavelengths_nm", DEFAULT_OPTICS.wavelengths_nm)),
                ),
                sweep=dict(d.get("sweep", {})),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid experiment config: {exc}") from exc


def load_config(name_or_path: str) -> ExperimentConfig:
    """Load a config by bundled name or filesystem path."""
    path = Path(name_or_path)
    if path.exists():
        try:
            return ExperimentConfig.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    try:
        data = resources.files("evovision").joinpath(f"configs/{name_or_path}.json").read_text()
    except (FileNotFoundError, ModuleNotFoundError) as exc:
        raise ConfigError(f"no such config file or bundled config: {name_or_path}") from exc
    return ExperimentConfig.from_dict(json.loads(data))


def bundled_config_names() -> list[str]:
    base = resources.files("evovision").joinpath("configs")
    return sorted(p.name[:-5] for p in base.iterdir() if p.name.endswith(".json"))


def make_run_dir(out_root: str, experiment: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S") + f"-{os.getpid()}"
    base = Path(out_root) / experiment
    for attempt in range(1000):
        run_dir = base / (stamp if attempt == 0 else f"{stamp}-{attempt}")
        try:
            run_dir.mkdir(parents=True, exist_ok=False)
            return run_dir
        except FileExistsError:
            continue
    raise RuntimeError(f"could not allocate a run directory under {base}")


def write_manifest(run_dir: Path, cfg: ExperimentConfig) -> None:
    manifest = {"experiment": cfg.name, "seed": cfg.seed, "version": __version__,
                "config": cfg.to_dict()}
    (run_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _evolution_config(cfg: ExperimentConfig, task: str, seed: int) -> EvolutionConfig:
    return EvolutionConfig(
        spec=cfg.spec_for(task),
        template=cfg.template,
        phases=cfg.phases_for(task),
        generations=cfg.generations,
        population_size=cfg.population_size,
        seed=seed,
        sigma0=cfg.sigma0,
        trainer=cfg.trainer,
        fitness_episodes=cfg.fitness_episodes,
        fitness_seeds_per_candidate=cfg.fitness_seeds_per_candidate,
        record_psnr_ssim=cfg.metrics_psnr_ssim,
        jobs=cfg.jobs,
        optics=cfg.optics,
    )


def _generation_csv_row(rec: GenerationRecord) -> dict:
    fits = [a.fitness for a in rec.agents]
    lo, hi = bootstrap_ci(fits, seed=rec.generation)
    row = {
        "task": rec.task,
        "generation": rec.generation,
        "mean_fitness": float(np.mean(fits)),
        "ci_lo": lo,
        "ci_hi": hi,
        "best_fitness": float(np.max(fits)),
        "mean_aperture": float(np.mean([a.genome.optical.aperture_fraction for a in rec.agents])),
        "mean_num_eyes": float(np.mean([a.genome.morphological.num_eyes for a in rec.agents])),
        "mean_resolution": float(np.mean([a.genome.morphological.resolution_w
                                          * a.genome.morphological.resolution_h
                                          for a in rec.agents])),
        "mean_fov": float(np.mean([round(a.genome.morphological.fov) for a in rec.agents])),
        "mean_cpd": float(np.mean([a.metrics["cpd"] for a in rec.agents])),
    }
    iqs = [a.metrics["image_quality"] for a in rec.agents if "image_quality" in a.metrics]
    row["best_image_quality"] = float(np.max(iqs)) if iqs else float("nan")
    return row


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        return
    keys = list(rows[0])
    lines = [",".join(keys)]
    for row in rows:
        lines.append(",".join(_csv_cell(row.get(k)) for k in keys))
    Path(path).write_text("\n".join(lines) + "\n")


def _csv_cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_evolve(cfg: ExperimentConfig, run_dir: Path,
               resume_path: Optional[str] = None) -> list[GenerationRecord]:
    """Evolve every task in the config sequentially; one JSONL stream."""
    ensure_dir(run_dir / "metrics")
    ensure_dir(run_dir / "checkpoints")
    jsonl = run_dir / "generations.jsonl"

    done: dict[str, list[GenerationRecord]] = {t: [] for t in cfg.tasks}
    if resume_path:
        for rec in read_records_jsonl(resume_path):
            done.setdefault(rec.task, []).append(rec)
        all_prev = [r for recs in done.values() for r in recs]
        write_records_jsonl(jsonl, all_prev)

    csv_rows = [ _generation_csv_row(r) for recs in done.values() for r in recs ]
    records_out = [r for recs in done.values() for r in recs]

    for t_idx, task in enumerate(cfg.tasks):
        task_seed = rngmod.agent_seed(cfg.seed, 900_000, t_idx)
        evo_cfg = _evolution_config(cfg, task, task_seed)
        prev = done.get(task, [])
        resume_rec = prev[-1] if prev else None
        if resume_rec is not None and resume_rec.generation >= cfg.generations - 1:
            continue

        def on_gen(rec: GenerationRecord) -> None:
            write_records_jsonl(jsonl, [rec], append=True)
            snap = rec.cma_state
            if snap is not None:
                save_arrays(run_dir / "checkpoints" / f"cma_{rec.task}_{rec.generation:04d}.bin",
                            {"mean": snap.mean, "cov": snap.cov, "p_sigma": snap.p_sigma,
                             "p_c": snap.p_c, "sigma": np.array([snap.sigma]),
                             "bounds_lo": snap.lower, "bounds_hi": snap.upper},
                            meta={"generation": rec.generation, "task": rec.task,
                                  "popsize": snap.popsize})
            csv_rows.append(_generation_csv_row(rec))
            records_out.append(rec)

        if not prev:
            write_records_jsonl(jsonl, [], append=True)  # touch file before results
        run_evolution(evo_cfg, on_generation=on_gen, resume_record=resume_rec, task_tag=task)

    write_csv(run_dir / "metrics" / "generations.csv", csv_rows)
    return records_out


def run_train(cfg: ExperimentConfig, run_dir: Path) -> dict:
    """Train a single agent from the config template on the first task."""
    ensure_dir(run_dir / "checkpoints")
    ensure_dir(run_dir / "metrics")
    task = cfg.tasks[0]
    spec = cfg.spec_for(task)
    result = train(cfg.template, spec, cfg.trainer, cfg.seed, optics=cfg.optics)
    result.network.save(run_dir / "checkpoints" / "policy.bin")
    rows = [{"step": s, "eval_return": r} for s, r in result.eval_curve]
    write_csv(run_dir / "metrics" / "training_curve.csv", rows)
    update_rows = [{k: u.get(k) for k in ("steps", "loss", "pg_loss", "v_loss",
                                          "entropy", "clip_frac")}
                   for u in result.update_log]
    write_csv(run_dir / "metrics" / "updates.csv", update_rows)
    fitness, details = evaluate_fitness(cfg.template, result.network, spec,
                                        n_episodes=cfg.fitness_episodes, seed=cfg.seed,
                                        optics=cfg.optics)
    from .world import World, write_episode_jsonl
    demo = World(spec, cfg.template, seed=cfg.seed, optics=cfg.optics)
    write_episode_jsonl(run_dir / "metrics" / "episode.jsonl", demo,
                        result.network.policy_fn())
    summary = {"fitness": fitness, **result.curve_summary(), **details}
    (run_dir / "metrics" / "train_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary


def run_sweep(cfg: ExperimentConfig, run_dir: Path) -> list[dict]:
    """Acuity x capacity sweep writing (task, cpd, N, error) rows."""
    ensure_dir(run_dir / "metrics")
    fovs = cfg.sweep.get("fovs", [90.0, 45.0, 20.0])
    hiddens = cfg.sweep.get("hidden_neurons", [8, 32, 128])
    seeds = cfg.sweep.get("seeds", [0])
    f_max = float(cfg.sweep.get("fitness_max", 40.0))
    f_min = float(cfg.sweep.get("fitness_min", -20.0))
    rows = []
    for task in cfg.tasks:
        spec = cfg.spec_for(task)
        for fov in fovs:
            for hidden in hiddens:
                genome = replace(
                    cfg.template,
                    morphological=replace(cfg.template.morphological, fov=float(fov)),
                    neural=replace(cfg.template.neural, hidden_neurons=int(hidden)),
                )
                fits = []
                for s_idx in seeds:
                    seed = rngmod.agent_seed(cfg.seed, 800_000 + s_idx, int(hidden))
                    result = train(genome, spec, cfg.trainer, seed, optics=cfg.optics)
                    if result.diverged:
                        fits.append(f_min)
                        continue
                    fitness, _ = evaluate_fitness(genome, result.network,
                                                  spec, n_episodes=cfg.fitness_episodes,
                                                  seed=seed, optics=cfg.optics)
                    fits.append(fitness)
                error = (f_max - float(np.mean(fits))) / (f_max - f_min)
                rows.append({
                    "task": task,
                    "cpd": cpd(genome),
                    "N": parameter_count(genome),
                    "error": float(np.clip(error, 1e-3, 1.0)),
                })
    write_csv(run_dir / "metrics" / "sweep.csv", rows)
    return rows
