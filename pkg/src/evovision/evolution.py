"""The outer loop: CMA-ES over genome vectors, generation orchestration.

Each generation asks the optimizer for candidate vectors, decodes them into
genomes, trains every agent's policy from scratch (optionally in parallel
worker processes), scores each with the fixed-seed fitness protocol, and
tells the optimizer the results.  A mutability-mask phase schedule can change
which genes are searchable at set generations (e.g. unlocking the optical
genes); the search space dimension changes there, so the CMA state is
re-initialized around the decoded incumbent mean.

All randomness derives from (master seed, generation, index), which is what
makes interrupted runs resumable bit-exactly: a GenerationRecord plus its CMA
snapshot fully determines every subsequent record.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import cma
from . import rng as rngmod
from .genotype import (BodyGeometry, Genome, decode, encode, genome_from_dict,
                       genome_to_dict)
from .metrics import cpd, image_quality
from .optics import OpticsGeometry, psf_for_genome
from .policy import parameter_count
from .ppo import TrainerConfig, train
from .world import FITNESS_WEIGHTS, WorldSpec, evaluate_fitness


@dataclass(frozen=True)
class Phase:
    """Mutability mask active from start_generation until the next phase."""

    start_generation: int
    mutable: tuple[str, ...]
    optics_enabled: Optional[bool] = None   # None: keep template setting
    sigma0: Optional[float] = None          # None: evolution-level default

    def to_dict(self) -> dict:
        return {"start_generation": self.start_generation, "mutable": list(self.mutable),
                "optics_enabled": self.optics_enabled, "sigma0": self.sigma0}

    @staticmethod
    def from_dict(d: dict) -> "Phase":
        return Phase(start_generation=int(d["start_generation"]),
                     mutable=tuple(d["mutable"]),
                     optics_enabled=d.get("optics_enabled"),
                     sigma0=d.get("sigma0"))


@dataclass(frozen=True)
class EvolutionConfig:
    spec: WorldSpec
    template: Genome
    phases: tuple[Phase, ...]
    generations: int
    population_size: int = 16
    seed: int = 0
    sigma0: float = 0.3
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    fitness_episodes: int = 6
    fitness_seeds_per_candidate: int = 1   # optional multi-seed averaging, off by default
    fitness_floor: float = -50.0
    record_psnr_ssim: bool = True
    jobs: int = 1
    body: BodyGeometry = field(default_factory=BodyGeometry)
    optics: OpticsGeometry = field(default_factory=OpticsGeometry)

    def __post_init__(self):
        gens = [p.start_generation for p in self.phases]
        if gens != sorted(set(gens)) or (self.phases and gens[0] != 0):
            raise ValueError("phase start generations must be strictly increasing from 0")

    def phase_at(self, generation: int) -> Phase:
        current = self.phases[0]
        for p in self.phases:
            if p.start_generation <= generation:
                current = p
        return current

    def template_for(self, generation: int) -> Genome:
        phase = self.phase_at(generation)
        template = replace(self.template, mutability=frozenset(phase.mutable))
        if phase.optics_enabled is not None:
            template = replace(template, optical=replace(template.optical,
                                                         enabled=phase.optics_enabled))
        return template


@dataclass
class AgentRecord:
    index: int
    seed: int
    genome: Genome
    fitness: float
    curve: dict
    metrics: dict

    def to_dict(self) -> dict:
        return {"index": self.index, "seed": self.seed,
                "genome": genome_to_dict(self.genome), "fitness": self.fitness,
                "curve": self.curve, "metrics": self.metrics}

    @staticmethod
    def from_dict(d: dict) -> "AgentRecord":
        return AgentRecord(index=int(d["index"]), seed=int(d["seed"]),
                           genome=genome_from_dict(d["genome"]),
                           fitness=float(d["fitness"]), curve=dict(d["curve"]),
                           metrics=dict(d["metrics"]))


@dataclass
class GenerationRecord:
    generation: int
    task: str
    agents: list[AgentRecord]
    cma_state: Optional[cma.CmaState]   # None for a fully frozen (control) genome
    mean_genome: Genome

    def to_dict(self) -> dict:
        return {"generation": self.generation, "task": self.task,
                "agents": [a.to_dict() for a in self.agents],
                "cma_state": self.cma_state.to_dict() if self.cma_state else None,
                "mean_genome": genome_to_dict(self.mean_genome)}

    @staticmethod
    def from_dict(d: dict) -> "GenerationRecord":
        state = d.get("cma_state")
        return GenerationRecord(generation=int(d["generation"]), task=d["task"],
                                agents=[AgentRecord.from_dict(a) for a in d["agents"]],
                                cma_state=cma.CmaState.from_dict(state) if state else None,
                                mean_genome=genome_from_dict(d["mean_genome"]))


def _agent_metrics(genome: Genome, body: BodyGeometry, optics: OpticsGeometry,
                   spec: Optional[WorldSpec] = None,
                   psnr_ssim: bool = True) -> dict:
    out = {
        "cpd": cpd(genome, body),
        "params": parameter_count(genome),
        "num_eyes": genome.morphological.num_eyes,
        "resolution_w": genome.morphological.resolution_w,
        "resolution_h": genome.morphological.resolution_h,
        "aperture": genome.optical.aperture_fraction,
    }
    if genome.optical.enabled:
        kernel = psf_for_genome(genome, optics)
        out["image_quality"] = image_quality(kernel, genome.optical.aperture_fraction)
        if psnr_ssim and spec is not None:
            from .world import pinhole_reference_metrics
            out.update(pinhole_reference_metrics(genome, spec, body=body, optics=optics))
    return out


def evaluate_agent(payload: dict) -> dict:
    """Train one agent and score its fitness. Top-level for process pools."""
    genome = genome_from_dict(payload["genome"])
    spec = WorldSpec.from_dict(payload["spec"])
    cfg = TrainerConfig.from_dict(payload["trainer"])
    body = BodyGeometry(**payload["body"])
    optics = OpticsGeometry(**{k: tuple(v) if k == "wavelengths_nm" else v
                               for k, v in payload["optics"].items()})
    seeds = payload["seeds"]
    floor = payload["fitness_floor"]
    episodes = payload["fitness_episodes"]

    fitnesses = []
    curve: dict = {}
    events: dict = {}
    for seed in seeds:
        result = train(genome, spec, cfg, seed, body=body, optics=optics)
        if result.diverged:
            fitnesses.append(floor)
            curve = result.curve_summary()
            events = {"diverged": True}
            continue
        fitness, details = evaluate_fitness(
            genome, result.network, spec,
            n_episodes=episodes, seed=seed, weights=FITNESS_WEIGHTS,
            body=body, optics=optics)
        fitnesses.append(fitness)
        curve = result.curve_summary()
        events = {k: details[k] for k in ("goals", "adversaries", "wall_steps")}
    return {"fitness": float(np.mean(fitnesses)), "curve": curve, "events": events}


def _payloads(cfg: EvolutionConfig, genomes: Sequence[Genome], generation: int) -> list[dict]:
    opt = cfg.optics
    optics_dict = {
        "sensor_size_mm": opt.sensor_size_mm, "sensor_distance_mm": opt.sensor_distance_mm,
        "scene_distance_mm": opt.scene_distance_mm, "pupil_grid": opt.pupil_grid,
        "pad_factor": opt.pad_factor, "height_scale_um": opt.height_scale_um,
        "wavelengths_nm": list(opt.wavelengths_nm),
    }
    body_dict = {"body_radius": cfg.body.body_radius,
                 "eye_sensor_size": cfg.body.eye_sensor_size}
    out = []
    for i, genome in enumerate(genomes):
        seeds = [rngmod.agent_seed(cfg.seed, generation * 1000 + i, rep)
                 for rep in range(cfg.fitness_seeds_per_candidate)]
        out.append({
            "genome": genome_to_dict(genome),
            "spec": cfg.spec.to_dict(),
            "trainer": cfg.trainer.to_dict(),
            "body": body_dict,
            "optics": optics_dict,
            "seeds": seeds,
            "fitness_floor": cfg.fitness_floor,
            "fitness_episodes": cfg.fitness_episodes,
        })
    return out


def _pool_init() -> None:
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")


def _evaluate_generation(cfg: EvolutionConfig, genomes: Sequence[Genome],
                         generation: int) -> list[dict]:
    payloads = _payloads(cfg, genomes, generation)
    if cfg.jobs <= 1:
        return [evaluate_agent(p) for p in payloads]
    import multiprocessing as mp
    ctx = mp.get_context("spawn")
    with ctx.Pool(processes=cfg.jobs, initializer=_pool_init) as pool:
        return pool.map(evaluate_agent, payloads)


def _init_cma(cfg: EvolutionConfig, generation: int, center: Genome) -> Optional[cma.CmaState]:
    """None when nothing is mutable (frozen-genome control run)."""
    phase = cfg.phase_at(generation)
    template = cfg.template_for(generation)
    center = replace(center, mutability=template.mutability,
                     optical=replace(center.optical, enabled=template.optical.enabled))
    mean = encode(center)
    n = mean.size
    if n == 0:
        return None
    sigma = phase.sigma0 if phase.sigma0 is not None else cfg.sigma0
    return cma.init_state(mean, sigma, popsize=cfg.population_size,
                          lower=np.zeros(n), upper=np.ones(n))


def run_evolution(cfg: EvolutionConfig,
                  on_generation: Optional[Callable[[GenerationRecord], None]] = None,
                  resume_record: Optional[GenerationRecord] = None,
                  task_tag: Optional[str] = None) -> list[GenerationRecord]:
    """Run (or resume) the evolution loop; returns one record per generation."""
    task = task_tag if task_tag is not None else cfg.spec.task
    records: list[GenerationRecord] = []

    if resume_record is None:
        start_gen = 0
        center = cfg.template
        state = _init_cma(cfg, 0, center)
    else:
        start_gen = resume_record.generation + 1
        center = resume_record.mean_genome
        state = (cma.CmaState.from_dict(resume_record.cma_state.to_dict())
                 if resume_record.cma_state is not None else None)

    prev_phase = cfg.phase_at(start_gen - 1) if start_gen > 0 else cfg.phase_at(0)
    for gen in range(start_gen, cfg.generations):
        phase = cfg.phase_at(gen)
        if gen == 0:
            pass
        elif phase is not prev_phase and phase.start_generation == gen:
            state = _init_cma(cfg, gen, center)
        prev_phase = phase

        template = cfg.template_for(gen)
        if state is None:
            genomes = [template] * cfg.population_size
        else:
            rng_ask = rngmod.rng_for(cfg.seed, gen, rngmod.STREAM_ASK)
            candidates = cma.ask(state, rng_ask)
            genomes = [decode(v, template, cfg.body) for v in candidates]

        results = _evaluate_generation(cfg, genomes, gen)
        fitnesses = [r["fitness"] for r in results]
        if state is not None:
            state = cma.tell(state, candidates, fitnesses)
            center = decode(state.mean, template, cfg.body)
        else:
            center = template

        agents = []
        for i, (genome, result) in enumerate(zip(genomes, results)):
            seeds = [rngmod.agent_seed(cfg.seed, gen * 1000 + i, rep)
                     for rep in range(cfg.fitness_seeds_per_candidate)]
            agents.append(AgentRecord(
                index=i, seed=seeds[0], genome=genome, fitness=result["fitness"],
                curve=result["curve"],
                metrics={**_agent_metrics(genome, cfg.body, cfg.optics, cfg.spec,
                                           cfg.record_psnr_ssim),
                         **result["events"]},
            ))
        record = GenerationRecord(generation=gen, task=task, agents=agents,
                                  cma_state=state, mean_genome=center)
        records.append(record)
        if on_generation is not None:
            on_generation(record)
    return records


def write_records_jsonl(path, records: Sequence[GenerationRecord], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def read_records_jsonl(path) -> list[GenerationRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(GenerationRecord.from_dict(json.loads(line)))
    return records
