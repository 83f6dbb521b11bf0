"""Task environments: Navigation, Detection, Tracking.

Kinematics are planar: the agent is a disc of fixed radius 0.2 controlling
heading delta and forward speed each step; wall collisions resolve by sliding
projection.  Rewards follow the task formulas with configurable weights
(training: lam 0.25, w_g 1, w_a -1, w_c -1; fitness: lam 1.5, w_g 10,
w_a -10, w_c -2).  Fitness evaluation respawns touched objects instead of
terminating and averages episode return over fixed-seed episodes.

The batched engine steps several independent instances of one world in
lockstep so rendering and image formation amortize; single-instance contract
functions (step / render_eye / pinhole_image / assemble_observation) wrap the
same code paths with a batch of one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng as rngmod
from .genotype import BodyGeometry, DEFAULT_BODY, Genome, eye_placements
from .optics import (DEFAULT_OPTICS, OpticsGeometry, PsfKernel, SceneImage,
                     SensorImage, psf_for_genome)
from .render import EyeGrid, WallGeometry, make_eye_grid, render_scene_batch

AGENT_RADIUS = 0.2
MAX_TURN_DEG = 30.0
MAX_SPEED = 0.3

TASKS = ("navigation", "detection", "tracking")


@dataclass(frozen=True)
class RewardWeights:
    lam: float
    w_g: float
    w_a: float
    w_c: float


TRAINING_WEIGHTS = RewardWeights(lam=0.25, w_g=1.0, w_a=-1.0, w_c=-1.0)
FITNESS_WEIGHTS = RewardWeights(lam=1.5, w_g=10.0, w_a=-10.0, w_c=-2.0)


@dataclass(frozen=True)
class WallSpec:
    a: tuple[float, float]
    b: tuple[float, float]
    stripe_freq: float = 0.0     # cycles per world unit along the wall; 0 = flat
    stripe_phase: float = 0.0
    albedo_lo: float = 0.1
    albedo_hi: float = 0.9


@dataclass(frozen=True)
class ObjectSpec:
    role: str                    # "goal" | "adversary"
    radius: float = 0.5
    stripe_axis: str = "azimuth"  # goal: azimuth stripes; adversary: elevation
    stripe_cycles: float = 4.0


@dataclass(frozen=True)
class WorldSpec:
    task: str
    episode_steps: int = 400
    walls: tuple[WallSpec, ...] = ()
    objects: tuple[ObjectSpec, ...] = ()
    agent_start: tuple[float, float, float] = (0.0, 0.0, 0.0)  # x, y, heading deg
    spawn_heading_jitter_deg: float = 0.0
    spawn_y_jitter: float = 0.0
    maze_mirror_probability: float = 0.0  # per-episode vertical maze mirroring
    background: float = 0.1
    object_albedo: tuple[float, float] = (0.15, 0.95)
    wall_half_height: float = 0.6
    noise_sigma: float = 0.01
    spawn_arc_radius: float = 3.0
    spawn_arc_half_deg: float = 50.0
    spawn_min_sep_deg: float = 24.0
    goal_zone: Optional[tuple[float, float, float]] = None  # navigation end (x, y, r)
    tracking_waypoint_interval: int = 25
    tracking_speed: float = 0.1
    bounds: tuple[float, float, float, float] = (-3.0, 3.0, -3.0, 3.0)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.objects:
            goals = sum(o.role == "goal" for o in self.objects)
            if goals != 1:
                raise ValueError(f"arena needs exactly one goal object, got {goals}")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "episode_steps": self.episode_steps,
            "walls": [
                {"a": list(w.a), "b": list(w.b), "stripe_freq": w.stripe_freq,
                 "stripe_phase": w.stripe_phase, "albedo_lo": w.albedo_lo,
                 "albedo_hi": w.albedo_hi}
                for w in self.walls
            ],
            "objects": [
                {"role": o.role, "radius": o.radius, "stripe_axis": o.stripe_axis,
                 "stripe_cycles": o.stripe_cycles}
                for o in self.objects
            ],
            "agent_start": list(self.agent_start),
            "spawn_heading_jitter_deg": self.spawn_heading_jitter_deg,
            "spawn_y_jitter": self.spawn_y_jitter,
            "maze_mirror_probability": self.maze_mirror_probability,
            "background": self.background,
            "object_albedo": list(self.object_albedo),
            "wall_half_height": self.wall_half_height,
            "noise_sigma": self.noise_sigma,
            "spawn_arc_radius": self.spawn_arc_radius,
            "spawn_arc_half_deg": self.spawn_arc_half_deg,
            "spawn_min_sep_deg": self.spawn_min_sep_deg,
            "goal_zone": list(self.goal_zone) if self.goal_zone else None,
            "tracking_waypoint_interval": self.tracking_waypoint_interval,
            "tracking_speed": self.tracking_speed,
            "bounds": list(self.bounds),
        }

    @staticmethod
    def from_dict(d: dict) -> "WorldSpec":
        return WorldSpec(
            task=d["task"],
            episode_steps=int(d.get("episode_steps", 400)),
            walls=tuple(
                WallSpec(a=tuple(w["a"]), b=tuple(w["b"]),
                         stripe_freq=float(w.get("stripe_freq", 0.0)),
                         stripe_phase=float(w.get("stripe_phase", 0.0)),
                         albedo_lo=float(w.get("albedo_lo", 0.1)),
                         albedo_hi=float(w.get("albedo_hi", 0.9)))
                for w in d.get("walls", ())
            ),
            objects=tuple(
                ObjectSpec(role=o["role"], radius=float(o.get("radius", 0.4)),
                           stripe_axis=o.get("stripe_axis", "azimuth"),
                           stripe_cycles=float(o.get("stripe_cycles", 6.0)))
                for o in d.get("objects", ())
            ),
            agent_start=tuple(d.get("agent_start", (0.0, 0.0, 0.0))),
            spawn_heading_jitter_deg=float(d.get("spawn_heading_jitter_deg", 0.0)),
            spawn_y_jitter=float(d.get("spawn_y_jitter", 0.0)),
            maze_mirror_probability=float(d.get("maze_mirror_probability", 0.0)),
            background=float(d.get("background", 0.1)),
            object_albedo=tuple(d.get("object_albedo", (0.15, 0.95))),
            wall_half_height=float(d.get("wall_half_height", 0.6)),
            noise_sigma=float(d.get("noise_sigma", 0.01)),
            spawn_arc_radius=float(d.get("spawn_arc_radius", 3.0)),
            spawn_arc_half_deg=float(d.get("spawn_arc_half_deg", 50.0)),
            spawn_min_sep_deg=float(d.get("spawn_min_sep_deg", 24.0)),
            goal_zone=tuple(d["goal_zone"]) if d.get("goal_zone") else None,
            tracking_waypoint_interval=int(d.get("tracking_waypoint_interval", 25)),
            tracking_speed=float(d.get("tracking_speed", 0.1)),
            bounds=tuple(d.get("bounds", (-3.0, 3.0, -3.0, 3.0))),
        )


def _box_walls(x0, x1, y0, y1, freq=0.0, lo=0.1, hi=0.35) -> list[WallSpec]:
    return [
        WallSpec(a=(x0, y0), b=(x1, y0), stripe_freq=freq, albedo_lo=lo, albedo_hi=hi),
        WallSpec(a=(x1, y0), b=(x1, y1), stripe_freq=freq, albedo_lo=lo, albedo_hi=hi),
        WallSpec(a=(x1, y1), b=(x0, y1), stripe_freq=freq, albedo_lo=lo, albedo_hi=hi),
        WallSpec(a=(x0, y1), b=(x0, y0), stripe_freq=freq, albedo_lo=lo, albedo_hi=hi),
    ]


def navigation_spec(**overrides) -> WorldSpec:
    """S-corridor, 8 x 3 units, three striped barriers with alternating gaps.

    The agent starts at the west end; the goal zone is the east end. Outer
    walls carry low-frequency stripes, barriers high-frequency, echoing the
    honeybee corridor setups. Barriers span half the corridor width with
    alternating sides, so the optimal path is a gentle slalom.
    """
    walls: list[WallSpec] = [
        WallSpec(a=(0.0, 0.0), b=(8.0, 0.0), stripe_freq=1.5),
        WallSpec(a=(0.0, 3.0), b=(8.0, 3.0), stripe_freq=1.5, stripe_phase=0.5),
        WallSpec(a=(0.0, 0.0), b=(0.0, 3.0), stripe_freq=1.5),
        WallSpec(a=(8.0, 0.0), b=(8.0, 3.0), stripe_freq=1.5),
        # barriers: gap alternates top / bottom / top; a perfectly centered
        # run just clears the tips, so steering precision (vision) pays
        WallSpec(a=(2.0, 0.0), b=(2.0, 1.2), stripe_freq=4.0),
        WallSpec(a=(4.0, 1.8), b=(4.0, 3.0), stripe_freq=2.0),
        WallSpec(a=(6.0, 0.0), b=(6.0, 1.2), stripe_freq=4.0),
    ]
    base = WorldSpec(
        task="navigation",
        walls=tuple(walls),
        agent_start=(0.6, 1.5, 0.0),
        spawn_heading_jitter_deg=60.0,
        spawn_y_jitter=0.8,
        maze_mirror_probability=0.5,
        goal_zone=(7.6, 1.5, 0.4),
        bounds=(0.0, 8.0, 0.0, 3.0),
    )
    return replace(base, **overrides) if overrides else base


def detection_spec(**overrides) -> WorldSpec:
    """6 x 6 walled arena; one goal and two adversaries on an arc ahead.

    Arena walls are dark and untextured so the bright striped spheres carry
    the visual signal; sphere stripes are coarse enough that an eye near the
    acuity of the evolved morphologies can tell the two patterns apart a few
    body lengths out rather than only at touching distance.
    """
    base = WorldSpec(
        task="detection",
        walls=tuple(_box_walls(-3.0, 3.0, -3.0, 3.0, lo=0.08, hi=0.18)),
        objects=(
            ObjectSpec(role="goal", stripe_axis="azimuth"),
            ObjectSpec(role="adversary", stripe_axis="elevation"),
            ObjectSpec(role="adversary", stripe_axis="elevation"),
        ),
        agent_start=(0.0, -2.4, 90.0),
        background=0.05,
        spawn_arc_half_deg=35.0,
        bounds=(-3.0, 3.0, -3.0, 3.0),
    )
    return replace(base, **overrides) if overrides else base


def tracking_spec(**overrides) -> WorldSpec:
    base = detection_spec()
    base = replace(base, task="tracking")
    return replace(base, **overrides) if overrides else base


SPEC_BUILDERS: dict[str, Callable[..., WorldSpec]] = {
    "navigation": navigation_spec,
    "detection": detection_spec,
    "tracking": tracking_spec,
}


@dataclass
class Observation:
    """Stacked frames (memory, eyes, H, W, 3), newest first, plus extras."""

    stack: np.ndarray
    contact: float
    prev_action: np.ndarray  # (2,) in [-1, 1]


@dataclass
class StateSnapshot:
    agent_pos: np.ndarray
    agent_heading: float
    goal_pos: Optional[np.ndarray]
    step: int


@dataclass
class Transition:
    before: StateSnapshot
    after: StateSnapshot
    action: np.ndarray
    reward: float
    terminal: bool
    info: dict


def reward(task: str, transition: Transition, weights: RewardWeights) -> float:
    """Eq-style task reward recomputed from the transition alone."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    info = transition.info
    event = 0.0
    if info.get("goal_contact"):
        event += weights.w_g
    if info.get("adversary_contact"):
        event += weights.w_a
    if info.get("wall_contact"):
        event += weights.w_c
    before, after = transition.before, transition.after
    if task == "navigation":
        anchor = np.asarray(info["origin"], dtype=float)
        move = (np.linalg.norm(after.agent_pos - anchor)
                - np.linalg.norm(before.agent_pos - anchor))
        return weights.lam * move + event
    goal = np.asarray(info["goal_pos"], dtype=float)
    move = (np.linalg.norm(after.agent_pos - goal)
            - np.linalg.norm(before.agent_pos - goal))
    return -weights.lam * move + event


# ---------------------------------------------------------------------------
# Batched engine
# ---------------------------------------------------------------------------

class WorldEngine:
    """N independent instances of one world, stepped in lockstep.

    respawn_on_contact=False terminates episodes on object contact (training);
    True respawns the objects and continues (fitness evaluation). Episodes
    auto-reset on termination or truncation so rollout streams are continuous.
    """

    def __init__(self, spec: WorldSpec, genome: Genome, n_envs: int, seed: int,
                 weights: RewardWeights = TRAINING_WEIGHTS,
                 respawn_on_contact: bool = False,
                 body: BodyGeometry = DEFAULT_BODY,
                 optics: OpticsGeometry = DEFAULT_OPTICS,
                 verbose_info: bool = True):
        self.spec = spec
        self.genome = genome
        self.n = n_envs
        self.weights = weights
        self.respawn = respawn_on_contact
        self.body = body
        self.optics = optics
        self.verbose_info = verbose_info
        m = genome.morphological
        self.grid: EyeGrid = make_eye_grid(eye_placements(m), m.fov,
                                           m.resolution_h, m.resolution_w)
        self.walls = _wall_geometry(spec)
        # stacked wall variants: base and (optionally used) vertical mirror
        y_axis = spec.bounds[2] + spec.bounds[3]
        wall_b = self.walls.a + self.walls.m
        a_mirror = np.stack([self.walls.a[:, 0], y_axis - self.walls.a[:, 1]], axis=1)
        b_mirror = np.stack([wall_b[:, 0], y_axis - wall_b[:, 1]], axis=1)
        self.wall_var_a = np.stack([self.walls.a, a_mirror])
        self.wall_var_m = np.stack([self.walls.m, b_mirror - a_mirror])
        self.wall_variant = np.zeros(n_envs, dtype=np.int64)
        self.kernel: Optional[PsfKernel] = (
            psf_for_genome(genome, optics) if genome.optical.enabled else None
        )
        self.n_eyes = m.num_eyes
        self.memory = genome.neural.memory_frames
        ks = spec.objects
        self.obj_radius = np.array([o.radius for o in ks], dtype=float)
        self.obj_axis_azimuth = np.array([o.stripe_axis == "azimuth" for o in ks], dtype=bool)
        self.obj_cycles = np.array([o.stripe_cycles for o in ks], dtype=float)
        self.obj_is_goal = np.array([o.role == "goal" for o in ks], dtype=bool)
        self.n_obj = len(ks)
        # imaging runs in float32: the copy + GEMM halve; rounding (~1e-7)
        # sits far below the sensor noise
        self._kernel_cols = (None if self.kernel is None else
                             np.ascontiguousarray(
                                 self.kernel.channels.reshape(3, -1).T.astype(np.float32)))

        self.noise_rng = rngmod.rng_for(seed, rngmod.STREAM_NOISE)
        self.env_rngs = [rngmod.rng_for(seed, rngmod.STREAM_WORLD, i) for i in range(n_envs)]

        self.pos = np.zeros((n_envs, 2))
        self.heading = np.zeros(n_envs)
        self.origin0 = np.zeros((n_envs, 2))
        self.obj_pos = np.zeros((n_envs, self.n_obj, 2))
        self.obj_goal_mask = np.zeros((n_envs, self.n_obj), dtype=bool)
        self.obj_waypoint = np.zeros((n_envs, self.n_obj, 2))
        self.steps = np.zeros(n_envs, dtype=int)
        self.episode_return = np.zeros(n_envs)
        self.goal_claimed = np.zeros(n_envs, dtype=bool)  # navigation w_g latch
        self.wall_touching = np.zeros(n_envs, dtype=bool)  # for onset detection
        self.frames = np.zeros((n_envs, self.memory, self.n_eyes,
                                m.resolution_h, m.resolution_w, 3))
        self.prev_action = np.zeros((n_envs, 2))
        self.contact = np.zeros(n_envs)

    # -- spawning ----------------------------------------------------------

    def _spawn(self, i: int) -> None:
        rng = self.env_rngs[i]
        x, y, hdeg = self.spec.agent_start
        if self.spec.spawn_y_jitter > 0.0:
            y = y + rng.uniform(-self.spec.spawn_y_jitter, self.spec.spawn_y_jitter)
        if self.spec.spawn_heading_jitter_deg > 0.0:
            hdeg = hdeg + rng.uniform(-self.spec.spawn_heading_jitter_deg,
                                      self.spec.spawn_heading_jitter_deg)
        if self.spec.maze_mirror_probability > 0.0:
            self.wall_variant[i] = int(rng.uniform() < self.spec.maze_mirror_probability)
        self.pos[i] = (x, y)
        self.heading[i] = math.radians(hdeg)
        self.origin0[i] = (x, y)
        self.steps[i] = 0
        self.episode_return[i] = 0.0
        self.goal_claimed[i] = False
        self.wall_touching[i] = False
        self.frames[i] = 0.0
        self.prev_action[i] = 0.0
        self.contact[i] = 0.0
        if self.n_obj:
            self._place_objects(i, rng)

    def _place_objects(self, i: int, rng: np.random.Generator,
                       initial: bool = True) -> None:
        """Objects on an arc of separated azimuths, at full arc distance.

        The initial placement fans out ahead of the spawn heading; respawns
        anchor on the agent's current position over the full circle, so every
        contact is followed by a fresh full-distance approach (no camping on
        a respawn point). Positions are kept inside the arena bounds and away
        from the agent's body.
        """
        spec = self.spec
        if initial:
            ax, ay, hdeg = spec.agent_start
            base = math.radians(hdeg)
            half = math.radians(spec.spawn_arc_half_deg)
        else:
            ax, ay = self.pos[i]
            base = 0.0
            half = math.pi
        sep = math.radians(spec.spawn_min_sep_deg)
        clearance = AGENT_RADIUS + (float(self.obj_radius.max()) if self.n_obj else 0.0) + 0.2
        x0, x1, y0, y1 = spec.bounds
        margin = float(self.obj_radius.max()) + 0.05 if self.n_obj else 0.0
        azimuths: list[float] = []
        positions: list[tuple[float, float]] = []
        tries = 0
        while len(azimuths) < self.n_obj:
            tries += 1
            cand = base + rng.uniform(-half, half)
            px = ax + spec.spawn_arc_radius * math.cos(cand)
            py = ay + spec.spawn_arc_radius * math.sin(cand)
            if tries <= 200:
                if not (x0 + margin <= px <= x1 - margin
                        and y0 + margin <= py <= y1 - margin):
                    continue
            else:  # degenerate corner: clamp instead of spinning forever
                px = min(max(px, x0 + margin), x1 - margin)
                py = min(max(py, y0 + margin), y1 - margin)
            if math.hypot(px - self.pos[i, 0], py - self.pos[i, 1]) < clearance:
                continue
            if all(abs(cand - a) >= sep for a in azimuths) or tries > 100:
                azimuths.append(cand)
                positions.append((px, py))
        order = rng.permutation(self.n_obj)
        for slot, obj in enumerate(order):
            self.obj_pos[i, obj] = positions[slot]
            self.obj_goal_mask[i, obj] = self.obj_is_goal[obj]
        self.obj_waypoint[i] = self.obj_pos[i]
        if spec.task == "tracking":
            for kk in range(self.n_obj):
                self.obj_waypoint[i, kk] = self._sample_waypoint(rng)

    def _sample_waypoint(self, rng: np.random.Generator) -> np.ndarray:
        x0, x1, y0, y1 = self.spec.bounds
        margin = float(self.obj_radius.max()) if self.n_obj else 0.0
        return np.array([rng.uniform(x0 + margin, x1 - margin),
                         rng.uniform(y0 + margin, y1 - margin)])

    def reset(self) -> dict:
        for i in range(self.n):
            self._spawn(i)
        return self._observe()

    # -- dynamics ----------------------------------------------------------

    def _resolve_collisions(self, pos: np.ndarray,
                            pos_before: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Push the agent disc out of every wall; returns (pos, contact mask).

        Walls are thin segments, so the motion path is first clamped at any
        wall crossing (the per-step speed can exceed the body radius, which
        would otherwise tunnel the center through and eject the agent on the
        far side); sliding contact then resolves by normal projection.
        """
        contact = np.zeros(self.n, dtype=bool)
        a = self.wall_var_a[self.wall_variant]          # (N, S, 2)
        m = self.wall_var_m[self.wall_variant]
        len_sq = np.maximum((m * m).sum(axis=2), 1e-12)

        move = pos - pos_before                                     # (N, 2)
        denom = move[:, None, 0] * m[..., 1] - move[:, None, 1] * m[..., 0]
        safe = np.where(np.abs(denom) < 1e-12, 1e-12, denom)
        ao = a - pos_before[:, None, :]
        t_cross = (ao[..., 0] * m[..., 1] - ao[..., 1] * m[..., 0]) / safe
        s_cross = (ao[..., 0] * move[:, None, 1] - ao[..., 1] * move[:, None, 0]) / safe
        crossing = ((np.abs(denom) > 1e-12) & (t_cross > 0.0) & (t_cross <= 1.0)
                    & (s_cross >= 0.0) & (s_cross <= 1.0))
        t_first = np.where(crossing, t_cross, np.inf).min(axis=1)
        crossed = np.isfinite(t_first)
        if crossed.any():
            frac = np.maximum(t_first[crossed] - 1e-6, 0.0)
            pos[crossed] = pos_before[crossed] + frac[:, None] * move[crossed]
            contact |= crossed

        for _ in range(3):
            rel = pos[:, None, :] - a
            tproj = np.clip((rel * m).sum(-1) / len_sq, 0.0, 1.0)
            closest = a + tproj[:, :, None] * m
            delta = pos[:, None, :] - closest
            dist = np.sqrt((delta * delta).sum(-1))
            pen = AGENT_RADIUS - dist
            hit = pen > 1e-12
            if not hit.any():
                break
            contact |= hit.any(axis=1)
            worst = np.argmax(np.where(hit, pen, -np.inf), axis=1)
            rows = np.nonzero(hit.any(axis=1))[0]
            for i in rows:
                j = worst[i]
                d = dist[i, j]
                if d > 1e-9:
                    normal = delta[i, j] / d
                else:
                    fallback = pos_before[i] - closest[i, j]
                    norm = np.linalg.norm(fallback)
                    normal = fallback / norm if norm > 1e-12 else np.array([1.0, 0.0])
                pos[i] = pos[i] + normal * (AGENT_RADIUS - d)
        return pos, contact

    def _move_tracking_objects(self) -> None:
        spec = self.spec
        for i in range(self.n):
            rng = self.env_rngs[i]
            if self.steps[i] % spec.tracking_waypoint_interval == 0:
                for kk in range(self.n_obj):
                    self.obj_waypoint[i, kk] = self._sample_waypoint(rng)
            delta = self.obj_waypoint[i] - self.obj_pos[i]
            dist = np.linalg.norm(delta, axis=1, keepdims=True)
            step = np.where(dist > 1e-9,
                            delta / np.maximum(dist, 1e-9) * np.minimum(spec.tracking_speed, dist),
                            0.0)
            self.obj_pos[i] += step

    def step(self, actions: np.ndarray) -> tuple[dict, np.ndarray, np.ndarray, list[dict]]:
        """Advance every env by one action in [-1, 1]^2; auto-reset finished ones."""
        actions = np.clip(np.asarray(actions, dtype=float), -1.0, 1.0)
        if actions.shape != (self.n, 2):
            raise ValueError(f"actions shape {actions.shape}, expected {(self.n, 2)}")
        spec = self.spec

        goal_pos_before = self._goal_positions()
        pos_before = self.pos.copy()

        turn = np.radians(MAX_TURN_DEG) * actions[:, 0]
        speed = (actions[:, 1] + 1.0) / 2.0 * MAX_SPEED
        heading = np.mod(self.heading + turn + np.pi, 2.0 * np.pi) - np.pi
        tentative = self.pos + speed[:, None] * np.stack([np.cos(heading), np.sin(heading)], -1)
        pos, wall_contact = self._resolve_collisions(tentative.copy(), pos_before)
        self.pos = pos
        self.heading = heading

        if spec.task == "tracking" and self.n_obj:
            self._move_tracking_objects()

        goal_contact = np.zeros(self.n, dtype=bool)
        adversary_contact = np.zeros(self.n, dtype=bool)
        if self.n_obj:
            dist = np.linalg.norm(self.pos[:, None, :] - self.obj_pos, axis=2)
            touching = dist <= (AGENT_RADIUS + self.obj_radius[None, :])
            goal_contact = (touching & self.obj_goal_mask).any(axis=1)
            adversary_contact = (touching & ~self.obj_goal_mask).any(axis=1) & ~goal_contact
        elif spec.goal_zone is not None:
            gx, gy, gr = spec.goal_zone
            inside = np.linalg.norm(self.pos - np.array([gx, gy]), axis=1) <= gr
            goal_contact = inside & ~self.goal_claimed
            self.goal_claimed |= inside

        # w_c fires on contact onset, not per step of sustained contact: a
        # per-step penalty makes any committed traversal catastrophically
        # expensive and the learned optimum collapses to idling at the spawn
        wall_onset = wall_contact & ~self.wall_touching
        self.wall_touching = wall_contact.copy()

        rewards = np.zeros(self.n)
        if spec.task == "navigation":
            move = (np.linalg.norm(self.pos - self.origin0, axis=1)
                    - np.linalg.norm(pos_before - self.origin0, axis=1))
            rewards += self.weights.lam * move
        else:
            move = (np.linalg.norm(self.pos - goal_pos_before, axis=1)
                    - np.linalg.norm(pos_before - goal_pos_before, axis=1))
            rewards += -self.weights.lam * move
        rewards += np.where(goal_contact, self.weights.w_g, 0.0)
        rewards += np.where(adversary_contact, self.weights.w_a, 0.0)
        rewards += np.where(wall_onset, self.weights.w_c, 0.0)

        self.steps += 1
        self.episode_return += rewards

        contact_event = wall_contact | goal_contact | adversary_contact
        object_event = goal_contact | adversary_contact
        truncated = self.steps >= spec.episode_steps
        if self.respawn:
            terminal = truncated.copy()
            for i in np.nonzero(object_event)[0]:
                if self.n_obj:
                    self._place_objects(i, self.env_rngs[i], initial=False)
        else:
            end_event = object_event if self.n_obj else goal_contact
            terminal = truncated | end_event

        infos: list[dict] = []
        if self.verbose_info:
            for i in range(self.n):
                info = {
                    "goal_contact": bool(goal_contact[i]),
                    "adversary_contact": bool(adversary_contact[i]),
                    "wall_contact": bool(wall_onset[i]),
                    "wall_touching": bool(wall_contact[i]),
                    "origin": self.origin0[i].tolist(),
                    "goal_pos": goal_pos_before[i].tolist(),
                    "pos_before": pos_before[i].tolist(),
                    "pos_after": self.pos[i].tolist(),
                }
                if terminal[i]:
                    info["episode_return"] = float(self.episode_return[i])
                    info["episode_steps"] = int(self.steps[i])
                infos.append(info)
        else:
            infos = [{} for _ in range(self.n)]
            for i in np.nonzero(terminal)[0]:
                infos[i] = {"episode_return": float(self.episode_return[i]),
                            "episode_steps": int(self.steps[i]),
                            "goal_contact": bool(goal_contact[i]),
                            "adversary_contact": bool(adversary_contact[i])}

        self.contact = contact_event.astype(float)
        self.prev_action = actions.copy()
        for i in np.nonzero(terminal)[0]:
            self._spawn(i)
        obs = self._observe()
        return obs, rewards, terminal, infos

    def _goal_positions(self) -> np.ndarray:
        if self.n_obj:
            idx = np.argmax(self.obj_goal_mask, axis=1)  # exactly one goal per env
            return self.obj_pos[np.arange(self.n), idx].copy()
        if self.spec.goal_zone is not None:
            gx, gy, _ = self.spec.goal_zone
            return np.tile(np.array([gx, gy]), (self.n, 1))
        return self.origin0.copy()

    # -- sensing -----------------------------------------------------------

    def render_padded(self) -> tuple[np.ndarray, np.ndarray]:
        """(N, E, Hp, Wp) albedo and depth at the padded angular grid."""
        return render_scene_batch(
            self.walls, self.grid, self.pos, self.heading, self.body.body_radius,
            self.obj_pos, self.obj_radius, self.obj_axis_azimuth, self.obj_cycles,
            self.spec.object_albedo[0], self.spec.object_albedo[1],
            self.spec.background,
            wall_variants=(self.wall_var_a, self.wall_var_m),
            wall_variant_of=self.wall_variant,
        )

    def _sense(self) -> np.ndarray:
        """Per-step frames (N, E, H, W, 3) through the eye's imaging path."""
        m = self.genome.morphological
        sigma = self.spec.noise_sigma
        albedo, _ = self.render_padded()
        if self.kernel is not None:
            from numpy.lib.stride_tricks import sliding_window_view
            kh, kw = self.kernel.shape
            h, w = kh - 1, kw - 1
            flat = albedo.reshape(self.n * self.n_eyes, *albedo.shape[2:]).astype(np.float32)
            win = sliding_window_view(flat, (kh, kw), axis=(1, 2))[:, :h, :w]
            cols = np.ascontiguousarray(win).reshape(-1, kh * kw)
            imgs = (cols @ self._kernel_cols).astype(float)
            imgs = imgs.reshape(self.n * self.n_eyes, h, w, 3)
            imgs = imgs * self.genome.optical.aperture_fraction**2
        else:
            crop_h, crop_w = self.grid.crop
            imgs = albedo[:, :, crop_h, crop_w]
            imgs = np.repeat(imgs[..., None], 3, axis=-1)
            imgs = imgs.reshape(self.n * self.n_eyes, m.resolution_h, m.resolution_w, 3)
        if sigma > 0.0:
            imgs = imgs + self.noise_rng.normal(0.0, sigma, size=imgs.shape)
        imgs = np.clip(imgs, 0.0, 1.0)
        return imgs.reshape(self.n, self.n_eyes, m.resolution_h, m.resolution_w, 3)

    def _observe(self) -> dict:
        frame = self._sense()
        self.frames = np.roll(self.frames, 1, axis=1)
        self.frames[:, 0] = frame
        return {
            "stack": self.frames.copy(),
            "contact": self.contact.copy(),
            "prev_action": self.prev_action.copy(),
        }


def _wall_geometry(spec: WorldSpec) -> WallGeometry:
    if not spec.walls:
        raise ValueError("world needs at least one wall")
    a = np.array([w.a for w in spec.walls], dtype=float)
    b = np.array([w.b for w in spec.walls], dtype=float)
    m = b - a
    return WallGeometry(
        a=a, m=m, length=np.linalg.norm(m, axis=1),
        stripe_freq=np.array([w.stripe_freq for w in spec.walls]),
        stripe_phase=np.array([w.stripe_phase for w in spec.walls]),
        albedo_lo=np.array([w.albedo_lo for w in spec.walls]),
        albedo_hi=np.array([w.albedo_hi for w in spec.walls]),
        half_height=spec.wall_half_height,
    )


# ---------------------------------------------------------------------------
# Single-instance contract wrappers
# ---------------------------------------------------------------------------

class World:
    """Batch-of-one wrapper exposing the single-environment contract."""

    def __init__(self, spec: WorldSpec, genome: Genome, seed: int,
                 weights: RewardWeights = TRAINING_WEIGHTS,
                 respawn_on_contact: bool = False,
                 body: BodyGeometry = DEFAULT_BODY,
                 optics: OpticsGeometry = DEFAULT_OPTICS):
        self.engine = WorldEngine(spec, genome, 1, seed, weights,
                                  respawn_on_contact, body, optics)
        self._last_obs: Optional[dict] = None

    @property
    def spec(self) -> WorldSpec:
        return self.engine.spec

    def reset(self) -> Observation:
        self._last_obs = self.engine.reset()
        return self._single_obs()

    def _single_obs(self) -> Observation:
        o = self._last_obs
        return Observation(stack=o["stack"][0], contact=float(o["contact"][0]),
                           prev_action=o["prev_action"][0])

    def snapshot(self) -> StateSnapshot:
        eng = self.engine
        goal = eng._goal_positions()[0].copy() if (eng.n_obj or eng.spec.goal_zone) else None
        return StateSnapshot(agent_pos=eng.pos[0].copy(),
                             agent_heading=float(eng.heading[0]),
                             goal_pos=goal, step=int(eng.steps[0]))

    def step(self, action: np.ndarray) -> tuple[Observation, Transition]:
        before = self.snapshot()
        obs, rewards, terminal, infos = self.engine.step(np.asarray(action)[None, :])
        self._last_obs = obs
        # the engine auto-respawns finished episodes, so the post-step pose
        # comes from the info record, not the live state
        info = infos[0]
        after = StateSnapshot(agent_pos=np.asarray(info["pos_after"], dtype=float),
                              agent_heading=float(self.engine.heading[0]),
                              goal_pos=np.asarray(info["goal_pos"], dtype=float),
                              step=before.step + 1)
        tr = Transition(before=before, after=after,
                        action=np.asarray(action, dtype=float).copy(),
                        reward=float(rewards[0]), terminal=bool(terminal[0]),
                        info=info)
        return self._single_obs(), tr


def render_eye(world: World, eye_index: int, padded: bool = True) -> SceneImage:
    """Scene image for one eye at the world's current pose."""
    eng = world.engine
    if not (0 <= eye_index < eng.n_eyes):
        raise ValueError(f"eye_index {eye_index} out of range ({eng.n_eyes} eyes)")
    albedo, depth = eng.render_padded()
    if not padded:
        ch, cw = eng.grid.crop
        albedo = albedo[:, :, ch, cw]
        depth = depth[:, :, ch, cw]
    values = np.repeat(albedo[0, eye_index][..., None], 3, axis=-1)
    return SceneImage(values=values, depth=depth[0, eye_index])


def pinhole_image(world: World, eye_index: int, sigma: float = 0.0,
                  rng: Optional[np.random.Generator] = None) -> SensorImage:
    """Direct raycast render at H x W: no blur, full throughput."""
    scene = render_eye(world, eye_index, padded=False)
    values = scene.values.astype(float)
    if sigma > 0.0:
        if rng is None:
            raise ValueError("sigma > 0 requires an rng")
        values = values + rng.normal(0.0, sigma, size=values.shape)
    return SensorImage(values=np.clip(values, 0.0, 1.0),
                       aperture_fraction=1.0, noise_sigma=sigma)


def assemble_observation(history: Sequence[np.ndarray], contact: float,
                         prev_action: np.ndarray, genome: Genome) -> Observation:
    """Stack the newest memory_frames frames (newest first), zero-padded.

    history is ordered oldest to newest; each frame is (eyes, H, W, 3).
    Flattening order for the policy is row-major over
    (memory, eyes, H, W, channel).
    """
    m = genome.morphological
    mem = genome.neural.memory_frames
    shape = (genome.morphological.num_eyes, m.resolution_h, m.resolution_w, 3)
    stack = np.zeros((mem, *shape))
    for k in range(min(mem, len(history))):
        frame = np.asarray(history[-1 - k], dtype=float)
        if frame.shape != shape:
            raise ValueError(f"frame shape {frame.shape}, expected {shape}")
        stack[k] = frame
    return Observation(stack=stack, contact=float(contact),
                       prev_action=np.asarray(prev_action, dtype=float))


def transition_to_dict(tr: Transition) -> dict:
    return {
        "before": tr.before.agent_pos.tolist(),
        "after": tr.after.agent_pos.tolist(),
        "heading": tr.after.agent_heading,
        "action": tr.action.tolist(),
        "reward": tr.reward,
        "terminal": tr.terminal,
        "info": {k: tr.info[k] for k in ("goal_contact", "adversary_contact",
                                         "wall_contact", "origin", "goal_pos")},
    }


def write_episode_jsonl(path, world: World, policy, max_steps: Optional[int] = None) -> int:
    """Roll one episode and log one transition per line; returns step count."""
    import json
    obs = world.reset()
    steps = 0
    cap = max_steps if max_steps is not None else world.spec.episode_steps
    with open(path, "w", encoding="utf-8") as fh:
        for _ in range(cap):
            action = policy(obs)
            obs, tr = world.step(action)
            fh.write(json.dumps(transition_to_dict(tr), sort_keys=True) + "\n")
            steps += 1
            if tr.terminal:
                break
    return steps


def pinhole_reference_metrics(genome: Genome, spec: WorldSpec, seed: int = 0,
                              body: BodyGeometry = DEFAULT_BODY,
                              optics: OpticsGeometry = DEFAULT_OPTICS) -> dict:
    """PSNR/SSIM of the optics-formed image against the pinhole render.

    One noiseless frame of eye 0 at the spawn pose; the pinhole render of the
    same pose is the reference image.
    """
    from .metrics import PSNR_CAP_DB, psnr, ssim
    clean = replace(spec, noise_sigma=0.0)
    world = World(clean, genome, seed=seed, body=body, optics=optics)
    obs = world.reset()
    formed = obs.stack[0, 0]
    reference = pinhole_image(world, 0).values
    value = psnr(formed, reference)
    return {
        "psnr_db": PSNR_CAP_DB if math.isinf(value) else value,
        "ssim": ssim(formed, reference),
    }


def evaluate_fitness(genome: Genome, policy, spec: WorldSpec, n_episodes: int = 6,
                     seed: int = 0, weights: RewardWeights = FITNESS_WEIGHTS,
                     body: BodyGeometry = DEFAULT_BODY,
                     optics: OpticsGeometry = DEFAULT_OPTICS) -> tuple[float, dict]:
    """Mean return over fixed-seed episodes; objects respawn on contact.

    policy is either a callable(Observation) -> action in [-1, 1]^2 or a
    PolicyNetwork (then all episodes step in one batched engine, which is
    substantially faster and what the evolution loop uses). Episode i always
    draws from the stream (seed, EVAL, i), so scores are reproducible.
    """
    engine_seed = rngmod.agent_seed(seed, rngmod.STREAM_EVAL, 0)
    engine = WorldEngine(spec, genome, n_envs=n_episodes, seed=engine_seed,
                         weights=weights, respawn_on_contact=True,
                         body=body, optics=optics, verbose_info=True)
    obs = engine.reset()
    batched = hasattr(policy, "act_batch") and hasattr(policy, "split_obs_batch")
    returns = np.zeros(n_episodes)
    events = {"goals": 0, "adversaries": 0, "wall_steps": 0}
    for _ in range(spec.episode_steps):
        if batched:
            eyes, extras = policy.split_obs_batch(obs["stack"], obs["contact"],
                                                  obs["prev_action"])
            actions, _, _, _ = policy.act_batch(eyes, extras, deterministic=True)
        else:
            actions = np.stack([
                np.asarray(policy(Observation(stack=obs["stack"][i],
                                              contact=float(obs["contact"][i]),
                                              prev_action=obs["prev_action"][i])))
                for i in range(n_episodes)
            ])
        obs, rewards, _, infos = engine.step(actions)
        returns += rewards
        events["goals"] += sum(int(inf["goal_contact"]) for inf in infos)
        events["adversaries"] += sum(int(inf["adversary_contact"]) for inf in infos)
        events["wall_steps"] += sum(int(inf["wall_contact"]) for inf in infos)
    return float(returns.mean()), {"episode_returns": returns.tolist(), **events}
