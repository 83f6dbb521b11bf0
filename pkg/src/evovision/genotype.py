"""Heritable description of an agent's visual system.

Three gene clusters (morphological, optical, neural) plus a mutability mask
form the unit of evolutionary search.  A schema maps the mutable scalars to a
normalized real vector for the continuous optimizer; ``decode`` is the sole
path from optimizer space back to genomes and always repairs its output into
the valid set (bounds, rounding, bilateral symmetry, eye non-overlap).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

# Gene bounds. Continuous genes are clamped, integer genes are rounded
# half-away-from-zero then clamped. num_eyes / hidden_neurons ranges follow
# the mutation-operator contract; resolution and memory caps are practical
# desk-scale limits exposed here rather than buried in decode().
GENE_BOUNDS: dict[str, tuple[float, float, bool]] = {
    "num_eyes": (1, 20, True),
    "placement_range": (1.0, 360.0, False),
    "fov": (1.0, 100.0, False),
    "resolution_w": (1, 32, True),
    "resolution_h": (1, 32, True),
    "phase_mask": (0.0, 1.0, False),       # applies to each of the 16 cells
    "refractive_index": (1.0, 2.0, False),
    "aperture_fraction": (0.0, 1.0, False),
    "memory_frames": (1, 16, True),
    "hidden_neurons": (1, 512, True),
}

# Canonical gene order: serialization, schemas and mutability masks all use it.
GENE_NAMES: tuple[str, ...] = tuple(GENE_BOUNDS)

PHASE_MASK_CELLS = 16  # 4x4 control grid


@dataclass(frozen=True)
class BodyGeometry:
    """Physical constants of the agent body used by placement and acuity math."""

    body_radius: float = 0.2          # world units
    eye_sensor_size: float = 0.047    # world units of equator arc per eye

    @property
    def eye_extent_deg(self) -> float:
        """Angular footprint of one eye on the body equator."""
        return math.degrees(self.eye_sensor_size / self.body_radius)


DEFAULT_BODY = BodyGeometry()


@dataclass(frozen=True)
class MorphologicalGenes:
    num_eyes: int = 1
    placement_range: float = 45.0   # degrees, eyes spread symmetrically about heading
    fov: float = 45.0               # degrees, stored continuous; snap only in reports
    resolution_w: int = 1
    resolution_h: int = 1


@dataclass(frozen=True)
class OpticalGenes:
    enabled: bool = False
    phase_mask: tuple[float, ...] = (0.0,) * PHASE_MASK_CELLS  # row-major 4x4, [0,1]
    refractive_index: float = 1.5
    aperture_fraction: float = 1.0

    def mask_array(self) -> np.ndarray:
        return np.asarray(self.phase_mask, dtype=float).reshape(4, 4)


@dataclass(frozen=True)
class NeuralGenes:
    memory_frames: int = 1
    hidden_neurons: int = 32


@dataclass(frozen=True)
class Genome:
    morphological: MorphologicalGenes = field(default_factory=MorphologicalGenes)
    optical: OpticalGenes = field(default_factory=OpticalGenes)
    neural: NeuralGenes = field(default_factory=NeuralGenes)
    # Names of genes the optimizer may vary; everything else is copied verbatim
    # from the template at decode time (bit-identical across a run).
    mutability: frozenset[str] = frozenset()

    def gene(self, name: str):
        for cluster in (self.morphological, self.optical, self.neural):
            if hasattr(cluster, name):
                return getattr(cluster, name)
        raise KeyError(name)


@dataclass(frozen=True)
class Violation:
    path: str
    message: str


def eye_placements(m: MorphologicalGenes) -> np.ndarray:
    """Eye azimuths in degrees, uniform, bilaterally symmetric about 0.

    n eyes span [-range/2, +range/2] with spacing range/(n-1); a single eye
    sits at 0 (symmetry forces the center).
    """
    if m.num_eyes < 1:
        raise ValueError(f"num_eyes must be >= 1, got {m.num_eyes}")
    if m.num_eyes == 1:
        return np.zeros(1)
    half = m.placement_range / 2.0
    return np.linspace(-half, half, m.num_eyes)


def validate(g: Genome, body: BodyGeometry = DEFAULT_BODY) -> list[Violation]:
    """Report every violated invariant; empty list means valid. Never raises."""
    out: list[Violation] = []

    def bounds(path: str, value: float) -> None:
        lo, hi, _ = GENE_BOUNDS[path.split(".")[-1]]
        if not (lo <= value <= hi):
            out.append(Violation(path, f"value {value!r} outside [{lo}, {hi}]"))

    m, o, n = g.morphological, g.optical, g.neural
    bounds("morphological.num_eyes", m.num_eyes)
    bounds("morphological.placement_range", m.placement_range)
    bounds("morphological.fov", m.fov)
    bounds("morphological.resolution_w", m.resolution_w)
    bounds("morphological.resolution_h", m.resolution_h)
    for i, v in enumerate(o.phase_mask):
        if not (0.0 <= v <= 1.0):
            out.append(Violation(f"optical.phase_mask[{i}]", f"value {v!r} outside [0, 1]"))
    bounds("optical.refractive_index", o.refractive_index)
    bounds("optical.aperture_fraction", o.aperture_fraction)
    bounds("neural.memory_frames", n.memory_frames)
    bounds("neural.hidden_neurons", n.hidden_neurons)

    # Non-overlap: total angular footprint of the eyes must fit the range.
    extent = body.eye_extent_deg
    if m.num_eyes >= 1 and extent * m.num_eyes > m.placement_range + 1e-9:
        out.append(
            Violation(
                "morphological.num_eyes",
                f"{m.num_eyes} eyes x {extent:.3f} deg exceed placement_range "
                f"{m.placement_range:.3f} deg",
            )
        )
    for name in g.mutability:
        if name not in GENE_BOUNDS:
            out.append(Violation(f"mutability.{name}", "unknown gene name"))
    return out


# ---------------------------------------------------------------------------
# Schema: mutable scalars <-> normalized vector
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Slot:
    path: str          # gene name, phase mask cells as phase_mask[i]
    lo: float
    hi: float
    integer: bool


@dataclass(frozen=True)
class GenomeSchema:
    slots: tuple[Slot, ...]

    def __len__(self) -> int:
        return len(self.slots)


def schema_for(g: Genome) -> GenomeSchema:
    """One slot per mutable scalar, in canonical gene order."""
    slots: list[Slot] = []
    for name in GENE_NAMES:
        if name not in g.mutability:
            continue
        lo, hi, integer = GENE_BOUNDS[name]
        if name == "phase_mask":
            slots.extend(
                Slot(f"phase_mask[{i}]", lo, hi, False) for i in range(PHASE_MASK_CELLS)
            )
        else:
            slots.append(Slot(name, float(lo), float(hi), integer))
    return GenomeSchema(tuple(slots))


# Continuous genes live on a 2^-44 lattice of their range: the normalized <->
# natural-unit float maps are not exactly invertible otherwise, and the
# round-trip identity decode(encode(g)) == g must hold bitwise on decode's
# image. The lattice step (~6e-14 of the range) is far below any search scale.
_LATTICE = float(1 << 44)


def _normalize(slot: Slot, value: float) -> float:
    if slot.hi == slot.lo:
        return 0.0
    return (float(value) - slot.lo) / (slot.hi - slot.lo)


def _round_half_away(x: float) -> int:
    return math.floor(x + 0.5) if x >= 0 else math.ceil(x - 0.5)


def _denormalize(slot: Slot, v: float) -> float:
    v = float(np.clip(v, 0.0, 1.0))
    x = slot.lo + round(v * _LATTICE) / _LATTICE * (slot.hi - slot.lo)
    if slot.integer:
        x = min(max(_round_half_away(x), slot.lo), slot.hi)
    return x


def _snap_up_to_lattice(name: str, value: float) -> float:
    """Smallest lattice point of the gene's range that is >= value."""
    lo, hi, _ = GENE_BOUNDS[name]
    k = math.ceil((value - lo) / (hi - lo) * _LATTICE - 1e-9)
    x = lo + k / _LATTICE * (hi - lo)
    while x < value:
        k += 1
        x = lo + k / _LATTICE * (hi - lo)
    return min(x, hi)


def encode(g: Genome) -> np.ndarray:
    """Genome -> normalized vector (one real in [0,1] per mutable scalar)."""
    schema = schema_for(g)
    vec = np.empty(len(schema))
    for k, slot in enumerate(schema.slots):
        if slot.path.startswith("phase_mask["):
            i = int(slot.path[len("phase_mask["):-1])
            value = g.optical.phase_mask[i]
        else:
            value = g.gene(slot.path)
        vec[k] = _normalize(slot, value)
    return vec


def decode(vec: Sequence[float], template: Genome, body: BodyGeometry = DEFAULT_BODY) -> Genome:
    """Vector -> genome: clamp, round integers, copy frozen genes, repair.

    Repairs (symmetry is structural here; placements derive from the genes):
    - eye non-overlap: widen placement_range if it is mutable, otherwise
      reduce num_eyes if it is mutable. A valid template with frozen
      morphology can never get out of the valid set.
    """
    schema = schema_for(template)
    vec = np.asarray(vec, dtype=float)
    if vec.shape != (len(schema),):
        raise ValueError(f"vector length {vec.shape} does not match schema ({len(schema)} slots)")

    values: dict[str, float] = {}
    mask = list(template.optical.phase_mask)
    for k, slot in enumerate(schema.slots):
        x = _denormalize(slot, vec[k])
        if slot.path.startswith("phase_mask["):
            mask[int(slot.path[len("phase_mask["):-1])] = x
        else:
            values[slot.path] = x

    m = template.morphological
    o = template.optical
    n = template.neural
    m = replace(
        m,
        num_eyes=int(values.get("num_eyes", m.num_eyes)),
        placement_range=values.get("placement_range", m.placement_range),
        fov=values.get("fov", m.fov),
        resolution_w=int(values.get("resolution_w", m.resolution_w)),
        resolution_h=int(values.get("resolution_h", m.resolution_h)),
    )
    if "phase_mask" in template.mutability:
        o = replace(o, phase_mask=tuple(mask))
    o = replace(
        o,
        refractive_index=values.get("refractive_index", o.refractive_index),
        aperture_fraction=values.get("aperture_fraction", o.aperture_fraction),
    )
    n = replace(
        n,
        memory_frames=int(values.get("memory_frames", n.memory_frames)),
        hidden_neurons=int(values.get("hidden_neurons", n.hidden_neurons)),
    )

    # non-overlap repair (repaired ranges snap up onto the slot lattice so the
    # round-trip identity still holds on repaired genomes)
    extent = body.eye_extent_deg
    needed = extent * m.num_eyes
    if needed > m.placement_range:
        if "placement_range" in template.mutability and needed <= GENE_BOUNDS["placement_range"][1]:
            m = replace(m, placement_range=_snap_up_to_lattice("placement_range", needed))
        elif "num_eyes" in template.mutability:
            m = replace(m, num_eyes=max(1, int(m.placement_range // extent)))
            if m.num_eyes * extent > m.placement_range and "placement_range" in template.mutability:
                m = replace(m, placement_range=_snap_up_to_lattice(
                    "placement_range", m.num_eyes * extent))

    return Genome(morphological=m, optical=o, neural=n, mutability=template.mutability)


# ---------------------------------------------------------------------------
# Flat key-value serialization (generation logs, --genome flag)
# ---------------------------------------------------------------------------

_TEXT_KEYS = (
    "num_eyes", "placement_range", "fov", "resolution_w", "resolution_h",
    "optics_enabled", "phase_mask", "refractive_index", "aperture_fraction",
    "memory_frames", "hidden_neurons", "mutable",
)


def genome_to_dict(g: Genome) -> dict:
    """Flat key/value view with stable key order (see _TEXT_KEYS)."""
    m, o, n = g.morphological, g.optical, g.neural
    return {
        "num_eyes": m.num_eyes,
        "placement_range": m.placement_range,
        "fov": m.fov,
        "resolution_w": m.resolution_w,
        "resolution_h": m.resolution_h,
        "optics_enabled": o.enabled,
        "phase_mask": list(o.phase_mask),
        "refractive_index": o.refractive_index,
        "aperture_fraction": o.aperture_fraction,
        "memory_frames": n.memory_frames,
        "hidden_neurons": n.hidden_neurons,
        "mutable": sorted(g.mutability),
    }


def genome_from_dict(d: dict) -> Genome:
    return Genome(
        morphological=MorphologicalGenes(
            num_eyes=int(d["num_eyes"]),
            placement_range=float(d["placement_range"]),
            fov=float(d["fov"]),
            resolution_w=int(d["resolution_w"]),
            resolution_h=int(d["resolution_h"]),
        ),
        optical=OpticalGenes(
            enabled=bool(d["optics_enabled"]),
            phase_mask=tuple(float(x) for x in d["phase_mask"]),
            refractive_index=float(d["refractive_index"]),
            aperture_fraction=float(d["aperture_fraction"]),
        ),
        neural=NeuralGenes(
            memory_frames=int(d["memory_frames"]),
            hidden_neurons=int(d["hidden_neurons"]),
        ),
        mutability=frozenset(d.get("mutable", ())),
    )


def genome_to_text(g: Genome) -> str:
    d = genome_to_dict(g)
    lines = []
    for key in _TEXT_KEYS:
        value = d["mutable"] if key == "mutable" else d.get(key)
        if key == "phase_mask":
            value = ",".join(repr(float(x)) for x in value)
        elif key == "mutable":
            value = ",".join(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        else:
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def genome_from_text(text: str) -> Genome:
    d: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "phase_mask":
            d[key] = [float(x) for x in value.split(",")] if value else []
        elif key == "mutable":
            d["mutable"] = [x for x in (s.strip() for s in value.split(",")) if x]
        elif key == "optics_enabled":
            d[key] = value.lower() in ("true", "1", "yes")
        elif key in ("num_eyes", "resolution_w", "resolution_h", "memory_frames", "hidden_neurons"):
            d[key] = int(value)
        else:
            d[key] = float(value)
    missing = [k for k in _TEXT_KEYS if k not in d and k != "mutable"]
    if missing:
        raise ValueError(f"missing genome keys: {missing}")
    return genome_from_dict(d)


def random_genome(rng: np.random.Generator, mutability: Iterable[str] = GENE_NAMES,
                  body: BodyGeometry = DEFAULT_BODY) -> Genome:
    """Uniformly sampled valid genome (decode repairs it into the valid set)."""
    template = Genome(mutability=frozenset(mutability))
    vec = rng.uniform(0.0, 1.0, size=len(schema_for(template)))
    return decode(vec, template, body)
