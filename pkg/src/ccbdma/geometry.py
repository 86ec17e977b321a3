"""Seeded random chaotic-cavity DMA layouts.

A layout is an irregular quadrilateral cavity with one concave notch, a via
fence along its boundary, a single feed and a set of meta-atoms placed by
rejection sampling.  The boundary, feed and meta-atoms depend only on the
seed (not on the via spacing), so coupling presets built from the same seed
share everything except the fence.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional

import numpy as np
import shapely
from shapely.geometry import LineString, Polygon

from .physics import PhysicsContext

MAX_ATTEMPTS = 10_000

FEED_RULES = ("random", "centroid")


class InfeasibleSpecError(ValueError):
    """Rejection sampling could not place every scatterer."""


@dataclass(frozen=True)
class TopologySpec:
    """Parameters for one random cavity layout (SI units)."""

    cavity_side: float
    boundary_irregularity: float = 0.3
    n_meta_atoms: int = 64
    via_spacing: float = 0.03
    min_separation: float = 0.006
    feed_placement: str = "random"
    rng_seed: int = 0
    label: str = "custom"
    unilateral: bool = False

    def check(self, context: Optional[PhysicsContext] = None) -> None:
        if context is not None and self.cavity_side < 5 * context.wavelength * (1 - 1e-9):
            raise ValueError("cavity_side must be at least 5 wavelengths")
        if not 0 <= self.boundary_irregularity < 1:
            raise ValueError("boundary_irregularity must lie in [0, 1)")
        if self.n_meta_atoms < 1:
            raise ValueError("n_meta_atoms must be >= 1")
        if not self.via_spacing > 0:
            raise ValueError("via_spacing must be positive")
        if not self.min_separation > 0:
            raise ValueError("min_separation must be positive")
        if self.feed_placement not in FEED_RULES:
            raise ValueError(f"feed_placement must be one of {FEED_RULES}")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be an unsigned 64-bit integer")

    @classmethod
    def default(cls, context: PhysicsContext, **overrides) -> "TopologySpec":
        lam = context.wavelength
        base = dict(cavity_side=10 * lam, via_spacing=lam, min_separation=lam / 5)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TopologySpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TopologySpec fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("cavity_side", "boundary_irregularity", "via_spacing", "min_separation"):
            if key in d:
                d[key] = float(d[key])
        for key in ("n_meta_atoms", "rng_seed"):
            if key in d:
                d[key] = int(d[key])
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TopologySpec":
        return cls.from_dict(json.loads(text))


def _fingerprint(spec: TopologySpec, context: PhysicsContext) -> str:
    payload = json.dumps({"spec": spec.to_dict(), "context": context.to_dict()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class DmaTopology:
    feed_position: np.ndarray
    meta_atom_positions: np.ndarray
    via_positions: np.ndarray
    boundary_polygon: np.ndarray
    context: PhysicsContext
    spec: TopologySpec
    spec_fingerprint: str

    @property
    def n_meta(self) -> int:
        return len(self.meta_atom_positions)

    @property
    def n_via(self) -> int:
        return len(self.via_positions)

    @property
    def unilateral(self) -> bool:
        return self.spec.unilateral

    def scatterer_positions(self) -> np.ndarray:
        """Meta-atoms first, then vias: the row order of the interaction matrix."""
        return np.vstack([self.meta_atom_positions, self.via_positions.reshape(-1, 2)])

    def to_dict(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "context": self.context.to_dict(),
            "spec_fingerprint": self.spec_fingerprint,
            "feed_position": self.feed_position.tolist(),
            "meta_atom_positions": self.meta_atom_positions.tolist(),
            "via_positions": self.via_positions.tolist(),
            "boundary_polygon": self.boundary_polygon.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DmaTopology":
        return cls(
            feed_position=np.asarray(d["feed_position"], dtype=float),
            meta_atom_positions=np.asarray(d["meta_atom_positions"], dtype=float).reshape(-1, 2),
            via_positions=np.asarray(d["via_positions"], dtype=float).reshape(-1, 2),
            boundary_polygon=np.asarray(d["boundary_polygon"], dtype=float),
            context=PhysicsContext.from_dict(d["context"]),
            spec=TopologySpec.from_dict(d["spec"]),
            spec_fingerprint=d["spec_fingerprint"],
        )

    def replace(self, **changes) -> "DmaTopology":
        return replace(self, **changes)


def _random_boundary(spec: TopologySpec, rng: np.random.Generator) -> np.ndarray:
    L = spec.cavity_side
    corners = np.array([[-L / 2, -L / 2], [L / 2, -L / 2], [L / 2, L / 2], [-L / 2, L / 2]])
    max_shift = spec.boundary_irregularity * L / 4
    radius = max_shift * np.sqrt(rng.uniform(size=4))
    angle = rng.uniform(0, 2 * np.pi, size=4)
    corners = corners + np.column_stack([radius * np.cos(angle), radius * np.sin(angle)])

    # triangular notch cut into one edge; corners are counter-clockwise so the
    # inward normal is the edge direction rotated by +90 degrees
    edge = int(rng.integers(4))
    a, b = corners[edge], corners[(edge + 1) % 4]
    length = np.linalg.norm(b - a)
    direction = (b - a) / length
    inward = np.array([-direction[1], direction[0]])
    centre = rng.uniform(0.35, 0.65)
    half_width = rng.uniform(0.05, 0.1) * L / length
    depth = rng.uniform(0.1, 0.2) * L
    mid = a + centre * (b - a)
    notch = [
        a + (centre - half_width) * (b - a),
        mid + depth * inward,
        a + (centre + half_width) * (b - a),
    ]
    verts = list(corners[: edge + 1]) + notch + list(corners[edge + 1:])
    return np.array(verts)


def _place_points(
    n: int,
    polygon: Polygon,
    boundary: LineString,
    occupied: List[np.ndarray],
    min_sep: float,
    rng: np.random.Generator,
    what: str,
) -> np.ndarray:
    minx, miny, maxx, maxy = polygon.bounds
    placed = []
    existing = np.array(occupied).reshape(-1, 2)
    for i in range(n):
        for _ in range(MAX_ATTEMPTS):
            p = rng.uniform([minx, miny], [maxx, maxy])
            if not shapely.contains_xy(polygon, p[0], p[1]):
                continue
            if shapely.distance(boundary, shapely.points(p)) < min_sep:
                continue
            if len(existing) and np.min(np.linalg.norm(existing - p, axis=1)) < min_sep:
                continue
            break
        else:
            raise InfeasibleSpecError(
                f"infeasible spec: could not place {what} #{i} after {MAX_ATTEMPTS} attempts"
            )
        placed.append(p)
        existing = np.vstack([existing, p])
    return np.array(placed).reshape(-1, 2)


def fence_vias(boundary_polygon: np.ndarray, via_spacing: float) -> np.ndarray:
    """Vias at uniform arc-length spacing (<= ``via_spacing``) along each edge.

    Every polygon vertex carries a via; an edge of length ``l`` is split into
    ``ceil(l / via_spacing)`` equal segments.
    """
    vias = []
    nv = len(boundary_polygon)
    for i in range(nv):
        a, b = boundary_polygon[i], boundary_polygon[(i + 1) % nv]
        length = float(np.linalg.norm(b - a))
        segments = max(1, math.ceil(length / via_spacing - 1e-9))
        t = np.arange(segments)[:, None] / segments
        vias.append(a + t * (b - a))
    return np.vstack(vias)


def generate_topology(spec: TopologySpec, context: PhysicsContext) -> DmaTopology:
    """Build a random layout; a pure function of ``(spec, context)``."""
    spec.check(context)
    rng = np.random.default_rng(spec.rng_seed)
    verts = _random_boundary(spec, rng)
    polygon = Polygon(verts)
    if not polygon.is_valid:
        raise InfeasibleSpecError("infeasible spec: generated boundary is self-intersecting")
    boundary = polygon.exterior

    if spec.feed_placement == "centroid":
        feed = np.array(polygon.centroid.coords[0])
        if shapely.distance(boundary, shapely.points(feed)) < spec.min_separation:
            raise InfeasibleSpecError("infeasible spec: centroid feed too close to the boundary")
    else:
        feed = _place_points(1, polygon, boundary, [], spec.min_separation, rng, "feed")[0]
    atoms = _place_points(
        spec.n_meta_atoms, polygon, boundary, [feed], spec.min_separation, rng, "meta-atom"
    )
    vias = fence_vias(verts, spec.via_spacing)
    return DmaTopology(
        feed_position=feed,
        meta_atom_positions=atoms,
        via_positions=vias,
        boundary_polygon=verts,
        context=context,
        spec=spec,
        spec_fingerprint=_fingerprint(spec, context),
    )


def coupling_levels(
    context: Optional[PhysicsContext] = None, base: Optional[TopologySpec] = None
) -> List[TopologySpec]:
    """Presets ordered by increasing mutual coupling.

    UNILATERAL keeps SPARSE's fence but is flagged so the solver drops every
    coupling except feed -> scatterer.
    """
    context = context or PhysicsContext(10e9)
    base = base or TopologySpec.default(context)
    lam = context.wavelength
    return [
        replace(base, label="UNILATERAL", unilateral=True, via_spacing=lam),
        replace(base, label="SPARSE", unilateral=False, via_spacing=lam),
        replace(base, label="MEDIUM", unilateral=False, via_spacing=lam / 3),
        replace(base, label="DENSE", unilateral=False, via_spacing=lam / 10),
    ]


def level_by_name(name: str, context: Optional[PhysicsContext] = None,
                  base: Optional[TopologySpec] = None) -> TopologySpec:
    for spec in coupling_levels(context, base):
        if spec.label == name.upper():
            return spec
    raise KeyError(f"unknown coupling level {name!r}")


@dataclass
class Violation:
    kind: str
    indices: list
    detail: str = ""


@dataclass
class ValidationReport:
    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set:
        return {v.kind for v in self.violations}


def validate_topology(t: DmaTopology) -> ValidationReport:
    """List every violated layout invariant; never raises.

    Separation is enforced between any pair that involves the feed or a
    meta-atom.  Via-to-via distance is set by the fence spacing instead.
    """
    report = ValidationReport()
    try:
        polygon = Polygon(t.boundary_polygon)
        boundary = polygon.exterior
        atoms = np.asarray(t.meta_atom_positions, dtype=float).reshape(-1, 2)
        vias = np.asarray(t.via_positions, dtype=float).reshape(-1, 2)
        feed = np.asarray(t.feed_position, dtype=float).reshape(2)
        min_sep = t.spec.min_separation

        if not shapely.contains_xy(polygon, feed[0], feed[1]):
            report.violations.append(Violation("containment", ["feed"], "feed outside cavity"))
        outside = np.flatnonzero(~shapely.contains_xy(polygon, atoms[:, 0], atoms[:, 1]))
        if len(outside):
            report.violations.append(
                Violation("containment", outside.tolist(), "meta-atoms outside cavity"))

        # labels: "feed", atom index, ("via", j)
        active = np.vstack([feed[None, :], atoms])
        labels = ["feed"] + list(range(len(atoms)))
        d = np.linalg.norm(active[:, None, :] - active[None, :, :], axis=-1)
        iu = np.triu_indices(len(active), k=1)
        close = d[iu] < min_sep * (1 - 1e-12)
        pairs = [(labels[i], labels[j]) for i, j, c in zip(iu[0], iu[1], close) if c]
        if len(vias):
            dv = np.linalg.norm(active[:, None, :] - vias[None, :, :], axis=-1)
            for i, j in zip(*np.nonzero(dv < min_sep * (1 - 1e-12))):
                pairs.append((labels[i], ("via", int(j))))
        if pairs:
            report.violations.append(Violation("separation", pairs, f"closer than {min_sep:g} m"))

        if len(vias):
            off = np.flatnonzero(shapely.distance(boundary, shapely.points(vias)) > 1e-9)
            if len(off):
                report.violations.append(
                    Violation("via_on_boundary", off.tolist(), "vias off the boundary"))
            # gap between consecutive vias along the fence
            gaps = np.linalg.norm(np.roll(vias, -1, axis=0) - vias, axis=1)
            wide = np.flatnonzero(gaps > t.spec.via_spacing * (1 + 1e-9))
            if len(wide):
                report.violations.append(
                    Violation("via_spacing", wide.tolist(), "fence gap exceeds via_spacing"))
    except Exception as exc:  # validation reports, never throws
        report.violations.append(Violation("malformed", [], repr(exc)))
    return report
