from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from shapely.geometry import Point, Polygon

from ccbdma.geometry import (
    DmaTopology,
    InfeasibleSpecError,
    TopologySpec,
    coupling_levels,
    fence_vias,
    generate_topology,
    level_by_name,
    validate_topology,
)
from ccbdma.physics import PhysicsContext

CTX = PhysicsContext(10e9)
LAM = CTX.wavelength
seeds = st.integers(0, 2**32 - 1)


@given(seeds)
@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
def test_random_topologies_satisfy_layout_invariants(seed):
    t = generate_topology(replace(level_by_name("DENSE", CTX), rng_seed=seed), CTX)
    report = validate_topology(t)
    assert report.ok, report.violations
    poly = Polygon(t.boundary_polygon)
    assert poly.is_valid
    pts = np.vstack([t.feed_position, t.meta_atom_positions])
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1) + np.eye(len(pts))
    assert d.min() >= t.spec.min_separation


def test_same_seed_same_topology():
    spec = replace(TopologySpec.default(CTX), rng_seed=42)
    a, b = generate_topology(spec, CTX), generate_topology(spec, CTX)
    assert a.to_json() == b.to_json()
    c = generate_topology(replace(spec, rng_seed=43), CTX)
    assert not np.allclose(a.meta_atom_positions, c.meta_atom_positions)


def test_levels_share_layout_and_order_by_fence_density():
    levels = [replace(s, rng_seed=7) for s in coupling_levels(CTX)]
    topos = [generate_topology(s, CTX) for s in levels]
    for t in topos[1:]:
        assert np.array_equal(t.meta_atom_positions, topos[0].meta_atom_positions)
        assert np.array_equal(t.feed_position, topos[0].feed_position)
    assert [s.label for s in levels] == ["UNILATERAL", "SPARSE", "MEDIUM", "DENSE"]
    assert topos[0].unilateral and not topos[1].unilateral
    counts = [t.n_via for t in topos[1:]]
    assert counts == sorted(counts) and counts[0] < counts[-1]


def test_level_lookup():
    assert level_by_name("dense", CTX).via_spacing == pytest.approx(LAM / 10)
    with pytest.raises(KeyError):
        level_by_name("CLOSED", CTX)


@pytest.mark.parametrize("spacing", [0.01, 0.003, 0.05])
def test_fence_vias_on_boundary_within_spacing(spacing):
    square = np.array([[0, 0], [0.1, 0], [0.1, 0.07], [0, 0.07]], dtype=float)
    vias = fence_vias(square, spacing)
    gaps = np.linalg.norm(np.roll(vias, -1, axis=0) - vias, axis=1)
    assert gaps.max() <= spacing * (1 + 1e-9)
    ring = Polygon(square).exterior
    assert max(ring.distance(Point(v)) for v in vias) < 1e-12
    # each corner carries a via
    for corner in square:
        assert np.min(np.linalg.norm(vias - corner, axis=1)) < 1e-15


def test_centroid_feed():
    t = generate_topology(replace(TopologySpec.default(CTX), feed_placement="centroid", rng_seed=1), CTX)
    assert np.allclose(t.feed_position, Polygon(t.boundary_polygon).centroid.coords[0])


def test_infeasible_density_raises():
    spec = replace(TopologySpec.default(CTX), n_meta_atoms=5000)
    with pytest.raises(InfeasibleSpecError):
        generate_topology(spec, CTX)


@pytest.mark.parametrize("override", [
    dict(cavity_side=3 * LAM),
    dict(boundary_irregularity=1.2),
    dict(n_meta_atoms=0),
    dict(via_spacing=0.0),
    dict(min_separation=-1.0),
    dict(feed_placement="corner"),
])
def test_spec_check_rejects(override):
    with pytest.raises(ValueError):
        generate_topology(replace(TopologySpec.default(CTX), **override), CTX)


def test_spec_and_topology_json_roundtrip():
    spec = replace(level_by_name("MEDIUM", CTX), rng_seed=2**63 + 5)
    assert TopologySpec.from_json(spec.to_json()) == spec
    t = generate_topology(spec, CTX)
    back = DmaTopology.from_dict(t.to_dict())
    assert back.to_json() == t.to_json()
    assert back.spec_fingerprint == t.spec_fingerprint


def test_unknown_spec_field_rejected():
    with pytest.raises(ValueError, match="unknown"):
        TopologySpec.from_dict({"cavity_side": 0.3, "colour": "red"})


def test_scatterer_order_meta_then_vias(make_topology):
    t = make_topology("SPARSE", 3)
    pts = t.scatterer_positions()
    assert np.array_equal(pts[: t.n_meta], t.meta_atom_positions)
    assert np.array_equal(pts[t.n_meta:], t.via_positions)


class TestValidator:
    @pytest.fixture
    def topo(self, make_topology):
        return make_topology("DENSE", 11)

    def test_detects_atom_outside(self, topo):
        atoms = topo.meta_atom_positions.copy()
        atoms[5] = [10.0, 10.0]
        report = validate_topology(topo.replace(meta_atom_positions=atoms))
        assert "containment" in report.kinds()
        assert [5] in [v.indices for v in report.violations]

    def test_detects_crowded_atoms(self, topo):
        atoms = topo.meta_atom_positions.copy()
        atoms[3] = atoms[2] + [1e-4, 0]
        report = validate_topology(topo.replace(meta_atom_positions=atoms))
        assert report.kinds() == {"separation"}

    def test_detects_stray_via_and_wide_gap(self, topo):
        vias = np.delete(topo.via_positions, [10, 11, 12], axis=0)
        vias[0] = vias[0] + [0.0, 0.01]
        kinds = validate_topology(topo.replace(via_positions=vias)).kinds()
        assert {"via_on_boundary", "via_spacing"} <= kinds

    def test_malformed_input_reported_not_raised(self, topo):
        report = validate_topology(topo.replace(boundary_polygon=np.zeros((1, 2))))
        assert not report.ok
