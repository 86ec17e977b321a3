from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize

from ccbdma.geometry import generate_topology, level_by_name
from ccbdma.radiation import FieldMap, RoiGrid, normalize, radiate, radiation_matrix
from ccbdma.solver import assemble, mode_for, solve_direct
from ccbdma.synthesis import (
    BeamObjective,
    SynthesisOptions,
    _FastObjective,
    objective_eval,
    objective_gradient,
    synthesize,
)

from oracles import central_difference

ROI = RoiGrid.arc(n_angles=61)
OBJ = BeamObjective.toward(20.0, ROI)


def cost(t, s, model, obj=OBJ):
    sol = solve_direct(assemble(t, s, model, mode_for(t)))
    return objective_eval(normalize(radiate(sol, t, obj.roi)), obj)


class TestObjective:
    def test_default_targets_twenty_degrees(self):
        obj = BeamObjective.default()
        assert obj.roi.kind == "ARC" and len(obj.roi) == 181
        assert obj.target == (110,)
        assert obj.sidelobe_weight == 1.0

    @pytest.mark.parametrize("w", [0.0, 1.0, 3.5])
    def test_uniform_pattern(self, w):
        n = len(ROI)
        obj = BeamObjective(ROI, (5, 6), w)
        f = FieldMap(np.full(n, 1 / np.sqrt(n), dtype=complex), ROI, True)
        assert objective_eval(f, obj) == pytest.approx((w - 1) / n, rel=1e-12)

    @pytest.mark.parametrize("w", [0.0, 2.0])
    def test_all_energy_in_target(self, w):
        v = np.zeros(len(ROI), dtype=complex)
        v[[5, 6]] = [0.6, 0.8j]
        obj = BeamObjective(ROI, (5, 6), w)
        assert objective_eval(FieldMap(v, ROI, True), obj) == pytest.approx(-0.5)

    def test_rejects_grid_mismatch_and_unnormalized(self):
        v = np.ones(len(ROI), dtype=complex) / np.sqrt(len(ROI))
        with pytest.raises(ValueError, match="ROI"):
            objective_eval(FieldMap(np.ones(181, dtype=complex), RoiGrid.arc(), True), OBJ)
        with pytest.raises(ValueError, match="normalized"):
            objective_eval(FieldMap(v, ROI, False), OBJ)

    @pytest.mark.parametrize("target,w", [((), 1.0), (tuple(range(61)), 1.0), ((3,), -1.0)])
    def test_invalid_objectives(self, target, w):
        with pytest.raises(ValueError):
            BeamObjective(ROI, target, w)

    def test_dict_roundtrip(self):
        obj = BeamObjective(ROI, (7, 8), 0.5)
        back = BeamObjective.from_dict(obj.to_dict())
        assert back.target == obj.target and back.sidelobe_weight == 0.5


@pytest.mark.parametrize("level", ["UNILATERAL", "SPARSE", "DENSE"])
@pytest.mark.parametrize("case", range(4))
def test_gradient_matches_finite_difference(make_topology, model, level, case):
    rng = np.random.default_rng(case)
    t = make_topology(level, case)
    s = rng.uniform(0.05, 0.95, t.n_meta)
    g = objective_gradient(t, s, model, OBJ)
    for n in rng.choice(t.n_meta, 3, replace=False):
        fd = central_difference(lambda x: cost(t, x, model), s, n)
        assert abs(g[n] - fd) / abs(fd) < 1e-5


@pytest.mark.parametrize("level", ["UNILATERAL", "MEDIUM", "DENSE"])
def test_fast_objective_agrees_with_full_system(make_topology, model, level):
    t = make_topology(level, 4)
    s = np.random.default_rng(4).uniform(size=t.n_meta)
    J, g = _FastObjective(t, model, OBJ)(s)
    assert J == pytest.approx(cost(t, s, model), rel=1e-9)
    assert np.allclose(g, objective_gradient(t, s, model, OBJ), rtol=1e-7, atol=1e-9 * np.abs(g).max())


def test_unilateral_gradient_closed_form(make_topology, model):
    # p_n = alpha_n e_n, so dE/dc_n = R[:, n] alpha_n' e_n; only the normalization couples entries
    t = make_topology("UNILATERAL", 1)
    s = np.random.default_rng(8).uniform(size=t.n_meta)
    sys = assemble(t, s, model, mode_for(t))
    R = radiation_matrix(t, ROI)
    E = R @ (sys.alpha[: t.n_meta] * sys.source[: t.n_meta])
    w = OBJ.weights
    nE2 = np.vdot(E, E).real
    J = np.sum(w * np.abs(E) ** 2) / nE2
    dE = R * (sys.dalpha[: t.n_meta] * sys.source[: t.n_meta])
    expected = 2 * np.real((np.conj(w * E) @ dE) / nE2 - J * (np.conj(E) @ dE) / nE2)
    assert np.allclose(objective_gradient(t, s, model, OBJ), expected, rtol=1e-10, atol=1e-14)


def test_gradient_vanishes_at_interior_optimum(context, model):
    spec = replace(level_by_name("SPARSE", context), n_meta_atoms=6, rng_seed=3)
    t = generate_topology(spec, context)
    obj = BeamObjective.toward(-10.0, ROI, sidelobe_weight=0.2)
    fn = _FastObjective(t, model, obj)

    def f(u):
        c = 0.5 * (1 + np.tanh(0.5 * u))
        J, g = fn(c)
        return J, g * c * (1 - c)

    res = minimize(f, np.zeros(6), jac=True, method="BFGS", options={"gtol": 1e-12, "maxiter": 2000})
    c = 0.5 * (1 + np.tanh(0.5 * res.x))
    interior = (c > 1e-3) & (c < 1 - 1e-3)
    assert interior.any()
    grad = objective_gradient(t, c, model, obj)
    assert np.abs(grad[interior]).max() < 1e-6


@pytest.fixture
def quick():
    return SynthesisOptions(restarts=3, iterations=60, step=0.05, seed=9)


class TestSynthesize:
    def test_result_invariants(self, make_topology, model, quick):
        t = make_topology("MEDIUM", 2)
        res = synthesize(t, model, OBJ, quick)
        assert len(res.trace) == 60 and res.restarts == 3
        assert np.all(np.diff(res.best_trace) <= 0)
        assert res.cost == pytest.approx(min(res.trace))
        assert res.cost == min(res.restart_costs) == res.restart_costs[res.best_restart]
        assert np.all((res.configuration >= 0) & (res.configuration <= 1))
        assert res.cost == pytest.approx(cost(t, res.configuration, model), rel=1e-9)
        assert res.metrics["target_to_rest_ratio_dB"] > 0

    def test_deterministic_regardless_of_threads(self, make_topology, model, quick):
        t = make_topology("SPARSE", 2)
        a = synthesize(t, model, OBJ, quick)
        b = synthesize(t, model, OBJ, quick, threads=3)
        assert a.to_json() == b.to_json()

    def test_improves_on_start(self, make_topology, model, quick):
        res = synthesize(make_topology("DENSE", 1), model, OBJ, quick)
        assert res.trace[-1] < res.trace[0]

    @pytest.mark.parametrize("kwargs", [dict(restarts=0), dict(iterations=0), dict(step=0.0), dict(schedule="step")])
    def test_option_validation(self, kwargs):
        with pytest.raises(ValueError):
            SynthesisOptions(**kwargs)

    def test_cosine_schedule(self):
        opts = SynthesisOptions(iterations=100, step=0.02)
        assert opts.step_at(0) == pytest.approx(0.02)
        assert opts.step_at(50) == pytest.approx(0.01)
        assert opts.step_at(100) == pytest.approx(0.0, abs=1e-15)
