import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccbdma.solver import (
    CouplingMode,
    DegenerateSystemError,
    InteractionSystem,
    ReducedModel,
    assemble,
    born_series,
    solve_direct,
    woodbury_update,
)

from oracles import greens_2d_series


def lorentzian(c, model, f):
    f0 = model.f_min + c * (model.f_max - model.f_min)
    return model.oscillator_strength / (f0**2 - f**2 - 1j * model.damping * f)


def pair_topology(base, separation_kr):
    """Two meta-atoms, no vias, feed on the axis between them."""
    k = base.context.wavenumber
    d = separation_kr / k
    atoms = np.array([[0.0, 0.0], [d, 0.0]])
    return base.replace(meta_atom_positions=atoms, via_positions=np.zeros((0, 2)),
                        feed_position=np.array([0.3 * d, 0.4 * d]))


def pair_oracle(t, s, model):
    k = t.context.wavenumber
    f = t.context.frequency
    a1, a2 = (lorentzian(c, model, f) for c in s)
    r = t.meta_atom_positions
    g = greens_2d_series(k * np.linalg.norm(r[0] - r[1]))
    e = np.array([greens_2d_series(k * np.linalg.norm(t.feed_position - x)) for x in r])
    det = 1 / (a1 * a2) - g * g
    p = np.array([e[0] / a2 + g * e[1], g * e[0] + e[1] / a1]) / det
    return p, a1 * a2 * g * g


@pytest.mark.parametrize("s", [(0.1, 0.9), (0.5, 0.5), (0.0, 1.0)])
def test_two_atom_closed_form(make_topology, model, s):
    t = pair_topology(make_topology("SPARSE"), 1.3)
    sol = solve_direct(assemble(t, np.array(s), model))
    expected, _ = pair_oracle(t, s, model)
    assert np.allclose(sol.moments, expected, rtol=1e-12, atol=0)
    assert sol.residual < 1e-13


@pytest.mark.parametrize("level", ["SPARSE", "MEDIUM", "DENSE"])
def test_direct_residual_small(make_topology, model, level):
    t = make_topology(level, 4)
    s = np.random.default_rng(0).uniform(size=t.n_meta)
    sol = solve_direct(assemble(t, s, model))
    assert sol.residual < 1e-10
    assert sol.lu is not None


def test_unilateral_is_polarizability_times_source(make_topology, model):
    t = make_topology("UNILATERAL", 2)
    s = np.linspace(0, 1, t.n_meta)
    sys = assemble(t, s, model, CouplingMode.UNILATERAL)
    sol = solve_direct(sys)
    assert np.count_nonzero(sys.greens) == 0
    assert np.allclose(sol.moments, sys.alpha * sys.source, rtol=1e-15)


@pytest.mark.parametrize("bad", [np.full(64, 1.5), np.full(63, 0.5), np.array([np.nan] * 64)])
def test_invalid_tuning_rejected(make_topology, model, bad):
    with pytest.raises(ValueError):
        assemble(make_topology("SPARSE"), bad, model)


def test_singular_system_reports_frequency_and_seed():
    M = np.array([[1.0, 2.0], [2.0, 4.0]], dtype=complex)
    sys = InteractionSystem(M, np.ones(2, dtype=complex), 2, CouplingMode.FULL,
                            np.ones(2, dtype=complex), np.zeros(2, dtype=complex), 1.23e10, 77, "x")
    with pytest.raises(DegenerateSystemError, match=r"1\.23e\+10.*77"):
        solve_direct(sys)


def test_fingerprint_tracks_inputs(make_topology, model):
    t = make_topology("SPARSE")
    s = np.full(t.n_meta, 0.5)
    a = solve_direct(assemble(t, s, model))
    b = solve_direct(assemble(t, s, model))
    s2 = s.copy()
    s2[0] = 0.6
    c = solve_direct(assemble(t, s2, model))
    assert a.fingerprint == b.fingerprint != c.fingerprint


def test_csv_export(make_topology, model):
    t = make_topology("SPARSE")
    sol = solve_direct(assemble(t, np.full(t.n_meta, 0.5), model))
    lines = sol.to_csv().splitlines()
    assert lines[0] == "index,re_p,im_p"
    assert len(lines) == 1 + t.n_meta + t.n_via
    i, re, im = lines[3].split(",")
    assert complex(float(re), float(im)) == sol.moments[2]


class TestBorn:
    def test_matches_geometric_series_when_contracting(self, make_topology, model):
        t = pair_topology(make_topology("SPARSE"), 2.0)
        s = np.array([0.4, 0.6])
        expected, ratio = pair_oracle(t, s, model)
        assert abs(ratio) < 1
        res = born_series(assemble(t, s, model), tol=1e-13)
        assert res.converged and not res.diverging
        assert np.allclose(res.solution.moments, expected, rtol=1e-12, atol=0)
        # residual of the two-bounce iteration shrinks by |ratio| every two orders
        h = np.array(res.history)
        assert h[4] / h[2] == pytest.approx(abs(ratio), rel=1e-6)

    def test_flags_divergence(self, make_topology, model):
        t = pair_topology(make_topology("SPARSE"), 0.15)
        s = np.array([0.5, 0.5])
        _, ratio = pair_oracle(t, s, model)
        assert abs(ratio) > 1
        res = born_series(assemble(t, s, model), k_max=500)
        assert res.diverging and not res.converged
        assert res.orders < 100

    def test_unilateral_converges_at_order_zero(self, make_topology, model):
        t = make_topology("UNILATERAL")
        res = born_series(assemble(t, np.full(t.n_meta, 0.3), model, CouplingMode.UNILATERAL))
        assert res.converged and res.orders == 1

    def test_budget_exhaustion(self, make_topology):
        from ccbdma.physics import LorentzianModel

        weak = LorentzianModel.default(strength_ratio=0.1)
        t = pair_topology(make_topology("SPARSE"), 2.0)
        res = born_series(assemble(t, np.array([0.5, 0.5]), weak), k_max=2, tol=1e-30)
        assert not res.converged and not res.diverging and res.orders == 3

    def test_rejects_zero_budget(self, make_topology, model):
        t = make_topology("SPARSE")
        with pytest.raises(ValueError):
            born_series(assemble(t, np.full(t.n_meta, 0.5), model), k_max=0)


class TestWoodbury:
    @pytest.mark.parametrize("k", [1, 4, 8])
    @pytest.mark.parametrize("level", ["SPARSE", "DENSE"])
    def test_matches_full_resolve(self, make_topology, model, k, level):
        t = make_topology(level, 5)
        rng = np.random.default_rng(k)
        s = rng.uniform(size=t.n_meta)
        base = solve_direct(assemble(t, s, model))
        idx = rng.choice(t.n_meta, size=k, replace=False)
        new = rng.uniform(size=k)
        upd = woodbury_update(base, zip(idx, new), model)
        s2 = s.copy()
        s2[idx] = new
        ref = solve_direct(assemble(t, s2, model))
        assert np.linalg.norm(upd.moments - ref.moments) / np.linalg.norm(ref.moments) < 1e-10
        assert upd.residual < 1e-10

    def test_unchanged_value_is_noop(self, make_topology, model):
        t = make_topology("SPARSE")
        s = np.full(t.n_meta, 0.5)
        base = solve_direct(assemble(t, s, model))
        upd = woodbury_update(base, [(3, 0.5)], model)
        assert np.allclose(upd.moments, base.moments, rtol=1e-14)
        assert woodbury_update(base, [], model) is base

    def test_rejects_vias_and_bad_indices(self, make_topology, model):
        t = make_topology("SPARSE")
        base = solve_direct(assemble(t, np.full(t.n_meta, 0.5), model))
        with pytest.raises(ValueError, match="via"):
            woodbury_update(base, [(t.n_meta, 0.5)], model)
        with pytest.raises(IndexError):
            woodbury_update(base, [(10_000, 0.5)], model)
        with pytest.raises(ValueError):
            woodbury_update(base, [(0, 2.0)], model)

    def test_requires_factorization(self, make_topology, model):
        t = make_topology("UNILATERAL")
        base = solve_direct(assemble(t, np.full(t.n_meta, 0.5), model, CouplingMode.UNILATERAL))
        with pytest.raises(ValueError):
            woodbury_update(base, [(0, 0.2)], model)


class TestReducedModel:
    @pytest.mark.parametrize("level", ["UNILATERAL", "SPARSE", "MEDIUM", "DENSE"])
    def test_matches_full_system(self, make_topology, model, level):
        t = make_topology(level, 6)
        rm = ReducedModel(t, model)
        s = np.random.default_rng(1).uniform(size=t.n_meta)
        full = solve_direct(assemble(t, s, model, rm.mode)).meta_moments
        assert np.linalg.norm(rm.moments(s) - full) / np.linalg.norm(full) < 1e-10

    def test_dressed_system_is_consistent(self, make_topology, model):
        t = make_topology("DENSE", 6)
        rm = ReducedModel(t, model)
        s = np.random.default_rng(2).uniform(size=t.n_meta)
        sys = rm.system(s)
        assert np.allclose(np.diag(sys.matrix), 1 / sys.alpha, rtol=1e-14)
        assert np.allclose(sys.greens, sys.greens.T)
        assert np.allclose(solve_direct(sys).moments, rm.moments(s), rtol=1e-10)

    def test_batch(self, make_topology, model):
        t = make_topology("MEDIUM")
        rm = ReducedModel(t, model)
        cfg = np.random.default_rng(3).uniform(size=(3, t.n_meta))
        batch = rm.moments_batch(cfg)
        for row, s in zip(batch, cfg):
            assert np.allclose(row, rm.moments(s), rtol=1e-13)


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_solution_linear_in_source(seed):
    # superposition: scaling the feed scales every moment
    from ccbdma.geometry import generate_topology, level_by_name
    from ccbdma.physics import LorentzianModel, PhysicsContext
    from dataclasses import replace

    ctx = PhysicsContext(10e9)
    t = generate_topology(replace(level_by_name("SPARSE", ctx), rng_seed=seed, n_meta_atoms=16), ctx)
    sys = assemble(t, np.full(16, 0.5), LorentzianModel.default())
    scaled = InteractionSystem(sys.matrix, (2 - 1j) * sys.source, sys.n_meta, sys.mode, sys.alpha,
                               sys.dalpha, sys.frequency, sys.seed, sys.fingerprint)
    assert np.allclose(solve_direct(scaled).moments, (2 - 1j) * solve_direct(sys).moments, rtol=1e-11)
