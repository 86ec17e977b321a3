"""Adjoint-gradient optimization of tuning values for a directed beam."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import scipy.linalg as sla

from .analysis import derive_seed
from .geometry import DmaTopology
from .physics import LorentzianModel
from .radiation import FieldMap, RoiGrid, beam_metrics, radiation_matrix, target_mask
from .solver import CouplingMode, ReducedModel, assemble, mode_for, solve_direct

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class BeamObjective:
    """``cost = -mean_target |E|^2 + w * mean_rest |E|^2`` on a normalized field."""

    roi: RoiGrid
    target: Tuple[int, ...]
    sidelobe_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "target", tuple(int(i) for i in np.unique(self.target)))
        target_mask(len(self.roi), self.target)
        if not self.sidelobe_weight >= 0:
            raise ValueError("sidelobe weight must be >= 0")

    @classmethod
    def toward(cls, angle_deg: float, roi: Optional[RoiGrid] = None,
               sidelobe_weight: float = 1.0) -> "BeamObjective":
        """Single-sample target at the ARC direction closest to ``angle_deg``."""
        roi = roi or RoiGrid.arc()
        if roi.kind != "ARC":
            raise ValueError("angle targets need an ARC ROI")
        idx = int(np.argmin(np.abs(roi.angles_deg - angle_deg)))
        return cls(roi, (idx,), sidelobe_weight)

    @classmethod
    def default(cls) -> "BeamObjective":
        return cls.toward(20.0)

    @property
    def weights(self) -> np.ndarray:
        mask = target_mask(len(self.roi), self.target)
        w = np.where(mask, -1.0 / mask.sum(), self.sidelobe_weight / (~mask).sum())
        return w

    def to_dict(self) -> dict:
        return {"roi": self.roi.to_dict(), "target": list(self.target),
                "sidelobe_weight": self.sidelobe_weight}

    @classmethod
    def from_dict(cls, d: dict) -> "BeamObjective":
        roi = RoiGrid.from_dict(d.get("roi", {"kind": "ARC"}))
        w = float(d.get("sidelobe_weight", 1.0))
        if "target_angle_deg" in d:
            return cls.toward(float(d["target_angle_deg"]), roi, w)
        return cls(roi, tuple(d["target"]), w)


def _same_grid(a: RoiGrid, b: RoiGrid) -> bool:
    return a is b or (a.to_dict() == b.to_dict() and a.points.shape == b.points.shape)


def objective_eval(f: FieldMap, obj: BeamObjective) -> float:
    if not _same_grid(f.roi, obj.roi):
        raise ValueError("field map and objective use different ROI grids")
    if not f.normalized:
        raise ValueError("objective expects a normalized field map")
    return float(np.sum(obj.weights * np.abs(f.values) ** 2))


def _cotangent(E: np.ndarray, w: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Cost, normalized field, and ``dJ/dE*`` for ``J = E^H W E / E^H E``."""
    nE = np.linalg.norm(E)
    En = E / nE
    J = float(np.sum(w * np.abs(En) ** 2))
    h = (w * En - J * En) / nE
    return J, En, h


def objective_gradient(t: DmaTopology, s, model: LorentzianModel, obj: BeamObjective,
                       mode: Optional[CouplingMode] = None,
                       R: Optional[np.ndarray] = None) -> np.ndarray:
    """Gradient of the beam cost w.r.t. tuning values from the full system.

    Forward solve ``M p = e``, then one adjoint solve ``M^H mu = R^H h``;
    ``dJ/dc_n = 2 Re(conj(mu_n) alpha_n' / alpha_n^2 p_n)``.
    """
    mode = mode_for(t) if mode is None else CouplingMode(mode)
    sys = assemble(t, s, model, mode)
    sol = solve_direct(sys)
    if R is None:
        R = radiation_matrix(t, obj.roi)
    n = t.n_meta
    p = sol.moments
    _, _, h = _cotangent(R @ p[:n], obj.weights)
    rhs = np.zeros(sys.size, dtype=complex)
    rhs[:n] = R.conj().T @ h
    if sol.lu is None:
        mu = np.conj(sys.alpha) * rhs
    else:
        mu = sla.lu_solve(sol.lu, rhs, trans=2, check_finite=False)
    beta = sys.dalpha[:n] / sys.alpha[:n] ** 2 * p[:n]
    return 2 * np.real(np.conj(mu[:n]) * beta)


class _FastObjective:
    """Cost and gradient on the via-eliminated system, reused across iterations."""

    def __init__(self, t: DmaTopology, model: LorentzianModel, obj: BeamObjective,
                 mode: Optional[CouplingMode] = None):
        self.reduced = ReducedModel(t, model, mode)
        self.R = radiation_matrix(t, obj.roi)
        self.RH = self.R.conj().T
        self.w = obj.weights

    def __call__(self, s) -> Tuple[float, np.ndarray]:
        rm = self.reduced
        alpha, dalpha = rm.polarizability(s)
        if rm.unilateral:
            p = alpha * rm.source
            J, _, h = _cotangent(self.R @ p, self.w)
            mu = np.conj(alpha) * (self.RH @ h)
        else:
            lu = sla.lu_factor(rm.matrix(alpha), check_finite=False)
            p = sla.lu_solve(lu, rm.source, check_finite=False)
            J, _, h = _cotangent(self.R @ p, self.w)
            mu = sla.lu_solve(lu, self.RH @ h, trans=2, check_finite=False)
        return J, 2 * np.real(np.conj(mu) * dalpha / alpha**2 * p)

    def field(self, s) -> np.ndarray:
        return self.R @ self.reduced.moments(s)


@dataclass(frozen=True)
class SynthesisOptions:
    restarts: int = 8
    iterations: int = 2000
    step: float = 0.02
    schedule: str = "cosine"
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.step > 0:
            raise ValueError("step must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown step schedule {self.schedule!r}")

    def step_at(self, it: int) -> float:
        if self.schedule == "constant":
            return self.step
        return self.step * 0.5 * (1 + np.cos(np.pi * it / self.iterations))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizationResult:
    configuration: np.ndarray
    cost: float
    trace: List[float]
    metrics: dict
    restarts: int
    best_restart: int
    restart_costs: List[float]
    seed: int
    field: Optional[FieldMap] = field(default=None, repr=False)

    @property
    def best_trace(self) -> np.ndarray:
        """Best-so-far envelope of ``trace``."""
        return np.minimum.accumulate(np.asarray(self.trace))

    def to_dict(self) -> dict:
        return {
            "configuration": [float(c) for c in self.configuration],
            "cost": self.cost,
            "trace": [float(c) for c in self.trace],
            "best_trace": [float(c) for c in self.best_trace],
            "metrics": self.metrics,
            "restarts": self.restarts,
            "best_restart": self.best_restart,
            "restart_costs": [float(c) for c in self.restart_costs],
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _sigmoid(u: np.ndarray) -> np.ndarray:
    return 0.5 * (1 + np.tanh(0.5 * u))


def _adam_run(fn: _FastObjective, n: int, opts: SynthesisOptions, restart: int):
    rng = np.random.default_rng(derive_seed(opts.seed, "restart", restart))
    u = rng.normal(size=n)
    m = np.zeros(n)
    v = np.zeros(n)
    b1, b2, eps = 0.9, 0.999, 1e-8
    trace = []
    best_cost, best_c = np.inf, None
    for it in range(opts.iterations):
        c = _sigmoid(u)
        J, g = fn(c)
        trace.append(J)
        if J < best_cost:
            best_cost, best_c = J, c.copy()
        gu = g * c * (1 - c)
        m = b1 * m + (1 - b1) * gu
        v = b2 * v + (1 - b2) * gu**2
        mhat = m / (1 - b1 ** (it + 1))
        vhat = v / (1 - b2 ** (it + 1))
        u = u - opts.step_at(it) * mhat / (np.sqrt(vhat) + eps)
    return best_cost, best_c, trace


def synthesize(t: DmaTopology, model: LorentzianModel, obj: BeamObjective,
               opts: SynthesisOptions = SynthesisOptions(),
               mode: Optional[CouplingMode] = None, threads: int = 1) -> OptimizationResult:
    """Adam on logit-parameterized tuning values from seeded random starts.

    ``c = sigmoid(u)`` keeps every iterate inside ``[0, 1]^N``.  Restarts are
    independent; the lowest cost wins, ties going to the lower restart index.
    """
    fn = _FastObjective(t, model, obj, mode)

    def run(r):
        return _adam_run(fn, t.n_meta, opts, r)

    if threads > 1 and opts.restarts > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            runs = list(pool.map(run, range(opts.restarts)))
    else:
        runs = [run(r) for r in range(opts.restarts)]
    costs = [r[0] for r in runs]
    best = int(np.argmin(costs))  # argmin returns the first minimum
    cost, config, trace = runs[best]
    values = fn.field(config)
    fmap = FieldMap(values / np.linalg.norm(values), obj.roi, True)
    metrics = beam_metrics(fmap, obj.target)
    metrics["peak_intensity_dB"] = float(10 * np.log10(metrics["peak_intensity"]))
    log.info("synthesis: best restart %d cost %.5g ratio %.2f dB", best, cost,
             metrics["target_to_rest_ratio_dB"])
    return OptimizationResult(config, float(cost), trace, metrics, opts.restarts, best,
                              costs, opts.seed, fmap)
