"""Pattern sensitivity, linear predictability, and the coupling trade-off.

``sigma`` is the mean magnitude of the derivative of the *normalized* field
with respect to tuning values.  ``zeta`` is an SNR-style score of a linear
surrogate fitted to *unnormalized* fields, with its prediction error as the
noise term.
"""

from __future__ import annotations

import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg as sla

from .geometry import DmaTopology, TopologySpec, generate_topology
from .physics import LorentzianModel, PhysicsContext
from .radiation import RATIO_CLAMP_DB, FieldMap, RoiGrid, radiation_matrix
from .solver import CouplingMode, ReducedModel, assemble, mode_for, solve_direct

log = logging.getLogger(__name__)

ZETA_CLAMP_DB = RATIO_CLAMP_DB
TRAIN_FRACTION = 0.8
FEATURES = ("ALPHA_PARTS",)


class DegenerateRegressionError(ValueError):
    pass


def derive_seed(seed: int, *keys) -> int:
    """Deterministic child seed from a parent seed and labels."""
    payload = repr((int(seed),) + tuple(keys)).encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "little")


def sample_configs(seed: int, n: int, dim: int) -> np.ndarray:
    """``n`` i.i.d. uniform configurations in ``[0, 1]^dim``."""
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(n, dim))


def _normalized_derivative(E: np.ndarray, dE: np.ndarray) -> np.ndarray:
    """Derivative of ``E / ||E||`` given ``dE`` (columns = parameters)."""
    nE = np.linalg.norm(E)
    proj = np.real(E.conj() @ dE)
    return dE / nE - np.outer(E, proj) / nE**3


@dataclass(frozen=True, eq=False)
class SensitivityMap:
    values: np.ndarray
    atom: int
    roi: RoiGrid
    configuration: np.ndarray
    normalized: bool = True

    def as_field(self) -> FieldMap:
        return FieldMap(self.values, self.roi, False)


def sensitivity_map(t: DmaTopology, s, model: LorentzianModel, roi: RoiGrid, atom: int,
                    mode: Optional[CouplingMode] = None, normalized: bool = True,
                    R: Optional[np.ndarray] = None) -> SensitivityMap:
    """d(field)/dc_atom on the ROI from the full interaction system.

    ``dp/dc_n = -M^{-1} (dM/dc_n) p`` with ``dM/dc_n`` nonzero only at
    ``(n, n)``, where it equals ``-alpha_n' / alpha_n^2``.  That needs a
    single extra solve against the retained LU factors.
    """
    mode = mode_for(t) if mode is None else CouplingMode(mode)
    if not 0 <= atom < t.n_meta:
        raise IndexError(f"atom {atom} out of range")
    sys = assemble(t, s, model, mode)
    sol = solve_direct(sys)
    a, da, p = sys.alpha[atom], sys.dalpha[atom], sol.moments
    if sol.lu is None:
        column = np.zeros(sys.size, dtype=complex)
        column[atom] = a
    else:
        unit = np.zeros(sys.size, dtype=complex)
        unit[atom] = 1
        column = sla.lu_solve(sol.lu, unit, check_finite=False)
    dp = column * (da / a**2) * p[atom]
    if R is None:
        R = radiation_matrix(t, roi)
    E = R @ p[: t.n_meta]
    dE = R @ dp[: t.n_meta]
    values = _normalized_derivative(E, dE[:, None])[:, 0] if normalized else dE
    return SensitivityMap(values, atom, roi, np.asarray(s, dtype=float), normalized)


class Scene:
    """Per-topology cache: via-eliminated system plus radiation matrix."""

    def __init__(self, t: DmaTopology, model: LorentzianModel, roi: RoiGrid,
                 mode: Optional[CouplingMode] = None):
        self.topology = t
        self.roi = roi
        self.reduced = ReducedModel(t, model, mode)
        self.R = radiation_matrix(t, roi)

    @property
    def n(self) -> int:
        return self.reduced.n

    def field(self, s) -> np.ndarray:
        return self.R @ self.reduced.moments(s)

    def fields(self, configs: np.ndarray) -> np.ndarray:
        return self.reduced.moments_batch(configs) @ self.R.T

    def jacobian(self, s, normalized: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        """Field and its derivative w.r.t. every tuning value, shape ``(roi, n)``."""
        rm = self.reduced
        alpha, dalpha = rm.polarizability(s)
        if rm.unilateral:
            p = alpha * rm.source
            J = self.R * (dalpha * rm.source)
        else:
            Minv = np.linalg.inv(rm.matrix(alpha))
            p = Minv @ rm.source
            J = (self.R @ Minv) * (dalpha / alpha**2 * p)
        E = self.R @ p
        if normalized:
            J = _normalized_derivative(E, J)
        return E, J


def mean_sensitivity(t: DmaTopology, n_configs: int, seed: int, model: LorentzianModel,
                     roi: RoiGrid, mode: Optional[CouplingMode] = None,
                     configs: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    """sigma and the ROI-resolved mean sensitivity magnitude map.

    Averages ``|d E_norm / d c_n|`` over ROI samples, atoms, and
    ``n_configs`` configurations drawn from ``seed``.
    """
    if configs is None:
        if n_configs < 1:
            raise ValueError("n_configs must be >= 1")
        configs = sample_configs(seed, n_configs, t.n_meta)
    scene = Scene(t, model, roi, mode)
    acc = np.zeros(len(roi))
    for s in configs:
        _, J = scene.jacobian(s)
        acc += np.abs(J).mean(axis=1)
    mean_map = acc / len(configs)
    return float(mean_map.mean()), mean_map


def _row_fingerprints(configs: np.ndarray) -> List[str]:
    return [hashlib.sha256(np.ascontiguousarray(row).tobytes()).hexdigest()[:16] for row in configs]


@dataclass(frozen=True, eq=False)
class Dataset:
    """Configurations with their (unnormalized or normalized) field maps."""

    configs: np.ndarray
    fields: np.ndarray
    alpha: np.ndarray
    fingerprints: Tuple[str, ...]

    @classmethod
    def build(cls, scene: Scene, configs: np.ndarray, normalized: bool = False) -> "Dataset":
        configs = np.atleast_2d(np.asarray(configs, dtype=float))
        fields = scene.fields(configs)
        if normalized:
            fields = fields / np.linalg.norm(fields, axis=1, keepdims=True)
        alpha = np.array([scene.reduced.polarizability(s)[0] for s in configs])
        return cls(configs, fields, alpha, tuple(_row_fingerprints(configs)))

    def __len__(self):
        return len(self.configs)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.configs[idx], self.fields[idx], self.alpha[idx],
                       tuple(self.fingerprints[i] for i in idx))

    def split(self, seed: int, train_fraction: float = TRAIN_FRACTION) -> Tuple["Dataset", "Dataset"]:
        order = np.random.default_rng(seed).permutation(len(self))
        n_train = int(math.floor(train_fraction * len(self)))
        return self.subset(np.sort(order[:n_train])), self.subset(np.sort(order[n_train:]))


def _design(alpha: np.ndarray) -> np.ndarray:
    return np.column_stack([alpha.real, alpha.imag, np.ones(len(alpha))])


@dataclass(frozen=True, eq=False)
class LinearSurrogate:
    weights: np.ndarray  # (roi, 2N)
    bias: np.ndarray  # (roi,)
    features: str
    training: frozenset

    def predict(self, alpha: np.ndarray) -> np.ndarray:
        alpha = np.atleast_2d(alpha)
        return np.column_stack([alpha.real, alpha.imag]) @ self.weights.T + self.bias


def min_training_samples(n_atoms: int) -> int:
    return 2 * (2 * n_atoms + 1)


def fit_linear_surrogate(data: Dataset, features: str = "ALPHA_PARTS") -> LinearSurrogate:
    """Per-ROI-sample complex least squares on ``(Re alpha_n, Im alpha_n, 1)``."""
    if features not in FEATURES:
        raise ValueError(f"unknown feature set {features!r}")
    n_atoms = data.alpha.shape[1]
    need = min_training_samples(n_atoms)
    if len(data) < need:
        raise ValueError(f"need at least {need} training samples, got {len(data)}")
    X = _design(data.alpha)
    # scale columns so the rank test is not fooled by tiny feature spreads
    scale = np.abs(X).max(axis=0)
    scale[scale == 0] = 1
    Xs = X / scale
    coef, _, rank, sv = np.linalg.lstsq(Xs, data.fields, rcond=None)
    if rank < X.shape[1] or sv[-1] < 1e-10 * sv[0]:
        raise DegenerateRegressionError(
            f"degenerate regression: design rank {rank} < {X.shape[1]} features"
        )
    coef = coef / scale[:, None]
    return LinearSurrogate(
        weights=coef[:-1].T.copy(),
        bias=coef[-1].copy(),
        features=features,
        training=frozenset(data.fingerprints),
    )


def linearity_metric(sur: LinearSurrogate, test: Dataset) -> float:
    """zeta in dB: field power over surrogate error power on held-out data."""
    if len(test) == 0:
        raise ValueError("empty test set")
    overlap = sur.training.intersection(test.fingerprints)
    if overlap:
        raise ValueError(f"{len(overlap)} test samples were used for training")
    pred = sur.predict(test.alpha)
    signal = float(np.sum(np.abs(test.fields) ** 2))
    noise = float(np.sum(np.abs(test.fields - pred) ** 2))
    if noise == 0 or signal / noise > 10 ** (ZETA_CLAMP_DB / 10):
        return ZETA_CLAMP_DB
    return float(10 * np.log10(signal / noise))


def zeta_sample_count(n_configs: int, n_atoms: int) -> int:
    """Dataset size for zeta: ``n_configs``, topped up so training stays overdetermined."""
    need = math.ceil(min_training_samples(n_atoms) / TRAIN_FRACTION)
    while math.floor(TRAIN_FRACTION * need) < min_training_samples(n_atoms):
        need += 1
    return max(n_configs, need)


def linearity(t: DmaTopology, model: LorentzianModel, roi: RoiGrid, n_configs: int, seed: int,
              mode: Optional[CouplingMode] = None, scene: Optional[Scene] = None) -> float:
    scene = scene or Scene(t, model, roi, mode)
    configs = sample_configs(derive_seed(seed, "zeta"), zeta_sample_count(n_configs, t.n_meta), t.n_meta)
    data = Dataset.build(scene, configs, normalized=False)
    train, test = data.split(derive_seed(seed, "split"))
    return linearity_metric(fit_linear_surrogate(train), test)


@dataclass
class TradeoffRecord:
    level: str
    level_index: int
    via_count: float
    sigma: float
    zeta_db: float
    n_topologies: int
    n_configs: int
    seed: int
    sigma_per_topology: List[float] = field(default_factory=list)
    zeta_per_topology: List[float] = field(default_factory=list)

    def csv_row(self) -> List:
        return [self.level, self.via_count, self.sigma, self.zeta_db,
                self.n_topologies, self.n_configs, self.seed]


CSV_COLUMNS = ["level", "via_count", "sigma", "zeta_dB", "n_topologies", "n_configs", "seed"]


def _sweep_item(level_index: int, spec: TopologySpec, topo_index: int, context: PhysicsContext,
                model: LorentzianModel, roi: RoiGrid, n_configs: int, seed: int) -> Dict:
    tspec = replace(spec, rng_seed=derive_seed(seed, "topology", topo_index) % 2**63)
    t = generate_topology(tspec, context)
    scene = Scene(t, model, roi)
    # identical configurations across levels for a given topology index
    configs = sample_configs(derive_seed(seed, "configs", topo_index), n_configs, t.n_meta)
    sigma, _ = mean_sensitivity(t, n_configs, 0, model, roi, configs=configs)
    zeta = linearity(t, model, roi, n_configs, derive_seed(seed, "linearity", topo_index), scene=scene)
    return {"level": level_index, "topology": topo_index, "via_count": t.n_via,
            "sigma": sigma, "zeta": zeta}


def tradeoff_sweep(levels: Sequence[TopologySpec], n_topologies: int, n_configs: int, seed: int,
                   model: LorentzianModel, roi: RoiGrid, context: Optional[PhysicsContext] = None,
                   threads: int = 1) -> List[TradeoffRecord]:
    """sigma and zeta per coupling level, averaged over seeded topologies.

    Work items (level, topology) are independent; results are keyed and
    reduced in a fixed order so thread count never changes the output.
    """
    if len(levels) < 2:
        raise ValueError("need at least two coupling levels")
    if n_topologies < 1:
        raise ValueError("n_topologies must be >= 1")
    context = context or PhysicsContext(10e9)
    jobs = [(li, spec, ti) for li, spec in enumerate(levels) for ti in range(n_topologies)]

    def run(job):
        li, spec, ti = job
        return _sweep_item(li, spec, ti, context, model, roi, n_configs, seed)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    results.sort(key=lambda r: (r["level"], r["topology"]))

    records = []
    for li, spec in enumerate(levels):
        rows = [r for r in results if r["level"] == li]
        sig = [r["sigma"] for r in rows]
        zet = [r["zeta"] for r in rows]
        records.append(TradeoffRecord(
            level=spec.label,
            level_index=li,
            via_count=float(np.mean([r["via_count"] for r in rows])),
            sigma=float(np.mean(sig)),
            zeta_db=float(np.mean(zet)),
            n_topologies=n_topologies,
            n_configs=n_configs,
            seed=seed,
            sigma_per_topology=sig,
            zeta_per_topology=zet,
        ))
        log.info("level %s: sigma=%.4g zeta=%.2f dB", spec.label, records[-1].sigma, records[-1].zeta_db)
    return records


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)
