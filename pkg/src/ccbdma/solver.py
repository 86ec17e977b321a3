"""Coupled-dipole interaction system: assembly and solution.

The interaction matrix is ``M = diag(1/alpha) - G`` over meta-atoms (first)
and vias (after), and the source is the feed's field at each scatterer,
``e_j = G(feed, r_j)``.  Dipole moments solve ``M p = e``.
"""

from __future__ import annotations

import hashlib
import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, List, Optional, Tuple

import numpy as np
import scipy.linalg as sla
from scipy.linalg.lapack import get_lapack_funcs

from .geometry import DmaTopology
from .physics import (
    LorentzianModel,
    greens_2d,
    meta_atom_polarizability,
    pairwise_greens_2d,
    via_polarizability,
)

log = logging.getLogger(__name__)

CONDITION_LIMIT = 1e14


class CouplingMode(str, Enum):
    FULL = "FULL"
    UNILATERAL = "UNILATERAL"


class DegenerateSystemError(RuntimeError):
    pass


def mode_for(t: DmaTopology) -> CouplingMode:
    return CouplingMode.UNILATERAL if t.unilateral else CouplingMode.FULL


def _hash_arrays(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


def check_tuning(t: DmaTopology, tuning) -> np.ndarray:
    s = np.asarray(tuning, dtype=float)
    if s.shape != (t.n_meta,):
        raise ValueError(f"tuning has shape {s.shape}, expected ({t.n_meta},)")
    if np.any(~np.isfinite(s)) or np.any(s < 0) or np.any(s > 1):
        raise ValueError("tuning values must lie in [0, 1]")
    return s


@dataclass(frozen=True, eq=False)
class Couplings:
    """Configuration-independent part of a system: ``G`` and ``e``."""

    greens: np.ndarray
    source: np.ndarray
    n_meta: int
    mode: CouplingMode


def couplings(t: DmaTopology, mode: CouplingMode = CouplingMode.FULL) -> Couplings:
    k = t.context.wavenumber
    pts = t.scatterer_positions()
    source = greens_2d(k, t.feed_position[None, :], pts)
    if mode == CouplingMode.UNILATERAL:
        G = np.zeros((len(pts), len(pts)), dtype=complex)
    else:
        G = pairwise_greens_2d(k, pts)
    return Couplings(G, np.asarray(source, dtype=complex), t.n_meta, CouplingMode(mode))


@dataclass(frozen=True, eq=False)
class InteractionSystem:
    matrix: np.ndarray
    source: np.ndarray
    n_meta: int
    mode: CouplingMode
    alpha: np.ndarray
    dalpha: np.ndarray
    frequency: float
    seed: int
    fingerprint: str

    @property
    def size(self) -> int:
        return len(self.source)

    @property
    def meta_index(self) -> np.ndarray:
        return np.arange(self.n_meta)

    @property
    def via_index(self) -> np.ndarray:
        return np.arange(self.n_meta, self.size)

    @property
    def greens(self) -> np.ndarray:
        """Off-diagonal coupling ``G`` recovered from ``M``."""
        G = -self.matrix.copy()
        np.fill_diagonal(G, 0)
        return G


def assemble(
    t: DmaTopology,
    s,
    model: LorentzianModel,
    mode: CouplingMode = CouplingMode.FULL,
    coupling: Optional[Couplings] = None,
) -> InteractionSystem:
    """Build ``M`` and ``e`` for one configuration.

    ``coupling`` may be passed to reuse the geometry-only part across
    configurations.
    """
    mode = CouplingMode(mode)
    s = check_tuning(t, s)
    if coupling is None or coupling.mode != mode:
        coupling = couplings(t, mode)
    f = t.context.frequency
    pol = meta_atom_polarizability(s, model, f)
    alpha = np.concatenate(
        [np.atleast_1d(pol.value), np.full(t.n_via, via_polarizability(t.context.wavenumber))]
    )
    dalpha = np.concatenate([np.atleast_1d(pol.derivative), np.zeros(t.n_via, dtype=complex)])
    M = -coupling.greens.copy()
    M[np.diag_indices_from(M)] = 1 / alpha
    return InteractionSystem(
        matrix=M,
        source=coupling.source.copy(),
        n_meta=t.n_meta,
        mode=mode,
        alpha=alpha,
        dalpha=dalpha,
        frequency=f,
        seed=t.spec.rng_seed,
        fingerprint=_hash_arrays(M, coupling.source),
    )


@dataclass(frozen=True, eq=False)
class DipoleSolution:
    moments: np.ndarray
    residual: float
    fingerprint: str
    system: Optional[InteractionSystem] = None
    lu: Optional[Tuple[np.ndarray, np.ndarray]] = field(default=None, repr=False)

    @property
    def meta_moments(self) -> np.ndarray:
        n = self.system.n_meta if self.system is not None else len(self.moments)
        return self.moments[:n]

    def to_csv(self) -> str:
        lines = ["index,re_p,im_p"]
        for i, p in enumerate(self.moments):
            lines.append(f"{i},{float(p.real)!r},{float(p.imag)!r}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "residual": self.residual,
            "moments": [[float(p.real), float(p.imag)] for p in self.moments],
        }


def relative_residual(M: np.ndarray, p: np.ndarray, e: np.ndarray) -> float:
    return float(np.linalg.norm(M @ p - e) / np.linalg.norm(e))


def _condition_estimate(M: np.ndarray, lu: np.ndarray) -> float:
    gecon, = get_lapack_funcs(("gecon",), (lu,))
    anorm = np.linalg.norm(M, 1)
    rcond, info = gecon(lu, anorm, norm="1")
    return np.inf if rcond == 0 else 1.0 / rcond


def _solution_fingerprint(sys: InteractionSystem, p: np.ndarray) -> str:
    return _hash_arrays(np.frombuffer(sys.fingerprint.encode(), dtype=np.uint8), p)


def solve_direct(sys: InteractionSystem) -> DipoleSolution:
    """Dense LU solve; the factorization is kept for later low-rank updates."""
    M, e = sys.matrix, sys.source
    if sys.mode == CouplingMode.UNILATERAL:
        p = sys.alpha * e
        return DipoleSolution(p, relative_residual(M, p, e), _solution_fingerprint(sys, p), sys, None)
    with warnings.catch_warnings():
        # exact singularity is reported below as a degenerate system
        warnings.simplefilter("ignore", sla.LinAlgWarning)
        lu, piv = sla.lu_factor(M, check_finite=False)
    cond = _condition_estimate(M, lu)
    if not np.isfinite(cond) or cond > CONDITION_LIMIT:
        raise DegenerateSystemError(
            f"degenerate system (condition ~ {cond:.3g}) at f = {sys.frequency:g} Hz, seed {sys.seed}"
        )
    p = sla.lu_solve((lu, piv), e, check_finite=False)
    return DipoleSolution(p, relative_residual(M, p, e), _solution_fingerprint(sys, p), sys, (lu, piv))


@dataclass
class BornResult:
    solution: DipoleSolution
    history: List[float]
    converged: bool
    diverging: bool

    @property
    def orders(self) -> int:
        """Number of orders used, counting the zeroth."""
        return len(self.history)


def born_series(sys: InteractionSystem, k_max: int = 500, tol: float = 1e-10,
                divergence_window: int = 10) -> BornResult:
    """Partial sums of ``sum_k (A G)^k A e`` with ``A = diag(alpha)``.

    ``history[k]`` is the relative residual of the order-``k`` partial sum.
    The run stops at ``tol``, at ``k_max`` further orders, or once the
    residual has grown for ``divergence_window`` consecutive orders.
    """
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    M, e, A = sys.matrix, sys.source, sys.alpha
    G = sys.greens
    term = A * e
    p = term.copy()
    history = [relative_residual(M, p, e)]
    converged = history[-1] < tol
    diverging = False
    growth = 0
    k = 0
    while not converged and k < k_max:
        k += 1
        term = A * (G @ term)
        p = p + term
        history.append(relative_residual(M, p, e))
        if history[-1] < tol:
            converged = True
            break
        growth = growth + 1 if history[-1] > history[-2] else 0
        if growth >= divergence_window:
            diverging = True
            break
    sol = DipoleSolution(p, history[-1], _solution_fingerprint(sys, p), sys, None)
    return BornResult(sol, history, converged, diverging)


def woodbury_update(base: DipoleSolution, changed: Iterable[Tuple[int, float]],
                    model: LorentzianModel) -> DipoleSolution:
    """Re-solve after retuning a few meta-atoms via a rank-|changed| update.

    With ``M' = M + U D U^T`` (``U`` selecting the changed rows, ``D`` the
    change of ``1/alpha``), ``p' = p - Z (I + D Z_S)^{-1} D p_S`` where
    ``Z = M^{-1} U``.  This form stays valid when some ``D`` entries vanish.
    """
    sys = base.system
    if sys is None or base.lu is None:
        raise ValueError("base solution must be a FULL-mode direct solve with its factorization")
    changes = {}
    for idx, c in changed:
        idx = int(idx)
        if not 0 <= idx < sys.size:
            raise IndexError(f"scatterer index {idx} out of range")
        if idx >= sys.n_meta:
            raise ValueError(f"index {idx} refers to a via; only meta-atoms are tunable")
        changes[idx] = float(c)
    if not changes:
        return base
    idx = np.array(sorted(changes))
    new_c = np.array([changes[i] for i in idx])
    pol = meta_atom_polarizability(new_c, model, sys.frequency)
    new_alpha = np.atleast_1d(pol.value)
    D = 1 / new_alpha - 1 / sys.alpha[idx]

    U = np.zeros((sys.size, len(idx)), dtype=complex)
    U[idx, np.arange(len(idx))] = 1
    Z = sla.lu_solve(base.lu, U, check_finite=False)
    cap = np.eye(len(idx)) + D[:, None] * Z[idx, :]
    p = base.moments - Z @ np.linalg.solve(cap, D * base.moments[idx])

    M = sys.matrix.copy()
    M[idx, idx] = 1 / new_alpha
    alpha = sys.alpha.copy()
    alpha[idx] = new_alpha
    dalpha = sys.dalpha.copy()
    dalpha[idx] = np.atleast_1d(pol.derivative)
    new_sys = InteractionSystem(M, sys.source, sys.n_meta, sys.mode, alpha, dalpha,
                                sys.frequency, sys.seed, _hash_arrays(M, sys.source))
    return DipoleSolution(p, relative_residual(M, p, sys.source),
                          _solution_fingerprint(new_sys, p), new_sys, None)


class ReducedModel:
    """Meta-atom-only system with the fixed via fence folded into the background.

    The vias never change, so their block is eliminated once per topology
    (Schur complement).  With ``K = (diag(1/alpha_v) - G_vv)^{-1}``::

        G_eff = G_aa + G_av K G_va,   e_eff = e_a + G_av K e_v

    and the meta-atom moments solve ``(diag(1/alpha) - G_eff) p = e_eff``,
    identical to the corresponding rows of the full solve.
    """

    def __init__(self, t: DmaTopology, model: LorentzianModel,
                 mode: Optional[CouplingMode] = None):
        self.topology = t
        self.model = model
        self.mode = CouplingMode(mode) if mode is not None else mode_for(t)
        self.n = t.n_meta
        cp = couplings(t, self.mode)
        n = self.n
        if self.mode == CouplingMode.UNILATERAL or t.n_via == 0:
            self.greens = cp.greens[:n, :n].copy()
            self.source = cp.source[:n].copy()
        else:
            alpha_v = via_polarizability(t.context.wavenumber)
            Mvv = -cp.greens[n:, n:]
            Mvv[np.diag_indices_from(Mvv)] = 1 / alpha_v
            Gav = cp.greens[:n, n:]
            rhs = np.column_stack([Gav.T, cp.source[n:]])
            KX = np.linalg.solve(Mvv, rhs)
            self.greens = cp.greens[:n, :n] + Gav @ KX[:, :n]
            # numerical symmetrization; G_eff is exactly symmetric in theory
            self.greens = 0.5 * (self.greens + self.greens.T)
            self.source = cp.source[:n] + Gav @ KX[:, n]
        self._coupling = cp

    @property
    def unilateral(self) -> bool:
        return self.mode == CouplingMode.UNILATERAL

    def polarizability(self, s):
        s = check_tuning(self.topology, s)
        pol = meta_atom_polarizability(s, self.model, self.topology.context.frequency)
        return np.atleast_1d(pol.value), np.atleast_1d(pol.derivative)

    def matrix(self, alpha: np.ndarray) -> np.ndarray:
        M = -self.greens.copy()
        M[np.diag_indices_from(M)] += 1 / alpha
        return M

    def system(self, s) -> InteractionSystem:
        """Meta-atom-only ``InteractionSystem`` for ``s``.

        The self-term ``G_eff[n, n]`` is absorbed into a dressed
        polarizability ``1/alpha~ = 1/alpha - G_eff[n, n]``, leaving a
        zero-diagonal coupling so that Born partial sums count bounces
        between meta-atoms (fence reflections included in each bounce).
        """
        alpha, dalpha = self.polarizability(s)
        M = self.matrix(alpha)
        dressed = 1 / np.diag(M)
        t = self.topology
        return InteractionSystem(
            matrix=M,
            source=self.source.copy(),
            n_meta=self.n,
            mode=self.mode,
            alpha=dressed,
            dalpha=dalpha * dressed**2 / alpha**2,
            frequency=t.context.frequency,
            seed=t.spec.rng_seed,
            fingerprint=_hash_arrays(M, self.source),
        )

    def moments(self, s) -> np.ndarray:
        alpha, _ = self.polarizability(s)
        if self.unilateral:
            return alpha * self.source
        return np.linalg.solve(self.matrix(alpha), self.source)

    def moments_batch(self, configs: np.ndarray) -> np.ndarray:
        """Meta-atom moments for a stack of configurations, shape ``(n_cfg, n)``."""
        configs = np.atleast_2d(configs)
        out = np.empty(configs.shape, dtype=complex)
        for i, s in enumerate(configs):
            out[i] = self.moments(s)
        return out
