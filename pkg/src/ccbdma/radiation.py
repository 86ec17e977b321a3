"""Projection of meta-atom moments onto a region of interest, and pattern metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from shapely.geometry import Polygon
import shapely

from .geometry import DmaTopology
from .physics import greens_3d
from .solver import DipoleSolution

RATIO_CLAMP_DB = 300.0


class NullPatternError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class RoiGrid:
    """Sample points in front of the DMA (the DMA occupies the z = 0 plane).

    PLANE: ``rows x cols`` grid on ``z = distance``.  ARC: directions in the
    x-z plane from -90 to +90 degrees off broadside at ``radius``.
    """

    kind: str
    points: np.ndarray
    shape: Tuple[int, ...]
    params: dict

    def __post_init__(self):
        if self.kind not in ("PLANE", "ARC"):
            raise ValueError(f"unknown ROI kind {self.kind!r}")
        if len(self.points) < 2:
            raise ValueError("ROI needs at least 2 samples")

    def __len__(self):
        return len(self.points)

    @classmethod
    def plane(cls, distance: float = 1.0, span: float = 2.0, n: int = 101) -> "RoiGrid":
        if not distance > 0:
            raise ValueError("plane distance must be positive")
        x = np.linspace(-span / 2, span / 2, n)
        X, Y = np.meshgrid(x, x, indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel(), np.full(X.size, float(distance))])
        return cls("PLANE", pts, (n, n), {"distance": distance, "span": span, "n": n})

    @classmethod
    def arc(cls, radius: float = 1.0, n_angles: int = 181) -> "RoiGrid":
        theta = np.radians(np.linspace(-90.0, 90.0, n_angles))
        pts = np.column_stack([radius * np.sin(theta), np.zeros(n_angles), radius * np.cos(theta)])
        return cls("ARC", pts, (n_angles,), {"radius": radius, "n_angles": n_angles})

    @property
    def angles_deg(self) -> Optional[np.ndarray]:
        if self.kind != "ARC":
            return None
        return np.linspace(-90.0, 90.0, self.shape[0])

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "RoiGrid":
        d = dict(d)
        kind = d.pop("kind", "PLANE").upper()
        if kind == "PLANE":
            return cls.plane(**d)
        if kind == "ARC":
            return cls.arc(**d)
        raise ValueError(f"unknown ROI kind {kind!r}")

    def check_outside(self, t: DmaTopology) -> bool:
        """True if no sample lies within the cavity footprint on the DMA plane."""
        on_plane = np.abs(self.points[:, 2]) < 1e-12
        if not np.any(on_plane):
            return True
        pts = self.points[on_plane]
        poly = Polygon(t.boundary_polygon)
        return not np.any(shapely.intersects_xy(poly, pts[:, 0], pts[:, 1]))


@dataclass(frozen=True, eq=False)
class FieldMap:
    values: np.ndarray
    roi: RoiGrid
    normalized: bool = False

    def intensity(self) -> np.ndarray:
        return np.abs(self.values) ** 2

    def to_csv(self, header: Optional[dict] = None) -> str:
        lines = []
        for key, val in sorted((header or {}).items()):
            lines.append(f"# {key}: {val}")
        lines.append("x,y,z,re_E,im_E,abs_E")
        for (x, y, z), v in zip(self.roi.points.tolist(), self.values.astype(complex).tolist()):
            lines.append(f"{x!r},{y!r},{z!r},{v.real!r},{v.imag!r},{abs(v)!r}")
        return "\n".join(lines) + "\n"

    def to_binary(self, header: Optional[dict] = None) -> Tuple[str, bytes]:
        """JSON header plus raw payload.

        Payload layout: little-endian float64, row-major over the ROI shape,
        interleaved ``(re, im)`` per sample.
        """
        meta = {
            "roi": self.roi.to_dict(),
            "shape": list(self.roi.shape),
            "normalized": self.normalized,
            "dtype": "<f8",
            "layout": "row-major, interleaved re/im",
        }
        meta.update(header or {})
        payload = np.ascontiguousarray(
            np.column_stack([self.values.real, self.values.imag]).astype("<f8")
        ).tobytes()
        return json.dumps(meta, sort_keys=True), payload

    @classmethod
    def from_binary(cls, header: str, payload: bytes) -> "FieldMap":
        meta = json.loads(header)
        roi = RoiGrid.from_dict(meta["roi"])
        flat = np.frombuffer(payload, dtype="<f8").reshape(-1, 2)
        return cls(flat[:, 0] + 1j * flat[:, 1], roi, bool(meta["normalized"]))


def radiation_matrix(t: DmaTopology, roi: RoiGrid) -> np.ndarray:
    """``R[i, n] = greens_3d(k, atom_n at z = 0, roi_i)``."""
    atoms3 = np.column_stack([t.meta_atom_positions, np.zeros(t.n_meta)])
    return greens_3d(t.context.wavenumber, roi.points[:, None, :], atoms3[None, :, :])


def radiate(sol: DipoleSolution, t: DmaTopology, roi: RoiGrid,
            R: Optional[np.ndarray] = None) -> FieldMap:
    """Field of the meta-atom moments at the ROI; vias do not radiate."""
    if sol.system is not None and sol.system.n_meta != t.n_meta:
        raise ValueError("solution and topology disagree on the number of meta-atoms")
    if R is None:
        R = radiation_matrix(t, roi)
    return FieldMap(R @ sol.moments[: t.n_meta], roi, False)


def normalize(f: FieldMap) -> FieldMap:
    norm = np.linalg.norm(f.values)
    if not norm > 0:
        raise NullPatternError("null pattern: cannot normalize an all-zero field")
    return FieldMap(f.values / norm, f.roi, True)


def _check_target(n: int, target: Sequence[int]) -> np.ndarray:
    idx = np.unique(np.asarray(target, dtype=int))
    if idx.size == 0:
        raise ValueError("target set is empty")
    if idx.size >= n:
        raise ValueError("target set covers the whole ROI")
    if idx.min() < 0 or idx.max() >= n:
        raise IndexError("target index outside ROI")
    return idx


def target_mask(n: int, target: Sequence[int]) -> np.ndarray:
    mask = np.zeros(n, dtype=bool)
    mask[_check_target(n, target)] = True
    return mask


def beam_metrics(f: FieldMap, target: Sequence[int]) -> dict:
    """Peak target intensity and target-to-rest mean intensity ratio (dB)."""
    mask = target_mask(len(f.values), target)
    inten = f.intensity()
    rest = inten[~mask].mean()
    tgt = inten[mask].mean()
    if rest == 0:
        ratio = RATIO_CLAMP_DB
    elif tgt == 0:
        ratio = -RATIO_CLAMP_DB
    else:
        ratio = float(np.clip(10 * np.log10(tgt / rest), -RATIO_CLAMP_DB, RATIO_CLAMP_DB))
    return {"peak_intensity": float(inten[mask].max()), "target_to_rest_ratio_dB": ratio}
