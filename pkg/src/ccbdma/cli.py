"""Command-line driver for the coupled-dipole DMA studies.

Every artifact carries the hash of the resolved configuration and the seed,
so any output can be regenerated from its header alone.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, List, Optional, Sequence

import numpy as np

from . import analysis, synthesis
from .geometry import (
    DmaTopology,
    InfeasibleSpecError,
    TopologySpec,
    coupling_levels,
    generate_topology,
    validate_topology,
)
from .physics import LorentzianModel, PhysicsContext
from .radiation import FieldMap, NullPatternError, RoiGrid, normalize, radiate
from .solver import (
    DegenerateSystemError,
    ReducedModel,
    assemble,
    born_series,
    mode_for,
    solve_direct,
)

log = logging.getLogger("ccbdma")

OUT_ENV = "CCBDMA_OUT"
DEFAULT_OUT = "ccbdma_out"
LEVEL_NAMES = ("UNILATERAL", "SPARSE", "MEDIUM", "DENSE")
SUBCOMMANDS = ("topology", "simulate", "sensitivity", "linearity", "tradeoff", "synthesize", "check")

EXIT_OK, EXIT_DOMAIN, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _default_dict() -> dict:
    ctx = PhysicsContext(10e9)
    lam = ctx.wavelength
    return {
        "physics": {"frequency": ctx.frequency},
        "topology": {
            "cavity_side": 10 * lam,
            "boundary_irregularity": 0.3,
            "n_meta_atoms": 64,
            "min_separation": lam / 5,
            "feed_placement": "random",
        },
        "level": "DENSE",
        "levels": list(LEVEL_NAMES),
        "model": LorentzianModel.default(ctx.frequency).to_dict(),
        "roi": {"kind": "PLANE", "distance": 1.0, "span": 2.0, "n": 101},
        "sweep_roi": {"kind": "PLANE", "distance": 1.0, "span": 2.0, "n": 51},
        "ensemble": {"n_topologies": 12, "n_configs": 200},
        "simulate": {"configuration": "uniform"},
        "sensitivity": {"atoms": [0]},
        "synthesis": {
            "roi": {"kind": "ARC", "radius": 1.0, "n_angles": 181},
            "target_angle_deg": 20.0,
            "sidelobe_weight": 1.0,
            "restarts": 8,
            "iterations": 2000,
            "step": 0.02,
            "schedule": "cosine",
        },
        "seed": 0,
        "output_dir": None,
    }


def _merge(base: dict, update: dict, path: str) -> dict:
    out = copy.deepcopy(base)
    for key, val in update.items():
        sub = f"{path}.{key}"
        if key not in base:
            raise ConfigError(sub, "unknown field")
        if isinstance(base[key], dict) and key not in ("roi", "sweep_roi"):
            if not isinstance(val, dict):
                raise ConfigError(sub, "expected an object")
            out[key] = _merge(base[key], val, sub)
        else:
            out[key] = val
    return out


def _number(d: dict, key: str, path: str, positive: bool = False, integer: bool = False):
    val = d.get(key)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{path}.{key}", "expected a number")
    if integer and int(val) != val:
        raise ConfigError(f"{path}.{key}", "expected an integer")
    if positive and not val > 0:
        raise ConfigError(f"{path}.{key}", "must be positive")
    return int(val) if integer else float(val)


def _roi(d: Any, path: str) -> RoiGrid:
    if not isinstance(d, dict):
        raise ConfigError(path, "expected an object")
    kind = d.get("kind")
    allowed = {"PLANE": ("distance", "span", "n"), "ARC": ("radius", "n_angles")}
    if kind not in allowed:
        raise ConfigError(f"{path}.kind", "must be PLANE or ARC")
    for key in d:
        if key != "kind" and key not in allowed[kind]:
            raise ConfigError(f"{path}.{key}", "unknown field")
    for key in allowed[kind]:
        if key in d:
            _number(d, key, path, positive=True, integer=key in ("n", "n_angles"))
    try:
        return RoiGrid.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


@dataclass
class ExperimentConfig:
    """Fully resolved run description; ``to_json`` is canonical."""

    data: dict = field(default_factory=_default_dict)

    @classmethod
    def from_dict(cls, raw: Any) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("$", "expected a JSON object")
        cfg = cls(_merge(_default_dict(), raw, "$"))
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"malformed JSON: {exc}") from None
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path: str) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("$", f"cannot read config: {exc}") from None
        return cls.from_json(text)

    def to_json(self) -> str:
        return canonical_json(self.data)

    @property
    def hash(self) -> str:
        """Hash of everything that affects results (not the output location)."""
        d = {k: v for k, v in self.data.items() if k != "output_dir"}
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()[:16]

    def validate(self) -> None:
        d = self.data
        _number(d["physics"], "frequency", "$.physics", positive=True)
        topo = d["topology"]
        for key in ("cavity_side", "min_separation"):
            _number(topo, key, "$.topology", positive=True)
        _number(topo, "boundary_irregularity", "$.topology")
        _number(topo, "n_meta_atoms", "$.topology", positive=True, integer=True)
        try:
            self.base_spec().check(self.context)
        except ValueError as exc:
            raise ConfigError("$.topology", str(exc)) from None
        if d["level"] not in LEVEL_NAMES:
            raise ConfigError("$.level", f"must be one of {list(LEVEL_NAMES)}")
        levels = d["levels"]
        if not isinstance(levels, list) or len(levels) < 2:
            raise ConfigError("$.levels", "need a list of at least two levels")
        for i, name in enumerate(levels):
            if name not in LEVEL_NAMES:
                raise ConfigError(f"$.levels[{i}]", f"must be one of {list(LEVEL_NAMES)}")
        for key in ("oscillator_strength", "f_min", "f_max", "damping"):
            _number(d["model"], key, "$.model", positive=True)
        try:
            self.model
        except ValueError as exc:
            raise ConfigError("$.model", str(exc)) from None
        self.roi
        self.sweep_roi
        ens = d["ensemble"]
        for key in ("n_topologies", "n_configs"):
            _number(ens, key, "$.ensemble", positive=True, integer=True)
        if d["simulate"]["configuration"] not in ("uniform", "random"):
            raise ConfigError("$.simulate.configuration", "must be 'uniform' or 'random'")
        atoms = d["sensitivity"]["atoms"]
        if not isinstance(atoms, list) or not atoms:
            raise ConfigError("$.sensitivity.atoms", "expected a nonempty list")
        for i, a in enumerate(atoms):
            if isinstance(a, bool) or not isinstance(a, int) or not 0 <= a < topo["n_meta_atoms"]:
                raise ConfigError(f"$.sensitivity.atoms[{i}]", "atom index out of range")
        syn = d["synthesis"]
        _roi(syn["roi"], "$.synthesis.roi")
        _number(syn, "target_angle_deg", "$.synthesis")
        _number(syn, "sidelobe_weight", "$.synthesis")
        for key in ("restarts", "iterations"):
            _number(syn, key, "$.synthesis", positive=True, integer=True)
        _number(syn, "step", "$.synthesis", positive=True)
        try:
            self.objective
            self.synthesis_options
        except (ValueError, IndexError) as exc:
            raise ConfigError("$.synthesis", str(exc)) from None
        seed = d["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**64:
            raise ConfigError("$.seed", "expected an unsigned 64-bit integer")
        if d["output_dir"] is not None and not isinstance(d["output_dir"], str):
            raise ConfigError("$.output_dir", "expected a string or null")

    @property
    def seed(self) -> int:
        return self.data["seed"]

    @property
    def context(self) -> PhysicsContext:
        return PhysicsContext(float(self.data["physics"]["frequency"]))

    @property
    def model(self) -> LorentzianModel:
        return LorentzianModel.from_dict(self.data["model"])

    @property
    def roi(self) -> RoiGrid:
        return _roi(self.data["roi"], "$.roi")

    @property
    def sweep_roi(self) -> RoiGrid:
        return _roi(self.data["sweep_roi"], "$.sweep_roi")

    def base_spec(self) -> TopologySpec:
        t = self.data["topology"]
        return TopologySpec.default(
            self.context,
            cavity_side=float(t["cavity_side"]),
            boundary_irregularity=float(t["boundary_irregularity"]),
            n_meta_atoms=int(t["n_meta_atoms"]),
            min_separation=float(t["min_separation"]),
            feed_placement=t["feed_placement"],
        )

    def level_specs(self) -> List[TopologySpec]:
        presets = {s.label: s for s in coupling_levels(self.context, self.base_spec())}
        return [presets[name] for name in self.data["levels"]]

    def level_spec(self, name: Optional[str] = None) -> TopologySpec:
        name = name or self.data["level"]
        presets = {s.label: s for s in coupling_levels(self.context, self.base_spec())}
        return replace(presets[name], rng_seed=self.seed)

    @property
    def objective(self) -> synthesis.BeamObjective:
        syn = self.data["synthesis"]
        return synthesis.BeamObjective.toward(
            float(syn["target_angle_deg"]), RoiGrid.from_dict(syn["roi"]), float(syn["sidelobe_weight"])
        )

    @property
    def synthesis_options(self) -> synthesis.SynthesisOptions:
        syn = self.data["synthesis"]
        return synthesis.SynthesisOptions(
            restarts=int(syn["restarts"]), iterations=int(syn["iterations"]),
            step=float(syn["step"]), schedule=syn["schedule"], seed=self.seed,
        )


class Run:
    """One subcommand invocation: resolved config, output directory, thread cap."""

    def __init__(self, cfg: ExperimentConfig, out: Path, threads: int, command: str):
        self.cfg = cfg
        self.out = out
        self.threads = threads
        self.command = command
        out.mkdir(parents=True, exist_ok=True)

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.cfg.hash, "seed": self.cfg.seed, "command": self.command}

    def write_json(self, name: str, payload: dict) -> Path:
        doc = dict(payload)
        doc.update(self.provenance)
        doc["config"] = {k: v for k, v in self.cfg.data.items() if k != "output_dir"}
        path = self.out / name
        path.write_text(canonical_json(doc) + "\n")
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(text)
        return path

    def field_csv(self, name: str, fmap: FieldMap, **extra) -> Path:
        header = dict(self.provenance)
        header.update(extra)
        return self.write_text(name, fmap.to_csv(header))


def _topology(run: Run, level: Optional[str] = None) -> DmaTopology:
    return generate_topology(run.cfg.level_spec(level), run.cfg.context)


def cmd_topology(run: Run) -> dict:
    t = _topology(run)
    report = validate_topology(t)
    doc = {"topology": t.to_dict(), "valid": report.ok,
           "violations": sorted(report.kinds())}
    run.write_json("topology.json", doc)
    return {"n_meta": t.n_meta, "n_via": t.n_via, "valid": report.ok}


def _base_configuration(run: Run, n: int) -> np.ndarray:
    if run.cfg.data["simulate"]["configuration"] == "uniform":
        return np.full(n, 0.5)
    return analysis.sample_configs(analysis.derive_seed(run.cfg.seed, "base"), 1, n)[0]


def cmd_simulate(run: Run) -> dict:
    t = _topology(run)
    s = _base_configuration(run, t.n_meta)
    sol = solve_direct(assemble(t, s, run.cfg.model, mode_for(t)))
    fmap = radiate(sol, t, run.cfg.roi)
    run.field_csv("field.csv", fmap, level=t.spec.label, configuration=run.cfg.data["simulate"]["configuration"])
    run.write_text("moments.csv", sol.to_csv())
    run.write_json("simulate.json", {"residual": sol.residual, "fingerprint": sol.fingerprint,
                                     "level": t.spec.label, "configuration": [float(c) for c in s]})
    return {"residual": sol.residual}


def cmd_sensitivity(run: Run) -> dict:
    t = _topology(run)
    model, roi = run.cfg.model, run.cfg.roi
    s = _base_configuration(run, t.n_meta)
    for atom in run.cfg.data["sensitivity"]["atoms"]:
        smap = analysis.sensitivity_map(t, s, model, roi, atom)
        run.field_csv(f"sensitivity_atom{atom}.csv", smap.as_field(), level=t.spec.label, atom=atom)
    n_cfg = run.cfg.data["ensemble"]["n_configs"]
    sigma, mean_map = analysis.mean_sensitivity(
        t, n_cfg, analysis.derive_seed(run.cfg.seed, "sensitivity"), model, roi)
    run.field_csv("mean_sensitivity.csv", FieldMap(mean_map.astype(complex), roi), level=t.spec.label, sigma=sigma)
    run.write_json("sensitivity.json", {"level": t.spec.label, "sigma": sigma, "n_configs": n_cfg})
    return {"sigma": sigma}


def cmd_linearity(run: Run) -> dict:
    t = _topology(run)
    n_cfg = run.cfg.data["ensemble"]["n_configs"]
    zeta = analysis.linearity(t, run.cfg.model, run.cfg.sweep_roi, n_cfg, run.cfg.seed)
    run.write_json("linearity.json", {"level": t.spec.label, "zeta_dB": zeta, "n_configs": n_cfg,
                                      "n_samples": analysis.zeta_sample_count(n_cfg, t.n_meta)})
    return {"zeta_dB": zeta}


def cmd_tradeoff(run: Run) -> dict:
    ens = run.cfg.data["ensemble"]
    records = analysis.tradeoff_sweep(
        run.cfg.level_specs(), ens["n_topologies"], ens["n_configs"], run.cfg.seed,
        run.cfg.model, run.cfg.sweep_roi, run.cfg.context, threads=run.threads,
    )
    lines = [f"# {k}: {v}" for k, v in sorted(run.provenance.items())]
    lines.append(",".join(analysis.CSV_COLUMNS))
    for r in records:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in r.csv_row()))
    run.write_text("tradeoff.csv", "\n".join(lines) + "\n")
    sig = [r.sigma for r in records]
    zet = [r.zeta_db for r in records]
    summary = {
        "records": [r.__dict__ for r in records],
        "sigma_increasing": bool(all(a < b for a, b in zip(sig, sig[1:]))),
        "zeta_decreasing": bool(all(a > b for a, b in zip(zet, zet[1:]))),
        "spearman_sigma_zeta": analysis.spearman(sig, zet),
    }
    run.write_json("tradeoff.json", summary)
    return {"levels": [r.level for r in records]}


def cmd_synthesize(run: Run) -> dict:
    t = _topology(run)
    obj = run.cfg.objective
    res = synthesis.synthesize(t, run.cfg.model, obj, run.cfg.synthesis_options, threads=run.threads)
    doc = res.to_dict()
    doc.update({"level": t.spec.label, "objective": obj.to_dict()})
    run.write_json("synthesis.json", doc)
    run.field_csv("synthesized_field.csv", res.field, level=t.spec.label)
    return res.metrics


def cmd_check(run: Run, n_cases: int = 5, fd_step: float = 1e-6) -> dict:
    """Finite-difference vs adjoint, and Born vs direct, on seeded cases."""
    rng = np.random.default_rng(analysis.derive_seed(run.cfg.seed, "check"))
    model = run.cfg.model
    roi = RoiGrid.arc(n_angles=61)
    obj = synthesis.BeamObjective.toward(20.0, roi)
    fd_errors, born = [], []
    for level in ("UNILATERAL", "SPARSE", "DENSE"):
        t = _topology(run, level)
        for _ in range(n_cases):
            s = rng.uniform(0.05, 0.95, t.n_meta)
            n = int(rng.integers(t.n_meta))
            g = synthesis.objective_gradient(t, s, model, obj)
            sp, sm = s.copy(), s.copy()
            sp[n] += fd_step
            sm[n] -= fd_step
            fd = (_cost(t, sp, model, obj) - _cost(t, sm, model, obj)) / (2 * fd_step)
            fd_errors.append(abs(fd - g[n]) / max(abs(fd), 1e-300))
        rm = ReducedModel(t, model)
        s = rng.uniform(0, 1, t.n_meta)
        b = born_series(rm.system(s))
        direct = rm.moments(s)
        err = float(np.linalg.norm(b.solution.moments - direct) / np.linalg.norm(direct))
        born.append({"level": level, "converged": bool(b.converged), "orders": b.orders, "relative_error": err})
    fd_ok = bool(max(fd_errors) < 1e-5)
    born_ok = bool(all(r["relative_error"] < 1e-8 for r in born if r["converged"]))
    run.write_json("check.json", {"fd_max_relative_error": float(max(fd_errors)), "fd_ok": fd_ok,
                                  "born": born, "born_ok": born_ok})
    if not (fd_ok and born_ok):
        raise CheckFailed("diagnostics failed; see check.json")
    return {"fd_max_relative_error": float(max(fd_errors))}


class CheckFailed(RuntimeError):
    pass


def _cost(t: DmaTopology, s, model: LorentzianModel, obj: synthesis.BeamObjective) -> float:
    sol = solve_direct(assemble(t, s, model, mode_for(t)))
    return synthesis.objective_eval(normalize(radiate(sol, t, obj.roi)), obj)


COMMANDS = {
    "topology": cmd_topology,
    "simulate": cmd_simulate,
    "sensitivity": cmd_sensitivity,
    "linearity": cmd_linearity,
    "tradeoff": cmd_tradeoff,
    "synthesize": cmd_synthesize,
    "check": cmd_check,
}

DOMAIN_ERRORS = (DegenerateSystemError, InfeasibleSpecError, NullPatternError,
                 analysis.DegenerateRegressionError, CheckFailed, ValueError, IndexError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccbdma", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="JSON experiment config (defaults if omitted)")
    parser.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    parser.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
    parser.add_argument("--threads", type=int, default=1, help="cap on worker threads")
    parser.add_argument("--full-scale", action="store_true", help="12 topologies x 1000 configurations")
    parser.add_argument("--level", choices=LEVEL_NAMES, help="coupling level for single-level commands")
    parser.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.from_dict({})
    data = copy.deepcopy(cfg.data)
    if args.seed is not None:
        data["seed"] = args.seed
    if args.level is not None:
        data["level"] = args.level
    if args.full_scale:
        data["ensemble"] = {"n_topologies": 12, "n_configs": 1000}
    out = ExperimentConfig(data)
    out.validate()
    return out


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads", "must be >= 1")
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"config error at {exc.path}: {exc.message}", file=sys.stderr)
        return EXIT_CONFIG
    if args.dump_config:
        print(cfg.to_json())
        return EXIT_OK
    out = Path(args.out or cfg.data["output_dir"] or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    try:
        run = Run(cfg, out, args.threads, args.command)
        summary = COMMANDS[args.command](run)
    except DOMAIN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as exc:
        print(f"error: cannot write output: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    print(canonical_json({"command": args.command, "config_hash": cfg.hash, "seed": cfg.seed,
                          "out": str(out), **summary}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
