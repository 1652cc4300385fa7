"""Command-line front end: ``qretrodict {simulate,filter,smooth,retrodict,verify}``.

A run is described by a JSON config::

    {
      "experiment": {...} | "experiment.json",
      "record": "record.csv",          # filter / smooth / retrodict
      "ensemble": 1,                   # simulate
      "out": "results",
      "observables": {"sz": [[1, 0], [0, -1]]},
      "time_unit": "us",
      "reveal": true,
      "sample_every": 10
    }

Command-line flags override the matching config fields.
"""

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__
from . import qlinalg as ql
from .errors import ConfigError
from .filtering import expectation_table, run_filter
from .io import (load_json, matrix_from_json, matrix_to_json, past_states_to_json,
                 read_record, retrodiction_to_json, spec_from_dict, spec_to_dict,
                 write_json, write_record, write_table)
from .model import ExperimentSpec, Violation, validate
from .smoother import past_state_series, retrodict
from .trajectory import simulate, simulate_ensemble
from .verify import run_suite

log = logging.getLogger("qretrodict")

COMMANDS = ("simulate", "filter", "smooth", "retrodict", "verify")
FIXTURE = "qubit_fixture.json"
_NEEDS_RECORD = ("filter", "smooth", "retrodict")


@dataclass(eq=False)
class RunConfig:
    command: str
    experiment: Optional[ExperimentSpec]
    record: Optional[str] = None
    ensemble: int = 1
    out: str = "."
    observables: Dict[str, np.ndarray] = field(default_factory=dict)
    time_unit: str = "1"
    reveal: bool = True
    sample_every: int = 1
    quick: bool = False
    warnings: List[str] = field(default_factory=list)
    snapped: List[Dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        """JSON form that :func:`parse_config` maps back to an identical config."""
        return {
            "command": self.command,
            "experiment": None if self.experiment is None else spec_to_dict(self.experiment),
            "record": self.record,
            "ensemble": self.ensemble,
            "out": self.out,
            "observables": {k: matrix_to_json(v) for k, v in self.observables.items()},
            "time_unit": self.time_unit,
            "reveal": self.reveal,
            "sample_every": self.sample_every,
            "quick": self.quick,
        }

    def __eq__(self, other):
        if not isinstance(other, RunConfig):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _snap_report(spec: ExperimentSpec):
    report = []
    for k, (iv, s) in enumerate(zip(spec.interventions, spec.intervention_steps())):
        snapped = s * spec.dt
        if abs(snapped - iv.tau) > 1e-9 * max(spec.dt, abs(iv.tau)):
            report.append({"index": k, "requested_tau": iv.tau, "snapped_tau": snapped})
    return report


def _resolve(base: Path, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def parse_config(raw: Dict[str, Any], base: Path = Path("."),
                 command: Optional[str] = None) -> RunConfig:
    """Build and validate a :class:`RunConfig` from parsed JSON."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object", [Violation("config", "not an object")])
    command = command or raw.get("command")
    if command not in COMMANDS:
        raise ConfigError(f"command must be one of {COMMANDS}, got {command!r}",
                          [Violation("command", f"unknown command {command!r}")])
    exp = raw.get("experiment")
    if isinstance(exp, str):
        exp = load_json(_resolve(base, exp))
    if exp is None and command != "verify":
        raise ConfigError("experiment: required field missing",
                          [Violation("experiment", "required field missing")])
    spec = None if exp is None else spec_from_dict(exp, "experiment.")
    if spec is not None:
        problems = validate(spec)
        if problems:
            raise ConfigError("invalid experiment: " + "; ".join(map(str, problems)),
                              [Violation("experiment." + v.field, v.message, v.magnitude)
                               for v in problems])
    record = raw.get("record")
    if record is not None:
        record = str(_resolve(base, record))
    if command in _NEEDS_RECORD:
        if record is None:
            raise ConfigError(f"{command} needs a record",
                              [Violation("record", "required field missing")])
        if not Path(record).exists():
            raise ConfigError(f"record file not found: {record}",
                              [Violation("record", "file not found")])
    try:
        ensemble = int(raw.get("ensemble", 1))
        sample_every = int(raw.get("sample_every", 1))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"ensemble/sample_every must be integers ({exc})",
                          [Violation("ensemble", "not an integer")]) from None
    if ensemble < 1:
        raise ConfigError("ensemble must be >= 1", [Violation("ensemble", "must be >= 1")])
    if sample_every < 1:
        raise ConfigError("sample_every must be >= 1",
                          [Violation("sample_every", "must be >= 1")])
    observables = {str(k): matrix_from_json(v, f"observables[{k}]")
                   for k, v in (raw.get("observables") or {}).items()}
    cfg = RunConfig(command, spec, record, ensemble, str(raw.get("out", ".")), observables,
                    str(raw.get("time_unit", "1")), bool(raw.get("reveal", True)),
                    sample_every, bool(raw.get("quick", False)))
    if spec is not None:
        cfg.snapped = _snap_report(spec)
        for s in cfg.snapped:
            msg = (f"interventions[{s['index']}].tau={s['requested_tau']!r} is off the grid; "
                   f"snapped to {s['snapped_tau']!r}")
            cfg.warnings.append(msg)
            log.warning(msg)
    return cfg


def load_config(path, command: Optional[str] = None) -> RunConfig:
    path = Path(path)
    return parse_config(load_json(path), path.parent, command)


def fixture_path() -> Path:
    return Path(str(resources.files("qretrodict") / "data" / FIXTURE))


def default_observables(dim: int) -> Dict[str, np.ndarray]:
    if dim == 2:
        return {"sigma_x": ql.SIGMA_X, "sigma_y": ql.SIGMA_Y, "sigma_z": ql.SIGMA_Z}
    return {f"P_{i}": ql.projector(ql.ket(i, dim)) for i in range(dim)}


def _load_matching_record(cfg: RunConfig):
    spec = cfg.experiment
    record = read_record(cfg.record, spec.dt)
    if abs(record.dt - spec.dt) > 1e-12 * spec.dt or record.n_steps != spec.n_steps:
        raise ConfigError(
            f"record grid (dt={record.dt}, {record.n_steps} steps) does not match the "
            f"experiment (dt={spec.dt}, {spec.n_steps} steps)",
            [Violation("record", "grid mismatch")])
    if record.n_channels != spec.model.n_channels:
        raise ConfigError(f"record has {record.n_channels} channels, model has "
                          f"{spec.model.n_channels}", [Violation("record", "channel mismatch")])
    return record


def _cmd_simulate(cfg: RunConfig, out: Path) -> Dict[str, Any]:
    spec = cfg.experiment
    if cfg.ensemble == 1:
        results = [simulate(spec, 0, reveal=cfg.reveal, store_states=False)]
        names = ["record.csv"]
    else:
        results = simulate_ensemble(spec, cfg.ensemble, reveal=cfg.reveal)
        names = [f"record_{j:04d}.csv" for j in range(cfg.ensemble)]
    for name, res in zip(names, results):
        write_record(out / name, res.record, res.hidden_outcomes)
    return {"records": names}


def _cmd_filter(cfg: RunConfig, out: Path) -> Dict[str, Any]:
    spec = cfg.experiment
    record = _load_matching_record(cfg)
    traj = run_filter(record, spec, sample_every=cfg.sample_every)
    obs = cfg.observables or default_observables(spec.model.dim)
    write_table(out / "expectations.csv", ["t"] + list(obs), expectation_table(traj, obs))
    return {"expectations": "expectations.csv", "log_likelihood": float(traj.log_likelihood)}


def _cmd_smooth(cfg: RunConfig, out: Path) -> Dict[str, Any]:
    record = _load_matching_record(cfg)
    pairs = past_state_series(record, cfg.experiment, None, cfg.sample_every)
    write_json(out / "past_states.json", {"time_unit": cfg.time_unit,
                                          "pairs": past_states_to_json(pairs)})
    return {"past_states": "past_states.json"}


def _cmd_retrodict(cfg: RunConfig, out: Path) -> Dict[str, Any]:
    record = _load_matching_record(cfg)
    if not cfg.experiment.interventions:
        raise ConfigError("retrodict needs at least one intervention",
                          [Violation("experiment.interventions", "empty")])
    if record.intervention_log:
        msg = "record reveals intervention outcomes; retrodiction treats them as concealed"
        cfg.warnings.append(msg)
        log.warning(msg)
    res = retrodict(record, cfg.experiment)
    write_json(out / "retrodiction.json", retrodiction_to_json(res))
    return {"retrodiction": "retrodiction.json"}


def _cmd_verify(cfg: RunConfig, out: Path) -> Dict[str, Any]:
    results = run_suite(quick=cfg.quick, spec=cfg.experiment)
    for r in results:
        log.info(r.line())
    passed = all(r.passed for r in results)
    write_json(out / "verify.json", {"passed": passed, "checks": [r.to_dict() for r in results]})
    return {"verify": "verify.json", "passed": passed}


_HANDLERS = {"simulate": _cmd_simulate, "filter": _cmd_filter, "smooth": _cmd_smooth,
             "retrodict": _cmd_retrodict, "verify": _cmd_verify}


def _error_payload(exc: BaseException) -> Dict[str, Any]:
    payload = {"error": type(exc).__name__, "message": str(exc)}
    violations = getattr(exc, "violations", None)
    if violations:
        payload["violations"] = [{"field": v.field, "message": v.message,
                                  "magnitude": None if np.isnan(v.magnitude) else v.magnitude}
                                 for v in violations]
    for attr in ("step", "label", "probability", "t"):
        value = getattr(exc, attr, None)
        if value is not None:
            payload[attr] = value
    return payload


def run(cfg: RunConfig) -> int:
    """Execute one command; artifacts and ``metadata.json`` land in ``cfg.out``."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        artifacts = _HANDLERS[cfg.command](cfg, out)
    except Exception as exc:  # every failure must leave a machine-readable report
        write_json(out / "error.json", _error_payload(exc))
        log.error("%s: %s", type(exc).__name__, exc)
        return 1
    write_json(out / "metadata.json", {
        "version": __version__,
        "config": cfg.to_dict(),
        "warnings": cfg.warnings,
        "snapped_taus": cfg.snapped,
        "artifacts": artifacts,
    })
    if cfg.command == "verify" and not artifacts["passed"]:
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qretrodict", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("--config", help="JSON run config (verify defaults to the bundled fixture)")
    ap.add_argument("--out", help="output directory")
    ap.add_argument("--seed", type=int, help="override the experiment seed")
    ap.add_argument("--ensemble", type=int, help="number of trajectories to simulate")
    ap.add_argument("--record", help="record CSV for filter/smooth/retrodict")
    ap.add_argument("--quick", action="store_true", help="smaller ensembles for verify")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _overrides(raw: Dict[str, Any], args) -> Dict[str, Any]:
    raw = dict(raw)
    if args.out is not None:
        raw["out"] = args.out
    if args.ensemble is not None:
        raw["ensemble"] = args.ensemble
    if args.record is not None:
        raw["record"] = str(Path(args.record).resolve())
    if args.quick:
        raw["quick"] = True
    return raw


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "verify"
                        else logging.WARNING, format="%(levelname)s %(message)s")
    config_path = args.config or (fixture_path() if args.command == "verify" else None)
    out = Path(args.out or ".")
    try:
        if config_path is None:
            raise ConfigError("--config is required", [Violation("config", "missing")])
        config_path = Path(config_path)
        raw = _overrides(load_json(config_path), args)
        if args.seed is not None and isinstance(raw.get("experiment"), (dict, str)):
            exp = raw["experiment"]
            if isinstance(exp, str):
                exp = load_json(_resolve(config_path.parent, exp))
            raw["experiment"] = dict(exp, seed=args.seed)
        cfg = parse_config(raw, config_path.parent, args.command)
        if args.out is None:
            cfg.out = str(_resolve(config_path.parent, cfg.out)) if "out" in raw else "."
    except ConfigError as exc:
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "error.json", _error_payload(exc))
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
