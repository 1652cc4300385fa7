"""Serialization: experiment specs as JSON, records as CSV, results as JSON.

Complex matrices are nested lists whose entries are ``[re, im]`` pairs; plain
real numbers are accepted on input. Floats are written with 17 significant
digits so every value re-parses to the same double.
"""

import csv
import json
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from .errors import ConfigError
from .model import ExperimentSpec, InterventionSpec, OpenSystemModel, Violation
from .trajectory import MeasurementRecord

FLOAT_FORMAT = ".17g"


def matrix_to_json(a) -> List[List[List[float]]]:
    a = np.asarray(a, dtype=complex)
    return [[[float(z.real), float(z.imag)] for z in row] for row in a]


def matrix_from_json(obj, name: str = "matrix") -> np.ndarray:
    """Parse ``[[[re, im], ...], ...]`` or a real ``[[x, ...], ...]`` matrix."""
    try:
        arr = np.asarray(obj, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: not a numeric matrix ({exc})",
                          [Violation(name, "not a numeric matrix")]) from None
    if arr.ndim == 3 and arr.shape[-1] == 2:
        return arr[..., 0] + 1j * arr[..., 1]
    if arr.ndim == 2:
        return arr.astype(complex)
    raise ConfigError(f"{name}: expected a matrix of [re, im] pairs, got shape {arr.shape}",
                      [Violation(name, f"bad matrix shape {arr.shape}")])


def _require(d: Dict[str, Any], key: str, prefix: str):
    if key not in d:
        raise ConfigError(f"{prefix}{key}: required field missing",
                          [Violation(prefix + key, "required field missing")])
    return d[key]


def _number(d, key, prefix, default=None):
    if key not in d and default is not None:
        return default
    v = _require(d, key, prefix)
    try:
        return float(v)
    except (TypeError, ValueError):
        raise ConfigError(f"{prefix}{key}: not a number: {v!r}",
                          [Violation(prefix + key, "not a number")]) from None


def spec_from_dict(d: Dict[str, Any], prefix: str = "") -> ExperimentSpec:
    """Build an :class:`ExperimentSpec` from its JSON form (no validation)."""
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'experiment'}: expected an object",
                          [Violation(prefix or "experiment", "expected an object")])
    H = matrix_from_json(_require(d, "hamiltonian", prefix), prefix + "hamiltonian")
    couplings = tuple(matrix_from_json(L, f"{prefix}couplings[{k}]")
                      for k, L in enumerate(_require(d, "couplings", prefix)))
    eff = d.get("efficiencies")
    if eff is not None:
        try:
            eff = tuple(float(e) for e in eff)
        except (TypeError, ValueError):
            raise ConfigError(f"{prefix}efficiencies: not a list of numbers",
                              [Violation(prefix + "efficiencies", "not numbers")]) from None
    model = OpenSystemModel(H, couplings, eff if eff is not None else ())
    ivs = []
    for k, iv in enumerate(d.get("interventions", [])):
        p = f"{prefix}interventions[{k}]."
        outcomes = _require(iv, "outcomes", p)
        if not isinstance(outcomes, dict):
            raise ConfigError(f"{p}outcomes: expected a label -> projector object",
                              [Violation(p + "outcomes", "expected an object")])
        ivs.append(InterventionSpec(
            _number(iv, "tau", p),
            matrix_from_json(_require(iv, "probe_state", p), p + "probe_state"),
            matrix_from_json(_require(iv, "coupling", p), p + "coupling"),
            {str(m): matrix_from_json(P, f"{p}outcomes[{m}]") for m, P in outcomes.items()}))
    return ExperimentSpec(model, _number(d, "T", prefix), _number(d, "dt", prefix),
                          matrix_from_json(_require(d, "initial_state", prefix),
                                           prefix + "initial_state"),
                          tuple(ivs), int(d.get("seed", 0)))


def spec_to_dict(spec: ExperimentSpec) -> Dict[str, Any]:
    m = spec.model
    return {
        "hamiltonian": matrix_to_json(m.hamiltonian),
        "couplings": [matrix_to_json(L) for L in m.couplings],
        "efficiencies": [float(e) for e in m.efficiencies],
        "T": spec.T,
        "dt": spec.dt,
        "initial_state": matrix_to_json(spec.initial_state),
        "seed": spec.seed,
        "interventions": [{
            "tau": iv.tau,
            "probe_state": matrix_to_json(iv.probe_state),
            "coupling": matrix_to_json(iv.coupling),
            "outcomes": {lab: matrix_to_json(P) for lab, P in iv.outcomes.items()},
        } for iv in spec.interventions],
    }


def load_json(path) -> Any:
    """Read JSON, reporting syntax errors with line and column."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}", [Violation(str(path), "unreadable")])
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        where = f"line {exc.lineno}, column {exc.colno}"
        raise ConfigError(f"{path}: JSON parse error at {where}: {exc.msg}",
                          [Violation(where, exc.msg)]) from None


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n")


def _fmt(x: float) -> str:
    return format(float(x), FLOAT_FORMAT)


def outcomes_path(record_path) -> Path:
    p = Path(record_path)
    return p.with_name(p.stem + ".outcomes.json")


def write_record(path, record: MeasurementRecord, hidden_outcomes=None) -> None:
    """CSV ``t, dY_1, ..., dY_n`` plus a sidecar with ``dt`` and intervention outcomes.

    ``t`` is the start of each increment's interval. The sidecar lists the
    revealed outcomes (those in the record's log) and, separately, every
    sampled outcome.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"dY_{k + 1}" for k in range(record.n_channels)])
        for i, t in enumerate(record.times):
            w.writerow([_fmt(t)] + [_fmt(v) for v in record.increments[:, i]])
    side = {
        "dt": record.dt,
        "n_steps": record.n_steps,
        "revealed": [{"tau": t, "label": m} for t, m in record.intervention_log],
        "outcomes": [{"tau": t, "label": m} for t, m in (hidden_outcomes or [])],
    }
    write_json(outcomes_path(path), side)


def read_record(path, dt: Optional[float] = None) -> MeasurementRecord:
    """Inverse of :func:`write_record`.

    ``dt`` comes from the sidecar when present, else from ``dt``, else from
    the spacing of the ``t`` column.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read record {path}: {exc}",
                          [Violation("record", "unreadable")]) from None
    if not rows or not rows[0] or rows[0][0] != "t":
        raise ConfigError(f"{path}: record CSV needs a header starting with 't'",
                          [Violation("record", "missing header")])
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ConfigError(f"{path}: bad number in record ({exc})",
                          [Violation("record", str(exc))]) from None
    if data.ndim != 2 or data.shape[1] < 2:
        raise ConfigError(f"{path}: record needs a t column and at least one channel",
                          [Violation("record", "no channels")])
    log = []
    side = outcomes_path(path)
    if side.exists():
        meta = load_json(side)
        dt = float(meta.get("dt", dt)) if meta.get("dt") is not None else dt
        log = [(e["tau"], e["label"]) for e in meta.get("revealed", [])]
    if dt is None:
        if data.shape[0] < 2:
            raise ConfigError(f"{path}: cannot infer dt from a single row",
                              [Violation("record", "dt unknown")])
        dt = float(np.mean(np.diff(data[:, 0])))
    return MeasurementRecord(dt, data[:, 1:].T, log)


def retrodiction_to_json(result) -> Dict[str, Any]:
    out = {
        "taus": [float(t) for t in result.taus],
        "outcomes": [{"labels": list(lab), "probability": float(p)}
                     for lab, p in zip(result.labels, result.probabilities)],
        "normalizer": result.normalizer,
        "log_likelihood": result.log_normalizer,
    }
    if result.filtered is not None:
        out["filtered_prediction"] = [float(p) for p in result.filtered]
    return out


def past_states_to_json(pairs) -> List[Dict[str, Any]]:
    return [{
        "t": p.t,
        "rho": matrix_to_json(p.rho_scaled),
        "rho_log_scale": float(p.rho_log_scale),
        "effect": matrix_to_json(p.effect_scaled),
        "effect_log_scale": float(p.effect_log_scale),
    } for p in pairs]


def write_table(path, header, rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
