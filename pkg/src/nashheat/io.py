"""Serialization: fields, scenarios, manifests, CSV tables, JUnit XML."""

from __future__ import annotations

import hashlib
import json
import math
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .scenario import Box, PhysicalScenario, ScenarioError
from .weighted import Field, Grid

FLOAT_FMT = "%.17g"


# -- fields ---------------------------------------------------------------------


def save_field(path: Path, f: Field) -> None:
    """Raw little-endian float64 array plus a JSON sidecar {dim, R, n}."""
    path = Path(path)
    f.values.astype("<f8").tofile(path)
    sidecar = {"dim": f.grid.dim, "R": f.grid.R, "n": f.grid.n}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar))


def load_field(path: Path) -> Field:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    grid = Grid(int(sidecar["dim"]), float(sidecar["R"]), int(sidecar["n"]))
    vals = np.fromfile(path, dtype="<f8").reshape(grid.shape)
    return Field(grid, vals)


def export_csv_slice(path: Path, f: Field, axis_index: Optional[int] = None) -> None:
    """1D slice through the origin as CSV (y, value)."""
    grid = f.grid
    if grid.dim == 1:
        ys = grid.axis
        vals = f.values
    else:
        mid = grid.n // 2
        ys = grid.axis
        vals = f.values[:, mid] if not axis_index else f.values[mid, :]
    rows = [{"y": y, "value": v} for y, v in zip(ys, vals)]
    write_csv(path, ["y", "value"], rows)


# -- scenario JSON ----------------------------------------------------------------


def _box_from_json(obj, key: str) -> Box:
    try:
        lo, hi = obj
        return Box(tuple(float(x) for x in lo), tuple(float(x) for x in hi))
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{key}: expected [lo[], hi[]] arrays, got {obj!r}") from exc


def _target_from_json(spec):
    if spec is None or isinstance(spec, (int, float)):
        return float(spec or 0.0)
    if isinstance(spec, dict):
        kind = spec.get("kind", "zero")
        if kind == "zero":
            return 0.0
        if kind == "gaussian":
            amp = float(spec.get("amplitude", 1.0))
            width = float(spec.get("width", 1.0))
            center = np.asarray(spec.get("center", [0.0]), dtype=float)

            def gaussian(pts, _a=amp, _w=width, _c=center):
                d2 = np.sum((np.asarray(pts, float) - _c) ** 2, axis=-1)
                return _a * np.exp(-d2 / (_w * _w))

            return gaussian
        raise ScenarioError(f"target.kind: unknown kind {kind!r} (zero|gaussian)")
    raise ScenarioError(f"target: expected number or object, got {spec!r}")


def scenario_from_json(data: dict) -> PhysicalScenario:
    """Build a scenario from the JSON config; errors name the offending key."""
    for req in ("dim", "T", "leader_box", "follower_boxes", "alpha"):
        if req not in data:
            raise ScenarioError(f"{req}: missing required key")
    if not isinstance(data["follower_boxes"], list):
        raise ScenarioError("follower_boxes: expected a list of boxes")
    boxes = [
        _box_from_json(b, f"follower_boxes[{i}]")
        for i, b in enumerate(data["follower_boxes"])
    ]
    scenario = PhysicalScenario(
        dim=int(data["dim"]),
        T=float(data["T"]),
        leader_box=_box_from_json(data["leader_box"], "leader_box"),
        follower_boxes=boxes,
        alpha=[float(a) for a in data["alpha"]],
        a=data.get("a", 0.0),
        b=data.get("b", 0.0),
        target=_target_from_json(data.get("target")),
        rho_margin=float(data.get("rho_margin", 2.0)),
        name=str(data.get("name", "scenario")),
    )
    return scenario


def scenario_to_json(p: PhysicalScenario) -> dict:
    """Normalized JSON form (callables are not serialized back)."""
    out = {
        "name": p.name,
        "dim": p.dim,
        "T": p.T,
        "leader_box": [list(p.leader_box.lo), list(p.leader_box.hi)],
        "follower_boxes": [[list(b.lo), list(b.hi)] for b in p.follower_boxes],
        "alpha": list(p.alpha),
        "rho_margin": p.rho_margin,
    }
    if not callable(p.a):
        out["a"] = p.a
    if not callable(p.b):
        out["b"] = p.b
    if not callable(p.target):
        out["target"] = p.target
    return out


def canonical_json(data: dict) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"))


def scenario_hash(data: dict) -> str:
    return hashlib.sha256(canonical_json(data).encode()).hexdigest()[:16]


# -- manifests & tables -------------------------------------------------------------


@dataclass
class RunManifest:
    scenario_hash: str
    command: str
    grid: dict
    time_grid: dict
    tolerances: dict
    seed: int
    deterministic: bool
    started: float = field(default_factory=time.time)
    elapsed: float = 0.0
    version: str = "0.1.0"
    extra: dict = field(default_factory=dict)

    def save(self, path: Path) -> None:
        data = {
            "scenario_hash": self.scenario_hash,
            "command": self.command,
            "grid": self.grid,
            "time_grid": self.time_grid,
            "tolerances": self.tolerances,
            "seed": self.seed,
            "deterministic": self.deterministic,
            "elapsed_seconds": self.elapsed,
            "version": self.version,
            **self.extra,
        }
        Path(path).write_text(json.dumps(data, indent=2, sort_keys=True))


def write_csv(path: Path, header: Sequence[str], rows: Sequence[dict]) -> None:
    """Deterministic CSV: fixed column order, %.17g floats."""
    lines = [",".join(header)]
    for row in rows:
        cells = []
        for key in header:
            val = row[key]
            if isinstance(val, float):
                cells.append(FLOAT_FMT % val)
            else:
                cells.append(str(val))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def write_junit_xml(path: Path, suite_name: str, cases: Sequence) -> None:
    """JUnit-style XML for the verification suite."""
    root = ET.Element(
        "testsuite",
        name=suite_name,
        tests=str(len(cases)),
        failures=str(sum(1 for c in cases if not c.passed)),
    )
    for c in cases:
        el = ET.SubElement(root, "testcase", name=c.name, time=f"{c.seconds:.3f}")
        if not c.passed:
            fail = ET.SubElement(el, "failure", message=c.message)
            fail.text = c.message
    ET.ElementTree(root).write(path, encoding="unicode", xml_declaration=True)
