"""Reservoir data model, on-disk format and well/grid intersection.

All in-memory quantities are SI (m, m^2, Pa, s) except schedule times (days)
and injector rates (m^3/day). Arrays are indexed ``[k, j, i]`` (x fastest).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import units

ARRAY_NAMES = ("porosity", "perm_x", "perm_y", "perm_z", "pressure", "sat_water")
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Invalid or inconsistent model directory."""


@dataclass
class GridGeometry:
    nx: int
    ny: int
    nz: int
    dx: float
    dy: float
    dz: float
    active: np.ndarray = None

    def __post_init__(self):
        if self.active is None:
            self.active = np.ones(self.shape, dtype=bool)
        self.active = np.asarray(self.active, dtype=bool)

    @property
    def shape(self) -> tuple:
        return (self.nz, self.ny, self.nx)

    @property
    def cell_size(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz])

    @property
    def extent(self) -> np.ndarray:
        return np.array([self.nx * self.dx, self.ny * self.dy, self.nz * self.dz])

    @property
    def cell_volume(self) -> float:
        return self.dx * self.dy * self.dz

    def validate(self) -> None:
        if min(self.nx, self.ny, self.nz) < 1:
            raise ModelFormatError(f"grid extents must be >= 1, got {self.shape[::-1]}")
        if min(self.dx, self.dy, self.dz) <= 0:
            raise ModelFormatError("cell sizes must be positive")
        if self.active.shape != self.shape:
            raise ModelFormatError(f"active mask shape {self.active.shape} != grid {self.shape}")
        if not self.active.any():
            raise ModelFormatError("no active cells")

    def flat_index(self, cell) -> int:
        i, j, k = cell
        return (k * self.ny + j) * self.nx + i


@dataclass
class RockProperties:
    porosity: np.ndarray
    perm_x: np.ndarray
    perm_y: np.ndarray
    perm_z: np.ndarray

    def perms(self) -> np.ndarray:
        return np.stack([self.perm_x, self.perm_y, self.perm_z])

    def validate(self, grid: GridGeometry) -> None:
        act = grid.active
        for name in ("porosity", "perm_x", "perm_y", "perm_z"):
            arr = getattr(self, name)
            if arr.shape != grid.shape:
                raise ModelFormatError(f"{name}: shape {arr.shape} != grid {grid.shape}")
            if not np.all(np.isfinite(arr[act])):
                raise ModelFormatError(f"{name}: non-finite values on active cells")
        if np.any(self.porosity[act] < 0) or np.any(self.porosity[act] > 1):
            raise ModelFormatError("porosity outside [0, 1]")
        for name in ("perm_x", "perm_y", "perm_z"):
            if np.any(getattr(self, name)[act] < 0):
                raise ModelFormatError(f"{name}: negative permeability")


@dataclass
class ReservoirState:
    pressure: np.ndarray
    sat_water: np.ndarray

    @property
    def sat_oil(self) -> np.ndarray:
        return 1.0 - self.sat_water

    def copy(self) -> "ReservoirState":
        return ReservoirState(self.pressure.copy(), self.sat_water.copy())

    def as_cube(self) -> np.ndarray:
        """[3, nz, ny, nx] stack of pressure, water and oil saturation."""
        return np.stack([self.pressure, self.sat_water, self.sat_oil])

    @classmethod
    def from_cube(cls, cube: np.ndarray) -> "ReservoirState":
        return cls(np.array(cube[0]), np.array(cube[1]))

    def validate(self, grid: GridGeometry) -> None:
        act = grid.active
        for name in ("pressure", "sat_water"):
            arr = getattr(self, name)
            if arr.shape != grid.shape:
                raise ModelFormatError(f"{name}: shape {arr.shape} != grid {grid.shape}")
            if not np.all(np.isfinite(arr[act])):
                raise ModelFormatError(f"{name}: non-finite values on active cells")
        if np.any(self.pressure[act] <= 0):
            raise ModelFormatError("pressure must be positive on active cells")
        sw = self.sat_water[act]
        if np.any(sw < 0) or np.any(sw > 1):
            raise ModelFormatError("sat_water outside [0, 1]")


@dataclass
class Well:
    name: str
    kind: str  # "producer" | "injector"
    radius: float
    trajectory: np.ndarray  # (n, 3) points in metres, z downward
    multipliers: dict = field(default_factory=dict)  # {(i, j, k): factor}

    def __post_init__(self):
        self.trajectory = np.asarray(self.trajectory, dtype=np.float64).reshape(-1, 3)

    def validate(self, grid: GridGeometry) -> None:
        if self.kind not in ("producer", "injector"):
            raise ModelFormatError(f"well {self.name}: unknown kind {self.kind!r}")
        if len(self.trajectory) < 2:
            raise ModelFormatError(f"well {self.name}: trajectory needs >= 2 points")
        if self.radius <= 0:
            raise ModelFormatError(f"well {self.name}: radius must be positive")
        tol = 1e-9 * grid.extent.max()
        if np.any(self.trajectory < -tol) or np.any(self.trajectory > grid.extent + tol):
            raise ModelFormatError(f"well {self.name}: trajectory leaves the grid bounding box")


@dataclass
class Connection:
    well: str
    cell: tuple  # (i, j, k)
    h: np.ndarray  # perforated length projected on x, y, z
    index: float = 0.0  # connection index C, m^3


@dataclass
class ControlSchedule:
    """Piecewise-constant controls: value ``n`` applies on ``[times[n], times[n+1])``."""

    times: np.ndarray  # days
    bhp: dict  # producer name -> Pa series
    injection: dict  # injector name -> m^3/day series

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.bhp = {k: np.asarray(v, dtype=np.float64) for k, v in self.bhp.items()}
        self.injection = {k: np.asarray(v, dtype=np.float64) for k, v in self.injection.items()}

    def validate(self) -> None:
        if len(self.times) < 1 or np.any(np.diff(self.times) <= 0):
            raise ModelFormatError("schedule timestamps must be strictly increasing")
        for name, s in self.bhp.items():
            if s.shape != self.times.shape:
                raise ModelFormatError(f"schedule bhp[{name}]: length mismatch")
            if np.any(s <= 0) or not np.all(np.isfinite(s)):
                raise ModelFormatError(f"schedule bhp[{name}]: must be positive")
        for name, s in self.injection.items():
            if s.shape != self.times.shape:
                raise ModelFormatError(f"schedule injection[{name}]: length mismatch")
            if np.any(s < 0) or not np.all(np.isfinite(s)):
                raise ModelFormatError(f"schedule injection[{name}]: must be >= 0")

    def index_at(self, t_days: float) -> int:
        n = int(np.searchsorted(self.times, t_days, side="right")) - 1
        return min(max(n, 0), len(self.times) - 1)

    def controls_at(self, t_days: float) -> dict:
        n = self.index_at(t_days)
        out = {name: s[n] for name, s in self.bhp.items()}
        out.update({name: s[n] for name, s in self.injection.items()})
        return out

    def window(self, start: int, stop: int) -> "ControlSchedule":
        return ControlSchedule(
            self.times[start:stop],
            {k: v[start:stop] for k, v in self.bhp.items()},
            {k: v[start:stop] for k, v in self.injection.items()},
        )


@dataclass
class ReservoirModel:
    grid: GridGeometry
    rock: RockProperties
    initial_state: ReservoirState
    wells: list
    schedule: ControlSchedule

    def validate(self) -> None:
        self.grid.validate()
        self.rock.validate(self.grid)
        self.initial_state.validate(self.grid)
        names = [w.name for w in self.wells]
        if len(set(names)) != len(names):
            raise ModelFormatError("duplicate well names")
        for w in self.wells:
            w.validate(self.grid)
            series = self.schedule.bhp if w.kind == "producer" else self.schedule.injection
            if w.name not in series:
                raise ModelFormatError(f"schedule has no controls for well {w.name}")
        self.schedule.validate()

    @property
    def producers(self) -> list:
        return [w for w in self.wells if w.kind == "producer"]

    @property
    def injectors(self) -> list:
        return [w for w in self.wells if w.kind == "injector"]

    def connections(self) -> list:
        """Connections of all wells with connection indices filled in."""
        from .rates import fill_connection_indices

        out = []
        for w in self.wells:
            out.extend(compute_connections(w, self.grid))
        fill_connection_indices(out, self.grid, self.rock, {w.name: w for w in self.wells})
        return out

    def copy(self) -> "ReservoirModel":
        manifest, arrays = model_to_dict(self)
        return load_model_dict(json.loads(json.dumps(manifest)), arrays)


# ---------------------------------------------------------------------------
# well / grid intersection

def _cell_axis_index(v: float, n: int, on_face: bool) -> int:
    if on_face:
        # segment lies in a cell face: lower-index cell wins
        idx = int(round(v)) - 1
    else:
        idx = int(math.floor(v))
    return min(max(idx, 0), n - 1)


def compute_connections(well: Well, grid: GridGeometry) -> list:
    """Clip the piecewise-linear trajectory against cell boundaries.

    Returns one :class:`Connection` per active cell with positive projected
    perforation length, in first-visit order. ``index`` is left at 0.
    """
    sizes = grid.cell_size
    counts = (grid.nx, grid.ny, grid.nz)
    extent = grid.extent
    tol = 1e-9
    acc: dict = {}
    for p0, p1 in zip(well.trajectory[:-1], well.trajectory[1:]):
        d = p1 - p0
        ts = [0.0, 1.0]
        for ax in range(3):
            if d[ax] == 0:
                continue
            planes = np.arange(counts[ax] + 1) * sizes[ax]
            with np.errstate(over="ignore"):  # near-degenerate segments cross no plane inside (0, 1)
                t = (planes - p0[ax]) / d[ax]
            ts.extend(t[(t > 0) & (t < 1)].tolist())
        ts = np.unique(ts)
        for ta, tb in zip(ts[:-1], ts[1:]):
            if tb - ta <= 1e-14:
                continue
            mid = p0 + d * (0.5 * (ta + tb))
            if np.any(mid < -tol * extent) or np.any(mid > extent * (1 + tol)):
                continue
            cell = []
            for ax in range(3):
                v = mid[ax] / sizes[ax]
                on_face = d[ax] == 0 and abs(v - round(v)) < tol
                cell.append(_cell_axis_index(v, counts[ax], on_face))
            i, j, k = cell
            if not grid.active[k, j, i]:
                continue
            h = np.abs(d) * (tb - ta)
            key = (i, j, k)
            if key in acc:
                acc[key] = acc[key] + h
            else:
                acc[key] = h
    return [Connection(well.name, key, h) for key, h in acc.items() if h.sum() > 0]


# ---------------------------------------------------------------------------
# on-disk format

def _well_to_json(w: Well) -> dict:
    return {
        "name": w.name,
        "kind": w.kind,
        "radius_m": w.radius,
        "trajectory_m": w.trajectory.tolist(),
        "multipliers": [{"cell": list(c), "factor": f} for c, f in sorted(w.multipliers.items())],
    }


def model_to_dict(model: ReservoirModel) -> tuple:
    """Split a model into a JSON-able manifest and a dict of raw arrays."""
    g = model.grid
    manifest = {
        "format": "resproxy-model",
        "version": FORMAT_VERSION,
        "grid": {"nx": g.nx, "ny": g.ny, "nz": g.nz, "dx": g.dx, "dy": g.dy, "dz": g.dz},
        "units": {
            "length": "m", "permeability": "m2", "pressure": "Pa", "porosity": "fraction",
            "saturation": "fraction", "time": "day", "bhp": "Pa", "injection_rate": "m3/day",
        },
        "arrays": {
            name: {"file": f"{name}.f64", "dtype": "<f8", "shape": list(g.shape)} for name in ARRAY_NAMES
        },
        "active": {"file": "active.u8", "dtype": "u1", "shape": list(g.shape)},
        "wells": [_well_to_json(w) for w in model.wells],
        "schedule": {
            "times_day": model.schedule.times.tolist(),
            "bhp_pa": {k: v.tolist() for k, v in model.schedule.bhp.items()},
            "injection_m3_per_day": {k: v.tolist() for k, v in model.schedule.injection.items()},
        },
    }
    arrays = {
        "porosity": model.rock.porosity,
        "perm_x": model.rock.perm_x,
        "perm_y": model.rock.perm_y,
        "perm_z": model.rock.perm_z,
        "pressure": model.initial_state.pressure,
        "sat_water": model.initial_state.sat_water,
        "active": g.active,
    }
    return manifest, arrays


def load_model_dict(manifest: dict, arrays: dict) -> ReservoirModel:
    gm = manifest["grid"]
    grid = GridGeometry(
        int(gm["nx"]), int(gm["ny"]), int(gm["nz"]),
        float(gm["dx"]), float(gm["dy"]), float(gm["dz"]),
        np.array(arrays["active"], dtype=bool),
    )
    rock = RockProperties(*(np.array(arrays[n], dtype=np.float64) for n in ARRAY_NAMES[:4]))
    state = ReservoirState(np.array(arrays["pressure"], dtype=np.float64),
                           np.array(arrays["sat_water"], dtype=np.float64))
    wells = [
        Well(
            w["name"], w["kind"], float(w["radius_m"]), np.array(w["trajectory_m"]),
            {tuple(int(c) for c in m["cell"]): float(m["factor"]) for m in w.get("multipliers", [])},
        )
        for w in manifest["wells"]
    ]
    sm = manifest["schedule"]
    schedule = ControlSchedule(sm["times_day"], sm["bhp_pa"], sm["injection_m3_per_day"])
    model = ReservoirModel(grid, rock, state, wells, schedule)
    model.validate()
    return model


def save_model(model: ReservoirModel, path) -> Path:
    model.validate()
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest, arrays = model_to_dict(model)
    for name in ARRAY_NAMES:
        np.ascontiguousarray(arrays[name], dtype="<f8").tofile(path / f"{name}.f64")
    np.ascontiguousarray(arrays["active"], dtype="u1").tofile(path / "active.u8")
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return path


def _read_raw(path: Path, name: str, spec: dict, expected: int):
    f = path / spec["file"]
    if not f.exists():
        raise ModelFormatError(f"{name}: missing array file {f}")
    arr = np.fromfile(f, dtype=spec["dtype"])
    if arr.size != expected:
        raise ModelFormatError(
            f"{name}: {arr.size} elements on disk but manifest grid implies {expected}"
        )
    return arr


def load_model(path) -> ReservoirModel:
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise ModelFormatError(f"missing manifest.json in {path}")
    manifest = json.loads(mf.read_text())
    gm = manifest["grid"]
    shape = (int(gm["nz"]), int(gm["ny"]), int(gm["nx"]))
    n = int(np.prod(shape))
    arrays = {}
    for name in ARRAY_NAMES:
        arr = _read_raw(path, name, manifest["arrays"][name], n)
        if not np.all(np.isfinite(arr)):
            raise ModelFormatError(f"{name}: non-finite values")
        arrays[name] = arr.astype(np.float64).reshape(shape)
    arrays["active"] = _read_raw(path, "active", manifest["active"], n).reshape(shape).astype(bool)
    return load_model_dict(manifest, arrays)


def oilfield_schedule(times_day, bhp_bar: dict, injection_m3_day: dict) -> ControlSchedule:
    """Build a schedule from BHP in bar and injection rates in m^3/day."""
    return ControlSchedule(times_day, {k: units.bar_to_pa(np.asarray(v, float)) for k, v in bhp_bar.items()},
                           injection_m3_day)
