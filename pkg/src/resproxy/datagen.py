"""Scenario randomisation and supervised dataset assembly."""
from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import oracle, units
from .fluid import FluidProperties
from .rates import write_rates_csv, read_rates_csv
from .reservoir import (
    ControlSchedule, ReservoirModel, ReservoirState, RockProperties, load_model, save_model,
)

log = logging.getLogger(__name__)

RNG_ALGORITHM = "numpy.Philox4x64-10"


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(master: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(master), *map(int, path)]).generate_state(1, np.uint64)[0])


def correlated_noise(shape, sigma: float, corr_len: float, rng) -> np.ndarray:
    """Zero-mean Gaussian field with empirical std ``sigma``.

    White noise is smoothed by an isotropic Gaussian kernel with standard
    deviation ``corr_len`` cells, then de-meaned and rescaled.
    """
    if isinstance(rng, (int, np.integer)):
        rng = make_rng(rng)
    white = rng.standard_normal(shape)
    if sigma == 0:
        return np.zeros(shape)
    field_ = gaussian_filter(white, corr_len, mode="reflect") if corr_len > 0 else white
    field_ = field_ - field_.mean()
    std = field_.std()
    return field_ * (sigma / std) if std > 0 else field_


@dataclass
class NoiseConfig:
    porosity: float = 0.02  # absolute porosity std
    log_perm: float = 0.3  # std of ln k
    pressure: float = 3.0e5  # Pa
    sat_water: float = 0.02
    corr_len: float = 3.0  # cells


def randomize_static(model: ReservoirModel, noise: NoiseConfig, rng) -> ReservoirModel:
    """Perturb statics and initial state with correlated noise (new model)."""
    if isinstance(rng, (int, np.integer)):
        rng = make_rng(rng)
    shape = model.grid.shape
    act = model.grid.active
    cl = noise.corr_len

    def nz(sigma):
        return correlated_noise(shape, sigma, cl, rng)

    poro = np.where(act, np.clip(model.rock.porosity + nz(noise.porosity), 0.01, 0.99), model.rock.porosity)
    dk = np.where(act, nz(noise.log_perm), 0.0)
    rock = RockProperties(poro, model.rock.perm_x * np.exp(dk), model.rock.perm_y * np.exp(dk),
                          model.rock.perm_z * np.exp(dk))
    p = model.initial_state.pressure + np.where(act, nz(noise.pressure), 0.0)
    sw = np.clip(model.initial_state.sat_water + np.where(act, nz(noise.sat_water), 0.0), 0.0, 1.0)
    out = model.copy()
    out.rock = rock
    out.initial_state = ReservoirState(p, sw)
    return out


@dataclass
class ScheduleGenParams:
    """Uniform ranges for the BHP generator terms (Pa, 1/day, rad, 1/day, Pa, Pa)."""

    amplitude: tuple = (0.0, 40.0e5)  # eps0
    frequency: tuple = (0.01, 0.05)  # eps1
    phase: tuple = (0.0, 2.0 * math.pi)  # eps2
    decay: tuple = (0.0, 0.01)  # eps3
    base: tuple = (70.0e5, 130.0e5)  # eps4
    noise: tuple = (-5.0e5, 5.0e5)  # eps5, redrawn every step
    horizon_days: float = 240.0
    step_days: float = 10.0

    def ranges(self):
        return (self.amplitude, self.frequency, self.phase, self.decay, self.base, self.noise)

    def validate(self) -> None:
        for name, (lo, hi) in zip(("eps0", "eps1", "eps2", "eps3", "eps4", "eps5"), self.ranges()):
            if lo > hi:
                raise ValueError(f"{name}: range lower bound exceeds upper bound")
        if self.amplitude[0] < 0 or self.decay[0] < 0:
            raise ValueError("amplitude and decay ranges must be non-negative")
        if self.base[0] + self.noise[0] <= 0:
            raise ValueError("BHP ranges allow non-positive pressures")
        if self.step_days <= 0 or self.horizon_days < self.step_days:
            raise ValueError("need 0 < step_days <= horizon_days")

    def times(self) -> np.ndarray:
        n = int(round(self.horizon_days / self.step_days))
        return np.arange(n + 1) * self.step_days

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ScheduleGenParams":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def bhp_series(eps, times, eps5) -> np.ndarray:
    e0, e1, e2, e3, e4 = eps
    t = np.asarray(times, dtype=np.float64)
    return e0 * (1.0 - np.sin(e1 * t + e2)) / 2.0 * np.exp(-e3 * t) + e4 + eps5


def bhp_schedule(params: ScheduleGenParams, rng, times=None) -> np.ndarray:
    """One well's BHP series (Pa) at the schedule times."""
    params.validate()
    if isinstance(rng, (int, np.integer)):
        rng = make_rng(rng)
    times = params.times() if times is None else np.asarray(times, float)
    eps = [rng.uniform(lo, hi) for lo, hi in params.ranges()[:5]]
    lo, hi = params.noise
    eps5 = rng.uniform(lo, hi, size=times.shape)
    u = bhp_series(eps, times, eps5)
    if np.any(u <= 0):
        raise ValueError("generated BHP is not positive; check the generator ranges")
    return u


@dataclass
class GenConfig:
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    schedule: ScheduleGenParams = field(default_factory=ScheduleGenParams)
    injection: tuple = (600.0, 1000.0)  # m^3/day, constant per scenario
    max_dt_days: float = 5.0

    def to_dict(self) -> dict:
        return {"noise": asdict(self.noise), "schedule": self.schedule.to_dict(),
                "injection": list(self.injection), "max_dt_days": self.max_dt_days}

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(NoiseConfig(**d["noise"]), ScheduleGenParams.from_dict(d["schedule"]),
                   tuple(d["injection"]), d.get("max_dt_days", 5.0))


def random_schedule(model: ReservoirModel, cfg: GenConfig, rng) -> ControlSchedule:
    times = cfg.schedule.times()
    bhp = {w.name: bhp_schedule(cfg.schedule, rng, times) for w in model.producers}
    inj = {w.name: np.full(times.shape, rng.uniform(*cfg.injection)) for w in model.injectors}
    return ControlSchedule(times, bhp, inj)


def make_scenario(base: ReservoirModel, cfg: GenConfig, seed: int) -> ReservoirModel:
    rng = make_rng(seed)
    model = randomize_static(base, cfg.noise, rng)
    model.schedule = random_schedule(model, cfg, rng)
    model.validate()
    return model


def _simulate_scenario(args):
    index, seed, base, fluid, cfg, out_dir = args
    model = make_scenario(base, cfg, seed)
    try:
        result = oracle.run(model, fluid, max_dt_days=cfg.max_dt_days)
    except (oracle.SolverError, oracle.SaturationRangeError) as exc:
        return index, None, str(exc)
    sdir = Path(out_dir) / "scenarios" / f"s{index:04d}"
    save_model(model, sdir / "model")
    (sdir / "states").mkdir(parents=True, exist_ok=True)
    cubes = [model.initial_state.as_cube()] + [s.as_cube() for s in result.states]
    for k, cube in enumerate(cubes):
        np.ascontiguousarray(cube, dtype="<f8").tofile(sdir / "states" / f"{k:04d}.f64")
    write_rates_csv(sdir / "rates.csv", result.times, result.well_names, result.rates)
    balance = {
        "in_place_initial_m3": result.in_place_initial.tolist(),
        "in_place_final_m3": result.in_place_final.tolist(),
        "produced_m3": result.produced.tolist(),
        "injected_m3": result.injected,
        "oracle_steps": result.n_steps,
    }
    (sdir / "balance.json").write_text(json.dumps(balance, indent=1))
    return index, f"scenarios/s{index:04d}", None


def build_dataset(base: ReservoirModel, fluid: FluidProperties, n: int, cfg: GenConfig, seed: int,
                  out_dir, jobs: int = 1) -> Path:
    """Generate ``n`` randomized scenarios and their simulated dynamics."""
    if n < 1:
        raise ValueError("need at least one scenario")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = [derive_seed(seed, i) for i in range(n)]
    tasks = [(i, s, base, fluid, cfg, str(out_dir)) for i, s in enumerate(seeds)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_simulate_scenario, tasks))
    else:
        results = [_simulate_scenario(t) for t in tasks]
    scenarios, skipped = [], []
    for index, rel, err in sorted(results):
        if rel is None:
            log.warning("scenario %d skipped: %s", index, err)
            skipped.append({"index": index, "seed": seeds[index], "error": err})
        else:
            scenarios.append({"index": index, "seed": seeds[index], "path": rel})
    if len(skipped) > 0.2 * n:
        raise RuntimeError(f"{len(skipped)} of {n} scenarios failed in the simulator")
    save_model(base, out_dir / "base_model")
    manifest = {
        "format": "resproxy-dataset",
        "version": 1,
        "rng": {"algorithm": RNG_ALGORITHM, "master_seed": int(seed)},
        "config": cfg.to_dict(),
        "fluid": fluid.to_dict(),
        "report_times_day": cfg.schedule.times()[1:].tolist(),
        "state_channels": ["pressure_pa", "sat_water", "sat_oil"],
        "scenarios": scenarios,
        "skipped": skipped,
    }
    (out_dir / "dataset.json").write_text(json.dumps(manifest, indent=1))
    return out_dir


@dataclass
class ScenarioData:
    model: ReservoirModel
    states: np.ndarray  # (T + 1, 3, nz, ny, nx), index 0 is the initial state
    times: np.ndarray  # report times (T,), days
    rates: np.ndarray  # (T, n_wells, 2) m^3/day
    well_names: list


@dataclass
class Dataset:
    root: Path
    manifest: dict
    scenarios: list
    fluid: FluidProperties

    def __len__(self) -> int:
        return len(self.scenarios)


def load_dataset(root) -> Dataset:
    root = Path(root)
    mf = root / "dataset.json"
    if not mf.exists():
        raise FileNotFoundError(f"missing dataset.json in {root}")
    manifest = json.loads(mf.read_text())
    out = []
    for entry in manifest["scenarios"]:
        sdir = root / entry["path"]
        model = load_model(sdir / "model")
        files = sorted((sdir / "states").glob("*.f64"))
        shape = (3,) + model.grid.shape
        states = np.stack([np.fromfile(f, dtype="<f8").reshape(shape) for f in files])
        times, names, rates = read_rates_csv(sdir / "rates.csv")
        out.append(ScenarioData(model, states, times, rates, names))
    return Dataset(root, manifest, out, FluidProperties.from_dict(manifest["fluid"]))


def rates_m3day(result) -> np.ndarray:
    return units.m3s_to_m3day(result.rates)
