"""The 16x16x8 synthetic field used for twin experiments and demos."""
from __future__ import annotations

import numpy as np

from . import units
from .datagen import ScheduleGenParams, bhp_schedule, correlated_noise, make_rng
from .reservoir import (
    ControlSchedule, GridGeometry, ReservoirModel, ReservoirState, RockProperties, Well,
)

TWIN_SEED = 20240611


def base_model(nx: int = 16, ny: int = 16, nz: int = 8, dx: float = 25.0, dy: float = 25.0,
               dz: float = 4.0, seed: int = TWIN_SEED, schedule: ScheduleGenParams | None = None,
               injection_m3_day: float = 800.0) -> ReservoirModel:
    """Layered heterogeneous box with three producers and one central injector.

    The 2x2 corner columns at i, j < 2 are inactive. Producer ``P3`` is
    deviated so that it perforates cells along all three axes.
    """
    rng = make_rng(seed)
    shape = (nz, ny, nx)
    active = np.ones(shape, dtype=bool)
    active[:, :2, :2] = False
    poro = np.clip(0.2 + correlated_noise(shape, 0.03, 2.0, rng), 0.05, 0.35)
    logk = np.log(100.0 * units.MILLIDARCY) + correlated_noise(shape, 0.6, 2.0, rng)
    kx = np.exp(logk)
    rock = RockProperties(poro, kx.copy(), kx.copy(), 0.1 * kx)
    state = ReservoirState(np.full(shape, 200.0e5), np.full(shape, 0.2))
    zmax = nz * dz

    def vertical(i, j):
        x, y = (i + 0.5) * dx, (j + 0.5) * dy
        return [[x, y, 0.0], [x, y, zmax]]

    wells = [
        Well("P1", "producer", 0.1, vertical(3, 3)),
        Well("P2", "producer", 0.1, vertical(12, 3)),
        Well("P3", "producer", 0.1, [[11.5 * dx, 13.5 * dy, 0.0], [12.5 * dx, 13.5 * dy, 0.5 * zmax],
                                     [13.5 * dx, 12.5 * dy, zmax]]),
        Well("I1", "injector", 0.1, vertical(8, 8)),
    ]
    params = schedule or ScheduleGenParams()
    times = params.times()
    srng = make_rng(seed + 1)
    bhp = {w.name: bhp_schedule(params, srng, times) for w in wells if w.kind == "producer"}
    inj = {"I1": np.full(times.shape, injection_m3_day)}
    model = ReservoirModel(GridGeometry(nx, ny, nz, dx, dy, dz, active), rock, state, wells,
                           ControlSchedule(times, bhp, inj))
    model.validate()
    return model


ANOMALY_BOX = (slice(0, 8), slice(2, 7), slice(2, 7))  # (k, j, i) around P1
ANOMALY_FACTOR = 1.5
TRUTH_MULTIPLIER = ("P2", (12, 3, 3), 0.3)


def truth_model(base: ReservoirModel) -> ReservoirModel:
    """Base model with a +50% permeability anomaly near P1 and one P2
    perforation choked to 30% of its connection index."""
    truth = base.copy()
    for name in ("perm_x", "perm_y", "perm_z"):
        arr = getattr(truth.rock, name)
        arr[ANOMALY_BOX] *= ANOMALY_FACTOR
    well, cell, factor = TRUTH_MULTIPLIER
    for w in truth.wells:
        if w.name == well:
            w.multipliers = {cell: factor}
    truth.validate()
    return truth
