"""Two-phase (oil/water) IMPES finite-difference simulator.

Pressure is solved implicitly with two-point-flux transmissibilities
(harmonic permeability averaging, upwinded total mobility) and a lumped
total-compressibility accumulation term; saturation is then advanced
explicitly with upwinded fractional flow. Compressibility is carried by the
pore volume, ``V_p(p) = V_p0 * (1 + c_t * (p - p_ref))``, which makes the
discrete scheme conserve each phase volume exactly up to the linear-solver
residual. Gravity and capillarity are neglected.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import units
from .fluid import FluidProperties, fractional_flow_slope_max, mobilities
from .rates import ConnectionTable, well_rates
from .reservoir import ReservoirModel, ReservoirState

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Pressure solve failed to reach tolerance."""


class SaturationRangeError(RuntimeError):
    """Explicit saturation update left [0, 1]; the step was too large."""


def pcg(A, b, x0=None, tol=1e-10, maxiter=None):
    """Jacobi-preconditioned conjugate gradient for SPD ``A``.

    Returns ``(x, relative_residual, iterations)``.
    """
    n = b.size
    maxiter = 10 * n if maxiter is None else maxiter
    dinv = 1.0 / A.diagonal()
    x = np.zeros(n) if x0 is None else x0.copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros(n), 0.0, 0
    r = b - A @ x
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= tol * bnorm:
            # confirm with the true residual
            res = np.linalg.norm(b - A @ x) / bnorm
            if res <= tol:
                return x, res, it
            r = b - A @ x
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    res = np.linalg.norm(b - A @ x) / bnorm
    raise SolverError(f"pressure solve did not converge in {maxiter} iterations (relative residual {res:.3e})")


def _harmonic(a, b):
    s = a + b
    out = np.zeros_like(s)
    nz = s > 0
    out[nz] = 2.0 * a[nz] * b[nz] / s[nz]
    return out


@dataclass
class OracleSystem:
    """Static discretisation of a model: active cells, faces and connections."""

    model: ReservoirModel
    fluid: FluidProperties
    cells: np.ndarray  # flat indices of active cells
    local: np.ndarray  # flat index -> active position (or -1)
    face_a: np.ndarray
    face_b: np.ndarray
    face_t: np.ndarray  # geometric transmissibility, m^3
    pv0: np.ndarray  # pore volume at reference pressure
    table: ConnectionTable
    conn_local: np.ndarray
    conn_index: np.ndarray  # C * stored multiplier
    fprime_max: float
    clamp_events: int = field(default=0)

    @classmethod
    def build(cls, model: ReservoirModel, fluid: FluidProperties) -> "OracleSystem":
        model.validate()
        fluid.validate()
        g = model.grid
        act = g.active
        cells = np.flatnonzero(act.reshape(-1))
        local = -np.ones(act.size, dtype=np.int64)
        local[cells] = np.arange(cells.size)
        local3 = local.reshape(g.shape)
        perms = (model.rock.perm_x, model.rock.perm_y, model.rock.perm_z)
        sizes = (g.dx, g.dy, g.dz)
        fa, fb, ft = [], [], []
        # array axes are (k, j, i); physical axis 0 = x lives on array axis 2
        for ax, arr_ax in ((0, 2), (1, 1), (2, 0)):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[arr_ax] = slice(0, -1)
            hi[arr_ax] = slice(1, None)
            lo, hi = tuple(lo), tuple(hi)
            both = act[lo] & act[hi]
            area = g.cell_volume / sizes[ax]
            k = _harmonic(perms[ax][lo], perms[ax][hi])
            fa.append(local3[lo][both])
            fb.append(local3[hi][both])
            ft.append(area * k[both] / sizes[ax])
        table = ConnectionTable.from_model(model)
        pv0 = (model.rock.porosity * g.cell_volume).reshape(-1)[cells]
        return cls(
            model=model, fluid=fluid, cells=cells, local=local,
            face_a=np.concatenate(fa), face_b=np.concatenate(fb), face_t=np.concatenate(ft),
            pv0=pv0, table=table, conn_local=local[table.flat],
            conn_index=table.index * table.truth_mult,
            fprime_max=fractional_flow_slope_max(fluid),
        )

    def pore_volume(self, p: np.ndarray) -> np.ndarray:
        return self.pv0 * (1.0 + self.fluid.compressibility * (p - self.fluid.ref_pressure))

    def phase_volumes(self, state: ReservoirState) -> np.ndarray:
        """(water, oil) volumes in place, m^3."""
        p = state.pressure.reshape(-1)[self.cells]
        sw = state.sat_water.reshape(-1)[self.cells]
        pv = self.pore_volume(p)
        return np.array([np.sum(pv * sw), np.sum(pv * (1.0 - sw))])


@dataclass
class StepResult:
    state: ReservoirState
    conn_rates: np.ndarray  # (L, 2) water/oil m^3/s, production positive
    stable_dt: float  # seconds
    residual: float
    clamped: int


def controls_arrays(system: OracleSystem, controls: dict):
    """Per-well BHP (Pa) and injection rate (m^3/s) vectors."""
    names = system.table.wells
    bhp = np.array([controls.get(n, 0.0) if k == "producer" else 0.0
                    for n, k in zip(names, system.table.kinds)])
    inj = np.array([units.m3day_to_m3s(controls.get(n, 0.0)) if k == "injector" else 0.0
                    for n, k in zip(names, system.table.kinds)])
    return bhp, inj


def step(state: ReservoirState, controls: dict, system: OracleSystem, dt: float) -> StepResult:
    """Advance one IMPES step of ``dt`` seconds under fixed controls."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    fl = system.fluid
    tab = system.table
    n = system.cells.size
    p0 = state.pressure.reshape(-1)[system.cells]
    s0 = state.sat_water.reshape(-1)[system.cells]
    lw, lo = mobilities(s0, fl)
    lt = lw + lo
    fw = lw / lt

    a, b = system.face_a, system.face_b
    up = np.where(p0[a] >= p0[b], a, b)
    coef = system.face_t * lt[up]
    acc = system.pv0 * fl.compressibility / dt

    bhp, inj = controls_arrays(system, controls)
    is_prod = np.array([k == "producer" for k in tab.kinds], dtype=bool)[tab.conn_well]
    cl = system.conn_local
    wcoef = system.conn_index * lt[cl]
    open_ = is_prod.copy()

    # injector rate split by connection mobility-weighted index
    qin = np.zeros(tab.n)
    for w in np.nonzero(inj > 0)[0]:
        sel = tab.conn_well == w
        weight = wcoef[sel]
        tot = weight.sum()
        if tot > 0:
            qin[sel] = inj[w] * weight / tot
    src = np.bincount(cl, weights=qin, minlength=n)

    offdiag = sp.coo_matrix((np.concatenate([-coef, -coef]), (np.concatenate([a, b]), np.concatenate([b, a]))),
                            shape=(n, n)).tocsr()
    diag_flow = np.bincount(a, weights=coef, minlength=n) + np.bincount(b, weights=coef, minlength=n)
    clamped = 0
    p = p0
    while True:
        wc = np.where(open_, wcoef, 0.0)
        diag = acc + diag_flow + np.bincount(cl, weights=wc, minlength=n)
        rhs = acc * p0 + src + np.bincount(cl, weights=wc * bhp[tab.conn_well], minlength=n)
        A = offdiag + sp.diags(diag)
        p, res, _ = pcg(A, rhs, x0=p)
        cross = open_ & (p[cl] < bhp[tab.conn_well])
        if not cross.any():
            break
        clamped += int(cross.sum())
        open_ &= ~cross
    if clamped:
        system.clamp_events += clamped
        log.info("producer cross-flow clamped on %d connection(s)", clamped)

    flux = coef * (p[a] - p[b])
    fw_face = np.where(flux >= 0, fw[a], fw[b])
    wflux = fw_face * flux
    net_w = np.bincount(b, weights=wflux, minlength=n) - np.bincount(a, weights=wflux, minlength=n)
    qprod = np.where(open_, wcoef * (p[cl] - bhp[tab.conn_well]), 0.0)
    net_w += np.bincount(cl, weights=qin - qprod * fw[cl], minlength=n)

    pv_old = system.pore_volume(p0)
    pv_new = system.pore_volume(p)
    s1 = (pv_old * s0 + dt * net_w) / pv_new
    if s1.min() < -1e-9 or s1.max() > 1 + 1e-9:
        raise SaturationRangeError(
            f"saturation left [0, 1] (range {s1.min():.3e}..{s1.max():.3e}); reduce dt"
        )
    s1 = np.clip(s1, 0.0, 1.0)

    out_flow = (np.bincount(a, weights=np.maximum(flux, 0), minlength=n)
                + np.bincount(b, weights=np.maximum(-flux, 0), minlength=n)
                + np.bincount(cl, weights=qprod, minlength=n))
    with np.errstate(divide="ignore"):
        dt_cells = np.where(out_flow > 0, pv_new / (system.fprime_max * out_flow), np.inf)
    stable = float(dt_cells.min())

    conn_rates = np.zeros((tab.n, 2))
    conn_rates[:, 0] = qprod * fw[cl] - qin
    conn_rates[:, 1] = qprod * (1.0 - fw[cl])

    pres = state.pressure.copy().reshape(-1)
    sat = state.sat_water.copy().reshape(-1)
    pres[system.cells] = p
    sat[system.cells] = s1
    shape = state.pressure.shape
    return StepResult(ReservoirState(pres.reshape(shape), sat.reshape(shape)), conn_rates, stable, res, clamped)


@dataclass
class RunResult:
    times: np.ndarray  # report times, days
    states: list
    rates: np.ndarray  # (T, n_wells, 2) m^3/s from the rates module at report states
    well_names: list
    produced: np.ndarray  # cumulative (water, oil) produced, m^3
    injected: float  # cumulative water injected, m^3
    in_place_initial: np.ndarray
    in_place_final: np.ndarray
    n_steps: int
    max_residual: float


def report_controls(schedule, times, table: ConnectionTable):
    """BHP (Pa) and injection (m^3/day) active just before each report time."""
    bhp = np.zeros((len(times), len(table.wells)))
    inj = np.zeros_like(bhp)
    for r, t in enumerate(times):
        n = max(0, int(np.searchsorted(schedule.times, t, side="left")) - 1)
        for w, name in enumerate(table.wells):
            if name in schedule.bhp:
                bhp[r, w] = schedule.bhp[name][n]
            if name in schedule.injection:
                inj[r, w] = schedule.injection[name][n]
    return bhp, inj


def run(model: ReservoirModel, fluid: FluidProperties, schedule=None, report_times=None,
        max_dt_days: float = 5.0, safety: float = 0.9, system: OracleSystem | None = None) -> RunResult:
    """Simulate from the model's initial state and report at ``report_times`` (days)."""
    schedule = model.schedule if schedule is None else schedule
    if report_times is None:
        report_times = schedule.times[1:]
    report_times = np.asarray(report_times, dtype=np.float64)
    system = OracleSystem.build(model, fluid) if system is None else system
    state = model.initial_state.copy()
    initial = system.phase_volumes(state)
    produced = np.zeros(2)
    injected = 0.0
    states = []
    t = float(schedule.times[0])
    if report_times.size and (report_times.min() < t - 1e-12):
        raise ValueError("report times precede the schedule start")
    dt_next = max_dt_days * units.DAY
    n_steps = 0
    max_res = 0.0
    boundaries = np.unique(np.concatenate([schedule.times, report_times]))
    for t_rep in report_times:
        while t < t_rep - 1e-9:
            nxt = boundaries[boundaries > t + 1e-9]
            t_stop = min(t_rep, nxt[0]) if nxt.size else t_rep
            controls = schedule.controls_at(t)
            dt = min(dt_next, (t_stop - t) * units.DAY, max_dt_days * units.DAY)
            for _ in range(30):
                try:
                    res = step(state, controls, system, dt)
                except SaturationRangeError:
                    dt *= 0.5
                    continue
                if dt <= res.stable_dt * (1 + 1e-12):
                    break
                dt = safety * res.stable_dt
            else:
                raise SaturationRangeError(f"could not find a stable step at t={t:.3f} days")
            state = res.state
            produced += dt * np.maximum(res.conn_rates, 0.0).sum(axis=0)
            injected += dt * np.maximum(-res.conn_rates[:, 0], 0.0).sum()
            max_res = max(max_res, res.residual)
            n_steps += 1
            t += dt / units.DAY
            if abs(t - t_stop) < 1e-9:
                t = t_stop
            dt_next = min(max_dt_days * units.DAY, safety * res.stable_dt)
        states.append(state.copy())
    bhp, inj = report_controls(schedule, report_times, system.table)
    rates = well_rates(states, system.table, bhp, inj, fluid)
    return RunResult(
        times=report_times, states=states, rates=rates, well_names=list(system.table.wells),
        produced=produced, injected=injected, in_place_initial=initial,
        in_place_final=system.phase_volumes(state), n_steps=n_steps, max_residual=max_res,
    )
