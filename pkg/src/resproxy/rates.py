"""Well inflow from cell states via Peaceman connection indices.

Numpy functions serve the finite-difference simulator and validation; the
``*_tensor`` variants build the same chain on the autodiff tape so that rates
can be differentiated w.r.t. states, permeabilities and connection multipliers.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import units
from .fluid import FluidProperties, mobilities

# perpendicular axes for a perforation projected on x, y, z
PERP = ((1, 2), (0, 2), (0, 1))
RATES_HEADER = ("time_days", "well", "phase", "rate_m3_per_day")


def kh_effective(k1, k2, h):
    return np.sqrt(k1 * k2) * h


def peaceman_radius(d1, d2, k1, k2):
    """Equivalent radius for an anisotropic block."""
    if np.any(np.asarray(k1) <= 0) or np.any(np.asarray(k2) <= 0):
        raise ValueError("degenerate anisotropy: permeability must be positive")
    r21 = k2 / k1
    r12 = k1 / k2
    num = np.sqrt(d1 ** 2 * np.sqrt(r21) + d2 ** 2 * np.sqrt(r12))
    return 0.28 * num / (r21 ** 0.25 + r12 ** 0.25)


@dataclass
class ConnectionGeometry:
    d: np.ndarray  # (3, 2): perpendicular cell sizes for x, y, z perforations
    k: np.ndarray  # (3, 2): perpendicular permeabilities
    h: np.ndarray  # (3,)
    r_w: float

    @classmethod
    def from_cell(cls, cell_size, perms, h, r_w) -> "ConnectionGeometry":
        cell_size = np.asarray(cell_size, float)
        perms = np.asarray(perms, float)
        d = np.array([[cell_size[a], cell_size[b]] for a, b in PERP])
        k = np.array([[perms[a], perms[b]] for a, b in PERP])
        return cls(d, k, np.asarray(h, float), float(r_w))


def connection_index(geom: ConnectionGeometry) -> float:
    """Sum of per-axis indices ``2*pi*Kh / ln(r_o / r_w)``."""
    total = 0.0
    for ax in range(3):
        if geom.h[ax] <= 0:
            continue
        (d1, d2), (k1, k2) = geom.d[ax], geom.k[ax]
        r0 = peaceman_radius(d1, d2, k1, k2)
        if r0 <= geom.r_w:
            raise ValueError("well radius exceeds equivalent radius")
        total += 2.0 * math.pi * kh_effective(k1, k2, geom.h[ax]) / math.log(r0 / geom.r_w)
    return total


def phase_inflow(C, mobility, p_cell, p_con):
    """Signed volumetric rate; positive is flow into the well."""
    return C * mobility * (p_cell - p_con)


def fill_connection_indices(connections, grid, rock, wells: dict) -> None:
    perms = rock.perms()
    for c in connections:
        i, j, k = c.cell
        geom = ConnectionGeometry.from_cell(grid.cell_size, perms[:, k, j, i], c.h, wells[c.well].radius)
        c.index = connection_index(geom)


@dataclass
class ConnectionTable:
    """Flat arrays describing every connection of a model, in well order."""

    wells: list  # names, one per well in model order
    kinds: list
    conn_well: np.ndarray  # (L,) well position per connection
    cells: np.ndarray  # (L, 3) i, j, k
    flat: np.ndarray  # (L,) flat cell index into [nz, ny, nx]
    h: np.ndarray  # (L, 3)
    r_w: np.ndarray  # (L,)
    index: np.ndarray  # (L,) base connection index
    truth_mult: np.ndarray  # (L,) multipliers stored on the wells

    @property
    def n(self) -> int:
        return len(self.flat)

    def producer_ids(self) -> list:
        return [w for w, kind in enumerate(self.kinds) if kind == "producer"]

    def aggregation(self, well_ids) -> np.ndarray:
        """(L, n_wells) 0/1 matrix summing connections into the listed wells."""
        A = np.zeros((self.n, len(well_ids)))
        for col, w in enumerate(well_ids):
            A[self.conn_well == w, col] = 1.0
        return A

    @classmethod
    def from_model(cls, model) -> "ConnectionTable":
        conns = model.connections()
        names = [w.name for w in model.wells]
        wmap = {w.name: w for w in model.wells}
        pos = {n: i for i, n in enumerate(names)}
        cells = np.array([c.cell for c in conns], dtype=np.int64).reshape(-1, 3)
        return cls(
            wells=names,
            kinds=[w.kind for w in model.wells],
            conn_well=np.array([pos[c.well] for c in conns], dtype=np.int64),
            cells=cells,
            flat=np.array([model.grid.flat_index(c.cell) for c in conns], dtype=np.int64),
            h=np.array([c.h for c in conns]).reshape(-1, 3),
            r_w=np.array([wmap[c.well].radius for c in conns]),
            index=np.array([c.index for c in conns]),
            truth_mult=np.array([wmap[c.well].multipliers.get(tuple(c.cell), 1.0) for c in conns]),
        )


def well_rates(states, table: ConnectionTable, bhp: np.ndarray, injection: np.ndarray,
               fluid: FluidProperties, multipliers=None) -> np.ndarray:
    """Per-well water/oil rates (m^3/s) for a series of states.

    ``bhp`` is (T, n_wells) in Pa (ignored for injectors), ``injection`` is
    (T, n_wells) in m^3/day (ignored for producers). Returns (T, n_wells, 2)
    with production positive and injection negative.
    """
    mult = table.truth_mult if multipliers is None else np.asarray(multipliers, float)
    T = len(states)
    out = np.zeros((T, len(table.wells), 2))
    prod = np.array([k == "producer" for k in table.kinds], dtype=bool)
    for t, s in enumerate(states):
        p = s.pressure.reshape(-1)[table.flat]
        sw = s.sat_water.reshape(-1)[table.flat]
        lw, lo = mobilities(sw, fluid)
        dd = np.maximum(p - bhp[t, table.conn_well], 0.0)
        cm = table.index * mult
        qw = cm * lw * dd
        qo = cm * lo * dd
        for w in np.nonzero(prod)[0]:
            sel = table.conn_well == w
            out[t, w, 0] = qw[sel].sum()
            out[t, w, 1] = qo[sel].sum()
        for w in np.nonzero(~prod)[0]:
            out[t, w, 0] = -units.m3day_to_m3s(injection[t, w])
    return out


# ---------------------------------------------------------------------------
# differentiable chain

def connection_index_tensor(logk, table: ConnectionTable, cell_size) -> ad.Tensor:
    """Connection indices from natural-log permeabilities at connection cells.

    ``logk`` is a tensor (3, L) of ln(k / m^2) for x, y, z.
    """
    L = table.n
    total = None
    for ax, (b, c) in enumerate(PERP):
        sel = np.nonzero(table.h[:, ax] > 0)[0]
        if sel.size == 0:
            continue
        lb = ad.take(logk, b * L + sel)
        lc = ad.take(logk, c * L + sel)
        half = ad.scale(ad.sub(lc, lb), 0.5)  # ln sqrt(k2 / k1)
        d1, d2 = cell_size[b], cell_size[c]
        num = ad.sqrt(ad.add(ad.scale(ad.exp(half), d1 ** 2), ad.scale(ad.exp(ad.neg(half)), d2 ** 2)))
        den = ad.add(ad.exp(ad.scale(half, 0.5)), ad.exp(ad.scale(half, -0.5)))
        r0 = ad.scale(ad.div(num, den), 0.28)
        ratio = ad.div(r0, table.r_w[sel])
        if np.any(ratio.data <= 1.0):
            raise ValueError("well radius exceeds equivalent radius")
        kh = ad.mul(ad.exp(ad.scale(ad.add(lb, lc), 0.5)), table.h[sel, ax])
        c_ax = ad.scale(ad.div(kh, ad.log(ratio)), 2.0 * math.pi)
        S = np.zeros((sel.size, L))
        S[np.arange(sel.size), sel] = 1.0
        c_full = ad.matmul(ad.reshape(c_ax, (1, -1)), S)
        total = c_full if total is None else ad.add(total, c_full)
    return ad.reshape(total, (L,))


def mobilities_tensor(sw, fluid: FluidProperties):
    se = ad.clip(ad.scale(ad.sub(sw, fluid.s_wr), 1.0 / (1.0 - fluid.s_wr - fluid.s_or)), 0.0, 1.0)
    krw = ad.scale(ad.power(se, fluid.n_w), fluid.k0_w)
    kro = ad.scale(ad.power(ad.sub(1.0, se), fluid.n_o), fluid.k0_o)
    return ad.scale(krw, 1.0 / fluid.viscosity_water), ad.scale(kro, 1.0 / fluid.viscosity_oil)


def producer_rates_tensor(pressure, sat_water, table: ConnectionTable, bhp: np.ndarray,
                          fluid: FluidProperties, index=None, multipliers=None):
    """Differentiable producer rates.

    ``pressure`` and ``sat_water`` are tensors (T, n_cells_flat) in Pa and
    fraction. ``index`` (tensor or array, (L,)) overrides the base connection
    indices; ``multipliers`` (tensor or array, (L,)) scales each connection.
    Returns (water, oil) tensors of shape (T, n_producers) in m^3/s.
    """
    T = pressure.shape[0]
    prod = table.producer_ids()
    conn_sel = np.nonzero(np.isin(table.conn_well, prod))[0]
    ncell = pressure.shape[1]
    gather = (np.arange(T)[:, None] * ncell + table.flat[conn_sel][None, :])
    p = ad.take(pressure, gather)
    sw = ad.take(sat_water, gather)
    lw, lo = mobilities_tensor(sw, fluid)
    dd = ad.relu(ad.sub(p, bhp[:, table.conn_well[conn_sel]]))
    cm = ad.as_tensor(table.index if index is None else index)
    if multipliers is not None:
        cm = ad.mul(cm, multipliers)
    cm = ad.reshape(ad.take(cm, conn_sel), (1, -1))
    A = table.aggregation(prod)[conn_sel]
    qw = ad.matmul(ad.mul(ad.mul(cm, lw), dd), A)
    qo = ad.matmul(ad.mul(ad.mul(cm, lo), dd), A)
    return qw, qo


# ---------------------------------------------------------------------------
# rates.csv

def write_rates_csv(path, times, well_names, rates_m3s) -> None:
    """rates_m3s: (T, n_wells, 2) water/oil in m^3/s."""
    path = Path(path)
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(RATES_HEADER)
        for t, row in zip(times, rates_m3s):
            for name, (qw, qo) in zip(well_names, row):
                w.writerow([repr(float(t)), name, "water", repr(float(units.m3s_to_m3day(qw)))])
                w.writerow([repr(float(t)), name, "oil", repr(float(units.m3s_to_m3day(qo)))])


def read_rates_csv(path):
    """Returns ``(times, well_names, rates)`` with rates (T, n_wells, 2) in m^3/day."""
    path = Path(path)
    with path.open(newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != RATES_HEADER:
            raise ValueError(f"{path}: expected header {','.join(RATES_HEADER)}, got {','.join(header)}")
        rows = list(reader)
    times, wells, data = [], [], {}
    for t, well, phase, q in rows:
        t = float(t)
        if t not in data:
            times.append(t)
            data[t] = {}
        if well not in wells:
            wells.append(well)
        data[t][(well, phase)] = float(q)
    out = np.zeros((len(times), len(wells), 2))
    for a, t in enumerate(times):
        for b, well in enumerate(wells):
            out[a, b, 0] = data[t].get((well, "water"), 0.0)
            out[a, b, 1] = data[t].get((well, "oil"), 0.0)
    return np.array(times), wells, out
