"""History matching through the frozen surrogate.

Two sets of adaptation variables are optimised with Adam: additive rock
corrections on a coarse grid (trilinearly upsampled and added to the
normalised statics) and per-connection log multipliers on the inflow rates.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import units
from .fluid import FluidProperties
from .rates import connection_index_tensor, producer_rates_tensor, write_rates_csv
from .reservoir import ReservoirModel
from .surrogate import RolloutInputs, Surrogate, predict
from .training import AdamState, adam_update


class ContractViolation(RuntimeError):
    """The frozen surrogate was modified during adaptation."""


@dataclass
class HMConfig:
    lr: float = 0.3
    weight_decay: float = 5e-4
    factor: int = 4
    init_std: float = 0.01
    max_iter: int = 300
    plateau_window: int = 20
    plateau_tol: float = 0.01
    time_weighting: bool = True
    q_ref: float = 1.0  # m^3/day
    chunk_steps: int = 8
    adapt_rock: bool = True
    adapt_conn: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.factor < 1:
            raise ValueError("factor must be >= 1")
        if self.init_std < 0:
            raise ValueError("init_std must be >= 0")
        if self.q_ref <= 0:
            raise ValueError("q_ref must be positive")
        if self.chunk_steps < 1 or self.plateau_window < 1 or self.max_iter < 0:
            raise ValueError("chunk_steps, plateau_window must be >= 1 and max_iter >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class CorrectionSet:
    rock_corr: np.ndarray  # (4, nz/f, ny/f, nx/f), normalised static units
    log_conn: np.ndarray  # (n_connections,)

    @property
    def multipliers(self) -> np.ndarray:
        return np.exp(self.log_conn)

    def copy(self) -> "CorrectionSet":
        return CorrectionSet(self.rock_corr.copy(), self.log_conn.copy())

    def norm2(self) -> float:
        return float(np.sum(self.rock_corr ** 2) + np.sum(self.log_conn ** 2))

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        self.rock_corr.astype("<f8").tofile(path / "rock_corr.f64")
        self.log_conn.astype("<f8").tofile(path / "log_conn.f64")
        manifest = {"format": "resproxy-corrections", "version": 1,
                    "rock_corr": {"file": "rock_corr.f64", "shape": list(self.rock_corr.shape),
                                  "channels": ["porosity", "log_perm_x", "log_perm_y", "log_perm_z"],
                                  "units": "normalised static (z-score), additive"},
                    "log_conn": {"file": "log_conn.f64", "shape": list(self.log_conn.shape),
                                 "units": "natural log of connection multiplier"}}
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return path

    @classmethod
    def load(cls, path) -> "CorrectionSet":
        path = Path(path)
        mf = json.loads((path / "manifest.json").read_text())
        arrs = []
        for key in ("rock_corr", "log_conn"):
            shape = tuple(mf[key]["shape"])
            a = np.fromfile(path / mf[key]["file"], dtype="<f8")
            if a.size != int(np.prod(shape)):
                raise ValueError(f"{key}: expected {int(np.prod(shape))} values, found {a.size}")
            arrs.append(a.reshape(shape))
        return cls(*arrs)


def coarse_shape(grid_shape, factor: int) -> tuple:
    return tuple(-(-n // factor) for n in grid_shape)


def init_corrections(grid_shape, n_connections: int, std: float, seed: int,
                     factor: int = 4) -> CorrectionSet:
    if std < 0:
        raise ValueError("noise std must be >= 0")
    rng = np.random.Generator(np.random.Philox(seed))
    rock = rng.normal(0.0, std, size=(4,) + coarse_shape(grid_shape, factor)) if std else \
        np.zeros((4,) + coarse_shape(grid_shape, factor))
    conn = rng.normal(0.0, std, size=n_connections) if std else np.zeros(n_connections)
    return CorrectionSet(rock, conn)


def apply_rock_correction(static_norm, rock_corr, factor: int, active: np.ndarray,
                          padded_shape=None) -> ad.Tensor:
    """Corrected normalised static cube [1, 4, Dp, Hp, Wp] (grid cropped, then re-padded)."""
    static_norm = ad.as_tensor(static_norm)
    up = ad.trilinear_upsample(ad.reshape(ad.as_tensor(rock_corr), (1,) + tuple(rock_corr.shape)), factor)
    D, H, W = active.shape
    if up.shape[2:] != (D, H, W):
        up = ad.getitem(up, (Ellipsis, slice(0, D), slice(0, H), slice(0, W)))
    up = ad.where_mask(up, active.astype(np.float64)[None, None])
    padded_shape = tuple(static_norm.shape[2:]) if padded_shape is None else tuple(padded_shape)
    if padded_shape != (D, H, W):
        up = ad.pad(up, [(0, 0), (0, 0)] + [(0, p - n) for p, n in zip(padded_shape, (D, H, W))])
    return ad.add(static_norm, up)


def time_weights(T: int, enabled: bool = True) -> np.ndarray:
    """Linear weights 2t/(T+1), t = 1..T (mean 1)."""
    if not enabled:
        return np.ones(T)
    t = np.arange(1, T + 1, dtype=np.float64)
    return 2.0 * t / (T + 1)


def _log_rates(q_m3s, q_ref: float):
    return ad.log1p(ad.scale(q_m3s, units.DAY / q_ref))


def data_loss(qw, qo, hist: np.ndarray, weights: np.ndarray, q_ref: float) -> ad.Tensor:
    """Σ_t w_t · mean over wells and phases of squared log1p rate mismatch.

    ``qw``/``qo`` are tensors (T, n_producers) in m^3/s; ``hist`` is
    (T, n_producers, 2) in m^3/day.
    """
    hist = np.asarray(hist, dtype=np.float64)
    if np.any(hist < 0):
        raise ValueError("historical producer rates must be non-negative")
    if hist.shape[:2] != tuple(qw.shape) or hist.shape[:2] != tuple(qo.shape):
        raise ValueError(f"history {hist.shape} does not align with predictions {qw.shape}")
    n = hist.shape[1] * 2
    w = (np.asarray(weights, dtype=np.float64) / n)[:, None]
    ew = ad.sub(_log_rates(qw, q_ref), np.log1p(hist[:, :, 0] / q_ref))
    eo = ad.sub(_log_rates(qo, q_ref), np.log1p(hist[:, :, 1] / q_ref))
    return ad.add(ad.sum(ad.mul(ad.square(ew), w)), ad.sum(ad.mul(ad.square(eo), w)))


def hm_loss(qw, qo, hist, weights, corrections: CorrectionSet | None, wd: float, q_ref: float = 1.0,
            rock=None, log_conn=None) -> ad.Tensor:
    """Data mismatch plus ``wd * (|rock|^2 + |log_conn|^2)``.

    The regulariser is built from ``rock``/``log_conn`` tensors when given,
    otherwise from the constant arrays in ``corrections``.
    """
    loss = data_loss(qw, qo, hist, weights, q_ref)
    if wd:
        rock = corrections.rock_corr if rock is None else rock
        log_conn = corrections.log_conn if log_conn is None else log_conn
        reg = ad.add(ad.sum(ad.square(rock)), ad.sum(ad.square(log_conn)))
        loss = ad.add(loss, ad.scale(reg, wd))
    return loss


@dataclass
class HMResult:
    corrections: CorrectionSet  # best iterate
    loss_curve: list  # dicts: iteration, loss, data_loss, reg_loss
    best_iteration: int
    stopped: str  # "plateau" | "max_iter"
    seconds: float


class HMProblem:
    """Surrogate, model and history bundled for repeated rollouts."""

    def __init__(self, surrogate: Surrogate, model: ReservoirModel, fluid: FluidProperties,
                 history: np.ndarray, steps: int, schedule=None):
        self.surrogate = surrogate
        self.model = model
        self.fluid = fluid
        self.steps = steps
        self.inp = RolloutInputs(surrogate, model, steps, schedule)
        prod = self.inp.table.producer_ids()
        history = np.asarray(history, dtype=np.float64)
        if history.shape[0] < steps:
            raise ValueError(f"history has {history.shape[0]} report steps, adaptation needs {steps}")
        self.history = history[:steps][:, prod, :]
        self.active = model.grid.active

    @property
    def n_connections(self) -> int:
        return self.inp.table.n

class _frozen:
    """Eval mode and no weight gradients for the duration of a block."""

    def __init__(self, surrogate: Surrogate):
        self.s = surrogate

    def __enter__(self):
        self.training = self.s.training
        self.flags = {k: p.requires_grad for k, p in self.s.parameters().items()}
        self.s.eval()
        for p in self.s.parameters().values():
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        self.s.training = self.training
        for k, p in self.s.parameters().items():
            p.requires_grad = self.flags[k]
        return False


def _predict_tape(surrogate: Surrogate, inp: RolloutInputs, fluid, static, log_conn):
    """``predict`` on the float64 tape path even when gradients are off."""
    prev = ad.is_grad_enabled()
    with ad.enable_grad():
        out = predict(surrogate, inp, fluid, static_norm=static, log_mult=log_conn)
    if not prev:
        out = tuple(None if t is None else ad.Tensor(t.data) for t in out)
    return out


def _chunk_pass(problem: HMProblem, rock: ad.Tensor, log_conn: ad.Tensor, cfg: HMConfig,
                weights: np.ndarray):
    """One sweep over the window: per-chunk forward/backward with gradient accumulation.

    The latent state is carried between chunks without gradient; statics and
    connection indices are rebuilt from the corrections in every chunk so all
    chunks contribute gradients to both correction tensors.
    """
    s = problem.surrogate
    inp = problem.inp
    tab = inp.table
    ncell = int(np.prod(s.cfg.grid_shape))
    z = ad.Tensor(s.encode_state(ad.Tensor(inp.s0[None])).data)
    total = 0.0
    for start in range(0, problem.steps, cfg.chunk_steps):
        n = min(cfg.chunk_steps, problem.steps - start)
        static = apply_rock_correction(ad.Tensor(inp.static[None]), rock, cfg.factor, problem.active)
        theta = s.encode_static(static)
        u_hat = s.encode_control(ad.Tensor(inp.control_cubes[start:start + n]))
        zs = s.integrate(z, u_hat, theta, n)
        dec = s.decode_state(ad.concat(zs[1:], axis=0), problem.active)
        phys = s.denormalize_state(dec, problem.active)
        p = ad.reshape(ad.getitem(phys, (slice(None), 0)), (n, ncell))
        sw = ad.reshape(ad.getitem(phys, (slice(None), 1)), (n, ncell))
        logk = s.denormalize_static_logk(static)
        gather = (np.arange(3)[:, None] * ncell + tab.flat[None, :]).reshape(-1)
        cidx = connection_index_tensor(ad.reshape(ad.take(logk, gather), (3, tab.n)), tab,
                                       problem.model.grid.cell_size)
        qw, qo = producer_rates_tensor(p, sw, tab, inp.report_bhp[start:start + n], problem.fluid,
                                       index=cidx, multipliers=ad.exp(log_conn))
        loss = data_loss(qw, qo, problem.history[start:start + n], weights[start:start + n], cfg.q_ref)
        total += loss.item()
        if not math.isfinite(total):
            raise FloatingPointError(f"non-finite loss in chunk starting at step {start}")
        ad.backward(loss)
        z = ad.Tensor(zs[-1].data)
    return total


def adapt(surrogate: Surrogate, model: ReservoirModel, fluid: FluidProperties, history: np.ndarray,
          steps: int, cfg: HMConfig | None = None, init: CorrectionSet | None = None,
          progress=None) -> HMResult:
    """Fit rock and connectivity corrections to ``history`` over ``steps`` report steps.

    ``history`` is (T, n_wells, 2) water/oil in m^3/day on the model's wells
    (injector rows are ignored). The surrogate is used in eval mode and must
    come back bit-identical.
    """
    cfg = cfg or HMConfig()
    cfg.validate()
    if not (cfg.adapt_rock or cfg.adapt_conn):
        raise ValueError("nothing to adapt: both correction sets are frozen")
    t0 = time.perf_counter()
    before = surrogate.snapshot()
    problem = HMProblem(surrogate, model, fluid, history, steps)
    grid_shape = model.grid.shape
    start = init.copy() if init is not None else init_corrections(
        grid_shape, problem.n_connections, cfg.init_std, cfg.seed, cfg.factor)
    if not cfg.adapt_rock:
        start.rock_corr = np.zeros_like(start.rock_corr)
    if not cfg.adapt_conn:
        start.log_conn = np.zeros_like(start.log_conn)
    rock = ad.Tensor(start.rock_corr.copy(), requires_grad=cfg.adapt_rock)
    log_conn = ad.Tensor(start.log_conn.copy(), requires_grad=cfg.adapt_conn)
    weights = time_weights(steps, cfg.time_weighting)
    opt = AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    curve, best, best_it, best_set = [], math.inf, 0, None
    stopped = "max_iter"
    try:
        with _frozen(surrogate):
            for it in range(cfg.max_iter + 1):
                rock.zero_grad()
                log_conn.zero_grad()
                dl = _chunk_pass(problem, rock, log_conn, cfg, weights)
                reg = cfg.weight_decay * (float(np.sum(rock.data ** 2)) + float(np.sum(log_conn.data ** 2)))
                loss = dl + reg
                if not math.isfinite(loss):
                    raise FloatingPointError(f"non-finite history-matching loss at iteration {it}")
                curve.append({"iteration": it, "loss": loss, "data_loss": dl, "reg_loss": reg})
                if progress is not None:
                    progress(curve[-1])
                if loss < best:
                    best, best_it = loss, it
                    best_set = CorrectionSet(rock.data.copy(), log_conn.data.copy())
                if _plateau([c["loss"] for c in curve], cfg.plateau_window, cfg.plateau_tol):
                    stopped = "plateau"
                    break
                if it == cfg.max_iter:
                    break
                params, grads = {}, {}
                if cfg.adapt_rock:
                    params["rock"], grads["rock"] = rock.data, rock.grad
                if cfg.adapt_conn:
                    params["conn"], grads["conn"] = log_conn.data, log_conn.grad
                adam_update(params, grads, opt)
    finally:
        _check_unchanged(surrogate, before)
    return HMResult(best_set, curve, best_it, stopped, time.perf_counter() - t0)


def _plateau(losses: list, window: int, tol: float) -> bool:
    """Best loss of the last ``window`` iterations improves on the earlier best by < tol."""
    if len(losses) <= window:
        return False
    prev = min(losses[:-window])
    recent = min(losses[-window:])
    return (prev - recent) < tol * abs(prev)


def _check_unchanged(surrogate: Surrogate, before: dict) -> None:
    after = surrogate.snapshot()
    for k, v in before.items():
        w = after[k]
        if (v is None) != (w is None) or (v is not None and not np.array_equal(v, w)):
            raise ContractViolation(f"surrogate state {k} changed during adaptation")


def ablate(surrogate, model, fluid, history, steps, cfg: HMConfig | None = None, mode: str = "rock",
           progress=None) -> HMResult:
    """Adapt only rock (``mode="rock"``) or only connectivity (``mode="conn"``) corrections."""
    if mode not in ("rock", "conn"):
        raise ValueError(f"ablation mode must be 'rock' or 'conn', got {mode!r}")
    base = cfg or HMConfig()
    cfg = HMConfig(**{**base.to_dict(), "adapt_rock": mode == "rock", "adapt_conn": mode == "conn"})
    return adapt(surrogate, model, fluid, history, steps, cfg, progress=progress)


# ---------------------------------------------------------------------------
# evaluation helpers


def corrected_rates(surrogate: Surrogate, model: ReservoirModel, fluid: FluidProperties,
                    corrections: CorrectionSet, steps: int, factor: int = 4) -> np.ndarray:
    """Per-well rates (steps, n_wells, 2) in m^3/day with corrections applied."""
    inp = RolloutInputs(surrogate, model, steps)
    with _frozen(surrogate):
        with ad.no_grad():
            static = apply_rock_correction(ad.Tensor(inp.static[None]), corrections.rock_corr, factor,
                                           model.grid.active)
            _, qw, qo = _predict_tape(surrogate, inp, fluid, static, ad.Tensor(corrections.log_conn))
    tab = inp.table
    out = np.zeros((steps, len(tab.wells), 2))
    prod = tab.producer_ids()
    out[:, prod, 0] = units.m3s_to_m3day(qw.data)
    out[:, prod, 1] = units.m3s_to_m3day(qo.data)
    for w, kind in enumerate(tab.kinds):
        if kind == "injector":
            out[:, w, 0] = -inp.report_inj[:, w]
    return out


def cumulative(rates_m3day: np.ndarray, dt_days) -> np.ndarray:
    """Running cumulative volumes (m^3) from piecewise-constant report-step rates."""
    dt = np.broadcast_to(np.asarray(dt_days, dtype=np.float64), rates_m3day.shape[:1])
    return np.cumsum(rates_m3day * dt.reshape((-1,) + (1,) * (rates_m3day.ndim - 1)), axis=0)


def correlation(pred: np.ndarray, hist: np.ndarray) -> float:
    """Pearson R of two equally shaped arrays (flattened); 0 when either is constant."""
    a, b = np.ravel(pred).astype(float), np.ravel(hist).astype(float)
    a, b = a - a.mean(), b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b / den) if den > 0 else 0.0


def window_metrics(pred: np.ndarray, hist: np.ndarray, producers, window: slice, dt_days) -> dict:
    """Per-phase R over (well, time) cumulative pairs and relative cumulative error.

    Volumes accumulate from the first report step, as on a cumulative
    production plot; R uses the points inside ``window`` and the error is
    taken at its last step. ``dt_days`` is a scalar or one length per step.
    """
    stop = range(pred.shape[0])[window][-1] + 1
    dt = np.broadcast_to(np.asarray(dt_days, dtype=np.float64), (pred.shape[0],))[:stop]
    p = cumulative(pred[:stop][:, producers], dt)[window]
    h = cumulative(hist[:stop][:, producers], dt)[window]
    out = {}
    for ph, name in ((0, "water"), (1, "oil")):
        out[f"r_{name}"] = correlation(p[:, :, ph], h[:, :, ph])
        den = float(np.abs(h[-1, :, ph]).sum())
        out[f"cum_error_{name}"] = float(np.abs(p[-1, :, ph] - h[-1, :, ph]).sum() / den) if den > 0 else 0.0
    den = float(np.abs(h[-1]).sum())
    out["cum_error"] = float(np.abs(p[-1] - h[-1]).sum() / den) if den > 0 else 0.0
    return out


def write_loss_curve(path, curve) -> None:
    with Path(path).open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "loss", "data_loss", "reg_loss"])
        for c in curve:
            w.writerow([c["iteration"], repr(c["loss"]), repr(c["data_loss"]), repr(c["reg_loss"])])


def read_loss_curve(path) -> list:
    with Path(path).open(newline="") as f:
        return [{"iteration": int(r["iteration"]), "loss": float(r["loss"]),
                 "data_loss": float(r["data_loss"]), "reg_loss": float(r["reg_loss"])}
                for r in csv.DictReader(f)]


def save_result(out_dir, result: HMResult, cfg: HMConfig, model: ReservoirModel, history_m3day: np.ndarray,
                pred_m3day: np.ndarray, adapt_steps: int, times) -> dict:
    """Write the hm_result directory and return the summary dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.corrections.save(out_dir / "corrections")
    write_loss_curve(out_dir / "loss_curve.csv", result.loss_curve)
    names = [w.name for w in model.wells]
    n = pred_m3day.shape[0]
    write_rates_csv(out_dir / "corrected-rates.csv", times[:n], names, units.m3day_to_m3s(pred_m3day))
    write_rates_csv(out_dir / "history-rates.csv", times[:history_m3day.shape[0]], names,
                    units.m3day_to_m3s(history_m3day))
    prod = [i for i, w in enumerate(model.wells) if w.kind == "producer"]
    dt = np.diff(np.concatenate([[model.schedule.times[0]], np.asarray(times[:n], float)]))
    adapt_m = window_metrics(pred_m3day, history_m3day, prod, slice(0, adapt_steps), dt)
    per_well = {}
    for w in prod:
        per_well[names[w]] = window_metrics(pred_m3day, history_m3day, [w], slice(0, adapt_steps), dt)
    summary = {
        "initial_loss": result.loss_curve[0]["loss"],
        "final_loss": result.loss_curve[-1]["loss"],
        "best_loss": result.loss_curve[result.best_iteration]["loss"],
        "best_iteration": result.best_iteration,
        "iterations": len(result.loss_curve) - 1,
        "stopped": result.stopped,
        "seconds": result.seconds,
        "adapt_steps": adapt_steps,
        "start_time_day": float(model.schedule.times[0]),
        "producers": [names[w] for w in prod],
        "report_times_day": [float(t) for t in times[:n]],
        "adaptation": adapt_m,
        "per_well": per_well,
        "config": cfg.to_dict(),
    }
    if n > adapt_steps:
        summary["forecast"] = window_metrics(pred_m3day, history_m3day, prod, slice(adapt_steps, n), dt)
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
    return summary
