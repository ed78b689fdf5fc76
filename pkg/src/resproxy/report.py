"""Plots and metrics for a history-matching result directory."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import svg
from .history import correlation, cumulative, read_loss_curve, window_metrics
from .rates import read_rates_csv

SCHEMA_VERSION = 1


def _load(hm_dir: Path):
    summary = json.loads((hm_dir / "summary.json").read_text())
    t_h, wells_h, hist = read_rates_csv(hm_dir / "history-rates.csv")
    t_p, wells_p, pred = read_rates_csv(hm_dir / "corrected-rates.csv")
    if wells_h != wells_p:
        raise ValueError("history and corrected rates list different wells")
    n = min(len(t_h), len(t_p))
    return summary, t_p[:n], wells_p, hist[:n], pred[:n]


def _step_lengths(times: np.ndarray, t0: float) -> np.ndarray:
    return np.diff(np.concatenate([[t0], times]))


def build_report(hm_dir, out_dir) -> dict:
    """Write cumulative_rates.svg, correlation.svg, loss.svg and metrics.json."""
    hm_dir, out_dir = Path(hm_dir), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary, times, wells, hist, pred = _load(hm_dir)
    n_adapt = int(summary["adapt_steps"])
    dt = _step_lengths(times, float(summary["start_time_day"]))
    prod = [wells.index(name) for name in summary["producers"]]
    t_sep = times[n_adapt - 1] if 0 < n_adapt <= len(times) else None

    # cumulative production over all producers, water and oil
    figs = []
    for ph, name in ((1, "oil"), (0, "water")):
        ch = cumulative(hist[:, prod, ph].sum(axis=1), dt)
        cp = cumulative(pred[:, prod, ph].sum(axis=1), dt)
        f = svg.Figure(f"Cumulative {name} production, all producers", "time, days", "volume, m3")
        f.line(times, ch, "history").line(times, cp, "model")
        if t_sep is not None:
            f.vline(t_sep, "adaptation | prediction")
        figs.append(f)
    for w in prod:
        for ph, name in ((1, "oil"), (0, "water")):
            f = svg.Figure(f"{wells[w]} cumulative {name}", "time, days", "volume, m3")
            f.line(times, cumulative(hist[:, w, ph], dt), "history")
            f.line(times, cumulative(pred[:, w, ph], dt), "model")
            if t_sep is not None:
                f.vline(t_sep)
            figs.append(f)
    svg.save(out_dir / "cumulative_rates.svg", svg.grid(figs, cols=2))

    # correlation of cumulative volumes over the adaptation window, one point per (well, step)
    window = slice(0, n_adapt)
    ch = cumulative(hist[window][:, prod], dt[window])
    cp = cumulative(pred[window][:, prod], dt[window])
    figs = []
    r = {}
    for ph, name in ((1, "oil"), (0, "water")):
        r[name] = correlation(cp[:, :, ph], ch[:, :, ph])
        f = svg.Figure(f"{name}: R = {r[name]:.3f}", "historical cumulative, m3", "model cumulative, m3",
                       width=420, height=400)
        for j, w in enumerate(prod):
            f.scatter(ch[:, j, ph], cp[:, j, ph], wells[w])
        hi = float(max(ch[:, :, ph].max(initial=0.0), cp[:, :, ph].max(initial=0.0)))
        f.line([0.0, hi], [0.0, hi], color="#999", dash=True)
        figs.append(f)
    svg.save(out_dir / "correlation.svg", svg.grid(figs, cols=2))

    curve = read_loss_curve(hm_dir / "loss_curve.csv")
    it = [c["iteration"] for c in curve]
    f = svg.Figure("Adaptation loss", "iteration", "loss", logy=True)
    f.line(it, [c["loss"] for c in curve], "total").line(it, [c["data_loss"] for c in curve], "data", dash=True)
    svg.save(out_dir / "loss.svg", f.render())

    adapt = window_metrics(pred, hist, prod, window, dt)
    metrics = {
        "schema_version": SCHEMA_VERSION,
        "wells": [wells[w] for w in prod],
        "adapt_steps": n_adapt,
        "correlation": {"water": r["water"], "oil": r["oil"]},
        "adaptation": {k: v for k, v in adapt.items() if k.startswith("cum_error")},
        "loss": {"initial": curve[0]["loss"], "final": curve[-1]["loss"],
                 "min": min(c["loss"] for c in curve), "iterations": len(curve) - 1},
    }
    if len(times) > n_adapt:
        fw = slice(n_adapt, len(times))
        fc = window_metrics(pred, hist, prod, fw, dt)
        metrics["forecast"] = {k: v for k, v in fc.items() if k.startswith("cum_error")}
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=1, sort_keys=True))
    return metrics
