"""End-to-end acceptance suite.

Each criterion prints one PASS/FAIL line (also collected in the terminal
summary). Criteria 4 to 6 share one twin experiment: a 20-scenario dataset
on the 16x16x8 field, a surrogate trained on 19 scenarios with the last one
held out, and history matching against oracle rates of the truth model.
"""
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resproxy import datagen, oracle, training, twin, units
from resproxy import history as H
from resproxy.datagen import GenConfig, ScheduleGenParams
from resproxy.fluid import FluidProperties
from resproxy.rates import peaceman_radius
from resproxy.reservoir import ControlSchedule, load_model, save_model
from resproxy.surrogate import Surrogate, simulate

from helpers import ALL_CASES, grad_error, report_criterion, tiny_config, tiny_model, tiny_surrogate

FLUID = FluidProperties()
MD = units.MILLIDARCY
N_SCENARIOS = 20
DATA_SEED = 7
ADAPT, FORECAST = 16, 8
PRODUCERS = [0, 1, 2]
DT_DAYS = 10.0


# ---------------------------------------------------------------------------
# 1. gradient suite

def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    worst, worst_case = 0.0, None
    for name in ALL_CASES:
        for seed in range(20):
            err = grad_error(name, seed)
            if not err <= worst:
                worst, worst_case = err, (name, seed)
    secs = time.perf_counter() - t0
    ok = worst < 1e-4 and secs < 120
    report_criterion(1, ok, f"{len(ALL_CASES)} cases x 20 seeds, worst rel error {worst:.2e} "
                            f"({worst_case[0]}, seed {worst_case[1]}), {secs:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# 2. Peaceman analytics

def test_criterion_2_peaceman():
    iso = [abs(peaceman_radius(d, d, 80 * MD, 80 * MD) - 0.28 * d * math.sqrt(2) / 2)
           for d in (1.0, 25.0, 100.0)]
    # independent recomputation: sqrt(k2/k1) = 1/2, r0 = 0.28 * 100 sqrt(5/2) / (3 / sqrt 2)
    aniso = abs(peaceman_radius(100.0, 100.0, 200 * MD, 50 * MD) - 28.0 * math.sqrt(5.0) / 3.0)
    ok = max(iso) < 1e-12 and aniso < 1e-6
    report_criterion(2, ok, f"isotropic max dev {max(iso):.1e}, anisotropic dev {aniso:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. oracle physics on the 16x16x8 twin

def test_criterion_3_oracle_physics():
    model = twin.base_model()
    t0 = time.perf_counter()
    r = oracle.run(model, FLUID)
    secs = time.perf_counter() - t0
    water = (r.in_place_initial[0] - r.in_place_final[0]) - (r.produced[0] - r.injected)
    oil = (r.in_place_initial[1] - r.in_place_final[1]) - r.produced[1]
    mb = max(abs(water) / r.produced[0], abs(oil) / r.produced[1])

    still = model.copy()
    still.wells = []
    still.schedule = ControlSchedule(model.schedule.times.copy(), {}, {})
    s = oracle.run(still, FLUID).states[-1]
    p0, sw0 = model.initial_state.pressure, model.initial_state.sat_water
    fixed = max(np.max(np.abs(s.pressure - p0) / p0), np.max(np.abs(s.sat_water - sw0)))

    ok = mb < 1e-6 and fixed < 1e-12 and r.max_residual < 1e-10 and secs < 60
    report_criterion(3, ok, f"material balance {mb:.1e}, no-well drift {fixed:.1e}, "
                            f"pressure residual {r.max_residual:.1e}, run {secs:.1f} s")
    assert ok


# ---------------------------------------------------------------------------
# shared twin experiment

@pytest.fixture(scope="module")
def twin_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("twin") / "data"
    base = twin.base_model()
    t0 = time.perf_counter()
    datagen.build_dataset(base, FLUID, N_SCENARIOS, GenConfig(), DATA_SEED, root)
    gen_secs = time.perf_counter() - t0
    ds = datagen.load_dataset(root)
    assert len(ds) == N_SCENARIOS
    return base, ds, gen_secs


@pytest.fixture(scope="module")
def trained(twin_data):
    _, ds, _ = twin_data
    return training.fit(ds.scenarios[:-1], training.TrainConfig(seed=0))


@pytest.fixture(scope="module")
def twin_b(twin_data, trained):
    base, _, _ = twin_data
    truth = twin.truth_model(base)
    hist = units.m3s_to_m3day(oracle.run(truth, FLUID).rates)
    sg = trained.model
    before = sg.snapshot()
    t0 = time.perf_counter()
    joint = H.adapt(sg, base, FLUID, hist, ADAPT, H.HMConfig())
    secs = time.perf_counter() - t0
    pred = H.corrected_rates(sg, base, FLUID, joint.corrections, ADAPT + FORECAST)
    rock = H.ablate(sg, base, FLUID, hist, ADAPT, H.HMConfig(), mode="rock")
    conn = H.ablate(sg, base, FLUID, hist, ADAPT, H.HMConfig(), mode="conn")
    return dict(hist=hist, joint=joint, pred=pred, rock=rock, conn=conn, secs=secs, before=before,
                after=sg.snapshot())


def _best_loss(res) -> float:
    return res.loss_curve[res.best_iteration]["loss"]


# ---------------------------------------------------------------------------
# 4. surrogate fidelity and speed

def test_criterion_4_surrogate_fidelity(twin_data, trained):
    _, ds, _ = twin_data
    test = ds.scenarios[-1]
    sg = trained.model
    steps = test.states.shape[0] - 1
    act = test.model.grid.active
    out = simulate(sg, test.model, ds.fluid, steps)
    p, pt = out.states[-1, 0][act], test.states[-1, 0][act]
    p_rel = float(np.linalg.norm(p - pt) / np.linalg.norm(pt))
    sw_mae = float(np.mean(np.abs(out.states[-1, 1][act] - test.states[-1, 1][act])))

    t_sur = min(_timed(lambda: simulate(sg, test.model, ds.fluid, steps)) for _ in range(3))
    t_orc = min(_timed(lambda: oracle.run(test.model, ds.fluid)) for _ in range(2))
    speed = t_orc / t_sur

    ok = p_rel < 0.15 and sw_mae < 0.05 and speed >= 20 and trained.seconds < 1800
    report_criterion(4, ok, f"held-out p rel {p_rel:.3f}, sw MAE {sw_mae:.4f}, rollout {speed:.1f}x faster "
                            f"than oracle, training {trained.seconds / 60:.1f} min")
    assert ok


def _timed(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


# ---------------------------------------------------------------------------
# 5. history matching on twin B

def test_criterion_5_history_matching(twin_b):
    hist, pred, joint = twin_b["hist"], twin_b["pred"], twin_b["joint"]
    ratio = _best_loss(joint) / joint.loss_curve[0]["loss"]
    adapt = H.window_metrics(pred, hist, PRODUCERS, slice(0, ADAPT), DT_DAYS)
    full = H.window_metrics(pred, hist, PRODUCERS, slice(0, ADAPT + FORECAST), DT_DAYS)
    # per-well R as well as pooled over wells
    cp = H.cumulative(pred[:ADAPT], DT_DAYS)
    ch = H.cumulative(hist[:ADAPT], DT_DAYS)
    per_well = min(H.correlation(cp[:, w, ph], ch[:, w, ph]) for w in PRODUCERS for ph in (0, 1))
    r_min = min(adapt["r_water"], adapt["r_oil"], per_well)
    growth = full["cum_error"] / adapt["cum_error"]

    ok = ratio <= 0.2 and r_min >= 0.9 and growth <= 2.0 and twin_b["secs"] < 1200
    report_criterion(5, ok, f"loss ratio {ratio:.3f} after {len(joint.loss_curve) - 1} iterations "
                            f"({joint.stopped}), min R {r_min:.4f}, cumulative error adapt "
                            f"{adapt['cum_error']:.4f} -> forecast end {full['cum_error']:.4f} "
                            f"({growth:.2f}x), {twin_b['secs']:.0f} s")
    assert ok


# ---------------------------------------------------------------------------
# 6. ablation ordering

def test_criterion_6_ablation_ordering(twin_b):
    joint, rock, conn = (_best_loss(twin_b[k]) for k in ("joint", "rock", "conn"))
    init = twin_b["joint"].loss_curve[0]["loss"]
    ok = joint <= 1.05 * min(rock, conn) and rock < init and conn < init
    report_criterion(6, ok, f"final loss joint {joint:.4g}, rock-only {rock:.4g}, conn-only {conn:.4g} "
                            f"(initial {init:.4g})")
    assert ok


# ---------------------------------------------------------------------------
# 7. structural invariants

@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-700.0, 700.0), min_size=1, max_size=30))
def test_connectivity_multipliers_positive(logs):
    m = H.CorrectionSet(np.zeros((4, 1, 1, 1)), np.array(logs)).multipliers
    assert np.all(m > 0) and np.all(np.isfinite(m))


def _same_snapshot(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(
        (a[k] is None and b[k] is None) or np.array_equal(a[k], b[k]) for k in a)


def _tree_bytes(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_7_structural_invariants(twin_data, trained, twin_b, tmp_path):
    checks = {}
    results = [twin_b[k] for k in ("joint", "rock", "conn")]
    checks["multipliers > 0"] = all(np.all(r.corrections.multipliers > 0) for r in results)
    checks["weights untouched by adapt"] = _same_snapshot(twin_b["before"], twin_b["after"])

    # round trips
    base, ds, _ = twin_data
    m2 = load_model(save_model(base, tmp_path / "m"))
    checks["model round trip"] = _tree_bytes(save_model(m2, tmp_path / "m2")) == _tree_bytes(tmp_path / "m")
    sc = ds.scenarios[0]
    r = oracle.run(sc.model, ds.fluid)
    stored = np.stack([sc.model.initial_state.as_cube()] + [s.as_cube() for s in r.states])
    checks["dataset round trip"] = np.array_equal(stored, sc.states) and np.array_equal(
        units.m3s_to_m3day(r.rates), sc.rates)
    sg2 = Surrogate.load(trained.model.save(tmp_path / "sg"))
    checks["surrogate round trip"] = _same_snapshot(trained.model.snapshot(), sg2.snapshot())

    # determinism under fixed seeds
    small = GenConfig(schedule=ScheduleGenParams(horizon_days=40.0))
    a = datagen.build_dataset(base, FLUID, 2, small, 3, tmp_path / "da")
    b = datagen.build_dataset(base, FLUID, 2, small, 3, tmp_path / "db")
    checks["dataset determinism"] = _tree_bytes(a) == _tree_bytes(b)
    tiny = datagen.load_dataset(a).scenarios
    cfg = training.TrainConfig(epochs=2, seed=5, bn_warmup_epochs=1)
    mc = tiny_config(tuple(base.grid.shape), inference_dtype="float32")
    fa, fb = training.fit(tiny, cfg, mc), training.fit(tiny, cfg, mc)
    checks["training determinism"] = fa.history == fb.history and _same_snapshot(
        fa.model.snapshot(), fb.model.snapshot())
    model = tiny_model()
    sg = tiny_surrogate(model=model)
    hist = np.abs(np.random.default_rng(0).normal(40.0, 10.0, (4, 3, 2)))
    hc = H.HMConfig(max_iter=5)
    ha, hb = H.adapt(sg, model, FLUID, hist, 4, hc), H.adapt(sg, model, FLUID, hist, 4, hc)
    checks["history matching determinism"] = [c["loss"] for c in ha.loss_curve] == [
        c["loss"] for c in hb.loss_curve] and np.array_equal(ha.corrections.log_conn, hb.corrections.log_conn)

    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    report_criterion(7, ok, f"{len(checks)} invariants checked" + (f", failed: {failed}" if failed else ""))
    assert ok
